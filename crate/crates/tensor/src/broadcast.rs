//! Elementwise binary ops with numpy-style broadcasting (rank <= 4).

use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    assert!(shape.len() <= 4, "broadcasting supports rank <= 4, got {:?}", shape);
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Strides over a padded shape with zeros on broadcast (size-1) axes.
fn bstrides(shape4: [usize; 4], out4: [usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if shape4[d] == 1 && out4[d] != 1 { 0 } else { acc };
        acc *= shape4[d];
    }
    st
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad4(a), pad4(b));
    let mut out = Vec::with_capacity(rank);
    for d in 4 - rank..4 {
        let (x, y) = (pa[d], pb[d]);
        assert!(x == y || x == 1 || y == 1, "cannot broadcast {:?} with {:?}", a, b);
        out.push(x.max(y));
    }
    out
}

fn for_each_index(out4: [usize; 4], sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for i0 in 0..out4[0] {
        for i1 in 0..out4[1] {
            for i2 in 0..out4[2] {
                let ra = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let rb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out4[3] {
                    f(o, ra + i3 * sa[3], rb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub fn binary_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| op.apply(x, y));
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let out4 = pad4(&shape);
    let sa = bstrides(pad4(a.shape()), out4);
    let sb = bstrides(pad4(b.shape()), out4);
    let mut out = Tensor::zeros(&shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_index(out4, sa, sb, |o, ia, ib| od[o] = op.apply(ad[ia], bd[ib]));
    out
}

/// Gradients of `op(a, b)` w.r.t. both operands, reduced to their shapes.
pub fn binary_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: BinOp,
    dy: &Tensor<T>,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let mut da = need.0.then(|| Tensor::zeros(a.shape()));
    let mut db = need.1.then(|| Tensor::zeros(b.shape()));
    let out4 = pad4(dy.shape());
    let sa = bstrides(pad4(a.shape()), out4);
    let sb = bstrides(pad4(b.shape()), out4);
    let (ad, bd, gd) = (a.data(), b.data(), dy.data());
    for_each_index(out4, sa, sb, |o, ia, ib| {
        let g = gd[o];
        let (ga, gb) = match op {
            BinOp::Add => (g, g),
            BinOp::Sub => (g, -g),
            BinOp::Mul => (g * bd[ib], g * ad[ia]),
            BinOp::Div => (g / bd[ib], -g * ad[ia] / (bd[ib] * bd[ib])),
        };
        if let Some(da) = da.as_mut() {
            da.data_mut()[ia] += ga;
        }
        if let Some(db) = db.as_mut() {
            db.data_mut()[ib] += gb;
        }
    });
    (da, db)
}
