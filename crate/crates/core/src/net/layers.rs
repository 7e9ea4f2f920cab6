use e2v_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal weights `N(0, 2 / fan_in)`.
pub(crate) fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Tensor::from_fn(shape, |_| T::lit(d.sample(rng)))
}

/// Square convolution with "same" padding for stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.w).shape()[0]
    }
}

/// Per-channel `(mean, var)` of one training batch.
pub type BnStats<T> = (Vec<T>, Vec<T>);

/// Batch normalisation with affine parameters and running statistics.
/// Training normalises over (N, H, W) of the current batch; evaluation uses
/// the running averages.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[1, channels, 1, 1]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, channels, 1, 1]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[1, channels, 1, 1]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[1, channels, 1, 1]), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Returns the output and, in training mode, the batch statistics.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, training: bool) -> (Var, Option<BnStats<T>>) {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (normed, stats) = if training {
            let (y, s) = g.batch_norm(x, T::lit(self.eps));
            (y, Some((s.mean, s.var)))
        } else {
            let rm = g.param(store, self.running_mean);
            let rv = g.param(store, self.running_var);
            let centred = g.sub(x, rm);
            let sd = g.shift(rv, T::lit(self.eps));
            let sd = g.sqrt(sd);
            (g.div(centred, sd), None)
        };
        let scaled = g.mul(normed, gamma);
        (g.add(scaled, beta), stats)
    }

    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, mean: &[T], var: &[T]) {
        let m = T::lit(self.momentum);
        for (r, &v) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * v;
        }
        for (r, &v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * v;
        }
    }
}
