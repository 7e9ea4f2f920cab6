use crate::{ParamStore, Real, Tensor};

/// Adam with bias correction.
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Update every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of all present gradients.
pub fn grad_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> T {
    grads.iter().flatten().map(Tensor::sq_norm).sum::<T>().sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: T) -> T {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
