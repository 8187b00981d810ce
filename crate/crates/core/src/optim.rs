//! Adaptive-moment optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar};

#[derive(Debug, Clone)]
pub struct OptState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn with_defaults(params: &ParamSet<T>) -> Self {
        Self::new(params, 1e-3)
    }

    /// Returns the updated parameters; the moment accumulators advance in place.
    pub fn step(&mut self, params: &ParamSet<T>, grads: &ParamSet<T>) -> Result<ParamSet<T>> {
        params.check_same_shapes(grads)?;
        params
            .check_same_shapes(&self.m)
            .map_err(|e| Error::Contract(format!("optimizer state does not match parameters: {e}")))?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let mut out = params.clone();
        for (name, p) in out.iter_mut() {
            let g = &grads.get(name).expect("checked").data;
            let m = &mut self.m.get_mut(name).expect("checked").data;
            let v = &mut self.v.get_mut(name).expect("checked").data;
            for i in 0..p.data.len() {
                let gi = g[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.data[i] = T::of(p.data[i].f64() - upd);
            }
        }
        Ok(out)
    }
}
