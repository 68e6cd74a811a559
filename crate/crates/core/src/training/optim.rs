use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

/// Gradients of every parameter in store order; `None` means zero.
pub type Grads<T> = Vec<Option<Vec<T>>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments kept at the parameter width.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for ((name, _), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2, one) = (T::of(beta1), T::of(beta2), T::one());
        let (lr_t, eps_t, c1_t, c2_t) = (T::of(lr), T::of(eps), T::of(c1), T::of(c2));
        for (i, (_, p)) in params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            match &grads[i] {
                Some(g) => {
                    for j in 0..data.len() {
                        m[j] = b1 * m[j] + (one - b1) * g[j];
                        v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                        let mh = m[j] / c1_t;
                        let vh = v[j] / c2_t;
                        data[j] -= lr_t * mh / (vh.sqrt() + eps_t);
                    }
                }
                None => {
                    for j in 0..data.len() {
                        m[j] *= b1;
                        v[j] *= b2;
                        data[j] -= lr_t * (m[j] / c1_t) / ((v[j] / c2_t).sqrt() + eps_t);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Global l2 norm of all gradients.
pub fn grad_norm<T: Real>(grads: &Grads<T>) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}
