use crate::float::Float;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Float> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: Vec<Vec<F>>,
    pub second: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(store: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![F::zero(); t.len()]).collect();
        Self {
            config,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update from the store's gradient slots, then clears them.
    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let step_size = F::of(lr / c1);
        let c2_sqrt = F::of(c2.sqrt());
        let eps = F::of(eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[F]>::to_vec) else { continue };
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            for (k, x) in t.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (F::one() - b1) * g[k];
                v[k] = b2 * v[k] + (F::one() - b2) * g[k] * g[k];
                *x -= step_size * m[k] / (v[k].sqrt() / c2_sqrt + eps);
            }
            t.zero_grad();
        }
    }
}
