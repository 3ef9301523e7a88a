use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

/// Adam with the conventional moment coefficients (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating the individual tensors.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut ArrayD<f64>, grad: &ArrayD<f64>) {
        assert_eq!(param.shape(), grad.shape(), "adam: gradient shape for {name}");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step.max(1));
        let c2 = 1.0 - b2.powi(self.step.max(1));
        let (lr, eps) = (self.lr, self.eps);
        Zip::from(param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
}
