use std::collections::HashMap;

use perpeft_autodiff::{Parameter, Tensor};

/// Adam with decoupled weight decay. State is keyed by parameter name, so
/// group-specific modules keep their own moments while shared components
/// accumulate across groups.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: i32,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Applies one update to `p` if it holds a gradient, then clears it.
    /// Returns whether an update happened.
    pub fn step(&mut self, p: &mut Parameter) -> bool {
        let Some(grad) = p.take_grad() else {
            return false;
        };
        if self.lr == 0.0 {
            return true;
        }
        let st = self
            .state
            .entry(p.name().to_string())
            .or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                step: 0,
            });
        st.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(st.step);
        let c2 = 1.0 - b2.powi(st.step);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        let w = p.value_mut().data_mut();
        let (m, v) = (st.m.data_mut(), st.v.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            w[i] *= 1.0 - lr * wd;
            w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        true
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}
