//! Small shared building blocks: initializers and parameter traversal.

use perpeft_autodiff::{Graph, Parameter, Result, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// `N(0, 1/fan_in)` weights for a `fan_in × fan_out` matrix.
pub fn fan_in(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    normal(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Order-sensitive digest of every parameter value.
    fn checksum(&self) -> u64 {
        self.params().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            (h ^ p.checksum()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    /// Renames every parameter by replacing the leading `from` prefix.
    fn replace_prefix(&mut self, from: &str, to: &str) {
        for p in self.params_mut() {
            if let Some(rest) = p.name().strip_prefix(from) {
                let name = format!("{to}{rest}");
                p.rename(name);
            }
        }
    }
}

/// Layer norm with learned gain and bias, epsilon 1e-5.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(prefix: &str, width: usize, trainable: bool) -> Self {
        let make = if trainable {
            Parameter::trainable
        } else {
            Parameter::frozen
        };
        Self {
            gamma: make(format!("{prefix}/gamma"), Tensor::ones(&[width])),
            beta: make(format!("{prefix}/beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(&self.gamma), g.param(&self.beta));
        g.layer_norm(x, gm, bt, 1e-5)
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn trainable(prefix: &str, fan_in_dim: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::trainable(format!("{prefix}/w"), fan_in(fan_in_dim, out, rng)),
            bias: Parameter::trainable(format!("{prefix}/b"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}
