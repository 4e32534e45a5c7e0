use std::sync::Arc;

use crate::tensor::Tensor;

/// A named tensor owned by a model component.
///
/// Frozen parameters (`requires_grad == false`) never receive a gradient
/// buffer; the graph treats them as constants.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn trainable(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            requires_grad: true,
            grad: None,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access for optimizers. Copies on write if a live graph still
    /// holds the old value.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn take_grad(&mut self) -> Option<Tensor> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer. Ignored for frozen parameters.
    pub fn accumulate_grad(&mut self, g: &Tensor) {
        if !self.requires_grad {
            return;
        }
        match &mut self.grad {
            Some(buf) => buf.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn checksum(&self) -> u64 {
        self.value.checksum()
    }
}
