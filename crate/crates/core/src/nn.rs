//! Trainable parameters and weight initialization.

use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A named trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Tensor,
    pub moment1: Tensor,
    pub moment2: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        let grad = Tensor::zeros(value.shape());
        let moment1 = grad.clone();
        let moment2 = grad.clone();
        Parameter {
            name: name.into(),
            value,
            grad,
            moment1,
            moment2,
        }
    }

    /// Restores the gradient buffer after deserialization (it is not stored).
    pub fn restore_grad_buffer(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Tensor::zeros(self.value.shape());
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Kaiming-uniform fan-in initialization: U(−√(6/fan_in), +√(6/fan_in)).
pub fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Weight D_out×D_in plus zero bias.
pub fn linear_init(rng: &mut impl Rng, name: &str, d_out: usize, d_in: usize) -> (Parameter, Parameter) {
    let w = Parameter::new(
        format!("{name}.weight"),
        kaiming_uniform(rng, &[d_out, d_in], d_in),
    );
    let b = Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    (w, b)
}

/// Batch-norm running statistics (buffers, not trained).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(features: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, v) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}
