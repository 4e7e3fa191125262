use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named parameter tensor with its gradient accumulator.
///
/// Values are kept exactly representable as `f32` so that persisting them as
/// 32-bit floats is lossless.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running statistics and other buffers are persisted but not optimized.
    pub trainable: bool,
}

/// Compares everything but the gradient accumulator.
impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.value == other.value
            && self.trainable == other.trainable
    }
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/value mismatch");
        let len = value.len();
        let mut p = Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
            trainable: true,
        };
        p.round_to_f32();
        p
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, v: f64) -> Self {
        let mut p = Self::filled(name, shape, v);
        p.trainable = false;
        p
    }

    /// He-normal initialization for a layer with the given fan-in.
    pub fn he_normal(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let len = shape.iter().product();
        let value = (0..len).map(|_| dist.sample(rng)).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn round_to_f32(&mut self) {
        self.value.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Anything that owns parameters in a fixed, stable order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Number of trainable scalars.
    fn parameter_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }
}
