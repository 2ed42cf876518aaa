//! Dense f32 tensors, reverse-mode autodiff, and the AdamW optimizer.

pub mod kernels;
pub mod optim;
pub mod tape;

use crate::error::{Result, UniteError};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array of 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn randn(shape: Vec<usize>, rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normal_vec(n))
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Role of a parameter tensor; drives the description-length grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Norm,
    Attention,
    Mlp,
    Embedding,
    Projection,
}

impl ParamTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamTag::Norm => "norm",
            ParamTag::Attention => "attention",
            ParamTag::Mlp => "mlp",
            ParamTag::Embedding => "embedding",
            ParamTag::Projection => "projection",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(ParamTag::Norm),
            "attention" => Ok(ParamTag::Attention),
            "mlp" => Ok(ParamTag::Mlp),
            "embedding" => Ok(ParamTag::Embedding),
            "projection" => Ok(ParamTag::Projection),
            other => Err(UniteError::Format(format!("unknown parameter tag `{other}`"))),
        }
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient accumulator and AdamW moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tag: ParamTag,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub opt_m: Vec<f32>,
    pub opt_v: Vec<f32>,
}

/// All parameters of a model, in construction order. The order is stable and
/// is the serialization order of checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tag: ParamTag, value: Tensor) -> ParamId {
        let n = value.numel();
        let mut value = value;
        value.requires_grad = true;
        self.params.push(Parameter {
            name: name.into(),
            tag,
            value,
            grad: vec![0.0; n],
            opt_m: vec![0.0; n],
            opt_v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}
