//! Named parameter storage with gradient accumulators.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamId {
    /// Marks tape inputs that track gradients without living in a store.
    pub const DETACHED: ParamId = ParamId(usize::MAX);
}

/// A trainable tensor, its gradient accumulator, and the group it is reported under.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Parameter handles bound on one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: &str, value: Tensor) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            group: group.to_string(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialised matrix; for rank-3 conv kernels the fan is `k * C`.
    pub fn add_glorot(&mut self, name: &str, group: &str, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let (fan_in, fan_out) = match *shape {
            [rows, cols] => (cols, rows),
            [k, c_in, c_out] => (k * c_in, k * c_out),
            _ => (shape.iter().product(), shape.iter().product()),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, group, Tensor::new(shape, data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(ParamId(i), p.value.clone()))
                .collect(),
        )
    }

    /// Adds the gradients of a backward pass into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (var, id) in tape.params() {
            if let Some(g) = grads.raw(var) {
                let dst = self.params[id.0].grad.data_mut();
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    /// Runs backward from `loss` and accumulates into the stored gradients.
    pub fn backward(&mut self, tape: &Tape, loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        self.accumulate(tape, &grads);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt()
    }

    /// Replaces values by name; shapes must match.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in values {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected {:?}, found {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}
