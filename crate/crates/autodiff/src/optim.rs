//! Tagged parameter groups and masked SGD with momentum.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Which part of a model a parameter group belongs to. Updates are gated on
/// these tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupTag {
    /// Kernel subset dedicated to annotator `k` (1-based).
    Annotator(u32),
    /// Kernel subset shared by all annotators.
    Shared,
    /// Everything in a segmentation model except the routed kernels.
    Backbone,
    /// Prototype encoder and prototype bank.
    Assigner,
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupTag::Annotator(k) => write!(f, "annotator-{k}"),
            GroupTag::Shared => f.write_str("shared"),
            GroupTag::Backbone => f.write_str("backbone"),
            GroupTag::Assigner => f.write_str("assigner"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub tag: GroupTag,
    /// Named trainable tensors. Names are unique across all groups of a model.
    pub tensors: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tag: GroupTag) -> Self {
        ParamGroup { name: name.into(), tag, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|(_, t)| t)
    }

    pub fn zero_grad(&self) {
        self.iter().for_each(Tensor::zero_grad);
    }
}

/// SGD hyper-parameters plus momentum buffers keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl OptimState {
    pub fn new(learning_rate: f32, momentum: f32, groups: &[ParamGroup]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(AutodiffError::InvalidArgument { op: "sgd", msg: format!("learning rate must be positive, got {learning_rate}") });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AutodiffError::InvalidArgument { op: "sgd", msg: format!("momentum must lie in [0, 1), got {momentum}") });
        }
        let mut velocity = BTreeMap::new();
        if momentum > 0.0 {
            for g in groups {
                for (name, t) in &g.tensors {
                    velocity.insert(name.clone(), vec![0.0; t.len()]);
                }
            }
        }
        Ok(OptimState { learning_rate, momentum, velocity })
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.velocity
    }

    /// Replaces a momentum buffer, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, name: &str, v: Vec<f32>) -> Result<()> {
        match self.velocity.get_mut(name) {
            Some(slot) if slot.len() == v.len() => {
                *slot = v;
                Ok(())
            }
            Some(slot) => Err(AutodiffError::ShapeMismatch {
                op: "sgd",
                what: format!("velocity length for '{name}'"),
                expected: slot.len(),
                got: v.len(),
            }),
            None => Err(AutodiffError::InvalidArgument { op: "sgd", msg: format!("no velocity buffer named '{name}'") }),
        }
    }
}

/// One masked SGD step.
///
/// Tensors in groups whose tag is in `active` move by `lr * v` with
/// `v <- momentum * v + grad`; every other tensor is left untouched. All
/// gradients are cleared afterwards.
pub fn sgd_step(groups: &[ParamGroup], state: &mut OptimState, active: &BTreeSet<GroupTag>) -> Result<()> {
    for g in groups.iter().filter(|g| active.contains(&g.tag)) {
        for (name, t) in &g.tensors {
            if t.grad_ref().is_none() {
                return Err(AutodiffError::MissingGrad { name: name.clone() });
            }
        }
    }
    let lr = state.learning_rate;
    let momentum = state.momentum;
    for g in groups.iter().filter(|g| active.contains(&g.tag)) {
        for (name, t) in &g.tensors {
            let grad = t.grad_ref();
            let grad = grad.as_ref().expect("checked above");
            let mut data = t.data_mut();
            if momentum > 0.0 {
                let v = state.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
                for ((p, v), &g) in data.iter_mut().zip(v.iter_mut()).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            } else {
                for (p, &g) in data.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
        }
    }
    groups.iter().for_each(ParamGroup::zero_grad);
    Ok(())
}
