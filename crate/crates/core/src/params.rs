//! Uniform access to the named tensors of a model.
//!
//! Every parameterized block exposes its tensors through [`Visit`]: trainable
//! parameters (updated by the optimizer) and persistent state (batch-norm
//! running statistics, spectral-norm singular vector estimates, feedback
//! state). Checkpointing, optimization and parameter counting all run over
//! this one view, so names are defined in exactly one place per block.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Trainable parameter.
    Param,
    /// Persistent non-trainable state.
    State,
}

pub trait Visit<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>));
}

/// All named tensors (parameters and state), sorted by name.
pub fn named_tensors<T: Scalar>(set: &dyn Visit<T>) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    set.visit(&mut |name, _, t| {
        let prev = out.insert(name.clone(), t.clone());
        debug_assert!(prev.is_none(), "duplicate tensor name {name}");
    });
    out
}

/// Number of scalars in trainable parameters.
pub fn param_count<T: Scalar>(set: &dyn Visit<T>) -> usize {
    let mut n = 0usize;
    set.visit(&mut |_, kind, t| {
        if kind == SlotKind::Param {
            n += t.len();
        }
    });
    n
}

/// Overwrite every named tensor from `src`. Fails on a missing name or a
/// shape mismatch; extra entries in `src` are ignored.
pub fn load_named_tensors<T: Scalar>(
    set: &mut dyn Visit<T>,
    src: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    set.visit_mut(&mut |name, _, t| {
        match src.get(&name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
            Some(loaded) => {
                mismatch.push(format!("{name}: {:?} vs {:?}", t.shape(), loaded.shape()))
            }
            None => missing.push(name),
        }
    });
    if !missing.is_empty() || !mismatch.is_empty() {
        return Err(Error::invalid(
            "load_named_tensors",
            format!("missing: {missing:?}; shape mismatches: {mismatch:?}"),
        ));
    }
    Ok(())
}
