//! Uniform parameter traversal.
//!
//! Every weight-bearing component exposes its parameters through
//! [`HasParams::for_each_param`] as named dynamic views. The same traversal
//! drives checkpoint save/load, topology hashing, tape registration for
//! training, and optimizer updates, so parameter naming and ordering are
//! defined in exactly one place per component.

use std::collections::BTreeMap;

use ndarray::ArrayViewMutD;

use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var};

/// Visitor callback over named parameter arrays.
pub type ParamFn<'a, F> = dyn FnMut(&str, ArrayViewMutD<'_, F>) + 'a;

pub trait HasParams<F: Scalar> {
    /// Visit every parameter as `(name, view)`, in a fixed deterministic
    /// order. `prefix` is prepended to each name with a dot.
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>);
}

/// Join a name prefix and a component name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Tape variables for a model's parameters, addressable by name.
pub struct VarTable<F: Scalar> {
    vars: Vec<(String, Var<F>)>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> VarTable<F> {
    /// Register every parameter of `model` on `tape` as a trainable leaf.
    pub fn from_model<M: HasParams<F> + ?Sized>(tape: &Tape<F>, model: &mut M) -> Self {
        let mut vars = Vec::new();
        let mut index = BTreeMap::new();
        model.for_each_param("", &mut |name: &str, view: ArrayViewMutD<'_, F>| {
            let var = tape.param(view.to_owned());
            index.insert(name.to_string(), vars.len());
            vars.push((name.to_string(), var));
        });
        VarTable { vars, index }
    }

    /// Look up a parameter var. Missing names are an internal wiring bug.
    pub fn get(&self, name: &str) -> &Var<F> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.vars[i].1
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<F>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }
}

/// Collect a snapshot of every parameter as owned arrays keyed by name.
pub fn collect_params<F: Scalar, M: HasParams<F> + ?Sized>(
    model: &mut M,
) -> Vec<(String, ndarray::ArrayD<F>)> {
    let mut out = Vec::new();
    model.for_each_param("", &mut |name: &str, view: ArrayViewMutD<'_, F>| {
        out.push((name.to_string(), view.to_owned()));
    });
    out
}
