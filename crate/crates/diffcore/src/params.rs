//! Named parameter collections and their binding onto a tape.

use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::tape::{Gradients, Tape, Var};

/// A collection of named arrays with a fixed visiting order.
///
/// `visit` and `visit_mut` must enumerate the same arrays in the same
/// order; that order defines the layout of gradient lists and checkpoints.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array));
}

/// Handles produced by binding a [`Module`] onto a tape.
pub trait VarSet {
    /// Push the bound handles in the owning module's visiting order.
    fn collect(&self, out: &mut Vec<Var>);

    /// Replace the handles, in the same order `collect` emits them. Lets
    /// callers route a module through arbitrary tape values, e.g. for
    /// gradient checks.
    fn assign(&mut self, src: &mut dyn Iterator<Item = Var>);

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }
}

pub trait Module: Parameters {
    type Vars: VarSet;

    /// Record every parameter on `tape`, as gradient-tracked leaves when
    /// `trainable`, otherwise as constants.
    fn bind(&self, tape: &Tape, trainable: bool) -> Self::Vars;
}

pub(crate) fn leaf(tape: &Tape, a: &Array, trainable: bool) -> Var {
    if trainable {
        tape.param(a.clone())
    } else {
        tape.constant(a.clone())
    }
}

/// Visit `child` with every name prefixed by `prefix.`.
pub fn visit_child(
    prefix: &str,
    child: &dyn Parameters,
    f: &mut dyn FnMut(&str, &Array),
) {
    child.visit(&mut |name, a| f(&format!("{prefix}.{name}"), a));
}

pub fn visit_child_mut(
    prefix: &str,
    child: &mut dyn Parameters,
    f: &mut dyn FnMut(&str, &mut Array),
) {
    child.visit_mut(&mut |name, a| f(&format!("{prefix}.{name}"), a));
}

pub fn named_arrays(p: &dyn Parameters) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    p.visit(&mut |n, a| out.push((n.to_string(), a.clone())));
    out
}

pub fn param_count(p: &dyn Parameters) -> usize {
    let mut n = 0;
    p.visit(&mut |_, a| n += a.len());
    n
}

pub fn all_finite(p: &dyn Parameters) -> bool {
    let mut ok = true;
    p.visit(&mut |_, a| ok &= a.is_finite());
    ok
}

/// SHA-256 over names, shapes and little-endian payloads, in visiting order.
pub fn param_hash(p: &dyn Parameters) -> String {
    let mut h = Sha256::new();
    p.visit(&mut |name, a| {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((a.shape().len() as u64).to_le_bytes());
        for d in a.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(a.to_le_bytes());
    });
    hex::encode(h.finalize())
}

/// Gradients for every parameter of a bound module, in visiting order.
/// Parameters the output does not depend on get zeros.
pub fn collect_grads(grads: &Gradients, vars: &dyn VarSet, params: &dyn Parameters) -> Vec<Vec<f64>> {
    let vs = vars.vars();
    let mut sizes = Vec::with_capacity(vs.len());
    params.visit(&mut |_, a| sizes.push(a.len()));
    assert_eq!(vs.len(), sizes.len(), "bound vars do not match parameters");
    vs.iter().zip(sizes).map(|(v, n)| grads.get_or_zeros(*v, n)).collect()
}
