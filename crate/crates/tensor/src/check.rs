//! Central finite-difference gradient checking, used by tests across the
//! workspace. The numeric side only ever runs forward passes.

use crate::error::Result;
use crate::params::{Ctx, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; larger tensors are sampled with a fixed stride.
    pub max_coords: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { step: 1e-6, max_coords: 48 }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// `max |analytic - numeric| / max(max |numeric|, max |analytic|)` over the probed
    /// coordinates that finite differences can resolve.
    pub rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn assert_within(&self, tol: f64) {
        for t in &self.tensors {
            assert!(
                t.rel_err < tol,
                "gradient mismatch for {}: rel err {:.3e} (max |grad| {:.3e}, {} coords)",
                t.name,
                t.rel_err,
                t.max_abs_grad,
                t.checked
            );
        }
    }
}

fn probe_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    // odd stride walk so that samples spread across channels and rows
    let stride = (n / max) | 1;
    let mut out: Vec<usize> = (0..max).map(|i| (i * stride + i / 3) % n).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Smallest derivative a central difference of a function of magnitude
/// `f0` can resolve at this step: rounding in each evaluation is about
/// `eps |f0|`, amplified by `1 / step`. Coordinates where both sides are
/// below it (e.g. gradients that vanish by symmetry) are not scored.
fn noise_floor(f0: f64, step: f64) -> f64 {
    64.0 * f64::EPSILON * f0.abs().max(1.0) / step
}

fn compare(name: String, analytic: &[f64], numeric: &[(usize, f64)], floor: f64) -> TensorCheck {
    let mut max_diff = 0.0f64;
    let mut scale = 0.0f64;
    for &(i, n) in numeric {
        if n.abs().max(analytic[i].abs()) < floor {
            continue;
        }
        max_diff = max_diff.max((analytic[i] - n).abs());
        scale = scale.max(n.abs()).max(analytic[i].abs());
    }
    let rel_err = if scale == 0.0 { 0.0 } else { max_diff / scale };
    TensorCheck { name, checked: numeric.len(), rel_err, max_abs_grad: scale }
}

/// Check gradients of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let floor = noise_floor(out.value().item(), opts.step);
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or(vec![0.0; t.numel()], |g| g.into_data()))
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut tensors = Vec::new();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::new();
        for i in probe_coords(input.numel(), opts.max_coords) {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + opts.step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - opts.step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            numeric.push((i, (up - down) / (2.0 * opts.step)));
        }
        tensors.push(compare(format!("input{k}"), &analytic[k], &numeric, floor));
    }
    Ok(CheckReport { tensors })
}

/// Check gradients of a scalar loss with respect to every trainable entry of
/// a parameter store. `f` runs the forward pass on a fresh binding.
pub fn check_store<F>(store: &ParamStore<f64>, training: bool, opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&Ctx<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, true, training);
    let out = f(&ctx)?;
    let floor = noise_floor(out.value().item(), opts.step);
    let grads = tape.backward(out)?;
    let analytic = ctx.grads(&grads);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, false, training);
        Ok(f(&ctx)?.value().item())
    };
    let mut work = store.clone();
    let mut tensors = Vec::new();
    for (idx, id) in store.ids().enumerate() {
        let entry = &store.entries()[idx];
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let a = analytic[idx].as_ref().map_or(vec![0.0; entry.value.numel()], |g| g.data().to_vec());
        let mut numeric = Vec::new();
        for i in probe_coords(entry.value.numel(), opts.max_coords) {
            let x0 = entry.value.data()[i];
            work.get_mut(id).data_mut()[i] = x0 + opts.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0 - opts.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0;
            numeric.push((i, (up - down) / (2.0 * opts.step)));
        }
        tensors.push(compare(entry.name.clone(), &a, &numeric, floor));
    }
    Ok(CheckReport { tensors })
}
