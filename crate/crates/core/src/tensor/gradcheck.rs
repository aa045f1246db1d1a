//! Central finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-7, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (tensor index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Checks the gradient of a scalar function of `inputs`.
///
/// `f` receives one node per input and returns a scalar node.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.iter().enumerate().map(|(i, t)| store.add(format!("input{i}"), t.clone())).collect();
    grad_check_params(
        &store,
        |g| {
            let nodes: Vec<NodeId> = ids.iter().map(|&p| g.param(p)).collect();
            f(g, &nodes)
        },
        opts,
    )
}

/// Checks gradients with respect to every parameter of `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?.into_param_grads(&g)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        g.value(out).scalar_value()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (pid, param) in store.iter() {
        let n = param.value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.iter().find(|(p, _)| *p == pid).map(|(_, g)| g);
        for c in coords {
            let a = grad.map_or(0.0, |g| g.data()[c]);
            let orig = param.value.data()[c];
            work.get_mut(pid).value.data_mut()[c] = orig + opts.step;
            let fp = eval(&work)?;
            work.get_mut(pid).value.data_mut()[c] = orig - opts.step;
            let fm = eval(&work)?;
            work.get_mut(pid).value.data_mut()[c] = orig;
            let num = (fp - fm) / (2.0 * opts.step);
            if !num.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pid.index(), c, a, num));
            }
        }
    }
    Ok(report)
}
