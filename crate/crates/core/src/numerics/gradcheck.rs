//! Central finite-difference verification of tape gradients, in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamId, ParamStore, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the per-parameter maximum relative error.
    pub tolerance: f64,
    /// Relative error denominator is `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    /// Restrict the check to these parameters.
    pub only: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-5, abs_floor: 1e-6, max_entries: None, only: None, seed: 0 }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
    /// Flat indices where the one-sided slopes disagree independently of the
    /// step size, i.e. the loss has a kink there.
    pub nondifferentiable: Vec<usize>,
    pub pass: bool,
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if g.value(loss).numel() != 1 {
        return Err(NumericsError::NonScalarLoss(g.shape(loss).to_vec()));
    }
    Ok(g.value(loss).data()[0])
}

/// Compare tape gradients of `f` against central differences for every
/// parameter in `store` (or `opts.only`).
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic: Vec<_> = g.param_grads();
    drop(g);

    let ids: Vec<ParamId> = opts.only.clone().unwrap_or_else(|| store.ids().collect());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).numel();
        let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut max_rel = 0.0f64;
        let mut kinks = Vec::new();
        for &e in &entries {
            let orig = store.value(id).data()[e];
            let at = |delta: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).value.data_mut()[e] = orig + delta;
                eval(&f, store)
            };
            let fp = at(h, store)?;
            let fm = at(-h, store)?;
            let fp2 = at(h / 2.0, store)?;
            let fm2 = at(-h / 2.0, store)?;
            let f0 = at(0.0, store)?;
            store.get_mut(id).value.data_mut()[e] = orig;

            // one-sided slope gap shrinks with the step on smooth functions
            let gap = (fp - f0) / h - (f0 - fm) / h;
            let gap_half = (fp2 - f0) / (h / 2.0) - (f0 - fm2) / (h / 2.0);
            if gap.abs() > 1e-6 && gap_half.abs() > 0.75 * gap.abs() {
                kinks.push(e);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad[e];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        reports.push(GradReport {
            name: store.get(id).name.clone(),
            max_rel_err: max_rel,
            entries_checked: entries.len(),
            pass: max_rel < opts.tolerance && kinks.is_empty(),
            nondifferentiable: kinks,
        });
    }
    Ok(reports)
}
