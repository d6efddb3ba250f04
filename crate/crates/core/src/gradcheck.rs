//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffOptions {
    pub step: f64,
    pub threads: usize,
}

impl Default for FiniteDiffOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            threads: 1,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.value(loss)
        .item()
        .ok_or_else(|| Error::Usage("finite-difference target must return a scalar".into()))
}

/// Compares [`Graph::backward`] against central differences for every entry
/// of every tensor in `params`.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var> + Sync,
{
    finite_diff_check_with(
        f,
        params,
        FiniteDiffOptions {
            step,
            ..Default::default()
        },
    )
}

pub fn finite_diff_check_with<F>(
    f: F,
    params: &ParamSet,
    opts: FiniteDiffOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var> + Sync,
{
    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    finite_diff_check_entries(f, params, &entries, opts)
}

/// Like [`finite_diff_check_with`] but only over the listed
/// `(parameter, flat index)` entries.
pub fn finite_diff_check_entries<F>(
    f: F,
    params: &ParamSet,
    entries: &[(String, usize)],
    opts: FiniteDiffOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var> + Sync,
{
    for (name, idx) in entries {
        if *idx >= params.require(name)?.len() {
            return Err(Error::Usage(format!("entry {idx} out of range for `{name}`")));
        }
    }
    if !(opts.step > 0.0) {
        return Err(Error::Usage(format!("finite-difference step {} must be positive", opts.step)));
    }
    let mut g = Graph::new();
    let loss_var = f(&mut g, params)?;
    let loss = g
        .value(loss_var)
        .item()
        .ok_or_else(|| Error::Usage("finite-difference target must return a scalar".into()))?;
    let grads = g.backward(loss_var)?;
    drop(g);

    for _ in 0..2 {
        let again = evaluate(&f, params)?;
        if again.to_bits() != loss.to_bits() {
            return Err(Error::NonDeterministic(format!(
                "repeated evaluation gave {again:e} after {loss:e}; fix the RNG seed"
            )));
        }
    }

    let threads = opts.threads.max(1).min(entries.len().max(1));
    let chunk = entries.len().div_ceil(threads).max(1);

    let results: Vec<Result<(f64, Option<(String, usize)>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                let grads = &grads;
                s.spawn(move || -> Result<(f64, Option<(String, usize)>)> {
                    let mut local = params.clone();
                    let mut worst = (0.0, None);
                    for (name, idx) in part {
                        let orig = local.require(name)?.data()[*idx];
                        let set = |p: &mut ParamSet, v: f64| {
                            p.get_mut(name).expect("present").data_mut()[*idx] = v;
                        };
                        set(&mut local, orig + opts.step);
                        let plus = evaluate(f, &local)?;
                        set(&mut local, orig - opts.step);
                        let minus = evaluate(f, &local)?;
                        set(&mut local, orig);
                        let numeric = (plus - minus) / (2.0 * opts.step);
                        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*idx]);
                        let err = relative_error(analytic, numeric);
                        if err > worst.0 || worst.1.is_none() {
                            worst = (err, Some((name.clone(), *idx)));
                        }
                    }
                    Ok(worst)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("finite-difference worker panicked"))
            .collect()
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: entries.len(),
        loss,
    };
    for r in results {
        let (err, at) = r?;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = at;
        }
    }
    Ok(report)
}
