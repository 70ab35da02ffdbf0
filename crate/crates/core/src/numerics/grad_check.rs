//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub rtol: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rtol: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error: (flat index, tape, finite difference).
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rtol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.rtol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("objective during finite differencing".into()));
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f(θ)` with central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::invalid(format!("step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
    compare_with_finite_differences(&analytic, f, params, opts)
}

/// Compares externally computed gradients `analytic` (one per parameter)
/// with central differences of `f`.
pub fn compare_with_finite_differences<F>(
    analytic: &[Tensor],
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::invalid(format!("step {} outside [1e-6, 1e-4]", opts.h)));
    }
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(a, p)| a.shape() != p.shape()) {
        return Err(Error::shape("analytic gradients do not match the parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        rtol: opts.rtol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic = &analytic[pi];
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < p.len() => {
                let mut e = sample(&mut rng, p.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..p.len()).collect(),
        };
        let mut check = ParamCheck {
            index: pi,
            checked: entries.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - opts.h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric, opts.floor);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst = Some((e, a, numeric));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
