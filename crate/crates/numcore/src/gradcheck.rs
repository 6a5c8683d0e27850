use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, NumError, ParamStore, Real, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: Real,
    /// Coordinates sampled per parameter tensor (all of them if smaller).
    pub samples_per_param: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Central differences
    /// cannot resolve gradients much below `ulp(loss) / eps`.
    pub floor: Real,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, samples_per_param: 8, seed: 0, floor: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, Real, Real)>,
    pub checked: usize,
    /// Coordinates whose analytic and numeric gradients were both below `floor`.
    pub below_floor: usize,
}

/// Compares analytic gradients against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` on a seeded sample of coordinates.
///
/// The relative error of a coordinate is `|a-n| / max(|a|, |n|, floor)`.
/// `loss_fn` must be deterministic: freeze any dropout masks it uses.
pub fn grad_check<F>(params: &mut ParamStore, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph) -> Result<Var, NumError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        if !g.value(loss).item().is_finite() {
            return Err(NumError::NonFinite("loss".into()));
        }
        g.backward(loss)?
    };
    let eval = |params: &ParamStore| -> Result<Real, NumError> {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(NumError::NonFinite("loss".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, below_floor: 0 };
    for id in ids {
        let n = params.get(id).value.len();
        let coords: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for k in coords {
            let a = analytic.get(id).map(|t| t.data()[k]).unwrap_or(0.0);
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + cfg.eps;
            let plus = eval(params);
            params.get_mut(id).value.data_mut()[k] = orig - cfg.eps;
            let minus = eval(params);
            params.get_mut(id).value.data_mut()[k] = orig;
            let num = (plus? - minus?) / (2.0 * cfg.eps);
            let scale = a.abs().max(num.abs());
            let rel = (a - num).abs() / scale.max(cfg.floor);
            report.checked += 1;
            report.below_floor += (scale < cfg.floor) as usize;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.get(id).name.clone(), k, a, num));
            }
        }
    }
    Ok(report)
}
