//! Central finite-difference gradient verification.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// One evaluation of the function under test.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub loss: f64,
    /// Identifies the smooth piece the point lies on (see
    /// [`super::Tape::branch_signature`]); `None` for smooth functions.
    pub branch: Option<u64>,
}

impl Evaluation {
    pub fn smooth(loss: f64) -> Self {
        Self { loss, branch: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates to compare (fewer if the function has fewer).
    pub coordinates: usize,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, coordinates: 64, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because `θ ± h` crossed a kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare `analytic` against central differences of `f` on a random subset
/// of coordinates. Coordinates whose `±h` evaluations change the branch
/// signature (a ReLU flips or a max-pool winner changes) are skipped and
/// replaced by further random coordinates.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape {
            op: "finite_difference_check",
            detail: format!("{} params vs {} gradients", params.len(), analytic.len()),
        });
    }
    let mut report = GradCheckReport::default();
    if config.coordinates == 0 || params.is_empty() {
        return Ok(report);
    }
    let base = f(params)?;
    if !base.loss.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, &[tag::GRADCHECK]));
    let mut theta = params.to_vec();
    for &i in &order {
        if report.checked == config.coordinates {
            break;
        }
        let orig = theta[i];
        theta[i] = orig + config.step;
        let plus = f(&theta)?;
        theta[i] = orig - config.step;
        let minus = f(&theta)?;
        theta[i] = orig;
        if !plus.loss.is_finite() || !minus.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing coordinate {i}")));
        }
        if plus.branch != base.branch || minus.branch != base.branch {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * config.step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(config.floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if report.worst_coordinate.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}
