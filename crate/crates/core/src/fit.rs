//! Saturating performance curve `P(ρ) = P0 + A(1 − e^{−βρ})` and the plateau density.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DVector, Dyn, OMatrix, Vector3, U3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fewest points a fit is attempted on (three unknowns plus one).
pub const MIN_POINTS: usize = 4;
pub const PLATEAU_FRACTION: f64 = 0.95;

/// Which reading of "95% of the asymptotic value" defines the plateau.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlateauRule {
    /// P(ρ̂) = 0.95·(P0 + A).
    #[default]
    OfAsymptote,
    /// P(ρ̂) = P0 + 0.95·A.
    OfGain,
}

/// (density, validation accuracy) pairs with strictly increasing density.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityTrace {
    points: Vec<(f64, f64)>,
}

impl DensityTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        let mut t = Self::new();
        for &(r, p) in points {
            t.push(r, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, rho: f64, perf: f64) -> Result<()> {
        if !rho.is_finite() || !perf.is_finite() {
            return Err(Error::Usage(format!("trace point ({rho}, {perf}) is not finite")));
        }
        if let Some(&(last, _)) = self.points.last() {
            if rho <= last {
                return Err(Error::Usage(format!(
                    "trace densities must increase strictly: {rho} after {last}"
                )));
            }
        }
        self.points.push((rho, perf));
        Ok(())
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub p0: f64,
    pub a: f64,
    pub beta: f64,
    pub mse: f64,
    /// Plateau onset; infinite when the threshold is unreachable.
    pub plateau: f64,
}

impl LogisticFit {
    pub fn eval(&self, rho: f64) -> f64 {
        curve(self.p0, self.a, self.beta, rho)
    }
}

pub fn curve(p0: f64, a: f64, beta: f64, rho: f64) -> f64 {
    p0 + a * (1.0 - (-beta * rho).exp())
}

/// Smallest ρ ≥ 0 at which the curve meets the plateau threshold.
pub fn plateau_density(p0: f64, a: f64, beta: f64, rule: PlateauRule) -> f64 {
    if a <= 0.0 || beta <= 0.0 {
        return f64::INFINITY;
    }
    let frac = match rule {
        PlateauRule::OfAsymptote => (PLATEAU_FRACTION * (p0 + a) - p0) / a,
        PlateauRule::OfGain => PLATEAU_FRACTION,
    };
    if frac <= 0.0 {
        0.0
    } else if frac >= 1.0 {
        f64::INFINITY
    } else {
        -(1.0 - frac).ln() / beta
    }
}

struct Problem<'a> {
    pts: &'a [(f64, f64)],
    x: Vector3<f64>,
}

impl LeastSquaresProblem<f64, Dyn, U3> for Problem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U3>;
    type ParameterStorage = Owned<f64, U3>;

    fn set_params(&mut self, x: &Vector3<f64>) {
        self.x = *x;
    }

    fn params(&self) -> Vector3<f64> {
        self.x
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let (p0, a, b) = (self.x[0], self.x[1], self.x[2]);
        Some(DVector::from_iterator(
            self.pts.len(),
            self.pts.iter().map(|&(r, p)| curve(p0, a, b, r) - p),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U3>> {
        let (a, b) = (self.x[1], self.x[2]);
        let mut j = OMatrix::<f64, Dyn, U3>::zeros(self.pts.len());
        for (k, &(r, _)) in self.pts.iter().enumerate() {
            let e = (-b * r).exp();
            j[(k, 0)] = 1.0;
            j[(k, 1)] = 1.0 - e;
            j[(k, 2)] = a * r * e;
        }
        Some(j)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares fit of the saturating curve; `None` means "no plateau yet"
/// (too few points, no convergence, or a non-positive gain or rate).
pub fn fit_logistic(trace: &DensityTrace, rule: PlateauRule) -> Option<LogisticFit> {
    let pts = trace.points();
    if pts.len() < MIN_POINTS {
        return None;
    }
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let beta0 = 1.0 / median(pts.iter().map(|p| p.0).collect()).max(1e-12);
    let a0 = (hi - lo).max(1e-6);

    let mut best: Option<LogisticFit> = None;
    for scale in [1.0, 3.0, 1.0 / 3.0] {
        let problem = Problem {
            pts,
            x: Vector3::new(lo, a0, beta0 * scale),
        };
        let (solved, report) = LevenbergMarquardt::new().with_patience(200).minimize(problem);
        if !report.termination.was_successful() {
            continue;
        }
        let x = solved.params();
        if !(x.iter().all(|v| v.is_finite()) && x[1] > 0.0 && x[2] > 0.0) {
            continue;
        }
        let mse = 2.0 * report.objective_function / pts.len() as f64;
        if best.as_ref().is_some_and(|b| b.mse <= mse) {
            continue;
        }
        best = Some(LogisticFit {
            p0: x[0],
            a: x[1],
            beta: x[2],
            mse,
            plateau: plateau_density(x[0], x[1], x[2], rule),
        });
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid() -> Vec<f64> {
        (1..=10).map(|k| 0.05 * k as f64).collect()
    }

    #[test]
    fn noiseless_curve_is_recovered() {
        let pts: Vec<(f64, f64)> = grid().into_iter().map(|r| (r, curve(0.5, 0.4, 10.0, r))).collect();
        let fit = fit_logistic(&DensityTrace::from_points(&pts).unwrap(), PlateauRule::OfAsymptote).unwrap();
        assert!((fit.beta - 10.0).abs() / 10.0 < 0.05, "{fit:?}");
        let truth = plateau_density(0.5, 0.4, 10.0, PlateauRule::OfAsymptote);
        assert!((fit.plateau - truth).abs() < 1e-3);
        assert!(fit.eval(fit.plateau) >= 0.95 * (fit.p0 + fit.a) - 1e-9);
    }

    #[test]
    fn plateau_rules_differ() {
        let lit = plateau_density(0.5, 0.4, 10.0, PlateauRule::OfAsymptote);
        let gain = plateau_density(0.5, 0.4, 10.0, PlateauRule::OfGain);
        assert!((curve(0.5, 0.4, 10.0, lit) - 0.95 * 0.9).abs() < 1e-12);
        assert!((curve(0.5, 0.4, 10.0, gain) - (0.5 + 0.95 * 0.4)).abs() < 1e-12);
        assert!(lit < gain);
        assert_eq!(plateau_density(0.99, 0.01, 5.0, PlateauRule::OfAsymptote), 0.0);
    }

    #[test]
    fn short_trace_has_no_plateau() {
        let t = DensityTrace::from_points(&[(0.1, 0.5), (0.2, 0.6), (0.3, 0.65)]).unwrap();
        assert!(fit_logistic(&t, PlateauRule::OfAsymptote).is_none());
    }

    #[test]
    fn linear_trace_plateaus_beyond_observations() {
        let pts: Vec<(f64, f64)> = [0.05, 0.0625, 0.078125, 0.0977, 0.122]
            .iter()
            .map(|&r| (r, 0.2 + 0.5 * r))
            .collect();
        let t = DensityTrace::from_points(&pts).unwrap();
        match fit_logistic(&t, PlateauRule::OfAsymptote) {
            None => {}
            Some(f) => assert!(f.plateau > 0.122, "{f:?}"),
        }
    }

    #[test]
    fn trace_rejects_non_increasing_density() {
        let mut t = DensityTrace::new();
        t.push(0.1, 0.5).unwrap();
        assert!(t.push(0.1, 0.6).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let pts: Vec<(f64, f64)> = grid()
            .into_iter()
            .enumerate()
            .map(|(k, r)| (r, curve(0.3, 0.6, 6.0, r) + 0.003 * ((k * 7 % 5) as f64 - 2.0)))
            .collect();
        let t = DensityTrace::from_points(&pts).unwrap();
        assert_eq!(
            fit_logistic(&t, PlateauRule::OfAsymptote),
            fit_logistic(&t, PlateauRule::OfAsymptote)
        );
    }

    #[test]
    fn noisy_plateau_stays_close() {
        let truth = plateau_density(0.5, 0.4, 10.0, PlateauRule::OfAsymptote);
        let noise = Normal::new(0.0, 0.005).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (1..=10)
                .map(|k| {
                    let r = 0.05 * k as f64;
                    (r, curve(0.5, 0.4, 10.0, r) + noise.sample(&mut rng))
                })
                .collect();
            let f = fit_logistic(&DensityTrace::from_points(&pts).unwrap(), PlateauRule::OfAsymptote).unwrap();
            assert!((f.plateau - truth).abs() / truth < 0.15, "seed {seed}: {} vs {truth}", f.plateau);
        }
    }
}
