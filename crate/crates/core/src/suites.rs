//! Self-checking suites: every fast routine against a slow reference.
//!
//! `perturb` distorts the fast side of each comparison by a relative amount, which
//! must make the corresponding suite fail.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::fit::{curve, fit_logistic, plateau_density, DensityTrace, PlateauRule};
use crate::growth::weighted_sample_without_replacement;
use crate::model::{ArchSpec, LayerRole, MaskedNetwork, Mode, NetworkBuilder};
use crate::oracle::{check_paths, path_suite};
use crate::pathscore::tau_core;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const SUITES: [&str; 6] = ["path", "conv", "tau-core", "sampling", "gradient", "fit"];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the suite's statistic (for sampling: smallest p-value).
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleSummary {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

struct Outcome {
    cases: usize,
    worst: f64,
    tolerance: f64,
    failures: Vec<String>,
}

pub fn run_suite(name: &str, perturb: f64) -> Result<SuiteResult> {
    let started = Instant::now();
    let o = match name {
        "path" => path(perturb)?,
        "conv" => conv(perturb)?,
        "tau-core" => tau(perturb)?,
        "sampling" => sampling(perturb)?,
        "gradient" => gradient(perturb)?,
        "fit" => fit(perturb)?,
        other => {
            return Err(Error::Usage(format!(
                "unknown oracle suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteResult {
        name: name.to_string(),
        passed: o.failures.is_empty(),
        cases: o.cases,
        worst: o.worst,
        tolerance: o.tolerance,
        seconds: started.elapsed().as_secs_f64(),
        failures: o.failures,
    })
}

pub fn run_all(names: &[&str], perturb: f64) -> Result<OracleSummary> {
    let suites = names.iter().map(|n| run_suite(n, perturb)).collect::<Result<Vec<_>>>()?;
    Ok(OracleSummary {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

pub const PATH_TOL: f64 = 1e-9;

fn path(perturb: f64) -> Result<Outcome> {
    let cases = 100;
    let c = path_suite(cases, 0x5eed, perturb)?;
    let mut failures = Vec::new();
    for (what, v) in [
        ("phi", c.phi),
        ("psi", c.psi),
        ("pwmp", c.pwmp),
        ("total", c.total),
        ("centrality", c.centrality),
        ("delta-trace", c.delta_trace),
    ] {
        if !(v < PATH_TOL) {
            failures.push(format!("{what}: relative error {v:e}"));
        }
    }
    Ok(Outcome {
        cases,
        worst: c.max(),
        tolerance: PATH_TOL,
        failures,
    })
}

/// A single masked 3×3 conv on a 4×4 input.
pub fn single_conv(seed: u64) -> Result<MaskedNetwork<f64>> {
    let (mut b, x) = NetworkBuilder::<f64>::new(&[4, 4, 2], seed);
    b.conv(x, 3, 3, 1, 1, "conv", LayerRole::Hidden)?;
    let mut net = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.layer(0).mask().len();
    for w in net.layer_weight_mut(0) {
        *w = rng.random_range(-1.0..1.0);
    }
    net.set_mask(0, (0..n).map(|_| rng.random_bool(0.6)).collect())?;
    Ok(net)
}

fn conv(perturb: f64) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let cases = 10;
    for seed in 0..cases as u64 {
        let c = check_paths(&single_conv(seed)?, perturb)?;
        worst = worst.max(c.max());
        if !(c.max() < PATH_TOL) {
            failures.push(format!("seed {seed}: relative error {:e}", c.max()));
        }
    }
    Ok(Outcome {
        cases,
        worst,
        tolerance: PATH_TOL,
        failures,
    })
}

/// Smallest subset size whose sum reaches `tau · total`, by exhaustive search.
fn brute_core_size(c: &[f64], tau: f64) -> usize {
    let total: f64 = c.iter().sum();
    let target = tau * total * (1.0 - 1e-12);
    let mut best = c.len();
    for set in 0u32..(1 << c.len()) {
        let size = set.count_ones() as usize;
        if size >= best {
            continue;
        }
        let s: f64 = (0..c.len()).filter(|i| set >> i & 1 == 1).map(|i| c[i]).sum();
        if s >= target {
            best = size;
        }
    }
    best
}

fn tau(perturb: f64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = Vec::new();
    let cases = 300;
    for case in 0..cases {
        let n = rng.random_range(1..=10);
        let c: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        if c.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let tau = [0.5, 0.9, 0.99][case % 3];
        let core = tau_core(&c, tau)?;
        let mut covered: f64 = core.iter().map(|&i| c[i]).sum();
        covered *= 1.0 + perturb;
        let total: f64 = c.iter().sum();
        if core.len() != brute_core_size(&c, tau) {
            failures.push(format!("case {case}: core size {} vs {}", core.len(), brute_core_size(&c, tau)));
        }
        // coverage must reach τ without overshooting by a whole removable node
        if covered < tau * total * (1.0 - 1e-12) {
            failures.push(format!("case {case}: coverage {covered} below target"));
        }
        if let Some(&last) = core.last() {
            if covered - c[last] * (1.0 + perturb) >= tau * total * (1.0 - 1e-12) {
                failures.push(format!("case {case}: core is not minimal"));
            }
        }
        let all = tau_core(&c, 1.0)?;
        if all.len() != c.iter().filter(|&&v| v > 0.0).count() {
            failures.push(format!("case {case}: tau = 1 misses positive nodes"));
        }
    }
    Ok(Outcome {
        cases,
        worst: failures.len() as f64,
        tolerance: 0.0,
        failures,
    })
}

pub const SAMPLING_DRAWS: usize = 100_000;
pub const SAMPLING_P_MIN: f64 = 0.001;

/// Chi-square goodness-of-fit p-value of `counts` against probabilities `p`.
pub fn chi_square_p(counts: &[usize], p: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(p)
        .map(|(&o, &q)| {
            let e = q * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// The fixed 10-candidate score table.
pub const SAMPLING_TABLE: [f64; 10] = [5.0, 1.0, 0.5, 3.0, 2.0, 0.25, 8.0, 1.5, 4.0, 0.75];

pub fn sampling_frequencies(weighted: bool, draws: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; SAMPLING_TABLE.len()];
    for _ in 0..draws {
        let i = if weighted {
            weighted_sample_without_replacement(&SAMPLING_TABLE, 1, &mut rng).0[0]
        } else {
            sample(&mut rng, SAMPLING_TABLE.len(), 1).index(0)
        };
        counts[i] += 1;
    }
    counts
}

fn sampling(perturb: f64) -> Result<Outcome> {
    let n = SAMPLING_TABLE.len();
    let skew = |i: usize| 1.0 + perturb * (i as f64 - 4.5);
    let mut weighted: Vec<f64> = SAMPLING_TABLE.iter().enumerate().map(|(i, w)| w * skew(i)).collect();
    let s: f64 = weighted.iter().sum();
    weighted.iter_mut().for_each(|w| *w /= s);
    let mut uniform: Vec<f64> = (0..n).map(skew).collect();
    let s: f64 = uniform.iter().sum();
    uniform.iter_mut().for_each(|w| *w /= s);

    let p_w = chi_square_p(&sampling_frequencies(true, SAMPLING_DRAWS, 101), &weighted);
    let p_u = chi_square_p(&sampling_frequencies(false, SAMPLING_DRAWS, 202), &uniform);
    let mut failures = Vec::new();
    if !(p_w > SAMPLING_P_MIN) {
        failures.push(format!("score-proportional draws: p = {p_w:e}"));
    }
    if !(p_u > SAMPLING_P_MIN) {
        failures.push(format!("uniform draws: p = {p_u:e}"));
    }
    Ok(Outcome {
        cases: 2,
        worst: p_w.min(p_u),
        tolerance: SAMPLING_P_MIN,
        failures,
    })
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-3;
/// Batches whose pre-activations come closer than this to a ReLU kink are redrawn.
const KINK_MARGIN: f64 = 1e-2;

/// Network, input batch and labels for one gradient check.
pub type GradCase = (MaskedNetwork<f64>, Tensor<f64>, Vec<usize>);

/// A random three-layer masked MLP (widths ≤ 8) and a batch clear of ReLU kinks.
pub fn random_grad_case(rng: &mut impl Rng) -> Result<GradCase> {
    for _ in 0..100 {
        if let Some(case) = try_grad_case(rng)? {
            return Ok(case);
        }
    }
    Err(Error::Data("could not draw a batch away from ReLU kinks".into()))
}

fn try_grad_case(rng: &mut impl Rng) -> Result<Option<GradCase>> {
    let widths: Vec<usize> = (0..4).map(|k| rng.random_range(if k == 3 { 2 } else { 1 }..=8)).collect();
    let id = format!("mlp-{}-{}-{}-{}", widths[0], widths[1], widths[2], widths[3]);
    let mut net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id(&id)?, rng.random())?;
    net.set_prunable(&[true; 3])?;
    for l in 0..3 {
        let n = net.layer(l).mask().len();
        let keep = rng.random_range(1..=n);
        let mut bits = vec![false; n];
        for i in sample(rng, n, keep) {
            bits[i] = true;
        }
        net.set_mask(l, bits)?;
    }
    // nonzero biases keep units without inputs off the kink
    for slot in net.params_mut() {
        if slot.mask.is_none() {
            slot.data.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        }
    }
    let batch = 3;
    for _ in 0..200 {
        let x = Tensor::new(
            vec![batch, widths[0]],
            (0..batch * widths[0]).map(|_| StandardNormal.sample(rng)).collect(),
        )?;
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..widths[3])).collect();
        if kink_margin(&net, &x)? > KINK_MARGIN {
            return Ok(Some((net, x, labels)));
        }
    }
    Ok(None)
}

fn kink_margin(net: &MaskedNetwork<f64>, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = net.bind(&mut tape, xv, Mode::Eval, false)?;
    let mut margin = f64::INFINITY;
    for (l, &v) in bound.layer_outputs.iter().enumerate() {
        if net.layer(l).role() == LayerRole::Output {
            continue;
        }
        let out = tape.value(v);
        let width = out.shape()[1];
        let bias = net.layer(l).bias().map(|b| b.data().to_vec()).unwrap_or(vec![0.0; width]);
        for (k, z) in out.data().iter().enumerate() {
            margin = margin.min((z + bias[k % width]).abs());
        }
    }
    Ok(margin)
}

fn loss_of(net: &MaskedNetwork<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = net.bind(&mut tape, xv, Mode::Eval, false)?;
    let l = tape.softmax_cross_entropy(bound.output, labels)?;
    tape.value(l).item()
}

/// Worst `|autodiff − fd| / (1 + |fd|)` over every weight and bias of one case.
pub fn gradient_error(net: &mut MaskedNetwork<f64>, x: &Tensor<f64>, labels: &[usize], perturb: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = net.bind(&mut tape, xv, Mode::Train, false)?;
    let loss = tape.softmax_cross_entropy(bound.output, labels)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .param_vars()
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, slot) in analytic.iter().enumerate() {
        for (i, &a) in slot.iter().enumerate() {
            let orig = net.params_mut()[k].data[i];
            net.params_mut()[k].data[i] = orig + GRAD_STEP;
            let up = loss_of(net, x, labels)?;
            net.params_mut()[k].data[i] = orig - GRAD_STEP;
            let down = loss_of(net, x, labels)?;
            net.params_mut()[k].data[i] = orig;
            let fd = (up - down) / (2.0 * GRAD_STEP);
            let g = a * (1.0 + perturb);
            worst = worst.max((g - fd).abs() / (1.0 + fd.abs()));
        }
    }
    Ok(worst)
}

fn gradient(perturb: f64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let cases = 50;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..cases {
        let (mut net, x, labels) = random_grad_case(&mut rng)?;
        let e = gradient_error(&mut net, &x, &labels, perturb)?;
        worst = worst.max(e);
        if !(e < GRAD_TOL) {
            failures.push(format!("case {case}: relative error {e:e}"));
        }
    }
    Ok(Outcome {
        cases,
        worst,
        tolerance: GRAD_TOL,
        failures,
    })
}

pub const FIT_BETA_TOL: f64 = 0.05;
pub const FIT_PLATEAU_TOL: f64 = 1e-3;
pub const FIT_NOISY_TOL: f64 = 0.15;
pub const FIT_NOISE: f64 = 0.005;

pub fn fit_grid() -> Vec<f64> {
    (1..=10).map(|k| 0.05 * k as f64).collect()
}

fn fit(perturb: f64) -> Result<Outcome> {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let curves = [(0.5, 0.4, 10.0), (0.2, 0.7, 6.0), (0.1, 0.8, 15.0)];
    for &(p0, a, beta) in &curves {
        let pts: Vec<(f64, f64)> = fit_grid().into_iter().map(|r| (r, curve(p0, a, beta, r))).collect();
        let truth = plateau_density(p0, a, beta, PlateauRule::OfAsymptote);
        match fit_logistic(&DensityTrace::from_points(&pts)?, PlateauRule::OfAsymptote) {
            None => failures.push(format!("({p0}, {a}, {beta}): no fit")),
            Some(f) => {
                let rb = (f.beta * (1.0 + perturb) - beta).abs() / beta;
                let dp = (f.plateau * (1.0 + perturb) - truth).abs();
                worst = worst.max(dp);
                if !(rb < FIT_BETA_TOL) {
                    failures.push(format!("({p0}, {a}, {beta}): beta off by {rb:e}"));
                }
                if !(dp < FIT_PLATEAU_TOL) {
                    failures.push(format!("({p0}, {a}, {beta}): plateau off by {dp:e}"));
                }
            }
        }
    }
    let noise = Normal::new(0.0, FIT_NOISE).expect("valid deviation");
    let truth = plateau_density(0.5, 0.4, 10.0, PlateauRule::OfAsymptote);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = fit_grid()
            .into_iter()
            .map(|r| (r, curve(0.5, 0.4, 10.0, r) + noise.sample(&mut rng)))
            .collect();
        match fit_logistic(&DensityTrace::from_points(&pts)?, PlateauRule::OfAsymptote) {
            None => failures.push(format!("noisy seed {seed}: no fit")),
            Some(f) => {
                let rel = (f.plateau * (1.0 + perturb) - truth).abs() / truth;
                if !(rel < FIT_NOISY_TOL) {
                    failures.push(format!("noisy seed {seed}: plateau off by {:.1}%", 100.0 * rel));
                }
            }
        }
    }
    Ok(Outcome {
        cases: curves.len() + 20,
        worst,
        tolerance: FIT_PLATEAU_TOL,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_clean() {
        let s = run_all(&SUITES, 0.0).unwrap();
        for r in &s.suites {
            assert!(r.passed, "{}: {:?}", r.name, r.failures);
        }
    }

    #[test]
    fn perturbation_breaks_each_suite() {
        for (name, p) in [("path", 1e-6), ("conv", 1e-6), ("sampling", 0.05), ("gradient", 1e-2), ("fit", 0.2)] {
            assert!(!run_suite(name, p).unwrap().passed, "{name}");
        }
    }

    #[test]
    fn brute_core_matches_small_example() {
        assert_eq!(brute_core_size(&[5.0, 3.0, 2.0], 0.7), 2);
        assert_eq!(tau_core(&[5.0, 3.0, 2.0], 0.7).unwrap(), vec![0, 1]);
    }

    #[test]
    fn unknown_suite_is_usage_error() {
        assert!(matches!(run_suite("speed", 0.0), Err(Error::Usage(_))));
    }
}
