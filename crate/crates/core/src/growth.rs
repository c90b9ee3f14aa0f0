//! Edge-addition policies. Every added edge starts with weight exactly zero.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{dense_forward_flops, forward_flops, TRAIN_MULTIPLIER};
use crate::model::{MaskedNetwork, Mode};
use crate::pathscore::{candidate_scores, score_pass, Candidate};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthMethod {
    /// Sample missing edges with probability proportional to their PWMP score.
    Pwmpr,
    /// Add the top-scoring missing edges.
    Pwmp,
    /// Uniform over missing edges.
    #[serde(rename = "rg")]
    Random,
    /// Largest dense-gradient magnitude on one batch.
    #[serde(rename = "gg")]
    Gradient,
}

impl GrowthMethod {
    pub fn tag(self) -> &'static str {
        match self {
            GrowthMethod::Pwmpr => "pwmpr",
            GrowthMethod::Pwmp => "pwmp",
            GrowthMethod::Random => "rg",
            GrowthMethod::Gradient => "gg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthAmount {
    pub delta: f64,
    pub edges: usize,
    /// The density cap shortened this step.
    pub capped: bool,
}

/// Δρ = γ·ρ, shortened so ρ + Δρ does not pass `cap`; M = ⌊n·Δρ⌋.
pub fn growth_amount(rho: f64, gamma: f64, cap: Option<f64>, n: usize) -> Result<GrowthAmount> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("growth ratio must be positive, got {gamma}")));
    }
    if !(rho > 0.0) {
        return Err(Error::CannotGrow("density is zero; growth is relative to current density".into()));
    }
    if rho >= 1.0 {
        return Err(Error::CannotGrow("network is already dense".into()));
    }
    let mut delta = gamma * rho;
    let mut capped = false;
    if let Some(c) = cap {
        if rho + delta > c {
            delta = (c - rho).max(0.0);
            capped = true;
        }
    }
    // guard against n·Δρ landing a hair below an integer
    let edges = (n as f64 * delta + 1e-9).floor() as usize;
    Ok(GrowthAmount {
        delta,
        edges,
        capped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEvent {
    pub method: GrowthMethod,
    pub density_before: f64,
    pub density_after: f64,
    pub requested: usize,
    /// (layer, flat weight index) of every added edge.
    pub added: Vec<(usize, usize)>,
    pub seed: u64,
    /// Scores were all zero for some draws, which fell back to uniform sampling.
    pub fallback: bool,
    /// Fewer candidates than requested existed.
    pub exhausted: bool,
    pub scoring_flops: f64,
    pub scoring_seconds: f64,
}

/// Binary sum tree supporting weighted draws without replacement. Ancestor sums are
/// recomputed from their children after every removal, so no drift accumulates.
pub struct SumTree {
    size: usize,
    tree: Vec<f64>,
    n: usize,
}

impl SumTree {
    pub fn new(weights: &[f64]) -> Self {
        let size = weights.len().next_power_of_two().max(1);
        let mut tree = vec![0.0; 2 * size];
        for (i, &w) in weights.iter().enumerate() {
            tree[size + i] = if w.is_finite() && w > 0.0 { w } else { 0.0 };
        }
        for i in (1..size).rev() {
            tree[i] = tree[2 * i] + tree[2 * i + 1];
        }
        Self {
            size,
            tree,
            n: weights.len(),
        }
    }

    pub fn total(&self) -> f64 {
        self.tree[1]
    }

    /// Draws one index with probability proportional to its weight, or `None` when
    /// every remaining weight is zero.
    pub fn draw(&mut self, rng: &mut impl Rng) -> Option<usize> {
        if !(self.total() > 0.0) {
            return None;
        }
        let mut u = rng.random::<f64>() * self.total();
        let mut i = 1;
        while i < self.size {
            let (l, r) = (self.tree[2 * i], self.tree[2 * i + 1]);
            i = if r <= 0.0 || (u < l && l > 0.0) {
                2 * i
            } else {
                u -= l;
                2 * i + 1
            };
        }
        let leaf = i - self.size;
        debug_assert!(leaf < self.n);
        self.remove(leaf);
        Some(leaf)
    }

    pub fn remove(&mut self, leaf: usize) {
        let mut i = self.size + leaf;
        self.tree[i] = 0.0;
        while i > 1 {
            i /= 2;
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1];
        }
    }
}

/// `m` distinct indices drawn sequentially, each ∝ weight among those remaining. When
/// the positive mass runs out the rest are drawn uniformly; the flag reports that.
pub fn weighted_sample_without_replacement(
    weights: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, bool) {
    let m = m.min(weights.len());
    let mut tree = SumTree::new(weights);
    let mut picked = Vec::with_capacity(m);
    let mut taken = vec![false; weights.len()];
    while picked.len() < m {
        match tree.draw(rng) {
            Some(i) => {
                taken[i] = true;
                picked.push(i);
            }
            None => break,
        }
    }
    let fallback = picked.len() < m;
    if fallback {
        let rest: Vec<usize> = (0..weights.len()).filter(|&i| !taken[i]).collect();
        for k in sample(rng, rest.len(), m - picked.len()) {
            picked.push(rest[k]);
        }
    }
    (picked, fallback)
}

/// Indices of the `m` largest scores; ties go to the earlier candidate.
fn top_m(cands: &[Candidate], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .score
            .total_cmp(&cands[a].score)
            .then((cands[a].layer, cands[a].index).cmp(&(cands[b].layer, cands[b].index)))
    });
    order.truncate(m);
    order
}

/// A labelled batch used by gradient growth.
pub struct Batch<'a, T> {
    pub x: &'a Tensor<T>,
    pub labels: &'a [usize],
}

/// Dense |∂L/∂θ| at every weight position, treating missing edges as zero weights.
pub fn dense_gradient_scores<T: Scalar>(net: &MaskedNetwork<T>, batch: &Batch<'_, T>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone());
    let bound = net.bind(&mut tape, x, Mode::Train, true)?;
    let loss = tape.softmax_cross_entropy(bound.output, batch.labels)?;
    let grads = tape.backward(loss)?;
    Ok(bound
        .effective
        .iter()
        .map(|e| {
            let e = e.expect("dense binding records every masked weight");
            grads
                .get(e)
                .map(|g| g.data().iter().map(|v| v.as_f64().abs()).collect())
                .unwrap_or_else(|| vec![0.0; tape.value(e).numel()])
        })
        .collect())
}

/// Adds up to `m` missing prunable edges chosen by `method`.
pub fn grow<T: Scalar>(
    net: &mut MaskedNetwork<T>,
    method: GrowthMethod,
    m: usize,
    seed: u64,
    batch: Option<&Batch<'_, T>>,
) -> Result<GrowthEvent> {
    let density_before = net.density();
    let available = net.missing_edges();
    if available == 0 {
        return Err(Error::CannotGrow("no missing edges in the prunable scope".into()));
    }
    let take = if m > available {
        log::warn!("requested {m} new edges but only {available} are missing; adding all");
        available
    } else {
        m
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let started = Instant::now();
    let mut scoring_flops = 0.0;
    let mut fallback = false;

    let chosen: Vec<(usize, usize)> = match method {
        GrowthMethod::Random => {
            let cands = missing_positions(net);
            sample(&mut rng, cands.len(), take)
                .into_iter()
                .map(|i| cands[i])
                .collect()
        }
        GrowthMethod::Pwmpr | GrowthMethod::Pwmp => {
            let scores = score_pass(net)?;
            scoring_flops = TRAIN_MULTIPLIER * forward_flops(net);
            let cands = candidate_scores(net, &scores);
            let idx = if method == GrowthMethod::Pwmp {
                top_m(&cands, take)
            } else {
                let w: Vec<f64> = cands.iter().map(|c| c.score).collect();
                let (idx, fb) = weighted_sample_without_replacement(&w, take, &mut rng);
                fallback = fb;
                idx
            };
            idx.into_iter().map(|i| (cands[i].layer, cands[i].index)).collect()
        }
        GrowthMethod::Gradient => {
            let batch = batch.ok_or_else(|| Error::Usage("gradient growth needs a data batch".into()))?;
            let g = dense_gradient_scores(net, batch)?;
            scoring_flops = TRAIN_MULTIPLIER * dense_forward_flops(net) * batch.labels.len() as f64;
            let mut cands = Vec::with_capacity(available);
            for (l, layer) in net.layers().iter().enumerate() {
                if !layer.prunable() {
                    continue;
                }
                for (index, &on) in layer.mask().bits().iter().enumerate() {
                    if !on {
                        cands.push(Candidate {
                            layer: l,
                            index,
                            score: g[l][index],
                        });
                    }
                }
            }
            top_m(&cands, take)
                .into_iter()
                .map(|i| (cands[i].layer, cands[i].index))
                .collect()
        }
    };
    let scoring_seconds = started.elapsed().as_secs_f64();

    let mut added = chosen;
    added.sort_unstable();
    for &(l, i) in &added {
        if !net.grow_edge(l, i)? {
            return Err(Error::Usage(format!("edge ({l}, {i}) was already present")));
        }
    }
    Ok(GrowthEvent {
        method,
        density_before,
        density_after: net.density(),
        requested: m,
        added,
        seed,
        fallback,
        exhausted: take < m,
        scoring_flops,
        scoring_seconds,
    })
}

fn missing_positions<T: Scalar>(net: &MaskedNetwork<T>) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(net.missing_edges());
    for (l, layer) in net.layers().iter().enumerate() {
        if layer.prunable() {
            out.extend(
                layer
                    .mask()
                    .bits()
                    .iter()
                    .enumerate()
                    .filter(|(_, &on)| !on)
                    .map(|(i, _)| (l, i)),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    fn sparse_mlp(id: &str, keep_every: usize) -> MaskedNetwork<f64> {
        let mut net = MaskedNetwork::from_arch(&ArchSpec::from_id(id).unwrap(), 4).unwrap();
        for l in 0..net.layers().len() {
            if net.layer(l).prunable() {
                let n = net.layer(l).mask().len();
                net.set_mask(l, (0..n).map(|i| i % keep_every == 0).collect()).unwrap();
            }
        }
        net
    }

    #[test]
    fn growth_amount_examples() {
        let a = growth_amount(0.05, 0.25, None, 1000).unwrap();
        assert!((a.delta - 0.0125).abs() < 1e-15);
        assert_eq!(a.edges, 12);
        let c = growth_amount(0.16, 0.25, Some(0.18), 1000).unwrap();
        assert!((c.delta - 0.02).abs() < 1e-12 && c.capped);
        assert!(matches!(growth_amount(0.0, 0.25, None, 10), Err(Error::CannotGrow(_))));
    }

    #[test]
    fn deterministic_top_m_and_ties() {
        let c = |i, s| Candidate { layer: 0, index: i, score: s };
        assert_eq!(top_m(&[c(0, 5.0), c(1, 3.0), c(2, 1.0)], 2), vec![0, 1]);
        assert_eq!(top_m(&[c(0, 1.0), c(1, 1.0), c(2, 1.0)], 1), vec![0]);
    }

    #[test]
    fn every_method_adds_zero_weights_and_keeps_superset() {
        let x = Tensor::from_f64(vec![4, 6], &(0..24).map(|i| (i % 5) as f64 / 5.0).collect::<Vec<_>>()).unwrap();
        let labels = [0, 1, 2, 1];
        for method in [GrowthMethod::Pwmpr, GrowthMethod::Pwmp, GrowthMethod::Random, GrowthMethod::Gradient] {
            let mut net = sparse_mlp("mlp-6-5-5-3", 3);
            let before = net.clone();
            let batch = Batch { x: &x, labels: &labels };
            let ev = grow(&mut net, method, 7, 1, Some(&batch)).unwrap();
            assert_eq!(ev.added.len(), 7);
            assert!(net.is_superset_of(&before));
            let n = net.prunable_params() as f64;
            assert!((ev.density_after - ev.density_before - 7.0 / n).abs() < 1e-12);
            for &(l, i) in &ev.added {
                assert!(!before.layer(l).mask().get(i));
                assert_eq!(net.layer(l).weight().data()[i], 0.0);
            }
        }
    }

    #[test]
    fn exhausting_candidates_densifies() {
        let mut net = sparse_mlp("mlp-4-4-2", 2);
        let missing = net.missing_edges();
        let ev = grow(&mut net, GrowthMethod::Pwmpr, missing + 5, 3, None).unwrap();
        assert!(ev.exhausted);
        assert_eq!(net.density(), 1.0);
        assert!(matches!(
            grow(&mut net, GrowthMethod::Random, 1, 3, None),
            Err(Error::CannotGrow(_))
        ));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut a = sparse_mlp("mlp-8-8-8-2", 4);
        let mut b = a.clone();
        let ea = grow(&mut a, GrowthMethod::Pwmpr, 10, 99, None).unwrap();
        let eb = grow(&mut b, GrowthMethod::Pwmpr, 10, 99, None).unwrap();
        assert_eq!(ea.added, eb.added);
    }

    #[test]
    fn zero_scores_fall_back_to_uniform() {
        let mut net = sparse_mlp("mlp-4-4-2", 2);
        for l in 0..2 {
            net.layer_weight_mut(l).iter_mut().for_each(|w| *w = 0.0);
        }
        let ev = grow(&mut net, GrowthMethod::Pwmpr, 3, 5, None).unwrap();
        assert!(ev.fallback);
        assert_eq!(ev.added.len(), 3);
    }

    #[test]
    fn zero_batch_gradients_tie_break_by_index() {
        let mut net = sparse_mlp("mlp-3-4-2", 2);
        net.set_prunable(&[true, false]).unwrap();
        let x = Tensor::zeros(vec![2, 3]);
        let labels = [0, 1];
        let ev = grow(&mut net, GrowthMethod::Gradient, 2, 0, Some(&Batch { x: &x, labels: &labels })).unwrap();
        // first-layer weight gradients are x-weighted, hence all zero
        assert_eq!(ev.added, vec![(0, 1), (0, 3)]);
    }
}
