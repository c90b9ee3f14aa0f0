//! Initial sparse networks and the magnitude-pruning baseline step.
//!
//! The walk-based initializer starts from the dense weight draw and alternates random
//! walks input→output and output→input. Each step follows one of the current node's
//! edges with probability proportional to |θ|; residual junctions count as unit-weight
//! edges. Edges of prunable layers that a walk traverses are kept.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchSpec, LayerKind, MaskedNetwork, Space, Topology};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Phew,
    Uniform,
    Erk,
}

/// Walks rejected in a row (for overshooting the target) before one is accepted anyway.
const MAX_REJECTIONS: usize = 10_000;

/// Number of prunable edges a density target asks for.
pub fn target_edges(rho: f64, n: usize) -> usize {
    ((rho * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("initial density must lie in (0, 1], got {rho}")))
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Weight { layer: usize, idx: usize, to: usize },
    Unit { to: usize },
}

struct Walker<'a, T> {
    net: &'a MaskedNetwork<T>,
    topo: Topology,
}

impl<T: Scalar> Walker<'_, T> {
    fn out_steps(&self, s: Space, v: usize) -> Vec<(Step, Space, f64)> {
        let mut out = Vec::new();
        for (l, layer) in self.net.layers().iter().enumerate() {
            let (src, map) = self.topo.layer_src[l];
            if src != s {
                continue;
            }
            let w = layer.weight().data();
            match layer.kind() {
                LayerKind::Linear { inputs, outputs } => {
                    for i in (0..inputs).filter(|&i| map.node(i) == v) {
                        for j in 0..outputs {
                            let idx = i * outputs + j;
                            out.push((Step::Weight { layer: l, idx, to: j }, Space::Layer(l), w[idx].as_f64().abs()));
                        }
                    }
                }
                LayerKind::Conv(g) => {
                    for tap in 0..g.kh * g.kw {
                        for k in 0..g.c_out {
                            let idx = (tap * g.c_in + v) * g.c_out + k;
                            out.push((Step::Weight { layer: l, idx, to: k }, Space::Layer(l), w[idx].as_f64().abs()));
                        }
                    }
                }
            }
        }
        for (k, srcs) in self.topo.junction_src.iter().enumerate() {
            if srcs.contains(&s) {
                out.push((Step::Unit { to: v }, Space::Junction(k), 1.0));
            }
        }
        out
    }

    fn in_steps(&self, s: Space, v: usize) -> Vec<(Step, Space, f64)> {
        let mut out = Vec::new();
        match s {
            Space::Input => {}
            Space::Layer(l) => {
                let layer = self.net.layer(l);
                let (src, map) = self.topo.layer_src[l];
                let w = layer.weight().data();
                let kind = layer.kind();
                let n_out = kind.out_width();
                for idx in (v..kind.weight_len()).step_by(n_out) {
                    let (i, _) = kind.endpoints(idx);
                    out.push((Step::Weight { layer: l, idx, to: map.node(i) }, src, w[idx].as_f64().abs()));
                }
            }
            Space::Junction(k) => {
                for &src in &self.topo.junction_src[k] {
                    out.push((Step::Unit { to: v }, src, 1.0));
                }
            }
        }
        out
    }

    /// One walk; `None` if it reached a node without edges.
    fn walk(&self, forward: bool, rng: &mut impl Rng) -> Option<Vec<(usize, usize)>> {
        let (mut s, end) = if forward {
            (Space::Input, self.topo.output)
        } else {
            (self.topo.output, Space::Input)
        };
        let mut v = rng.random_range(0..self.topo.width(s));
        let mut edges = Vec::new();
        while s != end {
            let opts = if forward { self.out_steps(s, v) } else { self.in_steps(s, v) };
            if opts.is_empty() {
                return None;
            }
            let total: f64 = opts.iter().map(|o| o.2).sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut k = opts.len() - 1;
                for (i, o) in opts.iter().enumerate() {
                    if u < o.2 {
                        k = i;
                        break;
                    }
                    u -= o.2;
                }
                k
            } else {
                rng.random_range(0..opts.len())
            };
            let (step, next, _) = opts[pick];
            match step {
                Step::Weight { layer, idx, to } => {
                    edges.push((layer, idx));
                    v = to;
                }
                Step::Unit { to } => v = to,
            }
            s = next;
        }
        Some(edges)
    }
}

/// Replaces the masks of prunable layers with the union of traversed walk edges.
pub fn init_phew<T: Scalar>(net: &mut MaskedNetwork<T>, rho: f64, seed: u64) -> Result<()> {
    check_rho(rho)?;
    let n = net.prunable_params();
    let target = target_edges(rho, n);
    let prunable = net.prunable_flags();
    if target >= n {
        return Ok(());
    }
    let mut bits: Vec<Vec<bool>> = net.layers().iter().map(|l| vec![!l.prunable(); l.mask().len()]).collect();
    let mut have = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    {
        let walker = Walker {
            net,
            topo: net.topology(),
        };
        let mut forward = true;
        let mut rejected = 0usize;
        let mut restarts = 0usize;
        while have < target {
            let Some(edges) = walker.walk(forward, &mut rng) else {
                restarts += 1;
                if restarts > 1_000_000 {
                    return Err(Error::Data("walks cannot reach the far side of the network".into()));
                }
                continue;
            };
            forward = !forward;
            let mut fresh: Vec<(usize, usize)> = edges
                .into_iter()
                .filter(|&(l, i)| prunable[l] && !bits[l][i])
                .collect();
            fresh.sort_unstable();
            fresh.dedup();
            if fresh.is_empty() {
                continue;
            }
            if have + fresh.len() > target && rejected < MAX_REJECTIONS {
                rejected += 1;
                continue;
            }
            if have + fresh.len() > target {
                log::warn!("walk initialization overshoots its target by {} edges", have + fresh.len() - target);
            }
            rejected = 0;
            for (l, i) in fresh {
                bits[l][i] = true;
                have += 1;
            }
        }
    }
    for (l, b) in bits.into_iter().enumerate() {
        if prunable[l] {
            net.set_mask(l, b)?;
        }
    }
    Ok(())
}

/// Same density in every prunable layer, positions uniform at random.
pub fn init_uniform<T: Scalar>(net: &mut MaskedNetwork<T>, rho: f64, seed: u64) -> Result<()> {
    check_rho(rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..net.layers().len() {
        if !net.layer(l).prunable() {
            continue;
        }
        let n = net.layer(l).mask().len();
        let keep = target_edges(rho, n);
        let mut bits = vec![false; n];
        for i in sample(&mut rng, n, keep) {
            bits[i] = true;
        }
        net.set_mask(l, bits)?;
    }
    Ok(())
}

/// Erdős–Rényi-kernel layer densities: proportional to (Σ dims)/(Π dims), rescaled to
/// the global target with saturated layers held dense.
pub fn erk_densities<T: Scalar>(net: &MaskedNetwork<T>, rho: f64) -> Vec<f64> {
    let layers: Vec<(usize, f64, bool)> = net
        .layers()
        .iter()
        .map(|l| {
            let shape = l.kind().weight_shape();
            let raw = shape.iter().sum::<usize>() as f64 / shape.iter().product::<usize>() as f64;
            (l.mask().len(), raw, l.prunable())
        })
        .collect();
    let total: f64 = layers.iter().filter(|l| l.2).map(|l| l.0 as f64).sum();
    let mut dense = vec![false; layers.len()];
    loop {
        let budget = rho * total - layers.iter().zip(&dense).filter(|(l, &d)| l.2 && d).map(|(l, _)| l.0 as f64).sum::<f64>();
        let weighted: f64 = layers.iter().zip(&dense).filter(|(l, &d)| l.2 && !d).map(|(l, _)| l.0 as f64 * l.1).sum();
        let eps = if weighted > 0.0 { budget / weighted } else { 0.0 };
        let mut changed = false;
        for (i, l) in layers.iter().enumerate() {
            if l.2 && !dense[i] && eps * l.1 > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            return layers
                .iter()
                .zip(&dense)
                .map(|(l, &d)| if !l.2 || d { 1.0 } else { eps * l.1 })
                .collect();
        }
    }
}

pub fn init_erk<T: Scalar>(net: &mut MaskedNetwork<T>, rho: f64, seed: u64) -> Result<()> {
    check_rho(rho)?;
    let dens = erk_densities(net, rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, d) in dens.into_iter().enumerate() {
        if !net.layer(l).prunable() {
            continue;
        }
        let n = net.layer(l).mask().len();
        let keep = ((d * n as f64).round() as usize).min(n);
        let mut bits = vec![false; n];
        for i in sample(&mut rng, n, keep) {
            bits[i] = true;
        }
        net.set_mask(l, bits)?;
    }
    Ok(())
}

pub fn initialize<T: Scalar>(net: &mut MaskedNetwork<T>, method: InitMethod, rho: f64, seed: u64) -> Result<()> {
    match method {
        InitMethod::Phew => init_phew(net, rho, seed),
        InitMethod::Uniform => init_uniform(net, rho, seed),
        InitMethod::Erk => init_erk(net, rho, seed),
    }
}

/// Isolated-node fraction after walk initialization at each density.
pub fn find_min_viable_density(arch: &ArchSpec, seed: u64, densities: &[f64]) -> Result<Vec<(f64, f64)>> {
    if densities.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("densities must be sorted ascending".into()));
    }
    densities
        .iter()
        .map(|&rho| {
            let mut net = MaskedNetwork::<f32>::from_arch(arch, seed)?;
            init_phew(&mut net, rho, seed)?;
            Ok((rho, net.isolated_node_fraction()))
        })
        .collect()
}

/// One pruning cycle of iterative magnitude pruning with continued training: removes
/// round(ratio · nnz) of the present prunable weights with the smallest |θ| (global
/// ranking, ties to the lower layer then index). Surviving weights are kept as they are.
pub fn imp_c_step<T: Scalar>(net: &mut MaskedNetwork<T>, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("prune ratio must lie in (0, 1), got {ratio}")));
    }
    let mut present: Vec<(f64, usize, usize)> = Vec::with_capacity(net.prunable_nnz());
    for (l, layer) in net.layers().iter().enumerate() {
        if !layer.prunable() {
            continue;
        }
        for (i, (&on, w)) in layer.mask().bits().iter().zip(layer.weight().data()).enumerate() {
            if on {
                present.push((w.as_f64().abs(), l, i));
            }
        }
    }
    let remove = (ratio * present.len() as f64).round() as usize;
    present.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, l, i) in &present[..remove] {
        net.prune_edge(l, i)?;
    }
    Ok(remove)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathscore::score_pass;

    fn net(id: &str, seed: u64) -> MaskedNetwork<f64> {
        MaskedNetwork::from_arch(&ArchSpec::from_id(id).unwrap(), seed).unwrap()
    }

    /// Every present prunable edge lies on a complete input→output path.
    fn all_edges_on_paths(net: &MaskedNetwork<f64>) -> bool {
        let mut unit = net.clone();
        for l in 0..unit.layers().len() {
            let bits = unit.layer(l).mask().bits().to_vec();
            for (w, on) in unit.layer_weight_mut(l).iter_mut().zip(bits) {
                *w = if on { 1.0 } else { 0.0 };
            }
        }
        let s = score_pass(&unit).unwrap();
        unit.layers().iter().enumerate().all(|(l, layer)| {
            !layer.prunable()
                || layer
                    .mask()
                    .bits()
                    .iter()
                    .zip(&s.edge_scores[l])
                    .all(|(&on, &sc)| !on || sc > 0.0)
        })
    }

    #[test]
    fn phew_hits_target_and_keeps_paths() {
        for seed in 0..5 {
            let mut n = net("mlp-20-16-16-4", seed);
            init_phew(&mut n, 0.1, seed).unwrap();
            assert_eq!(n.prunable_nnz(), target_edges(0.1, n.prunable_params()));
            assert!(all_edges_on_paths(&n));
            for l in n.layers() {
                for (&on, &w) in l.mask().bits().iter().zip(l.weight().data()) {
                    assert!(on || w == 0.0);
                }
            }
        }
    }

    #[test]
    fn phew_full_density_is_dense() {
        let mut n = net("mlp-6-5-3", 0);
        init_phew(&mut n, 1.0, 0).unwrap();
        assert_eq!(n.density(), 1.0);
    }

    #[test]
    fn phew_on_resnet_reaches_target() {
        let mut n = MaskedNetwork::<f32>::from_arch(&ArchSpec::from_id("resnet-8-w4-i8x8x3").unwrap(), 1).unwrap();
        init_phew(&mut n, 0.2, 1).unwrap();
        assert_eq!(n.prunable_nnz(), target_edges(0.2, n.prunable_params()));
    }

    #[test]
    fn isolated_fraction_table() {
        let arch = ArchSpec::from_id("mlp-8-8-8").unwrap();
        let t = find_min_viable_density(&arch, 3, &[0.01, 0.5, 1.0]).unwrap();
        assert_eq!(t[2].1, 0.0);
        assert!(t[0].1 >= 0.85, "{t:?}");
        assert!(find_min_viable_density(&arch, 3, &[0.5, 0.1]).is_err());
    }

    #[test]
    fn erk_meets_global_density() {
        let mut n = net("mlp-50-40-30-10", 0);
        n.set_prunable(&[true, true, true]).unwrap();
        init_erk(&mut n, 0.2, 0).unwrap();
        assert!((n.density() - 0.2).abs() < 0.01, "{}", n.density());
    }

    #[test]
    fn imp_c_examples() {
        let mut n = net("mlp-5-1", 0);
        n.set_prunable(&[true]).unwrap();
        n.layer_weight_mut(0).copy_from_slice(&[0.1, -0.5, 2.0, -0.05, 0.3]);
        assert_eq!(imp_c_step(&mut n, 0.2).unwrap(), 1);
        assert!(!n.layer(0).mask().get(3));

        let mut n = net("mlp-10-10-2", 1);
        init_uniform(&mut n, 0.5, 1).unwrap();
        imp_c_step(&mut n, 0.2).unwrap();
        assert!((n.density() - 0.4).abs() < 1e-12);

        let mut n = net("mlp-4-1", 0);
        n.set_prunable(&[true]).unwrap();
        n.layer_weight_mut(0).copy_from_slice(&[1.0, 0.5, 0.5, 2.0]);
        imp_c_step(&mut n, 0.25).unwrap();
        assert_eq!(n.layer(0).mask().bits(), &[true, false, true, true]);

        assert!(matches!(imp_c_step(&mut n, 1.0), Err(Error::Config(_))));
    }
}
