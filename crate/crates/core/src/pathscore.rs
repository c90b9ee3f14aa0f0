//! Path-weight scores from one forward and one backward pass over the |θ| network.
//!
//! Feeding ones through the network with every weight replaced by its magnitude and
//! every nonlinearity removed makes each pre-activation equal to the summed weight
//! product of all input paths reaching it (the node's complexity φ). Back-propagating a
//! unit signal from the summed outputs gives the summed product of all paths leaving it
//! (its generality ψ). The gradient at a masked weight is then Σ φ(i)·ψ(j), which for a
//! missing edge is the total path product it would carry per unit of weight.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{MaskedNetwork, Mode, Space};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// φ and ψ over one node space. Conv spaces keep one value per pixel and channel
/// (`pixels × width`, channel fastest); linear spaces have one pixel.
#[derive(Clone, Debug)]
pub struct SpaceScores {
    pub space: Space,
    pub width: usize,
    pub pixels: usize,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl SpaceScores {
    /// Σ over the node's pixels of φ.
    pub fn node_phi(&self) -> Vec<f64> {
        self.reduce(|i| self.phi[i])
    }

    pub fn node_psi(&self) -> Vec<f64> {
        self.reduce(|i| self.psi[i])
    }

    /// C(v) = Σ over pixels of φ·ψ: every path through a pixel of the channel factorizes
    /// into an input half and an output half.
    pub fn centrality(&self) -> Vec<f64> {
        self.reduce(|i| self.phi[i] * self.psi[i])
    }

    fn reduce(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for p in 0..self.pixels {
            for (c, o) in out.iter_mut().enumerate() {
                *o += f(p * self.width + c);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PathScores {
    /// Input space first, then each weight layer's output space.
    pub spaces: Vec<SpaceScores>,
    /// Per layer, the score of every weight position (present or missing).
    pub edge_scores: Vec<Vec<f64>>,
    /// Σ over output nodes of φ: the summed weight product of all input→output paths.
    pub total: f64,
}

impl PathScores {
    pub fn space(&self, s: Space) -> Option<&SpaceScores> {
        self.spaces.iter().find(|x| x.space == s)
    }
}

fn scores_with<T: Scalar>(net: &MaskedNetwork<T>, square: bool) -> Result<PathScores> {
    let net = net.cast::<f64>();
    let mut tape = Tape::<f64>::new();
    let mut in_shape = vec![1];
    in_shape.extend_from_slice(net.input_shape());
    let x = tape.param(Tensor::full(in_shape, 1.0));
    let bound = net.bind(&mut tape, x, Mode::Score { square }, true)?;
    let total_var = tape.sum(bound.output);
    let grads = tape.backward(total_var)?;
    let total = tape.value(total_var).item()?;

    let topo = net.topology();
    let grad_or_zero = |v| {
        grads
            .get(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    };
    let mut spaces = Vec::new();
    for s in topo.node_spaces() {
        let v = match s {
            Space::Input => bound.input,
            Space::Layer(l) => bound.layer_outputs[l],
            Space::Junction(_) => unreachable!(),
        };
        let phi = tape.value(v).data().to_vec();
        let width = topo.width(s);
        spaces.push(SpaceScores {
            space: s,
            width,
            pixels: phi.len() / width.max(1),
            psi: grad_or_zero(v),
            phi,
        });
    }
    let edge_scores = bound
        .effective
        .iter()
        .map(|e| {
            let e = e.expect("score binding records every masked weight");
            grad_or_zero(e)
        })
        .collect();
    if !total.is_finite() {
        return Err(Error::Divergence("path scores overflowed".into()));
    }
    Ok(PathScores {
        spaces,
        edge_scores,
        total,
    })
}

/// φ, ψ and per-edge PWMP scores in O(E).
pub fn score_pass<T: Scalar>(net: &MaskedNetwork<T>) -> Result<PathScores> {
    scores_with(net, false)
}

/// The same pass over θ²: per-edge scores become the path-kernel trace increase of
/// adding a zero-weight edge.
pub fn delta_trace_scores<T: Scalar>(net: &MaskedNetwork<T>) -> Result<PathScores> {
    scores_with(net, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
}

/// Every missing edge of every prunable layer, ordered by (layer, index).
pub fn candidate_scores<T: Scalar>(net: &MaskedNetwork<T>, scores: &PathScores) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(net.missing_edges());
    for (l, layer) in net.layers().iter().enumerate() {
        if !layer.prunable() {
            continue;
        }
        for (index, &on) in layer.mask().bits().iter().enumerate() {
            if !on {
                out.push(Candidate {
                    layer: l,
                    index,
                    score: scores.edge_scores[l][index],
                });
            }
        }
    }
    out
}

pub fn total_pwmp<T: Scalar>(net: &MaskedNetwork<T>) -> Result<f64> {
    Ok(score_pass(net)?.total)
}

/// C(v) for every node, grouped by node space.
pub fn path_centrality<T: Scalar>(net: &MaskedNetwork<T>) -> Result<Vec<(Space, Vec<f64>)>> {
    Ok(score_pass(net)?
        .spaces
        .iter()
        .map(|s| (s.space, s.centrality()))
        .collect())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")))
    }
}

/// Smallest prefix of nodes, by descending centrality with ties to the lower index,
/// covering at least `tau` of the total. Returns the chosen indices in order.
pub fn tau_core(centralities: &[f64], tau: f64) -> Result<Vec<usize>> {
    check_tau(tau)?;
    let total: f64 = centralities.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::EmptyCore);
    }
    let mut order: Vec<usize> = (0..centralities.len()).collect();
    order.sort_by(|&a, &b| centralities[b].total_cmp(&centralities[a]).then(a.cmp(&b)));
    let target = tau * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    let mut core = Vec::new();
    for i in order {
        if centralities[i] <= 0.0 {
            break;
        }
        acc += centralities[i];
        core.push(i);
        if acc >= target && tau < 1.0 {
            break;
        }
    }
    Ok(core)
}

#[derive(Clone, Debug, Serialize)]
pub struct CentralityReport {
    pub total_pwmp: f64,
    /// τ-core over the union of all node spaces.
    pub global_core_size: usize,
    /// (space label, core size, width) per hidden space.
    pub layer_cores: Vec<(String, usize, usize)>,
    pub avg_core_ratio: f64,
}

pub fn space_label(s: Space) -> String {
    match s {
        Space::Input => "input".into(),
        Space::Layer(l) => format!("layer{l}"),
        Space::Junction(j) => format!("junction{j}"),
    }
}

/// Mean over hidden spaces of (τ-core size / width); a space without centrality
/// contributes 0.
pub fn avg_tau_core_ratio<T: Scalar>(net: &MaskedNetwork<T>, tau: f64) -> Result<f64> {
    Ok(centrality_report_from(net, &score_pass(net)?, tau)?.avg_core_ratio)
}

pub fn centrality_report<T: Scalar>(net: &MaskedNetwork<T>, tau: f64) -> Result<CentralityReport> {
    centrality_report_from(net, &score_pass(net)?, tau)
}

pub fn centrality_report_from<T: Scalar>(
    net: &MaskedNetwork<T>,
    scores: &PathScores,
    tau: f64,
) -> Result<CentralityReport> {
    check_tau(tau)?;
    let topo = net.topology();
    let all: Vec<f64> = scores.spaces.iter().flat_map(|s| s.centrality()).collect();
    let global_core_size = match tau_core(&all, tau) {
        Ok(core) => core.len(),
        Err(Error::EmptyCore) => 0,
        Err(e) => return Err(e),
    };
    let mut layer_cores = Vec::new();
    let mut ratio_sum = 0.0;
    let hidden = topo.hidden_spaces();
    for &s in &hidden {
        let c = scores.space(s).map(|x| x.centrality()).unwrap_or_default();
        let size = match tau_core(&c, tau) {
            Ok(core) => core.len(),
            Err(Error::EmptyCore) => 0,
            Err(e) => return Err(e),
        };
        let width = topo.width(s);
        ratio_sum += size as f64 / width.max(1) as f64;
        layer_cores.push((space_label(s), size, width));
    }
    Ok(CentralityReport {
        total_pwmp: scores.total,
        global_core_size,
        layer_cores,
        avg_core_ratio: if hidden.is_empty() {
            0.0
        } else {
            ratio_sum / hidden.len() as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    fn ones(id: &str) -> MaskedNetwork<f64> {
        let mut net = MaskedNetwork::from_arch(&ArchSpec::from_id(id).unwrap(), 0).unwrap();
        for l in 0..net.layers().len() {
            net.layer_weight_mut(l).iter_mut().for_each(|w| *w = 1.0);
        }
        net
    }

    #[test]
    fn two_two_one_unit_network() {
        let net = ones("mlp-2-2-1");
        let s = score_pass(&net).unwrap();
        let hidden = s.space(Space::Layer(0)).unwrap();
        assert_eq!(hidden.node_phi(), vec![2.0, 2.0]);
        assert_eq!(hidden.node_psi(), vec![1.0, 1.0]);
        assert_eq!(hidden.centrality(), vec![2.0, 2.0]);
        assert_eq!(s.space(Space::Layer(1)).unwrap().node_phi(), vec![4.0]);
        assert_eq!(s.total, 4.0);
    }

    #[test]
    fn zero_weights_kill_phi_beyond_input() {
        let mut net = ones("mlp-3-4-2");
        for l in 0..2 {
            net.layer_weight_mut(l).iter_mut().for_each(|w| *w = 0.0);
        }
        let s = score_pass(&net).unwrap();
        assert!(s.spaces[1..].iter().all(|x| x.phi.iter().all(|&v| v == 0.0)));
        assert_eq!(s.total, 0.0);
    }

    #[test]
    fn scaling_by_c_scales_total_by_c_to_depth() {
        let net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id("mlp-4-3-3-2").unwrap(), 5).unwrap();
        let mut scaled = net.clone();
        for l in 0..3 {
            scaled.layer_weight_mut(l).iter_mut().for_each(|w| *w *= 2.0);
        }
        let (a, b) = (total_pwmp(&net).unwrap(), total_pwmp(&scaled).unwrap());
        assert!((b / a - 8.0).abs() < 1e-12);
    }

    #[test]
    fn dense_layers_have_no_candidates_and_dead_targets_score_zero() {
        let mut net = ones("mlp-3-3-2");
        let s = score_pass(&net).unwrap();
        assert!(candidate_scores(&net, &s).is_empty());
        // hidden neuron 1 loses its only out-edges → ψ = 0 → missing edges into it score 0
        net.set_prunable(&[true, true]).unwrap();
        net.set_mask(1, vec![true, true, false, false, true, true]).unwrap();
        net.set_mask(0, vec![true, false, true, true, false, true, true, false, true]).unwrap();
        let s = score_pass(&net).unwrap();
        let c = candidate_scores(&net, &s);
        assert!(c.iter().filter(|c| c.layer == 0).all(|c| c.score == 0.0));
    }

    #[test]
    fn tau_core_examples() {
        assert_eq!(tau_core(&[5.0, 3.0, 1.0, 1.0], 0.9).unwrap(), vec![0, 1, 2]);
        assert_eq!(tau_core(&[0.0, 2.0, 0.0, 1.0], 1.0).unwrap(), vec![1, 3]);
        for k in 1..30 {
            let c = vec![1.0; k];
            assert_eq!(tau_core(&c, 0.9).unwrap().len(), (0.9 * k as f64).ceil() as usize);
        }
        assert_eq!(tau_core(&[2.0, 2.0, 2.0], 0.5).unwrap(), vec![0, 1]);
        assert!(matches!(tau_core(&[0.0, 0.0], 0.9), Err(Error::EmptyCore)));
        assert!(matches!(tau_core(&[1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_dense_ratio_is_about_tau() {
        let net = ones("mlp-10-20-20-5");
        let r = avg_tau_core_ratio(&net, 0.9).unwrap();
        assert!((r - 0.9).abs() < 1e-12, "{r}");
    }

    #[test]
    fn one_dominant_node_gives_one_over_width() {
        let mut net = ones("mlp-4-8-2");
        // neuron 0 of the hidden layer carries almost all paths
        let w = net.layer_weight_mut(0);
        for (i, v) in w.iter_mut().enumerate() {
            *v = if i % 8 == 0 { 100.0 } else { 1e-3 };
        }
        let r = avg_tau_core_ratio(&net, 0.9).unwrap();
        assert!((r - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn score_pass_leaves_network_untouched() {
        let net = MaskedNetwork::<f32>::from_arch(&ArchSpec::from_id("resnet-8-w2-i8x8x3").unwrap(), 2).unwrap();
        let before = net.clone();
        let s = score_pass(&net).unwrap();
        assert!(s.total > 0.0);
        for (a, b) in net.layers().iter().zip(before.layers()) {
            assert_eq!(a.weight(), b.weight());
            assert_eq!(a.mask(), b.mask());
        }
        assert!(s.edge_scores.iter().flatten().all(|&v| v >= 0.0));
    }
}
