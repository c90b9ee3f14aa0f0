//! Brute-force references for the path scores.
//!
//! A chain of linear and conv layers is unrolled into explicit node-to-node edges: conv
//! layers become one edge per (output pixel, kernel tap) with the tap's weight shared.
//! Every input→output path over the dense edge set is then enumerated and classified by
//! how many of its edges are missing from the mask: complete paths feed φ, ψ, C and the
//! total; paths missing exactly one edge feed that edge's PWMP and Δtrace scores.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, GraphOp, LayerKind, MaskedNetwork, Space};
use crate::pathscore::{candidate_scores, delta_trace_scores, score_pass};
use crate::tensor::Scalar;

/// One unrolled layer: `edges[k] = (src node, dst node, weight group)`.
#[derive(Clone, Debug)]
pub struct UnrolledLayer {
    pub n_out: usize,
    pub edges: Vec<(usize, usize, usize)>,
    pub weight: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Unrolled {
    pub n_in: usize,
    pub layers: Vec<UnrolledLayer>,
}

/// Unrolls a network whose graph is a plain chain of linear/conv layers and ReLUs.
pub fn unroll<T: Scalar>(net: &MaskedNetwork<T>) -> Result<Unrolled> {
    let shapes = net.step_shapes();
    let mut layers = Vec::new();
    for (step, op) in net.graph().iter().enumerate() {
        let (layer, src) = match *op {
            GraphOp::Input => continue,
            GraphOp::Relu { src } if src + 1 == step => continue,
            GraphOp::Linear { layer, src } | GraphOp::Conv { layer, src } if src + 1 == step => (layer, src),
            other => {
                return Err(Error::Usage(format!(
                    "path enumeration supports plain layer chains only, found {other:?}"
                )))
            }
        };
        let l = net.layer(layer);
        let weight: Vec<f64> = l.weight().data().iter().map(|v| v.as_f64()).collect();
        let mask = l.mask().bits().to_vec();
        let mut edges = Vec::new();
        let n_out = shapes[step].iter().product();
        match l.kind() {
            LayerKind::Linear { inputs, outputs } => {
                for i in 0..inputs {
                    for j in 0..outputs {
                        edges.push((i, j, i * outputs + j));
                    }
                }
            }
            LayerKind::Conv(g) => {
                let (h, w) = (shapes[src][0], shapes[src][1]);
                let (ho, wo) = (shapes[step][0], shapes[step][1]);
                for oi in 0..ho {
                    for oj in 0..wo {
                        for m in 0..g.kh {
                            for n in 0..g.kw {
                                let ii = (oi * g.stride + m) as isize - g.pad as isize;
                                let jj = (oj * g.stride + n) as isize - g.pad as isize;
                                if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                                    continue;
                                }
                                for c in 0..g.c_in {
                                    for k in 0..g.c_out {
                                        let src_node = (ii as usize * w + jj as usize) * g.c_in + c;
                                        let dst_node = (oi * wo + oj) * g.c_out + k;
                                        let group = ((m * g.kw + n) * g.c_in + c) * g.c_out + k;
                                        edges.push((src_node, dst_node, group));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        layers.push(UnrolledLayer {
            n_out,
            edges,
            weight,
            mask,
        });
    }
    Ok(Unrolled {
        n_in: net.input_shape().iter().product(),
        layers,
    })
}

/// Reference values: per node of each node space (input first), and per weight group of
/// each layer.
#[derive(Clone, Debug)]
pub struct Enumerated {
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub centrality: Vec<Vec<f64>>,
    pub total: f64,
    /// Σ over paths missing only this edge of Π|θ| over the path's other edges.
    pub pwmp: Vec<Vec<f64>>,
    /// Same sum of squared products.
    pub delta_trace: Vec<Vec<f64>>,
}

struct Walk<'a> {
    u: &'a Unrolled,
    adj: Vec<Vec<Vec<usize>>>,
    out: Enumerated,
    nodes: Vec<usize>,
}

impl Walk<'_> {
    /// Paths already missing two edges contribute nothing and are not followed.
    fn full(&mut self, depth: usize, node: usize, prod: f64, missing: Option<(usize, usize)>) {
        self.nodes.push(node);
        if depth == self.u.layers.len() {
            match missing {
                None => {
                    self.out.total += prod;
                    for (d, &v) in self.nodes.iter().enumerate() {
                        self.out.centrality[d][v] += prod;
                    }
                }
                Some((l, g)) => {
                    self.out.pwmp[l][g] += prod;
                    self.out.delta_trace[l][g] += prod * prod;
                }
            }
        } else {
            let layer = &self.u.layers[depth];
            for k in 0..self.adj[depth][node].len() {
                let e = self.adj[depth][node][k];
                let (_, dst, g) = layer.edges[e];
                if layer.mask[g] {
                    self.full(depth + 1, dst, prod * layer.weight[g].abs(), missing);
                } else if missing.is_none() {
                    self.full(depth + 1, dst, prod, Some((depth, g)));
                }
            }
        }
        self.nodes.pop();
    }
}

pub fn enumerate_paths(u: &Unrolled) -> Enumerated {
    let widths: Vec<usize> = std::iter::once(u.n_in).chain(u.layers.iter().map(|l| l.n_out)).collect();
    let zeros = || widths.iter().map(|&w| vec![0.0; w]).collect::<Vec<_>>();
    let adj: Vec<Vec<Vec<usize>>> = u
        .layers
        .iter()
        .enumerate()
        .map(|(d, l)| {
            let mut a = vec![Vec::new(); widths[d]];
            for (k, &(s, _, _)) in l.edges.iter().enumerate() {
                a[s].push(k);
            }
            a
        })
        .collect();

    // φ: forward over present edges; ψ: backward. Both by explicit path recursion.
    fn forward(u: &Unrolled, adj: &[Vec<Vec<usize>>], d: usize, v: usize, p: f64, phi: &mut [Vec<f64>]) {
        phi[d][v] += p;
        if d == u.layers.len() {
            return;
        }
        let l = &u.layers[d];
        for &e in &adj[d][v] {
            let (_, dst, g) = l.edges[e];
            if l.mask[g] {
                forward(u, adj, d + 1, dst, p * l.weight[g].abs(), phi);
            }
        }
    }
    fn backward(u: &Unrolled, radj: &[Vec<Vec<usize>>], d: usize, v: usize, p: f64, psi: &mut [Vec<f64>]) {
        psi[d][v] += p;
        if d == 0 {
            return;
        }
        let l = &u.layers[d - 1];
        for &e in &radj[d - 1][v] {
            let (src, _, g) = l.edges[e];
            if l.mask[g] {
                backward(u, radj, d - 1, src, p * l.weight[g].abs(), psi);
            }
        }
    }
    let radj: Vec<Vec<Vec<usize>>> = u
        .layers
        .iter()
        .map(|l| {
            let mut a = vec![Vec::new(); l.n_out];
            for (k, &(_, t, _)) in l.edges.iter().enumerate() {
                a[t].push(k);
            }
            a
        })
        .collect();
    let mut phi = zeros();
    let mut psi = zeros();
    for v in 0..u.n_in {
        forward(u, &adj, 0, v, 1.0, &mut phi);
    }
    let last = u.layers.len();
    for v in 0..widths[last] {
        backward(u, &radj, last, v, 1.0, &mut psi);
    }

    let mut walk = Walk {
        u,
        adj,
        out: Enumerated {
            phi,
            psi,
            centrality: zeros(),
            total: 0.0,
            pwmp: u.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            delta_trace: u.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
        },
        nodes: Vec::new(),
    };
    for v in 0..u.n_in {
        walk.full(0, v, 1.0, None);
    }
    walk.out
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d < 1e-300 {
        0.0
    } else {
        d / b.abs().max(a.abs()).max(f64::MIN_POSITIVE)
    }
}

/// Largest relative disagreement per quantity between the fast pass and enumeration.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PathCheck {
    pub phi: f64,
    pub psi: f64,
    pub pwmp: f64,
    pub total: f64,
    pub centrality: f64,
    pub delta_trace: f64,
}

impl PathCheck {
    pub fn max(&self) -> f64 {
        [self.phi, self.psi, self.pwmp, self.total, self.centrality, self.delta_trace]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Compares [`score_pass`] with enumeration. `perturb` scales every fast-pass value by
/// `1 + perturb` (a negative control for the comparison itself).
pub fn check_paths<T: Scalar>(net: &MaskedNetwork<T>, perturb: f64) -> Result<PathCheck> {
    let u = unroll(net)?;
    let e = enumerate_paths(&u);
    let s = score_pass(net)?;
    let dt = delta_trace_scores(net)?;
    let k = 1.0 + perturb;
    let mut c = PathCheck::default();
    for (d, sp) in s.spaces.iter().enumerate() {
        for (i, (&p, &q)) in sp.phi.iter().zip(&sp.psi).enumerate() {
            c.phi = c.phi.max(rel_err(p * k, e.phi[d][i]));
            c.psi = c.psi.max(rel_err(q * k, e.psi[d][i]));
            c.centrality = c.centrality.max(rel_err(p * q * k, e.centrality[d][i]));
        }
    }
    c.total = rel_err(s.total * k, e.total);
    for cand in candidate_scores(net, &s) {
        c.pwmp = c.pwmp.max(rel_err(cand.score * k, e.pwmp[cand.layer][cand.index]));
        let t = dt.edge_scores[cand.layer][cand.index];
        c.delta_trace = c.delta_trace.max(rel_err(t * k, e.delta_trace[cand.layer][cand.index]));
    }
    Ok(c)
}

/// A random masked MLP chain: 2 to 4 weight layers, widths 1 to 6, every layer prunable
/// with density at least `min_density`, weights uniform on (−1, 1).
pub fn random_chain(rng: &mut impl Rng, min_density: f64) -> Result<MaskedNetwork<f64>> {
    let depth = rng.random_range(2..=4);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
    let id = std::iter::once("mlp".to_string())
        .chain(widths.iter().map(|w| w.to_string()))
        .collect::<Vec<_>>()
        .join("-");
    let mut net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id(&id)?, rng.random())?;
    net.set_prunable(&vec![true; depth])?;
    for l in 0..depth {
        let n = net.layer(l).mask().len();
        for w in net.layer_weight_mut(l).iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let d = rng.random_range(min_density..=1.0);
        let keep = ((d * n as f64).ceil() as usize).clamp(1, n);
        let mut bits = vec![false; n];
        for i in sample(rng, n, keep) {
            bits[i] = true;
        }
        net.set_mask(l, bits)?;
    }
    Ok(net)
}

/// Runs the path oracle on `cases` random chains and returns the worst disagreement.
pub fn path_suite(cases: usize, seed: u64, perturb: f64) -> Result<PathCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = PathCheck::default();
    for _ in 0..cases {
        let net = random_chain(&mut rng, 0.3)?;
        let c = check_paths(&net, perturb)?;
        worst.phi = worst.phi.max(c.phi);
        worst.psi = worst.psi.max(c.psi);
        worst.pwmp = worst.pwmp.max(c.pwmp);
        worst.total = worst.total.max(c.total);
        worst.centrality = worst.centrality.max(c.centrality);
        worst.delta_trace = worst.delta_trace.max(c.delta_trace);
    }
    Ok(worst)
}

/// Maps an unrolled space index back to its scoring space.
pub fn space_of(depth: usize) -> Space {
    if depth == 0 {
        Space::Input
    } else {
        Space::Layer(depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerRole, NetworkBuilder};

    #[test]
    fn unit_two_two_one_enumeration() {
        let mut net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id("mlp-2-2-1").unwrap(), 0).unwrap();
        for l in 0..2 {
            net.layer_weight_mut(l).iter_mut().for_each(|w| *w = 1.0);
        }
        let e = enumerate_paths(&unroll(&net).unwrap());
        assert_eq!(e.total, 4.0);
        assert_eq!(e.phi[1], vec![2.0, 2.0]);
        assert_eq!(e.centrality[1], vec![2.0, 2.0]);
    }

    #[test]
    fn random_chains_agree() {
        let c = path_suite(30, 11, 0.0).unwrap();
        assert!(c.max() < 1e-9, "{c:?}");
    }

    #[test]
    fn perturbation_is_detected() {
        let c = path_suite(5, 11, 1e-6).unwrap();
        assert!(c.max() > 1e-9);
    }

    #[test]
    fn two_conv_chain_agrees() {
        let (mut b, x) = NetworkBuilder::<f64>::new(&[4, 4, 2], 9);
        let c = b.conv(x, 3, 3, 1, 1, "c1", LayerRole::Hidden).unwrap();
        let r = b.relu(c).unwrap();
        b.conv(r, 2, 3, 2, 1, "c2", LayerRole::Hidden).unwrap();
        let mut net = b.finish();
        let n = net.layer(0).mask().len();
        net.set_mask(0, (0..n).map(|i| i % 4 != 1).collect()).unwrap();
        let n = net.layer(1).mask().len();
        net.set_mask(1, (0..n).map(|i| i % 3 != 0).collect()).unwrap();
        let c = check_paths(&net, 0.0).unwrap();
        assert!(c.max() < 1e-9, "{c:?}");
    }
}
