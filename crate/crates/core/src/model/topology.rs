//! Which node space feeds each weight layer, and the node-level questions built on it.
//!
//! Nodes are neurons for linear layers and channels for conv layers. A *space* is the
//! set of nodes produced by one weight layer, the network input, or a residual junction.
//! Activations, pooling and batch norm keep nodes in place; flattening a feature map
//! sends feature `f` back to channel `f mod C`.

use super::{GraphOp, MaskedNetwork};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Space {
    Input,
    Layer(usize),
    Junction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMap {
    Identity,
    /// Feature index `f` belongs to node `f % c`.
    Modulo(usize),
}

impl FeatureMap {
    pub fn node(self, f: usize) -> usize {
        match self {
            FeatureMap::Identity => f,
            FeatureMap::Modulo(c) => f % c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    /// Space (and feature mapping) read by each weight layer.
    pub layer_src: Vec<(Space, FeatureMap)>,
    /// The two spaces summed by each residual junction.
    pub junction_src: Vec<[Space; 2]>,
    pub output: Space,
    input_width: usize,
    layer_width: Vec<usize>,
    junction_width: Vec<usize>,
}

impl Topology {
    pub fn of<T: Scalar>(net: &MaskedNetwork<T>) -> Self {
        let shapes = net.step_shapes();
        let mut origin: Vec<(Space, FeatureMap)> = Vec::with_capacity(net.graph().len());
        let mut layer_src = vec![(Space::Input, FeatureMap::Identity); net.layers().len()];
        let mut junction_src = Vec::new();
        let mut junction_width = Vec::new();
        for (step, op) in net.graph().iter().enumerate() {
            let o = match *op {
                GraphOp::Input => (Space::Input, FeatureMap::Identity),
                GraphOp::Linear { layer, src } | GraphOp::Conv { layer, src } => {
                    layer_src[layer] = origin[src];
                    (Space::Layer(layer), FeatureMap::Identity)
                }
                GraphOp::BatchNorm { src, .. }
                | GraphOp::Relu { src }
                | GraphOp::Pool { src, .. }
                | GraphOp::GlobalAvgPool { src } => origin[src],
                GraphOp::Flatten { src } => {
                    let c = *shapes[src].last().unwrap_or(&1);
                    match origin[src] {
                        (s, FeatureMap::Identity) if shapes[src].len() > 1 => (s, FeatureMap::Modulo(c)),
                        other => other,
                    }
                }
                GraphOp::Add { a, b } => {
                    junction_src.push([origin[a].0, origin[b].0]);
                    junction_width.push(*shapes[step].last().unwrap_or(&0));
                    (Space::Junction(junction_src.len() - 1), FeatureMap::Identity)
                }
            };
            origin.push(o);
        }
        Topology {
            layer_src,
            junction_src,
            output: origin.last().map(|o| o.0).unwrap_or(Space::Input),
            input_width: *net.input_shape().last().unwrap_or(&0),
            layer_width: net.layers().iter().map(|l| l.kind().out_width()).collect(),
            junction_width,
        }
    }

    pub fn width(&self, s: Space) -> usize {
        match s {
            Space::Input => self.input_width,
            Space::Layer(l) => self.layer_width[l],
            Space::Junction(j) => self.junction_width[j],
        }
    }

    /// Scoring node spaces: the input followed by every weight layer's output.
    pub fn node_spaces(&self) -> Vec<Space> {
        std::iter::once(Space::Input)
            .chain((0..self.layer_width.len()).map(Space::Layer))
            .collect()
    }

    /// Weight-layer spaces other than the network output.
    pub fn hidden_spaces(&self) -> Vec<Space> {
        (0..self.layer_width.len())
            .map(Space::Layer)
            .filter(|&s| s != self.output)
            .collect()
    }

    pub fn isolated_node_fraction<T: Scalar>(&self, net: &MaskedNetwork<T>) -> f64 {
        let n_layers = net.layers().len();
        let mut has_in: Vec<Vec<bool>> = self.layer_width.iter().map(|&w| vec![false; w]).collect();
        let mut has_out = has_in.clone();
        for (l, layer) in net.layers().iter().enumerate() {
            let kind = layer.kind();
            let (src, map) = self.layer_src[l];
            for (idx, &on) in layer.mask().bits().iter().enumerate() {
                if !on {
                    continue;
                }
                let (i, j) = kind.endpoints(idx);
                has_in[l][j] = true;
                if let Space::Layer(s) = src {
                    has_out[s][map.node(i)] = true;
                }
            }
        }
        // residual junctions are fixed unit edges out of every node they sum
        for srcs in &self.junction_src {
            for s in srcs {
                if let Space::Layer(l) = *s {
                    has_out[l].iter_mut().for_each(|o| *o = true);
                }
            }
        }
        let mut total = 0usize;
        let mut isolated = 0usize;
        for l in 0..n_layers {
            if Space::Layer(l) == self.output {
                continue;
            }
            for (i, o) in has_in[l].iter().zip(&has_out[l]) {
                total += 1;
                if !(*i && *o) {
                    isolated += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            isolated as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, LayerRole, NetworkBuilder};

    #[test]
    fn resnet_shortcut_spaces() {
        let arch = ArchSpec::from_id("resnet-14-w4").unwrap();
        let net = MaskedNetwork::<f32>::from_arch(&arch, 0).unwrap();
        let t = net.topology();
        assert_eq!(t.layer_src[0].0, Space::Input);
        assert_eq!(t.output, Space::Layer(net.layers().len() - 1));
        // first block of stage one: identity shortcut from conv1's space
        assert_eq!(t.junction_src[0], [Space::Layer(2), Space::Layer(0)]);
        // the second block reads the first junction
        assert_eq!(t.layer_src[3].0, Space::Junction(0));
        assert_eq!(t.width(Space::Junction(0)), 4);
        assert_eq!(net.isolated_node_fraction(), 0.0);
    }

    #[test]
    fn flatten_maps_features_to_channels() {
        let (mut b, x) = NetworkBuilder::<f64>::new(&[2, 2, 3], 0);
        let c = b.conv(x, 2, 1, 1, 0, "c", LayerRole::Hidden).unwrap();
        let f = b.flatten(c).unwrap();
        b.linear(f, 4, "fc", LayerRole::Output).unwrap();
        let net = b.finish();
        let t = net.topology();
        assert_eq!(t.layer_src[1], (Space::Layer(0), FeatureMap::Modulo(2)));
        assert_eq!(FeatureMap::Modulo(2).node(5), 1);
    }
}
