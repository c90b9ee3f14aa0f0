//! Masked networks: weight layers carrying binary masks, the layer graph wiring them
//! together, density bookkeeping over the prunable scope, and tape binding for the
//! training, evaluation and path-scoring passes.

mod arch;
mod snapshot;
mod topology;

use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use arch::ArchSpec;
pub use snapshot::{
    decode_snapshot, encode_snapshot, inspect_snapshot, read_snapshot, write_snapshot, EntryInfo,
    EntryKind, SnapshotInfo, SNAPSHOT_MAGIC, SNAPSHOT_VERSION,
};
pub use topology::{FeatureMap, Space, Topology};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvGeom, PoolKind, Scalar, SparsePattern, Tensor};

/// Binary mask over one weight tensor, viewed as `[rows, cols]` where `cols` is the
/// number of output units (neurons or channels).
#[derive(Clone, Debug)]
pub struct LayerMask {
    bits: Vec<bool>,
    nnz: usize,
    rows: usize,
    cols: usize,
    pattern: OnceLock<Arc<SparsePattern>>,
}

impl PartialEq for LayerMask {
    fn eq(&self, other: &Self) -> bool {
        self.bits == other.bits && self.cols == other.cols
    }
}

impl LayerMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_bits(vec![true; rows * cols], rows, cols).unwrap()
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self::from_bits(vec![false; rows * cols], rows, cols).unwrap()
    }

    pub fn from_bits(bits: Vec<bool>, rows: usize, cols: usize) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} mask bits for a {rows}x{cols} weight",
                bits.len()
            )));
        }
        let nnz = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            bits,
            nnz,
            rows,
            cols,
            pattern: OnceLock::new(),
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.nnz == self.bits.len()
    }

    /// Count of set bits computed from scratch (the cached count must agree).
    pub fn recount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pattern(&self) -> Arc<SparsePattern> {
        self.pattern
            .get_or_init(|| Arc::new(SparsePattern::from_mask(&self.bits, self.rows, self.cols)))
            .clone()
    }

    /// Returns whether the bit changed.
    fn set(&mut self, idx: usize, on: bool) -> bool {
        if self.bits[idx] == on {
            return false;
        }
        self.bits[idx] = on;
        if on {
            self.nnz += 1;
        } else {
            self.nnz -= 1;
        }
        self.pattern = OnceLock::new();
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight laid out `[inputs, outputs]`.
    Linear { inputs: usize, outputs: usize },
    /// Weight laid out `[kh, kw, c_in, c_out]`.
    Conv(ConvGeom),
}

impl LayerKind {
    pub fn in_width(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Conv(g) => g.c_in,
        }
    }

    pub fn out_width(&self) -> usize {
        match *self {
            LayerKind::Linear { outputs, .. } => outputs,
            LayerKind::Conv(g) => g.c_out,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Linear { inputs, outputs } => vec![inputs, outputs],
            LayerKind::Conv(g) => g.weight_shape(),
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.weight_len() / self.out_width()
    }

    /// Source and target unit of the edge stored at flat weight index `idx`.
    pub fn endpoints(&self, idx: usize) -> (usize, usize) {
        match *self {
            LayerKind::Linear { outputs, .. } => (idx / outputs, idx % outputs),
            LayerKind::Conv(g) => g.channels_of(idx),
        }
    }

    fn mask_dims(&self) -> (usize, usize) {
        (self.fan_in(), self.out_width())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Hidden,
    Output,
    Shortcut,
}

#[derive(Clone, Debug)]
pub struct WeightLayer<T> {
    pub(crate) name: String,
    pub(crate) kind: LayerKind,
    pub(crate) role: LayerRole,
    pub(crate) weight: Tensor<T>,
    pub(crate) bias: Option<Tensor<T>>,
    pub(crate) mask: LayerMask,
    pub(crate) prunable: bool,
}

impl<T: Scalar> WeightLayer<T> {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn kind(&self) -> LayerKind {
        self.kind
    }
    pub fn role(&self) -> LayerRole {
        self.role
    }
    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }
    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }
    pub fn mask(&self) -> &LayerMask {
        &self.mask
    }
    pub fn prunable(&self) -> bool {
        self.prunable
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer<T> {
    pub(crate) name: String,
    pub(crate) gamma: Tensor<T>,
    pub(crate) beta: Tensor<T>,
    pub(crate) running_mean: Vec<T>,
    pub(crate) running_var: Vec<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    fn new(name: String, c: usize) -> Self {
        Self {
            name,
            gamma: Tensor::full(vec![c], T::one()),
            beta: Tensor::zeros(vec![c]),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn gamma(&self) -> &Tensor<T> {
        &self.gamma
    }
    pub fn beta(&self) -> &Tensor<T> {
        &self.beta
    }
    pub fn running_mean(&self) -> &[T] {
        &self.running_mean
    }
    pub fn running_var(&self) -> &[T] {
        &self.running_var
    }
}

/// One step of the forward program; `src`, `a`, `b` index earlier steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphOp {
    Input,
    Linear { layer: usize, src: usize },
    Conv { layer: usize, src: usize },
    BatchNorm { bn: usize, src: usize },
    Relu { src: usize },
    Pool { kind: PoolKind, k: usize, src: usize },
    GlobalAvgPool { src: usize },
    Flatten { src: usize },
    Add { a: usize, b: usize },
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct MaskedNetwork<T> {
    arch: Option<ArchSpec>,
    input_shape: Vec<usize>,
    pub(crate) layers: Vec<WeightLayer<T>>,
    pub(crate) bns: Vec<BatchNormLayer<T>>,
    graph: Vec<GraphOp>,
    shapes: Vec<Vec<usize>>,
}

/// Incrementally assembles a [`MaskedNetwork`]; every layer starts dense with
/// Kaiming-normal weights and zero biases.
pub struct NetworkBuilder<T> {
    net: MaskedNetwork<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> NetworkBuilder<T> {
    /// Returns the builder and the id of the input step.
    pub fn new(input_shape: &[usize], seed: u64) -> (Self, usize) {
        let net = MaskedNetwork {
            arch: None,
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            bns: Vec::new(),
            graph: vec![GraphOp::Input],
            shapes: vec![input_shape.to_vec()],
        };
        let rng = ChaCha8Rng::seed_from_u64(seed);
        (Self { net, rng }, 0)
    }

    fn shape(&self, node: usize) -> Result<&[usize]> {
        self.net
            .shapes
            .get(node)
            .map(|s| s.as_slice())
            .ok_or_else(|| Error::Usage(format!("graph step {node} does not exist yet")))
    }

    fn push(&mut self, op: GraphOp, shape: Vec<usize>) -> usize {
        self.net.graph.push(op);
        self.net.shapes.push(shape);
        self.net.graph.len() - 1
    }

    fn kaiming(&mut self, kind: LayerKind) -> Tensor<T> {
        let std = (2.0 / kind.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data = (0..kind.weight_len())
            .map(|_| T::of(normal.sample(&mut self.rng)))
            .collect();
        Tensor::new(kind.weight_shape(), data).unwrap()
    }

    fn add_layer(&mut self, name: &str, kind: LayerKind, role: LayerRole, bias: bool) -> usize {
        let weight = self.kaiming(kind);
        let (rows, cols) = kind.mask_dims();
        self.net.layers.push(WeightLayer {
            name: name.to_string(),
            kind,
            role,
            weight,
            bias: bias.then(|| Tensor::zeros(vec![kind.out_width()])),
            mask: LayerMask::full(rows, cols),
            prunable: true,
        });
        self.net.layers.len() - 1
    }

    pub fn linear(&mut self, src: usize, outputs: usize, name: &str, role: LayerRole) -> Result<usize> {
        let [inputs] = *self.shape(src)? else {
            return Err(Error::Shape(format!(
                "linear layer `{name}` needs a flat input, got {:?}",
                self.shape(src)?
            )));
        };
        let layer = self.add_layer(name, LayerKind::Linear { inputs, outputs }, role, true);
        Ok(self.push(GraphOp::Linear { layer, src }, vec![outputs]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        src: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        name: &str,
        role: LayerRole,
    ) -> Result<usize> {
        let [h, w, c_in] = *self.shape(src)? else {
            return Err(Error::Shape(format!(
                "conv layer `{name}` needs an HxWxC input, got {:?}",
                self.shape(src)?
            )));
        };
        let geom = ConvGeom {
            kh: k,
            kw: k,
            c_in,
            c_out,
            stride,
            pad,
        };
        let (ho, wo) = geom.output_hw(h, w)?;
        let layer = self.add_layer(name, LayerKind::Conv(geom), role, false);
        Ok(self.push(GraphOp::Conv { layer, src }, vec![ho, wo, c_out]))
    }

    pub fn batch_norm(&mut self, src: usize, name: &str) -> Result<usize> {
        let shape = self.shape(src)?.to_vec();
        let c = *shape.last().unwrap_or(&0);
        self.net.bns.push(BatchNormLayer::new(name.to_string(), c));
        let bn = self.net.bns.len() - 1;
        Ok(self.push(GraphOp::BatchNorm { bn, src }, shape))
    }

    pub fn relu(&mut self, src: usize) -> Result<usize> {
        let shape = self.shape(src)?.to_vec();
        Ok(self.push(GraphOp::Relu { src }, shape))
    }

    pub fn pool(&mut self, src: usize, kind: PoolKind, k: usize) -> Result<usize> {
        let [h, w, c] = *self.shape(src)? else {
            return Err(Error::Shape("pooling needs an HxWxC input".into()));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by pool size {k}")));
        }
        Ok(self.push(GraphOp::Pool { kind, k, src }, vec![h / k, w / k, c]))
    }

    pub fn global_avg_pool(&mut self, src: usize) -> Result<usize> {
        let [_, _, c] = *self.shape(src)? else {
            return Err(Error::Shape("global pooling needs an HxWxC input".into()));
        };
        Ok(self.push(GraphOp::GlobalAvgPool { src }, vec![c]))
    }

    pub fn flatten(&mut self, src: usize) -> Result<usize> {
        let n = self.shape(src)?.iter().product();
        Ok(self.push(GraphOp::Flatten { src }, vec![n]))
    }

    pub fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?);
        if sa != sb {
            return Err(Error::Shape(format!("residual add of {sa:?} and {sb:?}")));
        }
        Ok(self.push(GraphOp::Add { a, b }, sa))
    }

    /// The most recently added step becomes the network output.
    pub fn finish(self) -> MaskedNetwork<T> {
        self.net
    }
}

/// How a forward pass is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; parameters receive gradients.
    Train,
    /// Running statistics; parameters are constants.
    Eval,
    /// Path-scoring network: weights replaced by |θ| (or θ² when `square`), activations
    /// and biases dropped, pooling summed, batch norm reduced to a |γ| (or γ²) scale.
    Score { square: bool },
}

/// Variables recorded by [`MaskedNetwork::bind`].
pub struct Bound {
    pub input: Var,
    pub output: Var,
    pub weights: Vec<Var>,
    /// Masked-weight node per layer when recorded densely; its gradient is the dense
    /// gradient including missing edges.
    pub effective: Vec<Option<Var>>,
    pub biases: Vec<Option<Var>>,
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
    pub bn_outputs: Vec<Var>,
    /// Raw (pre-bias) output of each weight layer.
    pub layer_outputs: Vec<Var>,
    /// Output of each residual junction, in graph order.
    pub junctions: Vec<Var>,
}

impl Bound {
    /// Parameter variables in the same order as [`MaskedNetwork::params_mut`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.extend(b.iter().copied());
        }
        for (g, b) in self.gammas.iter().zip(&self.betas) {
            out.push(*g);
            out.push(*b);
        }
        out
    }
}

/// Mutable view of one parameter tensor for an optimizer step.
pub struct ParamSlot<'a, T> {
    pub data: &'a mut [T],
    pub mask: Option<&'a [bool]>,
}

impl<T: Scalar> MaskedNetwork<T> {
    /// Builds a dense, Kaiming-initialized network for `arch` with the default prunable
    /// scope applied.
    pub fn from_arch(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let mut net = match arch {
            ArchSpec::Mlp { widths } => {
                let (mut b, mut x) = NetworkBuilder::new(&[widths[0]], seed);
                let last = widths.len() - 1;
                for (l, &w) in widths[1..].iter().enumerate() {
                    let role = if l + 1 == last {
                        LayerRole::Output
                    } else {
                        LayerRole::Hidden
                    };
                    x = b.linear(x, w, &format!("fc{}", l + 1), role)?;
                    if role == LayerRole::Hidden {
                        x = b.relu(x)?;
                    }
                }
                b.finish()
            }
            ArchSpec::ResNet {
                depth,
                width,
                classes,
                input,
            } => build_resnet(*depth, *width, *classes, input, seed)?,
        };
        net.arch = Some(arch.clone());
        let scope = net.default_scope();
        net.set_prunable(&scope)?;
        Ok(net)
    }

    /// Final linear layer and shortcut projections stay dense; everything else is prunable.
    fn default_scope(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.role == LayerRole::Hidden).collect()
    }

    /// Replaces the prunable flags. Layers leaving the prunable scope get a full mask.
    pub fn set_prunable(&mut self, flags: &[bool]) -> Result<()> {
        if flags.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "prunable override has {} entries but the network has {} weight layers",
                flags.len(),
                self.layers.len()
            )));
        }
        for (layer, &p) in self.layers.iter_mut().zip(flags) {
            layer.prunable = p;
            if !p && !layer.mask.is_full() {
                let (r, c) = layer.kind.mask_dims();
                layer.mask = LayerMask::full(r, c);
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_width(&self) -> usize {
        self.shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[WeightLayer<T>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &WeightLayer<T> {
        &self.layers[l]
    }

    pub fn batch_norms(&self) -> &[BatchNormLayer<T>] {
        &self.bns
    }

    pub fn graph(&self) -> &[GraphOp] {
        &self.graph
    }

    /// Per-example shape produced by each graph step.
    pub fn step_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn prunable_flags(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.prunable).collect()
    }

    pub fn prunable_params(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.mask.len()).sum()
    }

    pub fn prunable_nnz(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.mask.nnz()).sum()
    }

    /// Missing (growable) edges across prunable layers.
    pub fn missing_edges(&self) -> usize {
        self.prunable_params() - self.prunable_nnz()
    }

    /// ‖m‖₀ / n over prunable parameters.
    pub fn density(&self) -> f64 {
        let n = self.prunable_params();
        if n == 0 {
            0.0
        } else {
            self.prunable_nnz() as f64 / n as f64
        }
    }

    pub fn total_nnz(&self) -> usize {
        self.layers.iter().map(|l| l.mask.nnz()).sum()
    }

    /// Replaces a layer mask and zeroes every weight it switches off.
    pub fn set_mask(&mut self, l: usize, bits: Vec<bool>) -> Result<()> {
        let layer = self
            .layers
            .get_mut(l)
            .ok_or_else(|| Error::Usage(format!("no weight layer {l}")))?;
        let (r, c) = layer.kind.mask_dims();
        let mask = LayerMask::from_bits(bits, r, c)?;
        if !layer.prunable && !mask.is_full() {
            return Err(Error::Usage(format!(
                "layer `{}` is outside the prunable scope and must stay dense",
                layer.name
            )));
        }
        for (w, &on) in layer.weight.data_mut().iter_mut().zip(mask.bits()) {
            if !on {
                *w = T::zero();
            }
        }
        layer.mask = mask;
        Ok(())
    }

    /// Switches an edge on with weight exactly zero. Returns false if it was present.
    pub fn grow_edge(&mut self, l: usize, idx: usize) -> Result<bool> {
        let layer = &mut self.layers[l];
        if !layer.prunable {
            return Err(Error::Usage(format!(
                "cannot add edges to non-prunable layer `{}`",
                layer.name
            )));
        }
        if layer.mask.set(idx, true) {
            layer.weight.data_mut()[idx] = T::zero();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Switches an edge off and zeroes its weight. Returns false if it was absent.
    pub fn prune_edge(&mut self, l: usize, idx: usize) -> Result<bool> {
        let layer = &mut self.layers[l];
        if !layer.prunable {
            return Err(Error::Usage(format!(
                "cannot prune non-prunable layer `{}`",
                layer.name
            )));
        }
        layer.weight.data_mut()[idx] = T::zero();
        Ok(layer.mask.set(idx, false))
    }

    /// Bitwise `self ⊇ other` over every layer mask.
    pub fn is_superset_of(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.mask.len() == b.mask.len()
                    && a.mask.bits().iter().zip(b.mask.bits()).all(|(&x, &y)| x || !y)
            })
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        other.is_superset_of(self)
    }

    pub fn cast<U: Scalar>(&self) -> MaskedNetwork<U> {
        let conv = |t: &Tensor<T>| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| U::of(v.as_f64())).collect()).unwrap();
        MaskedNetwork {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| WeightLayer {
                    name: l.name.clone(),
                    kind: l.kind,
                    role: l.role,
                    weight: conv(&l.weight),
                    bias: l.bias.as_ref().map(conv),
                    mask: l.mask.clone(),
                    prunable: l.prunable,
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BatchNormLayer {
                    name: b.name.clone(),
                    gamma: conv(&b.gamma),
                    beta: conv(&b.beta),
                    running_mean: b.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    running_var: b.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            graph: self.graph.clone(),
            shapes: self.shapes.clone(),
        }
    }

    /// Fails with a divergence error if any parameter is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let bad = self.layers.iter().find(|l| {
            !l.weight.is_finite() || l.bias.as_ref().is_some_and(|b| !b.is_finite())
        });
        if let Some(l) = bad {
            return Err(Error::Divergence(format!("non-finite parameters in `{}`", l.name)));
        }
        if let Some(b) = self.bns.iter().find(|b| !b.gamma.is_finite() || !b.beta.is_finite()) {
            return Err(Error::Divergence(format!("non-finite parameters in `{}`", b.name)));
        }
        Ok(())
    }

    /// Every trainable tensor in a fixed order: each layer's weight then bias, then each
    /// batch norm's γ and β. Weights carry their mask.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            out.push(ParamSlot {
                data: layer.weight.data_mut(),
                mask: Some(layer.mask.bits()),
            });
            if let Some(b) = layer.bias.as_mut() {
                out.push(ParamSlot {
                    data: b.data_mut(),
                    mask: None,
                });
            }
        }
        for bn in self.bns.iter_mut() {
            out.push(ParamSlot {
                data: bn.gamma.data_mut(),
                mask: None,
            });
            out.push(ParamSlot {
                data: bn.beta.data_mut(),
                mask: None,
            });
        }
        out
    }

    pub fn layer_weight_mut(&mut self, l: usize) -> &mut [T] {
        self.layers[l].weight.data_mut()
    }

    /// Exponential moving update of batch-norm running statistics from a training pass.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, bound: &Bound, momentum: f64) {
        let m = T::of(momentum);
        for (bn, &v) in self.bns.iter_mut().zip(&bound.bn_outputs) {
            let Some((mean, var)) = tape.batch_stats(v) else {
                continue;
            };
            let c = mean.len();
            let n = tape.value(v).numel() / c.max(1);
            let unbias = if n > 1 {
                T::of(n as f64 / (n - 1) as f64)
            } else {
                T::one()
            };
            for i in 0..c {
                bn.running_mean[i] = (T::one() - m) * bn.running_mean[i] + m * mean[i];
                bn.running_var[i] = (T::one() - m) * bn.running_var[i] + m * var[i] * unbias;
            }
        }
    }

    /// Records the forward program on `tape` with `x: [B, input_shape..]`.
    ///
    /// With `dense_grad` every weight passes through an explicit mask node so the dense
    /// gradient (including missing edges) is available; otherwise linear layers use the
    /// sparse kernel.
    pub fn bind(&self, tape: &mut Tape<T>, x: Var, mode: Mode, dense_grad: bool) -> Result<Bound> {
        let xs = tape.value(x).shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects [B, {:?}], got {:?}",
                self.input_shape, xs
            )));
        }
        let batch = xs[0];
        let trainable = mode != Mode::Eval;
        let leaf = |tape: &mut Tape<T>, t: Tensor<T>| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let score_map = |v: T, square: bool| if square { v * v } else { v.abs() };

        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = match mode {
                Mode::Score { square } => layer.weight.map(|v| score_map(v, square)),
                _ => layer.weight.clone(),
            };
            weights.push(leaf(tape, w));
            biases.push(match (mode, &layer.bias) {
                (Mode::Score { .. }, _) | (_, None) => None,
                (_, Some(b)) => Some(leaf(tape, b.clone())),
            });
        }
        let mut gammas = Vec::with_capacity(self.bns.len());
        let mut betas = Vec::with_capacity(self.bns.len());
        for bn in &self.bns {
            gammas.push(leaf(tape, bn.gamma.clone()));
            betas.push(leaf(tape, bn.beta.clone()));
        }

        let mut effective = vec![None; self.layers.len()];
        let mut layer_outputs = vec![x; self.layers.len()];
        let mut bn_outputs = vec![x; self.bns.len()];
        let mut junctions = Vec::new();
        let mut vals: Vec<Var> = Vec::with_capacity(self.graph.len());
        let scoring = matches!(mode, Mode::Score { .. });

        for op in &self.graph {
            let v = match *op {
                GraphOp::Input => x,
                GraphOp::Linear { layer, src } => {
                    let l = &self.layers[layer];
                    let y = if dense_grad || scoring {
                        let e = tape.mask(weights[layer], l.mask.bits())?;
                        effective[layer] = Some(e);
                        tape.matmul(vals[src], e)?
                    } else {
                        tape.matmul_sparse(vals[src], weights[layer], l.mask.pattern())?
                    };
                    layer_outputs[layer] = y;
                    match biases[layer] {
                        Some(b) => tape.add_bias(y, b)?,
                        None => y,
                    }
                }
                GraphOp::Conv { layer, src } => {
                    let LayerKind::Conv(g) = self.layers[layer].kind else {
                        unreachable!("conv step bound to a linear layer")
                    };
                    let e = tape.mask(weights[layer], self.layers[layer].mask.bits())?;
                    effective[layer] = Some(e);
                    let y = tape.conv2d(vals[src], e, g.stride, g.pad)?;
                    layer_outputs[layer] = y;
                    match biases[layer] {
                        Some(b) => tape.add_bias(y, b)?,
                        None => y,
                    }
                }
                GraphOp::BatchNorm { bn, src } => {
                    let y = match mode {
                        Mode::Score { square } => {
                            let s = self.bns[bn].gamma.data().iter().map(|&g| score_map(g, square)).collect();
                            tape.channel_scale(vals[src], s)?
                        }
                        Mode::Train => tape.batch_norm(vals[src], gammas[bn], betas[bn], None, T::of(BN_EPS))?,
                        Mode::Eval => {
                            let b = &self.bns[bn];
                            tape.batch_norm(
                                vals[src],
                                gammas[bn],
                                betas[bn],
                                Some((&b.running_mean, &b.running_var)),
                                T::of(BN_EPS),
                            )?
                        }
                    };
                    bn_outputs[bn] = y;
                    y
                }
                GraphOp::Relu { src } => {
                    if scoring {
                        vals[src]
                    } else {
                        tape.relu(vals[src])
                    }
                }
                GraphOp::Pool { kind, k, src } => {
                    let kind = if scoring { PoolKind::Sum } else { kind };
                    tape.pool(vals[src], kind, k)?
                }
                GraphOp::GlobalAvgPool { src } => tape.global_pool(vals[src], !scoring)?,
                GraphOp::Flatten { src } => {
                    let n = tape.value(vals[src]).numel() / batch.max(1);
                    tape.reshape(vals[src], vec![batch, n])?
                }
                GraphOp::Add { a, b } => {
                    let y = tape.add(vals[a], vals[b])?;
                    junctions.push(y);
                    y
                }
            };
            vals.push(v);
        }
        Ok(Bound {
            input: x,
            output: *vals.last().unwrap(),
            weights,
            effective,
            biases,
            gammas,
            betas,
            bn_outputs,
            layer_outputs,
            junctions,
        })
    }

    pub fn topology(&self) -> Topology {
        Topology::of(self)
    }

    /// Fraction of hidden nodes lacking an unmasked in-edge or any outgoing connection.
    pub fn isolated_node_fraction(&self) -> f64 {
        self.topology().isolated_node_fraction(self)
    }
}

fn build_resnet<T: Scalar>(
    depth: usize,
    width: usize,
    classes: usize,
    input: &[usize; 3],
    seed: u64,
) -> Result<MaskedNetwork<T>> {
    let n = (depth - 2) / 6;
    let (mut b, x) = NetworkBuilder::new(input, seed);
    let mut x = b.conv(x, width, 3, 1, 1, "conv1", LayerRole::Hidden)?;
    x = b.batch_norm(x, "bn1")?;
    x = b.relu(x)?;
    let mut c_in = width;
    for stage in 0..3 {
        let c = width << stage;
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let tag = format!("s{}.b{}", stage + 1, block + 1);
            let mut y = b.conv(x, c, 3, stride, 1, &format!("{tag}.conv1"), LayerRole::Hidden)?;
            y = b.batch_norm(y, &format!("{tag}.bn1"))?;
            y = b.relu(y)?;
            y = b.conv(y, c, 3, 1, 1, &format!("{tag}.conv2"), LayerRole::Hidden)?;
            y = b.batch_norm(y, &format!("{tag}.bn2"))?;
            let short = if stride != 1 || c != c_in {
                let s = b.conv(x, c, 1, stride, 0, &format!("{tag}.shortcut"), LayerRole::Shortcut)?;
                b.batch_norm(s, &format!("{tag}.shortcut_bn"))?
            } else {
                x
            };
            x = b.add(y, short)?;
            x = b.relu(x)?;
            c_in = c;
        }
    }
    x = b.global_avg_pool(x)?;
    b.linear(x, classes, "fc", LayerRole::Output)?;
    Ok(b.finish())
}

/// Default prunable flags for an architecture: the final linear layer and shortcut
/// projections are excluded.
pub fn prunable_scope(arch: &ArchSpec) -> Result<Vec<bool>> {
    Ok(MaskedNetwork::<f32>::from_arch(arch, 0)?.prunable_flags())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(id: &str) -> MaskedNetwork<f64> {
        MaskedNetwork::from_arch(&ArchSpec::from_id(id).unwrap(), 7).unwrap()
    }

    #[test]
    fn dense_and_empty_density() {
        let mut net = mlp("mlp-6-5-4-3");
        assert_eq!(net.density(), 1.0);
        for l in 0..2 {
            let n = net.layer(l).mask().len();
            net.set_mask(l, vec![false; n]).unwrap();
        }
        assert_eq!(net.density(), 0.0);
        assert!(net.layer(2).mask().is_full());
    }

    #[test]
    fn resnet32_parameter_count_and_scope() {
        let arch = ArchSpec::from_id("resnet-32").unwrap();
        let net = MaskedNetwork::<f32>::from_arch(&arch, 0).unwrap();
        let total: usize = net.layers().iter().map(|l| l.mask().len()).sum();
        assert!((450_000..480_000).contains(&total), "{total}");
        let scope = prunable_scope(&arch).unwrap();
        for (l, p) in net.layers().iter().zip(&scope) {
            let dense = l.name().contains("shortcut") || l.name() == "fc";
            assert_eq!(*p, !dense, "{}", l.name());
        }
        assert_eq!(scope.iter().filter(|p| !**p).count(), 3);
    }

    #[test]
    fn mlp_scope_keeps_last_layer_dense() {
        let scope = prunable_scope(&ArchSpec::from_id("mlp-784-128-128-10").unwrap()).unwrap();
        assert_eq!(scope, vec![true, true, false]);
    }

    #[test]
    fn override_flags_follow_config() {
        let mut net = mlp("mlp-4-3-2");
        net.set_prunable(&[false, true]).unwrap();
        assert_eq!(net.prunable_flags(), vec![false, true]);
        assert!(matches!(net.set_prunable(&[true]), Err(Error::Config(_))));
    }

    #[test]
    fn grow_adds_exactly_one_over_n() {
        let mut net = mlp("mlp-4-3-2");
        let n = net.prunable_params();
        net.set_mask(0, vec![false; 12]).unwrap();
        let before = net.clone();
        assert!(net.grow_edge(0, 5).unwrap());
        assert!(!net.grow_edge(0, 5).unwrap());
        assert_eq!(net.layer(0).weight().data()[5], 0.0);
        assert!((net.density() - before.density() - 1.0 / n as f64).abs() < 1e-15);
        assert!(net.is_superset_of(&before));
        assert!(before.is_subset_of(&net));
        assert!(net.grow_edge(1, 0).is_err());
    }

    #[test]
    fn eval_logits_match_sparse_and_dense_binding() {
        let mut net = mlp("mlp-5-4-3");
        net.set_mask(0, (0..20).map(|i| i % 3 != 0).collect()).unwrap();
        let x: Vec<f64> = (0..10).map(|i| i as f64 / 10.0 - 0.3).collect();
        let run = |dense: bool| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::from_f64(vec![2, 5], &x).unwrap());
            let b = net.bind(&mut tape, xv, Mode::Eval, dense).unwrap();
            tape.value(b.output).data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn resnet_forward_and_backward_shapes() {
        let arch = ArchSpec::from_id("resnet-8-w4-c3-i8x8x3").unwrap();
        let mut net = MaskedNetwork::<f64>::from_arch(&arch, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 8, 8, 3], 0.5));
        let b = net.bind(&mut tape, x, Mode::Train, false).unwrap();
        assert_eq!(tape.value(b.output).shape(), &[2, 3]);
        let loss = tape.softmax_cross_entropy(b.output, &[0, 2]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(b.param_vars().len(), net.params_mut().len());
        for (v, slot) in b.param_vars().into_iter().zip(net.params_mut()) {
            assert_eq!(g.get(v).unwrap().numel(), slot.data.len());
        }
    }

    #[test]
    fn isolated_nodes_on_chain() {
        let mut net = mlp("mlp-2-1-1");
        net.set_prunable(&[true, true]).unwrap();
        assert_eq!(net.isolated_node_fraction(), 0.0);
        // hidden neuron keeps its in-edges but loses its only out-edge
        net.set_mask(1, vec![false]).unwrap();
        assert_eq!(net.isolated_node_fraction(), 1.0);
        let mut net = mlp("mlp-3-4-4-2");
        for l in 0..2 {
            let n = net.layer(l).mask().len();
            net.set_mask(l, vec![false; n]).unwrap();
        }
        assert_eq!(net.isolated_node_fraction(), 1.0);
    }
}
