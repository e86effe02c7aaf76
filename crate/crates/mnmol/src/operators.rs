//! Learned score operators and their combination with the data term.
//!
//! `ScoreNetwork` is a small residual-free conv stack (optionally wrapped in
//! residual form for the spectrally normalized baseline). `CombinedOperator`
//! couples it with the measurement model: `Q(x) = A'A x + (1/lambda) F(x)`,
//! whose residual `H = I - Q` is the map whose local Lipschitz constant the
//! training loop constrains.

use crate::conv;
use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mri::{ComplexImage, MeasurementModel};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One convolution layer: `[c_out, c_in, k, k]` weights and `[c_out]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone)]
pub struct ScoreGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl ScoreGrads {
    pub fn zeros_like(net: &ScoreNetwork) -> Self {
        ScoreGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())))
                .collect(),
        }
    }

    pub fn axpy_mut(&mut self, a: f64, other: &ScoreGrads) -> Result<()> {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.axpy_mut(a, ow)?;
            b.axpy_mut(a, ob)?;
        }
        Ok(())
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
    }
}

/// Graph leaves for every weight and bias, in layer order.
pub struct ScoreLeaves {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

/// Small convolutional score operator. ReLU between layers, none after the
/// last. With `residual` set the network computes `x - cnn(x)`, the form used
/// by the spectrally normalized baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    layers: Vec<ConvLayer>,
    residual: bool,
}

impl ScoreNetwork {
    /// `channels` lists the channel counts, e.g. `[2, 16, 16, 2]` for three
    /// layers. Weights are seeded Gaussians scaled by
    /// `init_scale / sqrt(c_in * k * k)`; biases start at zero.
    pub fn new(channels: &[usize], kernel: usize, residual: bool, init_scale: f64, seed: u64) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::invalid("need at least one conv layer"));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid("kernel must be odd"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0x5eed);
        let mut layers = Vec::new();
        for pair in channels.windows(2) {
            let (c_in, c_out) = (pair[0], pair[1]);
            let std = init_scale / ((c_in * kernel * kernel) as f64).sqrt();
            layers.push(ConvLayer {
                weight: Tensor::randn(&[c_out, c_in, kernel, kernel], &mut rng).scale(std),
                bias: Tensor::zeros(&[c_out]),
            });
        }
        Ok(ScoreNetwork { layers, residual })
    }

    /// The default architecture: three 3x3 layers, 2 -> 16 -> 16 -> 2.
    pub fn default_arch(residual: bool, init_scale: f64, seed: u64) -> Self {
        ScoreNetwork::new(&[2, 16, 16, 2], 3, residual, init_scale, seed).expect("valid defaults")
    }

    pub fn zero_init(channels: &[usize], kernel: usize) -> Result<Self> {
        let mut net = ScoreNetwork::new(channels, kernel, false, 0.0, 0)?;
        for l in &mut net.layers {
            l.weight.scale_mut(0.0);
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<ConvLayer>, residual: bool) -> Self {
        ScoreNetwork { layers, residual }
    }

    /// Single 1x1 layer scaling both channels by `c`: the linear surrogate
    /// `F(x) = c * x`.
    pub fn scalar_gain(c: f64) -> Self {
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = c; // re <- re
        w.data_mut()[3] = c; // im <- im
        ScoreNetwork::from_layers(
            vec![ConvLayer {
                weight: w,
                bias: Tensor::zeros(&[2]),
            }],
            false,
        )
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn residual_form(&self) -> bool {
        self.residual
    }

    pub fn channels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.layers.iter().map(|l| l.c_in()).collect();
        out.push(self.layers.last().expect("nonempty").c_out());
        out
    }

    pub fn kernel(&self) -> usize {
        self.layers[0].kernel()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, network needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// Forward pass on a plain tensor `[c, h, w]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            cur = conv::forward(&cur, &l.weight, Some(&l.bias))?;
            if i < last {
                for v in cur.data_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        if self.residual {
            cur = x.sub(&cur)?;
        }
        Ok(cur)
    }

    pub fn apply_image(&self, x: &ComplexImage) -> Result<ComplexImage> {
        ComplexImage::new(self.apply(x.tensor())?)
    }

    /// Create graph leaves for all parameters.
    pub fn leaves(&self, g: &mut Graph) -> ScoreLeaves {
        let weights = self.layers.iter().map(|l| g.leaf(l.weight.clone())).collect();
        let biases = self.layers.iter().map(|l| g.leaf(l.bias.clone())).collect();
        ScoreLeaves { weights, biases }
    }

    /// Forward pass on the graph, reusing previously created parameter
    /// leaves so gradients accumulate across repeated applications.
    pub fn forward_graph(&self, g: &mut Graph, leaves: &ScoreLeaves, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            cur = g.conv2d(cur, leaves.weights[i], Some(leaves.biases[i]))?;
            if i < last {
                cur = g.relu(cur);
            }
        }
        if self.residual {
            cur = g.sub(x, cur)?;
        }
        Ok(cur)
    }

    /// `J_x(F)' cot`, computed by a hand-rolled reverse sweep over cached
    /// activations (hot path in adjoint solves and ascent loops).
    pub fn vjp_input(&self, x: &Tensor, cot: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        // pre-activation outputs of each layer
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let a = conv::forward(&cur, &l.weight, Some(&l.bias))?;
            if i < last {
                cur = a.clone();
                for v in cur.data_mut() {
                    *v = v.max(0.0);
                }
            }
            pre.push(a);
        }
        let mut back = cot.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // gate by relu'(pre[i])
                let mut gated = back.clone();
                for (g, p) in gated.data_mut().iter_mut().zip(pre[i].data()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                back = gated;
            }
            back = conv::input_adjoint(&back, &self.layers[i].weight)?;
        }
        if self.residual {
            back = cot.sub(&back)?;
        }
        Ok(back)
    }

    /// Parameter cotangents of `<cot, F(x)>`, via the graph.
    pub fn vjp_params(&self, x: &Tensor, cot: &Tensor) -> Result<ScoreGrads> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let xid = g.leaf(x.clone());
        let out = self.forward_graph(&mut g, &leaves, xid)?;
        let mut ids = Vec::new();
        for i in 0..self.layers.len() {
            ids.push(leaves.weights[i]);
            ids.push(leaves.biases[i]);
        }
        let grads = g.backward(out, cot, &ids)?;
        let layers = grads
            .chunks_exact(2)
            .map(|c| (c[0].clone(), c[1].clone()))
            .collect();
        Ok(ScoreGrads { layers })
    }
}

/// `Q(x) = A'A x + (1/lambda) F(x)`: the map whose root matches the
/// reconstruction fixed point `lambda A'(Ax - b) + F(x) = 0`.
#[derive(Debug, Clone)]
pub struct CombinedOperator {
    pub score: ScoreNetwork,
    pub mm: MeasurementModel,
    pub lambda: f64,
}

impl CombinedOperator {
    pub fn new(score: ScoreNetwork, mm: MeasurementModel, lambda: f64) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::invalid("lambda must be > 0"));
        }
        Ok(CombinedOperator { score, mm, lambda })
    }

    pub fn apply(&self, x: &ComplexImage) -> Result<ComplexImage> {
        let mut out = self.mm.normal(x)?;
        let f = self.score.apply_image(x)?;
        out.axpy_mut(1.0 / self.lambda, &f)?;
        Ok(out)
    }

    /// `H(x) = x - Q(x)`, the residual whose local Lipschitz constant
    /// certifies local monotonicity of `Q`.
    pub fn residual(&self, x: &ComplexImage) -> Result<ComplexImage> {
        x.sub(&self.apply(x)?)
    }

    /// `J_x(Q)' cot`. The normal operator is self-adjoint in the real inner
    /// product, so only the score needs a backward sweep.
    pub fn vjp_input(&self, x: &ComplexImage, cot: &ComplexImage) -> Result<ComplexImage> {
        let mut out = self.mm.normal(cot)?;
        let fv = self.score.vjp_input(x.tensor(), cot.tensor())?;
        out.tensor_mut().axpy_mut(1.0 / self.lambda, &fv)?;
        Ok(out)
    }

    pub fn residual_vjp_input(&self, x: &ComplexImage, cot: &ComplexImage) -> Result<ComplexImage> {
        cot.sub(&self.vjp_input(x, cot)?)
    }
}

/// Normalized monotonicity quotient
/// `Re<z1 - z2, Q(z1) - Q(z2)> / |z1 - z2|^2`.
pub fn monotonicity_probe(
    op: &CombinedOperator,
    z1: &ComplexImage,
    z2: &ComplexImage,
) -> Result<f64> {
    let d = z1.sub(z2)?;
    let dn2 = d.dot_re(&d)?;
    if dn2 == 0.0 {
        return Err(Error::DegeneratePair);
    }
    let dq = op.apply(z1)?.sub(&op.apply(z2)?)?;
    Ok(d.dot_re(&dq)? / dn2)
}

/// Spectral norm of one conv layer as an operator on `[c_in, h, w]` images,
/// estimated by power iteration on the materialized circular convolution.
/// Runs at least 20 iterations; errors if the Rayleigh quotient has not
/// settled to 1e-6 relative by `max_iter`.
pub fn conv_layer_spectral_norm(
    layer: &ConvLayer,
    h: usize,
    w: usize,
    max_iter: usize,
) -> Result<f64> {
    // Fixed seed: the norm estimate must be reproducible for idempotency.
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut v = Tensor::randn(&[layer.c_in(), h, w], &mut rng);
    let n = v.norm();
    v.scale_mut(1.0 / n);
    let mut prev = 0.0f64;
    let mut change = f64::INFINITY;
    for it in 0..max_iter.max(20) {
        let av = conv::forward(&v, &layer.weight, None)?;
        let mut atav = conv::input_adjoint(&av, &layer.weight)?;
        let ev = atav.norm(); // |W'W v|, converges to sigma^2
        if ev == 0.0 {
            return Ok(0.0);
        }
        atav.scale_mut(1.0 / ev);
        v = atav;
        let sigma = ev.sqrt();
        change = (sigma - prev).abs() / sigma.max(1e-300);
        prev = sigma;
        if it + 1 >= 20 && change <= 1e-6 {
            return Ok(sigma);
        }
    }
    if change <= 1e-6 {
        Ok(prev)
    } else {
        Err(Error::PowerIterationNoConvergence(change))
    }
}

/// Rescale every conv layer so the product of layer spectral norms equals
/// `target` (each layer lands on `target^(1/L)`). ReLUs are 1-Lipschitz, so
/// the layer product bounds the network's global Lipschitz constant from
/// above. Biases are untouched. Idempotent up to power-iteration
/// reproducibility.
pub fn spectral_normalize(
    net: &ScoreNetwork,
    target: f64,
    h: usize,
    w: usize,
    max_iter: usize,
) -> Result<ScoreNetwork> {
    if !(0.0 < target && target < 1.0) {
        return Err(Error::invalid("spectral target must lie in (0, 1)"));
    }
    let per_layer = target.powf(1.0 / net.layers().len() as f64);
    let mut layers = Vec::with_capacity(net.layers().len());
    for l in net.layers() {
        let sigma = conv_layer_spectral_norm(l, h, w, max_iter)?;
        let factor = if sigma == 0.0 { 1.0 } else { per_layer / sigma };
        layers.push(ConvLayer {
            weight: l.weight.scale(factor),
            bias: l.bias.clone(),
        });
    }
    Ok(ScoreNetwork::from_layers(layers, net.residual_form()))
}

/// Generic differentiable operator on plain tensors: what the local
/// Lipschitz estimator ascends.
pub trait LocalOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    /// `J(x)' cot`.
    fn vjp(&self, x: &Tensor, cot: &Tensor) -> Result<Tensor>;
}

/// `H = I - Q` of a combined operator, viewed as a tensor map.
pub struct CombinedResidual<'a>(pub &'a CombinedOperator);

impl LocalOperator for CombinedResidual<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .0
            .residual(&ComplexImage::new(x.clone())?)?
            .into_tensor())
    }

    fn vjp(&self, x: &Tensor, cot: &Tensor) -> Result<Tensor> {
        Ok(self
            .0
            .residual_vjp_input(&ComplexImage::new(x.clone())?, &ComplexImage::new(cot.clone())?)?
            .into_tensor())
    }
}

/// `I - F` of a bare score network: the residual constrained by the variant
/// that imposes monotonicity on the score itself.
pub struct ScoreResidual<'a>(pub &'a ScoreNetwork);

impl LocalOperator for ScoreResidual<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.sub(&self.0.apply(x)?)
    }

    fn vjp(&self, x: &Tensor, cot: &Tensor) -> Result<Tensor> {
        cot.sub(&self.0.vjp_input(x, cot)?)
    }
}
