//! Layer stacks with exact backpropagation and plain gradient descent.
//!
//! A [`Network`] is an ordered list of layers. Dense and conv1d layers own a
//! weight block and a bias row; activation layers own nothing. The same type
//! serves as representation learner, classifier head and identity selector.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Rng};

/// Width of the default latent representation.
pub const DEFAULT_REP_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv1d,
    Relu,
    Tanh,
    Sigmoid,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv1d)
    }
}

/// Shape description of one layer.
///
/// A conv1d layer reads its input as a single-channel sequence of length
/// `in_dim`, slides `window`-wide filters with stride 1 and no padding, and
/// writes `channels` outputs per position, position-major:
/// `out[pos * channels + c]`. Hence `out_dim = (in_dim - window + 1) * channels`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            window: None,
            channels: None,
        }
    }

    pub fn conv1d(in_dim: usize, window: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv1d,
            in_dim,
            out_dim: (in_dim + 1).saturating_sub(window) * channels,
            window: Some(window),
            channels: Some(channels),
        }
    }

    fn activation(kind: LayerKind, dim: usize) -> Self {
        LayerSpec {
            kind,
            in_dim: dim,
            out_dim: dim,
            window: None,
            channels: None,
        }
    }

    pub fn relu(dim: usize) -> Self {
        Self::activation(LayerKind::Relu, dim)
    }

    pub fn tanh(dim: usize) -> Self {
        Self::activation(LayerKind::Tanh, dim)
    }

    pub fn sigmoid(dim: usize) -> Self {
        Self::activation(LayerKind::Sigmoid, dim)
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Spec(format!("{:?} layer has a zero dimension", self.kind)));
        }
        match self.kind {
            LayerKind::Dense => Ok(()),
            LayerKind::Conv1d => {
                let (Some(window), Some(channels)) = (self.window, self.channels) else {
                    return Err(Error::Spec("conv1d needs window and channels".into()));
                };
                if window == 0 || channels == 0 || window > self.in_dim {
                    return Err(Error::Spec(format!(
                        "conv1d window {window} / channels {channels} invalid for input {}",
                        self.in_dim
                    )));
                }
                let expected = (self.in_dim - window + 1) * channels;
                if self.out_dim != expected {
                    return Err(Error::Spec(format!(
                        "conv1d out_dim {} should be {expected}",
                        self.out_dim
                    )));
                }
                Ok(())
            }
            _ if self.in_dim != self.out_dim => Err(Error::Spec(format!(
                "{:?} activation must preserve width, got {} -> {}",
                self.kind, self.in_dim, self.out_dim
            ))),
            _ => Ok(()),
        }
    }

    fn param_shapes(&self) -> ((usize, usize), (usize, usize)) {
        match self.kind {
            LayerKind::Dense => ((self.in_dim, self.out_dim), (1, self.out_dim)),
            LayerKind::Conv1d => {
                let (w, c) = (self.window.unwrap_or(1), self.channels.unwrap_or(1));
                ((w, c), (1, c))
            }
            _ => ((0, 0), (0, 0)),
        }
    }
}

/// Checks every spec and that consecutive widths line up.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Spec("network needs at least one layer".into()));
    }
    for s in specs {
        s.validate()?;
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Spec(format!(
                "layer {k} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                k + 1,
                pair[1].in_dim
            )));
        }
    }
    Ok(())
}

/// dense(p→32) relu dense(32→16) relu
pub fn default_representation(input_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(input_dim, 32),
        LayerSpec::relu(32),
        LayerSpec::dense(32, DEFAULT_REP_DIM),
        LayerSpec::relu(DEFAULT_REP_DIM),
    ]
}

/// conv1d over the feature vector followed by an activation. Each output
/// unit sees `window` adjacent input columns.
pub fn conv_representation(input_dim: usize, window: usize, channels: usize, activation: LayerKind) -> Vec<LayerSpec> {
    let conv = LayerSpec::conv1d(input_dim, window, channels);
    let width = conv.out_dim;
    let act = match activation {
        LayerKind::Tanh => LayerSpec::tanh(width),
        LayerKind::Sigmoid => LayerSpec::sigmoid(width),
        _ => LayerSpec::relu(width),
    };
    vec![conv, act]
}

/// dense(rep_dim→1) sigmoid
pub fn default_classifier(rep_dim: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::dense(rep_dim, 1), LayerSpec::sigmoid(1)]
}

/// A single perceptron layer from one-hot identities to the representation.
pub fn default_selector(identities: usize, rep_dim: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::dense(identities, rep_dim)]
}

/// One layer with its parameters. Activation layers carry empty `0 x 0` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

/// Parameter gradients, one `(w, b)` pair per layer, mirroring the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<(Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            blocks: net
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.w.rows(), l.w.cols()), Matrix::zeros(l.b.rows(), l.b.cols())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|(w, b)| w.is_finite() && b.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.blocks.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |m, g| m.max(g.max_abs()))
    }

    /// Adds `lambda * sign(param)` with `sign(0) = 0`: the L1 subgradient.
    pub fn add_l1_subgradient(&mut self, net: &Network<T>, lambda: T) {
        for ((gw, gb), layer) in self.blocks.iter_mut().zip(&net.layers) {
            for (g, p) in gw.data_mut().iter_mut().zip(layer.w.data()) {
                *g += lambda * sign(*p);
            }
            for (g, p) in gb.data_mut().iter_mut().zip(layer.b.data()) {
                *g += lambda * sign(*p);
            }
        }
    }
}

#[inline]
pub(crate) fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Weights drawn from `N(0, 1/in_dim)`, biases zero. For conv1d the fan-in
    /// is the window width.
    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        validate_specs(specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let ((wr, wc), (br, bc)) = spec.param_shapes();
            let w = if spec.kind.has_params() {
                let s = 1.0 / (wr as f64).sqrt();
                crate::tensor::randn(rng, wr, wc, s)?
            } else {
                Matrix::zeros(0, 0)
            };
            layers.push(Layer {
                spec: spec.clone(),
                w,
                b: Matrix::zeros(br, bc),
            });
        }
        Ok(Network { layers })
    }

    /// Builds a network from explicit layers, checking shapes.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec.clone()).collect();
        validate_specs(&specs)?;
        for l in &layers {
            let (ws, bs) = l.spec.param_shapes();
            if l.w.shape() != ws || l.b.shape() != bs {
                return Err(Error::Spec(format!(
                    "{:?} parameters have shapes {:?}/{:?}, expected {ws:?}/{bs:?}",
                    l.spec.kind,
                    l.w.shape(),
                    l.b.shape()
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.data().len() + l.b.data().len()).sum()
    }

    /// All parameter blocks in layer order, weights before biases.
    pub fn params(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    pub fn params_finite(&self) -> bool {
        self.params().all(Matrix::is_finite)
    }

    pub fn l1_norm(&self) -> T {
        self.params().map(Matrix::l1_norm).sum()
    }

    pub fn zero_params(&mut self) {
        for p in self.params_mut() {
            p.data_mut().fill(T::zero());
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer_forward(layer, &cur);
        }
        Ok(cur)
    }

    /// Every intermediate activation: element 0 is `x`, the last is the output.
    pub fn forward_trace(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer_forward(layer, acts.last().expect("non-empty"));
            acts.push(next);
        }
        Ok(acts)
    }

    /// Parameter gradients and input gradient of `sum(upstream ∘ forward(x))`.
    pub fn backward(&self, x: &Matrix<T>, upstream: &Matrix<T>) -> Result<(Gradients<T>, Matrix<T>)> {
        let acts = self.forward_trace(x)?;
        self.backward_from_trace(&acts, upstream)
    }

    pub fn backward_from_trace(
        &self,
        acts: &[Matrix<T>],
        upstream: &Matrix<T>,
    ) -> Result<(Gradients<T>, Matrix<T>)> {
        self.backward_inner(acts, upstream, true)
    }

    /// Like [`Network::backward_from_trace`] without the input gradient.
    pub fn param_gradients(&self, acts: &[Matrix<T>], upstream: &Matrix<T>) -> Result<Gradients<T>> {
        Ok(self.backward_inner(acts, upstream, false)?.0)
    }

    fn backward_inner(
        &self,
        acts: &[Matrix<T>],
        upstream: &Matrix<T>,
        want_input: bool,
    ) -> Result<(Gradients<T>, Matrix<T>)> {
        let out = &acts[acts.len() - 1];
        if upstream.shape() != out.shape() {
            return Err(Error::shape("backward", out.shape(), upstream.shape()));
        }
        let mut blocks = Vec::with_capacity(self.layers.len());
        let mut grad = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (gw, gb, gx) = layer_backward(layer, &acts[k], &acts[k + 1], &grad, want_input || k > 0);
            blocks.push((gw, gb));
            grad = gx;
        }
        blocks.reverse();
        Ok((Gradients { blocks }, grad))
    }

    /// Plain gradient descent: `param ← param − lr·grad`.
    pub fn optimizer_step(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        if !lr.is_finite() || lr <= T::zero() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        self.apply_update(grads, -lr)
    }

    /// `param ← param + scale·grad`, rejecting non-finite gradients or results.
    pub fn apply_update(&mut self, grads: &Gradients<T>, scale: T) -> Result<()> {
        self.check_grads(grads)?;
        if !grads.is_finite() {
            return Err(Error::Divergence {
                context: "optimizer step (non-finite gradient)",
                epoch: None,
            });
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.blocks) {
            for (p, &g) in layer.w.data_mut().iter_mut().zip(gw.data()) {
                *p += scale * g;
            }
            for (p, &g) in layer.b.data_mut().iter_mut().zip(gb.data()) {
                *p += scale * g;
            }
        }
        if !self.params_finite() {
            return Err(Error::Divergence {
                context: "optimizer step (non-finite parameter)",
                epoch: None,
            });
        }
        Ok(())
    }

    /// Soft-thresholds every parameter toward zero by `threshold`.
    pub fn shrink_l1(&mut self, threshold: T) {
        for p in self.params_mut() {
            for v in p.data_mut() {
                let mag = v.abs() - threshold;
                *v = if mag > T::zero() { sign(*v) * mag } else { T::zero() };
            }
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("forward", (x.rows(), self.in_dim()), x.shape()));
        }
        Ok(())
    }

    fn check_grads(&self, grads: &Gradients<T>) -> Result<()> {
        if grads.blocks.len() != self.layers.len() {
            return Err(Error::shape("gradients", (self.layers.len(), 0), (grads.blocks.len(), 0)));
        }
        for (layer, (gw, gb)) in self.layers.iter().zip(&grads.blocks) {
            if gw.shape() != layer.w.shape() {
                return Err(Error::shape("gradients", layer.w.shape(), gw.shape()));
            }
            if gb.shape() != layer.b.shape() {
                return Err(Error::shape("gradients", layer.b.shape(), gb.shape()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    w: l.w.cast(),
                    b: l.b.cast(),
                })
                .collect(),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn layer_forward<T: Scalar>(layer: &Layer<T>, x: &Matrix<T>) -> Matrix<T> {
    match layer.spec.kind {
        LayerKind::Dense => {
            let mut out = x.matmul(&layer.w).expect("validated dense shapes");
            let b = layer.b.data();
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(b) {
                    *o += bb;
                }
            }
            out
        }
        LayerKind::Conv1d => {
            let window = layer.w.rows();
            let channels = layer.w.cols();
            let positions = x.cols() - window + 1;
            let mut out = Matrix::zeros(x.rows(), positions * channels);
            for r in 0..x.rows() {
                let xr = x.row(r);
                let or = out.row_mut(r);
                for pos in 0..positions {
                    let o = &mut or[pos * channels..(pos + 1) * channels];
                    o.copy_from_slice(layer.b.data());
                    for j in 0..window {
                        let xv = xr[pos + j];
                        for (oc, &wv) in o.iter_mut().zip(layer.w.row(j)) {
                            *oc += xv * wv;
                        }
                    }
                }
            }
            out
        }
        LayerKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        LayerKind::Tanh => x.map(|v| v.tanh()),
        LayerKind::Sigmoid => x.map(sigmoid),
    }
}

fn layer_backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    dy: &Matrix<T>,
    want_input: bool,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let empty = || Matrix::zeros(0, 0);
    match layer.spec.kind {
        LayerKind::Dense => {
            let gw = x.t_matmul(dy).expect("validated dense shapes");
            let gb = dy.sum_rows();
            let gx = if want_input {
                dy.matmul_t(&layer.w).expect("validated dense shapes")
            } else {
                empty()
            };
            (gw, gb, gx)
        }
        LayerKind::Conv1d => {
            let window = layer.w.rows();
            let channels = layer.w.cols();
            let positions = x.cols() - window + 1;
            let mut gw = Matrix::zeros(window, channels);
            let mut gb = vec![T::zero(); channels];
            let mut gx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let xr = x.row(r);
                let dr = dy.row(r);
                for pos in 0..positions {
                    let d = &dr[pos * channels..(pos + 1) * channels];
                    for (g, &dv) in gb.iter_mut().zip(d) {
                        *g += dv;
                    }
                    for j in 0..window {
                        let xv = xr[pos + j];
                        for (g, &dv) in gw.row_mut(j).iter_mut().zip(d) {
                            *g += xv * dv;
                        }
                        if want_input {
                            let acc: T = layer.w.row(j).iter().zip(d).map(|(&wv, &dv)| wv * dv).sum();
                            let cur = gx.get(r, pos + j);
                            gx.set(r, pos + j, cur + acc);
                        }
                    }
                }
            }
            (gw, Matrix::row_vector(gb), gx)
        }
        LayerKind::Relu => {
            let gx = mask_map(x, dy, |xv, d| if xv > T::zero() { d } else { T::zero() });
            (empty(), empty(), gx)
        }
        LayerKind::Tanh => (empty(), empty(), mask_map(y, dy, |yv, d| d * (T::one() - yv * yv))),
        LayerKind::Sigmoid => (empty(), empty(), mask_map(y, dy, |yv, d| d * yv * (T::one() - yv))),
    }
}

fn mask_map<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    kind: LayerKind,
    in_dim: usize,
    out_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    layers: Vec<LayerDoc>,
}

impl<T: Scalar> Serialize for Network<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = NetworkDoc {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let has = l.spec.kind.has_params();
                    LayerDoc {
                        kind: l.spec.kind,
                        in_dim: l.spec.in_dim,
                        out_dim: l.spec.out_dim,
                        window: l.spec.window,
                        channels: l.spec.channels,
                        w: has.then(|| l.w.to_f64_vec()),
                        b: has.then(|| l.b.to_f64_vec()),
                    }
                })
                .collect(),
        };
        doc.serialize(serializer)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Network<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = NetworkDoc::deserialize(deserializer)?;
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            let spec = LayerSpec {
                kind: l.kind,
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                window: l.window,
                channels: l.channels,
            };
            let ((wr, wc), (br, bc)) = spec.param_shapes();
            let to_matrix = |v: Option<Vec<f64>>, r: usize, c: usize| -> std::result::Result<Matrix<T>, D::Error> {
                let v = v.unwrap_or_default();
                Matrix::new(r, c, v.into_iter().map(T::lit).collect()).map_err(D::Error::custom)
            };
            let w = to_matrix(l.w, wr, wc)?;
            let b = to_matrix(l.b, br, bc)?;
            layers.push(Layer { spec, w, b });
        }
        Network::from_layers(layers).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;

    fn dense_layer(w: Matrix<f64>, b: Matrix<f64>) -> Layer<f64> {
        Layer {
            spec: LayerSpec::dense(w.rows(), w.cols()),
            w,
            b,
        }
    }

    /// Central finite differences of `sum(upstream ∘ net(x))` w.r.t. every
    /// parameter and input element; returns the worst relative error.
    fn finite_difference_check(net: &Network<f64>, x: &Matrix<f64>, upstream: &Matrix<f64>) -> f64 {
        let h = 1e-5;
        let objective = |n: &Network<f64>, x: &Matrix<f64>| -> f64 {
            let y = n.forward(x).unwrap();
            y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let (grads, gx) = net.backward(x, upstream).unwrap();
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        for (li, (gw, gb)) in grads.blocks.iter().enumerate() {
            for (which, g) in [(0, gw), (1, gb)] {
                for i in 0..g.data().len() {
                    let orig = {
                        let l = &mut probe.layers_mut()[li];
                        let p = if which == 0 { &mut l.w } else { &mut l.b };
                        let o = p.data()[i];
                        p.data_mut()[i] = o + h;
                        o
                    };
                    let up = objective(&probe, x);
                    {
                        let l = &mut probe.layers_mut()[li];
                        let p = if which == 0 { &mut l.w } else { &mut l.b };
                        p.data_mut()[i] = orig - h;
                    }
                    let down = objective(&probe, x);
                    {
                        let l = &mut probe.layers_mut()[li];
                        let p = if which == 0 { &mut l.w } else { &mut l.b };
                        p.data_mut()[i] = orig;
                    }
                    worst = worst.max(rel(g.data()[i], (up - down) / (2.0 * h)));
                }
            }
        }
        let mut xp = x.clone();
        for i in 0..x.data().len() {
            let o = xp.data()[i];
            xp.data_mut()[i] = o + h;
            let up = objective(net, &xp);
            xp.data_mut()[i] = o - h;
            let down = objective(net, &xp);
            xp.data_mut()[i] = o;
            worst = worst.max(rel(gx.data()[i], (up - down) / (2.0 * h)));
        }
        worst
    }

    /// Shifts inputs away from the ReLU kink so finite differences stay smooth.
    fn away_from_kinks(net: &Network<f64>, x: &Matrix<f64>) -> bool {
        let acts = net.forward_trace(x).unwrap();
        net.layers().iter().enumerate().all(|(k, l)| {
            l.spec.kind != LayerKind::Relu || acts[k].data().iter().all(|v| v.abs() > 1e-3)
        })
    }

    #[test]
    fn identity_dense_layer() {
        let net = Network::from_layers(vec![dense_layer(Matrix::identity(2), Matrix::zeros(1, 2))]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn dense_then_sigmoid_at_zero() {
        let w = Matrix::column(vec![1.0, 1.0]);
        let net = Network::from_layers(vec![
            dense_layer(w, Matrix::zeros(1, 1)),
            Layer {
                spec: LayerSpec::sigmoid(1),
                w: Matrix::zeros(0, 0),
                b: Matrix::zeros(0, 0),
            },
        ])
        .unwrap();
        let y = net.forward(&Matrix::zeros(1, 2)).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let mut rng = Rng::new(5);
        let specs = vec![
            LayerSpec::dense(4, 6),
            LayerSpec::tanh(6),
            LayerSpec::dense(6, 5),
            LayerSpec::relu(5),
            LayerSpec::dense(5, 2),
            LayerSpec::sigmoid(2),
        ];
        let net: Network<f64> = Network::init(&specs, &mut rng).unwrap();
        let x: Matrix<f64> = randn(&mut rng, 3, 4, 1.0).unwrap();
        let got = net.forward(&x).unwrap();
        let l = net.layers();
        for r in 0..3 {
            let mut h1 = [0.0; 6];
            for j in 0..6 {
                let mut s = l[0].b.get(0, j);
                for i in 0..4 {
                    s += x.get(r, i) * l[0].w.get(i, j);
                }
                h1[j] = s.tanh();
            }
            let mut h2 = [0.0; 5];
            for j in 0..5 {
                let mut s = l[2].b.get(0, j);
                for i in 0..6 {
                    s += h1[i] * l[2].w.get(i, j);
                }
                h2[j] = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = l[4].b.get(0, j);
                for i in 0..5 {
                    s += h2[i] * l[4].w.get(i, j);
                }
                let expect = 1.0 / (1.0 + (-s).exp());
                assert!((got.get(r, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(8);
        let net: Network<f64> = Network::init(&default_representation(5), &mut rng).unwrap();
        let x: Matrix<f64> = randn(&mut rng, 4, 5, 1.0).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), net.forward(&x).unwrap().data());
    }

    #[test]
    fn forward_shape_error() {
        let net: Network<f64> = Network::init(&[LayerSpec::dense(3, 2)], &mut Rng::new(0)).unwrap();
        assert!(matches!(net.forward(&Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
        assert_eq!(net.forward(&Matrix::zeros(7, 3)).unwrap().rows(), 7);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(2);
        let net: Network<f64> = Network::init(&default_representation(3), &mut rng).unwrap();
        let x: Matrix<f64> = randn(&mut rng, 4, 3, 1.0).unwrap();
        let (g, gx) = net.backward(&x, &Matrix::zeros(4, DEFAULT_REP_DIM)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(gx.max_abs(), 0.0);
        assert!(net.backward(&x, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn dense_input_gradient_is_upstream_times_wt() {
        let mut rng = Rng::new(4);
        let net: Network<f64> = Network::init(&[LayerSpec::dense(5, 3)], &mut rng).unwrap();
        let x: Matrix<f64> = randn(&mut rng, 4, 5, 1.0).unwrap();
        let up: Matrix<f64> = randn(&mut rng, 4, 3, 1.0).unwrap();
        let (_, gx) = net.backward(&x, &up).unwrap();
        let expect = up.matmul(&net.layers()[0].w.transpose()).unwrap();
        for (a, b) in gx.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let specs = vec![LayerSpec::dense(3, 4), LayerSpec::tanh(4), LayerSpec::dense(4, 2)];
        let net: Network<f64> = Network::init(&specs, &mut rng).unwrap();
        let x: Matrix<f64> = randn(&mut rng, 5, 3, 1.0).unwrap();
        let up: Matrix<f64> = randn(&mut rng, 5, 2, 1.0).unwrap();
        assert!(finite_difference_check(&net, &x, &up) <= 1e-4);
    }

    #[test]
    fn conv1d_window_one_equals_shared_dense() {
        let mut rng = Rng::new(6);
        let conv: Network<f64> = Network::init(&[LayerSpec::conv1d(5, 1, 1)], &mut rng).unwrap();
        conv.layers()[0].w.get(0, 0);
        let w = conv.layers()[0].w.get(0, 0);
        let mut conv = conv;
        conv.layers_mut()[0].b.set(0, 0, 0.25);
        let dense = Network::from_layers(vec![dense_layer(
            Matrix::<f64>::identity(5).scale(w),
            Matrix::filled(1, 5, 0.25),
        )])
        .unwrap();
        let x: Matrix<f64> = randn(&mut rng, 3, 5, 1.0).unwrap();
        let a = conv.forward(&x).unwrap();
        let b = dense.forward(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_gradient_step_is_noop_and_inverse_step_restores() {
        let mut rng = Rng::new(12);
        let mut net: Network<f64> = Network::init(&default_representation(4), &mut rng).unwrap();
        let before = net.clone();
        net.optimizer_step(&Gradients::zeros_like(&net), 0.1).unwrap();
        assert_eq!(net, before);

        let x: Matrix<f64> = randn(&mut rng, 6, 4, 1.0).unwrap();
        let up: Matrix<f64> = randn(&mut rng, 6, DEFAULT_REP_DIM, 1.0).unwrap();
        let (g, _) = net.backward(&x, &up).unwrap();
        net.optimizer_step(&g, 0.1).unwrap();
        net.apply_update(&g, 0.1).unwrap();
        for (p, q) in net.params().zip(before.params()) {
            for (a, b) in p.data().iter().zip(q.data()) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn quadratic_descent_converges() {
        // loss ½(w−3)² on a scalar "network" with one weight
        let mut net = Network::from_layers(vec![dense_layer(Matrix::zeros(1, 1), Matrix::zeros(1, 1))]).unwrap();
        for _ in 0..100 {
            let w = net.layers()[0].w.get(0, 0);
            let g = Gradients {
                blocks: vec![(Matrix::filled(1, 1, w - 3.0), Matrix::zeros(1, 1))],
            };
            net.optimizer_step(&g, 0.1).unwrap();
        }
        // closed form: 3(1 − 0.9^100)
        let w = net.layers()[0].w.get(0, 0);
        assert!((w - 3.0).abs() <= 1e-4 * 3.0, "w = {w}");
        assert!((w - 3.0 * (1.0 - 0.9f64.powi(100))).abs() <= 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut net: Network<f64> = Network::init(&[LayerSpec::dense(2, 1)], &mut Rng::new(0)).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.blocks[0].0.set(0, 0, f64::NAN);
        assert!(matches!(net.optimizer_step(&g, 0.1), Err(Error::Divergence { .. })));
        assert!(matches!(
            net.optimizer_step(&Gradients::zeros_like(&net), 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let specs = default_representation(7);
        let a: Network<f64> = Network::init(&specs, &mut Rng::new(3)).unwrap();
        let b: Network<f64> = Network::init(&specs, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        for l in a.layers() {
            assert!(l.b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_weight_scale() {
        let net: Network<f64> = Network::init(&[LayerSpec::dense(1000, 1000)], &mut Rng::new(17)).unwrap();
        let w = net.layers()[0].w.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = 1.0 / 1000f64.sqrt();
        assert!((std - target).abs() <= 0.03 * target);
    }

    #[test]
    fn incompatible_specs_rejected() {
        let bad = vec![LayerSpec::dense(3, 4), LayerSpec::relu(5)];
        assert!(matches!(Network::<f64>::init(&bad, &mut Rng::new(0)), Err(Error::Spec(_))));
        let bad_conv = LayerSpec {
            out_dim: 7,
            ..LayerSpec::conv1d(5, 2, 2)
        };
        assert!(validate_specs(&[bad_conv]).is_err());
        assert!(validate_specs(&[]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let specs = vec![
            LayerSpec::conv1d(6, 3, 2),
            LayerSpec::relu(8),
            LayerSpec::dense(8, 1),
            LayerSpec::sigmoid(1),
        ];
        let net: Network<f64> = Network::init(&specs, &mut Rng::new(9)).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        assert!(json.starts_with("{\"layers\":[{\"kind\":\"conv1d\""));
        let back: Network<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::tensor::Rng;

        fn arb_spec() -> impl Strategy<Value = (u64, Vec<LayerSpec>)> {
            (any::<u64>(), 1usize..=8, 1usize..=8, 1usize..=3, 0usize..5).prop_map(|(seed, a, b, win, act)| {
                let win = win.min(a);
                let first = if seed % 2 == 0 {
                    LayerSpec::dense(a, b)
                } else {
                    LayerSpec::conv1d(a, win, 2)
                };
                let mid = first.out_dim;
                let act = match act {
                    0 => LayerSpec::relu(mid),
                    1 => LayerSpec::tanh(mid),
                    2 => LayerSpec::sigmoid(mid),
                    _ => LayerSpec::tanh(mid),
                };
                (seed, vec![first, act, LayerSpec::dense(mid, b)])
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn every_layer_kind_passes_gradient_check((seed, specs) in arb_spec(), rows in 1usize..=4) {
                let mut rng = Rng::new(seed);
                let net: Network<f64> = Network::init(&specs, &mut rng).unwrap();
                let x: Matrix<f64> = randn(&mut rng, rows, specs[0].in_dim, 1.0).unwrap();
                prop_assume!(away_from_kinks(&net, &x));
                let up: Matrix<f64> = randn(&mut rng, rows, net.out_dim(), 1.0).unwrap();
                prop_assert!(finite_difference_check(&net, &x, &up) <= 1e-4);
            }
        }
    }
}
