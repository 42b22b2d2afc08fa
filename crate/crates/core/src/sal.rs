//! Select-additive learning.
//!
//! Three stages over a representation learner `g`, a classifier head `f` and
//! an identity selector `h`:
//!
//! 1. [`pretrain_base`] fits `g` and `f` jointly on the squared loss
//!    `½(y − f(g(X)))²`.
//! 2. [`selection_phase`] freezes `g` and fits `h` so that `h(Z)` reproduces
//!    `g(X)` from one-hot identities under an L1 penalty on all of `h`'s
//!    parameters. Dimensions `h` can explain are identity-driven.
//! 3. [`addition_phase`] freezes `g` and `h` and refits `f` on
//!    `g(X) + h(Z) ∘ ε`, `ε ~ N(0, σ²I)`, so those dimensions carry noise and
//!    stop being useful to `f`.
//!
//! Losses are averaged over rows. Inference ([`predict`]) uses `f(g(x))` only;
//! the selector is never evaluated on unseen identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Gradients, LayerKind, LayerSpec, Network};
use crate::scalar::Scalar;
use crate::synthdata::LabeledDataset;
use crate::tensor::{randn, Matrix, Rng};

const STREAM_INIT: u64 = 1;
const STREAM_BASE: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_ADD: u64 = 4;
const STREAM_REINIT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseResample {
    /// One `n×d` draw per epoch, shared by all mini-batches of that epoch.
    PerEpoch,
    /// A fresh draw for every gradient step.
    PerStep,
}

/// Per-feature convolutional encoder: every representation unit looks at
/// `window` adjacent input columns through one of `channels` shared filters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvEncoder {
    pub window: usize,
    pub channels: usize,
    pub activation: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SalConfig {
    pub lambda_sparsity: f64,
    pub noise_sigma: f64,
    pub lr_base: f64,
    pub lr_select: f64,
    pub lr_add: f64,
    pub epochs_base: usize,
    pub epochs_select: usize,
    pub epochs_add: usize,
    pub seed: u64,
    /// Builds `g` from [`nn::conv_representation`] when `arch_g` is unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<ConvEncoder>,
    /// `None` selects `encoder`, else [`nn::default_representation`] sized to
    /// the input.
    pub arch_g: Option<Vec<LayerSpec>>,
    /// `None` selects [`nn::default_classifier`] sized to `g`'s output.
    pub arch_f: Option<Vec<LayerSpec>>,
    /// `None` selects [`nn::default_selector`] sized to the identity count and
    /// `g`'s output.
    pub arch_h: Option<Vec<LayerSpec>>,
    pub noise_resample: NoiseResample,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Re-initialize `f` before the addition phase instead of continuing.
    pub reinit_classifier: bool,
}

impl Default for SalConfig {
    fn default() -> Self {
        SalConfig {
            lambda_sparsity: 0.1,
            noise_sigma: 1.0,
            lr_base: 0.05,
            lr_select: 0.05,
            lr_add: 0.05,
            epochs_base: 300,
            epochs_select: 300,
            epochs_add: 300,
            seed: 0,
            encoder: None,
            arch_g: None,
            arch_f: None,
            arch_h: None,
            noise_resample: NoiseResample::PerEpoch,
            batch_size: None,
            reinit_classifier: false,
        }
    }
}

impl SalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_select", self.lr_select),
            ("lr_add", self.lr_add),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, e) in [
            ("epochs_base", self.epochs_base),
            ("epochs_select", self.epochs_select),
            ("epochs_add", self.epochs_add),
        ] {
            if e == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.lambda_sparsity.is_finite() || self.lambda_sparsity < 0.0 {
            return Err(Error::Config(format!("lambda_sparsity must be >= 0, got {}", self.lambda_sparsity)));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if let Some(e) = &self.encoder {
            if !matches!(e.activation, LayerKind::Relu | LayerKind::Tanh | LayerKind::Sigmoid) {
                return Err(Error::Config(format!("encoder activation must be relu, tanh or sigmoid, got {:?}", e.activation)));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Concrete `(g, f, h)` architectures for `p` features and `m` identities.
    pub fn architectures(&self, p: usize, m: usize) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>, Vec<LayerSpec>)> {
        let g = match (&self.arch_g, &self.encoder) {
            (Some(a), _) => a.clone(),
            (None, Some(e)) => {
                if e.window == 0 || e.window > p || e.channels == 0 {
                    return Err(Error::Config(format!(
                        "encoder window {} / channels {} invalid for {p} inputs",
                        e.window, e.channels
                    )));
                }
                nn::conv_representation(p, e.window, e.channels, e.activation)
            }
            (None, None) => nn::default_representation(p),
        };
        nn::validate_specs(&g).map_err(|e| Error::Config(format!("arch_g: {e}")))?;
        let d = g[g.len() - 1].out_dim;
        let f = self.arch_f.clone().unwrap_or_else(|| nn::default_classifier(d));
        let h = self.arch_h.clone().unwrap_or_else(|| nn::default_selector(m, d));
        for (name, a) in [("f", &f), ("h", &h)] {
            nn::validate_specs(a).map_err(|e| Error::Config(format!("arch_{name}: {e}")))?;
        }
        if g[0].in_dim != p {
            return Err(Error::Config(format!("arch_g expects {} inputs, data has {p}", g[0].in_dim)));
        }
        if h[0].in_dim != m {
            return Err(Error::Config(format!("arch_h expects {} identities, data has {m}", h[0].in_dim)));
        }
        if f[0].in_dim != d || h[h.len() - 1].out_dim != d {
            return Err(Error::Config(format!(
                "representation width mismatch: g outputs {d}, f takes {}, h outputs {}",
                f[0].in_dim,
                h[h.len() - 1].out_dim
            )));
        }
        if f[f.len() - 1].out_dim != 1 {
            return Err(Error::Config("arch_f must end in a single output".into()));
        }
        Ok((g, f, h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BaseTrained,
    Selected,
    Added,
}

/// Per-epoch objective values. Each entry is the objective at the start of
/// that epoch's updates (for full-batch training, the exact loss before the
/// step).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub base: Vec<f64>,
    pub selection: Vec<f64>,
    pub addition: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SalModel<T> {
    pub phase: Phase,
    pub config: SalConfig,
    pub g: Network<T>,
    pub f: Network<T>,
    pub h: Network<T>,
    #[serde(skip)]
    pub trace: PhaseTrace,
}

impl<T: Scalar> SalModel<T> {
    pub fn representation_dim(&self) -> usize {
        self.g.out_dim()
    }

    /// Sets every selector parameter to zero, so `h(Z) ≡ 0`.
    pub fn zero_selector(&mut self) {
        self.h.zero_params();
    }

    /// `g(x)`
    pub fn represent(&self, x: &Matrix<f64>) -> Result<Matrix<T>> {
        self.g.forward(&x.cast())
    }

    /// Sigmoid scores `f(g(x))` as an n×1 matrix.
    pub fn scores(&self, x: &Matrix<f64>) -> Result<Matrix<T>> {
        self.f.forward(&self.represent(x)?)
    }

    /// `h(Z)` for the given identities.
    pub fn selection_matrix(&self, identities: &[usize]) -> Result<Matrix<T>> {
        let z = crate::synthdata::one_hot(identities, self.h.in_dim())?;
        self.h.forward(&z.cast())
    }
}

/// Labels in `{0, 1}` from `f(g(x)) ≥ 0.5`; an exact 0.5 maps to 1.
pub fn predict<T: Scalar>(model: &SalModel<T>, x: &Matrix<f64>) -> Result<Vec<u8>> {
    if x.cols() != model.g.in_dim() {
        return Err(Error::shape("predict", (x.rows(), model.g.in_dim()), x.shape()));
    }
    Ok(threshold(&model.scores(x)?))
}

pub fn threshold<T: Scalar>(scores: &Matrix<T>) -> Vec<u8> {
    let half = T::lit(0.5);
    scores.data().iter().map(|&s| u8::from(s >= half)).collect()
}

/// `(1/n) Σ_rows ½‖ŷ − y‖²` and its gradient w.r.t. `ŷ`.
fn squared_loss<T: Scalar>(pred: &Matrix<T>, y: &Matrix<T>) -> (T, Matrix<T>) {
    let n = T::from_usize(pred.rows().max(1)).expect("row count fits");
    let half = T::lit(0.5);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.data().len());
    for (&p, &t) in pred.data().iter().zip(y.data()) {
        let d = p - t;
        loss += half * d * d;
        grad.push(d / n);
    }
    let grad = Matrix::new(pred.rows(), pred.cols(), grad).expect("same shape");
    (loss / n, grad)
}

fn batches(n: usize, batch_size: Option<usize>, rng: &mut Rng) -> Vec<Vec<usize>> {
    match batch_size {
        Some(b) if b < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.chunks(b).map(<[usize]>::to_vec).collect()
        }
        _ => vec![(0..n).collect()],
    }
}

fn rows<T: Scalar>(m: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    if idx.len() == m.rows() && idx.iter().enumerate().all(|(i, &r)| i == r) {
        m.clone()
    } else {
        m.select_rows(idx)
    }
}

fn diverged(context: &'static str, epoch: usize) -> Error {
    Error::Divergence {
        context,
        epoch: Some(epoch),
    }
}

fn with_epoch(e: Error, context: &'static str, epoch: usize) -> Error {
    match e {
        Error::Divergence { .. } => diverged(context, epoch),
        other => other,
    }
}

fn check_data(data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Parameter("training data is empty".into()));
    }
    data.validate()
}

/// Trains `g` and `f` jointly; `h` is initialized but untouched.
pub fn pretrain_base<T: Scalar>(data: &LabeledDataset, cfg: &SalConfig) -> Result<SalModel<T>> {
    cfg.validate()?;
    check_data(data)?;
    let (arch_g, arch_f, arch_h) = cfg.architectures(data.features.cols(), data.m)?;
    let mut init_rng = Rng::derive(cfg.seed, STREAM_INIT);
    let mut g = Network::init(&arch_g, &mut init_rng)?;
    let mut f = Network::init(&arch_f, &mut init_rng)?;
    let h = Network::init(&arch_h, &mut init_rng)?;

    let x: Matrix<T> = data.features.cast();
    let y: Matrix<T> = data.labels.cast();
    let lr = T::lit(cfg.lr_base);
    let mut shuffle = Rng::derive(cfg.seed, STREAM_BASE);
    let mut trace = PhaseTrace::default();
    for epoch in 0..cfg.epochs_base {
        let mut epoch_loss = 0.0;
        for batch in batches(x.rows(), cfg.batch_size, &mut shuffle) {
            let xb = rows(&x, &batch);
            let yb = rows(&y, &batch);
            let acts_g = g.forward_trace(&xb)?;
            let acts_f = f.forward_trace(&acts_g[acts_g.len() - 1])?;
            let (loss, up) = squared_loss(&acts_f[acts_f.len() - 1], &yb);
            if !loss.is_finite() {
                return Err(diverged("base", epoch));
            }
            epoch_loss += loss.as_f64() * batch.len() as f64;
            let (grad_f, d_rep) = f.backward_from_trace(&acts_f, &up)?;
            let grad_g = g.param_gradients(&acts_g, &d_rep)?;
            f.optimizer_step(&grad_f, lr).map_err(|e| with_epoch(e, "base", epoch))?;
            g.optimizer_step(&grad_g, lr).map_err(|e| with_epoch(e, "base", epoch))?;
        }
        trace.base.push(epoch_loss / x.rows() as f64);
    }
    Ok(SalModel {
        phase: Phase::BaseTrained,
        config: cfg.clone(),
        g,
        f,
        h,
        trace,
    })
}

/// `mean ½‖r − h(z)‖² + λ‖δ‖₁` over all selector parameters.
pub fn selection_objective<T: Scalar>(h: &Network<T>, z: &Matrix<T>, rep: &Matrix<T>, lambda: T) -> Result<T> {
    let out = h.forward(z)?;
    let (smooth, _) = squared_loss(&out, rep);
    Ok(smooth + lambda * h.l1_norm())
}

/// Gradient of [`selection_objective`], using `sign(0) = 0` for the L1 term.
pub fn selection_gradient<T: Scalar>(
    h: &Network<T>,
    z: &Matrix<T>,
    rep: &Matrix<T>,
    lambda: T,
) -> Result<Gradients<T>> {
    let acts = h.forward_trace(z)?;
    let up = selection_upstream(&acts[acts.len() - 1], rep)?;
    let mut grads = h.param_gradients(&acts, &up)?;
    grads.add_l1_subgradient(h, lambda);
    Ok(grads)
}

fn selection_upstream<T: Scalar>(out: &Matrix<T>, rep: &Matrix<T>) -> Result<Matrix<T>> {
    let n = T::from_usize(out.rows().max(1)).expect("row count fits");
    Ok(out.sub(rep)?.map(|v| v / n))
}

/// Fits `h` to the frozen representation. Each step is a gradient step on
/// the smooth term followed by soft-thresholding by `lr·λ`, so parameters that
/// the data cannot hold away from zero land exactly on zero.
pub fn selection_phase<T: Scalar>(
    mut model: SalModel<T>,
    data: &LabeledDataset,
    cfg: &SalConfig,
) -> Result<SalModel<T>> {
    cfg.validate()?;
    check_data(data)?;
    if model.phase != Phase::BaseTrained {
        return Err(Error::State(format!(
            "selection phase needs a base-trained model, found {:?}",
            model.phase
        )));
    }
    if data.m != model.h.in_dim() {
        return Err(Error::shape("selection identities", (data.len(), model.h.in_dim()), (data.len(), data.m)));
    }
    let rep = model.represent(&data.features)?;
    let z: Matrix<T> = data.z()?.cast();
    let lr = T::lit(cfg.lr_select);
    let lambda = T::lit(cfg.lambda_sparsity);
    let mut shuffle = Rng::derive(cfg.seed, STREAM_SELECT);
    for epoch in 0..cfg.epochs_select {
        let objective = selection_objective(&model.h, &z, &rep, lambda)?;
        if !objective.is_finite() {
            return Err(diverged("selection", epoch));
        }
        model.trace.selection.push(objective.as_f64());
        for batch in batches(z.rows(), cfg.batch_size, &mut shuffle) {
            let zb = rows(&z, &batch);
            let rb = rows(&rep, &batch);
            let acts = model.h.forward_trace(&zb)?;
            let up = selection_upstream(&acts[acts.len() - 1], &rb)?;
            let grads = model.h.param_gradients(&acts, &up)?;
            model
                .h
                .optimizer_step(&grads, lr)
                .map_err(|e| with_epoch(e, "selection", epoch))?;
            model.h.shrink_l1(lr * lambda);
        }
    }
    model.phase = Phase::Selected;
    Ok(model)
}

/// `mask ∘ ε` with `ε ~ N(0, σ²I)`.
pub fn gaussian_sample<T: Scalar>(mask: &Matrix<T>, sigma: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    let eps = randn(rng, mask.rows(), mask.cols(), sigma)?;
    mask.hadamard(&eps)
}

/// `mean ½(y − f(r + mask ∘ ε))²` for a fixed `ε`.
pub fn addition_loss<T: Scalar>(
    f: &Network<T>,
    rep: &Matrix<T>,
    mask: &Matrix<T>,
    eps: &Matrix<T>,
    y: &Matrix<T>,
) -> Result<T> {
    let input = rep.add(&mask.hadamard(eps)?)?;
    Ok(squared_loss(&f.forward(&input)?, y).0)
}

/// Gradient of [`addition_loss`] with respect to the classifier parameters.
pub fn addition_gradient<T: Scalar>(
    f: &Network<T>,
    rep: &Matrix<T>,
    mask: &Matrix<T>,
    eps: &Matrix<T>,
    y: &Matrix<T>,
) -> Result<Gradients<T>> {
    let input = rep.add(&mask.hadamard(eps)?)?;
    let acts = f.forward_trace(&input)?;
    let (_, up) = squared_loss(&acts[acts.len() - 1], y);
    f.param_gradients(&acts, &up)
}

/// Refits `f` on noise-masked representations; `g` and `h` stay frozen.
pub fn addition_phase<T: Scalar>(
    mut model: SalModel<T>,
    data: &LabeledDataset,
    cfg: &SalConfig,
    rng: &mut Rng,
) -> Result<SalModel<T>> {
    cfg.validate()?;
    check_data(data)?;
    if model.phase != Phase::Selected {
        return Err(Error::State(format!(
            "addition phase needs a selected model, found {:?}",
            model.phase
        )));
    }
    if data.m != model.h.in_dim() {
        return Err(Error::shape("addition identities", (data.len(), model.h.in_dim()), (data.len(), data.m)));
    }
    let mask = model.h.forward(&data.z()?.cast())?;
    train_head(&mut model, data, cfg, Some((&mask, rng)))?;
    model.phase = Phase::Added;
    Ok(model)
}

/// Noise-free refit of `f` on the same schedule as [`addition_phase`]: the
/// control arm for the addition phase. Leaves the phase tag unchanged.
pub fn retrain_classifier<T: Scalar>(
    mut model: SalModel<T>,
    data: &LabeledDataset,
    cfg: &SalConfig,
) -> Result<SalModel<T>> {
    cfg.validate()?;
    check_data(data)?;
    train_head(&mut model, data, cfg, None)?;
    Ok(model)
}

fn train_head<T: Scalar>(
    model: &mut SalModel<T>,
    data: &LabeledDataset,
    cfg: &SalConfig,
    mut noise: Option<(&Matrix<T>, &mut Rng)>,
) -> Result<()> {
    if cfg.reinit_classifier {
        let specs = model.f.specs();
        model.f = Network::init(&specs, &mut Rng::derive(cfg.seed, STREAM_REINIT))?;
    }
    let rep = model.represent(&data.features)?;
    let y: Matrix<T> = data.labels.cast();
    let lr = T::lit(cfg.lr_add);
    let sigma = cfg.noise_sigma;
    let mut shuffle = Rng::derive(cfg.seed, STREAM_ADD);
    model.trace.addition.clear();
    for epoch in 0..cfg.epochs_add {
        let epoch_noise = match (&mut noise, cfg.noise_resample) {
            (Some((mask, rng)), NoiseResample::PerEpoch) => Some(gaussian_sample(mask, sigma, rng)?),
            _ => None,
        };
        let mut epoch_loss = 0.0;
        for batch in batches(rep.rows(), cfg.batch_size, &mut shuffle) {
            let rb = rows(&rep, &batch);
            let input = match (&mut noise, &epoch_noise) {
                (Some(_), Some(e)) => rb.add(&rows(e, &batch))?,
                (Some((mask, rng)), None) => rb.add(&gaussian_sample(&rows(mask, &batch), sigma, rng)?)?,
                (None, _) => rb,
            };
            let yb = rows(&y, &batch);
            let acts = model.f.forward_trace(&input)?;
            let (loss, up) = squared_loss(&acts[acts.len() - 1], &yb);
            if !loss.is_finite() {
                return Err(diverged("addition", epoch));
            }
            epoch_loss += loss.as_f64() * batch.len() as f64;
            let grads = model.f.param_gradients(&acts, &up)?;
            model
                .f
                .optimizer_step(&grads, lr)
                .map_err(|e| with_epoch(e, "addition", epoch))?;
        }
        model.trace.addition.push(epoch_loss / rep.rows() as f64);
    }
    Ok(())
}

/// Number of representation dimensions whose mean `|h(Z)|` exceeds `tol`.
pub fn active_dimensions<T: Scalar>(mask: &Matrix<T>, tol: f64) -> usize {
    mask.map(|v| v.abs())
        .mean_rows()
        .data()
        .iter()
        .filter(|v| v.as_f64() > tol)
        .count()
}

/// The representation as the classifier weighs it: the input to `f`'s last
/// parameterized layer, with each column scaled by the norm of that column's
/// outgoing weights. Used for the cluster-ratio diagnostic.
pub fn classifier_view<T: Scalar>(f: &Network<T>, rep: &Matrix<T>) -> Result<Matrix<f64>> {
    let layers = f.layers();
    let last = layers
        .iter()
        .rposition(|l| l.spec.kind == LayerKind::Dense)
        .ok_or_else(|| Error::Spec("classifier has no dense layer".into()))?;
    let acts = f.forward_trace(rep)?;
    let input = &acts[last];
    let w = &layers[last].w;
    let col_norm: Vec<f64> = (0..w.rows())
        .map(|i| w.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let scale = Matrix::row_vector(col_norm);
    input.cast::<f64>().hadamard(&scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, ChannelSpec, GenSpec};

    fn toy_separable(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        while rows.len() < n {
            let a = rng.uniform() * 4.0 - 2.0;
            let b = rng.uniform() * 4.0 - 2.0;
            let margin = a + b;
            if margin.abs() < 0.3 {
                continue;
            }
            rows.push([a, b]);
            labels.push(f64::from(u8::from(margin > 0.0)));
        }
        let ids = (0..n).map(|i| i % 4).collect();
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), Matrix::column(labels), ids, 4, vec![]).unwrap()
    }

    fn small_cfg() -> SalConfig {
        SalConfig {
            epochs_base: 50,
            epochs_select: 50,
            epochs_add: 50,
            ..SalConfig::default()
        }
    }

    fn fixture() -> LabeledDataset {
        let spec = GenSpec {
            n_train_ids: 8,
            n_test_ids: 2,
            utt_per_id: 10,
            channels: vec![ChannelSpec::new("a", 2, 2, 1)],
            ..GenSpec::default()
        };
        generate(&spec).unwrap().0
    }

    #[test]
    fn separable_toy_is_learned() {
        let data = toy_separable(200, 1);
        let cfg = SalConfig {
            lr_base: 0.5,
            ..SalConfig::default()
        };
        let model: SalModel<f64> = pretrain_base(&data, &cfg).unwrap();
        let pred = predict(&model, &data.features).unwrap();
        let acc = crate::stats::accuracy(&pred, &data.label_bits()).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
        assert!(model.trace.base.first() > model.trace.base.last());
    }

    #[test]
    fn constant_labels_predict_one() {
        let mut data = toy_separable(50, 2);
        data.labels = Matrix::ones(50, 1);
        let model: SalModel<f64> = pretrain_base(&data, &small_cfg()).unwrap();
        assert!(predict(&model, &data.features).unwrap().iter().all(|&p| p == 1));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let data = fixture();
        let a: SalModel<f64> = pretrain_base(&data, &small_cfg()).unwrap();
        let b: SalModel<f64> = pretrain_base(&data, &small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let data = fixture();
        // a linear head has no sigmoid to saturate, so a huge step blows up
        let cfg = SalConfig {
            lr_base: 1e3,
            arch_f: Some(vec![LayerSpec::dense(nn::DEFAULT_REP_DIM, 1)]),
            ..small_cfg()
        };
        let err = pretrain_base::<f64>(&data, &cfg).err().expect("diverges");
        assert!(matches!(err, Error::Divergence { epoch: Some(_), .. }), "{err}");
    }

    #[test]
    fn phase_order_is_enforced() {
        let data = fixture();
        let cfg = small_cfg();
        let base: SalModel<f64> = pretrain_base(&data, &cfg).unwrap();
        let err = addition_phase(base.clone(), &data, &cfg, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        let sel = selection_phase(base, &data, &cfg).unwrap();
        assert!(matches!(selection_phase(sel.clone(), &data, &cfg), Err(Error::State(_))));
        let added = addition_phase(sel, &data, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(added.phase, Phase::Added);
    }

    #[test]
    fn identity_mismatch_is_shape_error() {
        let data = fixture();
        let cfg = small_cfg();
        let base: SalModel<f64> = pretrain_base(&data, &cfg).unwrap();
        let mut other = data.clone();
        other.m += 1;
        assert!(matches!(selection_phase(base, &other, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn phases_only_touch_their_own_parameters() {
        let data = fixture();
        let cfg = small_cfg();
        let base: SalModel<f64> = pretrain_base(&data, &cfg).unwrap();
        let sel = selection_phase(base.clone(), &data, &cfg).unwrap();
        assert_eq!(sel.g, base.g);
        assert_eq!(sel.f, base.f);
        assert_ne!(sel.h, base.h);
        let added = addition_phase(sel.clone(), &data, &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(added.g, sel.g);
        assert_eq!(added.h, sel.h);
        assert_ne!(added.f, sel.f);
    }

    #[test]
    fn constant_representation_is_recovered_without_penalty() {
        // one identity, g(X) = c per dimension: h's bias + weight absorb c
        let n = 20;
        let rep = Matrix::from_rows(&vec![[0.7, -1.2, 2.0]; n]).unwrap();
        let z = Matrix::<f64>::ones(n, 1);
        let mut h: Network<f64> = Network::init(&[LayerSpec::dense(1, 3)], &mut Rng::new(1)).unwrap();
        for _ in 0..500 {
            let g = selection_gradient(&h, &z, &rep, 0.0).unwrap();
            h.optimizer_step(&g, 0.1).unwrap();
        }
        let loss = selection_objective(&h, &z, &rep, 0.0).unwrap();
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn gaussian_sample_degenerate_cases() {
        let mut rng = Rng::new(0);
        let zero = Matrix::<f64>::zeros(3, 4);
        assert_eq!(gaussian_sample(&zero, 2.0, &mut rng).unwrap().max_abs(), 0.0);
        let mask = Matrix::<f64>::ones(3, 4);
        assert_eq!(gaussian_sample(&mask, 0.0, &mut rng).unwrap().max_abs(), 0.0);
        assert!(matches!(gaussian_sample(&mask, -1.0, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn gaussian_sample_std_follows_mask() {
        let n = 100_000;
        let mut mask = Matrix::<f64>::zeros(n, 3);
        for r in 0..n {
            mask.row_mut(r).copy_from_slice(&[0.5, -2.0, 1.0]);
        }
        let s = gaussian_sample(&mask, 1.5, &mut Rng::new(8)).unwrap();
        for (c, m) in [0.5f64, 2.0, 1.0].iter().enumerate() {
            let col: Vec<f64> = (0..n).map(|r| s.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((std - m * 1.5).abs() <= 0.03 * m * 1.5, "col {c}: {std}");
        }
    }

    #[test]
    fn predict_breaks_ties_upward_and_is_deterministic() {
        assert_eq!(threshold(&Matrix::column(vec![0.5, 0.4999999, 0.9])), vec![1, 0, 1]);
        let data = fixture();
        let model: SalModel<f64> = pretrain_base(&data, &small_cfg()).unwrap();
        assert_eq!(predict(&model, &data.features).unwrap(), predict(&model, &data.features).unwrap());
        assert!(predict(&model, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_mask_addition_equals_noise_free_retraining() {
        let data = fixture();
        let cfg = SalConfig {
            noise_sigma: 3.0,
            ..small_cfg()
        };
        let base: SalModel<f64> = pretrain_base(&data, &cfg).unwrap();
        let mut sel = selection_phase(base, &data, &cfg).unwrap();
        sel.zero_selector();
        let retrained = retrain_classifier(sel.clone(), &data, &cfg).unwrap();
        let added = addition_phase(sel, &data, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(added.f, retrained.f);
        assert_eq!(added.trace.addition, retrained.trace.addition);
    }

    #[test]
    fn zero_sigma_matches_shifted_base_loss() {
        let data = fixture();
        let cfg = SalConfig {
            noise_sigma: 0.0,
            batch_size: Some(16),
            noise_resample: NoiseResample::PerStep,
            ..small_cfg()
        };
        let base: SalModel<f64> = pretrain_base(&data, &cfg).unwrap();
        let sel = selection_phase(base, &data, &cfg).unwrap();
        let retrained = retrain_classifier(sel.clone(), &data, &cfg).unwrap();
        let added = addition_phase(sel, &data, &cfg, &mut Rng::new(9)).unwrap();
        for (a, b) in added.trace.addition.iter().zip(&retrained.trace.addition) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let data = fixture();
        let cfg = small_cfg();
        let model: SalModel<f64> = selection_phase(pretrain_base(&data, &cfg).unwrap(), &data, &cfg).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        assert!(json.contains("\"phase\":\"selected\""));
        let back: SalModel<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.g, model.g);
        assert_eq!(back.h, model.h);
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn f32_pipeline_runs() {
        let data = fixture();
        let cfg = small_cfg();
        let base: SalModel<f32> = pretrain_base(&data, &cfg).unwrap();
        let sel = selection_phase(base, &data, &cfg).unwrap();
        let added = addition_phase(sel, &data, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(predict(&added, &data.features).unwrap().len(), data.len());
    }

    #[test]
    fn config_validation() {
        let bad = SalConfig {
            lr_add: 0.0,
            ..SalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SalConfig {
            epochs_select: 0,
            ..SalConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&SalConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<SalConfig>(&json).unwrap(), SalConfig::default());
    }
}
