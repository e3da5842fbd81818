//! Pretext samples, the joint order/transform loss, SGD and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::dataio::{augment, sample_clip, AugmentPolicy, ClipParams, FrameBank};
use crate::error::{Error, Result};
use crate::geometry::{normalize, sample_transform, warp_clip, AffineParams, NormalizedParams, TransformSpace};
use crate::nn::log_softmax;
use crate::nn::{save, Network, NetworkVariant, ParameterSet, PretextViews, Scalar};
use crate::permspace::{apply_permutation, encode, OrderClassSpace, Permutation};

/// One clip and every view the pretext wirings consume.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    pub original: VideoClip,
    pub shuffled: VideoClip,
    pub transformed: VideoClip,
    /// Shuffled, then warped.
    pub corrupted: VideoClip,
    pub permutation: Permutation,
    pub order_class: usize,
    pub tau: AffineParams,
    pub tau_target: NormalizedParams,
}

impl PretextSample {
    pub fn views(&self) -> PretextViews<'_> {
        PretextViews {
            shuffled: &self.shuffled,
            original: &self.original,
            transformed: &self.transformed,
            corrupted: &self.corrupted,
        }
    }
}

/// Draws a uniform raw permutation and a transform, then builds all views.
pub fn make_sample<R: Rng + ?Sized>(
    clip: &VideoClip,
    space: &OrderClassSpace,
    tspace: &TransformSpace,
    rng: &mut R,
) -> Result<PretextSample> {
    let permutation = Permutation::random(clip.k(), rng)?;
    let tau = sample_transform(tspace, rng);
    make_sample_with(clip, space, tspace, permutation, tau)
}

/// Builds a sample from a given permutation and transform.
pub fn make_sample_with(
    clip: &VideoClip,
    space: &OrderClassSpace,
    tspace: &TransformSpace,
    permutation: Permutation,
    tau: AffineParams,
) -> Result<PretextSample> {
    if clip.k() != space.k() {
        return Err(Error::invalid(format!(
            "clip has {} frames, order space expects {}",
            clip.k(),
            space.k()
        )));
    }
    let order_class = encode(space, &permutation)?;
    let tau_target = normalize(&tau, tspace)?;
    let shuffled = apply_permutation(clip, &permutation)?;
    let transformed = warp_clip(clip, &tau)?;
    let corrupted = warp_clip(&shuffled, &tau)?;
    Ok(PretextSample {
        original: clip.clone(),
        shuffled,
        transformed,
        corrupted,
        permutation,
        order_class,
        tau,
        tau_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformNorm {
    /// Euclidean norm over the six normalized components.
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub order: f64,
    pub transform: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            order: 1.0,
            transform: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ord: f64,
    pub l_trans: f64,
    pub total: f64,
}

fn transform_distance(d: &[f64], norm: TransformNorm) -> f64 {
    match norm {
        TransformNorm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        TransformNorm::L1 => d.iter().map(|v| v.abs()).sum(),
    }
}

fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    -log_softmax(logits)[class]
}

/// Batch-mean cross-entropy and transform distance. Either part may be
/// empty for single-task variants, in which case it contributes 0.
pub fn loss(
    order_logits: &[Vec<f64>],
    order_class: &[usize],
    tau_hat: &[Vec<f64>],
    tau_target: &[NormalizedParams],
    weights: &LossWeights,
    norm: TransformNorm,
) -> Result<LossBreakdown> {
    if order_logits.len() != order_class.len() || tau_hat.len() != tau_target.len() {
        return Err(Error::invalid("prediction and target batch sizes differ"));
    }
    let mut l_ord = 0.0;
    if !order_logits.is_empty() {
        let n = order_logits[0].len();
        for (z, &c) in order_logits.iter().zip(order_class) {
            if z.len() != n || c >= n {
                return Err(Error::invalid(format!(
                    "order logits of length {} with class {c}; expected {n} logits",
                    z.len()
                )));
            }
            l_ord += cross_entropy(z, c);
        }
        l_ord /= order_logits.len() as f64;
    }
    let mut l_trans = 0.0;
    if !tau_hat.is_empty() {
        for (t, target) in tau_hat.iter().zip(tau_target) {
            if t.len() != 6 {
                return Err(Error::invalid(format!("tau_hat has {} components, expected 6", t.len())));
            }
            let d: Vec<f64> = t.iter().zip(target.as_array()).map(|(a, b)| a - b).collect();
            l_trans += transform_distance(&d, norm);
        }
        l_trans /= tau_hat.len() as f64;
    }
    Ok(LossBreakdown {
        l_ord,
        l_trans,
        total: weights.order * l_ord + weights.transform * l_trans,
    })
}

/// Per-sample pretext outcome.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleStats {
    pub l_ord: f64,
    pub l_trans: f64,
    pub order_correct: bool,
    /// Mean absolute error over the six normalized components.
    pub tau_mae: f64,
    pub tau_abs_err: [f64; 6],
    pub has_order: bool,
    pub has_transform: bool,
}

/// Forward pass, loss and (optionally) gradient accumulation for one sample.
/// Gradients are scaled by `scale` (typically `1 / batch`).
pub fn sample_loss_grad<T: Scalar>(
    net: &Network<T>,
    sample: &PretextSample,
    weights: &LossWeights,
    norm: TransformNorm,
    grads: Option<&mut ParameterSet<T>>,
    scale: f64,
) -> Result<SampleStats> {
    let (out, cache) = net.pretext_forward(&sample.views())?;
    let mut stats = SampleStats::default();
    let mut d_order = None;
    if let Some(z) = &out.order_logits {
        let z: Vec<f64> = z.iter().map(|v| v.as_f64()).collect();
        let logp = log_softmax(&z);
        stats.has_order = true;
        stats.l_ord = -logp[sample.order_class];
        let argmax = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        stats.order_correct = argmax == sample.order_class;
        let g = scale * weights.order;
        d_order = Some(
            logp.iter()
                .enumerate()
                .map(|(i, lp)| T::of(g * (lp.exp() - if i == sample.order_class { 1.0 } else { 0.0 })))
                .collect::<Vec<T>>(),
        );
    }
    let mut d_tau = None;
    if let Some(t) = &out.tau_hat {
        let d: Vec<f64> = t
            .iter()
            .zip(sample.tau_target.as_array())
            .map(|(a, b)| a.as_f64() - b)
            .collect();
        stats.has_transform = true;
        stats.l_trans = transform_distance(&d, norm);
        stats.tau_mae = d.iter().map(|v| v.abs()).sum::<f64>() / 6.0;
        for (e, v) in stats.tau_abs_err.iter_mut().zip(&d) {
            *e = v.abs();
        }
        let g = scale * weights.transform;
        d_tau = Some(match norm {
            TransformNorm::L2 if stats.l_trans > 0.0 => d.iter().map(|v| T::of(g * v / stats.l_trans)).collect(),
            TransformNorm::L2 => vec![T::zero(); 6],
            TransformNorm::L1 => d.iter().map(|v| T::of(g * if *v == 0.0 { 0.0 } else { v.signum() })).collect::<Vec<T>>(),
        });
    }
    if let Some(grads) = grads {
        net.pretext_backward(&cache, d_order.as_deref(), d_tau.as_deref(), grads);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: ParameterSet<T>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

/// `g' = g + wd·w; v = m·v + g'; w -= lr·v`. Refuses non-finite gradients.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut SgdState<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    sgd_step_where(params, grads, state, cfg, |_| true)
}

/// [`sgd_step`] restricted to the tensors for which `trainable` holds; the
/// others keep their values and velocities.
pub fn sgd_step_where<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut SgdState<T>,
    cfg: &SgdConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if params.names() != grads.names() || params.names() != state.velocity.names() {
        return Err(Error::invalid("parameter, gradient and velocity layouts differ"));
    }
    for (name, g) in grads.iter() {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged(format!("non-finite gradient in {name}")));
        }
    }
    let (lr, m, wd) = (T::of(cfg.learning_rate), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for slot in 0..params.len() {
        if !trainable(&params.names()[slot]) {
            continue;
        }
        let g = &grads.tensor(slot).data;
        let v = &mut state.velocity.tensor_mut(slot).data;
        let w = &mut params.tensor_mut(slot).data;
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = m * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

fn default_seed() -> u64 {
    17
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub variant: NetworkVariant,
    pub loss_weights: LossWeights,
    pub transform_norm: TransformNorm,
    /// Freshly sampled pretext clips per epoch.
    pub clips_per_epoch: usize,
    /// Held-out clips evaluated after every epoch.
    pub eval_clips: usize,
    pub augment: AugmentPolicy,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 8,
            seed: default_seed(),
            variant: NetworkVariant::Siamese,
            loss_weights: LossWeights::default(),
            transform_norm: TransformNorm::L2,
            clips_per_epoch: 4096,
            eval_clips: 256,
            augment: AugmentPolicy::all(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("clips_per_epoch", self.clips_per_epoch as f64),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("pretrain.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("pretrain.{name} must be non-negative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("pretrain.momentum must be below 1, got {}", self.momentum)));
        }
        if !self.variant.is_pretext() {
            return Err(Error::Config(format!("pretrain.variant {} is not a pretext variant", self.variant)));
        }
        let w = self.loss_weights;
        if !(w.order.is_finite() && w.order >= 0.0 && w.transform.is_finite() && w.transform >= 0.0) {
            return Err(Error::Config("pretrain.loss_weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Data a pretext run draws from.
#[derive(Debug, Clone, Copy)]
pub struct PretextData<'a> {
    pub bank: &'a FrameBank,
    pub train: &'a [usize],
    pub test: &'a [usize],
    pub clip: &'a ClipParams,
    pub transform_space: &'a TransformSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ord: f64,
    pub loss_trans: f64,
    pub ord_acc: f64,
    pub tau_mae: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_ord,loss_trans,ord_acc,tau_mae";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.loss_total, self.loss_ord, self.loss_trans, self.ord_acc, self.tau_mae
        )
    }
}

/// Held-out pretext evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PretextEval {
    pub clips: usize,
    pub loss: LossBreakdown,
    pub order_accuracy: Option<f64>,
    pub tau_mae: Option<f64>,
    /// Per-component MAE in `[tx, ty, log_sx, log_sy, rot, shear]` order.
    pub tau_mae_components: Option<[f64; 6]>,
    /// MAE of predicting the held-out mean target for every clip.
    pub mean_predictor_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub eval: PretextEval,
    pub best_epoch: usize,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub(crate) fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

/// Deterministic pretext sample `index` from the given video set.
pub fn draw_sample(
    data: &PretextData<'_>,
    videos: &[usize],
    space: &OrderClassSpace,
    policy: &AugmentPolicy,
    seed: u64,
    stream: u64,
    index: u64,
) -> Result<PretextSample> {
    let mut rng = sample_rng(seed, stream, index);
    let clip = sample_clip(data.bank, videos, data.clip, &mut rng)?;
    let clip = augment(&clip, policy, &mut rng);
    make_sample(&clip, space, data.transform_space, &mut rng)
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Draws the fixed held-out evaluation set.
pub fn eval_samples(data: &PretextData<'_>, space: &OrderClassSpace, count: usize, seed: u64) -> Result<Vec<PretextSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| draw_sample(data, data.test, space, &AugmentPolicy::none(), seed, EVAL_STREAM, i))
        .collect()
}

/// Evaluates a network on pretext samples without touching its weights.
pub fn evaluate_pretext(
    net: &Network<f32>,
    samples: &[PretextSample],
    weights: &LossWeights,
    norm: TransformNorm,
) -> Result<PretextEval> {
    let stats: Vec<SampleStats> = samples
        .par_iter()
        .map(|s| sample_loss_grad(net, s, weights, norm, None, 1.0))
        .collect::<Result<_>>()?;
    let n = stats.len().max(1) as f64;
    let l_ord = stats.iter().map(|s| s.l_ord).sum::<f64>() / n;
    let l_trans = stats.iter().map(|s| s.l_trans).sum::<f64>() / n;
    let has_order = stats.first().is_some_and(|s| s.has_order);
    let has_transform = stats.first().is_some_and(|s| s.has_transform);
    let mean_predictor_mae = has_transform.then(|| {
        let mut mean = [0.0; 6];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.tau_target.as_array()) {
                *m += v / n;
            }
        }
        samples
            .iter()
            .map(|s| {
                s.tau_target
                    .as_array()
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| (v - m).abs())
                    .sum::<f64>()
                    / 6.0
            })
            .sum::<f64>()
            / n
    });
    Ok(PretextEval {
        clips: stats.len(),
        loss: LossBreakdown {
            l_ord,
            l_trans,
            total: weights.order * l_ord + weights.transform * l_trans,
        },
        order_accuracy: has_order.then(|| stats.iter().filter(|s| s.order_correct).count() as f64 / n),
        tau_mae: has_transform.then(|| stats.iter().map(|s| s.tau_mae).sum::<f64>() / n),
        tau_mae_components: has_transform.then(|| {
            let mut c = [0.0; 6];
            for s in &stats {
                for (a, b) in c.iter_mut().zip(&s.tau_abs_err) {
                    *a += b / n;
                }
            }
            c
        }),
        mean_predictor_mae,
    })
}

/// Sums per-sample gradients in sample order so results do not depend on
/// the worker count.
pub fn reduce_in_order<T: Scalar>(parts: Vec<ParameterSet<T>>, into: &mut ParameterSet<T>) {
    into.fill_zero();
    for p in &parts {
        into.add_scaled(T::one(), p);
    }
}

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParameterSet<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for row in log {
        let _ = writeln!(text, "{}", row.csv_row());
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs SGD over freshly sampled pretext batches. With `out_dir`, writes
/// `train_log.csv`, `eval.json` and the `final` and `best` (lowest held-out
/// loss) checkpoints.
pub fn train(
    data: &PretextData<'_>,
    net: &mut Network<f32>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    config_hash: Option<&str>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net.variant() != cfg.variant {
        return Err(Error::invalid(format!(
            "network variant {} does not match configured {}",
            net.variant(),
            cfg.variant
        )));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidDataset("no training videos".into()));
    }
    let space = crate::permspace::enumerate_classes(data.clip.k)?;
    let eval_set = if data.test.is_empty() || cfg.eval_clips == 0 {
        Vec::new()
    } else {
        eval_samples(data, &space, cfg.eval_clips, cfg.seed)?
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sgd = cfg.sgd();
    let mut state = SgdState::new(net.params());
    let mut grads = net.params().zeros_like();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut last_eval = PretextEval::default();
    let mut index = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut sums = (0.0, 0.0, 0usize, 0.0, 0usize);
        let mut remaining = cfg.clips_per_epoch;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let start = index;
            index += b as u64;
            let scale = 1.0 / b as f64;
            let current: &Network<f32> = net;
            let parts: Vec<(SampleStats, ParameterSet<f32>)> = (start..start + b as u64)
                .into_par_iter()
                .map(|i| {
                    let sample = draw_sample(data, data.train, &space, &cfg.augment, cfg.seed, TRAIN_STREAM, i)?;
                    let mut g = current.params().zeros_like();
                    let s = sample_loss_grad(current, &sample, &cfg.loss_weights, cfg.transform_norm, Some(&mut g), scale)?;
                    Ok((s, g))
                })
                .collect::<Result<_>>()?;
            let (stats, parts): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
            reduce_in_order(parts, &mut grads);
            for s in &stats {
                sums.0 += s.l_ord;
                sums.1 += s.l_trans;
                sums.2 += s.order_correct as usize;
                sums.3 += s.tau_mae;
                sums.4 += 1;
            }
            if stats.iter().any(|s| !(s.l_ord.is_finite() && s.l_trans.is_finite())) {
                return Err(Error::TrainingDiverged(format!("non-finite loss in epoch {epoch}")));
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max_norm);
            }
            sgd_step(net.params_mut(), &grads, &mut state, &sgd)?;
        }
        let n = sums.4 as f64;
        let (l_ord, l_trans) = (sums.0 / n, sums.1 / n);
        log.push(EpochLog {
            epoch,
            loss_total: cfg.loss_weights.order * l_ord + cfg.loss_weights.transform * l_trans,
            loss_ord: l_ord,
            loss_trans: l_trans,
            ord_acc: sums.2 as f64 / n,
            tau_mae: sums.3 / n,
        });
        if !eval_set.is_empty() {
            last_eval = evaluate_pretext(net, &eval_set, &cfg.loss_weights, cfg.transform_norm)?;
        }
        let score = if eval_set.is_empty() {
            log.last().map(|l| l.loss_total).unwrap_or(f64::INFINITY)
        } else {
            last_eval.loss.total
        };
        if best.map_or(true, |(s, _)| score < s) {
            best = Some((score, epoch));
            if let Some(dir) = out_dir {
                save(net, &dir.join("best"), config_hash)?;
            }
        }
        if let Some(dir) = out_dir {
            write_log(&dir.join("train_log.csv"), &log)?;
        }
    }
    let mut outcome = TrainOutcome {
        log,
        eval: last_eval,
        best_epoch: best.map(|b| b.1).unwrap_or(cfg.epochs),
        final_checkpoint: None,
        best_checkpoint: None,
    };
    if let Some(dir) = out_dir {
        let final_dir = dir.join("final");
        save(net, &final_dir, config_hash)?;
        let eval_path = dir.join("eval.json");
        let text = serde_json::to_string_pretty(&outcome.eval).map_err(|e| Error::json(&eval_path, e))?;
        fs::write(&eval_path, text + "\n").map_err(|e| Error::io(&eval_path, e))?;
        outcome.final_checkpoint = Some(final_dir);
        outcome.best_checkpoint = Some(dir.join("best"));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permspace::enumerate_classes;

    #[test]
    fn sgd_golden_step() {
        let mut p = ParameterSet::<f64>::new();
        p.push("w", crate::nn::Tensor::filled(&[1], 1.0));
        let mut g = p.zeros_like();
        g.tensor_mut(0).data[0] = 0.5;
        let mut state = SgdState::new(&p);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        };
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert!((state.velocity.tensor(0).data[0] - 0.5001).abs() < 1e-12);
        assert!((p.tensor(0).data[0] - 0.94999).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = ParameterSet::<f64>::new();
        p.push("w", crate::nn::Tensor::filled(&[1], 0.0));
        let mut g = p.zeros_like();
        g.tensor_mut(0).data[0] = 1.0;
        let mut state = SgdState::new(&p);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert!((p.tensor(0).data[0] + 0.1).abs() < 1e-12);
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert!((p.tensor(0).data[0] + 0.29).abs() < 1e-12);
        g.tensor_mut(0).data[0] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut p, &g, &mut state, &cfg),
            Err(Error::TrainingDiverged(_))
        ));
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut p = ParameterSet::<f32>::new();
        p.push("w", crate::nn::Tensor::filled(&[3], 0.7));
        let before = p.clone();
        let g = p.zeros_like();
        let mut state = SgdState::new(&p);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn loss_values() {
        let w = LossWeights::default();
        let b = loss(&[vec![0.0; 12]], &[5], &[vec![0.3, 0.4, 0.0, 0.0, 0.0, 0.0]], &[NormalizedParams::default()], &w, TransformNorm::L2).unwrap();
        assert!((b.l_ord - 12f64.ln()).abs() < 1e-12);
        assert!((b.l_trans - 0.5).abs() < 1e-12);
        assert_eq!(b.total, b.l_ord + b.l_trans);
        let l1 = loss(&[], &[], &[vec![0.3, -0.4, 0.0, 0.0, 0.0, 0.0]], &[NormalizedParams::default()], &w, TransformNorm::L1).unwrap();
        assert!((l1.l_trans - 0.7).abs() < 1e-12);
        assert!(loss(&[vec![0.0; 12]], &[12], &[], &[], &w, TransformNorm::L2).is_err());
        assert!(loss(&[], &[], &[vec![0.0; 5]], &[NormalizedParams::default()], &w, TransformNorm::L2).is_err());
    }

    #[test]
    fn forced_identity_sample() {
        let space = enumerate_classes(4).unwrap();
        let data: Vec<f32> = (0..4 * 36).map(|i| (i % 17) as f32 / 17.0).collect();
        let clip = VideoClip::new(data, 4, 6, 6).unwrap();
        let s = make_sample_with(
            &clip,
            &space,
            &TransformSpace::default(),
            Permutation::identity(4).unwrap(),
            AffineParams::identity(),
        )
        .unwrap();
        assert_eq!(s.shuffled, clip);
        assert_eq!(s.transformed, clip);
        assert_eq!(s.corrupted, clip);
        assert_eq!(s.order_class, 0);
        assert_eq!(s.tau_target, NormalizedParams::default());
    }

    #[test]
    fn config_rejects_zero_epochs() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
