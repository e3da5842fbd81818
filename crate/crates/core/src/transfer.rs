//! Fine-tuning on downstream tasks: plane classification and saliency
//! prediction from single frames, under a per-class label budget.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::dataio::{crop_frame, CentreCrop, ClipParams, FrameBank};
use crate::error::{Error, Result};
use crate::evalmetrics::{classification_report, ClassificationReport, ConfusionMatrix, SaliencyMetrics, SaliencyPair};
use crate::nn::{
    load_trunk_only, log_softmax, save, BackboneSpec, DownstreamOutput, Network, NetworkSpec,
    NetworkVariant, ParameterSet,
};
use crate::pretrain::{clip_grad_norm, reduce_in_order, sample_rng, sgd_step_where, SgdConfig, SgdState};

const LABEL_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Planes,
    Saliency,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Planes => "planes",
            Task::Saliency => "saliency",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planes" => Ok(Task::Planes),
            "saliency" => Ok(Task::Saliency),
            other => Err(Error::invalid(format!("unknown task '{other}' (planes|saliency)"))),
        }
    }
}

/// Where the trunk weights come from. Serialized as `"random"` or a path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Init {
    Random,
    Checkpoint(PathBuf),
}

impl TryFrom<String> for Init {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        match s.as_str() {
            "" => Err(Error::invalid("empty init")),
            "random" => Ok(Init::Random),
            _ => Ok(Init::Checkpoint(PathBuf::from(s))),
        }
    }
}

impl From<Init> for String {
    fn from(i: Init) -> String {
        i.to_string()
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Init::Random => f.write_str("random"),
            Init::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: Task,
    pub init: Init,
    /// Labeled frames drawn per class from the training videos.
    pub budget_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_trunk: bool,
    /// Evenly spaced frames taken from every held-out video.
    pub eval_frames_per_video: usize,
    /// Gaussian width of the fixation density, as a fraction of frame width.
    pub saliency_sigma: f64,
    pub grad_clip: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: Task::Planes,
            init: Init::Random,
            budget_per_class: 50,
            epochs: 5,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 17,
            freeze_trunk: false,
            eval_frames_per_video: 16,
            saliency_sigma: 0.05,
            grad_clip: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.budget_per_class == 0 {
            return bad("budget_per_class must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_frames_per_video == 0 {
            return bad("batch_size and eval_frames_per_video must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("saliency_sigma", self.saliency_sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Ground-truth density for one frame: unit Gaussians at the fixations,
/// normalized to sum 1, plus the binary fixation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTarget {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
    pub density: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SaliencyTarget {
    pub fn new(points: Vec<[f64; 2]>, width: usize, height: usize, sigma: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidDataset("frame has no fixations".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid("density sigma must be positive"));
        }
        let mut density = vec![0.0; width * height];
        let mut mask = vec![false; width * height];
        let inv = 1.0 / (2.0 * sigma * sigma);
        for p in &points {
            for y in 0..height {
                let dy = y as f64 - p[1];
                for x in 0..width {
                    let dx = x as f64 - p[0];
                    density[y * width + x] += (-(dx * dx + dy * dy) * inv).exp();
                }
            }
            let px = p[0].round().clamp(0.0, (width - 1) as f64) as usize;
            let py = p[1].round().clamp(0.0, (height - 1) as f64) as usize;
            mask[py * width + px] = true;
        }
        let total: f64 = density.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDataset("fixations lie too far outside the frame".into()));
        }
        density.iter_mut().for_each(|v| *v /= total);
        Ok(Self {
            width,
            height,
            points,
            density,
            mask,
        })
    }
}

/// Videos available to a fine-tuning run.
#[derive(Clone, Copy)]
pub struct FinetuneData<'a> {
    pub bank: &'a FrameBank,
    pub train: &'a [usize],
    pub test: &'a [usize],
    pub clip: &'a ClipParams,
}

/// One labeled frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video: usize,
    pub frame: usize,
}

fn num_classes(data: &FinetuneData<'_>) -> Result<usize> {
    let mut max = None;
    for &i in data.train.iter().chain(data.test) {
        let v = &data.bank.videos[i];
        let c = v
            .plane_class
            .ok_or_else(|| Error::InvalidDataset(format!("{} has no plane_class label", v.id)))?;
        max = max.max(Some(c));
    }
    max.map(|m| m as usize + 1)
        .ok_or_else(|| Error::InvalidDataset("no videos to fine-tune on".into()))
}

/// Draws `budget` frames per class from the training videos of that class.
pub fn labeled_frames(data: &FinetuneData<'_>, budget: usize, seed: u64) -> Result<Vec<FrameRef>> {
    let classes = num_classes(data)?;
    let mut out = Vec::with_capacity(classes * budget);
    for c in 0..classes {
        let videos: Vec<usize> = data
            .train
            .iter()
            .copied()
            .filter(|&i| data.bank.videos[i].plane_class == Some(c as u32))
            .collect();
        if videos.is_empty() {
            return Err(Error::InvalidDataset(format!("class {c} has no training videos")));
        }
        let mut rng = sample_rng(seed, LABEL_STREAM, c as u64);
        for _ in 0..budget {
            let video = videos[rng.gen_range(0..videos.len())];
            let frame = rng.gen_range(0..data.bank.videos[video].num_frames);
            out.push(FrameRef { video, frame });
        }
    }
    Ok(out)
}

/// Evenly spaced frames from every held-out video.
pub fn eval_frames(data: &FinetuneData<'_>, per_video: usize) -> Vec<FrameRef> {
    let mut out = Vec::new();
    for &video in data.test {
        let n = data.bank.videos[video].num_frames;
        let count = per_video.min(n);
        for j in 0..count {
            out.push(FrameRef {
                video,
                frame: (2 * j + 1) * n / (2 * count),
            });
        }
    }
    out
}

fn frame_input(data: &FinetuneData<'_>, f: FrameRef) -> Result<VideoClip> {
    let n = data.clip.input_size;
    let video = &data.bank.videos[f.video];
    let pixels = crop_frame(video, f.frame, data.clip);
    Ok(VideoClip::replicate_frame(&pixels, data.clip.k, n, n)?.with_source(video.id.clone(), f.frame))
}

/// Density target for a frame, in network input coordinates.
pub fn saliency_target(data: &FinetuneData<'_>, f: FrameRef, sigma_fraction: f64) -> Result<SaliencyTarget> {
    let video = &data.bank.videos[f.video];
    let fixations = video
        .fixations
        .as_ref()
        .ok_or_else(|| Error::InvalidDataset(format!("{} has no fixations", video.id)))?;
    let points = fixations
        .get(f.frame)
        .ok_or_else(|| Error::InvalidDataset(format!("{} frame {} has no fixation list", video.id, f.frame)))?;
    let crop = CentreCrop::new(video.width, video.height, data.clip.crop_fraction);
    let n = data.clip.input_size;
    let mapped = points
        .iter()
        .map(|p| {
            let (x, y) = crop.map_point(p[0], p[1], n);
            [x, y]
        })
        .collect();
    SaliencyTarget::new(mapped, n, n, sigma_fraction * n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskMetrics {
    Planes(ClassificationReport),
    Saliency(SaliencyMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub init: String,
    pub seed: u64,
    pub budget: usize,
    pub metrics: TaskMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn macro_f1(&self) -> Option<f64> {
        match &self.metrics {
            TaskMetrics::Planes(r) => Some(r.macro_avg.f1),
            TaskMetrics::Saliency(_) => None,
        }
    }

    pub fn saliency(&self) -> Option<&SaliencyMetrics> {
        match &self.metrics {
            TaskMetrics::Saliency(m) => Some(m),
            TaskMetrics::Planes(_) => None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub struct FinetuneOutcome {
    pub report: MetricsReport,
    pub net: Network<f32>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Builds the downstream network on `backbone`: fresh, or with the trunk of
/// the configured checkpoint, which must have been trained on the same
/// backbone.
pub fn build_downstream(cfg: &FinetuneConfig, backbone: &BackboneSpec, variant: NetworkVariant) -> Result<Network<f32>> {
    let spec = NetworkSpec {
        backbone: backbone.clone(),
        variant,
    };
    match &cfg.init {
        Init::Random => Network::build(&spec, cfg.seed),
        Init::Checkpoint(dir) => load_trunk_only(dir, &spec, cfg.seed),
    }
}

fn task_variant(cfg: &FinetuneConfig, data: &FinetuneData<'_>) -> Result<NetworkVariant> {
    Ok(match cfg.task {
        Task::Planes => NetworkVariant::Planes {
            classes: num_classes(data)?,
        },
        Task::Saliency => NetworkVariant::Saliency,
    })
}

/// Loss and logit gradient for one example.
fn example_loss(
    net: &Network<f32>,
    data: &FinetuneData<'_>,
    cfg: &FinetuneConfig,
    f: FrameRef,
    grads: Option<(&mut ParameterSet<f32>, f32)>,
) -> Result<f64> {
    let clip = frame_input(data, f)?;
    let (out, cache) = net.downstream_forward(&clip)?;
    let (loss, d): (f64, Vec<f32>) = match out {
        DownstreamOutput::Plane { logits } => {
            let class = data.bank.videos[f.video].plane_class.expect("checked by num_classes") as usize;
            let logp = log_softmax(&logits);
            let d = logp
                .iter()
                .enumerate()
                .map(|(i, l)| l.exp() - (i == class) as u8 as f32)
                .collect();
            (-logp[class] as f64, d)
        }
        DownstreamOutput::Saliency { logits, map } => {
            let target = saliency_target(data, f, cfg.saliency_sigma)?;
            let logp = log_softmax(&logits);
            let loss = target
                .density
                .iter()
                .zip(&logp)
                .filter(|(g, _)| **g > 0.0)
                .map(|(g, lp)| g * (g.ln() - *lp as f64))
                .sum();
            let d = map.iter().zip(&target.density).map(|(p, g)| p - *g as f32).collect();
            (loss, d)
        }
    };
    if let Some((g, scale)) = grads {
        let d: Vec<f32> = d.into_iter().map(|v| v * scale).collect();
        net.downstream_backward(&cache, &d, g, !cfg.freeze_trunk);
    }
    Ok(loss)
}

/// Input frame, normalized prediction and target for one held-out frame,
/// all `input_size` squared and row-major.
pub struct SaliencyPanel {
    pub frame: FrameRef,
    pub input: Vec<f32>,
    pub predicted: Vec<f64>,
    pub target: SaliencyTarget,
}

pub fn saliency_panel(net: &Network<f32>, data: &FinetuneData<'_>, f: FrameRef, sigma: f64) -> Result<SaliencyPanel> {
    let clip = frame_input(data, f)?;
    let DownstreamOutput::Saliency { map, .. } = net.forward_downstream(&clip)? else {
        return Err(Error::invalid(format!("{} is not a saliency network", net.variant())));
    };
    let total: f64 = map.iter().map(|&v| v as f64).sum();
    Ok(SaliencyPanel {
        frame: f,
        input: clip.frame(0).to_vec(),
        predicted: map.iter().map(|&v| v as f64 / total).collect(),
        target: saliency_target(data, f, sigma)?,
    })
}

/// Evaluates `net` on the held-out frames.
pub fn evaluate(net: &Network<f32>, data: &FinetuneData<'_>, cfg: &FinetuneConfig) -> Result<MetricsReport> {
    let frames = eval_frames(data, cfg.eval_frames_per_video);
    if frames.is_empty() {
        return Err(Error::InvalidDataset("no held-out frames to evaluate".into()));
    }
    let (metrics, confusion) = match net.variant() {
        NetworkVariant::Planes { classes } => {
            let preds: Vec<(usize, usize)> = frames
                .par_iter()
                .map(|&f| {
                    let DownstreamOutput::Plane { logits } = net.forward_downstream(&frame_input(data, f)?)? else {
                        unreachable!("planes network")
                    };
                    let pred = logits
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0;
                    let truth = data.bank.videos[f.video].plane_class.expect("labeled") as usize;
                    Ok((truth, pred))
                })
                .collect::<Result<_>>()?;
            let mut cm = ConfusionMatrix::with_classes(classes);
            for (t, p) in preds {
                cm.record(t, p)?;
            }
            (TaskMetrics::Planes(classification_report(&cm)?), Some(cm))
        }
        NetworkVariant::Saliency => {
            let per_frame: Vec<SaliencyMetrics> = frames
                .par_iter()
                .map(|&f| {
                    let DownstreamOutput::Saliency { map, .. } = net.forward_downstream(&frame_input(data, f)?)? else {
                        unreachable!("saliency network")
                    };
                    let total: f64 = map.iter().map(|&v| v as f64).sum();
                    let pred: Vec<f64> = map.iter().map(|&v| v as f64 / total).collect();
                    let target = saliency_target(data, f, cfg.saliency_sigma)?;
                    SaliencyMetrics::evaluate(&SaliencyPair::new(&pred, &target.density, &target.mask)?)
                })
                .collect::<Result<_>>()?;
            let mean = SaliencyMetrics::mean(&per_frame).expect("non-empty");
            (TaskMetrics::Saliency(mean), None)
        }
        other => return Err(Error::invalid(format!("{other} is not a downstream network"))),
    };
    Ok(MetricsReport {
        task: cfg.task,
        init: cfg.init.to_string(),
        seed: cfg.seed,
        budget: cfg.budget_per_class,
        metrics,
        confusion,
    })
}

/// Trains a downstream head (and the trunk unless frozen) on the labeled
/// budget and evaluates on the held-out videos. With `out_dir`, writes
/// `finetune_log.csv`, `metrics.json` and the `final` checkpoint.
pub fn finetune(
    data: &FinetuneData<'_>,
    cfg: &FinetuneConfig,
    backbone: &BackboneSpec,
    out_dir: Option<&Path>,
    config_hash: Option<&str>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    data.clip.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::InvalidDataset("fine-tuning needs both training and held-out videos".into()));
    }
    let variant = task_variant(cfg, data)?;
    let mut net = build_downstream(cfg, backbone, variant)?;
    let b = &net.spec().backbone;
    if b.input_channels != data.clip.k || b.input_size != data.clip.input_size {
        return Err(Error::IncompatibleCheckpoint(format!(
            "trunk expects {} channels at {}px, clips give {} at {}px",
            b.input_channels, b.input_size, data.clip.k, data.clip.input_size
        )));
    }
    let mut examples = labeled_frames(data, cfg.budget_per_class, cfg.seed)?;
    if cfg.task == Task::Saliency {
        // fail early on unusable labels rather than mid-epoch
        for &f in &examples {
            saliency_target(data, f, cfg.saliency_sigma)?;
        }
    }
    let sgd = cfg.sgd();
    let mut state = SgdState::new(net.params());
    let mut grads = net.params().zeros_like();
    let freeze = cfg.freeze_trunk;
    let trainable = |name: &str| !(freeze && name.starts_with("trunk."));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        examples.shuffle(&mut sample_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let mut total = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let current = &net;
            let parts: Vec<(f64, ParameterSet<f32>)> = batch
                .par_iter()
                .map(|&f| {
                    let mut g = current.params().zeros_like();
                    let l = example_loss(current, data, cfg, f, Some((&mut g, scale)))?;
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            let (batch_losses, parts): (Vec<f64>, Vec<_>) = parts.into_iter().unzip();
            if batch_losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::TrainingDiverged(format!("non-finite loss in epoch {}", epoch + 1)));
            }
            total += batch_losses.iter().sum::<f64>();
            reduce_in_order(parts, &mut grads);
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max_norm);
            }
            sgd_step_where(net.params_mut(), &grads, &mut state, &sgd, trainable)?;
        }
        losses.push(total / examples.len() as f64);
    }
    let report = evaluate(&net, data, cfg)?;
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut log = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(log, "{},{l:.6}", i + 1);
        }
        let path = dir.join("finetune_log.csv");
        fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
        report.write(&dir.join("metrics.json"))?;
        let ckpt = dir.join("final");
        save(&net, &ckpt, config_hash)?;
        checkpoint = Some(ckpt);
    }
    Ok(FinetuneOutcome {
        report,
        net,
        losses,
        checkpoint,
    })
}

pub fn finetune_planes(
    data: &FinetuneData<'_>,
    cfg: &FinetuneConfig,
    backbone: &BackboneSpec,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    if cfg.task != Task::Planes {
        return Err(Error::invalid("finetune_planes needs task = planes"));
    }
    finetune(data, cfg, backbone, out_dir, None)
}

pub fn finetune_saliency(
    data: &FinetuneData<'_>,
    cfg: &FinetuneConfig,
    backbone: &BackboneSpec,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    if cfg.task != Task::Saliency {
        return Err(Error::invalid("finetune_saliency needs task = saliency"));
    }
    finetune(data, cfg, backbone, out_dir, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_density_is_normalized() {
        let t = SaliencyTarget::new(vec![[3.0, 4.0], [10.2, 1.7]], 16, 12, 1.5).unwrap();
        assert!((t.density.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(t.mask[4 * 16 + 3] && t.mask[2 * 16 + 10]);
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), 2);
        let peak = t.density.iter().cloned().fold(0.0, f64::max);
        assert_eq!(t.density[4 * 16 + 3], peak);
        assert!(SaliencyTarget::new(vec![], 4, 4, 1.0).is_err());
    }

    #[test]
    fn init_round_trips_through_json() {
        for init in [Init::Random, Init::Checkpoint("runs/a/final".into())] {
            let s = serde_json::to_string(&init).unwrap();
            assert_eq!(serde_json::from_str::<Init>(&s).unwrap(), init);
        }
        assert_eq!(serde_json::to_string(&Init::Random).unwrap(), "\"random\"");
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        let cfg = FinetuneConfig {
            budget_per_class: 0,
            ..FinetuneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
