//! Orchestration shared by the command-line tool and the end-to-end
//! tests: loading a store, pretraining one variant, fine-tuning one arm and
//! the four-arm ablation table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{load_store, split_videos, ClipParams, FrameBank, Split, VideoStore};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, NetworkVariant};
use crate::pretrain::{train, PretextData, TrainConfig, TrainOutcome};
use crate::transfer::{finetune, FinetuneConfig, FinetuneData, FinetuneOutcome, Init, MetricsReport, Task};

/// A loaded store with its train/test split.
pub struct Dataset {
    pub store: VideoStore,
    pub bank: FrameBank,
    pub split: Split,
    pub clip: ClipParams,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let store = load_store(&cfg.data.root)?;
        let bank = FrameBank::load(&store)?;
        if bank.is_empty() {
            return Err(Error::InvalidDataset(format!("{} holds no videos", cfg.data.root.display())));
        }
        let split = split_videos(&bank, cfg.data.test_fraction)?;
        Ok(Self {
            store,
            bank,
            split,
            clip: cfg.data.clip_params(),
        })
    }

    pub fn finetune_data(&self) -> FinetuneData<'_> {
        FinetuneData {
            bank: &self.bank,
            train: &self.split.train,
            test: &self.split.test,
            clip: &self.clip,
        }
    }
}

/// Pretrains `variant` from `seed` and writes logs and checkpoints to
/// `out_dir`.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    variant: NetworkVariant,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if !variant.is_pretext() {
        return Err(Error::invalid(format!("{variant} is not a pretext variant")));
    }
    let train_cfg = TrainConfig {
        variant,
        seed,
        ..cfg.pretrain.clone()
    };
    let spec = NetworkSpec {
        backbone: cfg.backbone.clone(),
        variant,
    };
    let mut net = Network::<f32>::build(&spec, seed)?;
    let pretext = PretextData {
        bank: &data.bank,
        train: &data.split.train,
        test: &data.split.test,
        clip: &data.clip,
        transform_space: &cfg.transform_space,
    };
    train(&pretext, &mut net, &train_cfg, Some(out_dir), Some(&cfg.hash()))
}

/// Fine-tunes one initialization on one task.
pub fn run_finetune(
    cfg: &RunConfig,
    data: &Dataset,
    task: Task,
    init: Init,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let ft = FinetuneConfig {
        task,
        init,
        seed,
        ..cfg.finetune.clone()
    };
    finetune(&data.finetune_data(), &ft, &cfg.backbone, out_dir, Some(&cfg.hash()))
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    OrderOnly,
    TransformOnly,
    Joint,
    Random,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::OrderOnly, Arm::TransformOnly, Arm::Joint, Arm::Random];

    pub fn label(self) -> &'static str {
        match self {
            Arm::OrderOnly => "Ord.Crct.",
            Arm::TransformOnly => "Trans.Pred.",
            Arm::Joint => "Ours(final)",
            Arm::Random => "Rand.Init.",
        }
    }

    pub fn pretext(self) -> Option<NetworkVariant> {
        match self {
            Arm::OrderOnly => Some(NetworkVariant::OrderOnly),
            Arm::TransformOnly => Some(NetworkVariant::TransformOnly),
            Arm::Joint => Some(NetworkVariant::Siamese),
            Arm::Random => None,
        }
    }
}

pub const TABLE_HEADER: &str = "arm,Prec,Rec,F1,KL,NSS,AUC,CC,SIM";

/// One arm under one seed. Precision, recall and F1 are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub arm: Arm,
    pub pretrain_seed: Option<u64>,
    pub finetune_seed: u64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
    pub kl: f64,
    pub nss: f64,
    pub auc: f64,
    pub cc: Option<f64>,
    pub sim: f64,
}

impl ArmScores {
    pub fn from_reports(
        arm: Arm,
        pretrain_seed: Option<u64>,
        finetune_seed: u64,
        planes: &MetricsReport,
        saliency: &MetricsReport,
    ) -> Result<Self> {
        let (crate::transfer::TaskMetrics::Planes(p), Some(s)) = (&planes.metrics, saliency.saliency()) else {
            return Err(Error::invalid("ablation needs one planes and one saliency report"));
        };
        Ok(Self {
            arm,
            pretrain_seed,
            finetune_seed,
            prec: 100.0 * p.macro_avg.precision,
            rec: 100.0 * p.macro_avg.recall,
            f1: 100.0 * p.macro_avg.f1,
            kl: s.kl,
            nss: s.nss,
            auc: s.auc,
            cc: s.cc,
            sim: s.sim,
        })
    }

    fn metric_cells(&self) -> String {
        let cc = self.cc.map(|v| format!("{v:.4}")).unwrap_or_default();
        format!(
            "{:.2},{:.2},{:.2},{:.4},{:.4},{:.4},{cc},{:.4}",
            self.prec, self.rec, self.f1, self.kl, self.nss, self.auc, self.sim
        )
    }
}

/// Per-arm mean over seeds, in [`Arm::ALL`] order.
pub fn mean_table(scores: &[ArmScores]) -> Vec<ArmScores> {
    Arm::ALL
        .iter()
        .filter_map(|&arm| {
            let rows: Vec<&ArmScores> = scores.iter().filter(|s| s.arm == arm).collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            let avg = |f: fn(&ArmScores) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(ArmScores {
                arm,
                pretrain_seed: None,
                finetune_seed: rows[0].finetune_seed,
                prec: avg(|r| r.prec),
                rec: avg(|r| r.rec),
                f1: avg(|r| r.f1),
                kl: avg(|r| r.kl),
                nss: avg(|r| r.nss),
                auc: avg(|r| r.auc),
                cc: rows.iter().map(|r| r.cc).sum::<Option<f64>>().map(|s| s / n),
                sim: avg(|r| r.sim),
            })
        })
        .collect()
}

/// The four-row table: one row per arm, eight metric columns.
pub fn table_csv(rows: &[ArmScores]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{}", r.arm.label(), r.metric_cells());
    }
    out
}

pub fn per_seed_csv(scores: &[ArmScores]) -> String {
    let mut out = String::from("arm,pretrain_seed,finetune_seed,Prec,Rec,F1,KL,NSS,AUC,CC,SIM\n");
    for r in scores {
        let ps = r.pretrain_seed.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{ps},{},{}", r.arm.label(), r.finetune_seed, r.metric_cells());
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub scores: Vec<ArmScores>,
    pub table: Vec<ArmScores>,
    pub table_path: PathBuf,
}

/// Pretrains the three pretext arms for every seed, fine-tunes each plus a
/// random initialization on both tasks with the same seed, and writes
/// `ablation.csv` (mean over seeds) and `ablation_per_seed.csv`.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, seeds: &[u64], out_dir: &Path) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut scores = Vec::new();
    for &seed in seeds {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        for arm in Arm::ALL {
            let init = match arm.pretext() {
                Some(variant) => {
                    let dir = seed_dir.join(format!("pretrain_{variant}"));
                    let outcome = run_pretrain(cfg, data, variant, seed, &dir)?;
                    Init::Checkpoint(outcome.final_checkpoint.expect("written with an output directory"))
                }
                None => Init::Random,
            };
            let arm_dir = seed_dir.join(format!("finetune_{}", arm.label().trim_end_matches('.').replace('.', "_")));
            let planes = run_finetune(cfg, data, Task::Planes, init.clone(), seed, Some(&arm_dir.join("planes")))?;
            let saliency = run_finetune(cfg, data, Task::Saliency, init, seed, Some(&arm_dir.join("saliency")))?;
            scores.push(ArmScores::from_reports(
                arm,
                arm.pretext().map(|_| seed),
                seed,
                &planes.report,
                &saliency.report,
            )?);
        }
    }
    let table = mean_table(&scores);
    let table_path = out_dir.join("ablation.csv");
    fs::write(&table_path, table_csv(&table)).map_err(|e| Error::io(&table_path, e))?;
    let per_seed = out_dir.join("ablation_per_seed.csv");
    fs::write(&per_seed, per_seed_csv(&scores)).map_err(|e| Error::io(&per_seed, e))?;
    Ok(AblationOutcome {
        scores,
        table,
        table_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: Arm, f1: f64, cc: Option<f64>) -> ArmScores {
        ArmScores {
            arm,
            pretrain_seed: Some(1),
            finetune_seed: 1,
            prec: f1,
            rec: f1,
            f1,
            kl: 1.0,
            nss: 0.5,
            auc: 0.7,
            cc,
            sim: 0.3,
        }
    }

    #[test]
    fn table_has_four_rows_and_eight_metrics() {
        let scores: Vec<ArmScores> = Arm::ALL
            .iter()
            .flat_map(|&a| [row(a, 50.0, Some(0.2)), row(a, 60.0, None)])
            .collect();
        let table = mean_table(&scores);
        let csv = table_csv(&table);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        for line in &lines {
            assert_eq!(line.split(',').count(), 9, "{line}");
        }
        assert!(lines[3].starts_with("Ours(final),55.00"));
        assert_eq!(table[0].cc, None);
    }
}
