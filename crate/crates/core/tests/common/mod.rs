#![allow(dead_code)]

use std::path::Path;

use clipforge::config::RunConfig;
use clipforge::dataio::{gen_synth, SynthConfig};
use clipforge::nn::BackboneSpec;

/// Eight short 32x32 videos over two classes.
pub fn tiny_store(root: &Path) {
    let cfg = SynthConfig {
        num_videos: 8,
        frames_per_video: 24,
        width: 32,
        height: 32,
        num_classes: 2,
        seed: 3,
        ..SynthConfig::default()
    };
    gen_synth(&cfg, root).unwrap();
}

/// A configuration small enough to pretrain and fine-tune in seconds.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.root = root.to_path_buf();
    cfg.data.downsample_rate = 2;
    cfg.data.input_size = 16;
    cfg.data.test_fraction = 0.25;
    cfg.backbone = BackboneSpec {
        input_channels: 4,
        widths: vec![8, 8],
        dilations: vec![1, 2],
        strides: vec![2, 1],
        se_ratio: 4,
        input_size: 16,
        norm_groups: 4,
    };
    cfg.pretrain.epochs = 2;
    cfg.pretrain.clips_per_epoch = 48;
    cfg.pretrain.eval_clips = 16;
    cfg.pretrain.batch_size = 16;
    cfg.finetune.budget_per_class = 4;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 4;
    cfg.finetune.eval_frames_per_video = 3;
    cfg.validate().unwrap();
    cfg
}
