mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use clipforge::experiment::{run_pretrain, Dataset};
use clipforge::nn::{load, save, transfer_weights, NetworkVariant};
use clipforge::pretrain::LOG_HEADER;
use clipforge::Error;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn log_column(dir: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let col = LOG_HEADER.split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn same_seed_gives_bitwise_identical_checkpoints_at_any_thread_count() {
    let store = tempfile::tempdir().unwrap();
    common::tiny_store(store.path());
    let cfg = common::tiny_config(store.path());
    let data = Dataset::load(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: usize, seed: u64| {
        let dir = out.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pretrain(&cfg, &data, NetworkVariant::Siamese, seed, &dir)).unwrap();
        dir
    };
    let a = run("a", 1, 5);
    let b = run("b", 3, 5);
    assert!(files(&a.join("final")) == files(&b.join("final")));
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());

    let c = run("c", 1, 6);
    assert!(files(&a.join("final")) != files(&c.join("final")));
}

#[test]
fn checkpoints_round_trip_and_transfer_the_trunk_bitwise() {
    let store = tempfile::tempdir().unwrap();
    common::tiny_store(store.path());
    let cfg = common::tiny_config(store.path());
    let data = Dataset::load(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let outcome = run_pretrain(&cfg, &data, NetworkVariant::Disentangle, 2, out.path()).unwrap();
    let final_dir = outcome.final_checkpoint.unwrap();

    let net = load(&final_dir).unwrap();
    let again = out.path().join("again");
    save(&net, &again, Some(&cfg.hash())).unwrap();
    assert!(files(&final_dir) == files(&again));

    let planes = transfer_weights(&final_dir, NetworkVariant::Planes { classes: 2 }, 9).unwrap();
    let mut trunk_tensors = 0;
    for (name, t) in planes.params().iter() {
        if let Some(src) = name.strip_prefix("trunk.").and(net.params().get(name)) {
            assert!(t.data.iter().zip(&src.data).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
            trunk_tensors += 1;
        }
    }
    assert!(trunk_tensors > 0);
    assert!(planes.params().names().iter().any(|n| !n.starts_with("trunk.")));
}

#[test]
fn single_task_arms_log_zero_for_the_missing_loss() {
    let store = tempfile::tempdir().unwrap();
    common::tiny_store(store.path());
    let cfg = common::tiny_config(store.path());
    let data = Dataset::load(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();

    let order = out.path().join("order");
    run_pretrain(&cfg, &data, NetworkVariant::OrderOnly, 1, &order).unwrap();
    assert!(log_column(&order, "loss_trans").iter().all(|&v| v == 0.0));
    assert!(log_column(&order, "loss_ord").iter().all(|&v| v > 0.0));

    let trans = out.path().join("trans");
    run_pretrain(&cfg, &data, NetworkVariant::TransformOnly, 1, &trans).unwrap();
    assert!(log_column(&trans, "loss_ord").iter().all(|&v| v == 0.0));
    assert!(log_column(&trans, "loss_trans").iter().all(|&v| v > 0.0));
}

#[test]
fn downstream_variants_cannot_be_pretrained() {
    let store = tempfile::tempdir().unwrap();
    common::tiny_store(store.path());
    let cfg = common::tiny_config(store.path());
    let data = Dataset::load(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = run_pretrain(&cfg, &data, NetworkVariant::Saliency, 1, out.path()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let store = tempfile::tempdir().unwrap();
    common::tiny_store(store.path());
    let mut cfg = common::tiny_config(store.path());
    cfg.pretrain.learning_rate = 1e30;
    cfg.pretrain.grad_clip = None;
    cfg.pretrain.epochs = 3;
    let data = Dataset::load(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = run_pretrain(&cfg, &data, NetworkVariant::Siamese, 1, out.path()).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}
