//! Training loop, checkpoints and fine-tuning on a tiny model.

mod common;

use std::path::Path;

use compgan::checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, Model};
use compgan::config::ModelConfig;
use compgan::data::{DatasetIndex, InMemoryDataset};
use compgan::nn::Parameterized;
use compgan::schema::SemanticSchema;
use compgan::toy::make_toy_dataset;
use compgan::train::{StepMetrics, TrainMode, TrainState};
use compgan::trainer::{read_metrics, run, TrainOptions, Trainer};
use tch::Tensor;

fn config() -> ModelConfig {
    ModelConfig {
        r1_interval: 2,
        path_interval: 3,
        ..common::tiny_config()
    }
}

fn dataset(dir: &Path) -> InMemoryDataset {
    let data = make_toy_dataset(0, 8, 16, dir).unwrap();
    let index = DatasetIndex::from_dir(&data, 16).unwrap();
    InMemoryDataset::load(&index, &SemanticSchema::toy()).unwrap()
}

fn trainer(dir: &Path, mode: TrainMode) -> Trainer {
    let state = TrainState::new(config(), SemanticSchema::toy(), 7, mode).unwrap();
    Trainer::new(state, dataset(dir), 7, true).unwrap()
}

fn steps(t: &mut Trainer, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| serde_json::to_string(&t.step().unwrap()).unwrap())
        .collect()
}

fn same_params(a: &impl Parameterized, b: &impl Parameterized) -> bool {
    a.named_params()
        .iter()
        .zip(b.named_params())
        .all(|((na, ta), (nb, tb))| na == &nb && ta.equal(&tb))
}

#[test]
fn fixed_seed_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = steps(&mut trainer(dir.path(), TrainMode::Joint), 6);
    let b = steps(&mut trainer(dir.path(), TrainMode::Joint), 6);
    assert_eq!(a, b);
    let parsed: Vec<StepMetrics> = a.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(parsed.iter().any(|m| m.r1_seg.is_some()) && parsed.iter().any(|m| m.path.is_some()));
}

#[test]
fn checkpoint_mid_run_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = trainer(dir.path(), TrainMode::Joint);
    let expected = steps(&mut straight, 7);

    let mut first = trainer(dir.path(), TrainMode::Joint);
    let mut got = steps(&mut first, 3);
    let ckpt = dir.path().join("mid.safetensors");
    save_checkpoint(&first.state, &ckpt).unwrap();
    drop(first);

    let state = load_checkpoint(&ckpt).unwrap();
    assert_eq!(state.step, 3);
    let mut resumed = Trainer::new(state, dataset(dir.path()), 999, true).unwrap();
    got.extend(steps(&mut resumed, 4));
    assert_eq!(got, expected);
    assert!(same_params(&resumed.state.g, &straight.state.g));
    assert!(same_params(&resumed.state.d, &straight.state.d));
    assert!(same_params(&resumed.state.ema, &straight.state.ema));
}

#[test]
fn model_loads_the_ema_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), TrainMode::Joint);
    steps(&mut t, 2);
    let ckpt = dir.path().join("m.safetensors");
    save_checkpoint(&t.state, &ckpt).unwrap();
    let model = Model::load(&ckpt).unwrap();
    assert_eq!(model.step, 2);
    assert!(same_params(&model.generator, &t.state.ema));
    assert!(model.generator.fourier.b.equal(&t.state.ema.fourier.b));
    assert_eq!(model.stats.mean_w.len(), config().latent_dim);

    let file = CheckpointFile::open(&ckpt).unwrap();
    assert_eq!(file.config().unwrap(), config());
    assert_eq!(file.schema().unwrap(), SemanticSchema::toy());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Model::load(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.safetensors")).is_err());
}

#[test]
fn finetune_leaves_the_segmentation_branch_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), TrainMode::Finetune);
    let before: Vec<Tensor> = t.state.d.seg_branch_params().iter().map(|(_, p)| p.copy()).collect();
    let m = t.step().unwrap();
    assert!(m.mask_loss.is_none() && m.r1_seg.is_none());
    assert!(m.r1_img.is_some());
    for ((name, p), old) in t.state.d.seg_branch_params().iter().zip(&before) {
        let grad = p.grad();
        assert!(!grad.defined() || grad.abs().max().double_value(&[]) == 0.0, "{name} has a gradient");
        assert!(p.equal(old), "{name} moved");
    }
    let (images, masks) = dataset(dir.path()).batch(&[(0, false), (1, false), (2, false), (3, false)]);
    assert!(t.state.train_step(&images, &masks).is_err());
}

#[test]
fn run_writes_outputs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_toy_dataset(1, 8, 16, &dir.path().join("data")).unwrap();
    let out = dir.path().join("run");
    let mut options = TrainOptions {
        config: config(),
        schema: SemanticSchema::toy(),
        data_dir: data,
        out_dir: out.clone(),
        mode: TrainMode::Joint,
        resume: None,
        seed: 3,
        steps: 4,
        sample_every: 2,
        checkpoint_every: 2,
        flip: true,
    };
    let summary = run(&options).unwrap();
    assert_eq!(summary.final_step, 4);
    for f in ["config.json", "schema.json", "latest.safetensors", "samples/step_000004.png", "checkpoints/step_000002.safetensors"] {
        assert!(out.join(f).exists(), "{f}");
    }

    options.resume = Some(summary.checkpoint.clone());
    options.mode = TrainMode::Finetune;
    options.steps = 2;
    let resumed = run(&options).unwrap();
    assert_eq!(resumed.final_step, 6);
    let metrics = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.iter().map(|m| m.step).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert!(metrics[4].mask_loss.is_none() && metrics[3].mask_loss.is_some());

    options.schema = SemanticSchema::from_json(
        r#"{"classes": [{"id": 0, "name": "background"}, {"id": 1, "name": "thing"}]}"#,
    )
    .unwrap();
    assert!(run(&options).is_err());
}
