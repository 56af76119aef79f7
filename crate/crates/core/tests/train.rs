use std::path::Path;

use patchocr::checkpoint;
use patchocr::dataset::{write_manifest, ManifestEntry, Sample};
use patchocr::decoder::ModelConfig;
use patchocr::embedding::PatchConfig;
use patchocr::model::{Example, OcrModel, VocabInfo};
use patchocr::synthgen::{generate, write_dataset, StyleMix, SynthSpec};
use patchocr::tensor::Tape;
use patchocr::tokenizer::{train_bpe, Vocab};
use patchocr::train::{finetune, train_manifest, Phase, StepRecord, TrainConfig, Trainer};
use patchocr::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::desk()
    }
}

fn samples(n: usize, seed: u64, vocab: &Vocab) -> Vec<Sample> {
    let spec = SynthSpec {
        corpus: ["cat", "dog", "sun", "A1"].map(String::from).to_vec(),
        mix: StyleMix::default(),
        count: n,
        seed,
    };
    generate(&spec)
        .unwrap()
        .into_iter()
        .map(|s| Sample::new(s.image.normalized(), s.label, vocab))
        .collect()
}

fn model(seed: u64) -> OcrModel<f64> {
    OcrModel::new(
        &tiny(),
        &PatchConfig::default(),
        VocabInfo::from(&Vocab::bytes_only()),
        seed,
    )
    .unwrap()
}

fn without_wall_time(r: &[StepRecord]) -> Vec<StepRecord> {
    r.iter()
        .map(|r| StepRecord {
            wall_time: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn single_sample_step_logs_its_forward_loss() {
    let vocab = Vocab::bytes_only();
    let data = samples(1, 1, &vocab);
    let mut m = model(0);
    let expect = m.forward_loss(&data[0].image, &data[0].target).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default().plain()
    };
    let recs = Trainer::new(&mut m, cfg, Phase::Pretrain)
        .unwrap()
        .run(&data, None)
        .unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].loss, expect);
    assert_eq!(recs[0].lr, 1e-4);
    assert_eq!(recs[0].step, 1);
}

#[test]
fn batches_cover_the_shuffled_set() {
    let vocab = Vocab::bytes_only();
    let data = samples(70, 2, &vocab);
    let mut m = model(0);
    let recs = Trainer::new(&mut m, TrainConfig::default().plain(), Phase::Pretrain)
        .unwrap()
        .run(&data, None)
        .unwrap();
    assert_eq!(recs.len(), 3);
    let steps: Vec<usize> = recs.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3]);
}

fn pretrain_run(dir: &Path, manifest: &Path) -> (Vec<StepRecord>, Vec<u8>, String) {
    let mut m = model(5);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train_manifest(&mut m, &Vocab::bytes_only(), manifest, &cfg, Phase::Pretrain, dir).unwrap();
    let log = std::fs::read_to_string(&out.metrics_log).unwrap();
    (out.records, std::fs::read(&out.checkpoint).unwrap(), log)
}

#[test]
fn seeded_runs_are_identical_and_write_artifacts() {
    let data_dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        corpus: ["hi", "ok", "no"].map(String::from).to_vec(),
        mix: StyleMix::default(),
        count: 10,
        seed: 3,
    };
    let manifest = write_dataset(&generate(&spec).unwrap(), data_dir.path()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, ca, la) = pretrain_run(a.path(), &manifest);
    let (rb, cb, _) = pretrain_run(b.path(), &manifest);
    assert_eq!(ra.len(), 6);
    assert_eq!(without_wall_time(&ra), without_wall_time(&rb));
    assert_eq!(ca, cb);
    assert_eq!(la.lines().count(), 6);
    let first: StepRecord = serde_json::from_str(la.lines().next().unwrap()).unwrap();
    assert_eq!(first.phase, Phase::Pretrain);
    assert_eq!(without_wall_time(&[first]), without_wall_time(&ra[..1]));
}

#[test]
fn unreadable_samples_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        corpus: vec!["ab".into()],
        mix: StyleMix::default(),
        count: 3,
        seed: 0,
    };
    let manifest = write_dataset(&generate(&spec).unwrap(), dir.path()).unwrap();
    let mut entries = patchocr::dataset::parse_manifest(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    entries.push(ManifestEntry {
        path: "images/missing.pgm".into(),
        label: "x".into(),
    });
    std::fs::write(dir.path().join("images/bad.pgm"), b"P5 garbage").unwrap();
    entries.push(ManifestEntry {
        path: "images/bad.pgm".into(),
        label: "y".into(),
    });
    write_manifest(&manifest, &entries).unwrap();
    let mut m = model(1);
    let out = train_manifest(
        &mut m,
        &Vocab::bytes_only(),
        &manifest,
        &TrainConfig::default().plain(),
        Phase::Pretrain,
        &dir.path().join("run"),
    )
    .unwrap();
    assert_eq!(out.skipped.len(), 2);
    assert_eq!(out.records.len(), 1);
}

#[test]
fn zero_lr_finetune_leaves_parameters() {
    let vocab = Vocab::bytes_only();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pre.ckpt");
    let m = OcrModel::<f32>::new(&tiny(), &PatchConfig::default(), VocabInfo::from(&vocab), 2).unwrap();
    checkpoint::save(&m, &ckpt).unwrap();
    let cfg = TrainConfig {
        lr: Some(0.0),
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (tuned, recs) = finetune::<f32>(&ckpt, &vocab, &samples(4, 3, &vocab), &cfg, None).unwrap();
    assert_eq!(tuned.params(), m.params());
    assert_eq!(recs.len(), 2);
    assert!(recs
        .iter()
        .all(|r| r.phase == Phase::Finetune && r.lr == 0.0 && r.loss > 0.0));
}

#[test]
fn finetune_defaults_to_its_rate_and_refuses_other_vocab() {
    let vocab = Vocab::bytes_only();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pre.ckpt");
    checkpoint::save(&model(3), &ckpt).unwrap();
    let (_, recs) = finetune::<f64>(
        &ckpt,
        &vocab,
        &samples(2, 4, &vocab),
        &TrainConfig::default().plain(),
        None,
    )
    .unwrap();
    assert_eq!(recs[0].lr, 5e-6);
    let other = train_bpe(&["cat cat cat dog"], 262).unwrap();
    let err = finetune::<f64>(&ckpt, &other, &samples(2, 4, &other), &TrainConfig::default(), None).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch { .. }));
}

#[test]
fn one_small_step_reduces_batch_loss_on_desk_model() {
    let vocab = Vocab::bytes_only();
    let data = samples(2, 6, &vocab);
    let mut m = OcrModel::<f64>::new(
        &ModelConfig::desk(),
        &PatchConfig::default(),
        VocabInfo::from(&vocab),
        4,
    )
    .unwrap();
    let batch_loss = |m: &OcrModel<f64>| {
        let batch: Vec<Example> = data
            .iter()
            .map(|s| Example {
                image: &s.image,
                target: &s.target,
            })
            .collect();
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, false);
        let l = m.batch_loss(&mut tape, &bound, &batch, None).unwrap();
        tape.value(l).item()
    };
    let before = batch_loss(&m);
    let cfg = TrainConfig {
        lr: Some(1e-3),
        ..TrainConfig::default().plain()
    };
    let batch: Vec<Example> = data
        .iter()
        .map(|s| Example {
            image: &s.image,
            target: &s.target,
        })
        .collect();
    Trainer::new(&mut m, cfg, Phase::Pretrain)
        .unwrap()
        .step_on(&batch)
        .unwrap();
    assert!(batch_loss(&m) < before);
}
