use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "model.n_layers=1",
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ff=32",
];

fn run(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchocr"))
        .args(args)
        .env("PATCHOCR_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn full_pipeline_through_the_binary() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let s = |p: &str| r.join(p).to_str().unwrap().to_string();

    let out = ok(&run(&["synth", "--count", "6", "--seed", "2"], r));
    assert!(out.contains("scene 4, printed 1, handwritten 1"), "{out}");
    let manifest = s("synth/manifest.tsv");
    assert!(r.join("synth/config.toml").exists());

    ok(&run(&["train-tokenizer", "--manifest", &manifest, "--size", "270"], r));
    let vocab = s("train-tokenizer/vocab.txt");
    assert!(std::fs::read_to_string(&vocab)
        .unwrap()
        .starts_with("bpe-vocab v1 size="));

    let pre = with_tiny(&[
        "pretrain",
        "--manifest",
        &manifest,
        "--vocab",
        &vocab,
        "--set",
        "train.batch_size=3",
    ]);
    ok(&run(&pre, r));
    let ckpt = s("pretrain/model.ckpt");
    assert_eq!(
        std::fs::read_to_string(r.join("pretrain/metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let saved = std::fs::read_to_string(r.join("pretrain/config.toml")).unwrap();
    assert!(saved.contains("batch_size = 3"));

    let img = s("synth/images/000000.pgm");
    let text = ok(&run(
        &with_tiny(&[
            "recognize",
            "--checkpoint",
            &ckpt,
            "--vocab",
            &vocab,
            "--greedy",
            "--max-new",
            "4",
            &img,
        ]),
        r,
    ));
    assert_eq!(text.lines().count(), 1);
    let beam = run(
        &with_tiny(&[
            "recognize",
            "--checkpoint",
            &ckpt,
            "--vocab",
            &vocab,
            "--beam",
            "2",
            "--max-new",
            "4",
            &img,
            &img,
        ]),
        r,
    );
    assert_eq!(ok(&beam).lines().count(), 2);

    let eval = ok(&run(
        &with_tiny(&[
            "eval",
            "--checkpoint",
            &ckpt,
            "--vocab",
            &vocab,
            "--manifest",
            &manifest,
            "--protocol",
            "cer",
            "--max-new",
            "4",
        ]),
        r,
    ));
    assert!(eval.starts_with("cer "), "{eval}");
    assert_eq!(
        std::fs::read_to_string(r.join("eval/report.jsonl"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    ok(&run(
        &with_tiny(&[
            "finetune",
            "--checkpoint",
            &ckpt,
            "--manifest",
            &manifest,
            "--vocab",
            &vocab,
            "--set",
            "train.batch_size=6",
        ]),
        r,
    ));
    let log = std::fs::read_to_string(r.join("finetune/metrics.jsonl")).unwrap();
    assert!(
        log.contains("\"phase\":\"finetune\"") && log.contains("\"lr\":5e-6"),
        "{log}"
    );
}

#[test]
fn identical_f64_runs_produce_identical_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(&run(
        &["synth", "--count", "4", "--out", r.join("data").to_str().unwrap()],
        r,
    ));
    let manifest = r.join("data/manifest.tsv");
    let vocab = r.join("vocab.txt");
    std::fs::write(&vocab, patchocr::tokenizer::Vocab::bytes_only().to_text()).unwrap();
    for name in ["a", "b"] {
        let out = r.join(name);
        let args = with_tiny(&[
            "pretrain",
            "--manifest",
            manifest.to_str().unwrap(),
            "--vocab",
            vocab.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--set",
            "precision=f64",
            "--set",
            "train.batch_size=2",
            "--set",
            "train.epochs=2",
        ]);
        ok(&run(&args, r));
    }
    let read = |n: &str, f: &str| std::fs::read(r.join(n).join(f)).unwrap();
    assert_eq!(read("a", "model.ckpt"), read("b", "model.ckpt"));
    assert_eq!(read("a", "config.toml"), read("b", "config.toml"));
}

#[test]
fn gradcheck_passes_and_fails_with_codes() {
    let root = tempfile::tempdir().unwrap();
    // The one-layer model is curved enough that h=1e-4 truncation shows up.
    let o = run(&with_tiny(&["gradcheck", "--set", "gradcheck.step=1e-5"]), root.path());
    assert!(ok(&o).contains("PASS"));
    let o = run(
        &with_tiny(&["gradcheck", "--set", "gradcheck.tolerance=0.0"]),
        root.path(),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    assert_eq!(run(&["no-such-command"], r).status.code(), Some(1));
    assert_eq!(run(&["synth"], r).status.code(), Some(1));
    assert_eq!(
        run(&["synth", "--count", "2", "--set", "train.bogus=1"], r)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["synth", "--count", "2", "--mix", "0.5,0.5,0.5"], r).status.code(),
        Some(1)
    );
    let missing = r.join("missing.tsv");
    let vocab = r.join("vocab.txt");
    std::fs::write(&vocab, patchocr::tokenizer::Vocab::bytes_only().to_text()).unwrap();
    let o = run(
        &[
            "pretrain",
            "--manifest",
            missing.to_str().unwrap(),
            "--vocab",
            vocab.to_str().unwrap(),
        ],
        r,
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["--help"], r).status.code(), Some(0));
}
