use patchocr::dataset::read_manifest;
use patchocr::synthgen::{
    font, generate, render_text, sample_rng, write_dataset, Style, StyleMix, SynthSpec, ADVANCE, LINE_TOP, MARGIN_X,
    SCALE,
};
use patchocr::tokenizer::Vocab;
use patchocr::vision::preprocess_file;

fn spec(count: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        corpus: vec!["HELLO".into(), "world".into(), "No. 42".into(), "two\nlines".into()],
        mix: StyleMix::default(),
        count,
        seed,
    }
}

#[test]
fn printed_ink_lies_exactly_on_font_cells() {
    for seed in 0..5 {
        let img = render_text("HELLO", Style::Printed, &mut sample_rng(seed, 0)).unwrap();
        let mut expect = vec![false; 128 * 32];
        for (i, c) in "HELLO".chars().enumerate() {
            for gy in 0..font::GLYPH_HEIGHT {
                for gx in 0..font::GLYPH_WIDTH {
                    if font::ink(c, gx, gy) {
                        let x0 = MARGIN_X + ADVANCE * i + SCALE * gx;
                        let y0 = LINE_TOP + SCALE * gy;
                        for y in y0..y0 + SCALE {
                            for x in x0..x0 + SCALE {
                                expect[y * 128 + x] = true;
                            }
                        }
                    }
                }
            }
        }
        for y in 0..32 {
            for x in 0..128 {
                assert_eq!(
                    img.get(x, y, 0) < 128.0,
                    expect[y * 128 + x],
                    "seed {seed} pixel ({x}, {y})"
                );
            }
        }
    }
}

#[test]
fn style_counts_follow_the_mix() {
    let samples = generate(&spec(10, 1)).unwrap();
    let count = |s: Style| samples.iter().filter(|x| x.style == s).count();
    assert_eq!(
        [count(Style::Scene), count(Style::Printed), count(Style::Handwritten)],
        [6, 2, 2]
    );
    let one = generate(&spec(1, 1)).unwrap();
    assert_eq!(one[0].style, Style::Scene);
}

#[test]
fn parallel_generation_matches_serial() {
    let s = spec(24, 9);
    let par = generate(&s).unwrap();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| generate(&s).unwrap());
    assert_eq!(par, serial);
}

#[test]
fn dataset_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_dataset(&generate(&spec(12, 4)).unwrap(), a.path()).unwrap();
    let mb = write_dataset(&generate(&spec(12, 4)).unwrap(), b.path()).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    let entries = read_manifest(&ma).unwrap();
    assert_eq!(entries.len(), 12);
    let vocab = Vocab::bytes_only();
    for (e, eb) in entries.iter().zip(read_manifest(&mb).unwrap()) {
        assert_eq!(std::fs::read(&e.path).unwrap(), std::fs::read(&eb.path).unwrap());
        assert_eq!(vocab.decode(&vocab.encode(&e.label)).unwrap(), e.label);
        let img = preprocess_file(&e.path, 1).unwrap();
        assert!(img.is_model_ready());
    }
}
