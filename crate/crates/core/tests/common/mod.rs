#![allow(dead_code)]

use patchocr::decoder::ModelConfig;
use patchocr::embedding::PatchConfig;
use patchocr::generate::StepModel;
use patchocr::model::{OcrModel, VocabInfo};
use patchocr::vision::TextImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two text tokens, then `[SEP]`, `[EOS]`, `[PAD]`.
pub fn toy_vocab() -> VocabInfo {
    VocabInfo {
        size: 5,
        sep: 2,
        eos: 3,
        pad: 4,
        hash: "toy-5".into(),
    }
}

/// A one-layer transformer over a 5-token vocabulary whose parameters are
/// drawn with unit-scale noise so next-token distributions are far from
/// uniform.
pub fn toy_model(seed: u64) -> OcrModel<f64> {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        ..ModelConfig::desk()
    };
    let mut m = OcrModel::new(&cfg, &PatchConfig::default(), toy_vocab(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let noise = Normal::new(0.0, 0.5).unwrap();
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    m
}

pub fn random_image(seed: u64) -> TextImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..128 * 32).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    TextImage::new(128, 32, 1, px).unwrap()
}

/// Log-probability of `ids` under a step model, recomputed one prefix at a
/// time from a fresh state.
pub fn sequence_logprob<M: StepModel>(m: &M, ids: &[u32]) -> f64 {
    let mut total = 0.0;
    for t in 0..ids.len() {
        let mut s = m.start().unwrap();
        for &id in &ids[..t] {
            m.advance(&mut s, id).unwrap();
        }
        total += m.log_probs(&s)[ids[t] as usize];
    }
    total
}

/// Every `[EOS]`-terminated sequence of at most `max_new` tokens over the
/// allowed ids, scored from scratch; returns the best under (logprob desc,
/// length asc, ids asc).
pub fn exhaustive_best<M: StepModel>(m: &M, max_new: usize) -> (Vec<u32>, f64) {
    let eos = m.eos();
    let allowed: Vec<u32> = (0..m.vocab_size() as u32).filter(|&i| !m.is_banned(i)).collect();
    let body: Vec<u32> = allowed.iter().copied().filter(|&i| i != eos).collect();
    let mut prefixes: Vec<Vec<u32>> = vec![vec![]];
    let mut best: Option<(Vec<u32>, f64)> = None;
    for _ in 0..max_new {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut done = p.clone();
            done.push(eos);
            let lp = sequence_logprob(m, &done);
            let better = match &best {
                None => true,
                Some((ids, b)) => lp > *b || (lp == *b && (done.len(), &done) < (ids.len(), ids)),
            };
            if better {
                best = Some((done, lp));
            }
            for &t in &body {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        prefixes = next;
    }
    best.unwrap()
}
