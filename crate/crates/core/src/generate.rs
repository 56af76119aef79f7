//! Autoregressive decoding: greedy and length-synchronous beam search.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OcrModel, Session};
use crate::tensor::kernels::log_softmax;
use crate::tensor::Float;
use crate::tokenizer::Vocab;
use crate::vision::TextImage;

/// Anything that scores next tokens given a decoding state.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos(&self) -> u32;
    /// Tokens that may never be emitted.
    fn is_banned(&self, id: u32) -> bool;
    fn start(&self) -> Result<Self::State>;
    fn logits(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<()>;

    /// Next-token log-probabilities, renormalized over allowed tokens; banned
    /// tokens get `-inf`.
    fn log_probs(&self, state: &Self::State) -> Vec<f64> {
        let mut logits = self.logits(state);
        for (i, l) in logits.iter_mut().enumerate() {
            if self.is_banned(i as u32) {
                *l = f64::NEG_INFINITY;
            }
        }
        let mut out = vec![0.0; logits.len()];
        log_softmax(&logits, &mut out);
        out
    }
}

/// A finished decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted ids, including the final `[EOS]` when `finished`.
    pub ids: Vec<u32>,
    /// Natural-log probability of `ids`.
    pub logprob: f64,
    /// False when decoding stopped at `max_new` without `[EOS]`.
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// 1 selects greedy decoding.
    pub beam: usize,
    pub max_new: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { beam: 5, max_new: 96 }
    }
}

/// Better-first ordering: higher log-probability, then shorter, then
/// lexicographically smaller ids.
fn rank(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

/// Picks the best next token at every step (ties go to the lowest id) until
/// `[EOS]` or `max_new` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, max_new: usize) -> Result<Decoded> {
    if max_new == 0 {
        return Err(Error::invalid("max_new must be at least 1"));
    }
    let mut state = model.start()?;
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..max_new {
        let lp = model.log_probs(&state);
        let mut best: Option<(u32, f64)> = None;
        for (tok, &l) in lp.iter().enumerate() {
            let score = logprob + l;
            if l.is_finite() && best.is_none_or(|(_, s)| score > s) {
                best = Some((tok as u32, score));
            }
        }
        let (tok, score) = best.ok_or_else(|| Error::invalid("every token is banned"))?;
        ids.push(tok);
        logprob = score;
        if tok == model.eos() {
            return Ok(Decoded {
                ids,
                logprob,
                finished: true,
            });
        }
        model.advance(&mut state, tok)?;
    }
    Ok(Decoded {
        ids,
        logprob,
        finished: false,
    })
}

struct Hyp<S> {
    ids: Vec<u32>,
    logprob: f64,
    state: Option<S>,
}

/// Length-synchronous beam search without length normalization. Finished
/// hypotheses stay in the pool and compete with live ones. The answer is the
/// best finished hypothesis; only when none finished is the best truncated
/// one returned.
pub fn beam_search<M: StepModel>(model: &M, beam: usize, max_new: usize) -> Result<Decoded> {
    if beam == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if max_new == 0 {
        return Err(Error::invalid("max_new must be at least 1"));
    }
    let eos = model.eos();
    let mut pool = vec![Hyp {
        ids: Vec::new(),
        logprob: 0.0,
        state: Some(model.start()?),
    }];
    for _ in 0..max_new {
        if pool.iter().all(|h| h.state.is_none()) {
            break;
        }
        // (parent, token or None for a carried-over finished hypothesis, ids, logprob)
        let mut cands: Vec<(usize, Option<u32>, Vec<u32>, f64)> = Vec::new();
        for (p, h) in pool.iter().enumerate() {
            match &h.state {
                None => cands.push((p, None, h.ids.clone(), h.logprob)),
                Some(s) => {
                    for (tok, &l) in model.log_probs(s).iter().enumerate() {
                        if l.is_finite() {
                            let mut ids = h.ids.clone();
                            ids.push(tok as u32);
                            cands.push((p, Some(tok as u32), ids, h.logprob + l));
                        }
                    }
                }
            }
        }
        cands.sort_by(|a, b| rank((a.3, &a.2), (b.3, &b.2)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for (p, tok, ids, logprob) in cands {
            let state = match tok {
                None => None,
                Some(t) if t == eos => None,
                Some(t) => {
                    let mut s = pool[p].state.clone().expect("live parent");
                    model.advance(&mut s, t)?;
                    Some(s)
                }
            };
            next.push(Hyp { ids, logprob, state });
        }
        pool = next;
    }
    let any_finished = pool.iter().any(|h| h.ids.last() == Some(&eos));
    let best = pool
        .into_iter()
        .filter(|h| !any_finished || h.ids.last() == Some(&eos))
        .min_by(|a, b| rank((a.logprob, &a.ids), (b.logprob, &b.ids)))
        .ok_or_else(|| Error::invalid("every token is banned"))?;
    Ok(Decoded {
        finished: best.ids.last() == Some(&eos),
        ids: best.ids,
        logprob: best.logprob,
    })
}

pub fn decode<M: StepModel>(model: &M, cfg: &GenerateConfig) -> Result<Decoded> {
    if cfg.beam <= 1 {
        greedy_decode(model, cfg.max_new)
    } else {
        beam_search(model, cfg.beam, cfg.max_new)
    }
}

/// Step model over one image. Structural specials other than `[EOS]` are
/// banned.
pub struct ImageDecoder<'m, T> {
    model: &'m OcrModel<T>,
    image: &'m TextImage,
}

impl<'m, T: Float> ImageDecoder<'m, T> {
    pub fn new(model: &'m OcrModel<T>, image: &'m TextImage) -> Self {
        Self { model, image }
    }
}

impl<'m, T: Float> StepModel for ImageDecoder<'m, T> {
    type State = Session<'m, T>;

    fn vocab_size(&self) -> usize {
        self.model.vocab().size
    }
    fn eos(&self) -> u32 {
        self.model.vocab().eos
    }
    fn is_banned(&self, id: u32) -> bool {
        let v = self.model.vocab();
        id == v.sep || id == v.pad
    }
    fn start(&self) -> Result<Self::State> {
        self.model.session(self.image)
    }
    fn logits(&self, state: &Self::State) -> Vec<f64> {
        state.logits().iter().map(|v| v.f64()).collect()
    }
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<()> {
        state.advance(token)
    }
}

/// Image to text. Truncation at `max_new` is reported through `Decoded`.
pub fn recognize<T: Float>(
    model: &OcrModel<T>,
    vocab: &Vocab,
    image: &TextImage,
    cfg: &GenerateConfig,
) -> Result<(String, Decoded)> {
    let max_new = cfg.max_new.min(model.max_text_len() + 1);
    let decoded = decode(&ImageDecoder::new(model, image), &GenerateConfig { max_new, ..*cfg })?;
    Ok((vocab.decode(&decoded.ids)?, decoded))
}

/// Deterministic pseudo-random step model whose next-token distribution is a
/// fixed function of `(seed, prefix)`. Used to check search procedures
/// against exhaustive enumeration.
#[derive(Clone, Debug)]
pub struct RandomTableModel {
    pub vocab: usize,
    pub eos: u32,
    pub seed: u64,
    /// Logit standard deviation; larger means peakier distributions.
    pub scale: f64,
}

impl RandomTableModel {
    pub fn new(vocab: usize, eos: u32, seed: u64) -> Self {
        Self {
            vocab,
            eos,
            seed,
            scale: 2.0,
        }
    }
}

impl StepModel for RandomTableModel {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn eos(&self) -> u32 {
        self.eos
    }
    fn is_banned(&self, _id: u32) -> bool {
        false
    }
    fn start(&self) -> Result<Vec<u32>> {
        Ok(Vec::new())
    }
    fn logits(&self, prefix: &Vec<u32>) -> Vec<f64> {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
        }
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(prefix.len() as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..self.vocab)
            .map(|_| rng.random_range(-1.0..1.0) * self.scale * 1.7)
            .collect()
    }
    fn advance(&self, prefix: &mut Vec<u32>, token: u32) -> Result<()> {
        prefix.push(token);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Model that always prefers `[EOS]`.
    struct EosFirst;

    impl StepModel for EosFirst {
        type State = ();
        fn vocab_size(&self) -> usize {
            4
        }
        fn eos(&self) -> u32 {
            2
        }
        fn is_banned(&self, id: u32) -> bool {
            id == 3
        }
        fn start(&self) -> Result<()> {
            Ok(())
        }
        fn logits(&self, _: &()) -> Vec<f64> {
            vec![0.0, 0.0, 5.0, 100.0]
        }
        fn advance(&self, _: &mut (), _: u32) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn instant_eos_for_all_widths() {
        for beam in 1..6 {
            let d = decode(&EosFirst, &GenerateConfig { beam, max_new: 4 }).unwrap();
            assert_eq!(d.ids, vec![2]);
            assert!(d.finished);
        }
    }

    #[test]
    fn banned_tokens_are_never_emitted() {
        let d = greedy_decode(&EosFirst, 3).unwrap();
        assert!(!d.ids.contains(&3));
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..20 {
            let m = RandomTableModel::new(6, 5, seed);
            assert_eq!(greedy_decode(&m, 5).unwrap(), beam_search(&m, 1, 5).unwrap());
        }
    }

    #[test]
    fn zero_widths_are_rejected() {
        let m = RandomTableModel::new(3, 2, 0);
        assert!(beam_search(&m, 0, 3).is_err());
        assert!(greedy_decode(&m, 0).is_err());
    }

    #[test]
    fn truncation_is_flagged() {
        // EOS never wins: vocabulary where EOS logit is always lowest.
        struct NeverEos;
        impl StepModel for NeverEos {
            type State = ();
            fn vocab_size(&self) -> usize {
                2
            }
            fn eos(&self) -> u32 {
                1
            }
            fn is_banned(&self, _: u32) -> bool {
                false
            }
            fn start(&self) -> Result<()> {
                Ok(())
            }
            fn logits(&self, _: &()) -> Vec<f64> {
                vec![3.0, -3.0]
            }
            fn advance(&self, _: &mut (), _: u32) -> Result<()> {
                Ok(())
            }
        }
        let d = greedy_decode(&NeverEos, 3).unwrap();
        assert_eq!(d.ids, vec![0, 0, 0]);
        assert!(!d.finished);
    }
}
