//! The full recognizer: patch embedding, `[SEP]`, token embedding and decoder,
//! with teacher-forced loss and cached incremental inference.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoder, KvCache, ModelConfig};
use crate::embedding::{patchify, EmbeddedSequence, PatchConfig, PatchEmbedding, SequenceLayout};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::tokenizer::Vocab;
use crate::vision::{TextImage, INPUT_HEIGHT, INPUT_WIDTH};

/// What a model needs to know about its tokenizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabInfo {
    pub size: usize,
    pub sep: u32,
    pub eos: u32,
    pub pad: u32,
    pub hash: String,
}

impl From<&Vocab> for VocabInfo {
    fn from(v: &Vocab) -> Self {
        Self {
            size: v.size(),
            sep: v.sep(),
            eos: v.eos(),
            pad: v.pad(),
            hash: v.hash(),
        }
    }
}

impl VocabInfo {
    pub fn is_special(&self, id: u32) -> bool {
        id == self.sep || id == self.eos || id == self.pad
    }
}

/// One training example: a preprocessed image and its target ids, which must
/// end with `[EOS]`.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a TextImage,
    pub target: &'a [u32],
}

#[derive(Clone, Debug)]
pub struct OcrModel<T> {
    config: ModelConfig,
    patch: PatchConfig,
    vocab: VocabInfo,
    store: ParamStore<T>,
    patch_embed: PatchEmbedding,
    token_table: ParamId,
    decoder: Decoder,
}

impl<T: Float> OcrModel<T> {
    pub fn new(config: &ModelConfig, patch: &PatchConfig, vocab: VocabInfo, seed: u64) -> Result<Self> {
        config.validate()?;
        patch.validate_for(INPUT_WIDTH, INPUT_HEIGHT)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let patch_embed = PatchEmbedding::init(&mut store, patch, config.d_model, &mut rng);
        let token_table = store.add(
            "tokens.embedding",
            Tensor::randn(&[vocab.size, config.d_model], 0.02, &mut rng),
        );
        let decoder = Decoder::init(config, vocab.size, token_table, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            patch: *patch,
            vocab,
            store,
            patch_embed,
            token_table,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn patch_config(&self) -> &PatchConfig {
        &self.patch
    }
    pub fn vocab(&self) -> &VocabInfo {
        &self.vocab
    }
    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }
    pub fn patch_embedding(&self) -> &PatchEmbedding {
        &self.patch_embed
    }
    pub fn token_table(&self) -> ParamId {
        self.token_table
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Float>(&self) -> OcrModel<U> {
        OcrModel {
            config: self.config.clone(),
            patch: self.patch,
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            patch_embed: self.patch_embed.clone(),
            token_table: self.token_table,
            decoder: self.decoder.clone(),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patch.num_patches()
    }

    /// Largest text length (tokens after `[SEP]`) that fits `max_len`.
    pub fn max_text_len(&self) -> usize {
        self.config.max_len.saturating_sub(self.num_patches() + 1)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab.size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.vocab.size,
            }),
            None => Ok(()),
        }
    }

    /// Builds `[patches] ++ [SEP] ++ [text]` for each sample. All `texts`
    /// must have the same length (pad beforehand).
    pub fn assemble(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &[&TextImage],
        texts: &[Vec<u32>],
    ) -> Result<EmbeddedSequence> {
        if images.is_empty() || images.len() != texts.len() {
            return Err(Error::invalid(format!(
                "batch needs matching non-empty images and texts ({} vs {})",
                images.len(),
                texts.len()
            )));
        }
        let text_len = texts[0].len();
        if texts.iter().any(|t| t.len() != text_len) {
            return Err(Error::invalid("texts in a batch must share one padded length"));
        }
        let n = self.num_patches();
        let layout = SequenceLayout {
            patches: n,
            text: text_len,
        };
        layout.check(self.config.max_len)?;
        let batch = images.len();

        let mut patch_data = Vec::with_capacity(batch * n * self.patch.patch_dim());
        for img in images {
            if img.width() != INPUT_WIDTH || img.height() != INPUT_HEIGHT {
                return Err(Error::Image(format!(
                    "model input must be {INPUT_WIDTH}x{INPUT_HEIGHT}, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
            patch_data.extend(patchify::<T>(img, &self.patch)?.into_data());
        }
        let patches = tape.constant(Tensor::new(vec![batch * n, self.patch.patch_dim()], patch_data)?);
        let img_rows = self.patch_embed.forward(tape, bound, patches)?;

        let mut ids = Vec::with_capacity(batch * (1 + text_len));
        for t in texts {
            self.check_ids(t)?;
            ids.push(self.vocab.sep);
            ids.extend_from_slice(t);
        }
        let tok_rows = crate::embedding::embed_tokens(tape, bound[self.token_table], &ids)?;

        let mut picks = Vec::with_capacity(batch * layout.len());
        for b in 0..batch {
            picks.extend((0..n).map(|i| (img_rows, b * n + i)));
            picks.extend((0..=text_len).map(|j| (tok_rows, b * (text_len + 1) + j)));
        }
        let vectors = tape.pick_rows(&picks)?;
        Ok(EmbeddedSequence { vectors, layout, batch })
    }

    /// Logits for every position, `[batch*len, V]`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &[&TextImage],
        texts: &[Vec<u32>],
    ) -> Result<(Var, EmbeddedSequence)> {
        let seq = self.assemble(tape, bound, images, texts)?;
        let trace = self
            .decoder
            .forward(tape, bound, seq.vectors, seq.batch, seq.layout.len(), None)?;
        Ok((self.decoder.logits(tape, bound, trace.hidden)?, seq))
    }

    /// Logits `[len, V]` for a single image and text, without gradients.
    pub fn logits(&self, image: &TextImage, text: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let (logits, _) = self.forward_logits(&mut tape, &bound, &[image], &[text.to_vec()])?;
        Ok(tape.value(logits).clone())
    }

    /// Teacher-forced mean token loss over a batch. Inputs after `[SEP]` are
    /// the targets shifted right; padded positions are masked out. Only text
    /// positions are projected to the vocabulary.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &[Example],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut longest = 0;
        for ex in batch {
            self.check_ids(ex.target)?;
            if ex.target.last() != Some(&self.vocab.eos) {
                return Err(Error::MissingEos);
            }
            longest = longest.max(ex.target.len());
        }
        self.batch_loss_padded(tape, bound, batch, longest, rng)
    }

    /// As [`Self::batch_loss`] with an explicit padded target length.
    pub fn batch_loss_padded(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &[Example],
        padded_len: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if batch
            .iter()
            .any(|ex| ex.target.is_empty() || ex.target.len() > padded_len)
        {
            return Err(Error::invalid("targets must be non-empty and fit the padded length"));
        }
        let pad = self.vocab.pad;
        let text_len = padded_len - 1;
        let mut texts = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * padded_len);
        let mut mask = Vec::with_capacity(batch.len() * padded_len);
        for ex in batch {
            let mut input = ex.target[..ex.target.len() - 1].to_vec();
            input.resize(text_len, pad);
            texts.push(input);
            for t in 0..padded_len {
                let tgt = ex.target.get(t).copied();
                targets.push(tgt.unwrap_or(pad) as usize);
                mask.push(tgt.is_some());
            }
        }
        let images: Vec<&TextImage> = batch.iter().map(|ex| ex.image).collect();
        let seq = self.assemble(tape, bound, &images, &texts)?;
        let len = seq.layout.len();
        let trace = self.decoder.forward(tape, bound, seq.vectors, seq.batch, len, rng)?;
        let boundary = seq.layout.boundary();
        let picks: Vec<(Var, usize)> = (0..batch.len())
            .flat_map(|b| (0..padded_len).map(move |t| b * len + boundary + t))
            .map(|r| (trace.hidden, r))
            .collect();
        let rows = tape.pick_rows(&picks)?;
        let logits = self.decoder.logits(tape, bound, rows)?;
        tape.cross_entropy(logits, &targets, &mask)
    }

    /// Loss of a single example, no gradients.
    pub fn forward_loss(&self, image: &TextImage, target: &[u32]) -> Result<T> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let loss = self.batch_loss(&mut tape, &bound, &[Example { image, target }], None)?;
        Ok(tape.value(loss).item())
    }

    /// Batch loss and gradients for every parameter in store order.
    pub fn loss_and_grads(&self, batch: &[Example], rng: Option<&mut dyn RngCore>) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, true);
        let loss = self.batch_loss(&mut tape, &bound, batch, rng)?;
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), bound.collect_grads(&mut grads)))
    }

    /// Runs the image and `[SEP]` through the decoder and returns a session
    /// positioned to predict the first text token.
    pub fn session(&self, image: &TextImage) -> Result<Session<'_, T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let seq = self.assemble(&mut tape, &bound, &[image], &[Vec::new()])?;
        let len = seq.layout.len();
        let trace = self.decoder.forward(&mut tape, &bound, seq.vectors, 1, len, None)?;
        let picks = [(trace.hidden, len - 1)];
        let last = tape.pick_rows(&picks)?;
        let logits = self.decoder.logits(&mut tape, &bound, last)?;
        Ok(Session {
            model: self,
            cache: KvCache::from_trace(&tape, &trace, self.config.d_model)?,
            logits: tape.value(logits).data().to_vec(),
        })
    }
}

/// Incremental decoding state for one image.
#[derive(Clone, Debug)]
pub struct Session<'m, T> {
    model: &'m OcrModel<T>,
    cache: KvCache<T>,
    logits: Vec<T>,
}

impl<T: Float> Session<'_, T> {
    /// Logits predicting the next token.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Feeds `token` and updates the next-token logits.
    pub fn advance(&mut self, token: u32) -> Result<()> {
        let m = self.model;
        m.check_ids(&[token])?;
        let row = m.store.get(m.token_table).row(token as usize).to_vec();
        self.logits = m.decoder.step(&m.store, &mut self.cache, &row)?;
        Ok(())
    }
}
