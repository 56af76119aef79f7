//! Patch and token embeddings and the image+`[SEP]`+text sequence geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::vision::{TextImage, INPUT_HEIGHT, INPUT_WIDTH};

/// Patch grid geometry. The image itself is always `INPUT_WIDTH x INPUT_HEIGHT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub patch_width: usize,
    pub patch_height: usize,
    pub channels: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_width: 8,
            patch_height: 4,
            channels: 1,
        }
    }
}

impl PatchConfig {
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.patch_width == 0
            || self.patch_height == 0
            || !width.is_multiple_of(self.patch_width)
            || !height.is_multiple_of(self.patch_height)
        {
            return Err(Error::invalid(format!(
                "{width}x{height} image is not divisible into {}x{} patches",
                self.patch_width, self.patch_height
            )));
        }
        Ok(())
    }

    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (width / self.patch_width, height / self.patch_height)
    }

    /// Patches produced by a model-input image.
    pub fn num_patches(&self) -> usize {
        let (gx, gy) = self.grid(INPUT_WIDTH, INPUT_HEIGHT);
        gx * gy
    }

    /// Length of one flattened patch vector.
    pub fn patch_dim(&self) -> usize {
        self.patch_width * self.patch_height * self.channels
    }
}

/// Cuts an image into patches, enumerated row-major over the patch grid;
/// each patch is flattened row-major over `(p_h, p_w, C)`.
pub fn patchify<T: Float>(img: &TextImage, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate_for(img.width(), img.height())?;
    if img.channels() != cfg.channels {
        return Err(Error::invalid(format!(
            "image has {} channels, patch config expects {}",
            img.channels(),
            cfg.channels
        )));
    }
    let (gx, gy) = cfg.grid(img.width(), img.height());
    let mut data = Vec::with_capacity(img.pixels().len());
    for py in 0..gy {
        for px in 0..gx {
            for y in 0..cfg.patch_height {
                for x in 0..cfg.patch_width {
                    for c in 0..cfg.channels {
                        let v = img.get(px * cfg.patch_width + x, py * cfg.patch_height + y, c);
                        data.push(T::of(v as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gx * gy, cfg.patch_dim()], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(patches: &Tensor<T>, cfg: &PatchConfig, width: usize, height: usize) -> Result<TextImage> {
    cfg.validate_for(width, height)?;
    let (gx, gy) = cfg.grid(width, height);
    if patches.shape() != [gx * gy, cfg.patch_dim()] {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![gx * gy, cfg.patch_dim()],
        });
    }
    let mut img = TextImage::filled(width, height, cfg.channels, 0.0)?;
    let mut it = patches.data().iter();
    for py in 0..gy {
        for px in 0..gx {
            for y in 0..cfg.patch_height {
                for x in 0..cfg.patch_width {
                    for c in 0..cfg.channels {
                        let v = it.next().expect("length checked").f64() as f32;
                        img.set(px * cfg.patch_width + x, py * cfg.patch_height + y, c, v);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Learned affine projection of flattened patches to the model dimension.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub proj: ParamId,
    pub bias: ParamId,
}

impl PatchEmbedding {
    pub fn init<T: Float>(
        store: &mut ParamStore<T>,
        cfg: &PatchConfig,
        d_model: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            proj: store.add("patch.proj", Tensor::randn(&[cfg.patch_dim(), d_model], 0.02, rng)),
            bias: store.add("patch.bias", Tensor::zeros(&[d_model])),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, patches: Var) -> Result<Var> {
        embed_patches(tape, patches, bound[self.proj], bound[self.bias])
    }
}

/// `patches[N×D_p] · proj[D_p×d] + bias[d]`.
pub fn embed_patches<T: Float>(tape: &mut Tape<T>, patches: Var, proj: Var, bias: Var) -> Result<Var> {
    let h = tape.matmul(patches, proj)?;
    tape.add_row(h, bias)
}

/// Row gather from the token table; the gradient reaches only gathered rows.
pub fn embed_tokens<T: Float>(tape: &mut Tape<T>, table: Var, ids: &[u32]) -> Result<Var> {
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    tape.gather_rows(table, &ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionKind {
    Image,
    Sep,
    Text,
}

/// Geometry of one assembled sequence: `patches` image positions, one
/// `[SEP]`, then `text` token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub patches: usize,
    pub text: usize,
}

impl SequenceLayout {
    /// Index of the `[SEP]` position.
    pub fn boundary(&self) -> usize {
        self.patches
    }

    pub fn len(&self) -> usize {
        self.patches + 1 + self.text
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kind(&self, pos: usize) -> PositionKind {
        match pos.cmp(&self.patches) {
            std::cmp::Ordering::Less => PositionKind::Image,
            std::cmp::Ordering::Equal => PositionKind::Sep,
            std::cmp::Ordering::Greater => PositionKind::Text,
        }
    }

    pub fn check(&self, max_len: usize) -> Result<()> {
        if self.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: self.len(),
                max: max_len,
                max_text: max_len.saturating_sub(self.patches + 1),
            });
        }
        Ok(())
    }
}

/// A batch of assembled sequences, stacked as `[batch*len, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedSequence {
    pub vectors: Var,
    pub layout: SequenceLayout,
    pub batch: usize,
}
