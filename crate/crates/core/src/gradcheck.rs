//! Central finite-difference check of the model loss gradient, in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::ModelConfig;
use crate::embedding::PatchConfig;
use crate::error::Result;
use crate::model::{Example, OcrModel, VocabInfo};
use crate::synthgen::{render_text, sample_rng, Style};
use crate::tensor::Tensor;
use crate::vision::TextImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Coordinates checked per parameter tensor: the largest-gradient ones
    /// plus the same number drawn at random.
    pub per_param: usize,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            per_param: 3,
            floor: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamResult>,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Two short rendered samples: the fixed input of the check.
pub fn fixture(vocab: &VocabInfo) -> Vec<(TextImage, Vec<u32>)> {
    [("Hi 7", Style::Printed, 0), ("ok", Style::Scene, 1)]
        .into_iter()
        .map(|(s, style, i)| {
            let img = render_text(s, style, &mut sample_rng(11, i))
                .expect("renderable")
                .normalized();
            let mut ids: Vec<u32> = s.bytes().map(u32::from).collect();
            ids.push(vocab.eos);
            (img, ids)
        })
        .collect()
}

/// Compares analytic and central-difference gradients on sampled coordinates
/// of every parameter tensor of a freshly initialized model.
pub fn check_model(
    model_cfg: &ModelConfig,
    patch: &PatchConfig,
    vocab: VocabInfo,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let data = fixture(&vocab);
    let model = OcrModel::<f64>::new(model_cfg, patch, vocab, cfg.seed)?;
    let batch: Vec<Example> = data.iter().map(|(image, target)| Example { image, target }).collect();
    let (_, grads) = model.loss_and_grads(&batch, None)?;
    let loss_at = |m: &OcrModel<f64>| -> Result<f64> {
        let mut tape = crate::tensor::Tape::new();
        let bound = m.params().bind(&mut tape, false);
        let l = m.batch_loss(&mut tape, &bound, &batch, None)?;
        Ok(tape.value(l).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9c);
    let mut jobs = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        for j in coordinates(g, cfg.per_param, &mut rng) {
            jobs.push((pi, j));
        }
    }
    let results: Vec<(usize, usize, f64)> = jobs
        .par_iter()
        .map(|&(pi, j)| {
            let mut m = model.clone();
            let orig = model.params().iter().nth(pi).expect("param index").1.data()[j];
            m.params_mut().tensors_mut()[pi].data_mut()[j] = orig + cfg.step;
            let up = loss_at(&m)?;
            m.params_mut().tensors_mut()[pi].data_mut()[j] = orig - cfg.step;
            let down = loss_at(&m)?;
            let numeric = (up - down) / (2.0 * cfg.step);
            Ok((pi, j, rel_err(grads[pi].data()[j], numeric, cfg.floor)))
        })
        .collect::<Result<_>>()?;
    let mut params: Vec<ParamResult> = model
        .params()
        .iter()
        .map(|(name, _)| ParamResult {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
        })
        .collect();
    for (pi, j, e) in results {
        let p = &mut params[pi];
        p.checked += 1;
        if p.checked == 1 || e > p.max_rel_err {
            p.max_rel_err = e;
            p.worst_index = j;
        }
    }
    let worst = params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("model has parameters");
    Ok(GradcheckReport {
        max_rel_err: worst.max_rel_err,
        worst_param: worst.name.clone(),
        tolerance: cfg.tolerance,
        params,
    })
}

fn coordinates(g: &Tensor<f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = g.numel();
    if n <= 2 * k {
        return (0..n).collect();
    }
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()).then(a.cmp(&b)));
    let mut out: Vec<usize> = by_mag[..k].to_vec();
    for j in sample(rng, n, 2 * k) {
        if out.len() == 2 * k {
            break;
        }
        if !out.contains(&j) {
            out.push(j);
        }
    }
    out
}
