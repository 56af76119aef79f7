//! Deterministic synthetic text images in three styles, rendered with an
//! embedded bitmap font.

pub mod font;
mod words;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::vision::{gaussian_blur, TextImage, INPUT_HEIGHT, INPUT_WIDTH};
use font::{GLYPH_HEIGHT, GLYPH_WIDTH};

pub use words::WORDS;

/// Canvas pixels per font cell.
pub const SCALE: usize = 2;
/// Horizontal distance between glyph origins.
pub const ADVANCE: usize = 12;
pub const MARGIN_X: usize = 4;
/// Top row of a single line of printed text.
pub const LINE_TOP: usize = 9;
/// Top rows of the two lines of a two-line label.
pub const TWO_LINE_TOPS: [usize; 2] = [1, 17];
pub const MAX_LINES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Scene,
    Printed,
    Handwritten,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Scene, Style::Printed, Style::Handwritten];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Scene => "scene",
            Style::Printed => "printed",
            Style::Handwritten => "handwritten",
        }
    }
}

/// Fractions of each style, in `Style::ALL` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleMix {
    pub scene: f64,
    pub printed: f64,
    pub handwritten: f64,
}

impl Default for StyleMix {
    fn default() -> Self {
        Self {
            scene: 0.6,
            printed: 0.2,
            handwritten: 0.2,
        }
    }
}

impl StyleMix {
    pub fn fractions(&self) -> [f64; 3] {
        [self.scene, self.printed, self.handwritten]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "style fractions {f:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// Per-style counts by largest remainder; remainder ties favor the
    /// earlier style.
    pub fn counts(&self, total: usize) -> [usize; 3] {
        let f = self.fractions();
        let mut counts = [0usize; 3];
        let mut rem = [(0.0, 0usize); 3];
        for i in 0..3 {
            let exact = f[i] * total as f64;
            counts[i] = exact.floor() as usize;
            rem[i] = (exact - exact.floor(), i);
        }
        let left = total - counts.iter().sum::<usize>();
        rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in rem.iter().take(left) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Labels are drawn uniformly from this list.
    pub corpus: Vec<String>,
    pub mix: StyleMix,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub index: usize,
    pub style: Style,
    pub label: String,
    /// Raw `[0, 255]` grayscale at the model input size, integer valued.
    pub image: TextImage,
}

/// Splits a label into at most two lines, rejecting characters the font
/// cannot draw.
pub fn check_renderable(s: &str) -> Result<Vec<&str>> {
    if s.is_empty() {
        return Err(Error::invalid("cannot render an empty label"));
    }
    let bad: BTreeSet<char> = s.chars().filter(|&c| c != '\n' && font::glyph(c).is_none()).collect();
    if !bad.is_empty() {
        return Err(Error::Unrenderable {
            chars: bad.into_iter().collect(),
        });
    }
    let lines: Vec<&str> = s.split('\n').collect();
    if lines.len() > MAX_LINES {
        return Err(Error::invalid(format!(
            "label has {} lines, at most {MAX_LINES} supported",
            lines.len()
        )));
    }
    Ok(lines)
}

/// Ink coverage in `[0, 1]` on a canvas.
struct Canvas {
    width: usize,
    height: usize,
    cov: Vec<f32>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cov: vec![0.0; width * height],
        }
    }

    fn fill(&mut self, x0: f64, y0: f64, w: f64, h: f64) {
        let xs = x0.round().max(0.0) as usize..((x0 + w).round().max(0.0) as usize).min(self.width);
        let ys = y0.round().max(0.0) as usize..((y0 + h).round().max(0.0) as usize).min(self.height);
        for y in ys {
            for x in xs.clone() {
                self.cov[y * self.width + x] = 1.0;
            }
        }
    }
}

fn canvas_width(lines: &[&str]) -> usize {
    let longest = lines.iter().map(|l| l.chars().count()).max().unwrap_or(0);
    (ADVANCE * longest + 2 * MARGIN_X).max(INPUT_WIDTH)
}

fn line_tops(n: usize) -> Vec<usize> {
    if n == 1 {
        vec![LINE_TOP]
    } else {
        TWO_LINE_TOPS.to_vec()
    }
}

/// Draws glyph cells as `SCALE`-sized blocks. `jitter` gives per-glyph
/// (dx, dy, slant, extra thickness).
fn draw(canvas: &mut Canvas, lines: &[&str], mut jitter: impl FnMut() -> (f64, f64, f64, f64)) {
    let s = SCALE as f64;
    for (line, top) in lines.iter().zip(line_tops(lines.len())) {
        for (i, c) in line.chars().enumerate() {
            let (dx, dy, slant, thick) = jitter();
            let ox = (MARGIN_X + i * ADVANCE) as f64 + dx;
            let oy = top as f64 + dy;
            for gy in 0..GLYPH_HEIGHT {
                let shear = slant * ((GLYPH_HEIGHT as f64 - 1.0) / 2.0 - gy as f64) * s;
                for gx in 0..GLYPH_WIDTH {
                    if font::ink(c, gx, gy) {
                        canvas.fill(ox + gx as f64 * s + shear, oy + gy as f64 * s, s + thick, s + thick);
                    }
                }
            }
        }
    }
}

fn compose(canvas: &Canvas, bg: f64, fg: f64) -> TextImage {
    let px = canvas.cov.iter().map(|&c| (bg + (fg - bg) * c as f64) as f32).collect();
    TextImage::new(canvas.width, canvas.height, 1, px).expect("canvas is non-empty")
}

fn add_noise(img: &mut TextImage, amp: f64, rng: &mut impl Rng) {
    if amp > 0.0 {
        for v in img.pixels_mut() {
            *v += rng.random_range(-amp..=amp) as f32;
        }
    }
}

/// Perspective-like warp: horizontal keystone plus shear and a small tilt.
fn warp(img: &TextImage, keystone: f64, shear: f64, tilt: f64, bg: f32) -> TextImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let sx = px * (1.0 + keystone * py / h) + shear * py + cx;
            let sy = py + tilt * px / w * h + cy;
            let v = if sx < -0.5 || sy < -0.5 || sx > w - 0.5 || sy > h - 0.5 {
                bg
            } else {
                let (x0, y0) = (
                    sx.round().clamp(0.0, w - 1.0) as usize,
                    sy.round().clamp(0.0, h - 1.0) as usize,
                );
                img.get(x0, y0, 0)
            };
            out.set(x, y, 0, v);
        }
    }
    out
}

fn finish(img: TextImage) -> Result<TextImage> {
    let mut img = img.resize(INPUT_WIDTH, INPUT_HEIGHT)?;
    for v in img.pixels_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }
    Ok(img)
}

/// Renders `s` (at most two lines) in `style`. Returns a raw 128x32
/// grayscale image; the label is `s` itself.
pub fn render_text(s: &str, style: Style, rng: &mut impl Rng) -> Result<TextImage> {
    let lines = check_renderable(s)?;
    let mut canvas = Canvas::new(canvas_width(&lines), INPUT_HEIGHT);
    match style {
        Style::Printed => {
            draw(&mut canvas, &lines, || (0.0, 0.0, 0.0, 0.0));
            let bg = rng.random_range(225.0..=255.0);
            let fg = rng.random_range(0.0..=30.0);
            let mut img = compose(&canvas, bg, fg);
            add_noise(&mut img, rng.random_range(0.0..=20.0), rng);
            finish(img)
        }
        Style::Scene => {
            let (dx, dy) = (rng.random_range(-2.0..=6.0), rng.random_range(-2.0..=2.0));
            draw(&mut canvas, &lines, || {
                (dx, if lines.len() == 1 { dy } else { 0.0 }, 0.0, 0.0)
            });
            let bg: f64 = rng.random_range(40.0..=215.0);
            let contrast = rng.random_range(70.0..=140.0);
            let fg = if bg > 127.5 { bg - contrast } else { bg + contrast }.clamp(0.0, 255.0);
            let img = compose(&canvas, bg, fg);
            let img = warp(
                &img,
                rng.random_range(-0.3..=0.3),
                rng.random_range(-0.25..=0.25),
                rng.random_range(-0.04..=0.04),
                bg as f32,
            );
            let mut img = gaussian_blur(&img, rng.random_range(0.4..=1.2));
            add_noise(&mut img, rng.random_range(4.0..=15.0), rng);
            finish(img)
        }
        Style::Handwritten => {
            let base_slant = rng.random_range(-0.2..=0.2);
            draw(&mut canvas, &lines, || {
                (
                    rng.random_range(-1.5..=1.5),
                    rng.random_range(-1.5..=1.5),
                    base_slant + rng.random_range(-0.12..=0.12),
                    if rng.random_bool(0.4) { 1.0 } else { 0.0 },
                )
            });
            let bg = rng.random_range(215.0..=250.0);
            let fg = rng.random_range(10.0..=80.0);
            let img = compose(&canvas, bg, fg);
            let mut img = gaussian_blur(&img, 0.5);
            add_noise(&mut img, 6.0, rng);
            finish(img)
        }
    }
}

/// Per-sample generator, independent of evaluation order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Style of every sample: exact largest-remainder counts, shuffled by `seed`.
pub fn assign_styles(mix: &StyleMix, count: usize, seed: u64) -> Vec<Style> {
    let mut styles: Vec<Style> = Style::ALL
        .iter()
        .zip(mix.counts(count))
        .flat_map(|(&s, n)| std::iter::repeat_n(s, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    styles.shuffle(&mut rng);
    styles
}

/// Renders `spec.count` samples in parallel; output is identical to a serial
/// run.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.mix.validate()?;
    if spec.corpus.is_empty() {
        return Err(Error::invalid("synthetic corpus is empty"));
    }
    for w in &spec.corpus {
        check_renderable(w)?;
    }
    let styles = assign_styles(&spec.mix, spec.count, spec.seed);
    styles
        .into_par_iter()
        .enumerate()
        .map(|(index, style)| {
            let mut rng = sample_rng(spec.seed, index);
            let label = spec.corpus[rng.random_range(0..spec.corpus.len())].clone();
            let image = render_text(&label, style, &mut rng)?;
            Ok(SynthSample {
                index,
                style,
                label,
                image,
            })
        })
        .collect()
}

pub fn image_name(index: usize) -> PathBuf {
    PathBuf::from(format!("images/{index:06}.pgm"))
}

/// Writes `images/NNNNNN.pgm` files and `manifest.tsv` under `out_dir`;
/// returns the manifest path.
pub fn write_dataset(samples: &[SynthSample], out_dir: &Path) -> Result<PathBuf> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    samples
        .par_iter()
        .try_for_each(|s| s.image.save_pnm(&out_dir.join(image_name(s.index))))?;
    let entries: Vec<ManifestEntry> = samples
        .iter()
        .map(|s| ManifestEntry {
            path: image_name(s.index),
            label: s.label.clone(),
        })
        .collect();
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Corpus file: one label per line, `\n` escapes allowed for two-line labels.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| crate::dataset::unescape_label(l).map_err(|reason| Error::Manifest { line: i + 1, reason }))
        .collect()
}

pub fn builtin_corpus() -> Vec<String> {
    WORDS.iter().map(|w| w.to_string()).collect()
}
