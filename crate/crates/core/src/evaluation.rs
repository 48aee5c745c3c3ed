//! Few-shot reconstruction protocol.
//!
//! Character embeddings come from every train-split glyph of a row, masked
//! rows included. A held-out font is then observed through `n` of its known
//! characters and every other glyph it has is reconstructed and scored.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{mean_glyph_baseline, nn_baseline};
use crate::corpus::{CharId, FontId, GlyphImage, GlyphMatrix, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{l2_per_glyph, ssim};
use crate::model::{decode_batch, encode_characters, encode_font, LatentPosterior, ModelParams};
use crate::trainer::step_rng;

/// Observation counts of the standard protocol.
pub const DEFAULT_OBSERVATIONS: [usize; 4] = [1, 8, 16, 32];

/// `q(Y_i)` for every row with at least one train-split glyph.
pub fn character_posteriors(
    params: &ModelParams,
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
) -> Result<BTreeMap<CharId, LatentPosterior>> {
    let train = manifest.fonts_in(matrix, Split::Train);
    let mut out = BTreeMap::new();
    for (i, &c) in matrix.chars().iter().enumerate() {
        let glyphs: Vec<&GlyphImage> = train.iter().filter_map(|&j| matrix.get(i, j)).collect();
        if !glyphs.is_empty() {
            out.insert(c, encode_characters(params, &glyphs)?);
        }
    }
    Ok(out)
}

pub fn posterior_means(posts: &BTreeMap<CharId, LatentPosterior>) -> BTreeMap<CharId, Vec<f32>> {
    posts.iter().map(|(&c, p)| (c, p.mean.clone())).collect()
}

/// Seed-fixed choice of up to `n` known (never masked) characters present
/// in font `j`. Smaller `n` give prefixes of larger ones.
pub fn observation_set(matrix: &GlyphMatrix, manifest: &SplitManifest, j: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut known: Vec<usize> = matrix
        .chars_of_font(j)
        .into_iter()
        .filter(|&i| !manifest.is_masked(matrix.chars()[i]))
        .collect();
    known.shuffle(&mut step_rng(seed, j as u64));
    known.truncate(n);
    known
}

/// `q(Z_j)` from the given rows of font `j`.
pub fn font_posterior(
    params: &ModelParams,
    matrix: &GlyphMatrix,
    j: usize,
    rows: &[usize],
    chars: &BTreeMap<CharId, Vec<f32>>,
) -> Result<LatentPosterior> {
    let glyphs: Vec<(CharId, &GlyphImage)> = rows
        .iter()
        .map(|&i| {
            let g = matrix.get(i, j).ok_or(Error::UnknownChar(matrix.chars()[i]))?;
            Ok((matrix.chars()[i], g))
        })
        .collect::<Result<_>>()?;
    encode_font(params, &glyphs, chars)
}

/// Decodes `targets` in the style `z`. Every target needs an embedding.
pub fn reconstruct(
    params: &ModelParams,
    chars: &BTreeMap<CharId, Vec<f32>>,
    z: &[f32],
    targets: &[CharId],
) -> Result<Vec<GlyphImage>> {
    let pairs: Vec<(&[f32], &[f32])> = targets
        .iter()
        .map(|c| chars.get(c).map(|y| (y.as_slice(), z)).ok_or(Error::UnknownChar(*c)))
        .collect::<Result<_>>()?;
    decode_batch(params, &pairs)
}

/// Embeddings of one held-out font.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FontEmbedding {
    pub font: FontId,
    pub observed: Vec<CharId>,
    pub z: Vec<f32>,
}

/// Posterior means for every character and for each test font given `n`
/// observations (fewer when the font has fewer known glyphs).
#[derive(Clone, Debug, PartialEq)]
pub struct TestEmbeddings {
    pub chars: BTreeMap<CharId, Vec<f32>>,
    pub fonts: Vec<FontEmbedding>,
}

pub fn infer_test_embeddings(
    params: &ModelParams,
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<TestEmbeddings> {
    let chars = posterior_means(&character_posteriors(params, matrix, manifest)?);
    let mut fonts = Vec::new();
    for j in manifest.fonts_in(matrix, split) {
        let rows = observation_set(matrix, manifest, j, n, seed);
        if rows.is_empty() {
            log::warn!("font '{}' has no known glyphs to observe; skipped", matrix.fonts()[j]);
            continue;
        }
        let z = font_posterior(params, matrix, j, &rows, &chars)?.mean;
        fonts.push(FontEmbedding {
            font: matrix.fonts()[j].clone(),
            observed: rows.iter().map(|&i| matrix.chars()[i]).collect(),
            z,
        });
    }
    Ok(TestEmbeddings { chars, fonts })
}

/// Mean SSIM and L2 over a set of cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ssim: f64,
    pub l2: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    ssim: f64,
    l2: f64,
    count: usize,
}

impl Acc {
    fn add(&mut self, pred: &GlyphImage, gold: &GlyphImage) -> Result<()> {
        self.ssim += ssim(pred, gold)?;
        self.l2 += l2_per_glyph(pred, gold)?;
        self.count += 1;
        Ok(())
    }

    fn merge(&mut self, o: &Acc) {
        self.ssim += o.ssim;
        self.l2 += o.l2;
        self.count += o.count;
    }

    fn scores(&self) -> Scores {
        let n = self.count.max(1) as f64;
        Scores { ssim: self.ssim / n, l2: self.l2 / n, count: self.count }
    }
}

/// Known/unknown split of one method's scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub known: Scores,
    pub unknown: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FontReport {
    pub font: FontId,
    pub observed: Vec<CharId>,
    pub known: Scores,
    pub unknown: Scores,
}

/// Results for one observation count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub known: Scores,
    pub unknown: Scores,
    pub per_font: Vec<FontReport>,
    /// The same cells scored for the pixelwise-mean reconstruction.
    pub mean_glyph_baseline: SplitScores,
    /// Known cells the nearest-neighbour baseline could fill.
    pub nn_baseline: Scores,
}

/// Runs the protocol for each `n` over the fonts of `split`. Observed cells
/// are never scored; scored cells are known or unknown by the mask.
pub fn evaluate(
    params: &ModelParams,
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    split: Split,
    dataset: &str,
    ns: &[usize],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let chars = posterior_means(&character_posteriors(params, matrix, manifest)?);
    let mut means: BTreeMap<usize, GlyphImage> = BTreeMap::new();
    for (i, &c) in matrix.chars().iter().enumerate() {
        if let Ok(g) = mean_glyph_baseline(matrix, manifest, c) {
            means.insert(i, g);
        }
    }
    let mut reports = Vec::new();
    for &n in ns {
        let (mut known, mut unknown) = (Acc::default(), Acc::default());
        let (mut mean_known, mut mean_unknown, mut nn_known) = (Acc::default(), Acc::default(), Acc::default());
        let mut per_font = Vec::new();
        for j in manifest.fonts_in(matrix, split) {
            let rows = observation_set(matrix, manifest, j, n, seed);
            if rows.is_empty() {
                continue;
            }
            let z = font_posterior(params, matrix, j, &rows, &chars)?.mean;
            let targets: Vec<usize> = matrix
                .chars_of_font(j)
                .into_iter()
                .filter(|i| !rows.contains(i) && chars.contains_key(&matrix.chars()[*i]))
                .collect();
            let ids: Vec<CharId> = targets.iter().map(|&i| matrix.chars()[i]).collect();
            let preds = reconstruct(params, &chars, &z, &ids)?;
            let nn = nn_baseline(matrix, manifest, j, &rows).ok();
            let (mut fk, mut fu) = (Acc::default(), Acc::default());
            for (&i, pred) in targets.iter().zip(&preds) {
                let gold = matrix.get(i, j).unwrap();
                let masked = manifest.is_masked(matrix.chars()[i]);
                let acc = if masked { &mut fu } else { &mut fk };
                acc.add(pred, gold)?;
                if let Some(m) = means.get(&i) {
                    let acc = if masked { &mut mean_unknown } else { &mut mean_known };
                    acc.add(m, gold)?;
                }
                if let Some((_, g)) = nn.as_ref().and_then(|r| r.glyphs.get(&i)) {
                    nn_known.add(g, gold)?;
                }
            }
            known.merge(&fk);
            unknown.merge(&fu);
            per_font.push(FontReport {
                font: matrix.fonts()[j].clone(),
                observed: rows.iter().map(|&i| matrix.chars()[i]).collect(),
                known: fk.scores(),
                unknown: fu.scores(),
            });
        }
        reports.push(EvalReport {
            dataset: dataset.into(),
            n,
            known: known.scores(),
            unknown: unknown.scores(),
            per_font,
            mean_glyph_baseline: SplitScores { known: mean_known.scores(), unknown: mean_unknown.scores() },
            nn_baseline: nn_known.scores(),
        });
    }
    Ok(reports)
}

/// Posterior means of every character (from train glyphs) and every font
/// (from all of its glyphs whose character has an embedding).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub chars: Vec<(CharId, Vec<f32>)>,
    pub fonts: Vec<(FontId, Vec<f32>)>,
}

pub fn export_embeddings(params: &ModelParams, matrix: &GlyphMatrix, manifest: &SplitManifest) -> Result<EmbeddingTable> {
    let chars = posterior_means(&character_posteriors(params, matrix, manifest)?);
    let mut fonts = Vec::new();
    for (j, f) in matrix.fonts().iter().enumerate() {
        let rows: Vec<usize> =
            matrix.chars_of_font(j).into_iter().filter(|&i| chars.contains_key(&matrix.chars()[i])).collect();
        if rows.is_empty() {
            log::warn!("font '{f}' has no glyph with a character embedding; skipped");
            continue;
        }
        fonts.push((f.clone(), font_posterior(params, matrix, j, &rows, &chars)?.mean));
    }
    Ok(EmbeddingTable { chars: chars.into_iter().collect(), fonts })
}
