//! Non-learned reference reconstructions.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::corpus::{CharId, GlyphImage, GlyphMatrix, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::l2_per_glyph;

/// Output of [`nn_baseline`].
#[derive(Clone, Debug, PartialEq)]
pub struct NnReconstruction {
    /// Train fonts by increasing mean L2 over the observed characters.
    pub ranking: Vec<(usize, f64)>,
    /// Reconstructed rows, each copied from the train font named alongside.
    pub glyphs: BTreeMap<usize, (usize, GlyphImage)>,
    /// Rows no train font can supply (absent or never seen in training).
    pub unsupported: Vec<usize>,
}

/// Glyphs of train font `j` usable by the baseline: masked characters were
/// never seen in training.
fn train_glyph<'m>(m: &'m GlyphMatrix, manifest: &SplitManifest, i: usize, j: usize) -> Option<&'m GlyphImage> {
    if manifest.is_masked(m.chars()[i]) {
        return None;
    }
    m.get(i, j)
}

/// Nearest train font by mean L2 over the observed characters of
/// `test_font`. Every other row is copied from the best-ranked train font
/// that has it.
pub fn nn_baseline(
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    test_font: usize,
    observed: &[usize],
) -> Result<NnReconstruction> {
    for &i in observed {
        if !matrix.present(i, test_font) {
            return Err(Error::InvalidArgument(alloc::format!(
                "observed character {:04x} is absent from font {}",
                matrix.chars()[i],
                matrix.fonts()[test_font]
            )));
        }
    }
    let train = manifest.fonts_in(matrix, Split::Train);
    let mut ranking: Vec<(usize, f64)> = train
        .iter()
        .map(|&j| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for &i in observed {
                if let Some(g) = train_glyph(matrix, manifest, i, j) {
                    sum += l2_per_glyph(matrix.get(i, test_font).unwrap(), g).expect("one corpus, one side");
                    n += 1;
                }
            }
            (j, if n == 0 { f64::INFINITY } else { sum / n as f64 })
        })
        .collect();
    if ranking.iter().all(|(_, d)| d.is_infinite()) {
        return Err(Error::InvalidArgument("no train font shares an observed character".into()));
    }
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut glyphs = BTreeMap::new();
    let mut unsupported = Vec::new();
    for i in (0..matrix.num_chars()).filter(|i| !observed.contains(i)) {
        match ranking.iter().find_map(|&(j, _)| train_glyph(matrix, manifest, i, j).map(|g| (j, g))) {
            Some((j, g)) => {
                glyphs.insert(i, (j, g.clone()));
            }
            None => unsupported.push(i),
        }
    }
    Ok(NnReconstruction { ranking, glyphs, unsupported })
}

/// Pixelwise mean of the train-split glyphs of character `c`.
pub fn mean_glyph_baseline(matrix: &GlyphMatrix, manifest: &SplitManifest, c: CharId) -> Result<GlyphImage> {
    let i = matrix.char_index(c).ok_or(Error::UnknownChar(c))?;
    let side = matrix.side();
    let mut acc = alloc::vec![0.0f64; side * side];
    let mut n = 0usize;
    for j in manifest.fonts_in(matrix, Split::Train) {
        if let Some(g) = matrix.get(i, j) {
            for (a, &v) in acc.iter_mut().zip(g.pixels()) {
                *a += v as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UnknownChar(c));
    }
    GlyphImage::new(side, acc.into_iter().map(|v| (v / n as f64) as f32).collect())
}
