//! The sparse character x font glyph matrix and the operations that shape
//! it into training data: near-duplicate removal, family-respecting splits,
//! character-type masking and batch sampling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;

/// Unicode codepoint of a character type.
pub type CharId = u32;
pub type FontId = String;

/// Fraction of character types hidden from training.
pub const MASK_FRACTION: f64 = 0.2;
/// Train : dev : test, by font count.
pub const SPLIT_RATIO: [f64; 3] = [3.0, 1.0, 1.0];

/// Square grayscale raster with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    side: usize,
    pixels: Vec<f32>,
}

impl GlyphImage {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 || !side.is_power_of_two() || pixels.len() != side * side {
            return Err(Error::BadImageShape { side, len: pixels.len() });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(alloc::format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self::new(side, vec![value; side * side]).expect("valid constant image")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }
}

/// Sparse `I x J` grid of glyphs: rows are character types, columns fonts.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphMatrix {
    side: usize,
    chars: Vec<CharId>,
    fonts: Vec<FontId>,
    family: BTreeMap<FontId, String>,
    cells: BTreeMap<(usize, usize), GlyphImage>,
}

impl GlyphMatrix {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            chars: Vec::new(),
            fonts: Vec::new(),
            family: BTreeMap::new(),
            cells: BTreeMap::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn chars(&self) -> &[CharId] {
        &self.chars
    }

    pub fn fonts(&self) -> &[FontId] {
        &self.fonts
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn num_fonts(&self) -> usize {
        self.fonts.len()
    }

    pub fn char_index(&self, c: CharId) -> Option<usize> {
        self.chars.iter().position(|&x| x == c)
    }

    pub fn font_index(&self, f: &str) -> Option<usize> {
        self.fonts.iter().position(|x| x == f)
    }

    /// Adds a character row if it is not already present; returns its index.
    pub fn add_char(&mut self, c: CharId) -> usize {
        match self.char_index(c) {
            Some(i) => i,
            None => {
                self.chars.push(c);
                self.chars.len() - 1
            }
        }
    }

    pub fn add_font(&mut self, f: &str) -> usize {
        match self.font_index(f) {
            Some(j) => j,
            None => {
                self.fonts.push(f.to_string());
                self.fonts.len() - 1
            }
        }
    }

    pub fn set_family(&mut self, font: &str, family: &str) {
        self.family.insert(font.to_string(), family.to_string());
    }

    /// Family of a font; fonts without metadata form their own family.
    pub fn family_of(&self, font: &str) -> String {
        self.family.get(font).cloned().unwrap_or_else(|| font.to_string())
    }

    pub fn families(&self) -> &BTreeMap<FontId, String> {
        &self.family
    }

    pub fn insert(&mut self, c: CharId, font: &str, image: GlyphImage) -> Result<()> {
        if image.side() != self.side {
            return Err(Error::BadImageShape { side: image.side(), len: image.pixels().len() });
        }
        let i = self.add_char(c);
        let j = self.add_font(font);
        self.cells.insert((i, j), image);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&GlyphImage> {
        self.cells.get(&(i, j))
    }

    pub fn present(&self, i: usize, j: usize) -> bool {
        self.cells.contains_key(&(i, j))
    }

    /// Present `(char_index, font_index)` cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &GlyphImage)> {
        self.cells.iter().map(|(&(i, j), g)| (i, j, g))
    }

    pub fn num_present(&self) -> usize {
        self.cells.len()
    }

    /// Row indices present in column `j`.
    pub fn chars_of_font(&self, j: usize) -> Vec<usize> {
        (0..self.chars.len()).filter(|&i| self.present(i, j)).collect()
    }

    pub fn fonts_of_char(&self, i: usize) -> Vec<usize> {
        (0..self.fonts.len()).filter(|&j| self.present(i, j)).collect()
    }

    /// The same matrix restricted to the given columns (kept in the given
    /// order). Character rows are kept even if they become empty.
    pub fn select_fonts(&self, keep: &[usize]) -> Self {
        let mut out = Self::new(self.side);
        out.chars = self.chars.clone();
        for (nj, &j) in keep.iter().enumerate() {
            let f = &self.fonts[j];
            out.fonts.push(f.clone());
            if let Some(fam) = self.family.get(f) {
                out.family.insert(f.clone(), fam.clone());
            }
            for i in 0..self.chars.len() {
                if let Some(g) = self.get(i, j) {
                    out.cells.insert((i, nj), g.clone());
                }
            }
        }
        out
    }
}

/// Mean per-glyph L2 (sum of squared differences) over the characters both
/// fonts support; `+inf` when they share none.
pub fn font_distance(m: &GlyphMatrix, a: usize, b: usize) -> f64 {
    let mut total = 0.0;
    let mut shared = 0usize;
    for i in 0..m.num_chars() {
        if let (Some(x), Some(y)) = (m.get(i, a), m.get(i, b)) {
            total += metrics::l2_per_glyph(x, y).expect("glyphs of one corpus share a side");
            shared += 1;
        }
    }
    if shared == 0 {
        f64::INFINITY
    } else {
        total / shared as f64
    }
}

/// One merge of an agglomerative clustering: slots `a` and `b` joined at
/// `height`; the merged cluster keeps slot `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Average-linkage agglomerative clustering by the nearest-neighbour chain
/// algorithm. Pairs at infinite distance are never merged.
pub fn average_linkage(dist: &[Vec<f64>]) -> Vec<Merge> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut remaining = n;
    let mut merges = Vec::new();
    let mut chain: Vec<usize> = Vec::new();
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let a = *chain.last().unwrap();
        let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
        let mut best: Option<usize> = prev;
        for k in 0..n {
            if k == a || !active[k] {
                continue;
            }
            match best {
                None => best = Some(k),
                Some(bk) if d[a][k] < d[a][bk] => best = Some(k),
                _ => {}
            }
        }
        let b = best.unwrap();
        if !d[a][b].is_finite() {
            // Nothing finite left for this cluster: retire it.
            active[a] = false;
            remaining -= 1;
            chain.clear();
            continue;
        }
        if Some(b) == prev {
            chain.pop();
            chain.pop();
            let (a, b) = (a.min(b), a.max(b));
            merges.push(Merge { a, b, height: d[a][b] });
            for k in 0..n {
                if active[k] && k != a && k != b {
                    let v = (size[a] as f64 * d[a][k] + size[b] as f64 * d[b][k])
                        / (size[a] + size[b]) as f64;
                    d[a][k] = v;
                    d[k][a] = v;
                }
            }
            size[a] += size[b];
            active[b] = false;
            remaining -= 1;
        } else {
            chain.push(b);
        }
    }
    merges
}

/// Flat clusters from cutting the dendrogram at `cut_height` (merges at or
/// below the cut are applied). Returned sorted by smallest member.
pub fn cut_dendrogram(n: usize, merges: &[Merge], cut_height: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for m in merges.iter().filter(|m| m.height <= cut_height) {
        let (ra, rb) = (root(&mut parent, m.a), root(&mut parent, m.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for x in 0..n {
        let r = root(&mut parent, x);
        groups.entry(r).or_default().push(x);
    }
    groups.into_values().collect()
}

/// Member with the smallest total distance to the rest of its cluster
/// (lowest index on ties).
pub fn medoid(cluster: &[usize], dist: &[Vec<f64>]) -> usize {
    let mut best = cluster[0];
    let mut best_cost = f64::INFINITY;
    for &c in cluster {
        let cost: f64 = cluster.iter().filter(|&&o| o != c).map(|&o| dist[c][o]).sum();
        if cost < best_cost || (cost == best_cost && c < best) {
            best = c;
            best_cost = cost;
        }
    }
    best
}

/// Removes near-duplicate fonts: average-linkage clustering under
/// [`font_distance`], cut at `cut_height`, keeping each cluster's medoid.
/// The pass is repeated on the survivors until nothing merges, so the result
/// is a fixed point.
pub fn dedup_fonts(matrix: &GlyphMatrix, cut_height: f64) -> Result<GlyphMatrix> {
    if !(cut_height > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("cut height must be > 0, got {cut_height}")));
    }
    let mut current = matrix.clone();
    loop {
        let n = current.num_fonts();
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|a| (0..n).map(|b| if a == b { 0.0 } else { font_distance(&current, a, b) }).collect())
            .collect();
        let clusters = cut_dendrogram(n, &average_linkage(&dist), cut_height);
        if clusters.len() == n {
            return Ok(current);
        }
        let mut keep: Vec<usize> = clusters.iter().map(|c| medoid(c, &dist)).collect();
        keep.sort_unstable();
        current = current.select_fonts(&keep);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Font-to-split assignment and the character types hidden during training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: BTreeMap<FontId, Split>,
    pub masked_chars: BTreeSet<CharId>,
    pub rng_seed: u64,
}

impl SplitManifest {
    pub fn split_of(&self, font: &str) -> Option<Split> {
        self.split.get(font).copied()
    }

    pub fn fonts_in<'m>(&self, matrix: &'m GlyphMatrix, split: Split) -> Vec<usize> {
        (0..matrix.num_fonts())
            .filter(|&j| self.split_of(&matrix.fonts()[j]) == Some(split))
            .collect()
    }

    pub fn is_masked(&self, c: CharId) -> bool {
        self.masked_chars.contains(&c)
    }
}

pub fn masked_count(num_chars: usize) -> usize {
    libm::round(MASK_FRACTION * num_chars as f64) as usize
}

/// Shuffles families by `seed` and deals them into train/dev/test at 3:1:1
/// by font count (each split first receives one family, then every family
/// goes to the split furthest below its target). Also draws the masked
/// character types.
pub fn make_splits(matrix: &GlyphMatrix, seed: u64) -> Result<SplitManifest> {
    let mut families: BTreeMap<String, Vec<FontId>> = BTreeMap::new();
    for f in matrix.fonts() {
        families.entry(matrix.family_of(f)).or_default().push(f.clone());
    }
    if families.len() < 3 {
        return Err(Error::TooFewFamilies(families.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<Vec<FontId>> = families.into_values().collect();
    order.shuffle(&mut rng);

    let total = matrix.num_fonts() as f64;
    let ratio_sum: f64 = SPLIT_RATIO.iter().sum();
    let targets: Vec<f64> = SPLIT_RATIO.iter().map(|r| r / ratio_sum * total).collect();
    let splits = [Split::Train, Split::Dev, Split::Test];
    let mut counts = [0usize; 3];
    let mut split = BTreeMap::new();
    for (n, fam) in order.into_iter().enumerate() {
        let s = if n < 3 {
            n
        } else {
            let mut best = 0;
            for k in 1..3 {
                if targets[k] - counts[k] as f64 > targets[best] - counts[best] as f64 {
                    best = k;
                }
            }
            best
        };
        counts[s] += fam.len();
        for f in fam {
            split.insert(f, splits[s]);
        }
    }

    let k = masked_count(matrix.num_chars());
    let masked_chars = rand::seq::index::sample(&mut rng, matrix.num_chars(), k)
        .into_iter()
        .map(|i| matrix.chars()[i])
        .collect();
    Ok(SplitManifest { split, masked_chars, rng_seed: seed })
}

/// Shape of a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub fonts: usize,
    pub chars_per_font: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { fonts: 10, chars_per_font: 20 }
    }
}

/// Fonts (column indices) and, per font, the observed character rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub fonts: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl Batch {
    /// `(char_index, font_index)` of every observed cell, font-major.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.fonts
            .iter()
            .zip(&self.chars)
            .flat_map(|(&j, cs)| cs.iter().map(move |&i| (i, j)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.chars.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Present, unmasked rows of column `j`.
pub fn trainable_chars(matrix: &GlyphMatrix, manifest: &SplitManifest, j: usize) -> Vec<usize> {
    matrix
        .chars_of_font(j)
        .into_iter()
        .filter(|&i| !manifest.is_masked(matrix.chars()[i]))
        .collect()
}

/// Draws training fonts without replacement and, for each, up to
/// `chars_per_font` of its present unmasked glyphs.
pub fn sample_batch<R: Rng + ?Sized>(
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<Batch> {
    let mut candidates = manifest.fonts_in(matrix, Split::Train);
    if candidates.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    candidates.shuffle(rng);
    let mut batch = Batch { fonts: Vec::new(), chars: Vec::new() };
    for j in candidates {
        if batch.fonts.len() == spec.fonts {
            break;
        }
        let usable = trainable_chars(matrix, manifest, j);
        if usable.is_empty() {
            log::warn!("font '{}' has no unmasked glyphs; drawing another", matrix.fonts()[j]);
            continue;
        }
        let take = spec.chars_per_font.min(usable.len());
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, usable.len(), take)
            .into_iter()
            .map(|k| usable[k])
            .collect();
        chosen.sort_unstable();
        batch.fonts.push(j);
        batch.chars.push(chosen);
    }
    if batch.fonts.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    Ok(batch)
}

/// Support counts of the presence bitmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub num_chars: usize,
    pub num_fonts: usize,
    pub present: usize,
    pub density: f64,
    pub per_char: BTreeMap<CharId, usize>,
    pub per_font: BTreeMap<FontId, usize>,
}

pub fn coverage_report(matrix: &GlyphMatrix) -> CoverageReport {
    let mut per_char: BTreeMap<CharId, usize> = matrix.chars().iter().map(|&c| (c, 0)).collect();
    let mut per_font: BTreeMap<FontId, usize> = matrix.fonts().iter().map(|f| (f.clone(), 0)).collect();
    for (i, j, _) in matrix.cells() {
        *per_char.get_mut(&matrix.chars()[i]).unwrap() += 1;
        *per_font.get_mut(&matrix.fonts()[j]).unwrap() += 1;
    }
    let cells = matrix.num_chars() * matrix.num_fonts();
    CoverageReport {
        num_chars: matrix.num_chars(),
        num_fonts: matrix.num_fonts(),
        present: matrix.num_present(),
        density: if cells == 0 { 0.0 } else { matrix.num_present() as f64 / cells as f64 },
        per_char,
        per_font,
    }
}
