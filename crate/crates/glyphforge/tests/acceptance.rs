//! Acceptance suite. Prints one line per criterion and exits nonzero when
//! any fails. Numeric arguments select criteria (`cargo test --test
//! acceptance -- 1 3 11`); with none, all run.
//!
//! Criteria 8 and 9 train toy models end to end through `run::train` and
//! take roughly ten and fifteen minutes on one CPU core.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use glyphforge::checkpoint;
use glyphforge::config::{ModelSpec, Preset, TrainFile, CONFIG_VERSION};
use glyphforge::run::{self, LATEST};
use glyphforge::store::{serialize, write_json};
use glyphforge_core::adaptive_loss::{PartitionTable, WaveletLikelihood, DEFAULT_EPSILON, TABLE_POINTS};
use glyphforge_core::autodiff::PoolMode;
use glyphforge_core::baselines::{mean_glyph_baseline, nn_baseline};
use glyphforge_core::corpus::{
    make_splits, sample_batch, BatchSpec, CharId, GlyphImage, GlyphMatrix, Split, SplitManifest,
};
use glyphforge_core::evaluation::{character_posteriors, font_posterior, observation_set, posterior_means, reconstruct};
use glyphforge_core::interpolate::interpolate;
use glyphforge_core::metrics::ssim;
use glyphforge_core::model::{
    decode, elbo, encode_characters, encode_font, init_params, ModelConfig, ModelParams,
};
use glyphforge_core::optim::AdamConfig;
use glyphforge_core::synthetic::toy_corpus;
use glyphforge_core::wavelet::{cdf97_forward, cdf97_inverse, forward_1d, max_levels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut ChaCha8Rng, side: usize) -> GlyphImage {
    GlyphImage::new(side, (0..side * side).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Noise corpus with every font in train and nothing masked.
fn noise_corpus(fonts: usize, chars: usize, side: usize, seed: u64) -> (GlyphMatrix, SplitManifest) {
    let mut r = rng(seed);
    let mut m = GlyphMatrix::new(side);
    for j in 0..fonts {
        for i in 0..chars {
            m.insert(0x41 + i as CharId, &format!("f{j}"), random_image(&mut r, side)).unwrap();
        }
    }
    (m.clone(), all_train(&m))
}

fn all_train(m: &GlyphMatrix) -> SplitManifest {
    SplitManifest {
        split: m.fonts().iter().map(|f| (f.clone(), Split::Train)).collect(),
        masked_chars: BTreeSet::new(),
        rng_seed: 0,
    }
}

fn table() -> &'static PartitionTable {
    static T: std::sync::OnceLock<PartitionTable> = std::sync::OnceLock::new();
    T.get_or_init(|| PartitionTable::build(TABLE_POINTS))
}

fn wavelet_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..64 * 64).map(|_| r.random::<f64>()).collect();
        let back = cdf97_inverse(&cdf97_forward(&x, 64, max_levels(64)).unwrap());
        for (a, b) in x.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    let t = start.elapsed();
    outcome(worst < 1e-9 && t < Duration::from_secs(5), format!("max error {worst:.2e}, {:.3} s", t.as_secs_f64()))
}

/// `log |det A|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut log_det = 0.0;
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, p);
        let pivot = a[col][col];
        log_det += pivot.abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / pivot;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    log_det
}

fn volume_preservation() -> Outcome {
    let n = 64;
    let mut scratch = Vec::new();
    let mut cols = Vec::with_capacity(n);
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        forward_1d(&mut e, &mut scratch);
        cols.push(e);
    }
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|k| cols[k][i]).collect()).collect();
    let det = log_abs_det(a).exp();
    outcome((det - 1.0).abs() < 1e-6, format!("|det| = {det:.12}"))
}

/// Composite Simpson on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn normalization() -> Outcome {
    let t = table();
    let mut worst = 0.0f64;
    let mut at = (0.0, 0.0);
    for alpha in [0.1, 0.5, 1.0, 1.5, 1.99] {
        for sigma in [0.5, 1.0, 2.0] {
            // x = e^s: the heavy tails at small alpha reach far beyond 1e6.
            let density = |s: f64| {
                let x = s.exp();
                (-t.nll(x, 0.0, sigma, alpha).unwrap()).exp() * x
            };
            let below = (-t.nll(0.0, 0.0, sigma, alpha).unwrap()).exp() * (-40.0f64).exp();
            let mass = 2.0 * (simpson(density, -40.0, 80.0, 240_000) + below);
            if (mass - 1.0).abs() > worst {
                worst = (mass - 1.0).abs();
                at = (alpha, sigma);
            }
        }
    }
    outcome(worst < 1e-4, format!("max |mass - 1| {worst:.2e} at alpha {}, sigma {}", at.0, at.1))
}

fn limits() -> Outcome {
    let t = table();
    let (mut normal, mut cauchy) = (0.0f64, 0.0f64);
    for r in [0.0f64, 1.0, 3.0, 10.0] {
        let n = 0.5 * r * r + 0.5 * (2.0 * std::f64::consts::PI).ln();
        normal = normal.max((t.nll(r, 0.0, 1.0, 2.0 - 1e-9).unwrap() - n).abs());
        let c = (0.5 * r * r + 1.0).ln() + (std::f64::consts::PI * 2f64.sqrt()).ln();
        cauchy = cauchy.max((t.nll(r, 0.0, 1.0, 1e-4).unwrap() - c).abs());
    }
    outcome(normal < 1e-4 && cauchy < 1e-2, format!("normal limit error {normal:.2e}, cauchy limit error {cauchy:.2e}"))
}

fn gradients() -> Outcome {
    let t = table();
    let h = 1e-5;
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = r.random_range(-5.0..5.0);
        let p = [r.random_range(-5.0..5.0), r.random_range(-3.0..3.0), r.random_range(-2.0..2.0)];
        let f = |q: [f64; 3]| t.latent_nll_with_grad(x, q[0], q[1], q[2], DEFAULT_EPSILON).value;
        let g = t.latent_nll_with_grad(x, p[0], p[1], p[2], DEFAULT_EPSILON);
        for (k, analytic) in [g.d_mu, g.d_latent_shape, g.d_latent_scale].into_iter().enumerate() {
            let (mut up, mut down) = (p, p);
            up[k] += h;
            down[k] -= h;
            let fd = (f(up) - f(down)) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs());
            if scale > 1e-8 {
                worst = worst.max((analytic - fd).abs() / scale);
            }
        }
    }

    let (m, manifest) = noise_corpus(4, 6, 64, 6);
    let cfg = ModelConfig::toy();
    let params = init_params(&cfg, &mut rng(7)).unwrap();
    let lik = WaveletLikelihood::new(t, 64, cfg.wavelet_levels).unwrap();
    let batch = sample_batch(&m, &manifest, BatchSpec { fonts: 4, chars_per_font: 4 }, &mut rng(8)).unwrap();
    let out = elbo(&params, &lik, &m, &batch, &mut rng(9)).unwrap();
    let norms = out.grads.group_norms();
    let zero: Vec<&String> = norms.iter().filter(|(_, &v)| !(v > 0.0)).map(|(k, _)| k).collect();
    let min = norms.values().copied().fold(f64::INFINITY, f64::min);
    outcome(
        worst < 1e-4 && zero.is_empty() && norms.len() > 1,
        format!(
            "max relative error {worst:.2e}; groups {:?}, min gradient norm {min:.2e}, zero: {zero:?}",
            norms.keys().collect::<Vec<_>>()
        ),
    )
}

fn initialization() -> Outcome {
    let mut bad = 0usize;
    let mut total = 0usize;
    for cfg in [ModelConfig::default(), ModelConfig::toy()] {
        let params = init_params(&cfg, &mut rng(10)).unwrap();
        for (alpha, sigma) in params.loss_params().mapped() {
            total += 1;
            if alpha != 1.0 || sigma != 1.0 + cfg.epsilon {
                bad += 1;
            }
        }
    }
    outcome(bad == 0 && total > 0, format!("{bad} of {total} coefficients differ from alpha 1, sigma 1 + eps"))
}

fn set_semantics() -> Outcome {
    let mut r = rng(11);
    let mut perm_err = 0.0f64;
    let mut dup_exact = true;
    for pooling in [PoolMode::Max, PoolMode::Min] {
        let mut cfg = ModelConfig::toy();
        cfg.pooling = pooling;
        let params = init_params(&cfg, &mut rng(12)).unwrap();
        let glyphs: Vec<GlyphImage> = (0..6).map(|_| random_image(&mut r, 64)).collect();
        let set: Vec<&GlyphImage> = glyphs.iter().collect();
        let permuted: Vec<&GlyphImage> = [3, 0, 5, 1, 4, 2].iter().map(|&k| &glyphs[k]).collect();
        let a = encode_characters(&params, &set).unwrap();
        let b = encode_characters(&params, &permuted).unwrap();
        perm_err = perm_err.max(max_diff(&a.mean, &b.mean));

        let embeddings: BTreeMap<CharId, Vec<f32>> =
            (0..6).map(|c| (c as CharId, (0..cfg.k).map(|_| r.random_range(-1.0..1.0)).collect())).collect();
        let font: Vec<(CharId, &GlyphImage)> = glyphs.iter().enumerate().map(|(c, g)| (c as CharId, g)).collect();
        let font_perm: Vec<(CharId, &GlyphImage)> = [4, 2, 0, 5, 3, 1].iter().map(|&k| font[k]).collect();
        let fa = encode_font(&params, &font, &embeddings).unwrap();
        let fb = encode_font(&params, &font_perm, &embeddings).unwrap();
        perm_err = perm_err.max(max_diff(&fa.mean, &fb.mean));

        if pooling == PoolMode::Max {
            let mut dup = set.clone();
            dup.insert(2, set[4]);
            dup_exact &= encode_characters(&params, &dup).unwrap() == a;
            let mut fdup = font.clone();
            fdup.push(font[1]);
            dup_exact &= encode_font(&params, &fdup, &embeddings).unwrap() == fa;
        }
    }
    outcome(
        perm_err < 1e-6 && dup_exact,
        format!("max permutation change {perm_err:.2e}; duplicate under max pooling unchanged: {dup_exact}"),
    )
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Writes the corpus, splits and config under `root`, trains, and returns
/// the final parameters, the per-step -ELBO and the wall time.
fn train_toy(
    root: &Path,
    cache: &Path,
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    steps: u64,
) -> (GlyphMatrix, ModelParams, Vec<f64>, Duration) {
    serialize(matrix, &root.join("corpus")).unwrap();
    write_json(&root.join("splits.json"), manifest).unwrap();
    let cfg = TrainFile {
        version: CONFIG_VERSION,
        corpus: root.join("corpus"),
        splits: root.join("splits.json"),
        checkpoint_dir: root.join("ckpt"),
        metrics: None,
        partition_cache: cache.to_path_buf(),
        seed: 0,
        steps,
        batch: BatchSpec { fonts: 4, chars_per_font: 8 },
        optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        checkpoint_every: 1000,
        dev_observations: 8,
        resume: false,
        model: ModelSpec { preset: Preset::Toy, ..ModelSpec::default() },
    };
    let mut losses = Vec::new();
    let start = Instant::now();
    run::train(&cfg, |m| losses.push(-m.elbo)).unwrap();
    let took = start.elapsed();
    let ck = checkpoint::load(&cfg.checkpoint_dir.join(LATEST)).unwrap();
    let stored = glyphforge::store::ingest(&root.join("corpus"), None).unwrap();
    (stored, ck.state.params, losses, took)
}

fn ink(g: &GlyphImage) -> f64 {
    g.pixels().iter().filter(|&&v| v > 0.5).count() as f64 / g.pixels().len() as f64
}

fn toy_overfit(cache: &Path) -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let matrix = toy_corpus(8, 16, 64, 1).unwrap();
    let manifest = all_train(&matrix);
    let (m, params, losses, took) = train_toy(dir.path(), cache, &matrix, &manifest, 2000);

    let ma: Vec<f64> = (50..=200).map(|end| losses[end - 50..end].iter().sum::<f64>() / 50.0).collect();
    let violations = ma.windows(2).filter(|w| !(w[1] < w[0])).count();

    let chars = posterior_means(&character_posteriors(&params, &m, &manifest).unwrap());
    let mut total = 0.0;
    let mut cells = 0usize;
    let mut styles = Vec::new();
    for j in 0..m.num_fonts() {
        let rows = m.chars_of_font(j);
        let z = font_posterior(&params, &m, j, &rows, &chars).unwrap().mean;
        let targets: Vec<CharId> = rows.iter().map(|&i| m.chars()[i]).collect();
        let gold_ink: f64 = rows.iter().map(|&i| ink(m.get(i, j).unwrap())).sum::<f64>() / rows.len() as f64;
        for (&i, g) in rows.iter().zip(reconstruct(&params, &chars, &z, &targets).unwrap()) {
            total += ssim(&g, m.get(i, j).unwrap()).unwrap();
            cells += 1;
        }
        styles.push((gold_ink, z));
    }
    let mean_ssim = total / cells as f64;
    let pass = mean_ssim >= 0.9 && violations == 0 && took <= Duration::from_secs(3 * 3600);
    let overfit = outcome(
        pass,
        format!(
            "train SSIM {mean_ssim:.4} over {cells} cells; {violations} of {} moving-average steps not decreasing; {:.0} s",
            ma.len() - 1,
            took.as_secs_f64()
        ),
    );

    styles.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (light, bold) = (&styles[0], &styles[styles.len() - 1]);
    let y_a = &chars[&('A' as CharId)];
    let ink_light = ink(&decode(&params, y_a, &light.1).unwrap());
    let ink_bold = ink(&decode(&params, y_a, &bold.1).unwrap());
    let stroke = outcome(
        ink_bold > ink_light,
        format!(
            "'A' ink {ink_bold:.4} in the boldest font (gold {:.4}) vs {ink_light:.4} in the lightest (gold {:.4})",
            bold.0, light.0
        ),
    );
    (overfit, stroke)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn trend(cache: &Path) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let matrix = toy_corpus(16, 36, 64, 1).unwrap();
    let manifest = make_splits(&matrix, 3).unwrap();
    let (m, params, _, took) = train_toy(dir.path(), cache, &matrix, &manifest, 3000);

    let chars = posterior_means(&character_posteriors(&params, &m, &manifest).unwrap());
    let (mut all1, mut all8, mut known1, mut known8, mut unk1, mut unk8, mut unk_mean) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let test_fonts = manifest.fonts_in(&m, Split::Test);
    for &j in &test_fonts {
        let obs8 = observation_set(&m, &manifest, j, 8, 0);
        let obs1 = observation_set(&m, &manifest, j, 1, 0);
        let z1 = font_posterior(&params, &m, j, &obs1, &chars).unwrap().mean;
        let z8 = font_posterior(&params, &m, j, &obs8, &chars).unwrap().mean;
        // Cells unobserved at both n, so both settings score the same glyphs.
        let rows: Vec<usize> = m.chars_of_font(j).into_iter().filter(|i| !obs8.contains(i)).collect();
        let targets: Vec<CharId> = rows.iter().map(|&i| m.chars()[i]).collect();
        let r1 = reconstruct(&params, &chars, &z1, &targets).unwrap();
        let r8 = reconstruct(&params, &chars, &z8, &targets).unwrap();
        for (k, &i) in rows.iter().enumerate() {
            let gold = m.get(i, j).unwrap();
            let (s1, s8) = (ssim(&r1[k], gold).unwrap(), ssim(&r8[k], gold).unwrap());
            all1.push(s1);
            all8.push(s8);
            if manifest.is_masked(targets[k]) {
                unk1.push(s1);
                unk8.push(s8);
                unk_mean.push(ssim(&mean_glyph_baseline(&m, &manifest, targets[k]).unwrap(), gold).unwrap());
            } else {
                known1.push(s1);
                known8.push(s8);
            }
        }
    }
    let (a1, a8, u8_, ub) = (mean(&all1), mean(&all8), mean(&unk8), mean(&unk_mean));
    outcome(
        !unk8.is_empty() && a8 >= a1 && u8_ > ub,
        format!(
            "{} test fonts, {} cells: SSIM n=8 {a8:.4} vs n=1 {a1:.4} (known {:.4} vs {:.4}, unknown {:.4} vs {:.4}); \
             unknown n=8 {u8_:.4} vs mean glyph {ub:.4} over {} cells; {:.0} s",
            test_fonts.len(),
            all8.len(),
            mean(&known8),
            mean(&known1),
            u8_,
            mean(&unk1),
            unk8.len(),
            took.as_secs_f64()
        ),
    )
}

/// Per-glyph SSD, summed independently of the library.
fn ssd(a: &GlyphImage, b: &GlyphImage) -> f64 {
    a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// One fixture: 5 train fonts with holes, one test font, masked rows.
fn nn_fixture(seed: u64, forced_fallback: bool) -> (GlyphMatrix, SplitManifest, usize, Vec<usize>) {
    let mut r = rng(seed);
    let side = 8;
    let chars = 8;
    let mut m = GlyphMatrix::new(side);
    let mut split = BTreeMap::new();
    let base: Vec<GlyphImage> = (0..chars).map(|_| random_image(&mut r, side)).collect();
    for j in 0..5 {
        let font = format!("train{j}");
        split.insert(font.clone(), Split::Train);
        let noise = 0.05 + 0.1 * j as f32;
        for (i, g) in base.iter().enumerate() {
            // Font 0 is the nearest and lacks row 5, forcing the runner-up.
            let missing = if forced_fallback { j == 0 && i == 5 } else { r.random::<f32>() < 0.2 };
            if missing {
                continue;
            }
            let px = g.pixels().iter().map(|&v| (v + noise * (r.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
            m.insert(0x61 + i as CharId, &font, GlyphImage::new(side, px).unwrap()).unwrap();
        }
    }
    split.insert("test".into(), Split::Test);
    for (i, g) in base.iter().enumerate() {
        let px = g.pixels().iter().map(|&v| (v + 0.02 * (r.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
        m.insert(0x61 + i as CharId, "test", GlyphImage::new(side, px).unwrap()).unwrap();
    }
    let masked: BTreeSet<CharId> = [0x61 + 7].into();
    let manifest = SplitManifest { split, masked_chars: masked, rng_seed: 0 };
    let test = m.font_index("test").unwrap();
    let observed = vec![0, 2, 3];
    (m, manifest, test, observed)
}

fn nn_oracle() -> Outcome {
    let mut mismatches = Vec::new();
    let mut fallbacks = 0usize;
    for seed in 0..200u64 {
        let (m, manifest, test, observed) = nn_fixture(seed, seed == 0);
        let got = nn_baseline(&m, &manifest, test, &observed).unwrap();
        let usable = |i: usize, j: usize| {
            let c = m.chars()[i];
            if manifest.is_masked(c) {
                None
            } else {
                m.get(i, j)
            }
        };
        let train: Vec<usize> = (0..m.num_fonts()).filter(|&j| m.fonts()[j].starts_with("train")).collect();
        let dist = |j: usize| {
            let shared: Vec<usize> = observed.iter().copied().filter(|&i| usable(i, j).is_some()).collect();
            if shared.is_empty() {
                f64::INFINITY
            } else {
                shared.iter().map(|&i| ssd(m.get(i, test).unwrap(), m.get(i, j).unwrap())).sum::<f64>()
                    / shared.len() as f64
            }
        };
        let nearest = train.iter().copied().min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b))).unwrap();
        if got.ranking[0].0 != nearest || (got.ranking[0].1 - dist(nearest)).abs() > 1e-9 {
            mismatches.push(format!("seed {seed}: nearest font"));
        }
        for i in (0..m.num_chars()).filter(|i| !observed.contains(i)) {
            let best = train
                .iter()
                .copied()
                .filter(|&j| usable(i, j).is_some())
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            let ok = match (best, got.glyphs.get(&i)) {
                (Some(j), Some((gj, g))) => {
                    if j != nearest {
                        fallbacks += 1;
                    }
                    *gj == j && g == m.get(i, j).unwrap()
                }
                (None, None) => got.unsupported.contains(&i),
                _ => false,
            };
            if !ok {
                mismatches.push(format!("seed {seed}: row {i}"));
            }
        }
    }
    outcome(
        mismatches.is_empty() && fallbacks > 0,
        format!("200 fixtures, {fallbacks} rows served by a fallback font, mismatches: {mismatches:?}"),
    )
}

/// SSIM with separable filtering: blur each moment map along rows, then
/// columns, keeping valid positions only.
fn reference_ssim(a: &GlyphImage, b: &GlyphImage) -> f64 {
    let n = a.side();
    let w = 11;
    let raw: Vec<f64> = (0..w).map(|k| (-((k as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    let m = n - w + 1;
    let blur = |img: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; n * m];
        for y in 0..n {
            for x in 0..m {
                rows[y * m + x] = (0..w).map(|k| g[k] * img[y * n + x + k]).sum();
            }
        }
        let mut out = vec![0.0; m * m];
        for y in 0..m {
            for x in 0..m {
                out[y * m + x] = (0..w).map(|k| g[k] * rows[(y + k) * m + x]).sum();
            }
        }
        out
    };
    let x: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mx, my) = (blur(&x), blur(&y));
    let (sxx, syy, sxy) = (blur(&prod(&x, &x)), blur(&prod(&y, &y)), blur(&prod(&x, &y)));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for k in 0..m * m {
        let vx = sxx[k] - mx[k] * mx[k];
        let vy = syy[k] - my[k] * my[k];
        let cxy = sxy[k] - mx[k] * my[k];
        total += ((2.0 * mx[k] * my[k] + c1) * (2.0 * cxy + c2))
            / ((mx[k] * mx[k] + my[k] * my[k] + c1) * (vx + vy + c2));
    }
    total / (m * m) as f64
}

fn ssim_checks() -> Outcome {
    let mut r = rng(13);
    let (mut self_err, mut ref_err, mut sym_err) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..50 {
        let side = if k % 5 == 0 { 16 } else { 64 };
        let a = random_image(&mut r, side);
        // Half the pairs are correlated so SSIM spans more than the noise floor.
        let b = if k % 2 == 0 {
            random_image(&mut r, side)
        } else {
            let px = a.pixels().iter().map(|&v| (v + 0.3 * (r.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
            GlyphImage::new(side, px).unwrap()
        };
        let ab = ssim(&a, &b).unwrap();
        self_err = self_err.max((ssim(&a, &a).unwrap() - 1.0).abs());
        ref_err = ref_err.max((ab - reference_ssim(&a, &b)).abs());
        sym_err = sym_err.max((ab - ssim(&b, &a).unwrap()).abs());
    }
    outcome(
        self_err <= 1e-12 && ref_err <= 1e-6 && sym_err <= 1e-12,
        format!("self {self_err:.1e}, reference {ref_err:.1e}, symmetry {sym_err:.1e}"),
    )
}

fn split_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let family_sizes = [1usize, 3, 2, 1, 4, 2, 1, 1];
    let mut problems = Vec::new();
    let mut cases = 0usize;
    for chars in [8usize, 10, 12, 13, 36, 37] {
        let mut m = GlyphMatrix::new(4);
        for (f, &size) in family_sizes.iter().enumerate() {
            for k in 0..size {
                let font = format!("fam{f}-{k}");
                for i in 0..chars {
                    m.insert(0x21 + i as CharId, &font, GlyphImage::filled(4, 0.5)).unwrap();
                }
                m.set_family(&font, &format!("fam{f}"));
            }
        }
        for seed in 0..10u64 {
            cases += 1;
            let a = make_splits(&m, seed).unwrap();
            let b = make_splits(&m, seed).unwrap();
            let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
            write_json(&pa, &a).unwrap();
            write_json(&pb, &b).unwrap();
            if fs::read(&pa).unwrap() != fs::read(&pb).unwrap() {
                problems.push(format!("chars {chars} seed {seed}: bytes differ"));
            }
            let mut family_split: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
            for f in m.fonts() {
                family_split.entry(m.family_of(f)).or_default().insert(a.split_of(f).unwrap());
            }
            if family_split.values().any(|s| s.len() != 1) {
                problems.push(format!("chars {chars} seed {seed}: family straddles splits"));
            }
            let expected = (0.2 * chars as f64).round() as usize;
            if a.masked_chars.len() != expected {
                problems.push(format!("chars {chars} seed {seed}: {} masked, want {expected}", a.masked_chars.len()));
            }
        }
    }
    outcome(problems.is_empty(), format!("{cases} cases, problems: {problems:?}"))
}

fn interpolation_corners() -> Outcome {
    let cfg = ModelConfig::toy();
    let params = init_params(&cfg, &mut rng(14)).unwrap();
    let mut r = rng(15);
    let mut v = || -> Vec<f32> { (0..cfg.k).map(|_| r.random_range(-2.0..2.0)).collect() };
    let (ya, yb, za, zb) = (v(), v(), v(), v());
    let steps = 5;
    let grid = interpolate(&params, (&ya, &yb), (&za, &zb), steps).unwrap();
    let last = steps - 1;
    let corners = [
        (&grid[0][0], decode(&params, &ya, &za).unwrap()),
        (&grid[0][last], decode(&params, &yb, &za).unwrap()),
        (&grid[last][0], decode(&params, &ya, &zb).unwrap()),
        (&grid[last][last], decode(&params, &yb, &zb).unwrap()),
    ];
    let exact = corners
        .iter()
        .filter(|(g, d)| g.pixels().iter().zip(d.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()))
        .count();
    outcome(exact == 4, format!("{exact} of 4 corners bit-identical to direct decodes"))
}

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = cache_dir.path().join("log_partition.bin");

    let mut results: Vec<(String, &str, Outcome)> = Vec::new();
    let mut report = |id: String, name: &'static str, o: Outcome| {
        println!("criterion {id} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    let quick: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "wavelet round trip", wavelet_round_trip),
        (2, "volume preservation", volume_preservation),
        (3, "distribution normalization", normalization),
        (4, "limit correctness", limits),
        (5, "gradient checks", gradients),
        (6, "initialization contract", initialization),
        (7, "encoder set semantics", set_semantics),
        (10, "nearest-neighbor baseline oracle", nn_oracle),
        (11, "SSIM correctness", ssim_checks),
        (12, "split and mask determinism", split_determinism),
        (13, "interpolation corners", interpolation_corners),
    ];
    for (n, name, f) in quick {
        if want(n) {
            report(n.to_string(), name, f());
        }
    }
    if want(8) {
        let (overfit, stroke) = toy_overfit(&cache);
        report("8".into(), "toy overfit", overfit);
        report("8b".into(), "stroke weight follows the font embedding", stroke);
    }
    if want(9) {
        report("9".into(), "few-shot trend", trend(&cache));
    }

    results.sort_by_key(|(id, _, _)| (id.trim_end_matches(char::is_alphabetic).parse::<u32>().unwrap(), id.clone()));
    println!("\nsummary");
    for (id, name, o) in &results {
        println!("criterion {id} [{}] {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
