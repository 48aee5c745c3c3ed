//! Calibration sweep for the `dedup --cut-height` default.
//!
//! Renders 40 base styles over the full toy alphabet, plus for each base a
//! near-copy whose drawing parameters differ by about what separates two
//! hinting or export variants of one typeface. Prints the distance
//! distributions of copy pairs and distinct pairs, then how many fonts
//! survive dedup at a range of cut heights.

use glyphforge_core::corpus::{dedup_fonts, font_distance, CharId, GlyphMatrix};
use glyphforge_core::synthetic::{render, Style, ALPHABET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jitter(s: &Style, rng: &mut ChaCha8Rng) -> Style {
    let mut d = |scale: f64| rng.random_range(-scale..scale);
    Style {
        weight: s.weight + d(0.004),
        slant: s.slant + d(0.01),
        width: s.width + d(0.01),
        height: s.height + d(0.01),
        gap: (s.gap + d(0.003)).max(0.0),
    }
}

fn percentile(v: &mut [f64], p: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * p).round() as usize]
}

fn main() {
    let bases = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut m = GlyphMatrix::new(64);
    for b in 0..bases {
        let style = Style::random(&mut rng);
        let copy = jitter(&style, &mut rng);
        for (c, _) in &ALPHABET {
            m.insert(*c as CharId, &format!("base{b:02}"), render(*c, &style, 64).unwrap()).unwrap();
            m.insert(*c as CharId, &format!("copy{b:02}"), render(*c, &copy, 64).unwrap()).unwrap();
        }
    }
    let idx = |name: String| m.font_index(&name).unwrap();
    let mut copies: Vec<f64> =
        (0..bases).map(|b| font_distance(&m, idx(format!("base{b:02}")), idx(format!("copy{b:02}")))).collect();
    let mut distinct = Vec::new();
    for a in 0..bases {
        for b in a + 1..bases {
            distinct.push(font_distance(&m, idx(format!("base{a:02}")), idx(format!("base{b:02}"))));
        }
    }
    println!("copy pairs:     median {:8.2}  p95 {:8.2}  max {:8.2}", percentile(&mut copies, 0.5), percentile(&mut copies, 0.95), percentile(&mut copies, 1.0));
    println!("distinct pairs: min    {:8.2}  p05 {:8.2}  median {:8.2}", percentile(&mut distinct, 0.0), percentile(&mut distinct, 0.05), percentile(&mut distinct, 0.5));
    println!("\ncut height  fonts kept (of {}, ideal {bases})", 2 * bases);
    for cut in [1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 60.0, 80.0, 120.0, 160.0, 240.0] {
        println!("{cut:10.1}  {}", dedup_fonts(&m, cut).unwrap().num_fonts());
    }
}
