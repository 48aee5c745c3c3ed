//! The documented cut-height default separates near-copies from distinct
//! styles (see docs/dedup-calibration.md).

use glyphforge::cli::DEFAULT_CUT_HEIGHT;
use glyphforge_core::corpus::{dedup_fonts, CharId, GlyphMatrix};
use glyphforge_core::synthetic::{render, Style, ALPHABET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_cut_keeps_one_font_per_style() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut m = GlyphMatrix::new(64);
    let bases = 8;
    for b in 0..bases {
        let base = Style::random(&mut rng);
        let copy = Style {
            weight: base.weight + rng.random_range(-0.004..0.004),
            slant: base.slant + rng.random_range(-0.01..0.01),
            ..base
        };
        for (c, _) in &ALPHABET[..20] {
            m.insert(*c as CharId, &format!("b{b}"), render(*c, &base, 64).unwrap()).unwrap();
            m.insert(*c as CharId, &format!("b{b}-copy"), render(*c, &copy, 64).unwrap()).unwrap();
        }
    }
    let kept = dedup_fonts(&m, DEFAULT_CUT_HEIGHT).unwrap();
    let mut styles: Vec<&str> = kept.fonts().iter().map(|f| f.trim_end_matches("-copy")).collect();
    styles.sort_unstable();
    styles.dedup();
    assert_eq!(kept.num_fonts(), bases);
    assert_eq!(styles.len(), bases);
}
