//! Procedural toy fonts: a sixteen-segment alphabet drawn with anti-aliased
//! round-capped strokes, varied per font in weight, slant, width, height
//! and segment gaps.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CharId, GlyphImage, GlyphMatrix};
use crate::error::{Error, Result};

type Seg = ((f64, f64), (f64, f64));

/// Segment endpoints on the unit box, `y` pointing down.
const SEGMENTS: [(&str, Seg); 16] = [
    ("a1", ((0.0, 0.0), (0.5, 0.0))),
    ("a2", ((0.5, 0.0), (1.0, 0.0))),
    ("f", ((0.0, 0.0), (0.0, 0.5))),
    ("b", ((1.0, 0.0), (1.0, 0.5))),
    ("e", ((0.0, 0.5), (0.0, 1.0))),
    ("c", ((1.0, 0.5), (1.0, 1.0))),
    ("d1", ((0.0, 1.0), (0.5, 1.0))),
    ("d2", ((0.5, 1.0), (1.0, 1.0))),
    ("g1", ((0.0, 0.5), (0.5, 0.5))),
    ("g2", ((0.5, 0.5), (1.0, 0.5))),
    ("i", ((0.5, 0.0), (0.5, 0.5))),
    ("l", ((0.5, 0.5), (0.5, 1.0))),
    ("h", ((0.0, 0.0), (0.5, 0.5))),
    ("j", ((1.0, 0.0), (0.5, 0.5))),
    ("k", ((0.0, 1.0), (0.5, 0.5))),
    ("m", ((1.0, 1.0), (0.5, 0.5))),
];

/// Characters in generation order with their lit segments.
pub const ALPHABET: [(char, &str); 36] = [
    ('A', "a1 a2 f b e c g1 g2"),
    ('B', "a1 a2 b c d1 d2 i l g2"),
    ('C', "a1 a2 f e d1 d2"),
    ('D', "a1 a2 b c d1 d2 i l"),
    ('E', "a1 a2 f e d1 d2 g1"),
    ('F', "a1 a2 f e g1"),
    ('G', "a1 a2 f e d1 d2 c g2"),
    ('H', "f b e c g1 g2"),
    ('I', "a1 a2 d1 d2 i l"),
    ('J', "b c d1 d2 e"),
    ('K', "f e g1 j m"),
    ('L', "f e d1 d2"),
    ('M', "f b e c h j"),
    ('N', "f b e c h m"),
    ('O', "a1 a2 f b e c d1 d2"),
    ('P', "a1 a2 f b e g1 g2"),
    ('Q', "a1 a2 f b e c d1 d2 m"),
    ('R', "a1 a2 f b e g1 g2 m"),
    ('S', "a1 a2 f g1 g2 c d1 d2"),
    ('T', "a1 a2 i l"),
    ('U', "f b e c d1 d2"),
    ('V', "f e k j"),
    ('W', "f b e c k m"),
    ('X', "h j k m"),
    ('Y', "h j l"),
    ('Z', "a1 a2 j k d1 d2"),
    ('0', "a1 a2 f b e c d1 d2 j k"),
    ('1', "b c j"),
    ('2', "a1 a2 b g1 g2 e d1 d2"),
    ('3', "a1 a2 b g2 c d1 d2"),
    ('4', "f g1 g2 b c"),
    ('5', "a1 a2 f g1 m d1 d2"),
    ('6', "a1 a2 f e d1 d2 c g1 g2"),
    ('7', "a1 a2 b c"),
    ('8', "a1 a2 f b e c d1 d2 g1 g2"),
    ('9', "a1 a2 f b g1 g2 c d1 d2"),
];

/// Drawing parameters of one toy font, as fractions of the glyph height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    pub weight: f64,
    pub slant: f64,
    pub width: f64,
    pub height: f64,
    pub gap: f64,
}

impl Style {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            weight: rng.random_range(0.08..0.16),
            slant: rng.random_range(-0.1..0.3),
            width: rng.random_range(0.55..0.85),
            height: rng.random_range(0.75..1.0),
            gap: rng.random_range(0.0..0.05),
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    libm::sqrt(qx * qx + qy * qy)
}

/// Renders character `c` of the alphabet. Intensities are quantised to
/// 8-bit levels so the glyph survives a PNG round trip unchanged.
pub fn render(c: char, style: &Style, side: usize) -> Result<GlyphImage> {
    let pattern = ALPHABET
        .iter()
        .find(|(ch, _)| *ch == c)
        .ok_or(Error::UnknownChar(c as u32))?
        .1;
    let s = side as f64;
    let h = style.height * 0.8 * s;
    let w = style.width * h;
    let (cx, cy) = (s / 2.0, s / 2.0);
    let place = |(u, v): (f64, f64)| (cx + (u - 0.5) * w + style.slant * (0.5 - v) * h, cy + (v - 0.5) * h);
    let mut segs = Vec::new();
    for name in pattern.split_whitespace() {
        let (_, (a, b)) = SEGMENTS.iter().find(|(n, _)| *n == name).expect("pattern names a segment");
        let (a, b) = (place(*a), place(*b));
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = libm::sqrt(dx * dx + dy * dy);
        let g = (style.gap * h).min(0.45 * len) / len;
        segs.push(((a.0 + g * dx, a.1 + g * dy), (b.0 - g * dx, b.1 - g * dy)));
    }
    let r = 0.5 * style.weight * h;
    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segs.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
            let v = (r - d + 0.5).clamp(0.0, 1.0);
            px.push((libm::round(v * 255.0) / 255.0) as f32);
        }
    }
    GlyphImage::new(side, px)
}

/// `fonts` toy fonts named `toy00, toy01, ...` covering the first `chars`
/// characters of [`ALPHABET`]; each font is its own family.
pub fn toy_corpus(fonts: usize, chars: usize, side: usize, seed: u64) -> Result<GlyphMatrix> {
    if chars == 0 || chars > ALPHABET.len() {
        return Err(Error::InvalidArgument(format!("chars must be in 1..={}", ALPHABET.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GlyphMatrix::new(side);
    for f in 0..fonts {
        let style = Style::random(&mut rng);
        let name = format!("toy{f:02}");
        for (c, _) in &ALPHABET[..chars] {
            m.insert(*c as CharId, &name, render(*c, &style, side)?)?;
        }
    }
    Ok(m)
}
