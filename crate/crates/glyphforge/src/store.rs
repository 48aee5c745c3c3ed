//! On-disk corpus layout: `<root>/<font_id>/<codepoint_hex>.png` plus
//! `<root>/manifest.json`, and the JSON side files around it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use glyphforge_core::corpus::{CharId, FontId, GlyphMatrix, SplitManifest};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{read_glyph, write_glyph};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SIDE: usize = 64;

/// Corpus metadata. Every field is optional when hand-written for ingest:
/// fonts and characters listed here come first in matrix order, anything
/// else found on disk follows in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(default)]
    pub fonts: Vec<FontId>,
    #[serde(default)]
    pub families: BTreeMap<FontId, String>,
    #[serde(default)]
    pub chars: Vec<CharId>,
}

impl CorpusManifest {
    pub fn of(m: &GlyphMatrix) -> Self {
        Self {
            side: Some(m.side()),
            fonts: m.fonts().to_vec(),
            families: m.families().clone(),
            chars: m.chars().to_vec(),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_splits(path: &Path) -> Result<SplitManifest> {
    read_json(path)
}

pub fn glyph_file_name(c: CharId) -> String {
    format!("{c:04x}.png")
}

fn parse_glyph_file(path: &Path) -> Result<Option<CharId>> {
    if path.extension().and_then(|e| e.to_str()) != Some("png") {
        return Ok(None);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::format(path, "glyph file name must be a hexadecimal codepoint"));
    }
    CharId::from_str_radix(stem, 16).map(Some).map_err(|e| Error::format(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads a glyph directory. `manifest` defaults to `<dir>/manifest.json`
/// when that file exists; fonts it gives no family are their own family.
pub fn ingest(dir: &Path, manifest: Option<&Path>) -> Result<GlyphMatrix> {
    let default_manifest = dir.join(MANIFEST_FILE);
    let manifest = match manifest {
        Some(p) => read_json::<CorpusManifest>(p)?,
        None if default_manifest.is_file() => read_json(&default_manifest)?,
        None => CorpusManifest::default(),
    };

    let mut glyphs = Vec::new();
    let mut side = manifest.side;
    for font_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let font = font_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&font_dir, "font directory name is not UTF-8"))?
            .to_string();
        for file in sorted_entries(&font_dir)? {
            let Some(c) = parse_glyph_file(&file)? else {
                log::debug!("skipping {}", file.display());
                continue;
            };
            let g = read_glyph(&file)?;
            match side {
                Some(s) if s != g.side() => {
                    return Err(Error::format(&file, format!("glyph side {} differs from corpus side {s}", g.side())));
                }
                _ => side = Some(g.side()),
            }
            glyphs.push((c, font.clone(), g));
        }
    }

    let mut m = GlyphMatrix::new(side.unwrap_or(DEFAULT_SIDE));
    for f in &manifest.fonts {
        m.add_font(f);
    }
    for &c in &manifest.chars {
        m.add_char(c);
    }
    let mut fonts: Vec<&str> = glyphs.iter().map(|(_, f, _)| f.as_str()).collect();
    fonts.sort_unstable();
    let mut chars: Vec<CharId> = glyphs.iter().map(|(c, _, _)| *c).collect();
    chars.sort_unstable();
    for f in fonts {
        m.add_font(f);
    }
    for c in chars {
        m.add_char(c);
    }
    for (font, family) in &manifest.families {
        m.set_family(font, family);
    }
    for (c, f, g) in glyphs {
        m.insert(c, &f, g)?;
    }
    Ok(m)
}

fn check_font_id(font: &str) -> Result<()> {
    let bad = font.is_empty()
        || font.starts_with('.')
        || font.chars().any(|ch| ch == '/' || ch == '\\' || ch == '\0');
    if bad {
        return Err(Error::Usage(format!("font id '{font}' cannot be used as a directory name")));
    }
    Ok(())
}

/// Writes `m` in the layout [`ingest`] reads. Intensities are stored as
/// 8-bit levels, so the round trip is exact for 8-bit-quantised glyphs.
/// The target directory must be empty or absent.
pub fn serialize(m: &GlyphMatrix, dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::format(dir, "output directory is not empty"));
    }
    for f in m.fonts() {
        check_font_id(f)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, j, g) in m.cells() {
        write_glyph(&dir.join(&m.fonts()[j]).join(glyph_file_name(m.chars()[i])), g)?;
    }
    write_json(&dir.join(MANIFEST_FILE), &CorpusManifest::of(m))
}
