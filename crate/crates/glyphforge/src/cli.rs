//! Argument parsing and subcommand dispatch for the `glyphforge` binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use glyphforge_core::corpus::{coverage_report, dedup_fonts, make_splits, CharId, GlyphMatrix, Split, SplitManifest};
use glyphforge_core::evaluation::{
    character_posteriors, evaluate, export_embeddings, font_posterior, posterior_means, reconstruct,
    DEFAULT_OBSERVATIONS,
};
use glyphforge_core::interpolate::interpolate;
use glyphforge_core::model::ModelParams;
use glyphforge_core::synthetic::toy_corpus;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{TrainFile, CONFIG_VERSION};
use crate::error::{Error, Result};
use crate::image_io::{write_glyph, write_grid};
use crate::run::{self, BEST, LATEST};
use crate::store::{glyph_file_name, ingest, read_splits, serialize, write_bytes, write_json};

/// Average-linkage height below which two fonts count as duplicates; see
/// `docs/dedup-calibration.md`.
pub const DEFAULT_CUT_HEIGHT: f64 = 25.0;

#[derive(Parser, Debug)]
#[command(name = "glyphforge", about = "Learn character and font manifolds from glyph corpora")]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Data {
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "splits.json")]
    pub splits: PathBuf,
}

#[derive(Args, Debug)]
pub struct Trained {
    /// Checkpoint file, or a checkpoint directory (uses best.gfc, else latest.gfc).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: Data,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Read `<src>/<font_id>/<codepoint_hex>.png` glyphs into a normalised corpus.
    Ingest {
        src: PathBuf,
        /// Font-to-family map and ordering; defaults to `<src>/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Drop near-duplicate fonts, keeping one representative per cluster.
    Dedup {
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CUT_HEIGHT)]
        cut_height: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign families to train/dev/test and choose the masked characters.
    Split {
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "splits.json")]
        out: PathBuf,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Few-shot reconstruction scores on held-out fonts.
    Evaluate {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_OBSERVATIONS)]
        n: Vec<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Name recorded in the report; defaults to the corpus directory name.
        #[arg(long)]
        dataset: Option<String>,
        /// Selects which glyphs of each font are observed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Complete one font from a few observed glyphs.
    Reconstruct {
        #[command(flatten)]
        trained: Trained,
        #[arg(long)]
        font: String,
        /// Characters to observe, e.g. `A,B,C` or `U+0041,U+0042`.
        #[arg(long, value_delimiter = ',', required = true)]
        observe: Vec<String>,
        #[arg(long, default_value = "reconstructions")]
        out: PathBuf,
    },
    /// Decode a grid blending two characters (across) and two fonts (down).
    Interpolate {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        chars: Vec<String>,
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        fonts: Vec<String>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value = "interpolation.png")]
        out: PathBuf,
    },
    /// Write posterior-mean embeddings of every character and font as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
    /// Per-character and per-font glyph counts as JSON.
    CoverageReport {
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a procedural toy corpus.
    Synth {
        #[arg(long, default_value_t = 8)]
        fonts: usize,
        #[arg(long, default_value_t = 16)]
        chars: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

pub fn version() -> String {
    format!(
        "{} (checkpoint format {}, config version {}, {}-{}, {})",
        env!("CARGO_PKG_VERSION"),
        checkpoint::VERSION,
        CONFIG_VERSION,
        std::env::consts::ARCH,
        std::env::consts::OS,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

/// Parses argv; on failure clap prints usage and exits (code 2).
pub fn parse() -> Cli {
    let matches = Cli::command().version(version()).get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

/// `A`, or `U+0041` / `u+41` for a codepoint.
pub fn parse_char(s: &str) -> Result<CharId> {
    if let Some(hex) = s.strip_prefix("U+").or_else(|| s.strip_prefix("u+")) {
        return CharId::from_str_radix(hex, 16).map_err(|_| Error::Usage(format!("bad codepoint '{s}'")));
    }
    let mut it = s.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Ok(c as CharId),
        _ => Err(Error::Usage(format!("expected one character or U+XXXX, got '{s}'"))),
    }
}

fn load_params(path: &Path) -> Result<ModelParams> {
    let file = if path.is_dir() {
        [BEST, LATEST]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::format(path, "directory holds neither best.gfc nor latest.gfc"))?
    } else {
        path.to_path_buf()
    };
    Ok(checkpoint::load(&file)?.state.params)
}

fn load_trained(t: &Trained) -> Result<(ModelParams, GlyphMatrix, SplitManifest)> {
    let params = load_params(&t.checkpoint)?;
    let matrix = ingest(&t.data.corpus, None)?;
    if matrix.side() != params.config.side {
        return Err(Error::Usage(format!(
            "corpus glyph side {} but checkpoint side {}",
            matrix.side(),
            params.config.side
        )));
    }
    Ok((params, matrix, read_splits(&t.data.splits)?))
}

fn font_index(m: &GlyphMatrix, font: &str) -> Result<usize> {
    m.font_index(font).ok_or_else(|| glyphforge_core::Error::UnknownFont(font.into()).into())
}

/// Writes to stdout; a reader that stopped listening is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

/// Z of font `j` from every glyph it has whose character has an embedding.
fn font_mean(params: &ModelParams, m: &GlyphMatrix, j: usize, chars: &BTreeMap<CharId, Vec<f32>>) -> Result<Vec<f32>> {
    let rows: Vec<usize> = m.chars_of_font(j).into_iter().filter(|&i| chars.contains_key(&m.chars()[i])).collect();
    if rows.is_empty() {
        return Err(Error::Usage(format!("font '{}' has no glyph with a character embedding", m.fonts()[j])));
    }
    Ok(font_posterior(params, m, j, &rows, chars)?.mean)
}

#[derive(Serialize)]
struct DedupSummary {
    kept: Vec<String>,
    removed: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { src, manifest, out } => {
            let m = ingest(&src, manifest.as_deref())?;
            serialize(&m, &out)?;
            log::info!("ingested {} glyphs, {} fonts x {} characters", m.num_present(), m.num_fonts(), m.num_chars());
        }
        Command::Dedup { corpus, cut_height, out } => {
            let m = ingest(&corpus, None)?;
            let kept = dedup_fonts(&m, cut_height)?;
            serialize(&kept, &out)?;
            let removed = m.fonts().iter().filter(|f| kept.font_index(f).is_none()).cloned().collect();
            print_json(&DedupSummary { kept: kept.fonts().to_vec(), removed })?;
        }
        Command::Split { corpus, seed, out } => {
            let m = ingest(&corpus, None)?;
            write_json(&out, &make_splits(&m, seed)?)?;
        }
        Command::Train { config, seed, steps } => {
            let mut cfg = TrainFile::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let stdout = std::io::stdout();
            let summary = run::train(&cfg, |m| {
                let mut out = stdout.lock();
                let _ = writeln!(out, "{}", serde_json::to_string(m).expect("metrics serialize"));
            })?;
            log::info!("finished at step {}", summary.final_step);
        }
        Command::Evaluate { trained, n, split, dataset, seed, out } => {
            let (params, m, man) = load_trained(&trained)?;
            let dataset = dataset.unwrap_or_else(|| {
                trained.data.corpus.file_name().map_or("corpus".into(), |s| s.to_string_lossy().into_owned())
            });
            let reports = evaluate(&params, &m, &man, split.into(), &dataset, &n, seed)?;
            write_json(&out, &reports)?;
        }
        Command::Reconstruct { trained, font, observe, out } => {
            let (params, m, man) = load_trained(&trained)?;
            let j = font_index(&m, &font)?;
            let mut rows = Vec::new();
            for s in &observe {
                let c = parse_char(s)?;
                let i = m.char_index(c).filter(|&i| m.present(i, j)).ok_or_else(|| {
                    Error::Usage(format!("font '{font}' has no glyph for U+{c:04X}"))
                })?;
                rows.push(i);
            }
            let chars = posterior_means(&character_posteriors(&params, &m, &man)?);
            let z = font_posterior(&params, &m, j, &rows, &chars)?.mean;
            let targets: Vec<CharId> =
                chars.keys().copied().filter(|c| !rows.iter().any(|&i| m.chars()[i] == *c)).collect();
            for (c, g) in targets.iter().zip(reconstruct(&params, &chars, &z, &targets)?) {
                write_glyph(&out.join(&font).join(glyph_file_name(*c)), &g)?;
            }
        }
        Command::Interpolate { trained, chars, fonts, steps, out } => {
            if chars.len() != 2 || fonts.len() != 2 {
                return Err(Error::Usage("--chars and --fonts each take exactly two values".into()));
            }
            let (params, m, man) = load_trained(&trained)?;
            let ys = posterior_means(&character_posteriors(&params, &m, &man)?);
            let y = |s: &str| -> Result<&Vec<f32>> {
                let c = parse_char(s)?;
                ys.get(&c).ok_or_else(|| glyphforge_core::Error::UnknownChar(c).into())
            };
            let (ya, yb) = (y(&chars[0])?, y(&chars[1])?);
            let za = font_mean(&params, &m, font_index(&m, &fonts[0])?, &ys)?;
            let zb = font_mean(&params, &m, font_index(&m, &fonts[1])?, &ys)?;
            let grid = interpolate(&params, (ya, yb), (&za, &zb), steps)?;
            write_grid(&out, &grid)?;
        }
        Command::ExportEmbeddings { trained, out } => {
            let (params, m, man) = load_trained(&trained)?;
            let table = export_embeddings(&params, &m, &man)?;
            write_bytes(&out, &embeddings_csv(params.config.k, &table)?)?;
        }
        Command::CoverageReport { corpus, out } => {
            let report = coverage_report(&ingest(&corpus, None)?);
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Synth { fonts, chars, side, seed, out } => {
            serialize(&toy_corpus(fonts, chars, side, seed)?, &out)?;
        }
    }
    Ok(())
}

/// `kind,id,e0..e{k-1}` with `kind` either `char` (id `U+XXXX`) or `font`.
pub fn embeddings_csv(k: usize, table: &glyphforge_core::evaluation::EmbeddingTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    let mut header = vec!["kind".to_string(), "id".to_string()];
    header.extend((0..k).map(|d| format!("e{d}")));
    w.write_record(&header).map_err(csv_err)?;
    let rows = table
        .chars
        .iter()
        .map(|(c, v)| ("char", format!("U+{c:04X}"), v))
        .chain(table.fonts.iter().map(|(f, v)| ("font", f.clone(), v)));
    for (kind, id, v) in rows {
        let mut rec = vec![kind.to_string(), id];
        rec.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))
}
