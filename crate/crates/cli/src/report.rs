//! Report, per-caption and trace files.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use kvguide::decoding::{BeamStatus, ExpertTrace, TopEntry};
use kvguide::metrics::{EvalReport, EvalRow};
use serde::{Deserialize, Serialize};

const BASE_HEADER: [&str; 6] = [
    "model",
    "style",
    "tic",
    "style_accuracy",
    "fluency",
    "vocab",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Report as CSV; the `tac` column appears when any row has it.
pub fn format_report(report: &EvalReport) -> Result<String> {
    let with_tac = report.rows.iter().any(|r| r.tac.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = BASE_HEADER.to_vec();
    if with_tac {
        header.push("tac");
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.model.clone(),
            r.style.clone(),
            r.tic.to_string(),
            opt(r.style_accuracy),
            r.fluency.to_string(),
            r.vocab.to_string(),
        ];
        if with_tac {
            rec.push(opt(r.tac));
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn parse_report(text: &str) -> Result<EvalReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let with_tac = match header.len() {
        6 => false,
        7 if header[6] == "tac" => true,
        _ => bail!("unexpected report header {header:?}"),
    };
    if header[..6] != BASE_HEADER {
        bail!("unexpected report header {header:?}");
    }
    let float = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            Ok(Some(
                s.parse().with_context(|| format!("bad number `{s}`"))?,
            ))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(EvalRow {
            model: rec[0].to_string(),
            style: rec[1].to_string(),
            tic: rec[2]
                .parse()
                .with_context(|| format!("bad tic `{}`", &rec[2]))?,
            style_accuracy: float(&rec[3])?,
            fluency: rec[4]
                .parse()
                .with_context(|| format!("bad fluency `{}`", &rec[4]))?,
            vocab: rec[5]
                .parse()
                .with_context(|| format!("bad vocab `{}`", &rec[5]))?,
            tac: if with_tac { float(&rec[6])? } else { None },
        });
    }
    Ok(EvalReport { rows })
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_file(path, format_report(report)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_report(&text).with_context(|| format!("in {}", path.display()))
}

/// One generated caption and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub model: String,
    pub style: String,
    pub item: String,
    pub caption: String,
    pub tic: f64,
    pub style_match: Option<bool>,
    pub fluency: f64,
    pub tac: Option<f64>,
    pub log_score: f64,
    pub truncated: bool,
}

pub fn format_captions(rows: &[CaptionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        return Ok(String::new());
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn parse_captions(text: &str) -> Result<Vec<CaptionRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// An entry of a top-n list with its display form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEntry {
    pub token: u32,
    pub text: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedExpert {
    pub expert: String,
    pub top: Vec<NamedEntry>,
}

/// One emitted token of one final beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub model: String,
    pub style: String,
    pub item: String,
    /// Rank of the beam among the final beams.
    pub beam: usize,
    pub beam_status: BeamStatus,
    pub selected: bool,
    pub position: usize,
    pub chosen: u32,
    pub chosen_text: String,
    pub p0: Vec<NamedEntry>,
    pub experts: Vec<NamedExpert>,
    pub p_final: Vec<NamedEntry>,
    pub losses: Vec<f64>,
    pub decentral_losses: Vec<f64>,
}

pub fn named(entries: &[TopEntry], name: impl Fn(u32) -> String) -> Vec<NamedEntry> {
    entries
        .iter()
        .map(|e| NamedEntry {
            token: e.token,
            text: name(e.token),
            prob: e.prob,
        })
        .collect()
}

pub fn named_experts(
    experts: &[ExpertTrace],
    name: impl Fn(u32) -> String + Copy,
) -> Vec<NamedExpert> {
    experts
        .iter()
        .map(|e| NamedExpert {
            expert: e.expert.to_string(),
            top: named(&e.top, name),
        })
        .collect()
}

pub fn format_trace(lines: &[TraceLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("trace line {}", n + 1)))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))
}
