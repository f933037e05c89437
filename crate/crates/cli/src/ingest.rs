//! Embedding files: a `dim=<n> count=<m>` header, then one whitespace
//! separated row per embedding.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use kvguide::zoo::{ModalityEmbedding, ModalitySource};

pub fn parse_embeddings(
    text: &str,
    expected_dim: usize,
    source: ModalitySource,
) -> Result<Vec<ModalityEmbedding>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| anyhow!("empty embedding file"))?;
    let (mut dim, mut count) = (None, None);
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(
                    v.parse::<usize>()
                        .with_context(|| format!("bad dim `{v}`"))?,
                )
            }
            Some(("count", v)) => {
                count = Some(
                    v.parse::<usize>()
                        .with_context(|| format!("bad count `{v}`"))?,
                )
            }
            _ => bail!("unexpected header field `{field}`; expected `dim=<n> count=<m>`"),
        }
    }
    let dim = dim.ok_or_else(|| anyhow!("header is missing `dim=`"))?;
    let count = count.ok_or_else(|| anyhow!("header is missing `count=`"))?;
    if dim != expected_dim {
        bail!("embedding dimension {dim} does not match the aligner's {expected_dim}");
    }
    let mut out = Vec::with_capacity(count);
    for (n, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("line {}: not a numeric row", n + 1))?;
        if row.len() != dim {
            bail!(
                "line {}: {} values, expected dimension {dim}",
                n + 1,
                row.len()
            );
        }
        let e = ModalityEmbedding::new(row, source).map_err(|e| anyhow!("line {}: {e}", n + 1))?;
        out.push(e);
    }
    if out.len() != count {
        bail!(
            "header announces {count} rows but the file has {}",
            out.len()
        );
    }
    Ok(out)
}

/// Reads and L2-normalizes every row of `path`.
pub fn ingest_embeddings(
    path: &Path,
    expected_dim: usize,
    source: ModalitySource,
) -> Result<Vec<ModalityEmbedding>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_embeddings(&text, expected_dim, source).with_context(|| format!("in {}", path.display()))
}

pub fn format_embeddings(rows: &[Vec<f64>]) -> String {
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = format!("dim={dim} count={}\n", rows.len());
    for row in rows {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}
