//! Weight files: a textual header followed by row-major little-endian `f32`.
//!
//! ```text
//! kvguide-weights v1
//! config kind=decoder vocab=128 width=32 ...
//! tensor tok_emb shape=128,32 offset=0
//! tensor pos_emb shape=64,32 offset=16384
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets are byte offsets into the payload, which starts right after the
//! `end` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "kvguide-weights v1";

/// Named tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    /// Checks that exactly the tensors `config` dictates are present, with
    /// matching shapes.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.expected_shapes();
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}` has shape {:?}, config dictates {shape:?}",
                    t.shape()
                )));
            }
        }
        if tensors.len() != expected.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::ShapeMismatch(format!(
                "unexpected tensors {extra:?}"
            )));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated weights lack `{name}`"))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let order = self.config.expected_shapes();
        let mut header = format!("{MAGIC}\nconfig {}\n", self.config.to_header());
        let mut payload = Vec::new();
        for (name, shape) in &order {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "tensor {name} shape={} offset={}\n",
                dims.join(","),
                payload.len()
            ));
            for v in self.get(name).data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("header ends before `end` line".into()))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let payload = &bytes[pos..];

        let mut it = lines.iter();
        if it.next().map(String::as_str) != Some(MAGIC) {
            return Err(Error::Format(format!("missing `{MAGIC}` magic line")));
        }
        let config = match it.next().and_then(|l| l.strip_prefix("config ")) {
            Some(fields) => ModelConfig::from_header(fields)?,
            None => return Err(Error::Format("missing config line".into())),
        };

        let mut entries = Vec::new();
        for line in it {
            entries.push(parse_tensor_line(line)?);
        }
        let mut by_offset: Vec<usize> = (0..entries.len()).collect();
        by_offset.sort_by_key(|&i| entries[i].2);

        let mut tensors = BTreeMap::new();
        for (rank, &i) in by_offset.iter().enumerate() {
            let (name, shape, offset) = &entries[i];
            let end = match by_offset.get(rank + 1) {
                Some(&next) => entries[next].2,
                None => payload.len(),
            };
            let numel: usize = shape.iter().product();
            if *offset > payload.len() || end > payload.len() || offset + numel * 4 > payload.len()
            {
                return Err(Error::Format(format!(
                    "payload truncated: tensor `{name}` needs bytes {offset}..{} of {}",
                    offset + numel * 4,
                    payload.len()
                )));
            }
            if end < *offset || end - offset != numel * 4 {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}`: header shape {shape:?} needs {} bytes but its payload region holds {}",
                    numel * 4,
                    end.saturating_sub(*offset)
                )));
            }
            let data = payload[*offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if tensors
                .insert(name.clone(), Tensor::new(shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Format(format!("tensor `{name}` listed twice")));
            }
        }
        ModelWeights::new(config, tensors)
    }
}

fn parse_tensor_line(line: &str) -> Result<(String, Vec<usize>, usize)> {
    let bad = || Error::Format(format!("malformed tensor line `{line}`"));
    let mut parts = line.split_whitespace();
    if parts.next() != Some("tensor") {
        return Err(bad());
    }
    let name = parts.next().ok_or_else(bad)?.to_string();
    let shape_s = parts
        .next()
        .and_then(|s| s.strip_prefix("shape="))
        .ok_or_else(bad)?;
    let offset_s = parts
        .next()
        .and_then(|s| s.strip_prefix("offset="))
        .ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    let shape = shape_s
        .split(',')
        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(bad)?;
    let offset = offset_s.parse().map_err(|_| bad())?;
    Ok((name, shape, offset))
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelWeights {
        let mut cfg = ModelConfig::classifier(6, 2);
        cfg.width = 4;
        cfg.mlp_width = 4;
        let mut tensors = BTreeMap::new();
        for (i, (name, shape)) in cfg.expected_shapes().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|j| ((i * 31 + j) as f32 * 0.125 - 1.0) as f64)
                .collect();
            tensors.insert(name, Tensor::new(shape, data).unwrap());
        }
        ModelWeights::new(cfg, tensors).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let w = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(w, back);
        assert_eq!(w.to_bytes(), back.to_bytes());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = tiny().to_bytes();
        for cut in [10, bytes.len() / 2, bytes.len() - 3] {
            let err = ModelWeights::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn edited_header_shape_is_a_shape_error() {
        let text = String::from_utf8_lossy(&tiny().to_bytes()).into_owned();
        let bytes = tiny().to_bytes();
        let header_len = text.find("end\n").unwrap() + 4;
        let header = &text[..header_len];
        let edited = header.replacen("shape=6,4 ", "shape=6,3 ", 1);
        assert_ne!(edited, header);
        let mut out = edited.into_bytes();
        out.extend_from_slice(&bytes[header_len..]);
        let err = ModelWeights::from_bytes(&out).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let w = tiny();
        let mut tensors = w.tensors().clone();
        tensors.insert("head".into(), Tensor::zeros(&[4, 3]));
        assert!(matches!(
            ModelWeights::new(w.config().clone(), tensors),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
