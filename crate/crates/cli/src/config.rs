//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use kvguide::decoding::DecodingConfig;
use kvguide::guidance::{GuidanceConfig, Polarity, Variant};

/// A guided variant, or plain greedy decoding for reference rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Guided(Variant),
    Unguided,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Guided(v) => v.fmt(f),
            Model::Unguided => f.write_str("unguided"),
        }
    }
}

impl FromStr for Model {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "unguided" {
            return Ok(Model::Unguided);
        }
        Ok(Model::Guided(s.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioSource {
    Style,
    Audio,
    Conflict,
    Emotion,
    /// A directory written by `SyntheticWorld::save`.
    Dir(PathBuf),
}

impl FromStr for ScenarioSource {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "style" => ScenarioSource::Style,
            "audio" => ScenarioSource::Audio,
            "conflict" => ScenarioSource::Conflict,
            "emotion" => ScenarioSource::Emotion,
            path => ScenarioSource::Dir(PathBuf::from(path)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub models: Vec<Model>,
    pub scenario: ScenarioSource,
    /// Style targets; empty means the scenario's default.
    pub styles: Vec<String>,
    pub embeddings: Option<PathBuf>,
    pub audio_embeddings: Option<PathBuf>,
    /// `guidance.*` keys, applied over the preset of each model and style.
    pub guidance: Vec<(String, String)>,
    pub decoding: DecodingConfig,
    pub report: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

const GUIDANCE_KEYS: [&str; 14] = [
    "lambda_lm",
    "lambda_cl",
    "lambda_sl",
    "tau",
    "tau_align",
    "tau_style",
    "alpha_lm",
    "alpha_align",
    "inner_steps",
    "decentral_steps",
    "sign",
    "grad_norm",
    "align_grad_norm",
    "norm_scope",
];

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| anyhow!("invalid value `{v}` for `{key}`: {e}"))
}

impl ExperimentConfig {
    /// Builds a config from pairs in order; later pairs override earlier ones.
    /// Unknown keys are rejected and `seed` is required.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut seed = None;
        let mut cfg = Self {
            seed: 0,
            models: vec![Model::Guided(Variant::Product)],
            scenario: ScenarioSource::Style,
            styles: Vec::new(),
            embeddings: None,
            audio_embeddings: None,
            guidance: Vec::new(),
            decoding: DecodingConfig::default(),
            report: None,
            captions: None,
            trace: None,
        };
        for (key, v) in pairs {
            match key.as_str() {
                "seed" => seed = Some(num(key, v)?),
                "variant" => {
                    cfg.models = list(v).iter().map(|m| m.parse()).collect::<Result<_>>()?;
                    if cfg.models.is_empty() {
                        bail!("`variant` lists no variants");
                    }
                }
                "scenario" => cfg.scenario = v.parse()?,
                "style" => cfg.styles = list(v),
                "embeddings" => cfg.embeddings = Some(PathBuf::from(v)),
                "audio_embeddings" => cfg.audio_embeddings = Some(PathBuf::from(v)),
                "output.report" => cfg.report = Some(PathBuf::from(v)),
                "output.captions" => cfg.captions = Some(PathBuf::from(v)),
                "output.trace" => cfg.trace = Some(PathBuf::from(v)),
                "decoding.beams" => cfg.decoding.beams = num(key, v)?,
                "decoding.top_k" => cfg.decoding.top_k = num(key, v)?,
                "decoding.max_len" => cfg.decoding.max_len = num(key, v)?,
                "decoding.trace_top_n" => cfg.decoding.trace_top_n = num(key, v)?,
                "decoding.context_layers" => {
                    cfg.decoding.context_layers = if v == "all" {
                        None
                    } else {
                        Some(list(v).iter().map(|l| num(key, l)).collect::<Result<_>>()?)
                    }
                }
                k => match k.strip_prefix("guidance.") {
                    Some(name) if GUIDANCE_KEYS.contains(&name) => {
                        cfg.guidance.retain(|(n, _)| n != name);
                        cfg.guidance.push((name.to_string(), v.clone()));
                    }
                    _ => bail!("unknown config key `{k}`"),
                },
            }
        }
        cfg.seed = seed.ok_or_else(|| anyhow!("missing required config key `seed`"))?;
        // Surface bad guidance values before any work starts.
        for model in &cfg.models {
            cfg.guidance_for(*model, "positive")?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut pairs =
            parse_pairs(&text).with_context(|| format!("in config {}", path.display()))?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs).with_context(|| format!("in config {}", path.display()))
    }

    /// The preset for `model` and the style's polarity with the `guidance.*`
    /// overrides applied.
    pub fn guidance_for(&self, model: Model, style: &str) -> Result<GuidanceConfig> {
        let polarity = if style == "negative" {
            Polarity::Negative
        } else {
            Polarity::Positive
        };
        let variant = match model {
            Model::Guided(v) => v,
            Model::Unguided => Variant::Product,
        };
        let mut g = GuidanceConfig::preset(variant, polarity);
        for (name, v) in &self.guidance {
            let key = format!("guidance.{name}");
            match name.as_str() {
                "lambda_lm" => g.lambda_lm = num(&key, v)?,
                "lambda_cl" => g.lambda_cl = num(&key, v)?,
                "lambda_sl" => g.lambda_sl = num(&key, v)?,
                "tau" => g.tau = num(&key, v)?,
                "tau_align" => g.tau_align = Some(num(&key, v)?),
                "tau_style" => g.tau_style = Some(num(&key, v)?),
                "alpha_lm" => g.alpha_lm = num(&key, v)?,
                "alpha_align" => g.alpha_align = num(&key, v)?,
                "inner_steps" => g.inner_steps = num(&key, v)?,
                "decentral_steps" => g.decentral_steps = num(&key, v)?,
                "sign" => g.sign = num(&key, v)?,
                "grad_norm" => g.grad_norm = num(&key, v)?,
                "align_grad_norm" => g.align_grad_norm = num(&key, v)?,
                "norm_scope" => g.norm_scope = num(&key, v)?,
                _ => unreachable!("keys are checked when parsing"),
            }
        }
        if model == Model::Unguided {
            g.inner_steps = 0;
        }
        g.validate()
            .with_context(|| format!("guidance for {model}"))?;
        Ok(g)
    }

    /// Decoding settings for `model`; unguided rows decode greedily.
    pub fn decoding_for(&self, model: Model) -> DecodingConfig {
        let mut d = self.decoding.clone();
        if model == Model::Unguided {
            d.beams = 1;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn parses_sections_and_lists() {
        let cfg = ExperimentConfig::from_pairs(&pairs(
            "# demo\nseed = 7\nvariant = product, unguided\nstyle=positive,negative\n\
             guidance.alpha_lm=0.3\ndecoding.beams = 3\ndecoding.context_layers = 1\n",
        ))
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            cfg.models,
            vec![Model::Guided(Variant::Product), Model::Unguided]
        );
        assert_eq!(cfg.styles, vec!["positive", "negative"]);
        assert_eq!(cfg.decoding.beams, 3);
        assert_eq!(cfg.decoding.context_layers, Some(vec![1]));
        let g = cfg
            .guidance_for(Model::Guided(Variant::Product), "negative")
            .unwrap();
        assert_eq!(g.alpha_lm, 0.3);
        assert_eq!(g.tau, 0.09);
        assert_eq!(
            cfg.guidance_for(Model::Unguided, "positive")
                .unwrap()
                .inner_steps,
            0
        );
        assert_eq!(cfg.decoding_for(Model::Unguided).beams, 1);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = ExperimentConfig::from_pairs(&pairs("seed=1\nguidance.alpha=0.3")).unwrap_err();
        assert!(err.to_string().contains("guidance.alpha"), "{err}");
        let err = ExperimentConfig::from_pairs(&pairs("seed=1\nbeams=3")).unwrap_err();
        assert!(err.to_string().contains("`beams`"), "{err}");
    }

    #[test]
    fn seed_is_required() {
        let err = ExperimentConfig::from_pairs(&pairs("variant=sum")).unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(ExperimentConfig::from_pairs(&pairs("seed=x")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("seed=1\nvariant=mixture")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("seed=1\nguidance.tau=-1")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("seed=1\nguidance.sign=sideways")).is_err());
        assert!(parse_pairs("seed 1").is_err());
    }

    #[test]
    fn later_pairs_override() {
        let cfg = ExperimentConfig::from_pairs(&pairs(
            "seed=1\nseed=2\nguidance.tau=0.5\nguidance.tau=0.25",
        ))
        .unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.guidance, vec![("tau".to_string(), "0.25".to_string())]);
    }
}
