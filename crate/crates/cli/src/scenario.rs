//! Scenario worlds and the items captioned in them.

use anyhow::{bail, Context, Result};
use kvguide::zoo::world::{build_synthetic_world, WorldSpec};
use kvguide::zoo::{ModalityEmbedding, ModalitySource, SyntheticWorld};

use crate::config::{ExperimentConfig, ScenarioSource};
use crate::ingest::ingest_embeddings;

/// One image to caption, with its paired clip in audio scenarios.
#[derive(Debug, Clone)]
pub struct Item {
    pub name: String,
    pub image: ModalityEmbedding,
    pub audio: Option<ModalityEmbedding>,
}

pub struct Scenario {
    pub world: SyntheticWorld,
    pub items: Vec<Item>,
}

impl Scenario {
    /// Audio scenarios steer with the audio aligner instead of a style.
    pub fn is_audio(&self) -> bool {
        self.items.iter().any(|i| i.audio.is_some())
    }

    /// Style targets of the run; audio scenarios have a single `audio` row.
    pub fn styles(&self, requested: &[String]) -> Result<Vec<String>> {
        if self.is_audio() {
            if !requested.is_empty() {
                bail!("style targets do not apply to audio scenarios");
            }
            return Ok(vec!["audio".to_string()]);
        }
        let styles = if requested.is_empty() {
            let m = &self.world.manifest;
            let default = m
                .styles
                .iter()
                .find(|s| s.name == "positive")
                .or(m.styles.first());
            default.map(|s| vec![s.name.clone()]).unwrap_or_default()
        } else {
            requested.to_vec()
        };
        if styles.is_empty() {
            bail!("scenario defines no styles");
        }
        Ok(styles)
    }
}

pub fn load_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let world = match &cfg.scenario {
        ScenarioSource::Style => build_synthetic_world(cfg.seed, &WorldSpec::style_demo())?,
        ScenarioSource::Audio => build_synthetic_world(cfg.seed, &WorldSpec::audio_demo())?,
        ScenarioSource::Conflict => build_synthetic_world(cfg.seed, &WorldSpec::conflict_demo())?,
        ScenarioSource::Emotion => build_synthetic_world(cfg.seed, &WorldSpec::emotion_demo())?,
        ScenarioSource::Dir(dir) => SyntheticWorld::load(dir)
            .with_context(|| format!("loading scenario {}", dir.display()))?,
    };
    let m = &world.manifest;
    let has_audio = !m.audio.is_empty();
    let mut items: Vec<Item> = Vec::with_capacity(m.images.len());
    for (i, pair) in m.images.iter().enumerate() {
        let audio = if has_audio {
            let clip = m
                .audio
                .get(i)
                .with_context(|| format!("no clip paired with {}", pair.name))?;
            Some(ModalityEmbedding::new(
                clip.features.clone(),
                ModalitySource::Audio,
            )?)
        } else {
            None
        };
        items.push(Item {
            name: pair.name.clone(),
            image: ModalityEmbedding::new(pair.features.clone(), ModalitySource::Image)?,
            audio,
        });
    }
    if let Some(path) = &cfg.embeddings {
        let images = ingest_embeddings(path, world.aligner.align_dim(), ModalitySource::Image)?;
        items = images
            .into_iter()
            .enumerate()
            .map(|(i, image)| Item {
                name: format!("emb_{i}"),
                image,
                audio: None,
            })
            .collect();
        if has_audio && cfg.audio_embeddings.is_none() {
            // Keep the bundled clips when they line up with the new images.
            if m.audio.len() != items.len() {
                bail!(
                    "{} image embeddings but the scenario pairs {} clips; pass audio embeddings too",
                    items.len(),
                    m.audio.len()
                );
            }
            for (item, clip) in items.iter_mut().zip(&m.audio) {
                item.audio = Some(ModalityEmbedding::new(
                    clip.features.clone(),
                    ModalitySource::Audio,
                )?);
            }
        }
    }
    if let Some(path) = &cfg.audio_embeddings {
        if !has_audio {
            bail!("audio embeddings given for a scenario without an audio aligner");
        }
        let clips =
            ingest_embeddings(path, world.audio_aligner.align_dim(), ModalitySource::Audio)?;
        if clips.len() != items.len() {
            bail!(
                "{} audio embeddings for {} images",
                clips.len(),
                items.len()
            );
        }
        for (item, clip) in items.iter_mut().zip(clips) {
            item.audio = Some(clip);
        }
    }
    if items.is_empty() {
        bail!("scenario has no items");
    }
    Ok(Scenario { world, items })
}
