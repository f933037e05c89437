//! Constructed (untrained) model worlds with known ground truth.
//!
//! The decoder is a generic seeded language model. Named tokens (concept words
//! for images and audio clips, style markers) are then assigned to ids the
//! decoder proposes as candidates but never picks greedily, and the aligners
//! and classifier get embedding tables placed so that those tokens carry the
//! intended meaning.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::decoder::{f32_round, BOS, EOS};
use super::{
    load_weights, save_weights, DecoderLm, DualEncoder, ModalityEmbedding, ModalitySource,
    ModelConfig, ModelWeights, StyleClassifier,
};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Two classes: 0 negative, 1 positive.
    Binary,
    /// 64 emotion classes scored by summing class groups.
    Emotion64,
}

impl ClassifierKind {
    pub fn classes(self) -> usize {
        match self {
            ClassifierKind::Binary => 2,
            ClassifierKind::Emotion64 => 64,
        }
    }
}

/// A modality item and the token names it is associated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub name: String,
    pub tokens: Vec<String>,
}

/// A style and its marker tokens; `classes` are the classifier outputs the
/// markers drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub markers: Vec<String>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub vocab_size: usize,
    pub prompt: Vec<String>,
    pub images: Vec<PairSpec>,
    pub audio: Vec<PairSpec>,
    pub styles: Vec<StyleSpec>,
    pub classifier: ClassifierKind,
    /// Candidate-set size used when choosing ids for named tokens.
    pub top_k: usize,
    pub max_len: usize,
}

fn pairs(items: &[(&str, &str)]) -> Vec<PairSpec> {
    items
        .iter()
        .map(|(name, token)| PairSpec {
            name: name.to_string(),
            tokens: vec![token.to_string()],
        })
        .collect()
}

fn style(name: &str, markers: &[&str], classes: &[usize]) -> StyleSpec {
    StyleSpec {
        name: name.into(),
        markers: markers.iter().map(|m| m.to_string()).collect(),
        classes: classes.to_vec(),
    }
}

fn prompt() -> Vec<String> {
    ["a", "photo", "of"].iter().map(|s| s.to_string()).collect()
}

impl WorldSpec {
    /// Ten images and positive/negative marker sets.
    pub fn style_demo() -> Self {
        Self {
            vocab_size: 128,
            prompt: prompt(),
            images: pairs(&[
                ("image_0", "dog"),
                ("image_1", "beach"),
                ("image_2", "car"),
                ("image_3", "tree"),
                ("image_4", "pizza"),
                ("image_5", "cat"),
                ("image_6", "boat"),
                ("image_7", "cake"),
                ("image_8", "bridge"),
                ("image_9", "horse"),
            ]),
            audio: Vec::new(),
            styles: vec![
                style("negative", &["bad", "ugly", "sad"], &[0]),
                style("positive", &["great", "lovely", "happy"], &[1]),
            ],
            classifier: ClassifierKind::Binary,
            top_k: 16,
            max_len: 20,
        }
    }

    /// Images paired with sound clips; the audio aligner replaces the style expert.
    pub fn audio_demo() -> Self {
        Self {
            vocab_size: 128,
            prompt: prompt(),
            images: pairs(&[
                ("image_0", "dog"),
                ("image_1", "beach"),
                ("image_2", "crowd"),
                ("image_3", "street"),
                ("image_4", "park"),
            ]),
            audio: pairs(&[
                ("laughter", "laugh"),
                ("applause", "clapping"),
                ("rain", "rain"),
                ("barking", "bark"),
                ("engine", "engine"),
            ]),
            styles: vec![
                style("negative", &["bad", "sad"], &[0]),
                style("positive", &["great", "happy"], &[1]),
            ],
            classifier: ClassifierKind::Binary,
            top_k: 16,
            max_len: 20,
        }
    }

    /// The image's concept token doubles as a negative marker, so alignment
    /// and a positive style target prefer disjoint tokens.
    pub fn conflict_demo() -> Self {
        Self {
            vocab_size: 128,
            prompt: prompt(),
            images: pairs(&[("image_0", "storm"), ("image_1", "flood")]),
            audio: Vec::new(),
            styles: vec![
                style("negative", &["storm", "flood", "gloomy"], &[0]),
                style("positive", &["sunny", "joyful", "bright"], &[1]),
            ],
            classifier: ClassifierKind::Binary,
            top_k: 16,
            max_len: 20,
        }
    }

    /// Humorous and romantic markers driving a 64-way emotion classifier.
    pub fn emotion_demo() -> Self {
        Self {
            vocab_size: 128,
            prompt: prompt(),
            images: pairs(&[
                ("image_0", "dog"),
                ("image_1", "cake"),
                ("image_2", "beach"),
            ]),
            audio: Vec::new(),
            styles: vec![
                style("humorous", &["funny", "silly"], &[0, 53]),
                style("romantic", &["love", "sweet"], &[4, 8, 18, 23, 24]),
            ],
            classifier: ClassifierKind::Emotion64,
            top_k: 16,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPair {
    pub name: String,
    pub features: Vec<f64>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStyle {
    pub name: String,
    pub markers: Vec<TokenId>,
    pub classes: Vec<usize>,
}

/// Ground truth of a built world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub vocab_size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub prompt: Vec<TokenId>,
    pub classifier: ClassifierKind,
    /// Greedy continuation of the prompt under the decoder alone.
    pub unguided_caption: Vec<TokenId>,
    /// Display string of every id.
    pub tokens: Vec<String>,
    pub images: Vec<ManifestPair>,
    pub audio: Vec<ManifestPair>,
    pub styles: Vec<ManifestStyle>,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub decoder: DecoderLm,
    pub aligner: DualEncoder,
    pub audio_aligner: DualEncoder,
    pub classifier: StyleClassifier,
    pub manifest: Manifest,
}

impl SyntheticWorld {
    pub fn token_name(&self, id: TokenId) -> &str {
        &self.manifest.tokens[id as usize]
    }

    pub fn token_id(&self, name: &str) -> Option<TokenId> {
        self.manifest
            .tokens
            .iter()
            .position(|t| t == name)
            .map(|i| i as TokenId)
    }

    /// Space-joined display form, without the end token.
    pub fn display(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != self.manifest.eos)
            .map(|&t| self.token_name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `[BOS] + prompt`.
    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        let mut out = vec![self.manifest.bos];
        out.extend(&self.manifest.prompt);
        out
    }

    pub fn image(&self, name: &str) -> Option<ModalityEmbedding> {
        let item = self.manifest.images.iter().find(|p| p.name == name)?;
        ModalityEmbedding::new(item.features.clone(), ModalitySource::Image).ok()
    }

    pub fn audio_clip(&self, name: &str) -> Option<ModalityEmbedding> {
        let item = self.manifest.audio.iter().find(|p| p.name == name)?;
        ModalityEmbedding::new(item.features.clone(), ModalitySource::Audio).ok()
    }

    pub fn style(&self, name: &str) -> Option<&ManifestStyle> {
        self.manifest.styles.iter().find(|s| s.name == name)
    }

    /// Writes the four weight files and `manifest.toml` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_weights(self.decoder.weights(), dir.join("decoder.bin"))?;
        save_weights(self.aligner.weights(), dir.join("aligner.bin"))?;
        save_weights(self.audio_aligner.weights(), dir.join("audio_aligner.bin"))?;
        save_weights(self.classifier.weights(), dir.join("classifier.bin"))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, self.manifest.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a world written by [`SyntheticWorld::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::from_toml(&text)?;
        let world = Self {
            decoder: DecoderLm::new(load_weights(dir.join("decoder.bin"))?)?,
            aligner: DualEncoder::new(load_weights(dir.join("aligner.bin"))?)?,
            audio_aligner: DualEncoder::new(load_weights(dir.join("audio_aligner.bin"))?)?,
            classifier: StyleClassifier::new(load_weights(dir.join("classifier.bin"))?)?,
            manifest,
        };
        if world.manifest.tokens.len() != world.decoder.vocab()
            || world.manifest.vocab_size != world.decoder.vocab()
        {
            return Err(Error::Format(format!(
                "{}: manifest vocabulary does not match the decoder",
                path.display()
            )));
        }
        Ok(world)
    }
}

const SAMPLED_PATHS: usize = 12;

/// Builds a world for `spec`; every model is a deterministic function of `seed`.
pub fn build_synthetic_world(seed: u64, spec: &WorldSpec) -> Result<SyntheticWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decoder = DecoderLm::seeded(ModelConfig::decoder(spec.vocab_size), rng.random())?;
    let align_cfg = ModelConfig::aligner(spec.vocab_size);
    let a = align_cfg.align_dim;
    if spec.images.len() > a || spec.audio.len() > a {
        return Err(Error::InvalidParameter(format!(
            "at most {a} images and {a} audio clips fit the alignment space"
        )));
    }
    if spec.top_k == 0 || spec.top_k > spec.vocab_size {
        return Err(Error::InvalidParameter(format!(
            "top_k {} for vocab {}",
            spec.top_k, spec.vocab_size
        )));
    }

    let prompt: Vec<TokenId> = (0..spec.prompt.len()).map(|i| 2 + i as TokenId).collect();
    let reserved = 2 + prompt.len();
    if reserved > spec.vocab_size {
        return Err(Error::InvalidParameter(
            "vocab too small for the prompt".into(),
        ));
    }
    let mut start = vec![BOS];
    start.extend(&prompt);
    let (unguided_caption, counts) = candidate_statistics(&decoder, &start, spec, &mut rng)?;

    // named tokens in assignment order: round-robin over styles, audio, images
    let mut groups: Vec<Vec<&str>> = Vec::new();
    for s in &spec.styles {
        groups.push(s.markers.iter().map(String::as_str).collect());
    }
    groups.push(
        spec.audio
            .iter()
            .flat_map(|p| p.tokens.iter().map(String::as_str))
            .collect(),
    );
    groups.push(
        spec.images
            .iter()
            .flat_map(|p| p.tokens.iter().map(String::as_str))
            .collect(),
    );
    let mut order: Vec<&str> = Vec::new();
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for g in &groups {
            if let Some(&name) = g.get(i) {
                if !order.contains(&name) {
                    order.push(name);
                }
            }
        }
    }

    let mut ranked: Vec<TokenId> = (reserved as TokenId..spec.vocab_size as TokenId)
        .filter(|id| !unguided_caption.contains(id))
        .collect();
    ranked.sort_by(|x, y| {
        let (cx, cy) = (&counts[*x as usize], &counts[*y as usize]);
        cy.0.cmp(&cx.0)
            .then(cy.1.cmp(&cx.1))
            .then(cy.2.total_cmp(&cx.2))
            .then(x.cmp(y))
    });
    if ranked.len() < order.len() {
        return Err(Error::InvalidParameter(format!(
            "vocab of {} leaves {} free ids for {} named tokens",
            spec.vocab_size,
            ranked.len(),
            order.len()
        )));
    }
    let ids: HashMap<&str, TokenId> = order.iter().zip(&ranked).map(|(n, &id)| (*n, id)).collect();

    let mut tokens: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    tokens[BOS as usize] = "<bos>".into();
    tokens[EOS as usize] = "<eos>".into();
    for (i, word) in spec.prompt.iter().enumerate() {
        tokens[prompt[i] as usize] = word.clone();
    }
    for (name, &id) in &ids {
        tokens[id as usize] = name.to_string();
    }

    let image_basis = orthonormal_basis(&mut rng, a);
    let audio_basis = orthonormal_basis(&mut rng, a);
    let manifest_pairs =
        |items: &[PairSpec], basis: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<ManifestPair> {
            let noise = Normal::new(0.0, 0.03).expect("positive std");
            items
                .iter()
                .zip(basis)
                .map(|(p, e)| {
                    let v: Vec<f64> = e.iter().map(|x| x + noise.sample(rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    ManifestPair {
                        name: p.name.clone(),
                        features: v.iter().map(|x| f32_round(x / n)).collect(),
                        tokens: p.tokens.iter().map(|t| ids[t.as_str()]).collect(),
                    }
                })
                .collect()
        };
    let images = manifest_pairs(&spec.images, &image_basis, &mut rng);
    let audio = manifest_pairs(&spec.audio, &audio_basis, &mut rng);
    let styles: Vec<ManifestStyle> = spec
        .styles
        .iter()
        .map(|s| {
            if let Some(&c) = s.classes.iter().find(|&&c| c >= spec.classifier.classes()) {
                return Err(Error::InvalidParameter(format!(
                    "style `{}` names class {c}",
                    s.name
                )));
            }
            Ok(ManifestStyle {
                name: s.name.clone(),
                markers: s.markers.iter().map(|m| ids[m.as_str()]).collect(),
                classes: s.classes.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let aligner = DualEncoder::new(aligner_weights(
        &mut rng,
        &align_cfg,
        &images,
        &image_basis,
    )?)?;
    let audio_aligner =
        DualEncoder::new(aligner_weights(&mut rng, &align_cfg, &audio, &audio_basis)?)?;
    let cls_cfg = ModelConfig::classifier(spec.vocab_size, spec.classifier.classes());
    let classifier = StyleClassifier::new(classifier_weights(&mut rng, &cls_cfg, &styles)?)?;

    let manifest = Manifest {
        seed,
        vocab_size: spec.vocab_size,
        bos: BOS,
        eos: EOS,
        prompt,
        classifier: spec.classifier,
        unguided_caption,
        tokens,
        images,
        audio,
        styles,
    };
    Ok(SyntheticWorld {
        decoder,
        aligner,
        audio_aligner,
        classifier,
        manifest,
    })
}

/// Greedy caption plus, per id, (hits in the first candidate set, hits over
/// all candidate sets, summed probability) across greedy and sampled paths.
fn candidate_statistics(
    decoder: &DecoderLm,
    start: &[TokenId],
    spec: &WorldSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TokenId>, Vec<(usize, usize, f64)>)> {
    let mut counts = vec![(0usize, 0usize, 0.0f64); spec.vocab_size];
    let mut greedy = Vec::new();
    for path in 0..=SAMPLED_PATHS {
        let mut tokens = start.to_vec();
        let mut cache = decoder.prefill(&tokens)?;
        for step in 0..spec.max_len {
            let (dist, next) = decoder.forward(&tokens, &cache)?;
            cache = next;
            for (id, p) in dist.top_n(spec.top_k) {
                let c = &mut counts[id as usize];
                if step == 0 {
                    c.0 += 1;
                }
                c.1 += 1;
                c.2 += p;
            }
            let chosen = if path == 0 {
                dist.argmax_id()
            } else {
                let w =
                    WeightedIndex::new(dist.probs()).map_err(|e| Error::Numeric(e.to_string()))?;
                dist.candidate_ids()[w.sample(rng)]
            };
            tokens.push(chosen);
            if path == 0 {
                greedy.push(chosen);
            }
            if chosen == EOS {
                break;
            }
        }
    }
    Ok((greedy, counts))
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape from config")
}

/// Block weights with residual branches scaled by `attn_gain` and `mlp_gain`.
fn block_weights(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    prefix: &str,
    attn_gain: f64,
    mlp_gain: f64,
    out: &mut BTreeMap<String, Tensor>,
) {
    let d = cfg.width;
    let m = cfg.mlp_width;
    let mut put = |name: &str, t: Tensor| {
        out.insert(format!("{prefix}{name}"), t);
    };
    put("ln1.g", Tensor::vector(vec![1.0; d]));
    put("ln1.b", Tensor::zeros(&[d]));
    put("ln2.g", Tensor::vector(vec![1.0; d]));
    put("ln2.b", Tensor::zeros(&[d]));
    let s = 1.0 / (d as f64).sqrt();
    put("attn.wq", gaussian(rng, &[d, d], s));
    put("attn.wk", gaussian(rng, &[d, d], s));
    put("attn.wv", gaussian(rng, &[d, d], s));
    put("attn.wo", gaussian(rng, &[d, d], attn_gain * s));
    put("mlp.w1", gaussian(rng, &[d, m], s));
    put("mlp.b1", Tensor::zeros(&[m]));
    put(
        "mlp.w2",
        gaussian(rng, &[m, d], mlp_gain / (m as f64).sqrt()),
    );
    put("mlp.b2", Tensor::zeros(&[d]));
}

/// `[I; 0]` of shape `[rows, cols]` (or its transpose layout) scaled by `gain`, plus noise.
fn identity_projection(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    gain: f64,
    noise: f64,
) -> Tensor {
    let mut t = gaussian(rng, &[rows, cols], noise);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] += gain;
    }
    t
}

fn finish(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<ModelWeights> {
    for t in tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = f32_round(*x));
    }
    ModelWeights::new(cfg.clone(), tensors)
}

const CONCEPT_GAIN: f64 = 3.0;

fn aligner_weights(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    pairs: &[ManifestPair],
    basis: &[Vec<f64>],
) -> Result<ModelWeights> {
    let (v, d, a) = (cfg.vocab, cfg.width, cfg.align_dim);
    let mut t = BTreeMap::new();

    // shared-space coordinates are the first `a` embedding dims; the rest is
    // free capacity the projections ignore
    let mut emb = gaussian(rng, &[v, d], 0.5);
    for row in 0..v {
        for j in 0..a {
            emb.data_mut()[row * d + j] *= 0.04;
        }
    }
    for (pair, e) in pairs.iter().zip(basis) {
        for &tok in &pair.tokens {
            for j in 0..a {
                emb.data_mut()[tok as usize * d + j] += CONCEPT_GAIN * e[j];
            }
        }
    }
    t.insert("text.tok_emb".to_string(), emb);
    for l in 0..cfg.layers {
        block_weights(rng, cfg, &format!("text.h{l}."), 0.02, 0.02, &mut t);
    }
    t.insert(
        "text.proj".into(),
        identity_projection(rng, d, a, 1.0, 0.01),
    );

    t.insert(
        "mod.in_proj".into(),
        identity_projection(rng, a, d, CONCEPT_GAIN, 0.01),
    );
    t.insert("mod.pos_emb".into(), gaussian(rng, &[cfg.patches, d], 0.05));
    for l in 0..cfg.modality_layers {
        let attn_gain = if l == 0 { 0.15 } else { 0.02 };
        block_weights(rng, cfg, &format!("mod.h{l}."), attn_gain, 0.02, &mut t);
    }
    t.insert("mod.proj".into(), identity_projection(rng, d, a, 1.0, 0.01));
    finish(cfg, t)
}

const MARKER_GAIN: f64 = 3.0;
const HEAD_GAIN: f64 = 2.0;

fn classifier_weights(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    styles: &[ManifestStyle],
) -> Result<ModelWeights> {
    let (v, d, c) = (cfg.vocab, cfg.width, cfg.classes);
    let mut t = BTreeMap::new();
    let directions = orthonormal_basis(rng, d);
    let mut emb = gaussian(rng, &[v, d], 0.05);
    let mut head = Tensor::zeros(&[d, c]);
    for (s, u) in styles.iter().zip(&directions) {
        for &m in &s.markers {
            for j in 0..d {
                emb.data_mut()[m as usize * d + j] += MARKER_GAIN * u[j];
            }
        }
        for &class in &s.classes {
            for j in 0..d {
                head.data_mut()[j * c + class] += HEAD_GAIN * u[j];
            }
        }
    }
    t.insert("tok_emb".to_string(), emb);
    for l in 0..cfg.layers {
        block_weights(rng, cfg, &format!("h{l}."), 0.02, 0.02, &mut t);
    }
    t.insert("head".into(), head);
    t.insert("head_bias".into(), Tensor::zeros(&[c]));
    finish(cfg, t)
}
