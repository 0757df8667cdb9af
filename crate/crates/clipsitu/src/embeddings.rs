//! Embedding providers: pooled + patch image embeddings, text embeddings,
//! and per-event video embeddings.
//!
//! Two providers ship here. [`SyntheticProvider`] is a pure function of
//! `(seed, ref)` that plants ground-truth signal into its outputs, which is
//! what makes desk-scale learning thresholds auditable. [`PrecomputedProvider`]
//! reads bundles from the cache format documented in `docs/formats.md`, so an
//! external process running a real encoder (CLIP-style image/text towers, an
//! X-CLIP-style video tower) can precompute features once and everything
//! downstream works unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, ParamMap, Var};
use crate::mat::{gaussian, Mat};
use crate::ontology::{Ontology, NUM_EVENTS};

/// Gaussian noise level added on top of planted signal vectors.
pub const PLANT_NOISE_STD: f64 = 0.1;

/// Pooled image vector plus the patch matrix (class token at row 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// `1×d`
    pub pooled: Mat,
    /// `p×d`
    pub patches: Mat,
}

/// Per-event video features: pooled vector and pre-temporal-pooling tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEventEmbedding {
    /// `1×d`
    pub pooled: Mat,
    /// `t×d`
    pub unpooled: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    /// Embedding dimension.
    pub d: usize,
    /// Patch count, including the class token position.
    pub p: usize,
    /// Unpooled tokens per video event.
    #[serde(default = "default_event_tokens")]
    pub t: usize,
    /// Seed for the synthetic provider; ignored by adapters.
    #[serde(default)]
    pub seed: u64,
}

fn default_event_tokens() -> usize {
    8
}

/// Encoder configurations this crate knows out of the box. `p` counts the
/// class token, e.g. a 32-pixel patch grid on a 224px image gives 7·7+1 = 50.
pub fn bundled_configs() -> Vec<ProviderConfig> {
    let mk = |name: &str, d: usize, p: usize| ProviderConfig {
        name: name.to_string(),
        d,
        p,
        t: default_event_tokens(),
        seed: 0,
    };
    vec![
        mk("vit-b32", 512, 50),
        mk("vit-b16", 512, 197),
        mk("vit-l14", 768, 257),
        mk("vit-l14-336", 768, 577),
    ]
}

pub trait EmbeddingProvider {
    fn config(&self) -> &ProviderConfig;

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingBundle>;

    /// Deterministic text embedding, `1×d`. Empty strings are rejected.
    fn embed_text(&self, text: &str) -> Result<Mat>;

    fn embed_video(&self, video_ref: &str) -> Result<Vec<VideoEventEmbedding>>;
}

/// What the synthetic provider plants into one image's embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePlant {
    pub verb: String,
    pub roles: Vec<PlantedRole>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRole {
    pub role: String,
    /// Text of the noun filling this role.
    pub noun: String,
    /// Patch row carrying the noun's embedding, in `1..p`.
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub verb: String,
    /// Noun phrases planted into this event's unpooled tokens, in slot order.
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPlant {
    pub events: Vec<PlantedEvent>,
}

/// Ground-truth plants for a synthetic dataset, written by the generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantManifest {
    pub images: BTreeMap<String, ImagePlant>,
    #[serde(default)]
    pub videos: BTreeMap<String, VideoPlant>,
}

impl PlantManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Deterministic provider whose outputs are pure functions of `(seed, ref)`.
///
/// Image pooled vectors are the normalized sum of the planted verb and
/// role-noun embeddings plus noise; every patch is noise except one designated
/// patch per role, which carries that role's noun embedding. Refs of the form
/// `noise:<anything>` embed to pure noise, so robustness paths can run
/// without a plant.
pub struct SyntheticProvider {
    config: ProviderConfig,
    plants: PlantManifest,
}

impl SyntheticProvider {
    pub fn new(config: ProviderConfig, plants: PlantManifest) -> Self {
        SyntheticProvider { config, plants }
    }

    /// A provider with no plants; only `noise:` refs and text embedding work.
    pub fn bare(config: ProviderConfig) -> Self {
        SyntheticProvider {
            config,
            plants: PlantManifest::default(),
        }
    }

    fn stream(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        for p in parts {
            h.update(p.as_bytes());
            h.update([0xff]);
        }
        let digest = h.finalize();
        let mut eight = [0u8; 8];
        eight.copy_from_slice(&digest[..8]);
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(eight))
    }

    fn noise_row(&self, parts: &[&str]) -> Mat {
        let mut rng = self.stream(parts);
        let mut v = Mat::zeros(1, self.config.d);
        for c in 0..self.config.d {
            v.set(0, c, gaussian(&mut rng));
        }
        v.l2_normalized()
    }

    /// signal + σ·noise, renormalized.
    fn perturbed(&self, signal: &Mat, parts: &[&str]) -> Mat {
        let mut rng = self.stream(parts);
        let mut v = signal.clone();
        for c in 0..self.config.d {
            v.add_at(0, c, PLANT_NOISE_STD * gaussian(&mut rng));
        }
        v.l2_normalized()
    }

    fn text_vec(&self, text: &str) -> Mat {
        self.noise_row(&["text", text])
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingBundle> {
        let d = self.config.d;
        let p = self.config.p;
        if let Some(plant) = self.plants.images.get(image_ref) {
            let mut sum = self.text_vec(&plant.verb);
            for role in &plant.roles {
                sum.add_assign(&self.text_vec(&role.noun));
            }
            let pooled = self.perturbed(&sum.l2_normalized(), &["img-pooled", image_ref]);

            let mut patches = Mat::zeros(p, d);
            for row in 0..p {
                let planted = plant.roles.iter().find(|r| r.patch == row);
                let row_idx = row.to_string();
                let vec = match planted {
                    Some(role) => {
                        self.perturbed(&self.text_vec(&role.noun), &["img-patch", image_ref, &row_idx])
                    }
                    None => self.noise_row(&["img-patch", image_ref, &row_idx]),
                };
                patches.row_mut(row).copy_from_slice(vec.row(0));
            }
            Ok(EmbeddingBundle { pooled, patches })
        } else if image_ref.starts_with("noise:") {
            let pooled = self.noise_row(&["img-pooled", image_ref]);
            let mut patches = Mat::zeros(p, d);
            for row in 0..p {
                let row_idx = row.to_string();
                let vec = self.noise_row(&["img-patch", image_ref, &row_idx]);
                patches.row_mut(row).copy_from_slice(vec.row(0));
            }
            Ok(EmbeddingBundle { pooled, patches })
        } else {
            Err(Error::UnknownRef(image_ref.to_string()))
        }
    }

    fn embed_text(&self, text: &str) -> Result<Mat> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty string".into()));
        }
        Ok(self.text_vec(text))
    }

    fn embed_video(&self, video_ref: &str) -> Result<Vec<VideoEventEmbedding>> {
        let d = self.config.d;
        let t = self.config.t;
        let events: Vec<Option<&PlantedEvent>> = if let Some(plant) = self.plants.videos.get(video_ref)
        {
            if plant.events.len() != NUM_EVENTS {
                return Err(Error::validation(
                    video_ref.to_string(),
                    format!("plant has {} events, expected {NUM_EVENTS}", plant.events.len()),
                ));
            }
            plant.events.iter().map(Some).collect()
        } else if video_ref.starts_with("noise:") {
            vec![None; NUM_EVENTS]
        } else {
            return Err(Error::UnknownRef(video_ref.to_string()));
        };

        let mut out = Vec::with_capacity(NUM_EVENTS);
        for (i, ev) in events.iter().enumerate() {
            let ei = i.to_string();
            let pooled = match ev {
                Some(ev) => {
                    let mut sum = self.text_vec(&ev.verb);
                    for phrase in &ev.phrases {
                        sum.add_assign(&self.text_vec(phrase));
                    }
                    self.perturbed(&sum.l2_normalized(), &["vid-pooled", video_ref, &ei])
                }
                None => self.noise_row(&["vid-pooled", video_ref, &ei]),
            };
            let mut unpooled = Mat::zeros(t, d);
            for tok in 0..t {
                let ti = tok.to_string();
                let vec = match ev {
                    Some(ev) if tok < ev.phrases.len() => self.perturbed(
                        &self.text_vec(&ev.phrases[tok]),
                        &["vid-token", video_ref, &ei, &ti],
                    ),
                    _ => self.noise_row(&["vid-token", video_ref, &ei, &ti]),
                };
                unpooled.row_mut(tok).copy_from_slice(vec.row(0));
            }
            out.push(VideoEventEmbedding { pooled, unpooled });
        }
        Ok(out)
    }
}

/// Learnable affine projection; the graph-level building block behind every
/// "project to 512" site.
pub struct Projection;

impl Projection {
    pub fn init(
        params: &mut ParamMap,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let std = 1.0 / (in_dim as f64).sqrt();
        params.insert(format!("{prefix}.w"), Mat::randn(in_dim, out_dim, std, rng));
        params.insert(format!("{prefix}.b"), Mat::zeros(1, out_dim));
    }

    pub fn init_identity(params: &mut ParamMap, prefix: &str, dim: usize) {
        params.insert(format!("{prefix}.w"), Mat::identity(dim));
        params.insert(format!("{prefix}.b"), Mat::zeros(1, dim));
    }

    pub fn apply(g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Var {
        let w = bound.get(&format!("{prefix}.w"));
        let b = bound.get(&format!("{prefix}.b"));
        let (in_dim, _) = g.value(w).shape();
        assert_eq!(
            g.value(x).cols(),
            in_dim,
            "projection `{prefix}` input dim mismatch"
        );
        g.linear(x, w, b)
    }
}

/// Text embeddings for every ontology entry, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    pub verbs: Mat,
    pub roles: Mat,
    pub nouns: Mat,
}

impl TextTable {
    pub fn build(provider: &dyn EmbeddingProvider, onto: &Ontology) -> Result<TextTable> {
        let embed_all = |names: &mut dyn Iterator<Item = &str>| -> Result<Mat> {
            let rows: Vec<Mat> = names.map(|n| provider.embed_text(n)).collect::<Result<_>>()?;
            let refs: Vec<&Mat> = rows.iter().collect();
            Ok(Mat::vstack(&refs))
        };
        Ok(TextTable {
            verbs: embed_all(&mut onto.verbs().iter().map(String::as_str))?,
            roles: embed_all(&mut onto.roles().iter().map(String::as_str))?,
            nouns: embed_all(&mut (0..onto.num_nouns()).map(|n| onto.noun_text(n)))?,
        })
    }

    pub fn verb(&self, i: usize) -> Mat {
        self.verbs.slice_rows(i, i + 1)
    }

    pub fn role(&self, i: usize) -> Mat {
        self.roles.slice_rows(i, i + 1)
    }

    pub fn noun(&self, i: usize) -> Mat {
        self.nouns.slice_rows(i, i + 1)
    }

    /// Persist as `<base>.bin` + `<base>.json` next to the ontology file.
    pub fn save(&self, base: &Path, config: &ProviderConfig, vocab_hash: &str) -> Result<()> {
        let sidecar = TextCacheSidecar {
            provider: config.clone(),
            vocab_hash: vocab_hash.to_string(),
            verbs: self.verbs.rows(),
            roles: self.roles.rows(),
            nouns: self.nouns.rows(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::parse(base.display().to_string(), e.to_string()))?;
        fs::write(base.with_extension("json"), json)
            .map_err(|e| Error::io(base.display().to_string(), e))?;

        let mut bytes = Vec::new();
        for m in [&self.verbs, &self.roles, &self.nouns] {
            for &v in m.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(base.with_extension("bin"), bytes)
            .map_err(|e| Error::io(base.display().to_string(), e))
    }

    pub fn load(base: &Path, config: &ProviderConfig, vocab_hash: &str) -> Result<TextTable> {
        let json_path = base.with_extension("json");
        let text = fs::read_to_string(&json_path)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let sidecar: TextCacheSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::parse(json_path.display().to_string(), e.to_string()))?;
        if sidecar.provider != *config {
            return Err(Error::validation(
                json_path.display().to_string(),
                "cache built with a different provider config",
            ));
        }
        if sidecar.vocab_hash != vocab_hash {
            return Err(Error::validation(
                json_path.display().to_string(),
                "cache built for a different vocabulary",
            ));
        }
        let bin_path = base.with_extension("bin");
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        let total = (sidecar.verbs + sidecar.roles + sidecar.nouns) * config.d;
        if bytes.len() != total * 8 {
            return Err(Error::parse(
                bin_path.display().to_string(),
                "cache size does not match sidecar",
            ));
        }
        let mut vals = Vec::with_capacity(total);
        for chunk in bytes.chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let d = config.d;
        let (v, r, n) = (sidecar.verbs, sidecar.roles, sidecar.nouns);
        Ok(TextTable {
            verbs: Mat::from_vec(v, d, vals[..v * d].to_vec()),
            roles: Mat::from_vec(r, d, vals[v * d..(v + r) * d].to_vec()),
            nouns: Mat::from_vec(n, d, vals[(v + r) * d..].to_vec()),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TextCacheSidecar {
    provider: ProviderConfig,
    vocab_hash: String,
    verbs: usize,
    roles: usize,
    nouns: usize,
}

/// Reads bundles an external encoder precomputed into the documented cache
/// layout: a `cache.json` index plus `cache.bin` of little-endian `f64`s.
/// Any encoder that can fill this format plugs into the rest of the stack.
pub struct PrecomputedProvider {
    config: ProviderConfig,
    index: PrecomputedIndex,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PrecomputedIndex {
    config: ProviderConfig,
    /// image ref → offset (in f64 units) of pooled-then-patches record.
    images: BTreeMap<String, usize>,
    /// text → offset of a `d` vector.
    texts: BTreeMap<String, usize>,
    /// video ref → offset of 5 × (pooled + unpooled) records.
    videos: BTreeMap<String, usize>,
}

impl PrecomputedProvider {
    pub fn open(dir: &Path) -> Result<Self> {
        let json_path = dir.join("cache.json");
        let text = fs::read_to_string(&json_path)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let index: PrecomputedIndex = serde_json::from_str(&text)
            .map_err(|e| Error::parse(json_path.display().to_string(), e.to_string()))?;
        let bin_path = dir.join("cache.bin");
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(PrecomputedProvider {
            config: index.config.clone(),
            index,
            data,
        })
    }

    /// Write a cache directory from in-memory bundles (adapter-side helper
    /// and test fixture).
    pub fn write(
        dir: &Path,
        config: &ProviderConfig,
        images: &BTreeMap<String, EmbeddingBundle>,
        texts: &BTreeMap<String, Mat>,
        videos: &BTreeMap<String, Vec<VideoEventEmbedding>>,
    ) -> Result<()> {
        let mut data: Vec<f64> = Vec::new();
        let mut index = PrecomputedIndex {
            config: config.clone(),
            images: BTreeMap::new(),
            texts: BTreeMap::new(),
            videos: BTreeMap::new(),
        };
        for (id, bundle) in images {
            index.images.insert(id.clone(), data.len());
            data.extend_from_slice(bundle.pooled.as_slice());
            data.extend_from_slice(bundle.patches.as_slice());
        }
        for (text, vec) in texts {
            index.texts.insert(text.clone(), data.len());
            data.extend_from_slice(vec.as_slice());
        }
        for (id, events) in videos {
            if events.len() != NUM_EVENTS {
                return Err(Error::validation(id.clone(), "video record must have 5 events"));
            }
            index.videos.insert(id.clone(), data.len());
            for ev in events {
                data.extend_from_slice(ev.pooled.as_slice());
                data.extend_from_slice(ev.unpooled.as_slice());
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let json = serde_json::to_string_pretty(&index)
            .map_err(|e| Error::parse(dir.display().to_string(), e.to_string()))?;
        fs::write(dir.join("cache.json"), json)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join("cache.bin"), bytes).map_err(|e| Error::io(dir.display().to_string(), e))
    }

    fn slice(&self, offset: usize, len: usize) -> Result<&[f64]> {
        self.data
            .get(offset..offset + len)
            .ok_or_else(|| Error::parse("cache.bin", "record extends past end of cache"))
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingBundle> {
        let &off = self
            .index
            .images
            .get(image_ref)
            .ok_or_else(|| Error::UnknownRef(image_ref.to_string()))?;
        let d = self.config.d;
        let p = self.config.p;
        let pooled = Mat::from_vec(1, d, self.slice(off, d)?.to_vec());
        let patches = Mat::from_vec(p, d, self.slice(off + d, p * d)?.to_vec());
        Ok(EmbeddingBundle { pooled, patches })
    }

    fn embed_text(&self, text: &str) -> Result<Mat> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty string".into()));
        }
        let &off = self
            .index
            .texts
            .get(text)
            .ok_or_else(|| Error::UnknownRef(text.to_string()))?;
        Ok(Mat::from_vec(
            1,
            self.config.d,
            self.slice(off, self.config.d)?.to_vec(),
        ))
    }

    fn embed_video(&self, video_ref: &str) -> Result<Vec<VideoEventEmbedding>> {
        let &off = self
            .index
            .videos
            .get(video_ref)
            .ok_or_else(|| Error::UnknownRef(video_ref.to_string()))?;
        let d = self.config.d;
        let t = self.config.t;
        let stride = d + t * d;
        let mut out = Vec::with_capacity(NUM_EVENTS);
        for i in 0..NUM_EVENTS {
            let base = off + i * stride;
            out.push(VideoEventEmbedding {
                pooled: Mat::from_vec(1, d, self.slice(base, d)?.to_vec()),
                unpooled: Mat::from_vec(t, d, self.slice(base + d, t * d)?.to_vec()),
            });
        }
        Ok(out)
    }
}

/// Conformance checks any provider (including external adapters) must pass:
/// configured shapes and determinism given fixed weights.
pub fn check_provider_conformance(
    provider: &dyn EmbeddingProvider,
    image_refs: &[&str],
    video_refs: &[&str],
) -> Result<()> {
    let cfg = provider.config().clone();
    for &r in image_refs {
        let a = provider.embed_image(r)?;
        let b = provider.embed_image(r)?;
        if a.pooled.shape() != (1, cfg.d) || a.patches.shape() != (cfg.p, cfg.d) {
            return Err(Error::shape(
                format!("embed_image({r})"),
                format!("(1,{}) and ({},{})", cfg.d, cfg.p, cfg.d),
                format!("{:?} and {:?}", a.pooled.shape(), a.patches.shape()),
            ));
        }
        if a != b {
            return Err(Error::validation(r.to_string(), "embed_image not deterministic"));
        }
    }
    for &r in video_refs {
        let a = provider.embed_video(r)?;
        let b = provider.embed_video(r)?;
        if a.len() != NUM_EVENTS {
            return Err(Error::validation(r.to_string(), "expected 5 events"));
        }
        for ev in &a {
            if ev.pooled.shape() != (1, cfg.d) || ev.unpooled.shape() != (cfg.t, cfg.d) {
                return Err(Error::shape(
                    format!("embed_video({r})"),
                    format!("(1,{}) and ({},{})", cfg.d, cfg.t, cfg.d),
                    format!("{:?} and {:?}", ev.pooled.shape(), ev.unpooled.shape()),
                ));
            }
        }
        if a != b {
            return Err(Error::validation(r.to_string(), "embed_video not deterministic"));
        }
    }
    let ta = provider.embed_text("conformance probe")?;
    let tb = provider.embed_text("conformance probe")?;
    if ta.shape() != (1, cfg.d) || ta != tb {
        return Err(Error::validation(
            "embed_text".to_string(),
            "wrong shape or not deterministic",
        ));
    }
    Ok(())
}

pub fn cosine(a: &Mat, b: &Mat) -> f64 {
    let num: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    let den = a.l2_norm() * b.l2_norm();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{bind, param_grads};

    fn synth_cfg(d: usize, p: usize, seed: u64) -> ProviderConfig {
        ProviderConfig {
            name: "synthetic".into(),
            d,
            p,
            t: 6,
            seed,
        }
    }

    fn one_plant() -> PlantManifest {
        let mut m = PlantManifest::default();
        m.images.insert(
            "img0".into(),
            ImagePlant {
                verb: "jumping".into(),
                roles: vec![
                    PlantedRole {
                        role: "agent".into(),
                        noun: "man".into(),
                        patch: 3,
                    },
                    PlantedRole {
                        role: "place".into(),
                        noun: "field".into(),
                        patch: 7,
                    },
                ],
            },
        );
        m.videos.insert(
            "vid0".into(),
            VideoPlant {
                events: (0..NUM_EVENTS)
                    .map(|i| PlantedEvent {
                        verb: "talking".into(),
                        phrases: vec![format!("phrase {i}"), "street".into()],
                    })
                    .collect(),
            },
        );
        m
    }

    #[test]
    fn image_embedding_is_deterministic_and_shaped() {
        let p = SyntheticProvider::new(synth_cfg(512, 50, 7), one_plant());
        let a = p.embed_image("img0").unwrap();
        let b = p.embed_image("img0").unwrap();
        assert_eq!(a.pooled.shape(), (1, 512));
        assert_eq!(a.patches.shape(), (50, 512));
        assert_eq!(a, b);
        assert_eq!(
            a.pooled.as_slice()[0].to_bits(),
            b.pooled.as_slice()[0].to_bits()
        );
    }

    #[test]
    fn unknown_image_ref_errors_but_noise_ref_works() {
        let p = SyntheticProvider::bare(synth_cfg(64, 10, 7));
        assert!(p.embed_image("missing").is_err());
        assert!(p.embed_image("noise:whatever").is_ok());
        assert!(p.embed_video("noise:clip").is_ok());
    }

    #[test]
    fn planted_patch_matches_its_noun() {
        let p = SyntheticProvider::new(synth_cfg(128, 17, 3), one_plant());
        let bundle = p.embed_image("img0").unwrap();
        let man = p.embed_text("man").unwrap();
        let planted = bundle.patches.slice_rows(3, 4);
        let planted_cos = cosine(&planted, &man);
        let mut other = 0.0;
        let mut count = 0;
        for row in 0..17 {
            if row == 3 {
                continue;
            }
            other += cosine(&bundle.patches.slice_rows(row, row + 1), &man);
            count += 1;
        }
        assert!(planted_cos > other / count as f64 + 0.3, "planted {planted_cos}");
    }

    #[test]
    fn text_embedding_edge_cases() {
        let p = SyntheticProvider::bare(synth_cfg(512, 10, 7));
        assert!(p.embed_text("").is_err());
        let a = p.embed_text("jumping").unwrap();
        let b = p.embed_text("jumping").unwrap();
        assert_eq!(a, b);
        assert!((a.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_nouns_are_nearly_orthogonal() {
        let p = SyntheticProvider::bare(synth_cfg(512, 10, 11));
        let mut below = 0;
        let total = 1000;
        for i in 0..total {
            let a = p.embed_text(&format!("noun a{i}")).unwrap();
            let b = p.embed_text(&format!("noun b{i}")).unwrap();
            if cosine(&a, &b) < 0.5 {
                below += 1;
            }
        }
        assert!(below >= 990, "only {below}/{total} pairs below 0.5");
    }

    #[test]
    fn role_vocabulary_embeds_to_matrix() {
        let p = SyntheticProvider::bare(synth_cfg(64, 10, 7));
        let rows: Vec<Mat> = (0..190)
            .map(|i| p.embed_text(&format!("role{i:03}")).unwrap())
            .collect();
        let refs: Vec<&Mat> = rows.iter().collect();
        let m = Mat::vstack(&refs);
        assert_eq!(m.shape(), (190, 64));
    }

    #[test]
    fn video_embedding_shape_determinism_and_plant() {
        let p = SyntheticProvider::new(synth_cfg(96, 10, 5), one_plant());
        let evs = p.embed_video("vid0").unwrap();
        assert_eq!(evs.len(), NUM_EVENTS);
        for ev in &evs {
            assert_eq!(ev.pooled.shape(), (1, 96));
            assert_eq!(ev.unpooled.shape(), (6, 96));
        }
        assert_eq!(evs, p.embed_video("vid0").unwrap());

        // Event i's tokens track event i's phrases more than other events'.
        for i in 0..NUM_EVENTS {
            let own = p.embed_text(&format!("phrase {i}")).unwrap();
            let own_cos = cosine(&evs[i].unpooled.slice_rows(0, 1), &own);
            for (j, ev) in evs.iter().enumerate() {
                if i != j {
                    let cross = cosine(&ev.unpooled.slice_rows(0, 1), &own);
                    assert!(own_cos > cross + 0.2, "event {i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn projection_identity_and_shapes() {
        let mut params = ParamMap::new();
        Projection::init_identity(&mut params, "proj", 8);
        let mut g = Graph::new();
        let b = bind(&mut g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.leaf(Mat::randn(3, 8, 1.0, &mut rng));
        let y = Projection::apply(&mut g, &b, "proj", x);
        assert_eq!(g.value(y), g.value(x));

        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Projection::init(&mut params, "down", 768, 512, &mut rng);
        let mut g = Graph::new();
        let b = bind(&mut g, &params);
        let x = g.leaf(Mat::randn(257, 768, 1.0, &mut rng));
        let y = Projection::apply(&mut g, &b, "down", x);
        assert_eq!(g.value(y).shape(), (257, 512));
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamMap::new();
        Projection::init(&mut params, "proj", 5, 4, &mut rng);
        let x = Mat::randn(2, 5, 1.0, &mut rng);

        let loss = |p: &ParamMap| -> f64 {
            let mut g = Graph::new();
            let b = bind(&mut g, p);
            let xv = g.leaf(x.clone());
            let y = Projection::apply(&mut g, &b, "proj", xv);
            let y = g.sigmoid(y);
            let l = g.mean_all(y);
            g.value(l).get(0, 0)
        };

        let mut g = Graph::new();
        let b = bind(&mut g, &params);
        let xv = g.leaf(x.clone());
        let y = Projection::apply(&mut g, &b, "proj", xv);
        let y = g.sigmoid(y);
        let l = g.mean_all(y);
        g.backward(l);
        let grads = param_grads(&g, &b);

        let h = 1e-5;
        for (name, mat) in &params {
            for i in 0..mat.len() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().as_mut_slice()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().as_mut_slice()[i] -= h;
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let ana = grads[name].as_slice()[i];
                let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{i}] rel={rel}");
            }
        }
    }

    #[test]
    fn bundled_config_table_shapes() {
        for cfg in bundled_configs() {
            assert!(matches!(cfg.d, 512 | 768));
            let provider = SyntheticProvider::bare(ProviderConfig {
                seed: 1,
                ..cfg.clone()
            });
            let b = provider.embed_image(&format!("noise:{}", cfg.name)).unwrap();
            assert_eq!(b.pooled.shape(), (1, cfg.d));
            assert_eq!(b.patches.shape(), (cfg.p, cfg.d));
        }
    }

    #[test]
    fn precomputed_provider_roundtrip_and_conformance() {
        let dir = tempfile::TempDir::new().unwrap();
        let cfg = synth_cfg(32, 5, 13);
        let synth = SyntheticProvider::new(cfg.clone(), one_plant());
        let mut images = BTreeMap::new();
        images.insert("img0".to_string(), synth.embed_image("img0").unwrap());
        let mut texts = BTreeMap::new();
        texts.insert(
            "conformance probe".to_string(),
            synth.embed_text("conformance probe").unwrap(),
        );
        let mut videos = BTreeMap::new();
        videos.insert("vid0".to_string(), synth.embed_video("vid0").unwrap());
        PrecomputedProvider::write(dir.path(), &cfg, &images, &texts, &videos).unwrap();

        let pre = PrecomputedProvider::open(dir.path()).unwrap();
        assert_eq!(pre.embed_image("img0").unwrap(), images["img0"]);
        assert_eq!(pre.embed_video("vid0").unwrap(), videos["vid0"]);
        check_provider_conformance(&pre, &["img0"], &["vid0"]).unwrap();
        check_provider_conformance(&synth, &["img0"], &["vid0"]).unwrap();
    }
}
