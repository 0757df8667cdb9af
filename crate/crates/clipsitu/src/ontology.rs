//! Verb/role/noun vocabularies and annotation loading.
//!
//! The on-disk schemas follow the imSitu space/annotation layout, the SWiG
//! box file layout, and a VidSitu-style event list; `docs/formats.md` in the
//! repository root documents every field. Synthetic datasets are emitted in
//! the same schemas, so the loaders never know which kind they are reading.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The distinguished noun class meaning "role is unfilled".
pub const BLANK_NOUN: &str = "-";

/// Upper bound on roles per verb.
pub const MAX_ROLES: usize = 6;

/// Immutable vocabulary of verbs, roles, and nouns with per-verb role lists.
///
/// Index assignment is lexicographic over names, so loading the same file
/// twice (or on another machine) yields identical indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    verbs: Vec<String>,
    roles: Vec<String>,
    nouns: Vec<String>,
    noun_gloss: Vec<String>,
    /// Ordered role indices for each verb, parallel to `verbs`.
    roles_of: Vec<Vec<usize>>,
    blank_noun: usize,
    /// Whether the blank class came from the file or was appended.
    blank_was_appended: bool,
}

impl Ontology {
    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    /// Noun class names, including the blank class.
    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    /// Noun count excluding the blank class, for comparison against corpora
    /// that may or may not list blank explicitly.
    pub fn num_nouns_excluding_blank(&self) -> usize {
        self.nouns.len() - 1
    }

    pub fn blank_noun(&self) -> usize {
        self.blank_noun
    }

    pub fn blank_was_appended(&self) -> bool {
        self.blank_was_appended
    }

    pub fn roles_of(&self, verb: usize) -> &[usize] {
        &self.roles_of[verb]
    }

    pub fn verb_index(&self, name: &str) -> Option<usize> {
        self.verbs.binary_search_by(|v| v.as_str().cmp(name)).ok()
    }

    pub fn role_index(&self, name: &str) -> Option<usize> {
        self.roles.binary_search_by(|v| v.as_str().cmp(name)).ok()
    }

    pub fn noun_index(&self, name: &str) -> Option<usize> {
        let name = if name.is_empty() { BLANK_NOUN } else { name };
        self.nouns.binary_search_by(|v| v.as_str().cmp(name)).ok()
    }

    /// Human-readable text for a noun class (gloss where available). This is
    /// what gets fed to the text encoder.
    pub fn noun_text(&self, noun: usize) -> &str {
        if self.noun_gloss[noun].is_empty() {
            &self.nouns[noun]
        } else {
            &self.noun_gloss[noun]
        }
    }

    /// Stable digest of the vocabulary; checkpoints record it so a model is
    /// never evaluated against a different index assignment.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.verbs {
            h.update(v.as_bytes());
            h.update([0]);
        }
        for (v, rs) in self.verbs.iter().zip(&self.roles_of) {
            h.update(v.as_bytes());
            for &r in rs {
                h.update(self.roles[r].as_bytes());
                h.update([1]);
            }
        }
        for r in &self.roles {
            h.update(r.as_bytes());
            h.update([2]);
        }
        for (n, g) in self.nouns.iter().zip(&self.noun_gloss) {
            h.update(n.as_bytes());
            h.update(g.as_bytes());
            h.update([3]);
        }
        hex_digest(h)
    }

    /// Write the vocabulary back out in the space schema.
    pub fn save_space(&self, path: &Path) -> Result<()> {
        let mut verbs = BTreeMap::new();
        for (v, name) in self.verbs.iter().enumerate() {
            let order: Vec<&str> = self.roles_of[v].iter().map(|&r| self.roles[r].as_str()).collect();
            verbs.insert(name.clone(), SpaceVerb { order: order.iter().map(|s| s.to_string()).collect() });
        }
        let mut nouns = BTreeMap::new();
        for (n, name) in self.nouns.iter().enumerate() {
            if n == self.blank_noun && self.blank_was_appended {
                continue;
            }
            let gloss = if self.noun_gloss[n].is_empty() {
                vec![]
            } else {
                vec![self.noun_gloss[n].clone()]
            };
            nouns.insert(name.clone(), SpaceNoun { gloss });
        }
        let space = SpaceFile { verbs, nouns };
        write_json(path, &space)
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct SpaceVerb {
    order: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpaceNoun {
    #[serde(default)]
    gloss: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpaceFile {
    verbs: BTreeMap<String, SpaceVerb>,
    nouns: BTreeMap<String, SpaceNoun>,
}

/// Load a space file into an [`Ontology`].
pub fn load_imsitu_space(path: &Path) -> Result<Ontology> {
    let space: SpaceFile = read_json(path)?;

    let mut verbs: Vec<String> = space.verbs.keys().cloned().collect();
    verbs.sort();

    let mut role_set = BTreeSet::new();
    for verb in space.verbs.values() {
        for role in &verb.order {
            role_set.insert(role.clone());
        }
    }
    let roles: Vec<String> = role_set.into_iter().collect();

    let mut noun_names: Vec<(String, String)> = space
        .nouns
        .iter()
        .map(|(k, v)| (k.clone(), v.gloss.first().cloned().unwrap_or_default()))
        .collect();
    let blank_was_appended = !space.nouns.contains_key(BLANK_NOUN);
    if blank_was_appended {
        noun_names.push((BLANK_NOUN.to_string(), String::new()));
    }
    noun_names.sort();
    let nouns: Vec<String> = noun_names.iter().map(|(k, _)| k.clone()).collect();
    let noun_gloss: Vec<String> = noun_names.iter().map(|(_, g)| g.clone()).collect();
    let blank_noun = nouns
        .binary_search_by(|v| v.as_str().cmp(BLANK_NOUN))
        .expect("blank class present by construction");

    let mut roles_of = Vec::with_capacity(verbs.len());
    for v in &verbs {
        let order = &space.verbs[v].order;
        if order.len() > MAX_ROLES {
            return Err(Error::validation(
                v.clone(),
                format!("verb has {} roles; limit is {MAX_ROLES}", order.len()),
            ));
        }
        if order.is_empty() {
            return Err(Error::validation(v.clone(), "verb has no roles"));
        }
        let idx: Vec<usize> = order
            .iter()
            .map(|r| {
                roles
                    .binary_search_by(|x| x.as_str().cmp(r.as_str()))
                    .map_err(|_| Error::validation(v.clone(), format!("unknown role `{r}`")))
            })
            .collect::<Result<_>>()?;
        roles_of.push(idx);
    }

    Ok(Ontology {
        verbs,
        roles,
        nouns,
        noun_gloss,
        roles_of,
        blank_noun,
        blank_was_appended,
    })
}

/// Normalized center/height/width box, every component in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("h", h), ("w", w)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(
                    "bounding box",
                    format!("component {name}={v} outside [0,1]"),
                ));
            }
        }
        Ok(BoundingBox { cx, cy, h, w })
    }

    /// From absolute pixel corners on a `width×height` image.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> Result<Self> {
        const TOL: f64 = 1e-6;
        let check = |v: f64, hi: f64, what: &str| -> Result<f64> {
            if v < -TOL || v > hi + TOL {
                return Err(Error::validation(
                    "bounding box",
                    format!("{what}={v} outside image extent {hi}"),
                ));
            }
            Ok(v.clamp(0.0, hi))
        };
        let x1 = check(x1, width, "x1")?;
        let x2 = check(x2, width, "x2")?;
        let y1 = check(y1, height, "y1")?;
        let y2 = check(y2, height, "y2")?;
        if x2 < x1 || y2 < y1 {
            return Err(Error::validation("bounding box", "corners out of order"));
        }
        BoundingBox::new(
            (x1 + x2) / (2.0 * width),
            (y1 + y2) / (2.0 * height),
            (y2 - y1) / height,
            (x2 - x1) / width,
        )
    }

    /// Back to absolute pixel corners `(x1, y1, x2, y2)`.
    pub fn to_corners(&self, width: f64, height: f64) -> (f64, f64, f64, f64) {
        (
            (self.cx - self.w / 2.0) * width,
            (self.cy - self.h / 2.0) * height,
            (self.cx + self.w / 2.0) * width,
            (self.cy + self.h / 2.0) * height,
        )
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }
}

/// One image's annotation: the verb, its ordered roles, per-annotator noun
/// labels, and (after SWiG attachment) optional normalized boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SituationFrame {
    pub image_id: String,
    pub verb: usize,
    pub roles: Vec<usize>,
    /// `m × q`: row per role, column per annotator.
    pub annotator_nouns: Vec<Vec<usize>>,
    /// Parallel to `roles`; `None` marks an absent box.
    pub boxes: Vec<Option<BoundingBox>>,
}

impl SituationFrame {
    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn num_annotators(&self) -> usize {
        self.annotator_nouns.first().map_or(0, Vec::len)
    }

    /// Annotator noun set for one role (used by the value metrics).
    pub fn annotator_set(&self, role_pos: usize) -> &[usize] {
        &self.annotator_nouns[role_pos]
    }
}

/// Structural validity against an ontology.
pub fn validate_frame(frame: &SituationFrame, onto: &Ontology) -> Result<()> {
    let expected = onto.roles_of(frame.verb);
    if frame.roles != expected {
        return Err(Error::validation(
            frame.image_id.clone(),
            "role list does not match the verb's role order",
        ));
    }
    if frame.roles.len() > MAX_ROLES {
        return Err(Error::validation(frame.image_id.clone(), "too many roles"));
    }
    if frame.annotator_nouns.len() != frame.roles.len() {
        return Err(Error::validation(
            frame.image_id.clone(),
            "annotator matrix row count != role count",
        ));
    }
    let q = frame.num_annotators();
    if q == 0 {
        return Err(Error::validation(frame.image_id.clone(), "no annotators"));
    }
    for row in &frame.annotator_nouns {
        if row.len() != q {
            return Err(Error::validation(
                frame.image_id.clone(),
                "ragged annotator matrix",
            ));
        }
        for &n in row {
            if n >= onto.num_nouns() {
                return Err(Error::validation(
                    frame.image_id.clone(),
                    format!("noun index {n} out of range"),
                ));
            }
        }
    }
    if frame.boxes.len() != frame.roles.len() {
        return Err(Error::validation(
            frame.image_id.clone(),
            "box list length != role count",
        ));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AnnotationEntry {
    verb: String,
    frames: Vec<BTreeMap<String, String>>,
}

/// Load an annotation file; one [`SituationFrame`] per image entry.
pub fn load_frames(path: &Path, onto: &Ontology) -> Result<Vec<SituationFrame>> {
    let raw: BTreeMap<String, AnnotationEntry> = read_json(path)?;
    let mut out = Vec::with_capacity(raw.len());
    for (image_id, entry) in raw {
        let verb = onto
            .verb_index(&entry.verb)
            .ok_or_else(|| Error::validation(image_id.clone(), format!("unknown verb `{}`", entry.verb)))?;
        let roles = onto.roles_of(verb).to_vec();
        if entry.frames.is_empty() {
            return Err(Error::validation(image_id.clone(), "missing annotators"));
        }
        let mut annotator_nouns = vec![Vec::with_capacity(entry.frames.len()); roles.len()];
        for (ann_idx, ann) in entry.frames.iter().enumerate() {
            for (pos, &role) in roles.iter().enumerate() {
                let role_name = &onto.roles()[role];
                let noun_name = ann.get(role_name).ok_or_else(|| {
                    Error::validation(
                        image_id.clone(),
                        format!("annotator {ann_idx} missing role `{role_name}`"),
                    )
                })?;
                let noun = onto.noun_index(noun_name).ok_or_else(|| {
                    Error::validation(image_id.clone(), format!("unknown noun `{noun_name}`"))
                })?;
                annotator_nouns[pos].push(noun);
            }
            for role_name in ann.keys() {
                if onto.role_index(role_name).is_none() {
                    return Err(Error::validation(
                        image_id.clone(),
                        format!("unknown role `{role_name}`"),
                    ));
                }
            }
        }
        let boxes = vec![None; roles.len()];
        let frame = SituationFrame {
            image_id,
            verb,
            roles,
            annotator_nouns,
            boxes,
        };
        validate_frame(&frame, onto)?;
        out.push(frame);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SwigEntry {
    width: f64,
    height: f64,
    /// role name → `[x1, y1, x2, y2]` in pixels; all `-1` marks absent.
    bb: BTreeMap<String, [f64; 4]>,
}

/// Attach SWiG-style boxes to loaded frames. Roles without a box entry (or
/// with the `-1` marker) keep `None`; those are excluded from the box loss
/// and the grounding metrics.
pub fn attach_swig_boxes(frames: &mut [SituationFrame], path: &Path, onto: &Ontology) -> Result<()> {
    let raw: BTreeMap<String, SwigEntry> = read_json(path)?;
    for frame in frames.iter_mut() {
        let Some(entry) = raw.get(&frame.image_id) else {
            continue;
        };
        for (pos, &role) in frame.roles.iter().enumerate() {
            let role_name = &onto.roles()[role];
            let Some(&[x1, y1, x2, y2]) = entry.bb.get(role_name) else {
                continue;
            };
            if [x1, y1, x2, y2].iter().all(|&v| v == -1.0) {
                continue;
            }
            let bx = BoundingBox::from_corners(x1, y1, x2, y2, entry.width, entry.height)
                .map_err(|e| Error::validation(frame.image_id.clone(), e.to_string()))?;
            frame.boxes[pos] = Some(bx);
        }
    }
    Ok(())
}

pub const NUM_EVENTS: usize = 5;

/// Placeholder argument slots used in video annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArgSlot {
    Arg0,
    Arg1,
    Arg2,
    AScn,
}

impl ArgSlot {
    pub const ALL: [ArgSlot; 4] = [ArgSlot::Arg0, ArgSlot::Arg1, ArgSlot::Arg2, ArgSlot::AScn];

    pub fn name(&self) -> &'static str {
        match self {
            ArgSlot::Arg0 => "Arg0",
            ArgSlot::Arg1 => "Arg1",
            ArgSlot::Arg2 => "Arg2",
            ArgSlot::AScn => "AScn",
        }
    }

    pub fn parse(s: &str) -> Option<ArgSlot> {
        match s {
            "Arg0" => Some(ArgSlot::Arg0),
            "Arg1" => Some(ArgSlot::Arg1),
            "Arg2" => Some(ArgSlot::Arg2),
            "AScn" | "ArgScn" => Some(ArgSlot::AScn),
            _ => None,
        }
    }
}

/// One filled argument slot of an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventArg {
    pub slot: ArgSlot,
    /// Verb-specific role name, e.g. Arg0 of "driving" is "driver".
    pub role_name: Option<String>,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventAnnotation {
    /// Index into the video verb-sense vocabulary.
    pub verb: usize,
    /// Filled slots in `ArgSlot` order, at most 4.
    pub args: Vec<EventArg>,
}

impl EventAnnotation {
    pub fn arg(&self, slot: ArgSlot) -> Option<&EventArg> {
        self.args.iter().find(|a| a.slot == slot)
    }
}

/// A 10-second video annotated as exactly five 2-second events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoSituation {
    pub video_id: String,
    pub events: Vec<EventAnnotation>,
}

/// A loaded split plus the verb-sense vocabulary it indexes into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VidSituSet {
    pub verbs: Vec<String>,
    pub videos: Vec<VideoSituation>,
}

#[derive(Serialize, Deserialize)]
struct VidSituArgJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    phrase: String,
}

#[derive(Serialize, Deserialize)]
struct VidSituEventJson {
    verb: String,
    args: BTreeMap<String, VidSituArgJson>,
}

#[derive(Serialize, Deserialize)]
struct VidSituVideoJson {
    video_id: String,
    events: Vec<VidSituEventJson>,
}

#[derive(Serialize, Deserialize)]
struct VidSituFile {
    verbs: Vec<String>,
    videos: Vec<VidSituVideoJson>,
}

/// Load `vidsitu_<split>.json` from a dataset directory.
pub fn load_vidsitu(dir: &Path, split: &str) -> Result<VidSituSet> {
    let path = dir.join(format!("vidsitu_{split}.json"));
    let raw: VidSituFile = read_json(&path)?;
    let verbs = raw.verbs;
    let mut videos = Vec::with_capacity(raw.videos.len());
    for video in raw.videos {
        if video.events.len() != NUM_EVENTS {
            return Err(Error::validation(
                video.video_id.clone(),
                format!("expected {NUM_EVENTS} events, got {}", video.events.len()),
            ));
        }
        let mut events = Vec::with_capacity(NUM_EVENTS);
        for ev in &video.events {
            let verb = verbs
                .iter()
                .position(|v| *v == ev.verb)
                .ok_or_else(|| {
                    Error::validation(video.video_id.clone(), format!("unknown verb `{}`", ev.verb))
                })?;
            let mut args = Vec::new();
            for (slot_name, arg) in &ev.args {
                let slot = ArgSlot::parse(slot_name).ok_or_else(|| {
                    Error::validation(
                        video.video_id.clone(),
                        format!("unknown placeholder `{slot_name}`"),
                    )
                })?;
                args.push(EventArg {
                    slot,
                    role_name: arg.role.clone(),
                    phrase: arg.phrase.clone(),
                });
            }
            args.sort_by_key(|a| a.slot);
            events.push(EventAnnotation { verb, args });
        }
        videos.push(VideoSituation {
            video_id: video.video_id,
            events,
        });
    }
    Ok(VidSituSet { verbs, videos })
}

/// Write a split back out in the same schema (generator + round-trip tests).
pub fn save_vidsitu(set: &VidSituSet, dir: &Path, split: &str) -> Result<()> {
    let videos = set
        .videos
        .iter()
        .map(|v| VidSituVideoJson {
            video_id: v.video_id.clone(),
            events: v
                .events
                .iter()
                .map(|e| VidSituEventJson {
                    verb: set.verbs[e.verb].clone(),
                    args: e
                        .args
                        .iter()
                        .map(|a| {
                            (
                                a.slot.name().to_string(),
                                VidSituArgJson {
                                    role: a.role_name.clone(),
                                    phrase: a.phrase.clone(),
                                },
                            )
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let file = VidSituFile {
        verbs: set.verbs.clone(),
        videos,
    };
    write_json(&dir.join(format!("vidsitu_{split}.json")), &file)
}
