//! Annotation records, the quality-flaw taxonomy and quorum aggregation of
//! redundant crowd labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Caption auto-filled by the labeling interface when a worker flags an image
/// as too poor to recognize.
pub const UNRECOGNIZABLE_CAPTION: &str =
    "Quality issues are too severe to recognize the visual content.";

pub const DEFAULT_REDUNDANCY: usize = 5;
pub const DEFAULT_QUORUM: usize = 2;

/// The eight quality-flaw channels, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flaw {
    #[serde(rename = "BLR")]
    Blur,
    #[serde(rename = "BRT")]
    Bright,
    #[serde(rename = "DRK")]
    Dark,
    #[serde(rename = "OBS")]
    Obstruction,
    #[serde(rename = "FRM")]
    Framing,
    #[serde(rename = "ROT")]
    Rotation,
    #[serde(rename = "OTH")]
    Other,
    #[serde(rename = "NON")]
    NoFlaw,
}

impl Flaw {
    pub const COUNT: usize = 8;
    pub const ALL: [Flaw; 8] = [
        Flaw::Blur,
        Flaw::Bright,
        Flaw::Dark,
        Flaw::Obstruction,
        Flaw::Framing,
        Flaw::Rotation,
        Flaw::Other,
        Flaw::NoFlaw,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Flaw::Blur => "BLR",
            Flaw::Bright => "BRT",
            Flaw::Dark => "DRK",
            Flaw::Obstruction => "OBS",
            Flaw::Framing => "FRM",
            Flaw::Rotation => "ROT",
            Flaw::Other => "OTH",
            Flaw::NoFlaw => "NON",
        }
    }

    pub fn from_code(code: &str) -> Option<Flaw> {
        Flaw::ALL.into_iter().find(|f| f.code().eq_ignore_ascii_case(code))
    }
}

impl fmt::Display for Flaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One value per flaw channel, indexed by [`Flaw`].
///
/// Serializes as a map keyed by channel code in canonical order. Missing keys
/// deserialize to `T::default()`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Channels<T>(pub [T; 8]);

impl<T> Channels<T> {
    pub fn iter(&self) -> impl Iterator<Item = (Flaw, &T)> {
        Flaw::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Channels<U> {
        let mut f = f;
        Channels(std::array::from_fn(|i| f(&self.0[i])))
    }
}

impl<T> Index<Flaw> for Channels<T> {
    type Output = T;
    fn index(&self, flaw: Flaw) -> &T {
        &self.0[flaw.index()]
    }
}

impl<T> IndexMut<Flaw> for Channels<T> {
    fn index_mut(&mut self, flaw: Flaw) -> &mut T {
        &mut self.0[flaw.index()]
    }
}

impl<T: Serialize> Serialize for Channels<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(Flaw::COUNT))?;
        for (flaw, value) in self.iter() {
            map.serialize_entry(flaw.code(), value)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de> + Default + Copy> Deserialize<'de> for Channels<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct ChannelVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Deserialize<'de> + Default + Copy> Visitor<'de> for ChannelVisitor<T> {
            type Value = Channels<T>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map keyed by flaw codes (BLR, BRT, DRK, OBS, FRM, ROT, OTH, NON)")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Channels([T::default(); 8]);
                while let Some(key) = access.next_key::<String>()? {
                    let flaw = Flaw::from_code(&key)
                        .ok_or_else(|| de::Error::custom(format!("unknown flaw code `{key}`")))?;
                    out[flaw] = access.next_value()?;
                }
                Ok(out)
            }
        }

        deserializer.deserialize_map(ChannelVisitor(std::marker::PhantomData))
    }
}

/// Boolean form of the flaw taxonomy for one worker or one aggregated image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlawLabelSet {
    pub channels: Channels<bool>,
    /// Free-form descriptions attached to OTH, kept verbatim.
    pub other_texts: Vec<String>,
}

impl FlawLabelSet {
    pub fn from_flaws(flaws: &[Flaw]) -> Self {
        let mut channels = Channels([false; 8]);
        for &f in flaws {
            channels[f] = true;
        }
        FlawLabelSet {
            channels,
            other_texts: Vec::new(),
        }
    }

    pub fn any(&self) -> bool {
        self.channels.0.iter().any(|&b| b)
    }

    pub fn get(&self, flaw: Flaw) -> bool {
        self.channels[flaw]
    }
}

/// Probabilistic form: each channel an independent probability in `[0, 1]`.
pub type FlawProbabilities = Channels<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTask {
    Captioning,
    Vqa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerAnnotation {
    pub worker_id: String,
    pub caption: String,
    pub unrecognizable: bool,
    pub flaws: FlawLabelSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub uri: String,
    pub source_task: SourceTask,
    pub question: Option<String>,
    pub annotations: Vec<WorkerAnnotation>,
}

/// Per-channel vote tallies behind an [`AggregatedLabels`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoteCounts {
    pub unrecognizable: u32,
    #[serde(flatten)]
    pub flaws: Channels<u32>,
}

/// Quorum-merged ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLabels {
    pub image_id: String,
    pub unrecognizable: bool,
    pub flaws: Channels<bool>,
    pub vote_counts: VoteCounts,
}

impl AggregatedLabels {
    pub fn flaw(&self, flaw: Flaw) -> bool {
        self.flaws[flaw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonClass {
    Answerable,
    Unrecognizable,
    InsufficientContent,
}

impl ReasonClass {
    pub const ALL: [ReasonClass; 3] = [
        ReasonClass::Answerable,
        ReasonClass::Unrecognizable,
        ReasonClass::InsufficientContent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ReasonClass> {
        ReasonClass::ALL.get(i).copied()
    }
}

/// Three-way reason label together with the unrecognizability bit as it is
/// emitted for training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonLabel {
    pub class: ReasonClass,
    pub unrecognizable: bool,
}

/// Maps the answerability and recognizability bits onto the exclusive reason
/// classes. An answerable question always emits `unrecognizable = false`.
pub fn derive_reason_class(answerable: bool, unrecognizable: bool) -> ReasonLabel {
    if answerable {
        ReasonLabel {
            class: ReasonClass::Answerable,
            unrecognizable: false,
        }
    } else if unrecognizable {
        ReasonLabel {
            class: ReasonClass::Unrecognizable,
            unrecognizable: true,
        }
    } else {
        ReasonLabel {
            class: ReasonClass::InsufficientContent,
            unrecognizable: false,
        }
    }
}

/// A visual question joined with its image-level recognizability label.
///
/// `unrecognizable` keeps the raw image label; the three-way class applies
/// the answerable-overrides-unrecognizable rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualQuestion {
    pub image_id: String,
    pub question: String,
    pub answerable: bool,
    pub unrecognizable: bool,
    pub reason_class: ReasonClass,
}

impl VisualQuestion {
    pub fn new(image_id: impl Into<String>, question: impl Into<String>, answerable: bool, unrecognizable: bool) -> Self {
        VisualQuestion {
            image_id: image_id.into(),
            question: question.into(),
            answerable,
            unrecognizable,
            reason_class: derive_reason_class(answerable, unrecognizable).class,
        }
    }

    /// Target label after the manual-assignment rule.
    pub fn reason_label(&self) -> ReasonLabel {
        derive_reason_class(self.answerable, self.unrecognizable)
    }
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    worker_id: String,
    caption: String,
    unrecognizable: bool,
    flaws: Channels<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    other_texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    image_id: String,
    uri: String,
    source_task: SourceTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// Required number of annotations per image. `None` accepts any nonzero count.
    pub redundancy: Option<usize>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            redundancy: Some(DEFAULT_REDUNDANCY),
        }
    }
}

fn validation(image_id: &str, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Validation {
        image_id: image_id.to_string(),
        field: field.into(),
        message: message.into(),
    }
}

fn is_sentinel(caption: &str) -> bool {
    caption.trim() == UNRECOGNIZABLE_CAPTION
}

impl ImageRecord {
    /// Checks every type invariant of the record and its annotations.
    pub fn validate(&self, opts: &ParseOptions) -> Result<()> {
        let id = &self.image_id;
        if id.is_empty() {
            return Err(validation(id, "image_id", "empty image id"));
        }
        if self.source_task == SourceTask::Vqa
            && self.question.as_deref().is_none_or(|q| q.trim().is_empty())
        {
            return Err(validation(id, "question", "vqa records must carry a question"));
        }
        match opts.redundancy {
            Some(r) if self.annotations.len() != r => {
                return Err(validation(
                    id,
                    "annotations",
                    format!("expected {r} annotations, found {}", self.annotations.len()),
                ));
            }
            None if self.annotations.is_empty() => {
                return Err(validation(id, "annotations", "no annotations"));
            }
            _ => {}
        }
        for (i, a) in self.annotations.iter().enumerate() {
            let field = |name: &str| format!("annotations[{i}].{name}");
            if a.caption.trim().is_empty() {
                return Err(validation(id, field("caption"), "caption is empty"));
            }
            let sentinel = is_sentinel(&a.caption);
            if a.unrecognizable && !sentinel {
                return Err(validation(
                    id,
                    field("caption"),
                    "unrecognizable annotation must carry exactly the sentinel caption",
                ));
            }
            if !a.unrecognizable && sentinel {
                return Err(validation(
                    id,
                    field("unrecognizable"),
                    "sentinel caption given but unrecognizable is false",
                ));
            }
            if !a.flaws.any() {
                return Err(validation(id, field("flaws"), "at least one flaw option must be chosen"));
            }
        }
        Ok(())
    }
}

impl From<RawRecord> for ImageRecord {
    fn from(raw: RawRecord) -> Self {
        ImageRecord {
            image_id: raw.image_id,
            uri: raw.uri,
            source_task: raw.source_task,
            question: raw.question,
            annotations: raw
                .annotations
                .into_iter()
                .map(|a| WorkerAnnotation {
                    worker_id: a.worker_id,
                    caption: a.caption,
                    unrecognizable: a.unrecognizable,
                    flaws: FlawLabelSet {
                        channels: a.flaws,
                        other_texts: a.other_texts,
                    },
                })
                .collect(),
        }
    }
}

impl From<&ImageRecord> for RawRecord {
    fn from(rec: &ImageRecord) -> Self {
        RawRecord {
            image_id: rec.image_id.clone(),
            uri: rec.uri.clone(),
            source_task: rec.source_task,
            question: rec.question.clone(),
            annotations: rec
                .annotations
                .iter()
                .map(|a| RawAnnotation {
                    worker_id: a.worker_id.clone(),
                    caption: a.caption.clone(),
                    unrecognizable: a.unrecognizable,
                    flaws: a.flaws.channels,
                    other_texts: a.flaws.other_texts.clone(),
                })
                .collect(),
        }
    }
}

fn json_parse_error(path: &str, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses and validates annotation JSON text.
pub fn parse_annotations(text: &str, source: &str, opts: &ParseOptions) -> Result<Vec<ImageRecord>> {
    let raw: Vec<RawRecord> = serde_json::from_str(text).map_err(|e| json_parse_error(source, e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let rec = ImageRecord::from(r);
        if !seen.insert(rec.image_id.clone()) {
            return Err(validation(&rec.image_id, "image_id", "duplicate image id"));
        }
        rec.validate(opts)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_annotation_file(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    parse_annotation_file_with(path, &ParseOptions::default())
}

pub fn parse_annotation_file_with(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string(), opts)
}

/// Serializes records back into the annotation file format.
pub fn annotations_to_json(records: &[ImageRecord]) -> Result<String> {
    let raw: Vec<RawRecord> = records.iter().map(RawRecord::from).collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

// ---------------------------------------------------------------------------
// Aggregation

/// Merges redundant annotations: a label holds when at least `quorum`
/// workers assert it. Applies to unrecognizability and every flaw channel.
pub fn aggregate(record: &ImageRecord, quorum: usize) -> Result<AggregatedLabels> {
    if quorum == 0 {
        return Err(Error::Spec("quorum must be at least 1".into()));
    }
    if record.annotations.len() < quorum {
        return Err(Error::InsufficientRedundancy {
            image_id: record.image_id.clone(),
            available: record.annotations.len(),
            quorum,
        });
    }
    let mut votes = VoteCounts::default();
    for a in &record.annotations {
        votes.unrecognizable += a.unrecognizable as u32;
        for f in Flaw::ALL {
            votes.flaws[f] += a.flaws.get(f) as u32;
        }
    }
    let q = quorum as u32;
    Ok(AggregatedLabels {
        image_id: record.image_id.clone(),
        unrecognizable: votes.unrecognizable >= q,
        flaws: votes.flaws.map(|&v| v >= q),
        vote_counts: votes,
    })
}

pub fn aggregate_all(records: &[ImageRecord], quorum: usize) -> Result<Vec<AggregatedLabels>> {
    records.iter().map(|r| aggregate(r, quorum)).collect()
}

pub fn read_aggregated(path: impl AsRef<Path>) -> Result<Vec<AggregatedLabels>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_parse_error(&path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Visual questions

/// One entry of a questions file: `{image_id, question, answerable}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEntry {
    pub image_id: String,
    pub question: String,
    pub answerable: bool,
}

pub fn read_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_parse_error(&path.display().to_string(), e))
}

/// Joins questions to aggregated labels by image id.
pub fn join_questions(questions: &[QuestionEntry], labels: &[AggregatedLabels]) -> Result<Vec<VisualQuestion>> {
    let by_id: BTreeMap<&str, &AggregatedLabels> = labels.iter().map(|l| (l.image_id.as_str(), l)).collect();
    let mut missing = BTreeSet::new();
    let mut out = Vec::with_capacity(questions.len());
    for q in questions {
        match by_id.get(q.image_id.as_str()) {
            Some(l) => out.push(VisualQuestion::new(&q.image_id, &q.question, q.answerable, l.unrecognizable)),
            None => {
                missing.insert(q.image_id.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Join {
            what: "aggregated labels".into(),
            missing: missing.into_iter().collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annotation(unrec: bool, flaws: &[Flaw]) -> WorkerAnnotation {
        WorkerAnnotation {
            worker_id: "w".into(),
            caption: if unrec {
                UNRECOGNIZABLE_CAPTION.to_string()
            } else {
                "A can of soup on a table.".to_string()
            },
            unrecognizable: unrec,
            flaws: FlawLabelSet::from_flaws(if flaws.is_empty() { &[Flaw::NoFlaw] } else { flaws }),
        }
    }

    fn record(votes: &[bool]) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            uri: "img.png".into(),
            source_task: SourceTask::Captioning,
            question: None,
            annotations: votes.iter().map(|&v| annotation(v, &[Flaw::Blur])).collect(),
        }
    }

    #[test]
    fn quorum_examples() {
        let agg = |v: &[bool]| aggregate(&record(v), 2).unwrap().unrecognizable;
        assert!(agg(&[true, true, false, false, false]));
        assert!(!agg(&[true, false, false, false, false]));
        assert!(!agg(&[false; 5]));
        assert!(agg(&[true; 5]));
    }

    #[test]
    fn exhaustive_vote_patterns() {
        for mask in 0u32..32 {
            let votes: Vec<bool> = (0..5).map(|i| mask & (1 << i) != 0).collect();
            let agg = aggregate(&record(&votes), 2).unwrap();
            assert_eq!(agg.unrecognizable, mask.count_ones() >= 2, "mask {mask:05b}");
            assert_eq!(agg.vote_counts.unrecognizable, mask.count_ones());
            assert_eq!(agg.vote_counts.flaws[Flaw::Blur], 5);
        }
    }

    #[test]
    fn too_few_annotations() {
        let err = aggregate(&record(&[true]), 2).unwrap_err();
        assert!(matches!(err, Error::InsufficientRedundancy { available: 1, quorum: 2, .. }));
        assert!(matches!(aggregate(&record(&[true]), 0), Err(Error::Spec(_))));
    }

    #[test]
    fn non_and_flaw_can_coexist() {
        let mut rec = record(&[false; 5]);
        for a in rec.annotations.iter_mut().take(2) {
            a.flaws = FlawLabelSet::from_flaws(&[Flaw::NoFlaw, Flaw::Dark]);
        }
        let agg = aggregate(&rec, 2).unwrap();
        assert!(agg.flaw(Flaw::NoFlaw) && agg.flaw(Flaw::Dark) && agg.flaw(Flaw::Blur));
    }

    #[test]
    fn reason_classes() {
        let l = derive_reason_class(true, true);
        assert_eq!(l.class, ReasonClass::Answerable);
        assert!(!l.unrecognizable);
        assert_eq!(derive_reason_class(false, true).class, ReasonClass::Unrecognizable);
        assert_eq!(derive_reason_class(false, false).class, ReasonClass::InsufficientContent);
        assert_eq!(derive_reason_class(true, false).class, ReasonClass::Answerable);
    }

    #[test]
    fn channels_serialize_in_canonical_order() {
        let set = FlawLabelSet::from_flaws(&[Flaw::Rotation, Flaw::Blur]);
        let json = serde_json::to_string(&set.channels).unwrap();
        assert_eq!(
            json,
            r#"{"BLR":true,"BRT":false,"DRK":false,"OBS":false,"FRM":false,"ROT":true,"OTH":false,"NON":false}"#
        );
        let back: Channels<bool> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set.channels);
        assert!(serde_json::from_str::<Channels<bool>>(r#"{"XYZ":true}"#).is_err());
    }

    #[test]
    fn sentinel_matching_trims_whitespace() {
        assert!(is_sentinel(&format!("  {UNRECOGNIZABLE_CAPTION}\n")));
        assert!(!is_sentinel(&format!("{UNRECOGNIZABLE_CAPTION} It shows a cup.")));
    }
}
