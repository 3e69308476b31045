//! File formats: the versioned JSON clip document and AVA-style detection CSV.
//!
//! Clip documents have a fixed field order so serialising a parsed document
//! reproduces the canonical text exactly.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{
    validate_clip, ActorDetection, BoundingBox, Clip, ClipAnnotation, Frame, GroundTruthRecord,
    LabelSet, PredictionRecord, MAX_CLASSES,
};

pub const CLIP_FORMAT: &str = "actassign-clips";
pub const CLIP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Normalized,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorRecord {
    pub actor_id: u64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    pub confidence: f64,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub actors: Vec<ActorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub labels: Vec<usize>,
    pub frames: Vec<FrameRecord>,
}

/// Version 1 of the clip document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFileV1 {
    pub format: String,
    pub version: u32,
    pub units: Units,
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub clips: Vec<ClipRecord>,
}

const TOP_KEYS: &[&str] = &[
    "format",
    "version",
    "units",
    "num_classes",
    "classes",
    "clips",
];
const CLIP_KEYS: &[&str] = &["clip_id", "labels", "frames"];
const FRAME_KEYS: &[&str] = &["frame_id", "actors"];
const ACTOR_KEYS: &[&str] = &["actor_id", "box", "confidence", "logits"];

/// A parsed and validated clip document.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedClips {
    pub units: Units,
    pub class_names: Vec<String>,
    pub clips: Vec<Clip>,
    /// Unknown fields seen in lenient mode.
    pub warnings: Vec<String>,
}

fn unknown_keys(value: &Value, allowed: &[&str], path: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = value {
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                out.push(format!("unknown field `{key}` at {path}"));
            }
        }
    }
}

fn audit_fields(doc: &Value) -> Vec<String> {
    let mut out = Vec::new();
    unknown_keys(doc, TOP_KEYS, "$", &mut out);
    let clips = doc.get("clips").and_then(Value::as_array);
    for (ci, clip) in clips.into_iter().flatten().enumerate() {
        unknown_keys(clip, CLIP_KEYS, &format!("$.clips[{ci}]"), &mut out);
        let frames = clip.get("frames").and_then(Value::as_array);
        for (fi, frame) in frames.into_iter().flatten().enumerate() {
            unknown_keys(
                frame,
                FRAME_KEYS,
                &format!("$.clips[{ci}].frames[{fi}]"),
                &mut out,
            );
            let actors = frame.get("actors").and_then(Value::as_array);
            for (ai, actor) in actors.into_iter().flatten().enumerate() {
                unknown_keys(
                    actor,
                    ACTOR_KEYS,
                    &format!("$.clips[{ci}].frames[{fi}].actors[{ai}]"),
                    &mut out,
                );
            }
        }
    }
    out
}

fn json_error(err: serde_json::Error) -> Error {
    Error::Parse(format!("{err}"))
}

/// Parses and validates a clip document.
///
/// In strict mode unknown fields are an error; otherwise they are reported in
/// [`ParsedClips::warnings`].
pub fn parse_clip_file(bytes: &[u8], strict: bool) -> Result<ParsedClips> {
    let value: Value = serde_json::from_slice(bytes).map_err(json_error)?;
    let unknown = audit_fields(&value);
    if strict && !unknown.is_empty() {
        return Err(Error::Parse(unknown.join("; ")));
    }
    let doc: ClipFileV1 = serde_json::from_slice(bytes).map_err(json_error)?;
    let mut clips = clips_from_document(&doc)?;
    clips.shrink_to_fit();
    Ok(ParsedClips {
        units: doc.units,
        class_names: doc.classes,
        clips,
        warnings: unknown,
    })
}

/// Converts a deserialised document into validated clips.
pub fn clips_from_document(doc: &ClipFileV1) -> Result<Vec<Clip>> {
    if doc.format != CLIP_FORMAT {
        return Err(Error::Parse(format!(
            "unexpected format `{}` (want `{CLIP_FORMAT}`)",
            doc.format
        )));
    }
    if doc.version != CLIP_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported version {} (want {CLIP_FORMAT_VERSION})",
            doc.version
        )));
    }
    let c = doc.num_classes;
    if c != doc.classes.len() {
        return Err(Error::ClassTableMismatch(format!(
            "num_classes = {c} but the class table has {} names",
            doc.classes.len()
        )));
    }
    if c == 0 || c > MAX_CLASSES {
        return Err(Error::Parse(format!(
            "num_classes {c} outside [1, {MAX_CLASSES}]"
        )));
    }
    let mut seen_clips = HashSet::new();
    let mut out = Vec::with_capacity(doc.clips.len());
    for rec in &doc.clips {
        if !seen_clips.insert(rec.clip_id.as_str()) {
            return Err(Error::Parse(format!("duplicate clip_id `{}`", rec.clip_id)));
        }
        let annotation = ClipAnnotation {
            clip_id: rec.clip_id.clone(),
            labels: LabelSet::new(rec.labels.iter().copied()),
            class_count: c,
        };
        if annotation.labels.len() != rec.labels.len() {
            return Err(Error::invalid(
                format!("clip `{}`", rec.clip_id),
                "labels",
                "duplicate label index",
            ));
        }
        let mut frames = Vec::with_capacity(rec.frames.len());
        let mut seen_frames = HashSet::new();
        for fr in &rec.frames {
            if !seen_frames.insert(fr.frame_id) {
                return Err(Error::Parse(format!(
                    "duplicate frame_id {} in clip `{}`",
                    fr.frame_id, rec.clip_id
                )));
            }
            let mut ids = HashSet::new();
            let mut actors = Vec::with_capacity(fr.actors.len());
            for a in &fr.actors {
                let ctx = format!(
                    "clip `{}`, frame {}, actor {}",
                    rec.clip_id, fr.frame_id, a.actor_id
                );
                if !ids.insert(a.actor_id) {
                    return Err(Error::invalid(
                        ctx,
                        "actor_id",
                        "duplicate actor_id within frame",
                    ));
                }
                let bbox = match a.bbox {
                    None => None,
                    Some([x1, y1, x2, y2]) => {
                        let b = BoundingBox { x1, y1, x2, y2 };
                        b.check(&ctx)?;
                        if doc.units == Units::Normalized
                            && [x1, y1, x2, y2].iter().any(|v| !(0.0..=1.0).contains(v))
                        {
                            return Err(Error::invalid(
                                ctx,
                                "box",
                                "normalized coordinate outside [0, 1]",
                            ));
                        }
                        Some(b)
                    }
                };
                actors.push(ActorDetection {
                    actor_id: a.actor_id,
                    frame_id: fr.frame_id,
                    bbox,
                    confidence: a.confidence,
                    logits: a.logits.clone(),
                });
            }
            validate_clip(&actors, &annotation)?;
            frames.push(Frame {
                frame_id: fr.frame_id,
                actors,
            });
        }
        out.push(Clip { annotation, frames });
    }
    Ok(out)
}

/// Builds the canonical document for a set of clips.
pub fn document_from_clips(units: Units, class_names: &[String], clips: &[Clip]) -> ClipFileV1 {
    ClipFileV1 {
        format: CLIP_FORMAT.to_string(),
        version: CLIP_FORMAT_VERSION,
        units,
        num_classes: class_names.len(),
        classes: class_names.to_vec(),
        clips: clips
            .iter()
            .map(|clip| ClipRecord {
                clip_id: clip.annotation.clip_id.clone(),
                labels: clip.annotation.labels.classes().to_vec(),
                frames: clip
                    .frames
                    .iter()
                    .map(|f| FrameRecord {
                        frame_id: f.frame_id,
                        actors: f
                            .actors
                            .iter()
                            .map(|a| ActorRecord {
                                actor_id: a.actor_id,
                                bbox: a.bbox.map(Into::into),
                                confidence: a.confidence,
                                logits: a.logits.clone(),
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Canonical text form: pretty JSON with a trailing newline.
pub fn serialize_clip_file(doc: &ClipFileV1) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("clip documents always serialise");
    s.push('\n');
    s
}

/// One AVA-style CSV row: `video_id, timestamp, x1, y1, x2, y2, class_id[, score]`.
///
/// Coordinates are normalized to `[0, 1]`; `class_id` is zero-based. For
/// ground-truth files an eighth column (a person id) is accepted and ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCsvRow {
    pub video_id: String,
    pub timestamp: String,
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvKind {
    Predictions,
    GroundTruth,
}

fn csv_field<'a>(rec: &'a csv::StringRecord, i: usize, line: u64, name: &str) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| Error::Parse(format!("line {line}: missing column `{name}`")))
}

fn csv_f64(rec: &csv::StringRecord, i: usize, line: u64, name: &str) -> Result<f64> {
    let raw = csv_field(rec, i, line, name)?;
    let v: f64 = raw.parse().map_err(|_| {
        Error::Parse(format!(
            "line {line}: column `{name}`: not a number: `{raw}`"
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::Parse(format!(
            "line {line}: column `{name}` is not finite"
        )));
    }
    Ok(v)
}

pub fn read_detection_csv<R: Read>(reader: R, kind: CsvKind) -> Result<Vec<DetectionCsvRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("csv: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let want = match kind {
            CsvKind::Predictions => 8..=8,
            CsvKind::GroundTruth => 7..=8,
        };
        if !want.contains(&rec.len()) {
            return Err(Error::Parse(format!(
                "line {line}: expected {} columns, found {}",
                if kind == CsvKind::Predictions {
                    "8"
                } else {
                    "7 or 8"
                },
                rec.len()
            )));
        }
        let coords = [
            csv_f64(&rec, 2, line, "x1")?,
            csv_f64(&rec, 3, line, "y1")?,
            csv_f64(&rec, 4, line, "x2")?,
            csv_f64(&rec, 5, line, "y2")?,
        ];
        if coords.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parse(format!(
                "line {line}: coordinates must be normalized to [0, 1]"
            )));
        }
        let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let raw_class = csv_field(&rec, 6, line, "class_id")?;
        let class_id: usize = raw_class.parse().map_err(|_| {
            Error::Parse(format!(
                "line {line}: column `class_id`: not an index: `{raw_class}`"
            ))
        })?;
        let score = match kind {
            CsvKind::Predictions => {
                let s = csv_f64(&rec, 7, line, "score")?;
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Parse(format!(
                        "line {line}: score {s} outside [0, 1]"
                    )));
                }
                Some(s)
            }
            CsvKind::GroundTruth => None,
        };
        rows.push(DetectionCsvRow {
            video_id: csv_field(&rec, 0, line, "video_id")?.to_string(),
            timestamp: csv_field(&rec, 1, line, "timestamp")?.to_string(),
            bbox,
            class_id,
            score,
        });
    }
    Ok(rows)
}

pub fn write_detection_csv<W: Write>(writer: W, rows: &[DetectionCsvRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    for r in rows {
        let mut fields = vec![
            r.video_id.clone(),
            r.timestamp.clone(),
            r.bbox.x1.to_string(),
            r.bbox.y1.to_string(),
            r.bbox.x2.to_string(),
            r.bbox.y2.to_string(),
            r.class_id.to_string(),
        ];
        if let Some(s) = r.score {
            fields.push(s.to_string());
        }
        w.write_record(&fields)
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Frame keys `(video_id, timestamp)` interned to integer ids in sorted order.
#[derive(Debug, Clone, Default)]
pub struct FrameIndex {
    ids: BTreeMap<(String, String), u64>,
}

impl FrameIndex {
    pub fn build<'a>(rows: impl IntoIterator<Item = &'a DetectionCsvRow>) -> Self {
        let keys: BTreeSet<(String, String)> = rows
            .into_iter()
            .map(|r| (r.video_id.clone(), r.timestamp.clone()))
            .collect();
        FrameIndex {
            ids: keys.into_iter().zip(0u64..).collect(),
        }
    }

    pub fn id(&self, row: &DetectionCsvRow) -> Option<u64> {
        self.ids
            .get(&(row.video_id.clone(), row.timestamp.clone()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Converts parsed CSV rows into evaluator records with shared frame ids.
pub fn csv_to_records(
    preds: &[DetectionCsvRow],
    gts: &[DetectionCsvRow],
) -> (Vec<PredictionRecord>, Vec<GroundTruthRecord>) {
    let index = FrameIndex::build(preds.iter().chain(gts));
    let p = preds
        .iter()
        .map(|r| PredictionRecord {
            frame_id: index.id(r).expect("indexed"),
            bbox: r.bbox,
            class_id: r.class_id,
            score: r.score.unwrap_or(1.0),
        })
        .collect();
    let g = gts
        .iter()
        .map(|r| GroundTruthRecord {
            frame_id: index.id(r).expect("indexed"),
            bbox: r.bbox,
            class_id: r.class_id,
        })
        .collect();
    (p, g)
}

/// Reads a class table: one name per line, blank lines and `#` comments skipped.
pub fn read_class_table(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}
