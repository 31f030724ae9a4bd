//! Dataset files and the synthetic dataset generator.
//!
//! Narratives are JSON lines:
//!
//! ```json
//! {"image_id": "img7", "caption": ["a", "dog"],
//!  "trace_points": [[0.1, 0.2, 0.05], [0.3, 0.4, 0.6]],
//!  "word_timings": [["a", 0.0, 0.5], ["dog", 0.5, 1.0]],
//!  "features_key": "img7"}
//! ```
//!
//! `image_width` / `image_height` are optional; when present, point
//! coordinates are read as pixels and divided by them.
//!
//! Region features are a little-endian binary file:
//!
//! ```text
//! magic      8 bytes  "MITRFEAT"
//! version    u32      1
//! d_visual   u32
//! images     u32
//! per image: u32 id length, UTF-8 id, u32 regions, regions × d_visual × f32
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{CaptionTokens, Vocab};
use crate::trace::{
    encode_trace, validate_points, validate_timings, AlignedTrace, TraceBox, TraceError,
    TracePoint, WordTiming,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("features: {0}")]
    Features(String),
    #[error("record {image_id}: {source}")]
    Trace {
        image_id: String,
        #[source]
        source: TraceError,
    },
    #[error("{0}")]
    Missing(String),
}

/// One caption with its mouse trace.
#[derive(Clone, Debug, PartialEq)]
pub struct NarrativeRecord {
    pub image_id: String,
    pub caption: Vec<String>,
    pub trace_points: Vec<TracePoint>,
    pub word_timings: Vec<WordTiming>,
    pub features_key: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    caption: Vec<String>,
    trace_points: Vec<[f64; 3]>,
    word_timings: Vec<(String, f64, f64)>,
    features_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_height: Option<f64>,
}

/// Lowercases and drops ASCII punctuation.
pub fn normalize_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
}

impl NarrativeRecord {
    /// Checks points, timings and that the timings spell out the caption.
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.image_id.is_empty() {
            problems.push("image_id: empty".to_string());
        }
        if self.caption.is_empty() {
            problems.push("caption: empty".to_string());
        }
        if let Some(i) = self.caption.iter().position(|t| t.is_empty()) {
            problems.push(format!("caption: token {i} is empty after normalization"));
        }
        if let Err(e) = validate_points(&self.trace_points) {
            problems.push(format!("trace_points: {e}"));
        }
        if let Err(e) = validate_timings(&self.word_timings) {
            problems.push(format!("word_timings: {e}"));
        }
        if self.word_timings.len() != self.caption.len() {
            problems.push(format!(
                "word_timings: {} entries for {} caption tokens",
                self.word_timings.len(),
                self.caption.len()
            ));
        } else if let Some(i) = self
            .caption
            .iter()
            .zip(&self.word_timings)
            .position(|(c, w)| normalize_token(&w.token) != *c)
        {
            problems.push(format!(
                "word_timings: entry {i} ({:?}) does not match caption token {:?}",
                self.word_timings[i].token, self.caption[i]
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    /// One box per caption token.
    pub fn encode(&self) -> Result<AlignedTrace, DataError> {
        encode_trace(&self.trace_points, &self.word_timings).map_err(|source| DataError::Trace {
            image_id: self.image_id.clone(),
            source,
        })
    }

    fn from_raw(raw: RawRecord) -> Result<Self, String> {
        let (sx, sy) = match (raw.image_width, raw.image_height) {
            (None, None) => (1.0, 1.0),
            (Some(w), Some(h)) if w > 0.0 && h > 0.0 => (w, h),
            _ => return Err("image_width/image_height: both must be positive when given".into()),
        };
        let rec = Self {
            image_id: raw.image_id,
            caption: raw.caption.iter().map(|t| normalize_token(t)).collect(),
            trace_points: raw
                .trace_points
                .iter()
                .map(|&[x, y, t]| TracePoint::new(x / sx, y / sy, t))
                .collect(),
            word_timings: raw
                .word_timings
                .into_iter()
                .map(|(tok, a, b)| WordTiming::new(tok, a, b))
                .collect(),
            features_key: raw.features_key,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn to_raw(&self) -> RawRecord {
        RawRecord {
            image_id: self.image_id.clone(),
            caption: self.caption.clone(),
            trace_points: self.trace_points.iter().map(|p| [p.x, p.y, p.t]).collect(),
            word_timings: self
                .word_timings
                .iter()
                .map(|w| (w.token.clone(), w.t_start, w.t_end))
                .collect(),
            features_key: self.features_key.clone(),
            image_width: None,
            image_height: None,
        }
    }
}

pub fn read_narratives<R: BufRead>(reader: R) -> Result<Vec<NarrativeRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Line { line: i + 1, msg };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(NarrativeRecord::from_raw(raw).map_err(err)?);
    }
    Ok(out)
}

pub fn load_narratives(path: impl AsRef<Path>) -> Result<Vec<NarrativeRecord>, DataError> {
    let path = path.as_ref();
    let records = read_narratives(BufReader::new(File::open(path)?))?;
    if records.is_empty() {
        log::warn!("{}: no narrative records", path.display());
    }
    Ok(records)
}

pub fn write_narratives<W: Write>(mut w: W, records: &[NarrativeRecord]) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut w, &r.to_raw()).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_narratives(
    path: impl AsRef<Path>,
    records: &[NarrativeRecord],
) -> Result<(), DataError> {
    write_narratives(BufWriter::new(File::create(path)?), records)
}

/// Region features keyed by image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub d_visual: usize,
    pub images: BTreeMap<String, Tensor>,
}

const FEAT_MAGIC: &[u8; 8] = b"MITRFEAT";
const FEAT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<usize, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| DataError::Features(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(DataError::Features("truncated file".into()));
    }
    Ok(buf)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<(), DataError> {
    let v =
        u32::try_from(v).map_err(|_| DataError::Features(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_region_features<R: Read>(mut r: R) -> Result<RegionFeatures, DataError> {
    let magic = read_bytes(&mut r, 8)?;
    if magic != FEAT_MAGIC {
        return Err(DataError::Features("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FEAT_VERSION as usize {
        return Err(DataError::Features(format!(
            "unsupported version {version}"
        )));
    }
    let d_visual = read_u32(&mut r)?;
    if d_visual == 0 {
        return Err(DataError::Features("d_visual is 0".into()));
    }
    let count = read_u32(&mut r)?;
    let mut images = BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(&mut r)?;
        let id = String::from_utf8(read_bytes(&mut r, n)?)
            .map_err(|_| DataError::Features("image id is not UTF-8".into()))?;
        let regions = read_u32(&mut r)?;
        if regions == 0 {
            return Err(DataError::Features(format!("image {id} has no regions")));
        }
        let raw = read_bytes(&mut r, regions * d_visual * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::matrix(regions, d_visual, data)
            .map_err(|e| DataError::Features(e.to_string()))?;
        if images.insert(id.clone(), t).is_some() {
            return Err(DataError::Features(format!("duplicate image {id}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DataError::Features("trailing bytes".into()));
    }
    Ok(RegionFeatures { d_visual, images })
}

pub fn load_region_features(path: impl AsRef<Path>) -> Result<RegionFeatures, DataError> {
    read_region_features(BufReader::new(File::open(path)?))
}

/// Values are stored as f32.
pub fn write_region_features<W: Write>(
    mut w: W,
    features: &RegionFeatures,
) -> Result<(), DataError> {
    w.write_all(FEAT_MAGIC)?;
    w.write_all(&FEAT_VERSION.to_le_bytes())?;
    write_u32(&mut w, features.d_visual)?;
    write_u32(&mut w, features.images.len())?;
    for (id, t) in &features.images {
        if t.cols() != features.d_visual {
            return Err(DataError::Features(format!(
                "image {id} has width {}",
                t.cols()
            )));
        }
        write_u32(&mut w, id.len())?;
        w.write_all(id.as_bytes())?;
        write_u32(&mut w, t.rows())?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_region_features(
    path: impl AsRef<Path>,
    features: &RegionFeatures,
) -> Result<(), DataError> {
    write_region_features(BufWriter::new(File::create(path)?), features)
}

/// Word table in first-seen order over the captions.
pub fn build_vocab(records: &[NarrativeRecord]) -> Vocab {
    Vocab::from_words(records.iter().flat_map(|r| r.caption.iter().cloned()))
}

/// A record ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_id: String,
    pub features: Tensor,
    pub caption: CaptionTokens,
    pub trace: AlignedTrace,
}

/// Encodes traces, maps words through `vocab` (unknown words become UNK)
/// and attaches features.
pub fn prepare_examples(
    records: &[NarrativeRecord],
    features: &RegionFeatures,
    vocab: &Vocab,
) -> Result<Vec<Example>, DataError> {
    records
        .iter()
        .map(|r| {
            let f = features.images.get(&r.features_key).ok_or_else(|| {
                DataError::Missing(format!("no features for key {:?}", r.features_key))
            })?;
            Ok(Example {
                image_id: r.image_id.clone(),
                features: f.clone(),
                caption: vocab.encode(&r.caption),
                trace: r.encode()?,
            })
        })
        .collect()
}

/// `{"image_id": ..., "boxes": [[x1, y1, x2, y2, area], ...]}` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub image_id: String,
    pub boxes: AlignedTrace,
}

/// `{"image_id": ..., "caption": "..."}` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLine {
    pub image_id: String,
    pub caption: String,
}

/// `{"image_id": ..., "captions": ["...", ...]}` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLine {
    pub image_id: String,
    pub captions: Vec<String>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: impl AsRef<Path>,
) -> Result<Vec<T>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Line {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<(), DataError> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

const TYPE_WORDS: [&str; 12] = [
    "circle", "square", "triangle", "star", "ring", "cross", "arrow", "heart", "moon", "cloud",
    "leaf", "drop",
];
pub const SYNTH_PREFIX: [&str; 2] = ["there", "are"];

/// Parameters of the synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Object types.
    pub k: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// At least `k + 5`; extra columns carry noise only.
    pub d_visual: usize,
    pub images: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 5,
            min_objects: 2,
            max_objects: 3,
            d_visual: 12,
            images: 256,
            noise: 0.001,
            seed: 0,
        }
    }
}

pub fn type_word(t: usize) -> String {
    TYPE_WORDS
        .get(t)
        .map_or_else(|| format!("type{t}"), |w| w.to_string())
}

/// Synthetic narratives plus their region features.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<NarrativeRecord>,
    pub features: RegionFeatures,
    /// Prefix words followed by the type words.
    pub vocab: Vocab,
}

/// Side of the cell layout. Each object fills the middle 80% of its own cell.
const GRID: usize = 2;

/// Each image holds distinct object types in distinct cells of a
/// `GRID × GRID` layout, one region per object whose features are the type
/// one-hot, the box and noise. The caption is a fixed prefix followed by the
/// type words in a random order, and the trace draws each object's box while
/// its word is spoken; prefix words get no points.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset, DataError> {
    let bad = |m: &str| Err(DataError::Features(format!("synthetic spec: {m}")));
    if spec.k < 2 {
        return bad("k must be at least 2");
    }
    if spec.min_objects == 0
        || spec.min_objects > spec.max_objects
        || spec.max_objects > spec.k.min(GRID * GRID)
    {
        return bad("need 1 ≤ min_objects ≤ max_objects ≤ min(k, 4)");
    }
    if spec.d_visual < spec.k + 5 {
        return bad("d_visual must be at least k + 5");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.images);
    let mut images = BTreeMap::new();
    let types: Vec<usize> = (0..spec.k).collect();
    let cells: Vec<usize> = (0..GRID * GRID).collect();
    let cell = 1.0 / GRID as f64;
    for i in 0..spec.images {
        let id = format!("synth{i:05}");
        let n = rng.gen_range(spec.min_objects..=spec.max_objects);
        let chosen: Vec<usize> = types.choose_multiple(&mut rng, n).copied().collect();
        let boxes: Vec<TraceBox> = cells
            .choose_multiple(&mut rng, n)
            .map(|&c| {
                let x = ((c % GRID) as f64 + 0.1) * cell;
                let y = ((c / GRID) as f64 + 0.1) * cell;
                TraceBox::from_corners(x, y, x + 0.8 * cell, y + 0.8 * cell)
            })
            .collect();

        let mut feat = Vec::with_capacity(n * spec.d_visual);
        for (&t, b) in chosen.iter().zip(&boxes) {
            let mut row = vec![0.0; spec.d_visual];
            row[t] = 1.0;
            row[spec.k..spec.k + 5].copy_from_slice(&b.to_array());
            for v in &mut row {
                *v += spec.noise * rng.gen_range(-1.0..1.0);
            }
            feat.extend(row);
        }
        images.insert(
            id.clone(),
            Tensor::matrix(n, spec.d_visual, feat)
                .map_err(|e| DataError::Features(e.to_string()))?,
        );

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut caption: Vec<String> = SYNTH_PREFIX.iter().map(|s| s.to_string()).collect();
        caption.extend(order.iter().map(|&o| type_word(chosen[o])));
        let dur = 0.5;
        let word_timings: Vec<WordTiming> = caption
            .iter()
            .enumerate()
            .map(|(j, w)| WordTiming::new(w.clone(), j as f64 * dur, (j + 1) as f64 * dur))
            .collect();
        let mut trace_points = Vec::new();
        for (slot, &o) in order.iter().enumerate() {
            let b = boxes[o];
            let t0 = (SYNTH_PREFIX.len() + slot) as f64 * dur;
            let mut pts = vec![(b.x1, b.y1), (b.x2, b.y1), (b.x2, b.y2), (b.x1, b.y2)];
            for _ in 0..2 {
                pts.push((rng.gen_range(b.x1..=b.x2), rng.gen_range(b.y1..=b.y2)));
            }
            pts.shuffle(&mut rng);
            let step = dur / (pts.len() + 1) as f64;
            for (j, (x, y)) in pts.into_iter().enumerate() {
                trace_points.push(TracePoint::new(x, y, t0 + (j + 1) as f64 * step));
            }
        }
        records.push(NarrativeRecord {
            image_id: id.clone(),
            caption,
            trace_points,
            word_timings,
            features_key: id,
        });
    }
    let vocab = Vocab::from_words(
        SYNTH_PREFIX
            .iter()
            .map(|s| s.to_string())
            .chain((0..spec.k).map(type_word)),
    );
    Ok(SynthDataset {
        records,
        features: RegionFeatures {
            d_visual: spec.d_visual,
            images,
        },
        vocab,
    })
}

/// For a synthetic record, reads each type word and emits the box of that
/// object; prefix words get the whole-image box.
pub fn synth_oracle_trace(record: &NarrativeRecord, features: &Tensor, k: usize) -> AlignedTrace {
    let prefix: BTreeSet<&str> = SYNTH_PREFIX.iter().copied().collect();
    record
        .caption
        .iter()
        .map(|w| {
            if prefix.contains(w.as_str()) {
                return TraceBox::WHOLE_IMAGE;
            }
            let t = (0..k).position(|t| type_word(t) == *w).expect("type word");
            let row = (0..features.rows())
                .max_by(|&a, &b| features.at(a, t).total_cmp(&features.at(b, t)))
                .expect("regions");
            let r = features.row(row);
            TraceBox::from([r[k], r[k + 1], r[k + 2], r[k + 3], r[k + 4]])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbm::lbm_score;

    fn sample_record() -> NarrativeRecord {
        NarrativeRecord {
            image_id: "a".into(),
            caption: vec!["a".into(), "dog".into()],
            trace_points: vec![
                TracePoint::new(0.1, 0.2, 0.1),
                TracePoint::new(0.3, 0.5, 0.6),
            ],
            word_timings: vec![
                WordTiming::new("a", 0.0, 0.5),
                WordTiming::new("dog", 0.5, 1.0),
            ],
            features_key: "a".into(),
        }
    }

    #[test]
    fn narrative_round_trip() {
        let recs = vec![sample_record(), {
            let mut r = sample_record();
            r.image_id = "b".into();
            r.trace_points.clear();
            r
        }];
        let mut buf = Vec::new();
        write_narratives(&mut buf, &recs).unwrap();
        assert_eq!(read_narratives(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read_narratives(&b""[..]).unwrap().is_empty());
        assert!(read_narratives(&b"\n  \n"[..]).unwrap().is_empty());
    }

    #[test]
    fn overlapping_timings_are_rejected_with_line_number() {
        let good = r#"{"image_id":"x","caption":["a","b"],"trace_points":[],"word_timings":[["a",0,0.5],["b",0.5,1]],"features_key":"x"}"#;
        let bad = r#"{"image_id":"y","caption":["a","b"],"trace_points":[],"word_timings":[["a",0,0.6],["b",0.5,1]],"features_key":"y"}"#;
        let text = format!("{good}\n{bad}\n");
        match read_narratives(text.as_bytes()) {
            Err(DataError::Line { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("word_timings"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = r#"{"image_id":"x","caption":["a"],"trace_points":[],"features_key":"x"}"#;
        let err = read_narratives(text.as_bytes()).unwrap_err().to_string();
        assert!(
            err.contains("word_timings") && err.contains("line 1"),
            "{err}"
        );
    }

    #[test]
    fn pixel_coordinates_are_normalized() {
        let text = r#"{"image_id":"x","caption":["Dog."],"trace_points":[[64,48,0.1]],"word_timings":[["dog",0,1]],"features_key":"x","image_width":640,"image_height":480}"#;
        let r = &read_narratives(text.as_bytes()).unwrap()[0];
        assert_eq!(r.caption, vec!["dog"]);
        assert_eq!((r.trace_points[0].x, r.trace_points[0].y), (0.1, 0.1));
    }

    #[test]
    fn features_round_trip_and_truncation() {
        let mut images = BTreeMap::new();
        let vals: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.0) as f64).collect();
        images.insert("img".to_string(), Tensor::matrix(3, 4, vals).unwrap());
        let f = RegionFeatures {
            d_visual: 4,
            images,
        };
        let mut buf = Vec::new();
        write_region_features(&mut buf, &f).unwrap();
        let back = read_region_features(buf.as_slice()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.images["img"].shape(), &[3, 4]);
        let mut again = Vec::new();
        write_region_features(&mut again, &back).unwrap();
        assert_eq!(again, buf);
        for cut in [4, 20, buf.len() - 1] {
            assert!(read_region_features(&buf[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[3] = b'x';
        assert!(read_region_features(bad.as_slice()).is_err());
        let mut v2 = buf;
        v2[8] = 2;
        assert!(read_region_features(v2.as_slice()).is_err());
    }

    #[test]
    fn synthetic_data_is_deterministic_and_aligned() {
        let spec = SynthSpec {
            images: 40,
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a, synth_dataset(&spec).unwrap());
        for r in &a.records {
            r.validate().unwrap();
            let trace = r.encode().unwrap();
            assert_eq!(trace.len(), r.caption.len());
            for b in trace.iter() {
                b.validate().unwrap();
            }
            let f = &a.features.images[&r.features_key];
            let oracle = synth_oracle_trace(r, f, spec.k);
            let noiseless = trace.iter().zip(oracle.iter()).all(|(x, y)| {
                x.to_array()
                    .iter()
                    .zip(y.to_array())
                    .all(|(p, q)| (p - q).abs() <= 2.0 * spec.noise)
            });
            assert!(noiseless);
        }
    }

    #[test]
    fn oracle_reaches_zero_lbm_without_noise() {
        let spec = SynthSpec {
            images: 30,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        for r in &d.records {
            let oracle = synth_oracle_trace(r, &d.features.images[&r.features_key], spec.k);
            assert_eq!(lbm_score(&r.encode().unwrap(), &oracle, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn examples_use_the_vocab() {
        let d = synth_dataset(&SynthSpec {
            images: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let ex = prepare_examples(&d.records, &d.features, &d.vocab).unwrap();
        for (e, r) in ex.iter().zip(&d.records) {
            assert_eq!(d.vocab.decode(&e.caption), r.caption);
            assert_eq!(e.caption.len(), e.trace.len());
        }
        let mut r = d.records[0].clone();
        r.features_key = "nope".into();
        assert!(matches!(
            prepare_examples(&[r], &d.features, &d.vocab),
            Err(DataError::Missing(_))
        ));
    }
}
