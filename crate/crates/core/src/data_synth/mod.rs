//! Deterministic synthetic face sequences (images, landmarks, multi-AU
//! labels with temporal structure) and the dataset format shared with
//! externally supplied data.

mod generate;
mod io;
mod render;
mod template;

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use generate::{
    derive_seed, generate_dataset, intensity_code, session_id, subject_id, synthesize, SynthConfig, SynthFrame,
    MAX_LATENT_STEP, SHARED_DRIVERS,
};
pub use io::{decode_pgm, encode_pgm, image_path, load_dataset, write_dataset, MANIFEST_FILE};
pub use render::{au_appearance, au_template, render_base, render_clean, AuAppearance, PatternStyle, Scene};
pub use template::neutral_template;

use crate::loss_metrics::LabelMatrix;
use crate::roi_geometry::{GeometryError, ImageSize, LandmarkSet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    /// 0/1 per AU.
    Binary,
    /// 0..=5 per AU, binarized at the manifest threshold.
    Intensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub file: String,
    pub format: LabelFormat,
    /// Intensities at or above this value count as active.
    #[serde(default = "default_threshold")]
    pub threshold: u8,
}

fn default_threshold() -> u8 {
    2
}

impl LabelFile {
    pub fn binarize(&self, value: u8) -> Result<u8, String> {
        match self.format {
            LabelFormat::Binary if value <= 1 => Ok(value),
            LabelFormat::Binary => Err(format!("binary label must be 0 or 1, got {value}")),
            LabelFormat::Intensity if value <= 5 => Ok(u8::from(value >= self.threshold)),
            LabelFormat::Intensity => Err(format!("intensity must be 0..=5, got {value}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub id: String,
    /// Frame ids in strictly increasing temporal order.
    pub frames: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub sessions: Vec<SessionEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub aus: Vec<u32>,
    pub schema_size: usize,
    pub image_size: ImageSize,
    pub landmarks: String,
    pub labels: LabelFile,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn new(cfg: &SynthConfig, subjects: Vec<SubjectEntry>) -> Self {
        let labels = match cfg.label_format {
            LabelFormat::Binary => LabelFile {
                file: "labels.csv".into(),
                format: LabelFormat::Binary,
                threshold: default_threshold(),
            },
            LabelFormat::Intensity => LabelFile {
                file: "intensities.csv".into(),
                format: LabelFormat::Intensity,
                threshold: default_threshold(),
            },
        };
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            aus: cfg.aus.clone(),
            schema_size: 68,
            image_size: cfg.image(),
            landmarks: "landmarks.csv".into(),
            labels,
            subjects,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Manifest(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.aus.is_empty() || self.schema_size == 0 {
            return bad("aus and schema_size must be non-empty".into());
        }
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if !ids.insert(&s.id) {
                return bad(format!("subject {} listed twice", s.id));
            }
            let mut sessions = BTreeSet::new();
            for e in &s.sessions {
                if !sessions.insert(&e.id) {
                    return bad(format!("subject {} session {} listed twice", s.id, e.id));
                }
                if e.frames.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!(
                        "subject {} session {}: frame ids are not strictly increasing",
                        s.id, e.id
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One frame in memory. `image` is row-major grayscale in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub subject: String,
    pub session: String,
    pub frame: u32,
    pub image: Vec<f64>,
    pub landmarks: LandmarkSet,
    pub labels: Vec<u8>,
    /// Latent activations (synthetic data only).
    pub latent: Option<Vec<f64>>,
}

/// Frames in manifest order: grouped by subject, then session, then time.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<FrameRecord>,
    session_start: Vec<usize>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, frames: Vec<FrameRecord>) -> Result<Self, DataError> {
        let size = manifest.image_size;
        let mut session_start = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.image.len() != size.width * size.height || f.labels.len() != manifest.aus.len() {
                return Err(DataError::Manifest(format!(
                    "frame {i} has {} pixels and {} labels",
                    f.image.len(),
                    f.labels.len()
                )));
            }
            if f.landmarks.schema_size() != manifest.schema_size {
                return Err(DataError::Manifest(format!(
                    "frame {i} has {} landmarks, schema has {}",
                    f.landmarks.schema_size(),
                    manifest.schema_size
                )));
            }
            let start = match i.checked_sub(1).map(|p| &frames[p]) {
                Some(p) if p.subject == f.subject && p.session == f.session => {
                    if p.frame >= f.frame {
                        return Err(DataError::Manifest(format!("frame {i} is out of temporal order")));
                    }
                    session_start[i - 1]
                }
                _ => i,
            };
            session_start.push(start);
        }
        Ok(Dataset {
            manifest,
            frames,
            session_start,
        })
    }

    /// Builds an in-memory dataset from synthesized frames.
    pub fn from_synth(cfg: &SynthConfig, frames: Vec<SynthFrame>) -> Result<Self, DataError> {
        let mut subjects: Vec<SubjectEntry> = Vec::new();
        for f in &frames {
            let r = &f.record;
            if subjects.last().is_none_or(|s| s.id != r.subject) {
                subjects.push(SubjectEntry {
                    id: r.subject.clone(),
                    sessions: Vec::new(),
                });
            }
            let s = subjects.last_mut().unwrap();
            if s.sessions.last().is_none_or(|e| e.id != r.session) {
                s.sessions.push(SessionEntry {
                    id: r.session.clone(),
                    frames: Vec::new(),
                });
            }
            s.sessions.last_mut().unwrap().frames.push(r.frame);
        }
        let manifest = DatasetManifest::new(cfg, subjects);
        Dataset::new(manifest, frames.into_iter().map(|f| f.record).collect())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn aus(&self) -> &[u32] {
        &self.manifest.aus
    }

    pub fn image_size(&self) -> ImageSize {
        self.manifest.image_size
    }

    /// Distinct subject ids in manifest order.
    pub fn subject_ids(&self) -> Vec<String> {
        self.manifest.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Indices of every frame belonging to one of `subjects`.
    pub fn indices_for(&self, subjects: &[String]) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| subjects.contains(&self.frames[i].subject))
            .collect()
    }

    /// Indices of the frames that precede frame `i` in its session.
    pub fn priors(&self, i: usize) -> Range<usize> {
        self.session_start[i]..i
    }

    pub fn labels(&self, indices: &[usize]) -> LabelMatrix {
        let cols = self.manifest.aus.len();
        let data = indices.iter().flat_map(|&i| self.frames[i].labels.iter().copied()).collect();
        LabelMatrix::new(indices.len(), cols, data).expect("labels are binary")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            subjects: 2,
            sessions: 2,
            frames: 4,
            ..Default::default()
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        generate_dataset(&cfg, 5, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let mem = Dataset::from_synth(&cfg, synthesize(&cfg, 5).unwrap()).unwrap();
        assert_eq!(loaded.len(), 16);
        assert_eq!(loaded.manifest, mem.manifest);
        for (a, b) in loaded.frames.iter().zip(&mem.frames) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!(a.labels, b.labels);
        }
        assert_eq!(loaded.priors(5), 4..5);
        assert_eq!(loaded.priors(4), 4..4);
    }

    #[test]
    fn intensity_labels_binarize_to_the_same_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            label_format: LabelFormat::Intensity,
            ..small()
        };
        generate_dataset(&cfg, 5, dir.path()).unwrap();
        assert!(dir.path().join("intensities.csv").exists());
        let loaded = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        let mem = Dataset::from_synth(&cfg, synthesize(&cfg, 5).unwrap()).unwrap();
        let all: Vec<usize> = (0..loaded.len()).collect();
        assert_eq!(loaded.labels(&all), mem.labels(&all));
    }

    #[test]
    fn binarize_rules() {
        let f = LabelFile {
            file: "x".into(),
            format: LabelFormat::Intensity,
            threshold: 2,
        };
        assert_eq!(f.binarize(3), Ok(1));
        assert_eq!(f.binarize(1), Ok(0));
        assert!(f.binarize(6).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).collect();
        let bytes = encode_pgm(4, 3, &px);
        assert_eq!(decode_pgm(&bytes, "t").unwrap(), (4, 3, px));
        assert!(decode_pgm(b"P2\n1 1\n255\n0", "t").is_err());
    }
}
