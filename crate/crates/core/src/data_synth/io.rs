//! On-disk format: `manifest.json`, 8-bit binary PGM images under
//! `sub{S}/ses{E}/frame{F}.pgm`, and one CSV row per frame for landmarks
//! and labels (keyed by subject, session and frame id).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::generate::intensity_code;
use super::{DataError, Dataset, DatasetManifest, FrameRecord, LabelFormat};
use crate::roi_geometry::{LandmarkSet, Point};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Landmark coordinates are stored with three decimals; rounding first
/// makes the in-memory value identical to the value read back.
pub fn round_coord(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    if e.kind() == std::io::ErrorKind::NotFound {
        DataError::MissingFile(path.display().to_string())
    } else {
        DataError::Io {
            path: path.display().to_string(),
            source: e,
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary (P5) 8-bit PGM, returning width, height and pixels.
pub fn decode_pgm(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bad = |msg: &str| DataError::Parse {
        file: name.to_string(),
        line: 1,
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("PGM header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in PGM header"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PGM (maxval 255) is supported"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("PGM pixel data truncated"))?;
    Ok((w, h, data.to_vec()))
}

pub fn image_path(root: &Path, subject: &str, session: &str, frame: u32) -> PathBuf {
    root.join(format!("sub{subject}"))
        .join(format!("ses{session}"))
        .join(format!("frame{frame:04}.pgm"))
}

/// Writes manifest, images and CSV files. Records must follow manifest order.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, records: &[FrameRecord]) -> Result<(), DataError> {
    let size = manifest.image_size;
    let mut lm_csv = String::from("subject,session,frame");
    for i in 0..manifest.schema_size {
        lm_csv.push_str(&format!(",x{i},y{i}"));
    }
    lm_csv.push('\n');
    let mut label_csv = String::from("subject,session,frame");
    for au in &manifest.aus {
        label_csv.push_str(&format!(",AU{au}"));
    }
    label_csv.push('\n');
    for r in records {
        let pixels: Vec<u8> = r.image.iter().map(|&v| quantize(v)).collect();
        write(
            &image_path(root, &r.subject, &r.session, r.frame),
            &encode_pgm(size.width, size.height, &pixels),
        )?;
        let key = format!("{},{},{}", r.subject, r.session, r.frame);
        lm_csv.push_str(&key);
        for p in r.landmarks.points() {
            lm_csv.push_str(&format!(",{:.3},{:.3}", p.x, p.y));
        }
        lm_csv.push('\n');
        label_csv.push_str(&key);
        match manifest.labels.format {
            LabelFormat::Binary => r.labels.iter().for_each(|l| label_csv.push_str(&format!(",{l}"))),
            LabelFormat::Intensity => {
                let latent = r.latent.as_ref().ok_or_else(|| {
                    DataError::Config("intensity labels need latent activations".into())
                })?;
                latent
                    .iter()
                    .for_each(|&l| label_csv.push_str(&format!(",{}", intensity_code(l))));
            }
        }
        label_csv.push('\n');
    }
    write(&root.join(&manifest.landmarks), lm_csv.as_bytes())?;
    write(&root.join(&manifest.labels.file), label_csv.as_bytes())?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write(&root.join(MANIFEST_FILE), (json + "\n").as_bytes())
}

type Key = (String, String, u32);

/// Reads a CSV keyed by its first three columns, checking the column count.
fn read_keyed_csv(path: &Path, value_cols: usize) -> Result<HashMap<Key, (usize, Vec<String>)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path.display().to_string();
    let bad = |line: usize, msg: String| DataError::Parse {
        file: name.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let header_cols = header.split(',').count();
    if header_cols != 3 + value_cols {
        return Err(bad(
            1,
            format!("header has {} value columns, expected {value_cols}", header_cols.saturating_sub(3)),
        ));
    }
    let mut rows = HashMap::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 + value_cols {
            return Err(bad(
                n,
                format!("{} value columns, expected {value_cols}", cells.len().saturating_sub(3)),
            ));
        }
        let frame = cells[2]
            .parse::<u32>()
            .map_err(|_| bad(n, format!("bad frame id `{}`", cells[2])))?;
        let key = (cells[0].to_string(), cells[1].to_string(), frame);
        let values = cells[3..].iter().map(|s| s.to_string()).collect();
        if rows.insert(key.clone(), (n, values)).is_some() {
            return Err(bad(n, format!("duplicate row for {key:?}")));
        }
    }
    Ok(rows)
}

/// Loads a dataset from its directory or its `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        file: manifest_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    manifest.validate()?;
    let size = manifest.image_size;
    let lm_path = root.join(&manifest.landmarks);
    let label_path = root.join(&manifest.labels.file);
    let mut lms = read_keyed_csv(&lm_path, 2 * manifest.schema_size)?;
    let mut labels = read_keyed_csv(&label_path, manifest.aus.len())?;

    let mut frames = Vec::new();
    for subject in &manifest.subjects {
        for session in &subject.sessions {
            for &f in &session.frames {
                let key = (subject.id.clone(), session.id.clone(), f);
                let missing = |file: &Path| DataError::Parse {
                    file: file.display().to_string(),
                    line: 0,
                    msg: format!("no row for subject {} session {} frame {f}", subject.id, session.id),
                };
                let (lm_line, lm_vals) = lms.remove(&key).ok_or_else(|| missing(&lm_path))?;
                let (lab_line, lab_vals) = labels.remove(&key).ok_or_else(|| missing(&label_path))?;

                let parse_err = |file: &Path, line: usize, msg: String| DataError::Parse {
                    file: file.display().to_string(),
                    line,
                    msg,
                };
                let coords = lm_vals
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| parse_err(&lm_path, lm_line, format!("bad coordinate `{s}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let points = coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
                let landmarks = LandmarkSet::new(points, size)
                    .map_err(|e| parse_err(&lm_path, lm_line, e.to_string()))?;

                let row = lab_vals
                    .iter()
                    .map(|s| {
                        let v = s
                            .parse::<u8>()
                            .map_err(|_| parse_err(&label_path, lab_line, format!("bad label `{s}`")))?;
                        manifest
                            .labels
                            .binarize(v)
                            .map_err(|m| parse_err(&label_path, lab_line, m))
                    })
                    .collect::<Result<Vec<u8>, _>>()?;

                let img_path = image_path(&root, &subject.id, &session.id, f);
                let bytes = fs::read(&img_path).map_err(|e| io_err(&img_path, e))?;
                let (w, h, px) = decode_pgm(&bytes, &img_path.display().to_string())?;
                if (w, h) != (size.width, size.height) {
                    return Err(DataError::Parse {
                        file: img_path.display().to_string(),
                        line: 1,
                        msg: format!("image is {w}x{h}, manifest says {}x{}", size.width, size.height),
                    });
                }
                frames.push(FrameRecord {
                    subject: subject.id.clone(),
                    session: session.id.clone(),
                    frame: f,
                    image: px.iter().map(|&b| b as f64 / 255.0).collect(),
                    landmarks,
                    labels: row,
                    latent: None,
                });
            }
        }
    }
    if let Some((key, (line, _))) = lms.iter().min_by_key(|(_, (l, _))| *l) {
        return Err(DataError::Parse {
            file: lm_path.display().to_string(),
            line: *line,
            msg: format!("row {key:?} is not listed in the manifest"),
        });
    }
    if let Some((key, (line, _))) = labels.iter().min_by_key(|(_, (l, _))| *l) {
        return Err(DataError::Parse {
            file: label_path.display().to_string(),
            line: *line,
            msg: format!("row {key:?} is not listed in the manifest"),
        });
    }
    Dataset::new(manifest, frames)
}
