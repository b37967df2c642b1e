//! Per-video segment feature files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `WSFT`               |
//! | 4      | 4    | version (`u32`, = 1)       |
//! | 8      | 4    | segment count `n` (`u32`)  |
//! | 12     | 4    | feature dimension `d`      |
//! | 16     | 8    | fps (`f64`)                |
//! | 24     | 4    | frames per segment (`u32`) |
//! | 28     | 4    | reserved, zero             |
//! | 32     | 4·n·d| row-major `f32` payload    |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"WSFT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub const DEFAULT_FPS: f64 = 25.0;
pub const DEFAULT_FRAMES_PER_SEGMENT: u32 = 16;

/// One video's segment features plus the timing needed to map segment
/// indices back to seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub fps: f64,
    pub frames_per_segment: u32,
    pub features: Matrix<f32>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        features: Matrix<f32>,
        fps: f64,
        frames_per_segment: u32,
    ) -> Result<Self> {
        let seq = Self {
            video_id: video_id.into(),
            fps,
            frames_per_segment,
            features,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    /// Length of one segment in seconds.
    pub fn segment_seconds(&self) -> f64 {
        f64::from(self.frames_per_segment) / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::EmptyVideo);
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite(format!(
                "features of video {}",
                self.video_id
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || self.frames_per_segment == 0 {
            return Err(Error::invalid(format!(
                "video {}: timing must be positive (fps={}, frames/segment={})",
                self.video_id, self.fps, self.frames_per_segment
            )));
        }
        Ok(())
    }
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let n = u32::try_from(seq.n()).map_err(|_| Error::invalid("too many segments"))?;
    let d = u32::try_from(seq.d()).map_err(|_| Error::invalid("feature dimension too large"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * seq.features.as_slice().len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&seq.fps.to_le_bytes());
    buf.extend_from_slice(&seq.frames_per_segment.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for x in seq.features.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary feature file. The video id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let fps = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let frames_per_segment = u32_at(24);
    let expected = HEADER_LEN + 4 * n * d;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected),
            format!(
                "payload for {n}x{d} features needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(fmt(HEADER_LEN + 4 * pos, "non-finite feature value".into()));
    }
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let seq = FeatureSequence {
        video_id,
        fps,
        frames_per_segment,
        features: Matrix::from_vec(n, d, data)?,
    };
    seq.validate().map_err(|e| fmt(8, e.to_string()))?;
    Ok(seq)
}

/// Plain-text import: one whitespace-separated row per segment. Blank lines
/// and lines starting with `#` are ignored.
pub fn read_features_text(
    path: &Path,
    video_id: &str,
    fps: f64,
    frames_per_segment: u32,
) -> Result<FeatureSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(str::parse::<f32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            let first: &Vec<f32> = first;
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    FeatureSequence::new(video_id, Matrix::from_rows(&rows)?, fps, frames_per_segment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn random_seq(n: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = Rng::new(seed);
        let data = (0..n * d).map(|_| rng.normal() as f32 * 3.0).collect();
        FeatureSequence::new("vid", Matrix::from_vec(n, d, data).unwrap(), 30.0, 8).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vid.feat");
        let seq = random_seq(13, 7, 3);
        write_features(&seq, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, seq);
        let a: Vec<u32> = seq.features.as_slice().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.features.as_slice().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vid.feat");
        write_features(&random_seq(4, 3, 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let msg = read_features(&path).unwrap_err().to_string();
        assert!(msg.contains("80 bytes"), "{msg}");
        assert!(msg.contains("75"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vid.feat");
        write_features(&random_seq(2, 2, 1), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(Error::Format { offset: 0, .. })
        ));
        bytes[0] = b'W';
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn text_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        fs::write(&path, "# comment\n1 2 3\n4 5 6\n\n").unwrap();
        let seq = read_features_text(&path, "v", 25.0, 16).unwrap();
        assert_eq!((seq.n(), seq.d()), (2, 3));
        assert_eq!(seq.features.row(1), &[4.0, 5.0, 6.0]);
        fs::write(&path, "1 2 3\n4 5\n").unwrap();
        let err = read_features_text(&path, "v", 25.0, 16).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_video_rejected() {
        assert!(matches!(
            FeatureSequence::new("v", Matrix::zeros(0, 4), 25.0, 16),
            Err(Error::EmptyVideo)
        ));
    }
}
