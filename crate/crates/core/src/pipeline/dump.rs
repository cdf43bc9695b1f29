//! Binary video dumps: 8-byte magic, u32 LE header length, JSON header, then
//! little-endian f32 frames in `[frame, channel, row, col]` order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Grid, Result};

pub const MAGIC: &[u8; 8] = b"OURO0001";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub dtype: String,
    pub shape: [usize; 4],
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoDump {
    pub header: DumpHeader,
    pub data: Vec<f32>,
}

/// Per-frame summary printed by `inspect`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    pub std: f64,
}

impl VideoDump {
    pub fn from_frames(frames: &[Grid], config_hash: &str, seed: u64) -> Result<Self> {
        let (c, h, w) = frames
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| Error::InsufficientData("dump of an empty video".into()))?;
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        for f in frames {
            if f.dim() != (c, h, w) {
                return Err(Error::Dimension(format!("frame {:?} vs {:?}", f.dim(), (c, h, w))));
            }
            data.extend(f.iter().map(|&v| v as f32));
        }
        Ok(Self {
            header: DumpHeader {
                dtype: "f32le".into(),
                shape: [frames.len(), c, h, w],
                config_hash: config_hash.into(),
                seed,
            },
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.header.shape[1..].iter().product()
    }

    pub fn frames(&self) -> Vec<Grid> {
        let [_, c, h, w] = self.header.shape;
        self.data
            .chunks(self.frame_len().max(1))
            .map(|chunk| Grid::from_shape_fn((c, h, w), |(i, j, k)| chunk[(i * h + j) * w + k] as f64))
            .collect()
    }

    pub fn frame_stats(&self) -> Vec<FrameStats> {
        self.data
            .chunks(self.frame_len().max(1))
            .map(|chunk| {
                let n = chunk.len() as f64;
                let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                FrameStats {
                    min: chunk.iter().copied().fold(f32::INFINITY, f32::min),
                    max: chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a dump; `label` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: label.to_string(),
            msg,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing OURO0001 magic bytes".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} runs past end of file")))?;
        let header: DumpHeader =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.dtype != "f32le" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        let count = header
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("shape overflows".into()))?;
        let payload = &bytes[body..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(bad(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                count.saturating_mul(4)
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let label = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::Format {
            path: label.clone(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes, &label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample() -> VideoDump {
        let frames: Vec<Grid> = (0..3)
            .map(|n| Array3::from_shape_fn((2, 3, 4), |(c, i, j)| (n * 100 + c * 12 + i * 4 + j) as f64 * 0.5))
            .collect();
        VideoDump::from_frames(&frames, "abc", 9).unwrap()
    }

    #[test]
    fn round_trip() {
        let d = sample();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..8], b"OURO0001");
        let back = VideoDump::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, d);
        assert_eq!(back.frames()[2][[1, 2, 3]], (200 + 12 + 8 + 3) as f64 * 0.5);
    }

    #[test]
    fn layout_is_frame_channel_row_col() {
        let bytes = sample().to_bytes();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let at = |i: usize| f32::from_le_bytes(bytes[12 + hlen + 4 * i..16 + hlen + 4 * i].try_into().unwrap());
        assert_eq!(at(0), 0.0);
        assert_eq!(at(1), 0.5);
        assert_eq!(at(24), 50.0);
        assert_eq!(bytes.len(), 12 + hlen + 4 * 3 * 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        let err = VideoDump::from_bytes(&bytes[..bytes.len() - 1], "cut.bin").unwrap_err();
        assert!(err.to_string().contains("cut.bin"));
        bytes[0] = b'X';
        let err = VideoDump::from_bytes(&bytes, "x.bin").unwrap_err();
        assert!(err.is_user_error() && err.to_string().contains("x.bin"));
    }

    #[test]
    fn stats() {
        let s = sample().frame_stats();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].min, 0.0);
        assert_eq!(s[0].max, 11.5);
        assert!((s[0].mean - 5.75).abs() < 1e-12);
    }
}
