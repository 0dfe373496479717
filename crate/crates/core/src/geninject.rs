//! Generation-side embedding transforms with a small binary file format.
//!
//! Two pure operations live here. Padding injection takes a fixed-length
//! prompt embedding sequence and overwrites every row after the end-of-
//! sequence position with a single image embedding, so a downstream
//! text-to-image pipeline inherits the image's appearance through the slots
//! the prompt never used. Adaptive instance normalization renormalizes a
//! content feature map channel by channel to match the mean and variance of
//! a style feature map.
//!
//! The file format is a hand-off point for an external pipeline: one JSON
//! header line, a row-major payload of little-endian 32-bit floats, and an
//! FNV-1a checksum so truncation or corruption is detected rather than
//! silently consumed.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{channel_stats, Matrix, NumError};

pub use crate::numkit::FeatureMap;

/// File format version written into sequence headers.
pub const SEQUENCE_VERSION: u32 = 1;

/// Default epsilon inside the variance square root; keeps constant channels
/// usable as AdaIN content.
pub const ADAIN_DEFAULT_EPS: f64 = 1e-5;

/// Upper bound on the payload a sequence header may declare, in bytes.
const MAX_SEQUENCE_PAYLOAD: u64 = 1 << 30;

/// Errors from injection, style transfer, and sequence file handling.
#[derive(Debug, Error)]
pub enum GenError {
    /// Two operands disagree on a dimension that must match.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Content and style feature maps have different channel counts.
    #[error("channel count mismatch: content has {content}, style has {style}")]
    ChannelMismatch { content: usize, style: usize },
    /// The end-of-sequence index lies outside the 1-based row range.
    #[error("EOS index {k} outside 1..={l}")]
    EosOutOfRange { k: usize, l: usize },
    /// A scalar parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    /// Numeric failure from the underlying matrix routines.
    #[error(transparent)]
    Num(#[from] NumError),
    /// Underlying file system failure.
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    /// The sequence file header is missing, unparseable, or inconsistent
    /// with the payload.
    #[error("corrupt sequence header: {0}")]
    CorruptHeader(String),
    /// The payload does not hash to the checksum stored in the file.
    #[error("payload checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
}

/// Fixed-length prompt embedding sequence with a marked end-of-sequence row.
///
/// Rows before and including the EOS position (1-based `k`) carry prompt
/// content; rows after it are padding slots that injection may overwrite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    rows: Matrix,
    k: usize,
}

impl EmbeddingSequence {
    /// Wraps a row matrix and an EOS position, checking `1 <= k <= L` and
    /// finiteness.
    pub fn new(rows: Matrix, k: usize) -> Result<Self, GenError> {
        if rows.cols() == 0 {
            return Err(GenError::DimMismatch {
                context: "embedding dimension",
                expected: 1,
                got: 0,
            });
        }
        if k == 0 || k > rows.rows() {
            return Err(GenError::EosOutOfRange { k, l: rows.rows() });
        }
        if !rows.all_finite() {
            return Err(NumError::NonFinite {
                context: "embedding sequence rows",
            }
            .into());
        }
        Ok(EmbeddingSequence { rows, k })
    }

    /// Number of rows `L`.
    pub fn length(&self) -> usize {
        self.rows.rows()
    }

    /// Embedding dimension `d`.
    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// 1-based end-of-sequence position.
    pub fn eos_index(&self) -> usize {
        self.k
    }

    /// The `L x d` row matrix.
    pub fn rows(&self) -> &Matrix {
        &self.rows
    }
}

/// Single image embedding, the vector injected into padding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    f: Vec<f64>,
}

impl ImageEmbedding {
    /// Wraps an embedding vector, checking it is non-empty and finite.
    pub fn new(f: Vec<f64>) -> Result<Self, GenError> {
        if f.is_empty() {
            return Err(GenError::DimMismatch {
                context: "image embedding dimension",
                expected: 1,
                got: 0,
            });
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite {
                context: "image embedding",
            }
            .into());
        }
        Ok(ImageEmbedding { f })
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }
}

/// Replaces every padding row of `seq` with the image embedding.
///
/// Rows 1..k (1-based, EOS included) are kept bit-exactly; each of the
/// `L - k` rows after the EOS position becomes a copy of `img`. Applying the
/// operation twice with the same embedding changes nothing further.
pub fn inject_image_features(
    seq: &EmbeddingSequence,
    img: &ImageEmbedding,
) -> Result<EmbeddingSequence, GenError> {
    if img.dim() != seq.dim() {
        return Err(GenError::DimMismatch {
            context: "injected image embedding",
            expected: seq.dim(),
            got: img.dim(),
        });
    }
    let mut rows = seq.rows.clone();
    for r in seq.k..seq.length() {
        rows.row_mut(r).copy_from_slice(img.values());
    }
    Ok(EmbeddingSequence { rows, k: seq.k })
}

/// Adaptive instance normalization of `content` onto `style` statistics.
///
/// Every channel of the output carries the style channel's mean and standard
/// deviation while keeping the content channel's normalized spatial pattern:
/// `out = mu_s + sigma_s * (x - mu_c) / sigma_c`, with both deviations
/// computed as `sqrt(var + eps)`. Spatial sizes of the two maps may differ;
/// only channel counts must agree.
pub fn adain(content: &FeatureMap, style: &FeatureMap, eps: f64) -> Result<FeatureMap, GenError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(GenError::InvalidParam(format!(
            "adain eps must be non-negative and finite, got {eps}"
        )));
    }
    if content.channels() != style.channels() {
        return Err(GenError::ChannelMismatch {
            content: content.channels(),
            style: style.channels(),
        });
    }
    let (mu_c, sigma_c) = channel_stats(content, eps)?;
    let (mu_s, sigma_s) = channel_stats(style, eps)?;
    let mut data = Vec::with_capacity(content.data().len());
    for c in 0..content.channels() {
        for &x in content.channel(c) {
            data.push(mu_s[c] + sigma_s[c] * (x - mu_c[c]) / sigma_c[c]);
        }
    }
    FeatureMap::from_vec(content.channels(), content.height(), content.width(), data)
        .map_err(Into::into)
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceHeader {
    version: u32,
    #[serde(rename = "L")]
    l: u64,
    d: u64,
    k: u64,
    dtype: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes a sequence file: JSON header line, `L * d` little-endian 32-bit
/// floats row-major, then the 8-byte little-endian FNV-1a checksum of that
/// payload.
pub fn write_sequence(seq: &EmbeddingSequence, path: &Path) -> Result<(), GenError> {
    let header = SequenceHeader {
        version: SEQUENCE_VERSION,
        l: seq.length() as u64,
        d: seq.dim() as u64,
        k: seq.eos_index() as u64,
        dtype: "f32le".to_string(),
    };
    let mut payload = Vec::with_capacity(seq.length() * seq.dim() * 4);
    for &v in seq.rows.data() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(NumError::NonFinite {
                context: "sequence payload at 32-bit precision",
            }
            .into());
        }
        payload.extend_from_slice(&narrowed.to_le_bytes());
    }
    let checksum = fnv1a64(&payload);

    let mut writer = BufWriter::new(std::fs::File::create(path)?);
    let header_line =
        serde_json::to_string(&header).expect("sequence header serialization cannot fail");
    writer.write_all(header_line.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.write_all(&payload)?;
    writer.write_all(&checksum.to_le_bytes())?;
    writer.flush()?;
    Ok(())
}

/// Reads a sequence file written by [`write_sequence`], verifying header
/// consistency and the payload checksum before returning any data.
pub fn read_sequence(path: &Path) -> Result<EmbeddingSequence, GenError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);

    let mut header_bytes = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        match reader.read_exact(&mut byte) {
            Ok(()) => {}
            Err(_) => {
                return Err(GenError::CorruptHeader(
                    "file ended before the header line".into(),
                ))
            }
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(GenError::CorruptHeader(
                "header line exceeds 1 MiB without a newline".into(),
            ));
        }
    }
    let header: SequenceHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| GenError::CorruptHeader(format!("unparseable header: {e}")))?;
    if header.version != SEQUENCE_VERSION {
        return Err(GenError::CorruptHeader(format!(
            "unsupported version {}, expected {}",
            header.version, SEQUENCE_VERSION
        )));
    }
    if header.dtype != "f32le" {
        return Err(GenError::CorruptHeader(format!(
            "unsupported dtype {:?}, expected \"f32le\"",
            header.dtype
        )));
    }
    if header.l == 0 || header.d == 0 {
        return Err(GenError::CorruptHeader(format!(
            "degenerate shape {} x {}",
            header.l, header.d
        )));
    }
    if header.k == 0 || header.k > header.l {
        return Err(GenError::CorruptHeader(format!(
            "EOS index {} outside 1..={}",
            header.k, header.l
        )));
    }
    let payload_len = header
        .l
        .checked_mul(header.d)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= MAX_SEQUENCE_PAYLOAD)
        .ok_or_else(|| {
            GenError::CorruptHeader(format!(
                "header declares an implausible payload of {} x {} entries",
                header.l, header.d
            ))
        })?;

    let mut payload = vec![0u8; payload_len as usize];
    reader.read_exact(&mut payload).map_err(|_| {
        GenError::CorruptHeader(format!(
            "payload truncated before {payload_len} bytes"
        ))
    })?;
    let mut checksum_bytes = [0u8; 8];
    reader
        .read_exact(&mut checksum_bytes)
        .map_err(|_| GenError::CorruptHeader("checksum missing or truncated".into()))?;
    let stored = u64::from_le_bytes(checksum_bytes);
    let computed = fnv1a64(&payload);
    if stored != computed {
        return Err(GenError::ChecksumMismatch { stored, computed });
    }

    let mut data = Vec::with_capacity((header.l * header.d) as usize);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunks_exact yields 4 bytes"));
        if !v.is_finite() {
            return Err(NumError::NonFinite {
                context: "sequence payload",
            }
            .into());
        }
        data.push(f64::from(v));
    }
    let rows = Matrix::from_vec(header.l as usize, header.d as usize, data)?;
    EmbeddingSequence::new(rows, header.k as usize)
}
