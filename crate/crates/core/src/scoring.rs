//! Question-conditioned per-frame relevance scores.
//!
//! Scores are cosine similarities between the L2-normalized pooled frame
//! embedding and the normalized mean of the query token embeddings. The
//! scorer is pluggable: any finite score vector can be fed to the importance
//! sampler, so externally computed scores work as well.
//!
//! Embeddings travel in a small binary interchange file (little-endian):
//! magic `FEMB`, version u32 = 1, then F, T, D as u32, then F*D f32 frame
//! embeddings (frame-major) and T*D f32 token embeddings (token-major).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"FEMB";
const VERSION: u32 = 1;

/// Pooled per-frame visual embeddings, F x D, stored as f32 to match the
/// interchange format bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    data: Vec<f32>,
    frames: usize,
    dim: usize,
}

impl FrameEmbeddings {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "frame embeddings need F >= 1 and D >= 1, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {frames}x{dim} = {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite frame embedding".into()));
        }
        Ok(Self { data, frames, dim })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embedding of frame `f` as a slice of length D.
    pub fn frame(&self, f: usize) -> &[f32] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Textual token embeddings, T x D.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    data: Vec<f32>,
    tokens: usize,
    dim: usize,
}

impl QueryEmbedding {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "query embedding needs T >= 1 and D >= 1, got {tokens}x{dim}"
            )));
        }
        if data.len() != tokens * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {tokens}x{dim} = {} values, got {}",
                tokens * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite token embedding".into()));
        }
        Ok(Self { data, tokens, dim })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Per-frame relevance scores, each a cosine similarity in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    scores: Vec<f64>,
}

impl FrameScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || s.abs() > 1.0 + 1e-9) {
            return Err(Error::InvalidValue(
                "frame scores must be finite cosines within [-1, 1]".into(),
            ));
        }
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// Scale a vector to unit L2 norm. The zero vector has no direction; it maps
/// to itself and the degenerate flag is set instead of erroring, so padded or
/// blank frames rank lowest rather than aborting.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (v.to_vec(), true);
    }
    (v.iter().map(|x| x / norm).collect(), false)
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Cosine relevance of every frame against the pooled query.
///
/// The query tokens are averaged first and then normalized; each frame
/// embedding is normalized independently. Degenerate zero embeddings on
/// either side yield a score of 0.
pub fn score_frames(frames: &FrameEmbeddings, query: &QueryEmbedding) -> Result<FrameScores> {
    if frames.dim() != query.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frame dim {} vs query dim {}",
            frames.dim(),
            query.dim()
        )));
    }
    let dim = frames.dim();
    let mut pooled = vec![0.0f64; dim];
    for t in 0..query.tokens() {
        for (acc, v) in pooled.iter_mut().zip(query.token(t)) {
            *acc += *v as f64;
        }
    }
    for acc in pooled.iter_mut() {
        *acc /= query.tokens() as f64;
    }
    let (query_unit, query_degenerate) = l2_normalize(&pooled);

    let mut scores = Vec::with_capacity(frames.frames());
    for f in 0..frames.frames() {
        if query_degenerate {
            scores.push(0.0);
            continue;
        }
        let (frame_unit, frame_degenerate) = l2_normalize(&to_f64(frames.frame(f)));
        if frame_degenerate {
            scores.push(0.0);
            continue;
        }
        scores.push(frame_unit.iter().zip(&query_unit).map(|(a, b)| a * b).sum());
    }
    FrameScores::new(scores)
}

/// Write an embedding file; see the module docs for the byte layout.
pub fn write_embedding_file(
    path: &Path,
    frames: &FrameEmbeddings,
    query: &QueryEmbedding,
) -> Result<()> {
    if frames.dim() != query.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frame dim {} vs query dim {}",
            frames.dim(),
            query.dim()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(frames.frames() as u32).to_le_bytes())?;
    w.write_all(&(query.tokens() as u32).to_le_bytes())?;
    w.write_all(&(frames.dim() as u32).to_le_bytes())?;
    for v in frames.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in query.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            offset,
            expected: end,
            actual: bytes.len(),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Read an embedding file written by [`write_embedding_file`].
///
/// The round trip is bit-exact. Malformed files produce distinct errors that
/// name the byte offset of the problem.
pub fn read_embedding_file(path: &Path) -> Result<(FrameEmbeddings, QueryEmbedding)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_embedding_bytes(&bytes)
}

/// Parse the FEMB byte layout from memory.
pub fn parse_embedding_bytes(bytes: &[u8]) -> Result<(FrameEmbeddings, QueryEmbedding)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            offset: 0,
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::BadVersion { found: version });
    }
    let frames = read_u32(bytes, 8)? as usize;
    let tokens = read_u32(bytes, 12)? as usize;
    let dim = read_u32(bytes, 16)? as usize;
    if frames == 0 || tokens == 0 || dim == 0 {
        return Err(Error::BadDimensions {
            offset: 8,
            detail: format!("F={frames}, T={tokens}, D={dim}; all must be >= 1"),
        });
    }
    let header = 20usize;
    let frame_bytes = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::BadDimensions {
            offset: 8,
            detail: format!("F*D overflows: F={frames}, D={dim}"),
        })?;
    let token_bytes = tokens
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::BadDimensions {
            offset: 12,
            detail: format!("T*D overflows: T={tokens}, D={dim}"),
        })?;
    let expected = header + frame_bytes + token_bytes;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len(),
            expected,
            actual: bytes.len(),
        });
    }

    let read_f32s = |offset: usize, count: usize| -> Vec<f32> {
        (0..count)
            .map(|i| {
                let at = offset + 4 * i;
                f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
            })
            .collect()
    };
    let frame_data = read_f32s(header, frames * dim);
    let token_data = read_f32s(header + frame_bytes, tokens * dim);
    Ok((
        FrameEmbeddings::new(frames, dim, frame_data)?,
        QueryEmbedding::new(tokens, dim, token_data)?,
    ))
}
