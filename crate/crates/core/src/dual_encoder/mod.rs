//! Aligned text/image encoders, frame fusion and sequence representations.

mod cache;
mod synthetic;

pub use cache::{content_key, CacheError, CacheHeader, FeatureCache, FeatureCacheReader, CACHE_MAGIC};
pub use synthetic::{SyntheticEncoderSpec, SyntheticFrame, SyntheticPair};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{normalized, Scalar};
use crate::tensor::Matrix;
use crate::tideo_data::{TextualFrame, Tideo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("encoder failed on `{excerpt}`: {reason}")]
    EncoderFailure { excerpt: String, reason: String },
    #[error("feature has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("concept vocabulary is empty")]
    EmptyVocabulary,
    #[error("concepts `{0}` and `{1}` have collinear embeddings")]
    CollinearConcepts(String, String),
    #[error("the configured gap moves image(`{0}`) closer to another concept's text embedding")]
    GapBreaksNearestNeighbor(String),
    #[error("target frame count must be at least 1")]
    ZeroTargetFrames,
    #[error("video has no frames")]
    EmptyVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Projected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature<T> {
    pub vector: Vec<T>,
    pub modality: Modality,
    pub normalized: bool,
}

/// Ordered per-frame features of one video, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRepresentation<T> {
    pub features: Matrix<T>,
    pub modality: Modality,
}

impl<T: Scalar> SequenceRepresentation<T> {
    pub fn new(features: Matrix<T>, modality: Modality) -> Self {
        Self { features, modality }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn frame(&self, i: usize) -> FrameFeature<T> {
        FrameFeature { vector: self.features.row(i).to_vec(), modality: self.modality, normalized: false }
    }

    /// Picks rows by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Self { features: Matrix::from_vec(indices.len(), d, data), modality: self.modality }
    }

    pub fn resample(&self, target_frames: usize) -> Result<Self, EncoderError> {
        Ok(self.select(&uniform_indices(self.len(), target_frames)?))
    }
}

/// An aligned pair of text and image encoders sharing one feature space.
pub trait EncoderPair<T: Scalar> {
    /// Raw frame type accepted by the image encoder.
    type Frame;

    fn dimension(&self) -> usize;

    fn descriptor(&self) -> &str;

    fn encode_text(&self, text: &str) -> Result<Vec<T>, EncoderError>;

    fn encode_image(&self, frame: &Self::Frame) -> Result<Vec<T>, EncoderError>;
}

/// Evenly spaced positions `i * (n - 1) / (target - 1)` rounded half-down.
/// A single target frame takes index 0.
pub fn uniform_indices(n: usize, target: usize) -> Result<Vec<usize>, EncoderError> {
    if target == 0 {
        return Err(EncoderError::ZeroTargetFrames);
    }
    if n == 0 {
        return Err(EncoderError::EmptyVideo);
    }
    if target == 1 {
        return Ok(vec![0]);
    }
    let den = target - 1;
    Ok((0..target)
        .map(|i| {
            let num = i * (n - 1);
            let (q, r) = (num / den, num % den);
            if 2 * r > den {
                q + 1
            } else {
                q
            }
        })
        .collect())
}

fn excerpt(s: &str) -> String {
    s.chars().take(40).collect()
}

fn unit<T: Scalar>(v: Vec<T>, text: &str) -> Result<Vec<T>, EncoderError> {
    normalized(&v).ok_or_else(|| EncoderError::EncoderFailure {
        excerpt: excerpt(text),
        reason: "zero or non-finite embedding".into(),
    })
}

/// Normalizes each constituent, averages, and renormalizes.
pub fn fuse<T: Scalar>(constituents: &[Vec<T>]) -> Option<Vec<T>> {
    let d = constituents.first()?.len();
    let mut acc = vec![T::zero(); d];
    for c in constituents {
        let u = normalized(c)?;
        for (a, x) in acc.iter_mut().zip(u) {
            *a += x;
        }
    }
    normalized(&acc)
}

pub fn encode_textual_frame<T: Scalar, P: EncoderPair<T> + ?Sized>(
    frame: &TextualFrame,
    pair: &P,
) -> Result<FrameFeature<T>, EncoderError> {
    let d = pair.dimension();
    let mut parts = Vec::with_capacity(1 + frame.object_captions.len());
    for text in std::iter::once(&frame.caption).chain(&frame.object_captions) {
        let v = pair.encode_text(text)?;
        if v.len() != d {
            return Err(EncoderError::DimensionMismatch { expected: d, found: v.len() });
        }
        parts.push(unit(v, text)?);
    }
    let vector = fuse(&parts).ok_or_else(|| EncoderError::EncoderFailure {
        excerpt: excerpt(&frame.caption),
        reason: "constituent features cancel out".into(),
    })?;
    Ok(FrameFeature { vector, modality: Modality::Text, normalized: true })
}

pub fn encode_tideo<T: Scalar, P: EncoderPair<T> + ?Sized>(
    tideo: &Tideo,
    pair: &P,
    target_frames: usize,
) -> Result<SequenceRepresentation<T>, EncoderError> {
    let indices = uniform_indices(tideo.frames.len(), target_frames)?;
    let d = pair.dimension();
    let mut data = Vec::with_capacity(indices.len() * d);
    let mut encoded: Vec<Option<Vec<T>>> = vec![None; tideo.frames.len()];
    for &i in &indices {
        if encoded[i].is_none() {
            encoded[i] = Some(encode_textual_frame(&tideo.frames[i], pair)?.vector);
        }
        data.extend_from_slice(encoded[i].as_ref().expect("encoded above"));
    }
    Ok(SequenceRepresentation::new(Matrix::from_vec(indices.len(), d, data), Modality::Text))
}

/// Resamples and normalizes pre-extracted per-frame image features.
pub fn encode_video_features<T: Scalar>(
    features: &[Vec<T>],
    dimension: usize,
    target_frames: usize,
) -> Result<SequenceRepresentation<T>, EncoderError> {
    if let Some(bad) = features.iter().find(|f| f.len() != dimension) {
        return Err(EncoderError::DimensionMismatch { expected: dimension, found: bad.len() });
    }
    let indices = uniform_indices(features.len(), target_frames)?;
    let mut data = Vec::with_capacity(indices.len() * dimension);
    for &i in &indices {
        data.extend(unit(features[i].clone(), &format!("video frame {i}"))?);
    }
    Ok(SequenceRepresentation::new(Matrix::from_vec(indices.len(), dimension, data), Modality::Image))
}

/// Encodes raw frames with the image encoder, then resamples.
pub fn encode_video_frames<T: Scalar, P: EncoderPair<T> + ?Sized>(
    frames: &[P::Frame],
    pair: &P,
    target_frames: usize,
) -> Result<SequenceRepresentation<T>, EncoderError> {
    let indices = uniform_indices(frames.len(), target_frames)?;
    let d = pair.dimension();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in &indices {
        let v = pair.encode_image(&frames[i])?;
        if v.len() != d {
            return Err(EncoderError::DimensionMismatch { expected: d, found: v.len() });
        }
        data.extend(unit(v, &format!("video frame {i}"))?);
    }
    Ok(SequenceRepresentation::new(Matrix::from_vec(indices.len(), d, data), Modality::Image))
}
