use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderError, EncoderPair};
use crate::scalar::{dot, normalized, Scalar};
use crate::seeding::{mix_seed, rng_for};

/// Stand-in for a CLIP-style encoder pair with a controllable modality gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEncoderSpec {
    pub concept_vocabulary: Vec<String>,
    pub dimension: usize,
    /// Constant displacement added to every image embedding before normalization.
    pub gap_offset: Vec<f64>,
    /// Expected norm of the per-frame image noise.
    pub noise_scale: f64,
    pub rng_seed: u64,
}

const BASE_STREAM: u64 = 0x0ba5e;
const GAP_STREAM: u64 = 0x6a9;
const NOISE_STREAM: u64 = 0x9015e;

fn gaussian_unit(seed: u64, stream: u64, d: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, stream);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

/// Text embedding direction of concept `index`.
pub fn concept_base(rng_seed: u64, index: usize, dimension: usize) -> Vec<f64> {
    gaussian_unit(mix_seed(rng_seed, BASE_STREAM), index as u64, dimension)
}

impl SyntheticEncoderSpec {
    /// Spec whose gap is orthogonal to every concept direction (when the
    /// vocabulary is smaller than `dimension`), so all concepts see the same
    /// text/image cosine `1 / sqrt(1 + gap_norm^2)` at zero noise.
    pub fn with_orthogonal_gap(
        concept_vocabulary: Vec<String>,
        dimension: usize,
        gap_norm: f64,
        noise_scale: f64,
        rng_seed: u64,
    ) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for i in 0..concept_vocabulary.len() {
            let mut v = concept_base(rng_seed, i, dimension);
            for q in &basis {
                let p = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            if crate::scalar::l2_norm(&v) > 1e-8 {
                basis.push(normalized(&v).expect("non-zero"));
            }
        }
        let mut g = gaussian_unit(mix_seed(rng_seed, GAP_STREAM), 0, dimension);
        for q in &basis {
            let p = dot(&g, q);
            g.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let g = normalized(&g).unwrap_or_else(|| gaussian_unit(mix_seed(rng_seed, GAP_STREAM), 1, dimension));
        let gap_offset = g.into_iter().map(|x| x * gap_norm).collect();
        Self { concept_vocabulary, dimension, gap_offset, noise_scale, rng_seed }
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Raw synthetic image frame: a concept seen through per-frame noise.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticFrame {
    pub concept: String,
    pub noise_seed: u64,
}

pub struct SyntheticPair {
    spec: SyntheticEncoderSpec,
    bases: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    matcher: Regex,
    descriptor: String,
}

impl std::fmt::Debug for SyntheticPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticPair").field("descriptor", &self.descriptor).finish()
    }
}

impl SyntheticPair {
    pub fn new(spec: SyntheticEncoderSpec) -> Result<Self, EncoderError> {
        if spec.concept_vocabulary.is_empty() {
            return Err(EncoderError::EmptyVocabulary);
        }
        let d = spec.dimension;
        if spec.gap_offset.len() != d {
            return Err(EncoderError::DimensionMismatch { expected: d, found: spec.gap_offset.len() });
        }
        let vocab: Vec<String> = spec.concept_vocabulary.iter().map(|c| c.trim().to_lowercase()).collect();
        let bases: Vec<Vec<f64>> = (0..vocab.len()).map(|i| concept_base(spec.rng_seed, i, d)).collect();
        for i in 0..bases.len() {
            for j in 0..i {
                if dot(&bases[i], &bases[j]).abs() > 1.0 - 1e-9 || vocab[i] == vocab[j] {
                    return Err(EncoderError::CollinearConcepts(vocab[j].clone(), vocab[i].clone()));
                }
            }
        }
        let mut sorted: Vec<&String> = vocab.iter().collect();
        sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let alternation = sorted.iter().map(|c| regex::escape(c)).collect::<Vec<_>>().join("|");
        let matcher = RegexBuilder::new(&format!(r"\b(?:{alternation})\b"))
            .case_insensitive(true)
            .build()
            .map_err(|e| EncoderError::EncoderFailure { excerpt: String::new(), reason: e.to_string() })?;
        let index = vocab.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let descriptor = format!("synthetic-d{d}-{}", &spec.digest()[..12]);
        let pair = Self { spec, bases, index, matcher, descriptor };
        for c in 0..pair.bases.len() {
            let img = pair.image_vector(c, None);
            let best = (0..pair.bases.len())
                .max_by(|&a, &b| dot(&img, &pair.bases[a]).total_cmp(&dot(&img, &pair.bases[b])).then(b.cmp(&a)))
                .expect("non-empty");
            if best != c {
                return Err(EncoderError::GapBreaksNearestNeighbor(vocab[c].clone()));
            }
        }
        Ok(pair)
    }

    pub fn spec(&self) -> &SyntheticEncoderSpec {
        &self.spec
    }

    pub fn concepts(&self) -> &[String] {
        &self.spec.concept_vocabulary
    }

    /// Concept whose word occurs earliest in `text`.
    pub fn concept_index(&self, text: &str) -> Option<usize> {
        let m = self.matcher.find(text)?;
        self.index.get(&m.as_str().to_lowercase()).copied()
    }

    pub fn text_vector(&self, concept: usize) -> Vec<f64> {
        normalized(&self.bases[concept]).expect("unit base")
    }

    fn image_vector(&self, concept: usize, noise_seed: Option<u64>) -> Vec<f64> {
        let d = self.spec.dimension;
        let mut v: Vec<f64> = self.bases[concept].iter().zip(&self.spec.gap_offset).map(|(b, g)| b + g).collect();
        if let Some(seed) = noise_seed {
            if self.spec.noise_scale > 0.0 {
                let mut rng = rng_for(mix_seed(self.spec.rng_seed, NOISE_STREAM), mix_seed(seed, concept as u64));
                let std = self.spec.noise_scale / (d as f64).sqrt();
                for x in &mut v {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += std * z;
                }
            }
        }
        normalized(&v).unwrap_or_else(|| self.bases[concept].clone())
    }

    pub fn image_vector_noiseless(&self, concept: usize) -> Vec<f64> {
        self.image_vector(concept, None)
    }

    fn pseudo_embedding(&self, text: &str) -> Vec<f64> {
        let digest = Sha256::digest(text.trim().to_lowercase().as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        gaussian_unit(mix_seed(self.spec.rng_seed, seed), 0, self.spec.dimension)
    }

    pub fn frame(&self, concept: usize, noise_seed: u64) -> SyntheticFrame {
        SyntheticFrame { concept: self.spec.concept_vocabulary[concept].clone(), noise_seed }
    }
}

fn cast<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::lit).collect()
}

impl<T: Scalar> EncoderPair<T> for SyntheticPair {
    type Frame = SyntheticFrame;

    fn dimension(&self) -> usize {
        self.spec.dimension
    }

    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn encode_text(&self, text: &str) -> Result<Vec<T>, EncoderError> {
        Ok(cast(match self.concept_index(text) {
            Some(c) => self.text_vector(c),
            None => self.pseudo_embedding(text),
        }))
    }

    fn encode_image(&self, frame: &SyntheticFrame) -> Result<Vec<T>, EncoderError> {
        let c = self.index.get(&frame.concept.trim().to_lowercase()).copied().ok_or_else(|| {
            EncoderError::EncoderFailure { excerpt: frame.concept.clone(), reason: "unknown concept".into() }
        })?;
        Ok(cast(self.image_vector(c, Some(frame.noise_seed))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual_encoder::{encode_textual_frame, encode_tideo, Modality};
    use crate::tideo_data::{ConditionRecord, SourceTag, TextualFrame, Tideo};

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("thing{i}")).collect()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (crate::scalar::l2_norm(a) * crate::scalar::l2_norm(b))
    }

    #[test]
    fn gap_free_noise_free_is_identity() {
        let spec = SyntheticEncoderSpec {
            concept_vocabulary: vocab(5),
            dimension: 16,
            gap_offset: vec![0.0; 16],
            noise_scale: 0.0,
            rng_seed: 1,
        };
        let pair = SyntheticPair::new(spec).unwrap();
        for c in 0..5 {
            let t: Vec<f64> = pair.encode_text(&format!("a person holds thing{c}")).unwrap();
            let i: Vec<f64> = pair.encode_image(&pair.frame(c, 99)).unwrap();
            assert_eq!(t, i);
        }
    }

    #[test]
    fn gap_cosines_match_direct_computation() {
        let mut spec = SyntheticEncoderSpec {
            concept_vocabulary: vocab(6),
            dimension: 12,
            gap_offset: vec![0.0; 12],
            noise_scale: 0.0,
            rng_seed: 3,
        };
        spec.gap_offset[0] = 0.4;
        let pair = SyntheticPair::new(spec.clone()).unwrap();
        for c in 0..6 {
            let b = concept_base(3, c, 12);
            let shifted: Vec<f64> = b.iter().zip(&spec.gap_offset).map(|(x, g)| x + g).collect();
            let expected = cos(&b, &shifted);
            let t: Vec<f64> = pair.encode_text(&format!("thing{c}")).unwrap();
            let i: Vec<f64> = pair.encode_image(&pair.frame(c, 0)).unwrap();
            assert!((dot(&t, &i) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_gap_gives_equal_cosines() {
        let spec = SyntheticEncoderSpec::with_orthogonal_gap(vocab(10), 16, 3.0, 0.0, 5);
        let pair = SyntheticPair::new(spec).unwrap();
        let target = 1.0 / 10f64.sqrt();
        for c in 0..10 {
            assert!((dot(&pair.text_vector(c), &pair.image_vector_noiseless(c)) - target).abs() < 1e-9);
        }
    }

    #[test]
    fn construction_is_deterministic_and_validated() {
        let spec = SyntheticEncoderSpec::with_orthogonal_gap(vocab(8), 16, 2.0, 0.5, 11);
        let a = SyntheticPair::new(spec.clone()).unwrap();
        let b = SyntheticPair::new(spec).unwrap();
        let fa: Vec<f32> = a.encode_image(&a.frame(3, 7)).unwrap();
        let fb: Vec<f32> = b.encode_image(&b.frame(3, 7)).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(EncoderPair::<f32>::descriptor(&a), EncoderPair::<f32>::descriptor(&b));

        let empty = SyntheticEncoderSpec { concept_vocabulary: vec![], dimension: 4, gap_offset: vec![0.0; 4], noise_scale: 0.0, rng_seed: 0 };
        assert_eq!(SyntheticPair::new(empty).unwrap_err(), EncoderError::EmptyVocabulary);

        // A gap pointing at one concept's text embedding pulls every image toward it.
        let mut spec = SyntheticEncoderSpec::with_orthogonal_gap(vocab(8), 16, 0.0, 0.0, 11);
        spec.gap_offset = concept_base(11, 0, 16).into_iter().map(|x| 5.0 * x).collect();
        assert!(matches!(SyntheticPair::new(spec), Err(EncoderError::GapBreaksNearestNeighbor(_))));
    }

    #[test]
    fn earliest_concept_wins_and_unknown_text_is_hashed() {
        let pair = SyntheticPair::new(SyntheticEncoderSpec::with_orthogonal_gap(
            vec!["ice".into(), "ice cream".into(), "cup".into()],
            8,
            1.0,
            0.0,
            2,
        ))
        .unwrap();
        assert_eq!(pair.concept_index("a cup of ice cream"), Some(2));
        assert_eq!(pair.concept_index("Ice Cream in a cup"), Some(1));
        assert_eq!(pair.concept_index("dicey"), None);
        let u1: Vec<f64> = pair.encode_text("nothing known").unwrap();
        let u2: Vec<f64> = pair.encode_text("nothing known").unwrap();
        assert_eq!(u1, u2);
        assert!((crate::scalar::l2_norm(&u1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_images_stay_nearest_to_their_concept() {
        let pair = SyntheticPair::new(SyntheticEncoderSpec::with_orthogonal_gap(vocab(50), 64, 3.0, 0.5, 7)).unwrap();
        let mut hits = 0;
        for c in 0..50 {
            for s in 0..4 {
                let img: Vec<f64> = pair.encode_image(&pair.frame(c, s)).unwrap();
                let best = (0..50).max_by(|&a, &b| dot(&img, &pair.text_vector(a)).total_cmp(&dot(&img, &pair.text_vector(b)))).unwrap();
                hits += usize::from(best == c);
            }
        }
        assert!(hits >= 190, "{hits}/200");
    }

    #[test]
    fn tideo_encoding_is_unit_and_in_order() {
        let pair = SyntheticPair::new(SyntheticEncoderSpec::with_orthogonal_gap(vocab(10), 16, 1.0, 0.0, 4)).unwrap();
        let frames: Vec<TextualFrame> =
            (0..7).map(|i| TextualFrame::new(format!("someone picks up thing{i}"), vec![format!("thing{i}")])).collect();
        let tideo = Tideo {
            id: "t".into(),
            source_tag: SourceTag::SyntheticFixture,
            condition: ConditionRecord::new(SourceTag::SyntheticFixture, "s"),
            frames,
            extra: Default::default(),
        };
        let seq = encode_tideo::<f64, _>(&tideo, &pair, 7).unwrap();
        assert_eq!(seq.modality, Modality::Text);
        for i in 0..7 {
            for (a, b) in seq.features.row(i).iter().zip(pair.text_vector(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let f = encode_textual_frame::<f64, _>(&TextualFrame::new("thing1", vec!["thing2".into()]), &pair).unwrap();
        assert!((crate::scalar::l2_norm(&f.vector) - 1.0).abs() < 1e-6);
    }
}
