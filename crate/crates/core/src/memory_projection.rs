//! Training-free projection of image features into text-feature space by
//! softmax-weighted mixing of a support memory of text anchors.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual_encoder::{
    CacheError, EncoderError, EncoderPair, FeatureCache, FeatureCacheReader, FrameFeature, Modality,
    SequenceRepresentation,
};
use crate::scalar::{dot, normalized, Scalar};
use crate::seeding::rng_for;
use crate::tensor::Matrix;
use crate::tideo_data::{read_jsonl_values, CorpusError, JsonlAppender};

pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const MEMORY_FILE: &str = "memory.bin";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
/// Largest output deviation the top-k path may introduce before falling back.
pub const TOP_K_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("caption stream is empty")]
    EmptyCaptionStream,
    #[error("feature has dimension {found}, memory holds {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("query feature is zero or not finite")]
    DegenerateQuery,
    #[error("top_k must be between 1 and {n}, got {k}")]
    InvalidTopK { k: usize, n: usize },
    #[error("expected image features, got {0:?}")]
    WrongModality(Modality),
    #[error("memory size must be at least 1")]
    ZeroCapacity,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("provenance has {found} rows, memory has {expected}")]
    ProvenanceMismatch { expected: usize, found: usize },
}

/// Text anchors `m_1..m_N` with their source captions and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportMemory<T> {
    anchors: Matrix<T>,
    temperature: f64,
    provenance: Vec<String>,
    normalized: bool,
    descriptor: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjectionOptions {
    /// Rescale the mixed output to unit length.
    pub post_normalize: bool,
    /// Mix only the `k` highest-weight anchors when that changes the output
    /// by at most [`TOP_K_TOLERANCE`]; otherwise the exact mix is used.
    pub top_k: Option<usize>,
}

fn normalize_caption(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl<T: Scalar> SupportMemory<T> {
    /// Anchors are unit-normalized; rows that cannot be normalized are rejected.
    pub fn from_anchors(
        anchors: Matrix<T>,
        provenance: Vec<String>,
        temperature: f64,
        descriptor: impl Into<String>,
    ) -> Result<Self, ProjectionError> {
        if !(temperature > 0.0) {
            return Err(ProjectionError::NonPositiveTemperature(temperature));
        }
        if anchors.rows() == 0 {
            return Err(ProjectionError::EmptyCaptionStream);
        }
        if provenance.len() != anchors.rows() {
            return Err(ProjectionError::ProvenanceMismatch { expected: anchors.rows(), found: provenance.len() });
        }
        let mut anchors = anchors;
        for r in 0..anchors.rows() {
            let u = normalized(anchors.row(r)).ok_or(ProjectionError::DegenerateQuery)?;
            anchors.row_mut(r).copy_from_slice(&u);
        }
        Ok(Self { anchors, temperature, provenance, normalized: true, descriptor: descriptor.into() })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchors(&self) -> &Matrix<T> {
        &self.anchors
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Descriptor of the encoder that produced the anchors.
    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, ProjectionError> {
        if !(temperature > 0.0) {
            return Err(ProjectionError::NonPositiveTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(self)
    }

    fn scores(&self, f_v: &[T]) -> Result<Vec<T>, ProjectionError> {
        if f_v.len() != self.dim() {
            return Err(ProjectionError::DimensionMismatch { expected: self.dim(), found: f_v.len() });
        }
        let q = normalized(f_v).ok_or(ProjectionError::DegenerateQuery)?;
        let inv_tau = T::lit(1.0 / self.temperature);
        Ok((0..self.len()).map(|i| dot(self.anchors.row(i), &q) * inv_tau).collect())
    }

    /// Softmax weights `w_i` over the whole memory.
    pub fn weights(&self, f_v: &[T]) -> Result<Vec<T>, ProjectionError> {
        let mut w = self.scores(f_v)?;
        crate::autodiff::softmax_in_place(&mut w);
        Ok(w)
    }

    fn mix(&self, weights: &[T], rows: impl Iterator<Item = usize>) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for i in rows {
            let w = weights[i];
            for (o, &m) in out.iter_mut().zip(self.anchors.row(i)) {
                *o += w * m;
            }
        }
        out
    }

    pub fn project(&self, f_v: &[T]) -> Result<FrameFeature<T>, ProjectionError> {
        self.project_with(f_v, ProjectionOptions::default())
    }

    pub fn project_with(&self, f_v: &[T], opts: ProjectionOptions) -> Result<FrameFeature<T>, ProjectionError> {
        let w = self.weights(f_v)?;
        let mut vector = match opts.top_k {
            Some(k) if k < self.len() => {
                if k == 0 {
                    return Err(ProjectionError::InvalidTopK { k, n: self.len() });
                }
                let order = ranked(&w);
                let dropped: f64 = order[k..].iter().map(|&i| w[i].as_f64()).sum();
                // exact = (1 - e) a + e b for unit anchors, so |exact - a'| <= 2e
                // once the kept weights are renormalized.
                if 2.0 * dropped <= TOP_K_TOLERANCE {
                    let kept = T::lit(1.0 - dropped);
                    let mut out = self.mix(&w, order[..k].iter().copied());
                    out.iter_mut().for_each(|x| *x /= kept);
                    out
                } else {
                    self.mix(&w, 0..self.len())
                }
            }
            Some(0) => return Err(ProjectionError::InvalidTopK { k: 0, n: self.len() }),
            _ => self.mix(&w, 0..self.len()),
        };
        if opts.post_normalize {
            vector = normalized(&vector).unwrap_or(vector);
        }
        Ok(FrameFeature { vector, modality: Modality::Projected, normalized: opts.post_normalize })
    }

    pub fn project_sequence(
        &self,
        v: &SequenceRepresentation<T>,
        opts: ProjectionOptions,
    ) -> Result<SequenceRepresentation<T>, ProjectionError> {
        if v.modality != Modality::Image {
            return Err(ProjectionError::WrongModality(v.modality));
        }
        let mut data = Vec::with_capacity(v.len() * self.dim());
        for i in 0..v.len() {
            data.extend(self.project_with(v.features.row(i), opts)?.vector);
        }
        Ok(SequenceRepresentation::new(Matrix::from_vec(v.len(), self.dim(), data), Modality::Projected))
    }

    /// The `top_k` heaviest anchors as `(provenance, weight)`, heaviest first.
    pub fn diagnostics(&self, f_v: &[T], top_k: usize) -> Result<Vec<(String, T)>, ProjectionError> {
        if top_k == 0 || top_k > self.len() {
            return Err(ProjectionError::InvalidTopK { k: top_k, n: self.len() });
        }
        let w = self.weights(f_v)?;
        Ok(ranked(&w)[..top_k].iter().map(|&i| (self.provenance[i].clone(), w[i])).collect())
    }

    pub fn save(&self, dir: &Path, fingerprint: Option<&str>) -> Result<(), ProjectionError> {
        let mut cache = FeatureCache::new(self.descriptor.clone(), self.dim());
        for r in 0..self.len() {
            cache.push(self.anchors.row(r))?;
        }
        cache.header.temperature = Some(self.temperature);
        cache.header.fingerprint = fingerprint.map(str::to_string);
        cache.write(&dir.join(MEMORY_FILE))?;
        let ppath = dir.join(PROVENANCE_FILE);
        let _ = std::fs::remove_file(&ppath);
        let mut w = JsonlAppender::open(&ppath)?;
        for (row, caption) in self.provenance.iter().enumerate() {
            w.append(&serde_json::json!({"row": row, "caption": caption}))?;
        }
        Ok(())
    }

    /// Returns the memory and the fingerprint stored in its header.
    pub fn load(dir: &Path) -> Result<(Self, Option<String>), ProjectionError> {
        let reader = FeatureCacheReader::open(&dir.join(MEMORY_FILE))?;
        let anchors = reader.read_matrix::<T>()?;
        let mut provenance = Vec::new();
        for (_, v) in read_jsonl_values(&dir.join(PROVENANCE_FILE))? {
            provenance.push(v.get("caption").and_then(|c| c.as_str()).unwrap_or_default().to_string());
        }
        let temperature = reader.header.temperature.unwrap_or(DEFAULT_TEMPERATURE);
        let memory = Self::from_anchors(anchors, provenance, temperature, reader.header.descriptor.clone())?;
        Ok((memory, reader.header.fingerprint))
    }
}

/// Indices sorted by descending weight, ties by ascending index.
fn ranked<T: Scalar>(w: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Encodes up to `max_size` distinct captions as memory anchors.
///
/// Captions are deduplicated after whitespace and case normalization. When
/// more distinct captions arrive than fit, a seeded reservoir sample is kept,
/// then restored to stream order.
pub fn build_memory<T, P, I, S>(
    captions: I,
    pair: &P,
    max_size: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<SupportMemory<T>, ProjectionError>
where
    T: Scalar,
    P: EncoderPair<T> + ?Sized,
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size == 0 {
        return Err(ProjectionError::ZeroCapacity);
    }
    if !(temperature > 0.0) {
        return Err(ProjectionError::NonPositiveTemperature(temperature));
    }
    let mut rng = rng_for(rng_seed, 0x3e3);
    let mut seen = HashSet::new();
    let mut reservoir: Vec<(usize, String)> = Vec::new();
    let mut distinct = 0usize;
    for c in captions {
        let c = c.as_ref();
        let key = normalize_caption(c);
        if key.is_empty() || !seen.insert(key) {
            continue;
        }
        if reservoir.len() < max_size {
            reservoir.push((distinct, c.trim().to_string()));
        } else {
            let j = rng.gen_range(0..=distinct);
            if j < max_size {
                reservoir[j] = (distinct, c.trim().to_string());
            }
        }
        distinct += 1;
    }
    if reservoir.is_empty() {
        return Err(ProjectionError::EmptyCaptionStream);
    }
    reservoir.sort_by_key(|(i, _)| *i);
    let d = pair.dimension();
    let mut data = Vec::with_capacity(reservoir.len() * d);
    for (_, c) in &reservoir {
        let v = pair.encode_text(c)?;
        if v.len() != d {
            return Err(ProjectionError::DimensionMismatch { expected: d, found: v.len() });
        }
        data.extend(v);
    }
    let anchors = Matrix::from_vec(reservoir.len(), d, data);
    let provenance = reservoir.into_iter().map(|(_, c)| c).collect();
    SupportMemory::from_anchors(anchors, provenance, temperature, pair.descriptor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual_encoder::{SyntheticEncoderSpec, SyntheticPair};
    use proptest::prelude::*;

    fn basis_memory(tau: f64) -> SupportMemory<f64> {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        SupportMemory::from_anchors(m, vec!["e1".into(), "e2".into()], tau, "test").unwrap()
    }

    /// Independent oracle: e / (e + 1) evaluated directly.
    fn logistic_oracle() -> (f64, f64) {
        let e = std::f64::consts::E;
        (e / (e + 1.0), 1.0 / (e + 1.0))
    }

    #[test]
    fn basis_example() {
        let (a, b) = logistic_oracle();
        assert!((a - 0.731_058_578_6).abs() < 1e-10);
        let mem = basis_memory(1.0);
        let out = mem.project(&[1.0, 0.0]).unwrap();
        assert!((out.vector[0] - a).abs() < 1e-12 && (out.vector[1] - b).abs() < 1e-12);
        assert_eq!(out.modality, Modality::Projected);
        let diag = mem.diagnostics(&[1.0, 0.0], 2).unwrap();
        assert_eq!(diag[0].0, "e1");
        assert!((diag[0].1 - a).abs() < 1e-12 && (diag[1].1 - b).abs() < 1e-12);
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let out = basis_memory(1e-6).project(&[1.0, 0.0]).unwrap();
        assert!((out.vector[0] - 1.0).abs() < 1e-9 && out.vector[1].abs() < 1e-9);
    }

    #[test]
    fn single_anchor_is_returned_exactly() {
        let m = Matrix::from_rows(&[vec![0.6, 0.8]]);
        let mem = SupportMemory::from_anchors(m, vec!["only".into()], 0.01, "t").unwrap();
        assert_eq!(mem.project(&[-1.0, 0.3]).unwrap().vector, vec![0.6, 0.8]);
        let d = mem.diagnostics(&[1.0, 0.0], 1).unwrap();
        assert_eq!(d, vec![("only".to_string(), 1.0)]);
    }

    #[test]
    fn equal_similarity_gives_uniform_weights() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.0, -1.0, 0.0]]);
        let mem = SupportMemory::from_anchors(m, (0..4).map(|i| i.to_string()).collect(), 0.5, "t").unwrap();
        let d = mem.diagnostics(&[0.0, 0.0, 1.0], 4).unwrap();
        let order: Vec<&str> = d.iter().map(|(p, _)| p.as_str()).collect();
        assert_eq!(order, ["0", "1", "2", "3"]);
        assert!(d.iter().all(|(_, w)| (*w - 0.25f64).abs() < 1e-15));
    }

    #[test]
    fn errors() {
        let mem = basis_memory(1.0);
        assert!(matches!(mem.project(&[1.0, 0.0, 0.0]), Err(ProjectionError::DimensionMismatch { .. })));
        assert!(matches!(basis_memory(1.0).with_temperature(0.0), Err(ProjectionError::NonPositiveTemperature(_))));
        assert!(matches!(mem.diagnostics(&[1.0, 0.0], 3), Err(ProjectionError::InvalidTopK { .. })));
    }

    fn pair() -> SyntheticPair {
        SyntheticPair::new(SyntheticEncoderSpec::with_orthogonal_gap(
            (0..20).map(|i| format!("item{i}")).collect(),
            32,
            2.0,
            0.0,
            9,
        ))
        .unwrap()
    }

    #[test]
    fn build_dedups_and_samples_deterministically() {
        let p = pair();
        let m: SupportMemory<f64> = build_memory(["a item1", "b item2", "c item3"], &p, 10, 0.01, 0).unwrap();
        assert_eq!(m.len(), 3);
        let m: SupportMemory<f64> =
            build_memory(["a item1", "A  item1", "b item2", "a item1 ", "c item3"], &p, 10, 0.01, 0).unwrap();
        assert_eq!(m.len(), 3);
        let many: Vec<String> = (0..1000).map(|i| format!("caption {i} with item{}", i % 20)).collect();
        let a: SupportMemory<f64> = build_memory(&many, &p, 100, 0.01, 5).unwrap();
        let b: SupportMemory<f64> = build_memory(&many, &p, 100, 0.01, 5).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert!(matches!(build_memory::<f64, _, _, &str>([], &p, 10, 0.01, 0), Err(ProjectionError::EmptyCaptionStream)));
    }

    #[test]
    fn save_load_round_trip() {
        let p = pair();
        let m: SupportMemory<f32> = build_memory(["x item1", "y item2"], &p, 10, 0.05, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), Some("abc")).unwrap();
        let (back, fp) = SupportMemory::<f32>::load(dir.path()).unwrap();
        assert_eq!(fp.as_deref(), Some("abc"));
        assert_eq!(back.provenance(), m.provenance());
        assert_eq!(back.temperature(), 0.05);
        assert_eq!(back.anchors(), m.anchors());
    }

    #[test]
    fn noise_free_projection_lands_on_the_concept_anchor() {
        let p = pair();
        let captions: Vec<String> = (0..20).map(|i| format!("someone holds item{i}")).collect();
        let mem: SupportMemory<f64> = build_memory(&captions, &p, 100, 0.01, 0).unwrap();
        let frames: Vec<_> = (0..10).map(|i| p.frame(i * 2, 0)).collect();
        let seq = crate::dual_encoder::encode_video_frames::<f64, _>(&frames, &p, 10).unwrap();
        let proj = mem.project_sequence(&seq, ProjectionOptions::default()).unwrap();
        for (i, _) in frames.iter().enumerate() {
            let row = proj.features.row(i);
            let nearest = (0..mem.len())
                .max_by(|&a, &b| dot(row, mem.anchors().row(a)).total_cmp(&dot(row, mem.anchors().row(b))))
                .unwrap();
            assert_eq!(nearest, i * 2);
        }
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64)> {
        (1usize..12, 2usize..8).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
                prop::collection::vec(-1.0f64..1.0, d),
                prop::sample::select(vec![1e-3, 0.01, 0.1, 1.0]),
            )
        })
    }

    fn memory_of(rows: &[Vec<f64>], tau: f64) -> Option<SupportMemory<f64>> {
        if rows.iter().any(|r| normalized(r).is_none()) {
            return None;
        }
        SupportMemory::from_anchors(Matrix::from_rows(rows), (0..rows.len()).map(|i| i.to_string()).collect(), tau, "p").ok()
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution((rows, q, tau) in arb_instance()) {
            prop_assume!(normalized(&q).is_some());
            let Some(mem) = memory_of(&rows, tau) else { return Ok(()) };
            let w = mem.weights(&q).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn output_is_in_the_convex_hull((rows, q, tau) in arb_instance(), l in prop::collection::vec(-1.0f64..1.0, 8)) {
            prop_assume!(normalized(&q).is_some());
            let Some(mem) = memory_of(&rows, tau) else { return Ok(()) };
            let out = mem.project(&q).unwrap().vector;
            let l = &l[..out.len()];
            let vals: Vec<f64> = (0..mem.len()).map(|i| dot(l, mem.anchors().row(i))).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = dot(l, &out);
            prop_assert!(v >= lo - 1e-7 && v <= hi + 1e-7);
        }

        #[test]
        fn anchor_order_does_not_matter((rows, q, tau) in arb_instance(), rot in 0usize..12) {
            prop_assume!(normalized(&q).is_some());
            let Some(mem) = memory_of(&rows, tau) else { return Ok(()) };
            let mut shuffled = rows.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let other = memory_of(&shuffled, tau).unwrap();
            let a = mem.project(&q).unwrap().vector;
            let b = other.project(&q).unwrap().vector;
            for (x, y) in a.iter().zip(&b) { prop_assert!((x - y).abs() < 1e-9); }
        }

        #[test]
        fn colder_is_never_more_uncertain((rows, q, _tau) in arb_instance()) {
            prop_assume!(normalized(&q).is_some());
            let taus = [2.0, 1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 1e-3];
            let mut last = f64::INFINITY;
            for tau in taus {
                let Some(mem) = memory_of(&rows, tau) else { return Ok(()) };
                let w = mem.weights(&q).unwrap();
                let h: f64 = w.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
                prop_assert!(h <= last + 1e-9, "entropy rose from {last} to {h} at tau {tau}");
                last = h;
            }
        }

        #[test]
        fn top_k_stays_within_tolerance((rows, q, tau) in arb_instance(), k in 1usize..12) {
            prop_assume!(normalized(&q).is_some());
            let Some(mem) = memory_of(&rows, tau) else { return Ok(()) };
            let exact = mem.project(&q).unwrap().vector;
            let approx = mem.project_with(&q, ProjectionOptions { top_k: Some(k), post_normalize: false }).unwrap().vector;
            for (x, y) in exact.iter().zip(&approx) { prop_assert!((x - y).abs() <= 1e-4); }
        }
    }
}
