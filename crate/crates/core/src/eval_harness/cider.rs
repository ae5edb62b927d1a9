//! Consensus n-gram captioning metric (CIDEr-D variant: clipped n-gram
//! counts and a Gaussian length penalty, scaled by 10).

use std::collections::HashMap;

use regex::Regex;
use std::sync::OnceLock;

/// Corpus-level caption scorer.
pub trait CorpusScorer {
    fn name(&self) -> &str;
    /// Returns the corpus score and one score per item.
    fn score(&self, candidates: &[String], references: &[Vec<String>]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderD {
    pub max_n: usize,
    pub sigma: f64,
}

impl Default for CiderD {
    fn default() -> Self {
        Self { max_n: 4, sigma: 6.0 }
    }
}

fn words(s: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\w+").expect("valid regex"));
    re.find_iter(&s.to_lowercase()).map(|m| m.as_str().to_string()).collect()
}

type Counts = HashMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

struct TfIdf {
    vecs: Vec<Counts>,
    norms: Vec<f64>,
    len: f64,
}

impl CiderD {
    fn tfidf(&self, tokens: &[String], df: &HashMap<Vec<String>, f64>, log_n: f64) -> TfIdf {
        let mut vecs = Vec::with_capacity(self.max_n);
        let mut norms = Vec::with_capacity(self.max_n);
        for n in 1..=self.max_n {
            let mut v = ngram_counts(tokens, n);
            let mut sq = 0.0;
            for (g, tf) in v.iter_mut() {
                let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
                *tf *= log_n - d;
                sq += *tf * *tf;
            }
            vecs.push(v);
            norms.push(sq.sqrt());
        }
        TfIdf { vecs, norms, len: tokens.len() as f64 }
    }

    fn sim(&self, hyp: &TfIdf, r: &TfIdf) -> f64 {
        let delta = hyp.len - r.len;
        let mut total = 0.0;
        for n in 0..self.max_n {
            let mut val = 0.0;
            for (g, &h) in &hyp.vecs[n] {
                if let Some(&rv) = r.vecs[n].get(g) {
                    val += h.min(rv) * rv;
                }
            }
            if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= hyp.norms[n] * r.norms[n];
            }
            total += val * (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        }
        total / self.max_n as f64
    }
}

impl CorpusScorer for CiderD {
    fn name(&self) -> &str {
        "cider_d"
    }

    fn score(&self, candidates: &[String], references: &[Vec<String>]) -> (f64, Vec<f64>) {
        assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
        if candidates.is_empty() {
            return (0.0, Vec::new());
        }
        let refs: Vec<Vec<Vec<String>>> = references.iter().map(|rs| rs.iter().map(|r| words(r)).collect()).collect();
        // document frequency: number of items whose references contain the n-gram
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for item in &refs {
            let mut seen: std::collections::HashSet<Vec<String>> = Default::default();
            for r in item {
                for n in 1..=self.max_n {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let log_n = (candidates.len() as f64).ln();
        let per_item: Vec<f64> = candidates
            .iter()
            .zip(&refs)
            .map(|(c, rs)| {
                let hyp = self.tfidf(&words(c), &df, log_n);
                if rs.is_empty() {
                    return 0.0;
                }
                let s: f64 = rs.iter().map(|r| self.sim(&hyp, &self.tfidf(r, &df, log_n))).sum();
                10.0 * s / rs.len() as f64
            })
            .collect();
        let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
        (mean, per_item)
    }
}
