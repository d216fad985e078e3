//! Sparse TF-IDF vectors and a truncated latent space over a run-local corpus.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};

/// Sparse term → weight map. Weights are non-negative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextVector(pub BTreeMap<String, f64>);

impl TextVector {
    pub fn norm(&self) -> f64 {
        self.0.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.values().all(|&w| w == 0.0)
    }

    pub fn dot(&self, other: &TextVector) -> f64 {
        // iterate the smaller map; keys come out sorted either way, so the
        // summation order does not depend on argument order
        let (small, large) = if self.0.len() <= other.0.len() { (self, other) } else { (other, self) };
        let mut keys: Vec<&String> = small.0.keys().filter(|k| large.0.contains_key(*k)).collect();
        keys.sort();
        keys.into_iter().map(|k| self.0[k] * other.0[k]).sum()
    }

    /// Cosine similarity clamped to `[0, 1]`; 0 when either vector is zero.
    pub fn cosine(&self, other: &TextVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (self.dot(other) / denom).clamp(0.0, 1.0)
    }
}

/// Smoothed inverse document frequencies fitted on a token corpus:
/// `idf(t) = ln((1 + n) / (1 + df(t))) + 1`.
#[derive(Debug, Clone)]
pub struct TfIdf {
    idf: BTreeMap<String, f64>,
    docs: usize,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(corpus: &[Vec<S>]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let uniq: BTreeSet<&str> = doc.iter().map(AsRef::as_ref).collect();
            for t in uniq {
                *df.entry(t.to_owned()).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let idf = df
            .into_iter()
            .map(|(t, d)| {
                let w = ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0;
                (t, w)
            })
            .collect();
        Self { idf, docs: corpus.len() }
    }

    pub fn corpus_size(&self) -> usize {
        self.docs
    }

    /// Raw term counts weighted by idf. Terms unseen during fitting get the
    /// idf of a term with document frequency 0.
    pub fn vectorize<S: AsRef<str>>(&self, tokens: &[S]) -> TextVector {
        let unseen = (1.0 + self.docs as f64).ln() + 1.0;
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t.as_ref().to_owned()).or_default() += 1.0;
        }
        for (t, w) in tf.iter_mut() {
            *w *= self.idf.get(t).copied().unwrap_or(unseen);
        }
        TextVector(tf)
    }
}

/// Rank-k latent space spanned by the leading left singular vectors of a
/// term × document matrix.
///
/// The decomposition goes through the document Gram matrix `DᵀD = V Λ Vᵀ`,
/// so that `u_i = D v_i / sqrt(λ_i)` without forming the (usually much
/// larger) term side.
pub struct LatentSpace {
    terms: BTreeMap<String, usize>,
    /// Columns are the left singular vectors `u_i`.
    basis: DMatrix<f64>,
}

impl LatentSpace {
    /// `k = min(max_rank, docs - 1)`, at least 1, further limited to the
    /// number of non-negligible singular values.
    pub fn fit(docs: &[TextVector], max_rank: usize) -> Self {
        let mut terms = BTreeMap::new();
        for d in docs {
            for t in d.0.keys() {
                let next = terms.len();
                terms.entry(t.clone()).or_insert(next);
            }
        }
        // stable term order
        for (i, v) in terms.values_mut().enumerate() {
            *v = i;
        }
        let m = docs.len();
        let mut d = DMatrix::<f64>::zeros(terms.len(), m);
        for (j, doc) in docs.iter().enumerate() {
            for (t, w) in &doc.0 {
                d[(terms[t], j)] = *w;
            }
        }
        let k = max_rank.min(m.saturating_sub(1)).max(1);
        if m == 0 || terms.is_empty() {
            return Self {
                terms,
                basis: DMatrix::zeros(0, 0),
            };
        }
        let gram = d.transpose() * &d;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let keep: Vec<usize> = order
            .into_iter()
            .filter(|&i| eig.eigenvalues[i] > top * 1e-12 && eig.eigenvalues[i] > 0.0)
            .take(k)
            .collect();
        let mut basis = DMatrix::<f64>::zeros(terms.len(), keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let u = &d * eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt();
            basis.set_column(c, &u);
        }
        Self { terms, basis }
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Coordinates of `v` in the latent basis (`U_kᵀ v`). Terms outside the
    /// fitted vocabulary are ignored.
    pub fn project(&self, v: &TextVector) -> Vec<f64> {
        (0..self.rank())
            .map(|c| {
                v.0.iter()
                    .filter_map(|(t, w)| self.terms.get(t).map(|&r| self.basis[(r, c)] * w))
                    .sum()
            })
            .collect()
    }
}

/// Dense cosine clamped to `[0, 1]`; 0 when either vector is zero.
pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}
