//! Diversity and quality metrics over embedding sets, plus the statistics
//! used by the experiment harness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encoder::EncoderBackend;
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Relative threshold below which covariance eigenvalues count as zero.
pub const ZERO_EIGEN_REL: f64 = 1e-12;
/// Negative eigenvalues of the FID cross term down to this value are
/// treated as round-off and clipped.
pub const NEG_EIGEN_TOL: f64 = -1e-10;

/// `N` vectors of dimension `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::contract("embedding set is empty or zero-dimensional"));
        }
        if let Some(i) = vectors.iter().position(|v| v.len() != d) {
            return Err(Error::contract(format!("vector {i} has dimension {}, expected {d}", vectors[i].len())));
        }
        if let Some(i) = vectors.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::contract(format!("vector {i} has a non-finite entry")));
        }
        Ok(Self { vectors })
    }

    /// Embeds each image with the backend's image encoder.
    pub fn from_images(images: &[RasterImage], backend: &dyn EncoderBackend) -> Result<Self> {
        let vectors =
            images.iter().map(|im| Ok(backend.embed_image(im)?.embedding.as_slice().to_vec())).collect::<Result<_>>()?;
        Self::new(vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    fn mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.dim());
        for v in &self.vectors {
            mu += DVector::from_column_slice(v);
        }
        mu / self.len() as f64
    }

    /// Centered data as an `N × D` matrix.
    fn centered(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.vectors[i][j] - mu[j])
    }

    fn covariance(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.len() < 2 {
            return Err(Error::contract(format!("need at least 2 samples, got {}", self.len())));
        }
        let mu = self.mean();
        let x = self.centered(&mu);
        Ok((mu, x.transpose() * &x / (self.len() - 1) as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    /// Nonzero covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub n: usize,
    pub d: usize,
    /// `min(N − 1, D)`.
    pub k: usize,
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn embedding_stats(set: &EmbeddingSet) -> Result<EmbeddingStats> {
    let (n, d) = (set.len(), set.dim());
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 samples, got {n}")));
    }
    let mu = set.mean();
    let x = set.centered(&mu);
    // The nonzero spectrum of XᵀX/(N−1) equals that of XXᵀ/(N−1); take the
    // smaller side.
    let m = if n <= d { &x * x.transpose() } else { x.transpose() * &x } / (n - 1) as f64;
    let all = sorted_desc(SymmetricEigen::new(m).eigenvalues.iter().copied().collect());
    let max = all.first().copied().unwrap_or(0.0);
    let eigenvalues = all.into_iter().filter(|l| max > 0.0 && *l > ZERO_EIGEN_REL * max).collect();
    Ok(EmbeddingStats { mean: mu.iter().copied().collect(), eigenvalues, n, d, k: (n - 1).min(d) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub warnings: Vec<String>,
}

const HALF_LOG_2PIE: f64 = 1.418_938_533_204_672_7;

/// Truncated entropy from precomputed stats, with the effective `K` and
/// any degeneracy warning.
pub fn tie_from_stats(stats: &EmbeddingStats) -> Result<MetricReport> {
    if stats.eigenvalues.is_empty() {
        return Err(Error::Degenerate("all covariance eigenvalues are zero (identical samples)".into()));
    }
    let mut warnings = Vec::new();
    let k = stats.k.min(stats.eigenvalues.len());
    if k < stats.k {
        warnings.push(format!("only {k} nonzero eigenvalues of {} expected; K reduced to {k}", stats.k));
    }
    let value = k as f64 * HALF_LOG_2PIE + 0.5 * stats.eigenvalues[..k].iter().map(|l| l.ln()).sum::<f64>();
    Ok(MetricReport { metric: "tie".into(), value, n: stats.n, d: stats.d, k, warnings })
}

pub fn tie(set: &EmbeddingSet) -> Result<f64> {
    Ok(tie_from_stats(&embedding_stats(set)?)?.value)
}

pub fn tie_report(set: &EmbeddingSet) -> Result<MetricReport> {
    tie_from_stats(&embedding_stats(set)?)
}

/// `½ log det(2πeΣ)` for a full-rank covariance.
pub fn differential_entropy(stats: &EmbeddingStats) -> Result<f64> {
    if stats.eigenvalues.len() != stats.d {
        return Err(Error::contract(format!(
            "differential entropy needs a full-rank covariance: {} of {} eigenvalues are nonzero",
            stats.eigenvalues.len(),
            stats.d
        )));
    }
    Ok(stats.eigenvalues.iter().map(|l| HALF_LOG_2PIE + 0.5 * l.ln()).sum())
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

pub fn fid_report(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<MetricReport> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!("embedding dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let (mu_a, sa) = a.covariance()?;
    let (mu_b, sb) = b.covariance()?;
    // tr((Σa Σb)^½) = tr((Σa^½ Σb Σa^½)^½), the inner matrix being symmetric PSD.
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    let mut warnings = Vec::new();
    let mut cross = 0.0;
    for l in eig.iter() {
        if *l < NEG_EIGEN_TOL * scale {
            warnings.push(format!("clipped negative eigenvalue {l:e} in the cross term"));
        }
        cross += l.max(0.0).sqrt();
    }
    let dm = (mu_a - mu_b).norm_squared();
    let value = (dm + sa.trace() + sb.trace() - 2.0 * cross).max(0.0);
    Ok(MetricReport { metric: "fid".into(), value, n: a.len() + b.len(), d: a.dim(), k: a.dim(), warnings })
}

pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    Ok(fid_report(a, b)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract(format!("each sample needs at least 2 values, got {} and {}", a.len(), b.len())));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (qa, qb) = (va / a.len() as f64, vb / b.len() as f64);
    if qa + qb == 0.0 {
        return Err(Error::Degenerate("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p })
}

/// Holm–Bonferroni adjusted p-values, in input order.
pub fn holm_bonferroni(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}
