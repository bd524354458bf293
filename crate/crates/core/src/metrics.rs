//! Evaluation kernels: PSNR, Fréchet distance / FID over embeddings,
//! re-identification mAP and CMC, and detection accuracy before/after.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::Detector;
use crate::backends::BackendError;
use crate::manifold::{cosine_distance_raw, Embedding};
use crate::raster::Image;

/// Eigenvalues of a covariance product this far below zero are rounding
/// noise and clamp to 0; anything more negative is an error.
pub const EIGEN_CLAMP: f64 = 1e-10;
pub const DEFAULT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("matrix is not positive semidefinite (eigenvalue {0})")]
    NonPsd(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    /// MSE is exactly zero.
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("inf"),
            Psnr::Db(v) => write!(f, "{v:.4}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Identical => s.serialize_str("inf"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Identical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value {t:?}"))),
        }
    }
}

/// `10·log10(255² / MSE)` over all channels.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::InvalidArgument(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let sse: u64 = a
        .as_bytes()
        .iter()
        .zip(b.as_bytes())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(Psnr::Identical);
    }
    let mse = sse as f64 / a.as_bytes().len() as f64;
    Ok(Psnr::Db(10.0 * (255.0f64 * 255.0 / mse).log10()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if d == 0 {
            return Err(MetricsError::InvalidArgument("empty mean".into()));
        }
        if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
            return Err(MetricsError::InvalidArgument(format!("covariance must be {d}x{d}")));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
        Self::from_parts(DVector::from_vec(mean), cov)
    }

    pub fn from_parts(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(MetricsError::InvalidArgument(format!("covariance must be {d}x{d}")));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidArgument("non-finite moment".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-9 {
                    return Err(MetricsError::InvalidArgument(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    /// Sample mean and unbiased (1/(n−1)) covariance of the rows.
    pub fn from_samples(samples: &[&[f32]]) -> Result<Self, MetricsError> {
        if samples.len() < 2 {
            return Err(MetricsError::InvalidArgument(format!("need at least 2 samples, got {}", samples.len())));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(MetricsError::InvalidArgument("samples must share a non-zero dimension".into()));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j] as f64);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).apply(|v| *v -= m);
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::from_parts(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

fn clamped_eigenvalues(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_CLAMP {
                return Err(MetricsError::NonPsd(*v));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, with the trace of the root
/// taken as Σ√λ over the eigenvalues of `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn frechet_distance(p: &GaussianMoments, q: &GaussianMoments) -> Result<f64, MetricsError> {
    if p.dim() != q.dim() {
        return Err(MetricsError::InvalidArgument(format!("dimensions differ: {} vs {}", p.dim(), q.dim())));
    }
    let e1 = clamped_eigenvalues(&p.covariance)?;
    clamped_eigenvalues(&q.covariance)?;
    let root1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let inner = &root1 * &q.covariance * &root1;
    let cross = clamped_eigenvalues(&inner)?;
    let tr_root: f64 = cross.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = &p.mean - &q.mean;
    let d = diff.norm_squared() + p.covariance.trace() + q.covariance.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

pub fn fid(a: &[Embedding], b: &[Embedding]) -> Result<f64, MetricsError> {
    let p = GaussianMoments::from_samples(&rows(a))?;
    let q = GaussianMoments::from_samples(&rows(b))?;
    frechet_distance(&p, &q)
}

fn rows(s: &[Embedding]) -> Vec<&[f32]> {
    s.iter().map(|e| e.as_slice()).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReidInstance {
    pub query_embeddings: Vec<Embedding>,
    pub query_labels: Vec<String>,
    pub gallery_embeddings: Vec<Embedding>,
    pub gallery_labels: Vec<String>,
}

impl ReidInstance {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.query_embeddings.len() != self.query_labels.len()
            || self.gallery_embeddings.len() != self.gallery_labels.len()
        {
            return Err(MetricsError::Validation("embedding and label counts differ".into()));
        }
        if self.query_embeddings.is_empty() || self.gallery_embeddings.is_empty() {
            return Err(MetricsError::Validation("query and gallery must be non-empty".into()));
        }
        let dim = self.query_embeddings[0].dim();
        if self.query_embeddings.iter().chain(&self.gallery_embeddings).any(|e| e.dim() != dim) {
            return Err(MetricsError::Validation("embedding dimensions differ".into()));
        }
        if self.query_labels.iter().chain(&self.gallery_labels).any(|l| l.is_empty()) {
            return Err(MetricsError::Validation("empty label".into()));
        }
        for label in &self.query_labels {
            if !self.gallery_labels.contains(label) {
                return Err(MetricsError::Validation(format!("query label {label:?} has no gallery match")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidResult {
    /// Percent.
    pub map: f64,
    /// k → percent of queries with a correct match in the top k.
    pub rank_k: BTreeMap<usize, f64>,
}

/// Gallery ranked by descending cosine similarity, ties by gallery index.
/// AP averages precision at the rank of every correct gallery item.
pub fn reid_eval(instance: &ReidInstance, ks: &[usize]) -> Result<ReidResult, MetricsError> {
    instance.validate()?;
    if ks.contains(&0) {
        return Err(MetricsError::InvalidArgument("rank k must be >= 1".into()));
    }
    let nq = instance.query_embeddings.len();
    let mut ap_sum = 0.0;
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (q, label) in instance.query_embeddings.iter().zip(&instance.query_labels) {
        let mut scored: Vec<(f64, usize)> = instance
            .gallery_embeddings
            .iter()
            .enumerate()
            .map(|(i, g)| (cosine_distance_raw(q.as_slice(), g.as_slice()).expect("validated dims"), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevant: Vec<usize> = scored
            .iter()
            .enumerate()
            .filter(|(_, (_, i))| &instance.gallery_labels[*i] == label)
            .map(|(rank, _)| rank + 1)
            .collect();
        let ap: f64 = relevant.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / r as f64).sum::<f64>()
            / relevant.len() as f64;
        ap_sum += ap;
        for (k, count) in hits.iter_mut() {
            if relevant[0] <= *k {
                *count += 1;
            }
        }
    }
    Ok(ReidResult {
        map: 100.0 * ap_sum / nq as f64,
        rank_k: hits.into_iter().map(|(k, c)| (k, 100.0 * c as f64 / nq as f64)).collect(),
    })
}

/// Percent of images with at least one detection at or above `threshold`,
/// before and after.
pub fn detection_delta(
    before: &[Image],
    after: &[Image],
    detector: &dyn Detector,
    threshold: f64,
) -> Result<(f64, f64), MetricsError> {
    if before.is_empty() {
        return Err(MetricsError::InvalidArgument("no images".into()));
    }
    if before.len() != after.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "{} images before but {} after",
            before.len(),
            after.len()
        )));
    }
    let accuracy = |images: &[Image]| -> Result<f64, MetricsError> {
        let found: Vec<bool> = images
            .par_iter()
            .map(|img| Ok(detector.detect(img)?.iter().any(|d| d.objectness >= threshold)))
            .collect::<Result<_, BackendError>>()?;
        Ok(100.0 * found.iter().filter(|&&f| f).count() as f64 / images.len() as f64)
    };
    Ok((accuracy(before)?, accuracy(after)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub humans: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<Psnr>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub rank_k: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, humans: usize) -> Self {
        Self {
            dataset: dataset.into(),
            humans,
            accuracy_before: None,
            accuracy_after: None,
            psnr: None,
            fid: None,
            map: None,
            rank_k: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let pct = [self.accuracy_before, self.accuracy_after, self.map]
            .into_iter()
            .flatten()
            .chain(self.rank_k.values().copied());
        for v in pct {
            if !(0.0..=100.0).contains(&v) {
                return Err(MetricsError::Validation(format!("percentage {v} out of range")));
            }
        }
        let ranks: Vec<f64> = self.rank_k.values().copied().collect();
        if ranks.windows(2).any(|w| w[1] < w[0]) {
            return Err(MetricsError::Validation("rank-k accuracy decreases with k".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one header row and one value row.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, String)> = vec![
            ("Dataset".into(), self.dataset.clone()),
            ("Humans".into(), self.humans.to_string()),
        ];
        let f2 = |v: f64| format!("{v:.2}");
        if let Some(v) = self.accuracy_before {
            cols.push(("Acc. before".into(), f2(v)));
        }
        if let Some(v) = self.accuracy_after {
            cols.push(("Acc. after".into(), f2(v)));
        }
        if let Some(v) = self.psnr {
            cols.push(("PSNR".into(), v.to_string()));
        }
        if let Some(v) = self.fid {
            cols.push(("FID".into(), f2(v)));
        }
        if let Some(v) = self.map {
            cols.push(("mAP".into(), f2(v)));
        }
        for (k, v) in &self.rank_k {
            cols.push((format!("Rank{k}"), f2(*v)));
        }
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |pick: &dyn Fn(&(String, String)) -> &str| {
            cols.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{:>w$}", pick(c), w = w))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", row(&|c| &c.0), row(&|c| &c.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(7, 5, [100, 100, 100]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Identical);
        let b = Image::filled(7, 5, [101, 101, 101]).unwrap();
        assert!((psnr(&a, &b).unwrap().db() - 48.1308).abs() < 1e-3);
        assert!(psnr(&a, &Image::filled(5, 7, [0, 0, 0]).unwrap()).is_err());
        assert_eq!(serde_json::to_string(&Psnr::Identical).unwrap(), "\"inf\"");
    }

    #[test]
    fn frechet_closed_forms() {
        let z = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let p = GaussianMoments::new(vec![0.0, 0.0], z.clone()).unwrap();
        let q = GaussianMoments::new(vec![3.0, 4.0], z).unwrap();
        assert!((frechet_distance(&p, &q).unwrap() - 25.0).abs() < 1e-9);
        let a = GaussianMoments::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let b = GaussianMoments::new(vec![0.0], vec![vec![4.0]]).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let bad = GaussianMoments::new(vec![0.0], vec![vec![-1.0]]).unwrap();
        assert!(matches!(frechet_distance(&a, &bad), Err(MetricsError::NonPsd(_))));
    }

    #[test]
    fn fid_needs_two_samples() {
        assert!(fid(&[emb(&[1.0, 0.0])], &[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).is_err());
        let set = vec![emb(&[1.0, 0.0, 0.0]), emb(&[0.0, 1.0, 0.0]), emb(&[0.0, 0.0, 1.0])];
        let shuffled = vec![set[2].clone(), set[0].clone(), set[1].clone()];
        assert!(fid(&set, &shuffled).unwrap().abs() < 1e-6);
    }

    #[test]
    fn reid_hand_cases() {
        let one = ReidInstance {
            query_embeddings: vec![emb(&[1.0, 0.0])],
            query_labels: vec!["a".into()],
            gallery_embeddings: vec![emb(&[1.0, 0.1])],
            gallery_labels: vec!["a".into()],
        };
        let r = reid_eval(&one, &[1]).unwrap();
        assert_eq!((r.map, r.rank_k[&1]), (100.0, 100.0));

        let two = ReidInstance {
            query_embeddings: vec![emb(&[1.0, 0.0])],
            query_labels: vec!["a".into()],
            gallery_embeddings: vec![emb(&[1.0, 0.05]), emb(&[0.0, 1.0])],
            gallery_labels: vec!["b".into(), "a".into()],
        };
        let r = reid_eval(&two, &[1, 2]).unwrap();
        assert_eq!(r.rank_k[&1], 0.0);
        assert_eq!(r.rank_k[&2], 100.0);
        assert!((r.map - 50.0).abs() < 1e-12);

        let missing = ReidInstance { query_labels: vec!["zzz".into()], ..two };
        let err = reid_eval(&missing, &[1]).unwrap_err().to_string();
        assert!(err.contains("zzz"));
    }

    #[test]
    fn report_table_and_json() {
        let mut r = EvalReport::new("synthetic", 50);
        r.accuracy_before = Some(100.0);
        r.accuracy_after = Some(0.0);
        r.psnr = Some(Psnr::Identical);
        r.rank_k = [(1, 40.0), (5, 80.0)].into_iter().collect();
        r.validate().unwrap();
        let table = r.to_table();
        assert!(table.contains("Acc. before") && table.contains("inf"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        r.rank_k.insert(10, 10.0);
        assert!(r.validate().is_err());
    }
}
