//! Retrieval evaluation: feature extraction, squared-L2 distances, CMC and mAP.
//!
//! Gallery items are ranked per query by ascending distance; equal distances
//! keep gallery order. A query with no matching gallery item is excluded from
//! every mean and counted in [`RetrievalReport::excluded_queries`].

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::NetworkParams;
use crate::real::Real;

/// Feature rows with their identity labels and optional camera ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
    cameras: Vec<Option<u16>>,
}

impl FeatureSet {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u32>, cameras: Vec<Option<u16>>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() || cameras.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} values, {} labels and {} cameras do not form rows of width {dim}",
                features.len(),
                labels.len(),
                cameras.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("features must be finite".into()));
        }
        Ok(Self {
            dim,
            features,
            labels,
            cameras,
        })
    }

    /// Feature set without cameras.
    pub fn from_rows(dim: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let n = labels.len();
        Self::new(dim, features, labels, vec![None; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn cameras(&self) -> &[Option<u16>] {
        &self.cameras
    }
}

/// Extracts pooled backbone features in eval mode, `batch_size` samples at a
/// time. With `flip_fusion` each row is `F(x) + F(mirror(x))`.
pub fn extract_features<T: Real>(
    params: &NetworkParams<T>,
    dataset: &Dataset,
    flip_fusion: bool,
    batch_size: usize,
) -> Result<FeatureSet> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let dim = params.feature_dim();
    let mut features = Vec::with_capacity(dataset.len() * dim);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let x = dataset.batch::<T>(chunk);
        let f = params.features(&x)?;
        if flip_fusion {
            let g = params.features(&x.flip_last_axis())?;
            features.extend(f.data().iter().zip(g.data()).map(|(&a, &b)| (a + b).as_f64()));
        } else {
            features.extend(f.data().iter().map(|v| v.as_f64()));
        }
    }
    FeatureSet::new(dim, features, dataset.labels().to_vec(), dataset.cameras().to_vec())
}

/// Row-major `rows × cols` matrix of squared distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `s[i][j] = ‖q_i‖² + ‖g_j‖² − 2 q_i·g_j`, clamped at zero.
pub fn distance_matrix(query: &FeatureSet, gallery: &FeatureSet) -> Result<DistanceMatrix> {
    if query.dim != gallery.dim {
        return Err(Error::Shape(format!(
            "query dimension {} differs from gallery dimension {}",
            query.dim, gallery.dim
        )));
    }
    let (m, n, d) = (query.len(), gallery.len(), query.dim);
    let mut data = vec![0.0; m * n];
    if m > 0 && n > 0 {
        // q · gᵀ, reading the gallery rows as a column-major d×n matrix.
        f64::gemm(
            m,
            d,
            n,
            -2.0,
            &query.features,
            (d as isize, 1),
            &gallery.features,
            (1, d as isize),
            0.0,
            &mut data,
            (n as isize, 1),
        );
    }
    let sq = |f: &FeatureSet, i: usize| f.row(i).iter().map(|v| v * v).sum::<f64>();
    let qn: Vec<f64> = (0..m).map(|i| sq(query, i)).collect();
    let gn: Vec<f64> = (0..n).map(|j| sq(gallery, j)).collect();
    for i in 0..m {
        for j in 0..n {
            let v = &mut data[i * n + j];
            *v = (qn[i] + gn[j] + *v).max(0.0);
        }
    }
    Ok(DistanceMatrix { rows: m, cols: n, data })
}

/// Gallery indices sorted by ascending distance, ties kept in gallery order.
pub fn rank_gallery(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
}

/// Zero-based ranks of the matching items of one query, with `skip(j)`
/// gallery entries removed from the list before ranking.
fn hit_ranks(row: &[f64], label: u32, gallery_labels: &[u32], skip: impl Fn(usize) -> bool) -> Vec<usize> {
    rank_gallery(row)
        .into_iter()
        .filter(|&j| !skip(j))
        .enumerate()
        .filter(|&(_, j)| gallery_labels[j] == label)
        .map(|(r, _)| r)
        .collect()
}

/// Average precision from zero-based hit ranks: `(1/R) Σ_k k/(rank_k + 1)`.
pub fn average_precision(hits: &[usize]) -> Option<f64> {
    if hits.is_empty() {
        return None;
    }
    let sum: f64 = hits.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / (r + 1) as f64).sum();
    Some(sum / hits.len() as f64)
}

fn check_labels(dist: &DistanceMatrix, ql: &[u32], gl: &[u32]) -> Result<()> {
    if dist.rows != ql.len() || dist.cols != gl.len() || dist.data.len() != dist.rows * dist.cols {
        return Err(Error::Shape(format!(
            "distance matrix {}×{} does not match {} query and {} gallery labels",
            dist.rows,
            dist.cols,
            ql.len(),
            gl.len()
        )));
    }
    Ok(())
}

/// Evaluation options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Protocol {
    /// Drop gallery items sharing both identity and camera with the query.
    /// Has no effect when cameras are absent.
    pub exclude_same_camera: bool,
}

/// Full evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub distances: DistanceMatrix,
    /// `cmc[k-1]` is CMC(k) for k = 1..=gallery size.
    pub cmc: Vec<f64>,
    /// AP per query; `None` for excluded queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub map: f64,
    pub valid_queries: usize,
    pub excluded_queries: usize,
}

impl RetrievalReport {
    /// CMC at rank `k` (1-based); ranks beyond the gallery saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "mAP,rank-1,rank-5,rank-10\n{:.6},{:.6},{:.6},{:.6}\n",
            self.map,
            self.rank(1),
            self.rank(5),
            self.rank(10)
        )
    }

    pub fn per_query_csv(&self, query_labels: &[u32]) -> String {
        let mut s = String::from("query,label,ap\n");
        for (i, ap) in self.per_query_ap.iter().enumerate() {
            let label = query_labels.get(i).map_or(String::new(), |l| l.to_string());
            match ap {
                Some(v) => writeln!(s, "{i},{label},{v:.6}"),
                None => writeln!(s, "{i},{label},"),
            }
            .expect("write to string");
        }
        s
    }
}

fn evaluate_dist(
    dist: DistanceMatrix,
    ql: &[u32],
    gl: &[u32],
    skip: impl Fn(usize, usize) -> bool,
) -> Result<RetrievalReport> {
    check_labels(&dist, ql, gl)?;
    if dist.cols == 0 {
        return Err(Error::Data("gallery is empty".into()));
    }
    let mut first_hits = vec![0usize; dist.cols];
    let mut per_query_ap = Vec::with_capacity(dist.rows);
    let mut valid = 0;
    for (i, &label) in ql.iter().enumerate() {
        let hits = hit_ranks(dist.row(i), label, gl, |j| skip(i, j));
        if let Some(&first) = hits.first() {
            first_hits[first] += 1;
            valid += 1;
        }
        per_query_ap.push(average_precision(&hits));
    }
    if valid == 0 {
        return Err(Error::Data("no query has a matching gallery item".into()));
    }
    let mut cmc = Vec::with_capacity(dist.cols);
    let mut acc = 0;
    for c in first_hits {
        acc += c;
        cmc.push(acc as f64 / valid as f64);
    }
    let map = per_query_ap.iter().flatten().sum::<f64>() / valid as f64;
    Ok(RetrievalReport {
        distances: dist,
        cmc,
        per_query_ap,
        map,
        valid_queries: valid,
        excluded_queries: ql.len() - valid,
    })
}

/// CMC values at the requested 1-based `ranks`.
pub fn cmc(dist: &DistanceMatrix, query_labels: &[u32], gallery_labels: &[u32], ranks: &[usize]) -> Result<Vec<f64>> {
    if ranks.contains(&0) {
        return Err(Error::Validation("ranks are 1-based".into()));
    }
    let r = evaluate_dist(dist.clone(), query_labels, gallery_labels, |_, _| false)?;
    Ok(ranks.iter().map(|&k| r.rank(k)).collect())
}

/// Per-query AP (`None` when excluded) and their mean over valid queries.
pub fn mean_ap(dist: &DistanceMatrix, query_labels: &[u32], gallery_labels: &[u32]) -> Result<(Vec<Option<f64>>, f64)> {
    let r = evaluate_dist(dist.clone(), query_labels, gallery_labels, |_, _| false)?;
    Ok((r.per_query_ap, r.map))
}

/// Distances, CMC and mAP of `query` against `gallery`.
pub fn evaluate(query: &FeatureSet, gallery: &FeatureSet, protocol: Protocol) -> Result<RetrievalReport> {
    let dist = distance_matrix(query, gallery)?;
    evaluate_dist(dist, &query.labels, &gallery.labels, |i, j| {
        protocol.exclude_same_camera
            && query.labels[i] == gallery.labels[j]
            && query.cameras[i].is_some()
            && query.cameras[i] == gallery.cameras[j]
    })
}

/// Extracts features for both splits and evaluates them.
pub fn evaluate_datasets<T: Real>(
    params: &NetworkParams<T>,
    query: &Dataset,
    gallery: &Dataset,
    flip_fusion: bool,
    protocol: Protocol,
) -> Result<RetrievalReport> {
    let q = extract_features(params, query, flip_fusion, 64)?;
    let g = extract_features(params, gallery, flip_fusion, 64)?;
    evaluate(&q, &g, protocol)
}
