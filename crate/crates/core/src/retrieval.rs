//! Gallery ranking, recall and mAP, evaluation-time re-ranking, similarity
//! diagnostics and the patch-keeping corruption.

use std::fmt::Write as _;

use ndarray::{concatenate, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hral;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

/// Per-query gallery order plus relevance flags indexed by gallery row.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub order: Vec<Vec<usize>>,
    pub relevant: Vec<Vec<bool>>,
}

impl RankedResult {
    pub fn new(order: Vec<Vec<usize>>, relevant: Vec<Vec<bool>>) -> Self {
        Self { order, relevant }
    }

    /// Relevance from class labels: a gallery row is relevant when its label
    /// equals the query's.
    pub fn from_labels(order: Vec<Vec<usize>>, query_labels: &[usize], gallery_labels: &[usize]) -> Self {
        let relevant = query_labels.iter().map(|&q| gallery_labels.iter().map(|&g| g == q).collect()).collect();
        Self { order, relevant }
    }

    /// 1-based rank of the first relevant item of each query.
    pub fn first_hits(&self) -> Vec<Option<usize>> {
        self.order
            .iter()
            .zip(&self.relevant)
            .map(|(o, rel)| o.iter().position(|&g| rel[g]).map(|p| p + 1))
            .collect()
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

fn sqdist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Orders the gallery for every query: descending cosine similarity or
/// ascending Euclidean distance, ties broken by gallery index.
pub fn rank_gallery(queries: ArrayView2<f64>, gallery: ArrayView2<f64>, metric: Metric) -> Result<Vec<Vec<usize>>> {
    if gallery.nrows() == 0 {
        return Err(Error::Usage("cannot rank against an empty gallery".into()));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::shape("rank_gallery", &[queries.nrows(), queries.ncols()], &[gallery.nrows(), gallery.ncols()]));
    }
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| {
            let score: Vec<f64> = gallery
                .rows()
                .into_iter()
                .map(|g| match metric {
                    Metric::Cosine => -cosine(q, g),
                    Metric::Euclidean => sqdist(q, g),
                })
                .collect();
            let mut idx: Vec<usize> = (0..gallery.nrows()).collect();
            idx.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
            idx
        })
        .collect())
}

/// Percentage of queries with a relevant item within the first `k`.
pub fn recall_at_k(r: &RankedResult, k: usize) -> f64 {
    if r.order.is_empty() {
        return 0.0;
    }
    let hits = r.first_hits().iter().filter(|h| h.is_some_and(|rank| rank <= k)).count();
    100.0 * hits as f64 / r.order.len() as f64
}

/// Mean average precision in percent; queries without any relevant gallery
/// item are excluded.
pub fn mean_ap(r: &RankedResult) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (order, rel) in r.order.iter().zip(&r.relevant) {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &g) in order.iter().enumerate() {
            if rel[g] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        if hits == 0 {
            log::warn!("query without a relevant gallery item excluded from mAP");
            continue;
        }
        total += ap / hits as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        100.0 * total / counted as f64
    }
}

/// Refines the concatenated query and gallery features and ranks by
/// Euclidean distance between the refined rows.
pub fn offline_rerank(queries: ArrayView2<f64>, gallery: ArrayView2<f64>, k: usize, alpha: f64) -> Result<Vec<Vec<usize>>> {
    if gallery.nrows() == 0 {
        return Err(Error::Usage("cannot rank against an empty gallery".into()));
    }
    let all = concatenate(Axis(0), &[queries, gallery])
        .map_err(|_| Error::shape("offline_rerank", &[queries.nrows(), queries.ncols()], &[gallery.nrows(), gallery.ncols()]))?;
    let refined = hral::rerank(all.view(), k, alpha)?.refined;
    let nq = queries.nrows();
    rank_gallery(refined.slice(ndarray::s![..nq, ..]), refined.slice(ndarray::s![nq.., ..]), Metric::Euclidean)
}

/// Two-decimal `metric<TAB>value` table.
pub fn metrics_tsv(r: &RankedResult, ks: &[usize]) -> String {
    let mut out = String::from("metric\tvalue\n");
    for &k in ks {
        let _ = writeln!(out, "R@{k}\t{:.2}", recall_at_k(r, k));
    }
    let _ = writeln!(out, "mAP\t{:.2}", mean_ap(r));
    out
}

/// Retention ratio `R` (percent), patch count `P` and the placement seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeepPatchSpec {
    pub ratio: f64,
    pub patches: usize,
    pub seed: u64,
}

impl KeepPatchSpec {
    /// Square patch side `⌊√(H·W·R/(100·P))⌋`, capped at the shorter image side.
    pub fn side(&self, h: usize, w: usize) -> Result<usize> {
        if !(self.ratio > 0.0 && self.ratio <= 100.0) {
            return Err(Error::Config(format!("retention ratio {} outside (0, 100]", self.ratio)));
        }
        if self.patches == 0 {
            return Err(Error::Config("patch count must be positive".into()));
        }
        let side = ((h * w) as f64 * self.ratio / (100.0 * self.patches as f64)).sqrt().floor() as usize;
        if side < 1 {
            return Err(Error::Config(format!(
                "retention {}% is too small for {} patches on a {h}x{w} image",
                self.ratio, self.patches
            )));
        }
        Ok(side.min(h).min(w))
    }
}

/// Row-major `H×W` mask of the positions covered by the placed patches.
pub fn keep_mask(h: usize, w: usize, spec: &KeepPatchSpec) -> Result<Vec<bool>> {
    let s = spec.side(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![false; h * w];
    for _ in 0..spec.patches {
        let top = rng.random_range(0..=h - s);
        let left = rng.random_range(0..=w - s);
        for y in top..top + s {
            mask[y * w + left..y * w + left + s].fill(true);
        }
    }
    Ok(mask)
}

/// Zeroes everything outside `P` randomly placed square patches of a
/// `C×H×W` image.
pub fn random_keep_patches<T: Real>(img: &Tensor<T>, spec: &KeepPatchSpec) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("random_keep_patches", img.shape(), &[0, 0, 0]));
    };
    let mask = keep_mask(h, w, spec)?;
    let mut out = Tensor::zeros(&[c, h, w]);
    for (i, (o, &v)) in out.data_mut().iter_mut().zip(img.data()).enumerate() {
        if mask[i % (h * w)] {
            *o = v;
        }
    }
    Ok(out)
}

/// Cosine-similarity histograms over `[−1, 1]` for positive (same label)
/// and negative query–gallery pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub bins: usize,
    /// Normalized mass per bin.
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub positive_mean: f64,
    pub negative_mean: f64,
    /// Histogram intersection `Σ min(pos, neg)`.
    pub overlap: f64,
}

pub fn bin_index(v: f64, bins: usize) -> usize {
    let t = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
    t.min(bins - 1)
}

pub fn similarity_report(
    queries: ArrayView2<f64>,
    query_labels: &[usize],
    gallery: ArrayView2<f64>,
    gallery_labels: &[usize],
    bins: usize,
) -> Result<SimilarityReport> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if query_labels.len() != queries.nrows() || gallery_labels.len() != gallery.nrows() {
        return Err(Error::shape("similarity_report", &[queries.nrows(), gallery.nrows()], &[query_labels.len(), gallery_labels.len()]));
    }
    let mut pos = vec![0.0; bins];
    let mut neg = vec![0.0; bins];
    let (mut np, mut nn, mut sp, mut sn) = (0usize, 0usize, 0.0, 0.0);
    for (q, &ql) in queries.rows().into_iter().zip(query_labels) {
        for (g, &gl) in gallery.rows().into_iter().zip(gallery_labels) {
            let c = cosine(q, g);
            if ql == gl {
                pos[bin_index(c, bins)] += 1.0;
                np += 1;
                sp += c;
            } else {
                neg[bin_index(c, bins)] += 1.0;
                nn += 1;
                sn += c;
            }
        }
    }
    if np == 0 || nn == 0 {
        return Err(Error::Usage("similarity report needs both positive and negative pairs".into()));
    }
    pos.iter_mut().for_each(|v| *v /= np as f64);
    neg.iter_mut().for_each(|v| *v /= nn as f64);
    let overlap = pos.iter().zip(&neg).map(|(a, b)| a.min(*b)).sum();
    Ok(SimilarityReport {
        bins,
        positive: pos,
        negative: neg,
        positive_pairs: np,
        negative_pairs: nn,
        positive_mean: sp / np as f64,
        negative_mean: sn / nn as f64,
        overlap,
    })
}

impl SimilarityReport {
    /// One line per bin: lower edge, positive and negative mass.
    pub fn to_text(&self) -> String {
        let mut out = String::from("bin_start\tpositive\tnegative\n");
        let width = 2.0 / self.bins as f64;
        for (i, (p, n)) in self.positive.iter().zip(&self.negative).enumerate() {
            let _ = writeln!(out, "{:.3}\t{p:.4}\t{n:.4}", -1.0 + i as f64 * width);
        }
        let _ = writeln!(out, "# positive_mean\t{:.4}", self.positive_mean);
        let _ = writeln!(out, "# negative_mean\t{:.4}", self.negative_mean);
        let _ = writeln!(out, "# overlap\t{:.4}", self.overlap);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recall_and_map_examples() {
        // Hits at ranks 1, 2, 6, 1 among 6 gallery rows.
        let order: Vec<Vec<usize>> = vec![(0..6).collect(); 4];
        let rel = [0, 1, 5, 0]
            .iter()
            .map(|&hit| (0..6).map(|g| g == hit).collect())
            .collect();
        let r = RankedResult::new(order, rel);
        assert_eq!(recall_at_k(&r, 1), 50.0);
        assert_eq!(recall_at_k(&r, 5), 75.0);
        assert_eq!(recall_at_k(&r, 6), 100.0);

        let two = RankedResult::new(vec![vec![0, 1, 2]], vec![vec![true, false, true]]);
        assert!((mean_ap(&two) - 100.0 * 5.0 / 6.0).abs() < 1e-12);
        let second = RankedResult::new(vec![vec![0, 1]], vec![vec![false, true]]);
        assert_eq!(mean_ap(&second), 50.0);
    }

    #[test]
    fn ranking_examples() {
        let g = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let q = array![[2.0, 0.1]];
        assert_eq!(rank_gallery(q.view(), g.view(), Metric::Euclidean).unwrap(), vec![vec![0, 2, 1]]);
        assert_eq!(rank_gallery(q.view(), g.view(), Metric::Cosine).unwrap(), vec![vec![0, 2, 1]]);
        let empty = ndarray::Array2::<f64>::zeros((0, 2));
        assert!(matches!(rank_gallery(q.view(), empty.view(), Metric::Cosine), Err(Error::Usage(_))));
    }

    #[test]
    fn full_retention_is_identity() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f32);
        let spec = KeepPatchSpec { ratio: 100.0, patches: 1, seed: 9 };
        assert_eq!(random_keep_patches(&img, &spec).unwrap(), img);
        let tiny = KeepPatchSpec { ratio: 1.0, patches: 5, seed: 0 };
        assert!(matches!(tiny.side(8, 8), Err(Error::Config(_))));
    }

    #[test]
    fn histogram_extremes() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let r = similarity_report(q.view(), &[0, 1], q.view(), &[0, 1], 40).unwrap();
        assert_eq!(r.positive[39], 1.0);
        assert_eq!(r.negative[20], 1.0);
        assert_eq!(r.overlap, 0.0);
    }
}
