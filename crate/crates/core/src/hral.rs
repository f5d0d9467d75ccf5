//! Re-ranking refinement and the training objectives built on it.
//!
//! The refinement pipeline runs in `f64` on detached features: squared
//! distances, column max-normalization, top-k lists (self first, ties by
//! index), k-reciprocal sets with the 2/3-overlap expansion, a Gaussian
//! affinity over each set, query-expansion smoothing and a residual
//! diffusion step. The refined matrix is then used as a fixed target by the
//! alignment losses, which live on the tape.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Stabilizer in the affinity denominator.
pub const AFFINITY_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

/// Coefficients of the combined objective and the refinement settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub k: usize,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.6,
            lambda2: 0.54,
            alpha: 0.7,
            k: 15,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        Ok(())
    }
}

pub fn to_array(t: &Tensor<impl Real>) -> Result<Array2<f64>> {
    let &[n, m] = t.shape() else {
        return Err(Error::shape("to_array", t.shape(), &[0, 0]));
    };
    Ok(Array2::from_shape_vec((n, m), t.to_f64_vec()).expect("shape checked"))
}

pub fn from_array<T: Real>(a: &Array2<f64>) -> Tensor<T> {
    let (n, m) = a.dim();
    Tensor::new(&[n, m], a.iter().map(|&v| T::lit(v)).collect()).expect("non-empty matrix")
}

/// `D_ij = ‖F_i‖² + ‖F_j‖² − 2F_iᵀF_j`, clamped at zero.
pub fn pairwise_sqdist(f: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::Validation(format!("pairwise distances need at least 2 rows, got {n}")));
    }
    let sq: Vec<f64> = f.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = f.dot(&f.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Divides every column by its maximum; all-zero columns are left as is.
pub fn column_normalize(d: &Array2<f64>) -> Array2<f64> {
    let mut out = d.clone();
    for mut col in out.columns_mut() {
        let mx = col.iter().fold(0.0f64, |a, &b| a.max(b));
        if mx > 0.0 {
            col.mapv_inplace(|v| v / mx);
        }
    }
    out
}

fn clamp_k(k: usize, n: usize) -> usize {
    if k > n {
        log::warn!("neighbor count {k} exceeds {n} samples, clamping");
        n
    } else {
        k
    }
}

/// Top-k list of every row: the row itself first, then ascending distance
/// with ties broken by index.
pub fn rank_lists(dn: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = dn.nrows();
    let k = clamp_k(k, n);
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dn[[i, a]].total_cmp(&dn[[i, b]]).then(a.cmp(&b)));
            std::iter::once(i).chain(others).take(k).collect()
        })
        .collect()
}

/// Mutual top-k sets, expanded by every member whose own set overlaps the
/// original by more than two thirds. Each set is sorted by index.
pub fn k_reciprocal_sets(ranks: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = ranks.len();
    let base: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut r: Vec<usize> = ranks[i].iter().copied().filter(|&j| ranks[j].contains(&i)).collect();
            r.sort_unstable();
            r
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut expanded = base[i].clone();
            for &j in &base[i] {
                let overlap = base[j].iter().filter(|v| base[i].contains(v)).count();
                if 3 * overlap > 2 * base[j].len() {
                    expanded.extend_from_slice(&base[j]);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            expanded
        })
        .collect()
}

/// `V_ij = exp(−D̃_ij) / (Σ_{v∈R(i)} exp(−D̃_iv) + eps)` on `R(i)`, zero elsewhere.
pub fn gaussian_affinity(dn: &Array2<f64>, sets: &[Vec<usize>], eps: f64) -> Array2<f64> {
    let n = dn.nrows();
    let mut v = Array2::zeros((n, n));
    for (i, set) in sets.iter().enumerate() {
        let denom: f64 = set.iter().map(|&j| (-dn[[i, j]]).exp()).sum::<f64>() + eps;
        for &j in set {
            v[[i, j]] = (-dn[[i, j]]).exp() / denom;
        }
    }
    v
}

/// Replaces row `i` by the mean of the rows listed in `ranks[i]`.
pub fn qe_smooth(v: &Array2<f64>, ranks: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros(v.dim());
    for (i, list) in ranks.iter().enumerate() {
        let mut row = out.row_mut(i);
        for &j in list {
            row += &v.row(j);
        }
        row /= list.len() as f64;
    }
    out
}

/// `Norm(αF + (1−α)VF)`; returns the matrix and the number of zero rows.
pub fn refine_features(f: ArrayView2<f64>, v: &Array2<f64>, alpha: f64) -> (Array2<f64>, usize) {
    let mut out = f.to_owned() * alpha + v.dot(&f) * (1.0 - alpha);
    let mut zero_rows = 0;
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > NORM_EPS {
            row /= norm;
        } else {
            row.fill(0.0);
            zero_rows += 1;
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} refined rows have zero norm and were left at zero");
    }
    (out, zero_rows)
}

/// Every intermediate of one refinement.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub dist: Array2<f64>,
    pub dist_norm: Array2<f64>,
    pub ranks: Vec<Vec<usize>>,
    pub sets: Vec<Vec<usize>>,
    pub affinity: Array2<f64>,
    pub smoothed: Array2<f64>,
    pub refined: Array2<f64>,
}

pub fn rerank(f: ArrayView2<f64>, k: usize, alpha: f64) -> Result<Neighborhood> {
    let dist = pairwise_sqdist(f)?;
    let dist_norm = column_normalize(&dist);
    let ranks = rank_lists(&dist_norm, k);
    let sets = k_reciprocal_sets(&ranks);
    let affinity = gaussian_affinity(&dist_norm, &sets, AFFINITY_EPS);
    let smoothed = qe_smooth(&affinity, &ranks);
    let (refined, _) = refine_features(f, &smoothed, alpha);
    Ok(Neighborhood {
        dist,
        dist_norm,
        ranks,
        sets,
        affinity,
        smoothed,
        refined,
    })
}

// ---- tape losses ----

fn row_cosines<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let na = tape.l2_normalize_rows(a, T::lit(NORM_EPS))?;
    let nb = tape.l2_normalize_rows(b, T::lit(NORM_EPS))?;
    let p = tape.mul(na, nb)?;
    Ok(tape.sum_last(p))
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Mean of `1 − cos` over row pairs; pairs with a zero-norm row are skipped.
pub fn cosine_embedding_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("cosine_embedding_loss", &sa, &sb));
    }
    let m = sa[1];
    let nonzero = |t: &Tensor<T>| -> Vec<bool> {
        t.data().chunks(m).map(|r| r.iter().any(|v| *v != T::zero())).collect()
    };
    let mask: Vec<bool> = nonzero(tape.value(a)).into_iter().zip(nonzero(tape.value(b))).map(|(x, y)| x && y).collect();
    let valid = mask.iter().filter(|&&v| v).count();
    if valid < mask.len() {
        log::warn!("{} pairs with a zero-norm row skipped in the cosine loss", mask.len() - valid);
    }
    if valid == 0 {
        return Ok(zero(tape));
    }
    let cos = row_cosines(tape, a, b)?;
    let weights = Tensor::new(&[mask.len()], mask.iter().map(|&v| if v { T::one() } else { T::zero() }).collect())?;
    let w = tape.constant(weights);
    let masked = tape.mul(cos, w)?;
    let total = tape.sum(masked);
    let mean = tape.scale(total, -T::one() / T::lit(valid as f64));
    Ok(tape.add_scalar(mean, T::one()))
}

/// Mean cross-entropy of `B×K` logits against integer labels.
pub fn classification_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("classification_loss", &s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Usage(format!("label {bad} outside {} classes", s[1])));
    }
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.gather_cols(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

/// `1 − mean cos(f_i, f̂_i) + KL(p(f̂ₙ·f̂ᵀ) ‖ p(f̂·f̂ᵀ))` for one block of
/// rows, where `fₙ` is the row-normalized feature and `p` a row softmax.
fn alignment_part<T: Real>(tape: &mut Tape<T>, f: Var, target: &Array2<f64>) -> Result<Var> {
    let n = target.nrows();
    let tgt = tape.constant(from_array(target));
    let cos = row_cosines(tape, f, tgt)?;
    let mean_cos = tape.mean(cos);
    let l_cos = tape.scale(mean_cos, -T::one());
    let l_cos = tape.add_scalar(l_cos, T::one());

    let fnorm = tape.l2_normalize_rows(f, T::lit(NORM_EPS))?;
    let tgt_t = tape.constant(from_array(&target.t().to_owned()));
    let sim = tape.matmul(fnorm, tgt_t)?;
    let log_p = tape.log_softmax_rows(sim)?;
    let p = tape.softmax_rows(sim)?;
    let ref_sim = target.dot(&target.t());
    let ref_log_q = log_softmax_array(&ref_sim);
    let log_q = tape.constant(from_array(&ref_log_q));
    let diff = tape.sub(log_p, log_q)?;
    let kl = tape.mul(p, diff)?;
    let kl = tape.sum(kl);
    let kl = tape.scale(kl, T::one() / T::lit(n as f64));
    tape.add(l_cos, kl)
}

fn log_softmax_array(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Query and gallery alignment of `f` (`N×O`, first `bq` rows are queries)
/// against the refined target; the target carries no gradient.
pub fn batch_alignment_loss<T: Real>(tape: &mut Tape<T>, f: Var, refined: &Array2<f64>, bq: usize) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 2 || s[0] != refined.nrows() || s[1] != refined.ncols() {
        return Err(Error::shape("batch_alignment_loss", &s, &[refined.nrows(), refined.ncols()]));
    }
    if bq == 0 || bq >= s[0] {
        return Err(Error::Usage(format!("query count {bq} must split {} rows", s[0])));
    }
    let q = tape.slice_rows(f, 0, bq)?;
    let g = tape.slice_rows(f, bq, s[0])?;
    let lq = alignment_part(tape, q, &refined.slice(s![..bq, ..]).to_owned())?;
    let lg = alignment_part(tape, g, &refined.slice(s![bq.., ..]).to_owned())?;
    tape.add(lq, lg)
}

/// Symmetric InfoNCE over diagonal positives of normalized `q·gᵀ/τ`.
pub fn infonce_loss<T: Real>(tape: &mut Tape<T>, q: Var, g: Var, tau: f64) -> Result<Var> {
    let (sq, sg) = (tape.shape(q).to_vec(), tape.shape(g).to_vec());
    if sq.len() != 2 || sg.len() != 2 || sq[1] != sg[1] {
        return Err(Error::shape("infonce_loss", &sq, &sg));
    }
    if sq[0] != sg[0] {
        return Err(Error::Usage(format!("InfoNCE needs paired batches, got {} queries and {} gallery rows", sq[0], sg[0])));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let b = sq[0];
    let labels: Vec<usize> = (0..b).collect();
    let qn = tape.l2_normalize_rows(q, T::lit(NORM_EPS))?;
    let gn = tape.l2_normalize_rows(g, T::lit(NORM_EPS))?;
    let gt = tape.permute(gn, &[1, 0])?;
    let logits = tape.matmul(qn, gt)?;
    let logits = tape.scale(logits, T::lit(1.0 / tau));
    let forward = classification_loss(tape, logits, &labels)?;
    let lt = tape.permute(logits, &[1, 0])?;
    let backward = classification_loss(tape, lt, &labels)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, T::lit(0.5)))
}

/// Bounded FIFO of detached `(query, gallery)` feature batches.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<(Array2<f64>, Array2<f64>)>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores copies of the values; the oldest batch is evicted when full.
    pub fn push(&mut self, q: Array2<f64>, g: Array2<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((q, g));
    }

    /// Up to `max` most recent batches, oldest first.
    pub fn sample(&self, max: usize) -> Vec<&(Array2<f64>, Array2<f64>)> {
        let skip = self.entries.len().saturating_sub(max);
        self.entries.iter().skip(skip).collect()
    }
}

/// The three parts of the re-ranking objective, each a scalar on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HralTerms {
    pub current: Var,
    pub historical: Var,
    pub infonce: Var,
    pub total: Var,
}

/// Refines the current batch alone and together with the stored batches,
/// aligns the live features with both refinements, and adds InfoNCE.
pub fn hral_loss<T: Real>(tape: &mut Tape<T>, q: Var, g: Var, bank: &MemoryBank, w: &LossWeights) -> Result<HralTerms> {
    let qa = to_array(tape.value(q))?;
    let ga = to_array(tape.value(g))?;
    let bq = qa.nrows();
    let f = tape.concat_rows(&[q, g])?;

    let cur = ndarray::concatenate(Axis(0), &[qa.view(), ga.view()]).map_err(|_| Error::shape("hral", &[bq, qa.ncols()], &[ga.nrows(), ga.ncols()]))?;
    let refined = rerank(cur.view(), w.k, w.alpha)?.refined;
    let current = batch_alignment_loss(tape, f, &refined, bq)?;

    let mem = bank.sample(bank.capacity());
    let historical = if mem.is_empty() {
        zero(tape)
    } else {
        let mut qs = vec![qa.view()];
        let mut gs = vec![ga.view()];
        for (mq, mg) in &mem {
            qs.push(mq.view());
            gs.push(mg.view());
        }
        let all_q = ndarray::concatenate(Axis(0), &qs).map_err(|_| Error::Validation("memory bank width mismatch".into()))?;
        let all_g = ndarray::concatenate(Axis(0), &gs).map_err(|_| Error::Validation("memory bank width mismatch".into()))?;
        let nq = all_q.nrows();
        let all = ndarray::concatenate(Axis(0), &[all_q.view(), all_g.view()]).map_err(|_| Error::Validation("memory bank width mismatch".into()))?;
        let refined = rerank(all.view(), w.k, w.alpha)?.refined;

        let mq = tape.constant(from_array(&all_q.slice(s![bq.., ..]).to_owned()));
        let mg = tape.constant(from_array(&all_g.slice(s![ga.nrows().., ..]).to_owned()));
        let live = tape.concat_rows(&[q, mq, g, mg])?;
        batch_alignment_loss(tape, live, &refined, nq)?
    };

    let infonce = infonce_loss(tape, q, g, w.tau)?;
    let s = tape.add(current, historical)?;
    let total = tape.add(s, infonce)?;
    Ok(HralTerms {
        current,
        historical,
        infonce,
        total,
    })
}

/// `λ₁L₁ + λ₂L₂ + L₃`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l1: Var, l2: Var, l3: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l1, T::lit(w.lambda1));
    let b = tape.scale(l2, T::lit(w.lambda2));
    let ab = tape.add(a, b)?;
    tape.add(ab, l3)
}
