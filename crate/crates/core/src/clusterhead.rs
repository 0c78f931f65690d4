//! Student-t soft assignment, the sharpened target distribution, KL
//! consistency losses, k-means initialization and hard assignment.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;
/// Row-sum tolerance for assignment matrices.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Img,
    Txt,
    Fus,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Img, Modality::Txt, Modality::Fus];

    /// 1 = image, 2 = text, 3 = fused.
    pub fn index(self) -> usize {
        match self {
            Modality::Img => 1,
            Modality::Txt => 2,
            Modality::Fus => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Img => "img",
            Modality::Txt => "txt",
            Modality::Fus => "fus",
        }
    }
}

/// Cluster centres for one modality plus the Student-t degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub mu: Array2<f64>,
    pub modality: Modality,
    pub dof: f64,
}

impl Centroids {
    pub fn new(mu: Array2<f64>, modality: Modality) -> Self {
        Self { mu, modality, dof: 1.0 }
    }

    pub fn k(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignKind {
    Soft,
    Target,
}

/// Row-stochastic `n x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignMatrix {
    pub q: Array2<f64>,
    pub kind: AssignKind,
}

impl AssignMatrix {
    /// Wrap `q` after checking every row is a probability vector.
    pub fn new(q: Array2<f64>, kind: AssignKind) -> Result<Self> {
        for (i, row) in q.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { q, kind })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn k(&self) -> usize {
        self.q.ncols()
    }

    /// Keep only `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            q: self.q.select(Axis(0), rows),
            kind: self.kind,
        }
    }
}

fn check_shapes(z: &ArrayView2<'_, f64>, c: &Centroids) -> Result<()> {
    if c.k() < 2 {
        return Err(Error::invalid(format!("need at least 2 centroids, got {}", c.k())));
    }
    if z.ncols() != c.dim() {
        return Err(Error::invalid(format!(
            "representation width {} differs from centroid width {}",
            z.ncols(),
            c.dim()
        )));
    }
    if !(c.dof > 0.0) {
        return Err(Error::invalid("degrees of freedom must be positive"));
    }
    Ok(())
}

fn sq_distances(z: ArrayView2<'_, f64>, mu: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut d = Array2::zeros((z.nrows(), mu.nrows()));
    for (i, zi) in z.rows().into_iter().enumerate() {
        for (k, mk) in mu.rows().into_iter().enumerate() {
            d[[i, k]] = zi.iter().zip(mk).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    d
}

/// Student-t kernel assignment of each row of `z` to each centroid.
pub fn soft_assign(z: ArrayView2<'_, f64>, centroids: &Centroids) -> Result<AssignMatrix> {
    check_shapes(&z, centroids)?;
    let dof = centroids.dof;
    let power = -(dof + 1.0) / 2.0;
    let d = sq_distances(z, centroids.mu.view());
    let mut q = d.mapv(|d| power * (d / dof).ln_1p());
    for mut row in q.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(AssignMatrix {
        q,
        kind: AssignKind::Soft,
    })
}

/// Pull `grad_q = dL/dQ` back through [`soft_assign`]: returns `(dL/dZ, dL/dmu)`.
pub fn soft_assign_backward(
    z: ArrayView2<'_, f64>,
    centroids: &Centroids,
    q: &AssignMatrix,
    grad_q: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dof = centroids.dof;
    let d = sq_distances(z, centroids.mu.view());
    let mut dz = Array2::zeros(z.raw_dim());
    let mut dmu = Array2::zeros(centroids.mu.raw_dim());
    for (i, zi) in z.rows().into_iter().enumerate() {
        let qi = q.q.row(i);
        let gi = grad_q.row(i);
        let inner: f64 = qi.iter().zip(gi).map(|(q, g)| q * g).sum();
        for (k, mk) in centroids.mu.rows().into_iter().enumerate() {
            // dL/d(log numerator) times d(log numerator)/d(distance)
            let g_log = qi[k] * (gi[k] - inner);
            let coef = g_log * -(dof + 1.0) / (dof + d[[i, k]]);
            for (j, (a, b)) in zi.iter().zip(mk).enumerate() {
                let t = coef * (a - b);
                dz[[i, j]] += t;
                dmu[[k, j]] -= t;
            }
        }
    }
    (dz, dmu)
}

/// Sharpened, frequency-normalized target for `q`.
pub fn target_distribution(q: &AssignMatrix) -> Result<AssignMatrix> {
    let f = q.q.sum_axis(Axis(0));
    if let Some(k) = f.iter().position(|&fk| !(fk > 0.0)) {
        return Err(Error::DegenerateCluster { cluster: k });
    }
    let mut p = &q.q.mapv(|v| v * v) / &f;
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    Ok(AssignMatrix {
        q: p,
        kind: AssignKind::Target,
    })
}

/// `KL(P || Q) = sum_n sum_k p log(p / q)` with `q` floored at [`LOG_EPS`].
pub fn kl_divergence(p: &AssignMatrix, q: &AssignMatrix) -> Result<f64> {
    if p.q.dim() != q.q.dim() {
        return Err(Error::invalid(format!(
            "KL shapes differ: {:?} vs {:?}",
            p.q.dim(),
            q.q.dim()
        )));
    }
    Ok(p
        .q
        .iter()
        .zip(&q.q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(LOG_EPS).ln()))
        .sum())
}

/// `dKL(P || Q)/dQ` with `P` held constant.
pub fn kl_grad_q(p: &AssignMatrix, q: &AssignMatrix) -> Array2<f64> {
    let mut g = Array2::zeros(q.q.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(&p.q)
        .and(&q.q)
        .for_each(|g, &p, &q| *g = if q > LOG_EPS { -p / q } else { 0.0 });
    g
}

/// Consistency loss for one modality's encoder:
/// `KL(P_m || Q_m) + alpha * KL(P_fus || Q_fus)`.
pub fn encoder_loss(
    q_m: &AssignMatrix,
    p_m: &AssignMatrix,
    q_fus: &AssignMatrix,
    p_fus: &AssignMatrix,
    alpha: f64,
) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    let own = kl_divergence(p_m, q_m)?;
    if alpha == 0.0 {
        return Ok(own);
    }
    Ok(own + alpha * kl_divergence(p_fus, q_fus)?)
}

/// `KL(P || soft_assign(z, centroids))` and its gradients w.r.t. `z` and the centroids.
pub fn kl_to_soft_assign(
    z: ArrayView2<'_, f64>,
    centroids: &Centroids,
    p: &AssignMatrix,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let q = soft_assign(z, centroids)?;
    let loss = kl_divergence(p, &q)?;
    let g = kl_grad_q(p, &q);
    let (dz, dmu) = soft_assign_backward(z, centroids, &q, g.view());
    Ok((loss, dz, dmu))
}

/// Row-wise argmax, ties to the lowest index.
pub fn hard_assign(q: &AssignMatrix) -> Vec<usize> {
    argmax_rows(q.q.view())
}

pub(crate) fn argmax_rows(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
}

pub const KMEANS_MAX_ITER: usize = 300;

fn nearest(d: ArrayView2<'_, f64>) -> Vec<usize> {
    d.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Lloyd iterations from the given centres until assignments stop changing.
///
/// A cluster that empties is re-seeded at the point farthest from its
/// current centre.
pub fn lloyd(z: ArrayView2<'_, f64>, init: Array2<f64>, max_iter: usize) -> Result<KMeansFit> {
    let k = init.nrows();
    if z.nrows() < k {
        return Err(Error::invalid(format!("{} points cannot fill {k} clusters", z.nrows())));
    }
    if z.ncols() != init.ncols() {
        return Err(Error::invalid("centroid width differs from data width"));
    }
    let mut mu = init;
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..max_iter.max(1) {
        let d = sq_distances(z, mu.view());
        let mut new_labels = nearest(d.view());
        let mut counts = vec![0usize; k];
        for &l in &new_labels {
            counts[l] += 1;
        }
        // farthest-point re-seeding of empty clusters
        let mut taken = vec![false; z.nrows()];
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..z.nrows())
                .filter(|&i| !taken[i] && counts[new_labels[i]] > 1)
                .max_by(|&a, &b| {
                    d[[a, new_labels[a]]]
                        .total_cmp(&d[[b, new_labels[b]]])
                        .then(b.cmp(&a))
                })
                .expect("n >= k guarantees a donor cluster");
            counts[new_labels[far]] -= 1;
            new_labels[far] = empty;
            counts[empty] = 1;
            taken[far] = true;
        }
        let mut sums = Array2::<f64>::zeros(mu.raw_dim());
        for (i, &l) in new_labels.iter().enumerate() {
            let mut s = sums.row_mut(l);
            s += &z.row(i);
        }
        for (mut s, &c) in sums.rows_mut().into_iter().zip(&counts) {
            s /= c as f64;
        }
        mu = sums;
        let converged = new_labels == labels;
        labels = new_labels;
        if converged {
            break;
        }
    }
    let d = sq_distances(z, mu.view());
    let inertia = labels.iter().enumerate().map(|(i, &l)| d[[i, l]]).sum();
    Ok(KMeansFit {
        centroids: mu,
        labels,
        inertia,
    })
}

/// k-means++ seeding.
pub fn plus_plus_init(z: ArrayView2<'_, f64>, k: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let n = z.nrows();
    let mut mu = Array2::zeros((k, z.ncols()));
    let first = rng.random_range(0..n);
    mu.row_mut(0).assign(&z.row(first));
    let mut best = Array1::from_elem(n, f64::INFINITY);
    for c in 1..k {
        for (i, zi) in z.rows().into_iter().enumerate() {
            let d: f64 = zi.iter().zip(mu.row(c - 1)).map(|(a, b)| (a - b) * (a - b)).sum();
            best[i] = best[i].min(d);
        }
        let pick = match WeightedIndex::new(best.iter().copied()) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen centre
            Err(_) => rng.random_range(0..n),
        };
        mu.row_mut(c).assign(&z.row(pick));
    }
    mu
}

/// Best of `restarts` k-means++ / Lloyd runs by within-cluster sum of squares.
///
/// Restarts run in parallel with per-restart seeds; ties go to the lowest
/// restart index, so the result matches a sequential run.
pub fn kmeans(z: ArrayView2<'_, f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if z.nrows() < k {
        return Err(Error::invalid(format!("{} points cannot fill {k} clusters", z.nrows())));
    }
    let runs: Vec<Result<KMeansFit>> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = <seed::Rng as rand::SeedableRng>::seed_from_u64(seed::derive_indexed(
                seed,
                "kmeans",
                r as u64,
            ));
            let init = plus_plus_init(z, k, &mut rng);
            lloyd(z, init, KMEANS_MAX_ITER)
        })
        .collect();
    let mut best: Option<KMeansFit> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
