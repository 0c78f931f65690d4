#![allow(dead_code)]

use ndarray::{Array, Array2, Dimension};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` with respect to every entry of `x`.
pub fn finite_diff<D: Dimension>(x: &Array<f64, D>, mut f: impl FnMut(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut grad = Array::zeros(x.raw_dim());
    let mut xp = x.as_standard_layout().into_owned();
    for i in 0..xp.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let up = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let down = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference for tiny gradients.
pub fn rel_err<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    let norm = |m: &Array<f64, D>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        v * scale
    })
}

/// Student-t kernel row by row, written with plain loops.
pub fn soft_assign_oracle(z: &Array2<f64>, mu: &Array2<f64>, dof: f64) -> Array2<f64> {
    let mut q = Array2::zeros((z.nrows(), mu.nrows()));
    for i in 0..z.nrows() {
        let mut total = 0.0;
        for k in 0..mu.nrows() {
            let mut d2 = 0.0;
            for j in 0..z.ncols() {
                d2 += (z[[i, j]] - mu[[k, j]]).powi(2);
            }
            q[[i, k]] = (1.0 + d2 / dof).powf(-(dof + 1.0) / 2.0);
            total += q[[i, k]];
        }
        for k in 0..mu.nrows() {
            q[[i, k]] /= total;
        }
    }
    q
}

pub fn target_oracle(q: &Array2<f64>) -> Array2<f64> {
    let (n, k) = q.dim();
    let mut f = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            f[j] += q[[i, j]];
        }
    }
    let mut p = Array2::zeros((n, k));
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..k {
            p[[i, j]] = q[[i, j]] * q[[i, j]] / f[j];
            total += p[[i, j]];
        }
        for j in 0..k {
            p[[i, j]] /= total;
        }
    }
    p
}

pub fn kl_oracle(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            s += a * (a / b.max(1e-12)).ln();
        }
    }
    s
}

/// Best label agreement over every relabelling of the predicted clusters.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let m = pred.iter().chain(truth).copied().max().unwrap_or(0) + 1;
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = 0;
    permutations(&mut perm, 0, &mut |sigma| {
        let hits = pred.iter().zip(truth).filter(|(&p, &t)| sigma[p] == t).count();
        best = best.max(hits);
    });
    best as f64 / pred.len() as f64
}

fn permutations(v: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == v.len() {
        visit(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permutations(v, start + 1, visit);
        v.swap(start, i);
    }
}

/// NMI from a contingency table, normalized by the geometric mean of the entropies.
pub fn nmi_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let a = pred.iter().max().unwrap() + 1;
    let b = truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; b]; a];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..b).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let entropy = |counts: &[f64]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum()
    };
    let (h1, h2) = (entropy(&rows), entropy(&cols));
    let mut mi = 0.0;
    for i in 0..a {
        for j in 0..b {
            let c = table[i][j];
            if c > 0.0 {
                mi += c / n * (n * c / (rows[i] * cols[j])).ln();
            }
        }
    }
    if h1 == 0.0 && h2 == 0.0 {
        1.0
    } else if h1 == 0.0 || h2 == 0.0 {
        0.0
    } else {
        mi / (h1 * h2).sqrt()
    }
}
