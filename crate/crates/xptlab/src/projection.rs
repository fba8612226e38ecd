//! Low-dimensional views of representation space: exact t-SNE with a PCA
//! initialization, per-language logistic decision boundaries in the
//! projected plane, and an SVG scatter writer.
//!
//! The t-SNE here is the exact O(n^2) formulation, not Barnes-Hut: the
//! point counts are small and exactness keeps runs reproducible.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact t-SNE settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iters: usize,
    pub early_exaggeration: f64,
    /// Iterations that keep the exaggerated affinities.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to its final value.
    pub momentum_switch_iter: usize,
    pub step_size: f64,
    /// Seed for the jitter applied when duplicate points are detected.
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iters: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            step_size: 200.0,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if n_points < 4 {
            return Err(Error::Input(format!(
                "t-SNE needs at least 4 points, got {n_points}"
            )));
        }
        if !(self.perplexity > 1.0) || self.perplexity >= (n_points - 1) as f64 {
            return Err(Error::Input(format!(
                "perplexity {} unusable for {n_points} points",
                self.perplexity
            )));
        }
        if self.n_iters == 0 {
            return Err(Error::Input("n_iters must be positive".into()));
        }
        if !(self.step_size > 0.0) || !(self.early_exaggeration >= 1.0) {
            return Err(Error::Input("step size and exaggeration must be positive".into()));
        }
        Ok(())
    }
}

/// Symmetrized input affinities plus diagnostics from the bandwidth search.
pub struct Affinities {
    /// Row-major n*n symmetric matrix; rows and columns sum to 1 overall.
    pub p: Vec<f64>,
    /// Perplexity actually reached for each row's conditional distribution.
    pub achieved_perplexity: Vec<f64>,
    /// True when duplicate points forced a jitter of the inputs.
    pub jittered: bool,
    pub n: usize,
}

fn squared_dists(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

fn has_duplicates(points: &[Vec<f64>]) -> bool {
    use std::collections::HashSet;
    let mut seen = HashSet::with_capacity(points.len());
    for p in points {
        let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        if !seen.insert(key) {
            return true;
        }
    }
    false
}

/// Entropy-matched conditional distribution for one row at inverse
/// bandwidth `beta`; returns (normalizer-relative probabilities, perplexity).
fn row_conditional(dists: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = dists.len();
    let mut shift = f64::INFINITY;
    for j in 0..n {
        if j != i {
            shift = shift.min(dists[j]);
        }
    }
    let mut p = vec![0.0; n];
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for j in 0..n {
        if j == i {
            continue;
        }
        let w = (-beta * (dists[j] - shift)).exp();
        p[j] = w;
        sum += w;
        weighted += w * (dists[j] - shift);
    }
    // Entropy of the normalized row; the shift cancels out of p but not out
    // of the raw distances, hence the shifted form here too.
    let h = sum.ln() + beta * weighted / sum;
    for v in p.iter_mut() {
        *v /= sum;
    }
    (p, h.exp())
}

/// Build symmetrized t-SNE affinities. Each row's bandwidth is found by
/// bisection (at most 50 halvings) until the achieved perplexity is within
/// 1e-5 of the target. Duplicate points get normal jitter of scale 1e-10
/// first, since identical rows admit no finite bandwidth.
pub fn pairwise_affinities(
    points: &[Vec<f64>],
    perplexity: f64,
    seed: u64,
) -> Result<Affinities> {
    let n = points.len();
    if n < 4 {
        return Err(Error::Input(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(perplexity > 1.0) || perplexity >= (n - 1) as f64 {
        return Err(Error::Input(format!(
            "perplexity {perplexity} unusable for {n} points"
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Input("ragged point matrix".into()));
    }

    let mut owned;
    let mut jittered = false;
    let points = if has_duplicates(points) {
        jittered = true;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1e-10).expect("valid normal");
        owned = points.to_vec();
        for p in owned.iter_mut() {
            for x in p.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        if has_duplicates(&owned) {
            return Err(Error::Internal("duplicate points survived jitter".into()));
        }
        &owned[..]
    } else {
        points
    };

    let dists = squared_dists(points);
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &dists[i * n..(i + 1) * n];
            let mut beta = 1.0;
            let mut lo = 0.0f64;
            let mut hi = f64::INFINITY;
            let (mut p, mut perp) = row_conditional(row, i, beta);
            for _ in 0..50 {
                if (perp - perplexity).abs() <= 1e-5 {
                    break;
                }
                if perp > perplexity {
                    lo = beta;
                    beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
                let r = row_conditional(row, i, beta);
                p = r.0;
                perp = r.1;
            }
            (p, perp)
        })
        .collect();

    let mut p = vec![0.0; n * n];
    let mut achieved = Vec::with_capacity(n);
    for (i, (row, perp)) in rows.iter().enumerate() {
        achieved.push(*perp);
        for j in 0..n {
            p[i * n + j] = row[j];
        }
    }
    // Symmetrize: P = (C + C^T) / 2n, so all entries sum to 1.
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = (p[i * n + j] + p[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(Affinities {
        p: sym,
        achieved_perplexity: achieved,
        jittered,
        n,
    })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors); eigenvector k is the k-th column,
/// i.e. `vectors[row][k]`. Sorted by descending eigenvalue.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    if n == 0 || a.iter().any(|r| r.len() != n) {
        return Err(Error::Input("jacobi needs a square matrix".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if (a[i][j] - a[j][i]).abs() > 1e-9 * (1.0 + a[i][j].abs()) {
                return Err(Error::Input("jacobi needs a symmetric matrix".into()));
            }
        }
    }
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let off = |m: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i][j] * m[i][j];
                }
            }
        }
        s
    };
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().max(1e-300);

    for _sweep in 0..100 {
        if off(&m) <= 1e-24 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).expect("finite eigenvalues"));
    let values: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|r| order.iter().map(|&c| v[r][c]).collect())
        .collect();
    Ok((values, vectors))
}

/// Project centered points onto their top two principal components, scaled
/// so the first coordinate has standard deviation 1e-4 (the usual small
/// t-SNE start).
fn pca_init(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    let d = points[0].len();
    if d < 2 {
        return Err(Error::Input("PCA initialization needs at least 2 dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                cov[i][j] += ci * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1).max(1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (_, vectors) = jacobi_eigen(&cov)?;
    let mut coords: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let mut c = [0.0; 2];
            for (axis, slot) in c.iter_mut().enumerate() {
                *slot = (0..d).map(|k| (p[k] - mean[k]) * vectors[k][axis]).sum();
            }
            c
        })
        .collect();
    let var0: f64 =
        coords.iter().map(|c| c[0] * c[0]).sum::<f64>() / (n - 1).max(1) as f64;
    let std0 = var0.sqrt();
    let scale = if std0 > 0.0 { 1e-4 / std0 } else { 1.0 };
    for c in coords.iter_mut() {
        c[0] *= scale;
        c[1] *= scale;
    }
    Ok(coords)
}

/// Embedding plus convergence diagnostics.
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// (iteration, KL divergence against the unexaggerated affinities),
    /// recorded every 10 iterations and at the end.
    pub kl_history: Vec<(usize, f64)>,
    pub achieved_perplexity: Vec<f64>,
    pub jittered: bool,
}

fn kl_divergence(p: &[f64], q_num: &[f64], z: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            if pij > 1e-30 {
                let qij = (q_num[i * n + j] / z).max(1e-12);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE by plain gradient descent with momentum, early exaggeration,
/// and per-iteration recentering.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate(points.len())?;
    let aff = pairwise_affinities(points, cfg.perplexity, cfg.seed)?;
    let n = aff.n;
    let p = &aff.p;

    let mut y = pca_init(points)?;
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::new();
    let mut q_num = vec![0.0; n * n];

    for iter in 0..cfg.n_iters {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch_iter {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };

        // Student-t numerators and their total.
        let row_sums: Vec<f64> = {
            let y_ref = &y;
            let q_rows: Vec<(usize, Vec<f64>, f64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut row = vec![0.0; n];
                    let mut s = 0.0;
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let dx = y_ref[i][0] - y_ref[j][0];
                        let dy = y_ref[i][1] - y_ref[j][1];
                        let num = 1.0 / (1.0 + dx * dx + dy * dy);
                        row[j] = num;
                        s += num;
                    }
                    (i, row, s)
                })
                .collect();
            let mut sums = vec![0.0; n];
            for (i, row, s) in q_rows {
                q_num[i * n..(i + 1) * n].copy_from_slice(&row);
                sums[i] = s;
            }
            sums
        };
        let z: f64 = row_sums.iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Internal(format!(
                "t-SNE embedding collapsed at iteration {iter}"
            )));
        }

        let grads: Vec<[f64; 2]> = {
            let y_ref = &y;
            let q_ref = &q_num;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut g = [0.0f64; 2];
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let num = q_ref[i * n + j];
                        let pij = exaggeration * p[i * n + j];
                        let qij = num / z;
                        let coeff = 4.0 * (pij - qij) * num;
                        g[0] += coeff * (y_ref[i][0] - y_ref[j][0]);
                        g[1] += coeff * (y_ref[i][1] - y_ref[j][1]);
                    }
                    g
                })
                .collect()
        };

        for i in 0..n {
            for axis in 0..2 {
                // Adaptive per-coordinate gains, as in the reference
                // implementation: grow when the gradient keeps pointing
                // against the velocity, shrink when it agrees.
                let same_sign = grads[i][axis].signum() == velocity[i][axis].signum();
                gains[i][axis] = if same_sign {
                    (gains[i][axis] * 0.8).max(0.01)
                } else {
                    gains[i][axis] + 0.2
                };
                velocity[i][axis] = momentum * velocity[i][axis]
                    - cfg.step_size * gains[i][axis] * grads[i][axis];
                y[i][axis] += velocity[i][axis];
            }
        }
        let mut center = [0.0f64; 2];
        for c in &y {
            center[0] += c[0];
            center[1] += c[1];
        }
        center[0] /= n as f64;
        center[1] /= n as f64;
        for c in y.iter_mut() {
            c[0] -= center[0];
            c[1] -= center[1];
        }

        if iter % 10 == 0 || iter + 1 == cfg.n_iters {
            // The recorded KL always uses the plain affinities so the curve
            // is comparable across the exaggeration boundary; q is from the
            // pre-update coordinates, which is close enough for a diagnostic.
            kl_history.push((iter, kl_divergence(p, &q_num, z, n)));
        }
    }
    if y.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::Internal("t-SNE produced non-finite coordinates".into()));
    }
    Ok(TsneResult {
        coords: y,
        kl_history,
        achieved_perplexity: aff.achieved_perplexity,
        jittered: aff.jittered,
    })
}

/// Mean silhouette score over all points, using Euclidean distance in the
/// plane. Every cluster must hold at least two points.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n == 0 {
        return Err(Error::Input("silhouette needs matching, non-empty inputs".into()));
    }
    let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(Error::Input("silhouette needs at least two clusters".into()));
    }
    let mut count = std::collections::BTreeMap::new();
    for &l in labels {
        *count.entry(l).or_insert(0usize) += 1;
    }
    if count.values().any(|&c| c < 2) {
        return Err(Error::Input("silhouette cluster with fewer than two points".into()));
    }

    let dist = |a: &[f64; 2], b: &[f64; 2]| -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> =
            clusters.iter().map(|&c| (c, (0.0, 0))).collect();
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = sums.get_mut(&labels[j]).expect("cluster present");
            e.0 += dist(&points[i], &points[j]);
            e.1 += 1;
        }
        let own = labels[i];
        let (own_sum, own_n) = sums[&own];
        let a = own_sum / own_n as f64;
        let b = sums
            .iter()
            .filter(|(c, _)| **c != own)
            .map(|(_, (s, m))| s / *m as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// A fitted 2D logistic decision boundary for one language's projected
/// points: sign(w . x + b) separates the classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub lang: usize,
    pub w: [f64; 2],
    pub b: f64,
}

impl Boundary {
    pub fn predict(&self, p: [f64; 2]) -> usize {
        usize::from(self.w[0] * p[0] + self.w[1] * p[1] + self.b > 0.0)
    }

    pub fn accuracy(&self, points: &[[f64; 2]], labels: &[usize]) -> f64 {
        let correct = points
            .iter()
            .zip(labels)
            .filter(|(p, l)| self.predict(**p) == **l)
            .count();
        correct as f64 / points.len() as f64
    }

    /// Angle between two boundaries' normals in degrees, ignoring
    /// orientation (always in [0, 90]).
    pub fn angle_to(&self, other: &Boundary) -> f64 {
        let na = (self.w[0] * self.w[0] + self.w[1] * self.w[1]).sqrt();
        let nb = (other.w[0] * other.w[0] + other.w[1] * other.w[1]).sqrt();
        let dot = (self.w[0] * other.w[0] + self.w[1] * other.w[1]) / (na * nb);
        dot.abs().clamp(0.0, 1.0).acos().to_degrees()
    }
}

const LOGISTIC_L2: f64 = 1e-3;

/// Fit a ridge-regularized logistic separator by gradient descent with
/// Armijo backtracking. Deterministic; stops when the loss improvement
/// falls below 1e-10 or after 1e5 iterations.
pub fn fit_logistic(points: &[[f64; 2]], labels: &[usize], lang: usize) -> Result<Boundary> {
    let n = points.len();
    if n != labels.len() || n < 2 {
        return Err(Error::Input("logistic fit needs matching, non-trivial inputs".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Input("logistic fit needs binary labels".into()));
    }
    if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(Error::Input("logistic fit needs both classes present".into()));
    }

    let loss_and_grad = |w: &[f64; 2], b: f64| -> (f64, [f64; 2], f64) {
        let mut loss = 0.0;
        let mut gw = [0.0f64; 2];
        let mut gb = 0.0;
        for (p, &l) in points.iter().zip(labels) {
            let z = if l == 1 { 1.0 } else { -1.0 };
            let m = z * (w[0] * p[0] + w[1] * p[1] + b);
            // ln(1 + exp(-m)), stable on both sides.
            loss += if m > 0.0 {
                (-m).exp().ln_1p()
            } else {
                -m + m.exp().ln_1p()
            };
            let s = if m > 0.0 {
                let e = (-m).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + m.exp())
            };
            gw[0] -= z * s * p[0];
            gw[1] -= z * s * p[1];
            gb -= z * s;
        }
        let inv = 1.0 / n as f64;
        loss = loss * inv + 0.5 * LOGISTIC_L2 * (w[0] * w[0] + w[1] * w[1]);
        gw[0] = gw[0] * inv + LOGISTIC_L2 * w[0];
        gw[1] = gw[1] * inv + LOGISTIC_L2 * w[1];
        gb *= inv;
        (loss, gw, gb)
    };

    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    let (mut loss, mut gw, mut gb) = loss_and_grad(&w, b);
    for _ in 0..100_000 {
        let gnorm2 = gw[0] * gw[0] + gw[1] * gw[1] + gb * gb;
        if gnorm2 == 0.0 {
            break;
        }
        let mut t = 1.0;
        let mut stepped = false;
        for _ in 0..60 {
            let cand_w = [w[0] - t * gw[0], w[1] - t * gw[1]];
            let cand_b = b - t * gb;
            let (cand_loss, cand_gw, cand_gb) = loss_and_grad(&cand_w, cand_b);
            if cand_loss <= loss - 1e-4 * t * gnorm2 {
                let improved = loss - cand_loss;
                w = cand_w;
                b = cand_b;
                loss = cand_loss;
                gw = cand_gw;
                gb = cand_gb;
                stepped = improved >= 1e-10;
                break;
            }
            t *= 0.5;
        }
        if !stepped {
            break;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Internal("logistic fit diverged".into()));
    }
    Ok(Boundary { lang, w, b })
}

/// How consistently the per-language boundaries agree: pairwise normal
/// angles and the full boundary-vs-data accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryAlignment {
    pub angles: Vec<(usize, usize, f64)>,
    pub mean_angle_deg: f64,
    /// `cross_acc[i][j]`: boundary of language i scoring language j's points.
    pub cross_acc: Vec<Vec<f64>>,
    pub mean_self_acc: f64,
    pub mean_cross_acc: f64,
}

pub fn boundary_alignment(
    boundaries: &[Boundary],
    data: &[(Vec<[f64; 2]>, Vec<usize>)],
) -> Result<BoundaryAlignment> {
    let k = boundaries.len();
    if k < 2 || data.len() != k {
        return Err(Error::Input(
            "boundary alignment needs one boundary and one dataset per language".into(),
        ));
    }
    let mut angles = Vec::new();
    let mut angle_sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let a = boundaries[i].angle_to(&boundaries[j]);
            angle_sum += a;
            angles.push((boundaries[i].lang, boundaries[j].lang, a));
        }
    }
    let mut cross_acc = vec![vec![0.0; k]; k];
    let mut self_sum = 0.0;
    let mut cross_sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let acc = boundaries[i].accuracy(&data[j].0, &data[j].1);
            cross_acc[i][j] = acc;
            if i == j {
                self_sum += acc;
            } else {
                cross_sum += acc;
            }
        }
    }
    Ok(BoundaryAlignment {
        mean_angle_deg: angle_sum / angles.len() as f64,
        angles,
        cross_acc,
        mean_self_acc: self_sum / k as f64,
        mean_cross_acc: cross_sum / (k * (k - 1)) as f64,
    })
}

const SVG_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const SVG_SIZE: f64 = 640.0;
const SVG_MARGIN: f64 = 40.0;

/// Write the projected points as an SVG scatter: color by language, marker
/// by label (circle = positive pair, square = negative), with each
/// language's decision boundary drawn as a line in its color.
pub fn emit_scatter(
    path: &Path,
    coords: &[[f64; 2]],
    langs: &[usize],
    labels: &[usize],
    boundaries: &[Boundary],
) -> Result<()> {
    let n = coords.len();
    if n == 0 || langs.len() != n || labels.len() != n {
        return Err(Error::Input("scatter needs matching, non-empty inputs".into()));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        xmin = xmin.min(c[0]);
        xmax = xmax.max(c[0]);
        ymin = ymin.min(c[1]);
        ymax = ymax.max(c[1]);
    }
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let inner = SVG_SIZE - 2.0 * SVG_MARGIN;
    let to_px = |c: &[f64; 2]| -> (f64, f64) {
        (
            SVG_MARGIN + (c[0] - xmin) / xspan * inner,
            // SVG y grows downward.
            SVG_MARGIN + (ymax - c[1]) / yspan * inner,
        )
    };

    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    )?;
    writeln!(
        w,
        r#"<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#
    )?;

    for b in boundaries {
        // w0 x + w1 y + c = 0 in data space; sample the two viewport edges
        // along the dominant axis.
        let color = SVG_COLORS[b.lang % SVG_COLORS.len()];
        let pts = if b.w[1].abs() >= b.w[0].abs() {
            if b.w[1] == 0.0 {
                continue;
            }
            let y_at = |x: f64| -(b.w[0] * x + b.b) / b.w[1];
            [[xmin, y_at(xmin)], [xmax, y_at(xmax)]]
        } else {
            let x_at = |y: f64| -(b.w[1] * y + b.b) / b.w[0];
            [[x_at(ymin), ymin], [x_at(ymax), ymax]]
        };
        let (x1, y1) = to_px(&pts[0]);
        let (x2, y2) = to_px(&pts[1]);
        writeln!(
            w,
            r#"<line x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 3" opacity="0.8"/>"#
        )?;
    }

    for i in 0..n {
        let (x, y) = to_px(&coords[i]);
        let color = SVG_COLORS[langs[i] % SVG_COLORS.len()];
        if labels[i] == 1 {
            writeln!(
                w,
                r#"<circle cx="{x:.3}" cy="{y:.3}" r="3" fill="{color}" fill-opacity="0.65"/>"#
            )?;
        } else {
            writeln!(
                w,
                r#"<rect x="{:.3}" y="{:.3}" width="5" height="5" fill="{color}" fill-opacity="0.65"/>"#,
                x - 2.5,
                y - 2.5
            )?;
        }
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_blobs(
        centers: &[[f64; 2]],
        per: usize,
        std: f64,
        seed: u64,
        dim: usize,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, std).unwrap();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..per {
                let mut p = vec![0.0; dim];
                p[0] = c[0] + noise.sample(&mut rng);
                p[1] = c[1] + noise.sample(&mut rng);
                for x in p.iter_mut().skip(2) {
                    *x = noise.sample(&mut rng);
                }
                points.push(p);
                labels.push(ci);
            }
        }
        (points, labels)
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let (vals, vecs) = jacobi_eigen(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // First eigenvector is (1,1)/sqrt(2) up to sign.
        let v0 = [vecs[0][0], vecs[1][0]];
        assert!((v0[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert!((v0[0] - v0[1]).abs() < 1e-10 || (v0[0] + v0[1]).abs() < 1e-10);

        // Reconstruction A = V diag V^T.
        let n = 2;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += vecs[i][k] * vals[k] * vecs[j][k];
                }
                assert!((s - a[i][j]).abs() < 1e-10);
            }
        }
        assert!(jacobi_eigen(&[vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn affinities_hit_target_perplexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..8).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let aff = pairwise_affinities(&points, 12.0, 0).unwrap();
        assert!(!aff.jittered);
        for perp in &aff.achieved_perplexity {
            assert!((perp - 12.0).abs() < 1e-3, "achieved {perp}");
        }
        let total: f64 = aff.p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for i in 0..aff.n {
            for j in 0..aff.n {
                assert!((aff.p[i * aff.n + j] - aff.p[j * aff.n + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicates_trigger_jitter() {
        let mut points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        points.push(points[0].clone());
        let aff = pairwise_affinities(&points, 3.0, 1).unwrap();
        assert!(aff.jittered);
    }

    #[test]
    fn tsne_separates_two_blobs() {
        let (points, labels) =
            gaussian_blobs(&[[0.0, 0.0], [40.0, 40.0]], 20, 0.5, 9, 6);
        let cfg = TsneConfig {
            perplexity: 8.0,
            ..TsneConfig::default()
        };
        let out = tsne(&points, &cfg).unwrap();
        assert_eq!(out.coords.len(), 40);
        let score = silhouette(&out.coords, &labels).unwrap();
        assert!(score > 0.6, "silhouette {score}");
        // KL should have dropped substantially over the run.
        let first = out.kl_history.first().unwrap().1;
        let last = out.kl_history.last().unwrap().1;
        assert!(last < first, "KL went {first} -> {last}");
        assert!(last.is_finite() && last >= -1e-9);
    }

    #[test]
    fn silhouette_endpoints() {
        let points = vec![
            [0.0, 0.0],
            [0.1, 0.0],
            [100.0, 100.0],
            [100.1, 100.0],
        ];
        let labels = vec![0, 0, 1, 1];
        let s = silhouette(&points, &labels).unwrap();
        assert!(s > 0.99);
        assert!(silhouette(&points, &[0, 0, 0, 1]).is_err());
        assert!(silhouette(&points, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn logistic_fit_separates_and_reports_angles() {
        // Class split along x = 1: negatives left, positives right.
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let y = i as f64 * 0.3;
            points.push([0.0, y]);
            labels.push(0);
            points.push([2.0, y]);
            labels.push(1);
        }
        let b = fit_logistic(&points, &labels, 0).unwrap();
        assert_eq!(b.accuracy(&points, &labels), 1.0);
        assert!(b.angle_to(&b).abs() < 1e-9);

        let vertical = Boundary { lang: 1, w: [1.0, 0.0], b: 0.0 };
        let horizontal = Boundary { lang: 2, w: [0.0, 1.0], b: 0.0 };
        assert!((vertical.angle_to(&horizontal) - 90.0).abs() < 1e-9);
        // Sign flips do not count as misalignment.
        let flipped = Boundary { lang: 3, w: [-1.0, 0.0], b: 0.0 };
        assert!(vertical.angle_to(&flipped).abs() < 1e-9);
        // The fitted separator is essentially vertical.
        assert!(b.angle_to(&vertical) < 5.0);
    }

    #[test]
    fn logistic_fit_rejects_degenerate_input() {
        let points = vec![[0.0, 0.0], [1.0, 1.0]];
        assert!(fit_logistic(&points, &[1, 1], 0).is_err());
        assert!(fit_logistic(&points, &[0, 2], 0).is_err());
    }

    #[test]
    fn boundary_alignment_matrix() {
        let base = vec![
            ([0.0, 0.0], 0),
            ([0.0, 1.0], 0),
            ([2.0, 0.0], 1),
            ([2.0, 1.0], 1),
        ];
        let points: Vec<[f64; 2]> = base.iter().map(|(p, _)| *p).collect();
        let labels: Vec<usize> = base.iter().map(|(_, l)| *l).collect();
        let b0 = fit_logistic(&points, &labels, 0).unwrap();
        let b1 = fit_logistic(&points, &labels, 1).unwrap();
        let data = vec![(points.clone(), labels.clone()), (points, labels)];
        let al = boundary_alignment(&[b0, b1], &data).unwrap();
        assert!(al.mean_angle_deg < 1.0);
        assert_eq!(al.cross_acc.len(), 2);
        assert!((al.mean_self_acc - 1.0).abs() < 1e-12);
        assert!((al.mean_cross_acc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_svg_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.svg");
        let coords = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5], [3.0, 1.5]];
        let langs = vec![0, 1, 2, 3];
        let labels = vec![0, 1, 0, 1];
        let b = Boundary { lang: 0, w: [1.0, -1.0], b: 0.2 };
        emit_scatter(&path, &coords, &langs, &labels, &[b]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("<circle"));
        assert!(text.contains("<rect"));
        assert!(text.contains("<line"));
        assert!(text.ends_with("</svg>\n"));
    }
}
