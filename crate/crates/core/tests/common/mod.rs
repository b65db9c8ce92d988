//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tied_plda::data::{FeatureMatrix, LabelSequence};
use tied_plda::model::{ComponentParams, Hyperparams, StateModel, SubState, TiedPldaModel};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * normal(rng))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * normal(rng))
}

pub fn random_noise(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0))
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// A tied model with Gaussian parameters and random normalized weights.
pub fn random_model(rng: &mut ChaCha8Rng, h: Hyperparams, k: usize) -> TiedPldaModel {
    let components = (0..h.num_components)
        .map(|_| ComponentParams {
            frame_loading: random_matrix(rng, h.feature_dim, h.frame_dim, 1.0),
            state_loading: random_matrix(rng, h.feature_dim, h.state_dim, 1.0),
            bias: random_vector(rng, h.feature_dim, 2.0),
            noise_var: random_noise(rng, h.feature_dim),
        })
        .collect();
    let states = (0..h.num_states)
        .map(|_| {
            let c = random_simplex(rng, k);
            StateModel {
                substates: c
                    .into_iter()
                    .map(|weight| SubState {
                        vector: random_vector(rng, h.state_dim, 1.0),
                        weight,
                    })
                    .collect(),
                component_weights: DVector::from_vec(random_simplex(rng, h.num_components)),
            }
        })
        .collect();
    let mut model = TiedPldaModel::new(h, k).unwrap();
    model.components = components;
    model.states = states;
    model.validate().unwrap();
    model
}

/// `log N(y; mean, cov)` through a dense Cholesky factorization.
pub fn dense_log_normal(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance must be positive definite");
    let r = y - mean;
    let sol = chol.solve(&r);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (y.len() as f64 * LN_2PI + logdet + r.dot(&sol))
}

pub fn diag_log_normal(y: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> f64 {
    -0.5 * (0..y.len())
        .map(|i| LN_2PI + var[i].ln() + (y[i] - mean[i]).powi(2) / var[i])
        .sum::<f64>()
}

pub fn marginal_cov(c: &ComponentParams) -> DMatrix<f64> {
    &c.frame_loading * c.frame_loading.transpose() + DMatrix::from_diagonal(&c.noise_var)
}

/// Gauss-Hermite nodes and weights for `int exp(-t^2) f(t) dt` from the
/// eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// One `(frame, sub-state, component)` term of the second E-step sweep,
/// computed densely.
#[derive(Clone, Debug)]
pub struct FrameTerm {
    pub m: usize,
    pub gamma: f64,
    pub y: DVector<f64>,
    pub x_mean: DVector<f64>,
    pub x_cov: DMatrix<f64>,
    pub z_mean: DVector<f64>,
    pub z_second: DMatrix<f64>,
}

/// Dense responsibilities and frame-variable posteriors for every frame,
/// given sub-state vectors already set in `model` and their second moments.
pub fn oracle_terms(
    model: &TiedPldaModel,
    z_second: &[Vec<DMatrix<f64>>],
    features: &FeatureMatrix,
    labels: &LabelSequence,
) -> Vec<FrameTerm> {
    let mut out = Vec::new();
    let covs: Vec<DMatrix<f64>> = model.components.iter().map(marginal_cov).collect();
    for t in 0..features.num_frames() {
        let y = DVector::from_column_slice(features.frame(t));
        for (j, mass) in labels.posteriors(t) {
            let state = &model.states[j];
            let mut scores = Vec::new();
            for (k, sub) in state.substates.iter().enumerate() {
                for (m, c) in model.components.iter().enumerate() {
                    let w = model.pair_weight(j, k, m);
                    if w <= 0.0 || !model.pair_allowed(k, m) {
                        continue;
                    }
                    let mean = &c.state_loading * &sub.vector + &c.bias;
                    scores.push((k, m, w.ln() + dense_log_normal(&y, &mean, &covs[m])));
                }
            }
            let max = scores.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = scores.iter().map(|s| (s.2 - max).exp()).sum();
            for (k, m, s) in scores {
                let gamma = mass * (s - max).exp() / norm;
                let c = &model.components[m];
                let z = &state.substates[k].vector;
                let lam_inv = DMatrix::from_diagonal(&c.noise_var.map(|v| 1.0 / v));
                let prec = DMatrix::identity(c.frame_loading.ncols(), c.frame_loading.ncols())
                    + c.frame_loading.transpose() * &lam_inv * &c.frame_loading;
                let cov = prec.try_inverse().unwrap();
                let r = &y - &c.state_loading * z - &c.bias;
                let x_mean = &cov * c.frame_loading.transpose() * &lam_inv * r;
                out.push(FrameTerm {
                    m,
                    gamma,
                    y: y.clone(),
                    x_mean,
                    x_cov: cov,
                    z_mean: z.clone(),
                    z_second: z_second[j][k].clone(),
                });
            }
        }
    }
    out
}

fn weighted_quad(a: &DMatrix<f64>, moment: &DMatrix<f64>, lam: &DVector<f64>) -> f64 {
    // tr(Lambda^{-1} A M A^T)
    let amat = a * moment * a.transpose();
    (0..lam.len()).map(|i| amat[(i, i)] / lam[i]).sum()
}

/// Frame-loading auxiliary of component `m` at `u`, from per-frame terms.
pub fn q_frame_loading(terms: &[FrameTerm], comp: &ComponentParams, m: usize, u: &DMatrix<f64>) -> f64 {
    let lam = &comp.noise_var;
    terms
        .iter()
        .filter(|t| t.m == m)
        .map(|t| {
            let r = &t.y - &comp.state_loading * &t.z_mean - &comp.bias;
            let ux = u * &t.x_mean;
            let lin: f64 = (0..lam.len()).map(|i| r[i] * ux[i] / lam[i]).sum();
            let second = &t.x_cov + &t.x_mean * t.x_mean.transpose();
            t.gamma * (lin - 0.5 * weighted_quad(u, &second, lam))
        })
        .sum()
}

/// State-loading auxiliary of component `m` at `g`.
pub fn q_state_loading(terms: &[FrameTerm], comp: &ComponentParams, m: usize, g: &DMatrix<f64>) -> f64 {
    let lam = &comp.noise_var;
    terms
        .iter()
        .filter(|t| t.m == m)
        .map(|t| {
            let s = &t.y - &comp.frame_loading * &t.x_mean - &comp.bias;
            let gz = g * &t.z_mean;
            let lin: f64 = (0..lam.len()).map(|i| s[i] * gz[i] / lam[i]).sum();
            t.gamma * (lin - 0.5 * weighted_quad(g, &t.z_second, lam))
        })
        .sum()
}

/// Bias auxiliary of component `m` at `b`.
pub fn q_bias(terms: &[FrameTerm], comp: &ComponentParams, m: usize, b: &DVector<f64>) -> f64 {
    let lam = &comp.noise_var;
    terms
        .iter()
        .filter(|t| t.m == m)
        .map(|t| {
            let e = &t.y - &comp.frame_loading * &t.x_mean - &comp.state_loading * &t.z_mean - b;
            -0.5 * t.gamma * (0..lam.len()).map(|i| e[i] * e[i] / lam[i]).sum::<f64>()
        })
        .sum()
}

/// Noise auxiliary of component `m` at `lam`.
pub fn q_noise(terms: &[FrameTerm], comp: &ComponentParams, m: usize, lam: &DVector<f64>) -> f64 {
    terms
        .iter()
        .filter(|t| t.m == m)
        .map(|t| {
            let e = &t.y - &comp.frame_loading * &t.x_mean - &comp.state_loading * &t.z_mean - &comp.bias;
            let unc = &comp.frame_loading * &t.x_cov * comp.frame_loading.transpose();
            -0.5 * t.gamma
                * (0..lam.len())
                    .map(|i| lam[i].ln() + (e[i] * e[i] + unc[(i, i)]) / lam[i])
                    .sum::<f64>()
        })
        .sum()
}

/// Central-difference gradient of `f` at `x`, with step `rel * max(1, |x_i|)`.
pub fn numeric_gradient(x: &[f64], rel: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let h = rel * x[i].abs().max(1.0);
        buf[i] = x[i] + h;
        let up = f(&buf);
        buf[i] = x[i] - h;
        let down = f(&buf);
        buf[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}
