//! Mixture-of-factor-analysers background model.
//!
//! Used to pick a short list of components per frame before the full tied
//! PLDA evaluation, and to initialize the component parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{put_f64s, put_u32, to_u32, LeReader};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::inference::ComponentCache;
use crate::math::log_sum_exp;
use crate::model::row_major;
use crate::shard::ExecPolicy;

pub const BACKGROUND_MAGIC: &[u8; 8] = b"PLDABGM1";

/// Components scored per frame unless configured otherwise.
pub const DEFAULT_SELECT_N: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorAnalyser {
    pub mean: DVector<f64>,
    /// `d x r`.
    pub loading: DMatrix<f64>,
    pub noise_var: DVector<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundModel {
    pub components: Vec<FactorAnalyser>,
}

impl BackgroundModel {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn rank(&self) -> usize {
        self.components.first().map_or(0, |c| c.loading.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.feature_dim(), self.rank());
        if self.components.is_empty() {
            return Err(Error::InvalidArgument("background model has no components".into()));
        }
        for (m, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.noise_var.len() != d {
                return Err(Error::dim(format!("background component {m} dimension"), d, c.mean.len()));
            }
            if c.loading.shape() != (d, r) {
                return Err(Error::dim(format!("background component {m} rank"), r, c.loading.ncols()));
            }
            if c.noise_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Numerical(format!("background component {m} noise not positive")));
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(Error::InvalidArgument(format!("background weight {} outside [0, 1]", c.weight)));
            }
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "background weights not normalized (sum {sum})"
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BACKGROUND_MAGIC)?;
        put_u32(w, 1)?;
        put_u32(w, to_u32(self.feature_dim(), "d")?)?;
        put_u32(w, to_u32(self.rank(), "r")?)?;
        put_u32(w, to_u32(self.num_components(), "M")?)?;
        for c in &self.components {
            put_f64s(w, c.mean.iter().copied())?;
            put_f64s(w, row_major(&c.loading))?;
            put_f64s(w, c.noise_var.iter().copied())?;
            put_f64s(w, [c.weight])?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r, "background model file");
        r.magic(BACKGROUND_MAGIC)?;
        let version = r.u32("version")?;
        if version != 1 {
            return Err(Error::format(format!(
                "background model file: unsupported version {version}"
            )));
        }
        let d = r.u32("d")? as usize;
        let rank = r.u32("r")? as usize;
        let m = r.u32("M")? as usize;
        if d == 0 || m == 0 || rank > d {
            return Err(Error::format(format!(
                "background model file: invalid dimensions d={d} r={rank} M={m}"
            )));
        }
        let mut components = Vec::with_capacity(m);
        for _ in 0..m {
            let mean = DVector::from_vec(r.f64s(d, "mean")?);
            let loading = DMatrix::from_row_slice(d, rank, &r.f64s(d * rank, "loading")?);
            let noise_var = DVector::from_vec(r.f64s(d, "noise variance")?);
            let weight = r.f64("weight")?;
            components.push(FactorAnalyser {
                mean,
                loading,
                noise_var,
                weight,
            });
        }
        r.finish()?;
        let bg = Self { components };
        bg.validate()
            .map_err(|e| Error::format(format!("background model file: {e}")))?;
        Ok(bg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Background model with per-component Woodbury caches.
pub struct BackgroundScorer<'a> {
    pub bg: &'a BackgroundModel,
    caches: Vec<ComponentCache>,
    log_weights: Vec<f64>,
}

impl<'a> BackgroundScorer<'a> {
    pub fn new(bg: &'a BackgroundModel) -> Result<Self> {
        let caches = bg
            .components
            .iter()
            .map(|c| ComponentCache::from_loading(&c.loading, &c.noise_var))
            .collect::<Result<Vec<_>>>()?;
        let log_weights = bg.components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            bg,
            caches,
            log_weights,
        })
    }

    /// `log w_m + log N(y; mu_m, W_m W_m^T + psi_m)` for every component.
    pub fn component_scores(&self, y: &[f64], residual: &mut [f64], out: &mut Vec<f64>) {
        out.clear();
        for ((c, cache), lw) in self.bg.components.iter().zip(&self.caches).zip(&self.log_weights) {
            for ((r, yi), mi) in residual.iter_mut().zip(y).zip(c.mean.iter()) {
                *r = yi - mi;
            }
            out.push(lw + cache.woodbury.log_density_centered(residual));
        }
    }

    /// Indices of the `n` best components for `y`, best first. `n` is clamped
    /// to `1..=M`; ties go to the lower index.
    pub fn select(&self, y: &[f64], n: usize) -> Result<Vec<usize>> {
        let d = self.bg.feature_dim();
        if y.len() != d {
            return Err(Error::dim("feature vector", d, y.len()));
        }
        let mut residual = vec![0.0; d];
        let mut scores = Vec::with_capacity(self.bg.num_components());
        self.component_scores(y, &mut residual, &mut scores);
        Ok(top_n(&scores, n))
    }

    /// Per-frame selections for a whole feature matrix.
    pub fn select_all(&self, features: &FeatureMatrix, n: usize, policy: ExecPolicy) -> Result<Vec<Vec<usize>>> {
        let d = self.bg.feature_dim();
        if features.dim() != d {
            return Err(Error::dim("feature dimension", d, features.dim()));
        }
        let lists = policy
            .map_reduce(
                features.num_frames(),
                |range| {
                    let mut residual = vec![0.0; d];
                    let mut scores = Vec::new();
                    range
                        .map(|t| {
                            self.component_scores(features.frame(t), &mut residual, &mut scores);
                            top_n(&scores, n)
                        })
                        .collect::<Vec<_>>()
                },
                |mut a, b| {
                    a.extend(b);
                    a
                },
            )
            .unwrap_or_default();
        Ok(lists)
    }
}

fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let n = n.clamp(1, scores.len().max(1));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// The `n` components with the highest weighted likelihood for `y`, best first.
pub fn select_components(bg: &BackgroundModel, y: &[f64], n: usize) -> Result<Vec<usize>> {
    BackgroundScorer::new(bg)?.select(y, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BgTrainConfig {
    pub components: usize,
    pub rank: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Noise variances are floored at this multiple of the global data variance.
    pub variance_floor_scale: f64,
    pub policy: ExecPolicy,
}

impl BgTrainConfig {
    pub fn new(components: usize, rank: usize, iterations: usize, seed: u64) -> Self {
        Self {
            components,
            rank,
            iterations,
            seed,
            variance_floor_scale: 1e-6,
            policy: ExecPolicy::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BgTrainResult {
    pub model: BackgroundModel,
    /// Data log-likelihood of the model entering each iteration, followed by
    /// that of the final model.
    pub loglik_history: Vec<f64>,
}

struct FaStats {
    occ: f64,
    sum_y: DVector<f64>,
    sum_x: DVector<f64>,
    sum_yx: DMatrix<f64>,
    sum_xx: DMatrix<f64>,
    sum_yy: DVector<f64>,
}

impl FaStats {
    fn zeros(d: usize, r: usize) -> Self {
        Self {
            occ: 0.0,
            sum_y: DVector::zeros(d),
            sum_x: DVector::zeros(r),
            sum_yx: DMatrix::zeros(d, r),
            sum_xx: DMatrix::zeros(r, r),
            sum_yy: DVector::zeros(d),
        }
    }

    fn merge(&mut self, o: &Self) {
        self.occ += o.occ;
        self.sum_y += &o.sum_y;
        self.sum_x += &o.sum_x;
        self.sum_yx += &o.sum_yx;
        self.sum_xx += &o.sum_xx;
        self.sum_yy += &o.sum_yy;
    }
}

struct BgAcc {
    stats: Vec<FaStats>,
    loglik: f64,
}

impl BgAcc {
    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.merge(b);
        }
        self.loglik += other.loglik;
        self
    }
}

fn bg_estep(scorer: &BackgroundScorer, features: &FeatureMatrix, range: Range<usize>) -> BgAcc {
    let bg = scorer.bg;
    let (d, r) = (bg.feature_dim(), bg.rank());
    let mut acc = BgAcc {
        stats: (0..bg.num_components()).map(|_| FaStats::zeros(d, r)).collect(),
        loglik: 0.0,
    };
    let mut residual = vec![0.0; d];
    let mut scores = Vec::new();
    let mut x = vec![0.0; r];
    for t in range {
        let y = features.frame(t);
        scorer.component_scores(y, &mut residual, &mut scores);
        let total = log_sum_exp(scores.iter().copied());
        acc.loglik += total;
        for (m, s) in scores.iter().enumerate() {
            let h = (s - total).exp();
            if h == 0.0 {
                continue;
            }
            let c = &bg.components[m];
            for ((res, yi), mi) in residual.iter_mut().zip(y).zip(c.mean.iter()) {
                *res = yi - mi;
            }
            scorer.caches[m].frame_mean(&residual, &mut x);
            let st = &mut acc.stats[m];
            st.occ += h;
            for (i, yi) in y.iter().enumerate() {
                st.sum_y[i] += h * yi;
                st.sum_yy[i] += h * yi * yi;
            }
            for (a, xa) in x.iter().enumerate() {
                let hx = h * xa;
                st.sum_x[a] += hx;
                for (i, yi) in y.iter().enumerate() {
                    st.sum_yx[(i, a)] += yi * hx;
                }
                for (b, xb) in x.iter().enumerate() {
                    st.sum_xx[(b, a)] += hx * xb;
                }
            }
        }
    }
    acc
}

fn data_loglik(bg: &BackgroundModel, features: &FeatureMatrix, policy: ExecPolicy) -> Result<f64> {
    let scorer = BackgroundScorer::new(bg)?;
    Ok(policy
        .map_reduce(
            features.num_frames(),
            |range| {
                let mut residual = vec![0.0; bg.feature_dim()];
                let mut scores = Vec::new();
                range
                    .map(|t| {
                        scorer.component_scores(features.frame(t), &mut residual, &mut scores);
                        log_sum_exp(scores.iter().copied())
                    })
                    .sum::<f64>()
            },
            |a, b| a + b,
        )
        .unwrap_or(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy D^2 seeding: each step draws `2 + ln m` candidates with probability
/// proportional to the squared distance from the nearest chosen frame and
/// keeps the one leaving the smallest total squared distance.
fn init_means(features: &FeatureMatrix, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = features.num_frames();
    let trials = 2 + (m as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = (0..n)
        .map(|t| sq_dist(features.frame(t), features.frame(first)))
        .collect();
    while chosen.len() < m {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (t, dt) in dist.iter().enumerate() {
                    if u < *dt {
                        pick = t;
                        break;
                    }
                    u -= dt;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let y = features.frame(cand);
            let updated: Vec<f64> = dist
                .iter()
                .enumerate()
                .map(|(t, dt)| dt.min(sq_dist(features.frame(t), y)))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.1) {
                best = Some((cand, potential, updated));
            }
        }
        let (cand, _, updated) = best.expect("at least one trial");
        chosen.push(cand);
        dist = updated;
    }
    chosen
}

/// EM training of a mixture of factor analysers.
pub fn train_bg(features: &FeatureMatrix, config: &BgTrainConfig) -> Result<BgTrainResult> {
    let (m, r) = (config.components, config.rank);
    let n = features.num_frames();
    let d = features.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("component count must be positive".into()));
    }
    if r > d {
        return Err(Error::InvalidArgument(format!("rank {r} exceeds feature dimension {d}")));
    }
    if n < m {
        return Err(Error::InvalidArgument(format!(
            "{n} frames is fewer than {m} components"
        )));
    }
    let (_, var) = features.mean_var();
    let floor = var.map(|v| (v * config.variance_floor_scale).max(f64::MIN_POSITIVE));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds = init_means(features, m, &mut rng);
    let components = seeds
        .iter()
        .map(|&t| FactorAnalyser {
            mean: DVector::from_row_slice(features.frame(t)),
            loading: DMatrix::from_fn(d, r, |i, _| {
                0.1 * var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
            }),
            noise_var: var.zip_map(&floor, f64::max),
            weight: 1.0 / m as f64,
        })
        .collect();
    let mut bg = BackgroundModel { components };
    let mut history = Vec::with_capacity(config.iterations + 1);

    for _ in 0..config.iterations {
        let scorer = BackgroundScorer::new(&bg)?;
        let acc = config
            .policy
            .map_reduce(n, |range| bg_estep(&scorer, features, range), BgAcc::merge)
            .ok_or(Error::NoFrames)?;
        history.push(acc.loglik);
        let covs: Vec<DMatrix<f64>> = scorer.caches.iter().map(|c| c.frame_cov.clone()).collect();
        drop(scorer);
        for ((comp, st), cov) in bg.components.iter_mut().zip(&acc.stats).zip(&covs) {
            comp.weight = st.occ / n as f64;
            if st.occ <= 0.0 {
                continue;
            }
            // Joint update of [W mu] against the augmented moments of [x; 1].
            let mut moment = DMatrix::zeros(r + 1, r + 1);
            moment.view_mut((0, 0), (r, r)).copy_from(&(&st.sum_xx + cov * st.occ));
            moment.view_mut((0, r), (r, 1)).copy_from(&st.sum_x);
            moment.view_mut((r, 0), (1, r)).copy_from(&st.sum_x.transpose());
            moment[(r, r)] = st.occ;
            let mut cross = DMatrix::zeros(d, r + 1);
            cross.view_mut((0, 0), (d, r)).copy_from(&st.sum_yx);
            cross.view_mut((0, r), (d, 1)).copy_from(&st.sum_y);
            let (joint, _) = crate::math::solve_moment_right(&cross, &moment)?;
            comp.loading = joint.columns(0, r).into_owned();
            comp.mean = joint.column(r).into_owned();
            for i in 0..d {
                let explained: f64 = (0..=r).map(|c| joint[(i, c)] * cross[(i, c)]).sum();
                let v = (st.sum_yy[i] - explained) / st.occ;
                comp.noise_var[i] = v.max(floor[i]);
            }
        }
        let total: f64 = bg.components.iter().map(|c| c.weight).sum();
        for c in &mut bg.components {
            c.weight /= total;
        }
    }
    history.push(data_loglik(&bg, features, config.policy)?);
    bg.validate()?;
    Ok(BgTrainResult {
        model: bg,
        loglik_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fa(mean: Vec<f64>, weight: f64) -> FactorAnalyser {
        let d = mean.len();
        FactorAnalyser {
            mean: DVector::from_vec(mean),
            loading: DMatrix::zeros(d, 1),
            noise_var: DVector::from_element(d, 1.0),
            weight,
        }
    }

    #[test]
    fn selects_nearest_mean_first() {
        let bg = BackgroundModel {
            components: vec![
                fa(vec![0.0, 0.0], 0.25),
                fa(vec![10.0, 0.0], 0.25),
                fa(vec![0.0, 10.0], 0.25),
                fa(vec![10.0, 10.0], 0.25),
            ],
        };
        for m in 0..4 {
            let y = bg.components[m].mean.clone();
            let sel = select_components(&bg, y.as_slice(), 2).unwrap();
            assert_eq!(sel[0], m);
            assert_eq!(sel.len(), 2);
        }
        let all = select_components(&bg, &[1.0, 1.0], 4).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(all[0], 0);
        assert_eq!(all[3], 3);
    }

    #[test]
    fn single_diagonal_gaussian() {
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|t| vec![(t % 7) as f64, (t % 3) as f64 * 2.0 - 1.0])
            .collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let res = train_bg(&f, &BgTrainConfig::new(1, 0, 3, 1)).unwrap();
        let (mean, var) = f.mean_var();
        let c = &res.model.components[0];
        assert!((&c.mean - &mean).amax() < 1e-12);
        assert!((&c.noise_var - &var).amax() < 1e-12);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn too_few_frames() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(train_bg(&f, &BgTrainConfig::new(3, 0, 1, 0)).is_err());
    }
}
