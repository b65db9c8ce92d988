//! Variational EM for tied PLDA.
//!
//! One iteration runs two sweeps over the data. The first sweep scores every
//! frame with the current model, takes frame-variable expectations and pools
//! them into a posterior for every sub-state vector. The second sweep rescoring
//! with the updated sub-state vectors gathers the sufficient statistics for the
//! closed-form component updates, which are then applied in the order frame
//! loading, state loading, bias, noise, weights. Every update consumes
//! statistics computed against the pre-update parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::background::{BackgroundModel, DEFAULT_SELECT_N};
use crate::data::{FeatureMatrix, LabelSequence};
use crate::error::{Error, Result};
use crate::inference::{
    state_residual, subtract_frame_term, GaussianPosterior, LikelihoodMode, PairScore, Scorer,
    Scratch, StateLoadingGram, StateVarStats,
};
use crate::math::{add_scaled, log_sum_exp, solve_moment_right};
use crate::model::{
    ComponentParams, Hyperparams, ModelFamily, StateModel, SubState, TiedPldaModel,
    ACTIVE_WEIGHT_THRESHOLD,
};
use crate::shard::ExecPolicy;

/// Components below this occupancy keep their parameters for the iteration.
const MIN_COMPONENT_OCCUPANCY: f64 = 1e-8;

/// Sub-states under one frame of occupancy for this many consecutive
/// iterations are merged into their nearest sibling.
pub const STARVATION_LIMIT: u32 = 3;

/// Frames, their state labels or posteriors, and optional per-frame
/// component short lists.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a LabelSequence,
    pub selection: Option<&'a [Vec<usize>]>,
}

impl<'a> Dataset<'a> {
    pub fn new(features: &'a FeatureMatrix, labels: &'a LabelSequence) -> Self {
        Self {
            features,
            labels,
            selection: None,
        }
    }

    pub fn with_selection(mut self, selection: &'a [Vec<usize>]) -> Self {
        self.selection = Some(selection);
        self
    }

    pub fn num_frames(&self) -> usize {
        self.features.num_frames()
    }

    pub fn validate(&self, model: &TiedPldaModel) -> Result<()> {
        if self.features.dim() != model.feature_dim() {
            return Err(Error::dim(
                "feature dimension",
                model.feature_dim(),
                self.features.dim(),
            ));
        }
        if self.labels.len() != self.features.num_frames() {
            return Err(Error::dim(
                "label count",
                self.features.num_frames(),
                self.labels.len(),
            ));
        }
        self.labels.validate(model.num_states())?;
        if let Some(sel) = self.selection {
            if sel.len() != self.features.num_frames() {
                return Err(Error::dim("selection count", self.features.num_frames(), sel.len()));
            }
            for (t, list) in sel.iter().enumerate() {
                if list.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "frame {t}: empty component selection"
                    )));
                }
                if let Some(m) = list.iter().find(|&&m| m >= model.num_components()) {
                    return Err(Error::InvalidArgument(format!(
                        "frame {t}: selected component {m} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn components(&self, t: usize) -> Option<&'a [usize]> {
        self.selection.map(|s| s[t].as_slice())
    }
}

/// Per-dimension variance floor: `scale` times the data variance (1.0 where
/// the data has none).
pub fn variance_floor(features: &FeatureMatrix, scale: f64) -> DVector<f64> {
    let (_, var) = features.mean_var();
    var.map(|v| scale * if v > 0.0 { v } else { 1.0 })
}

/// Sufficient statistics of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentAcc {
    /// `sum gamma`.
    pub occupancy: f64,
    /// `sum gamma E[x]`.
    pub frame_sum: DVector<f64>,
    /// `sum gamma E[x x^T]`.
    pub frame_moment: DMatrix<f64>,
    /// `sum gamma (y - G z - b) E[x]^T`.
    pub frame_cross: DMatrix<f64>,
    /// `sum gamma (y - U E[x] - b) E[z]^T`.
    pub state_cross: DMatrix<f64>,
    /// `sum gamma E[z z^T]`.
    pub state_moment: DMatrix<f64>,
    /// `sum gamma (y - U E[x] - G z)`.
    pub bias_sum: DVector<f64>,
    /// `sum gamma ((y - U E[x] - G z - b)^2 + diag(U V^{-1} U^T))`.
    pub noise_sum: DVector<f64>,
}

impl ComponentAcc {
    pub fn zeros(h: &Hyperparams) -> Self {
        let (d, p, q) = (h.feature_dim, h.frame_dim, h.state_dim);
        Self {
            occupancy: 0.0,
            frame_sum: DVector::zeros(p),
            frame_moment: DMatrix::zeros(p, p),
            frame_cross: DMatrix::zeros(d, p),
            state_cross: DMatrix::zeros(d, q),
            state_moment: DMatrix::zeros(q, q),
            bias_sum: DVector::zeros(d),
            noise_sum: DVector::zeros(d),
        }
    }

    pub fn merge(&mut self, o: &Self) {
        self.occupancy += o.occupancy;
        self.frame_sum += &o.frame_sum;
        self.frame_moment += &o.frame_moment;
        self.frame_cross += &o.frame_cross;
        self.state_cross += &o.state_cross;
        self.state_moment += &o.state_moment;
        self.bias_sum += &o.bias_sum;
        self.noise_sum += &o.noise_sum;
    }
}

/// E-step statistics, mergeable across data shards.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulators {
    pub components: Vec<ComponentAcc>,
    /// `sum_t gamma_jkmt` as a `K_j x M` matrix per state.
    pub pair_occupancy: Vec<DMatrix<f64>>,
    pub frames: usize,
    /// `sum_t sum_j P(j | y_t)`.
    pub state_mass: f64,
    /// `sum_t sum_j P(j | y_t) log p(y_t | j)` under the model entering the E-step.
    pub loglik: f64,
}

impl Accumulators {
    pub fn zeros(model: &TiedPldaModel) -> Self {
        Self {
            components: (0..model.num_components())
                .map(|_| ComponentAcc::zeros(&model.hyper))
                .collect(),
            pair_occupancy: model
                .states
                .iter()
                .map(|s| DMatrix::zeros(s.substates.len(), model.num_components()))
                .collect(),
            frames: 0,
            state_mass: 0.0,
            loglik: 0.0,
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.merge_from(&other);
        self
    }

    pub fn merge_from(&mut self, other: &Self) {
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            a.merge(b);
        }
        for (a, b) in self.pair_occupancy.iter_mut().zip(&other.pair_occupancy) {
            *a += b;
        }
        self.frames += other.frames;
        self.state_mass += other.state_mass;
        self.loglik += other.loglik;
    }

    pub fn substate_occupancy(&self) -> Vec<Vec<f64>> {
        self.pair_occupancy
            .iter()
            .map(|occ| occ.row_iter().map(|r| r.sum()).collect())
            .collect()
    }

    pub fn total_occupancy(&self) -> f64 {
        self.components.iter().map(|c| c.occupancy).sum()
    }

    pub fn average_loglik(&self) -> f64 {
        self.loglik / self.frames.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct EStepConfig {
    pub mode: LikelihoodMode,
    pub policy: ExecPolicy,
}

/// Output of the two-sweep E-step.
#[derive(Clone, Debug)]
pub struct EStep {
    pub acc: Accumulators,
    /// Posterior of every sub-state vector; `None` where the sub-state saw no
    /// data and keeps its previous value.
    pub state_posteriors: Vec<Vec<Option<GaussianPosterior>>>,
}

impl EStep {
    /// The model with sub-state vectors replaced by their posterior means.
    pub fn apply_state_vectors(&self, model: &TiedPldaModel) -> TiedPldaModel {
        let mut out = model.clone();
        for (state, posts) in out.states.iter_mut().zip(&self.state_posteriors) {
            for (sub, post) in state.substates.iter_mut().zip(posts) {
                if let Some(p) = post {
                    sub.vector = p.mean.clone();
                }
            }
        }
        out
    }
}

struct ZSweep {
    stats: Vec<Vec<StateVarStats>>,
    frames: usize,
    state_mass: f64,
    loglik: f64,
}

impl ZSweep {
    fn zeros(model: &TiedPldaModel) -> Self {
        Self {
            stats: model
                .states
                .iter()
                .map(|s| vec![StateVarStats::zeros(model.hyper.state_dim); s.substates.len()])
                .collect(),
            frames: 0,
            state_mass: 0.0,
            loglik: 0.0,
        }
    }

    fn merge(mut self, o: Self) -> Self {
        for (a, b) in self.stats.iter_mut().zip(&o.stats) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
        self.frames += o.frames;
        self.state_mass += o.state_mass;
        self.loglik += o.loglik;
        self
    }
}

fn merge_results<A>(a: Result<A>, b: Result<A>, f: impl FnOnce(A, A) -> A) -> Result<A> {
    Ok(f(a?, b?))
}

/// Scores frame `t` against state `j`, returning the log-likelihood and
/// leaving the per-pair scores in `entries`.
fn score_frame(
    scorer: &Scorer,
    data: &Dataset,
    t: usize,
    j: usize,
    mode: LikelihoodMode,
    scratch: &mut Scratch,
    entries: &mut Vec<PairScore>,
) -> Result<f64> {
    let y = data.features.frame(t);
    scorer.pair_scores(j, y, data.components(t), mode, scratch, entries);
    let total = log_sum_exp(entries.iter().map(|e| e.log_joint));
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "frame {t}: every selected component yields zero likelihood for state {j}"
        )));
    }
    Ok(total)
}

fn z_sweep(
    scorer: &Scorer,
    grams: &[StateLoadingGram],
    data: &Dataset,
    mode: LikelihoodMode,
    range: std::ops::Range<usize>,
) -> Result<ZSweep> {
    let model = scorer.model;
    let mut out = ZSweep::zeros(model);
    let mut scratch = Scratch::new(model);
    let mut entries = Vec::new();
    let mut residual = vec![0.0; model.feature_dim()];
    let mut x = vec![0.0; model.hyper.frame_dim];
    for t in range {
        let y = data.features.frame(t);
        out.frames += 1;
        for (j, mass) in data.labels.posteriors(t) {
            if mass <= 0.0 {
                continue;
            }
            let total = score_frame(scorer, data, t, j, mode, &mut scratch, &mut entries)?;
            out.loglik += mass * total;
            out.state_mass += mass;
            for e in &entries {
                let gamma = mass * (e.log_joint - total).exp();
                if gamma == 0.0 {
                    continue;
                }
                let (k, m) = (e.substate, e.component);
                let comp = &model.components[m];
                let z = model.states[j].substates[k].vector.as_slice();
                state_residual(comp, z, y, &mut residual);
                scorer.caches[m].frame_mean(&residual, &mut x);
                // y - U E[x] - b
                for ((r, yi), bi) in residual.iter_mut().zip(y).zip(comp.bias.iter()) {
                    *r = yi - bi;
                }
                subtract_frame_term(comp, &x, &mut residual);
                out.stats[j][k].add(&grams[m], gamma, &residual);
            }
        }
    }
    Ok(out)
}

fn stats_sweep(
    scorer: &Scorer,
    state_second_moments: &[Vec<DMatrix<f64>>],
    data: &Dataset,
    mode: LikelihoodMode,
    range: std::ops::Range<usize>,
) -> Result<Accumulators> {
    let model = scorer.model;
    let d = model.feature_dim();
    let mut acc = Accumulators::zeros(model);
    let mut scratch = Scratch::new(model);
    let mut entries = Vec::new();
    let mut r_state = vec![0.0; d];
    let mut r_full = vec![0.0; d];
    let mut x = vec![0.0; model.hyper.frame_dim];
    for t in range {
        let y = data.features.frame(t);
        acc.frames += 1;
        for (j, mass) in data.labels.posteriors(t) {
            if mass <= 0.0 {
                continue;
            }
            let total = score_frame(scorer, data, t, j, mode, &mut scratch, &mut entries)?;
            acc.state_mass += mass;
            for e in &entries {
                let gamma = mass * (e.log_joint - total).exp();
                if gamma == 0.0 {
                    continue;
                }
                let (k, m) = (e.substate, e.component);
                let comp = &model.components[m];
                let cache = &scorer.caches[m];
                let zvec = &model.states[j].substates[k].vector;
                // y - G z - b
                state_residual(comp, zvec.as_slice(), y, &mut r_state);
                cache.frame_mean(&r_state, &mut x);
                // y - U x - G z - b
                r_full.copy_from_slice(&r_state);
                subtract_frame_term(comp, &x, &mut r_full);

                let ca = &mut acc.components[m];
                let xv = DVectorView::from_slice(&x, x.len());
                let rs = DVectorView::from_slice(&r_state, d);
                ca.occupancy += gamma;
                ca.frame_sum.axpy(gamma, &xv, 1.0);
                ca.frame_moment.ger(gamma, &xv, &xv, 1.0);
                add_scaled(&mut ca.frame_moment, gamma, &cache.frame_cov);
                ca.frame_cross.ger(gamma, &rs, &xv, 1.0);
                // y - U x - b = r_full + G z
                let gz = &comp.state_loading * zvec;
                let r_nob = DVectorView::from_slice(&r_full, d) + &gz;
                ca.state_cross.ger(gamma, &r_nob, zvec, 1.0);
                add_scaled(&mut ca.state_moment, gamma, &state_second_moments[j][k]);
                for i in 0..d {
                    ca.bias_sum[i] += gamma * (r_full[i] + comp.bias[i]);
                    ca.noise_sum[i] +=
                        gamma * (r_full[i] * r_full[i] + cache.frame_cov_diag[i]);
                }
                acc.pair_occupancy[j][(k, m)] += gamma;
            }
        }
    }
    Ok(acc)
}

/// Two-sweep E-step. The first sweep pools frame-variable expectations under
/// the current model into sub-state posteriors and records the log-likelihood
/// of the current model; the second gathers component statistics with the
/// updated sub-state vectors.
pub fn estep(model: &TiedPldaModel, data: &Dataset, config: &EStepConfig) -> Result<EStep> {
    data.validate(model)?;
    let n = data.num_frames();
    if n == 0 {
        return Err(Error::NoFrames);
    }
    let scorer = Scorer::new(model)?;
    let grams: Vec<StateLoadingGram> = model.components.iter().map(StateLoadingGram::new).collect();
    let zs = config
        .policy
        .map_reduce(
            n,
            |range| z_sweep(&scorer, &grams, data, config.mode, range),
            |a, b| merge_results(a, b, ZSweep::merge),
        )
        .ok_or(Error::NoFrames)??;

    let mut state_posteriors = Vec::with_capacity(model.num_states());
    let mut second_moments = Vec::with_capacity(model.num_states());
    for (j, stats) in zs.stats.iter().enumerate() {
        let mut posts = Vec::with_capacity(stats.len());
        let mut moments = Vec::with_capacity(stats.len());
        for (k, st) in stats.iter().enumerate() {
            if st.occupancy > 0.0 {
                let post = st.posterior()?;
                moments.push(post.second_moment()?);
                posts.push(Some(post));
            } else {
                let z = &model.states[j].substates[k].vector;
                moments.push(z * z.transpose());
                posts.push(None);
            }
        }
        state_posteriors.push(posts);
        second_moments.push(moments);
    }
    let out = EStep {
        acc: Accumulators::zeros(model),
        state_posteriors,
    };
    let updated = out.apply_state_vectors(model);
    let scorer = Scorer::new(&updated)?;
    let mut acc = config
        .policy
        .map_reduce(
            n,
            |range| stats_sweep(&scorer, &second_moments, data, config.mode, range),
            |a, b| merge_results(a, b, Accumulators::merge),
        )
        .ok_or(Error::NoFrames)??;
    acc.loglik = zs.loglik;
    Ok(EStep { acc, ..out })
}

/// `tr(Lambda^{-1} (-1/2 U S_xx U^T + S_yx U^T))`.
pub fn aux_frame_loading(acc: &ComponentAcc, noise_var: &DVector<f64>, loading: &DMatrix<f64>) -> f64 {
    aux_loading(&acc.frame_moment, &acc.frame_cross, noise_var, loading)
}

/// `tr(Lambda^{-1} (-1/2 G S_zz G^T + S_rz G^T))`.
pub fn aux_state_loading(acc: &ComponentAcc, noise_var: &DVector<f64>, loading: &DMatrix<f64>) -> f64 {
    aux_loading(&acc.state_moment, &acc.state_cross, noise_var, loading)
}

fn aux_loading(
    moment: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    loading: &DMatrix<f64>,
) -> f64 {
    let quad = loading * moment;
    (0..loading.nrows())
        .map(|i| {
            let row = loading.row(i);
            let v = -0.5 * row.dot(&quad.row(i)) + row.dot(&cross.row(i));
            v / noise_var[i]
        })
        .sum()
}

/// Bias auxiliary, up to a constant: `sum_i (s_i b_i - occ b_i^2 / 2) / lambda_i`.
pub fn aux_bias(acc: &ComponentAcc, noise_var: &DVector<f64>, bias: &DVector<f64>) -> f64 {
    (0..bias.len())
        .map(|i| (acc.bias_sum[i] * bias[i] - 0.5 * acc.occupancy * bias[i] * bias[i]) / noise_var[i])
        .sum()
}

/// Noise auxiliary, up to a constant: `-1/2 sum_i (occ log lambda_i + S_i / lambda_i)`.
pub fn aux_noise(acc: &ComponentAcc, noise_var: &DVector<f64>) -> f64 {
    -0.5 * noise_var
        .iter()
        .zip(acc.noise_sum.iter())
        .map(|(l, s)| acc.occupancy * l.ln() + s / l)
        .sum::<f64>()
}

/// `sum occ_jkm log w_jkm`.
pub fn aux_weights(acc: &Accumulators, model: &TiedPldaModel) -> f64 {
    let mut q = 0.0;
    for (j, occ) in acc.pair_occupancy.iter().enumerate() {
        for k in 0..occ.nrows() {
            for m in 0..occ.ncols() {
                let o = occ[(k, m)];
                if o > 0.0 {
                    q += o * model.pair_weight(j, k, m).ln();
                }
            }
        }
    }
    q
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateInfo {
    /// Components whose moment matrix needed a ridge.
    pub ridged: usize,
    /// Components left unchanged for lack of occupancy.
    pub skipped: usize,
    /// Floored entries (noise variances or weights).
    pub floored: usize,
}

fn update_loadings(
    model: &TiedPldaModel,
    acc: &Accumulators,
    pick: impl Fn(&ComponentAcc) -> (&DMatrix<f64>, &DMatrix<f64>),
    current: impl Fn(&ComponentParams) -> &DMatrix<f64>,
) -> Result<(Vec<DMatrix<f64>>, UpdateInfo)> {
    let mut info = UpdateInfo::default();
    let mut out = Vec::with_capacity(model.num_components());
    for (comp, ca) in model.components.iter().zip(&acc.components) {
        if ca.occupancy < MIN_COMPONENT_OCCUPANCY || current(comp).ncols() == 0 {
            info.skipped += 1;
            out.push(current(comp).clone());
            continue;
        }
        let (cross, moment) = pick(ca);
        let (new, ridged) = solve_moment_right(cross, moment)?;
        info.ridged += ridged as usize;
        out.push(new);
    }
    Ok((out, info))
}

/// `U_m = [sum gamma (y - G z - b) E[x]^T] [sum gamma E[x x^T]]^{-1}`.
pub fn update_frame_loading(
    acc: &Accumulators,
    model: &TiedPldaModel,
) -> Result<(Vec<DMatrix<f64>>, UpdateInfo)> {
    update_loadings(
        model,
        acc,
        |c| (&c.frame_cross, &c.frame_moment),
        |c| &c.frame_loading,
    )
}

/// `G_m = [sum gamma (y - U E[x] - b) E[z]^T] [sum gamma E[z z^T]]^{-1}`.
pub fn update_state_loading(
    acc: &Accumulators,
    model: &TiedPldaModel,
) -> Result<(Vec<DMatrix<f64>>, UpdateInfo)> {
    update_loadings(
        model,
        acc,
        |c| (&c.state_cross, &c.state_moment),
        |c| &c.state_loading,
    )
}

/// `b_m = sum gamma (y - U E[x] - G z) / sum gamma`.
pub fn update_bias(acc: &Accumulators, model: &TiedPldaModel) -> (Vec<DVector<f64>>, UpdateInfo) {
    let mut info = UpdateInfo::default();
    let out = model
        .components
        .iter()
        .zip(&acc.components)
        .map(|(comp, ca)| {
            if ca.occupancy < MIN_COMPONENT_OCCUPANCY {
                info.skipped += 1;
                comp.bias.clone()
            } else {
                &ca.bias_sum / ca.occupancy
            }
        })
        .collect();
    (out, info)
}

/// `Lambda_m = diag(sum gamma (e e^T + U V^{-1} U^T)) / sum gamma`, floored.
pub fn update_noise(
    acc: &Accumulators,
    model: &TiedPldaModel,
    floor: &DVector<f64>,
) -> (Vec<DVector<f64>>, UpdateInfo) {
    let mut info = UpdateInfo::default();
    let out = model
        .components
        .iter()
        .zip(&acc.components)
        .map(|(comp, ca)| {
            if ca.occupancy < MIN_COMPONENT_OCCUPANCY {
                info.skipped += 1;
                return comp.noise_var.clone();
            }
            DVector::from_fn(comp.noise_var.len(), |i, _| {
                let v = ca.noise_sum[i] / ca.occupancy;
                if v < floor[i] {
                    info.floored += 1;
                    floor[i]
                } else {
                    v
                }
            })
        })
        .collect();
    (out, info)
}

/// Floors every weight at `floor` and renormalizes so the result sums to one
/// with no entry below the floor. Returns the number of floored entries.
pub fn floor_weights(weights: &mut [f64], floor: f64) -> usize {
    let n = weights.len();
    if n == 0 || floor <= 0.0 {
        return 0;
    }
    let mut fixed = vec![false; n];
    loop {
        let mut changed = false;
        for (w, f) in weights.iter().zip(fixed.iter_mut()) {
            if !*f && *w < floor {
                *f = true;
                changed = true;
            }
        }
        let n_fixed = fixed.iter().filter(|f| **f).count();
        let free_mass = 1.0 - n_fixed as f64 * floor;
        let free_sum: f64 = weights
            .iter()
            .zip(&fixed)
            .filter(|(_, f)| !**f)
            .map(|(w, _)| *w)
            .sum();
        for (w, f) in weights.iter_mut().zip(&fixed) {
            if *f {
                *w = floor;
            } else if free_sum > 0.0 {
                *w *= free_mass / free_sum;
            }
        }
        if !changed || n_fixed == n {
            return n_fixed;
        }
    }
}

/// New sub-state and component weights for every state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateWeights {
    pub substate: Vec<f64>,
    pub component: DVector<f64>,
}

/// `c_jk = sum_{m,t} gamma / sum_{k,m,t} gamma`, `pi_jm = sum_{k,t} gamma / sum_{k,m,t} gamma`;
/// component weights are floored at `floor` and renormalized. States without
/// occupancy keep their weights.
pub fn update_weights(
    acc: &Accumulators,
    model: &TiedPldaModel,
    floor: f64,
) -> Result<(Vec<StateWeights>, UpdateInfo)> {
    let m_count = model.num_components();
    if !(0.0..1.0 / m_count as f64).contains(&floor) {
        return Err(Error::InvalidArgument(format!(
            "weight floor {floor} outside [0, 1/M)"
        )));
    }
    let mut info = UpdateInfo::default();
    let mut out = Vec::with_capacity(model.num_states());
    for (state, occ) in model.states.iter().zip(&acc.pair_occupancy) {
        let total = occ.sum();
        if !(total > 0.0) {
            info.skipped += 1;
            out.push(StateWeights {
                substate: state.substates.iter().map(|s| s.weight).collect(),
                component: state.component_weights.clone(),
            });
            continue;
        }
        let mut substate: Vec<f64> = occ.row_iter().map(|r| r.sum() / total).collect();
        let mut component: Vec<f64> = occ.column_iter().map(|c| c.sum() / total).collect();
        info.floored += floor_weights(&mut component, floor);
        if model.family == ModelFamily::Mixture {
            substate.clone_from(&component);
        }
        out.push(StateWeights {
            substate,
            component: DVector::from_vec(component),
        });
    }
    Ok((out, info))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub weight_floor: f64,
    pub variance_floor_scale: f64,
    pub select_n: usize,
    pub deterministic: bool,
    pub seed: u64,
    pub likelihood_mode: LikelihoodMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            weight_floor: 1e-5,
            variance_floor_scale: 1e-6,
            select_n: DEFAULT_SELECT_N,
            deterministic: true,
            seed: 0,
            likelihood_mode: LikelihoodMode::Uncertainty,
        }
    }
}

impl TrainConfig {
    pub fn estep_config(&self) -> EStepConfig {
        EStepConfig {
            mode: self.likelihood_mode,
            policy: ExecPolicy {
                deterministic: self.deterministic,
            },
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// `key = value` lines; `#` starts a comment. Unknown keys are rejected.
impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| {
                Error::InvalidArgument(format!("config line {}: {what}: '{raw}'", lineno + 1))
            };
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad("bad integer"))?,
                "weight-floor" => cfg.weight_floor = value.parse().map_err(|_| bad("bad number"))?,
                "variance-floor-scale" => {
                    cfg.variance_floor_scale = value.parse().map_err(|_| bad("bad number"))?
                }
                "select-n" => cfg.select_n = value.parse().map_err(|_| bad("bad integer"))?,
                "deterministic" => {
                    cfg.deterministic = parse_bool(value).ok_or_else(|| bad("bad boolean"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("bad integer"))?,
                "likelihood-mode" => cfg.likelihood_mode = value.parse()?,
                _ => return Err(bad("unknown key")),
            }
        }
        if cfg.select_n == 0 {
            return Err(Error::InvalidArgument("select-n must be positive".into()));
        }
        if !(cfg.variance_floor_scale > 0.0) {
            return Err(Error::InvalidArgument("variance-floor-scale must be positive".into()));
        }
        Ok(cfg)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations = {}", self.iterations)?;
        writeln!(f, "weight-floor = {}", self.weight_floor)?;
        writeln!(f, "variance-floor-scale = {}", self.variance_floor_scale)?;
        writeln!(f, "select-n = {}", self.select_n)?;
        writeln!(f, "deterministic = {}", self.deterministic)?;
        writeln!(f, "seed = {}", self.seed)?;
        let mode = match self.likelihood_mode {
            LikelihoodMode::Point => "point",
            LikelihoodMode::Uncertainty => "uncertainty",
        };
        writeln!(f, "likelihood-mode = {mode}")
    }
}

/// Auxiliary-function change of each update, summed over components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxDeltas {
    pub frame_loading: f64,
    pub state_loading: f64,
    pub bias: f64,
    pub noise: f64,
    pub weights: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmReport {
    pub iteration: usize,
    pub frames: usize,
    /// Average per-frame log-likelihood of the model entering the iteration.
    pub avg_loglik: f64,
    pub aux: AuxDeltas,
    pub floored_weights: usize,
    pub floored_variances: usize,
    pub ridged: usize,
    /// `active_histogram[a]` is the number of states with `a` component
    /// weights at or above the active threshold.
    pub active_histogram: Vec<usize>,
    /// Occupancy of every sub-state, as seen by the E-step.
    pub substate_occupancy: Vec<Vec<f64>>,
}

impl fmt::Display for EmReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} frames={} avg_loglik={:.8} dQ_U={:.6e} dQ_G={:.6e} dQ_b={:.6e} dQ_Lambda={:.6e} dQ_w={:.6e} floored_weights={} floored_vars={} ridged={} active_hist=",
            self.iteration,
            self.frames,
            self.avg_loglik,
            self.aux.frame_loading,
            self.aux.state_loading,
            self.aux.bias,
            self.aux.noise,
            self.aux.weights,
            self.floored_weights,
            self.floored_variances,
            self.ridged,
        )?;
        let hist: Vec<String> = self
            .active_histogram
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(a, c)| format!("{a}:{c}"))
            .collect();
        write!(f, "{}", hist.join(","))
    }
}

fn active_histogram(model: &TiedPldaModel) -> Vec<usize> {
    let mut hist = vec![0; model.num_components() + 1];
    for s in &model.states {
        let a = s
            .component_weights
            .iter()
            .filter(|&&w| w >= ACTIVE_WEIGHT_THRESHOLD)
            .count();
        hist[a] += 1;
    }
    hist
}

/// One EM iteration: E-step, then frame loading, state loading, bias, noise
/// and weight updates.
pub fn em_iteration(
    model: &TiedPldaModel,
    data: &Dataset,
    config: &TrainConfig,
    iteration: usize,
) -> Result<(TiedPldaModel, EmReport)> {
    if data.num_frames() == 0 {
        return Err(Error::NoFrames);
    }
    let floor = variance_floor(data.features, config.variance_floor_scale);
    let e = estep(model, data, &config.estep_config())?;
    let acc = &e.acc;
    let base = e.apply_state_vectors(model);

    let (frame_loadings, u_info) = update_frame_loading(acc, &base)?;
    let (state_loadings, g_info) = update_state_loading(acc, &base)?;
    let (biases, _) = update_bias(acc, &base);
    let (noise, l_info) = update_noise(acc, &base, &floor);
    let (weights, w_info) = update_weights(acc, &base, config.weight_floor)?;

    let mut aux = AuxDeltas::default();
    for (m, (ca, old)) in acc.components.iter().zip(&base.components).enumerate() {
        aux.frame_loading += aux_frame_loading(ca, &old.noise_var, &frame_loadings[m])
            - aux_frame_loading(ca, &old.noise_var, &old.frame_loading);
        aux.state_loading += aux_state_loading(ca, &old.noise_var, &state_loadings[m])
            - aux_state_loading(ca, &old.noise_var, &old.state_loading);
        aux.bias += aux_bias(ca, &old.noise_var, &biases[m]) - aux_bias(ca, &old.noise_var, &old.bias);
        aux.noise += aux_noise(ca, &noise[m]) - aux_noise(ca, &old.noise_var);
    }

    let mut next = base.clone();
    for (m, comp) in next.components.iter_mut().enumerate() {
        comp.frame_loading = frame_loadings[m].clone();
        comp.state_loading = state_loadings[m].clone();
        comp.bias = biases[m].clone();
        comp.noise_var = noise[m].clone();
    }
    for (state, w) in next.states.iter_mut().zip(weights) {
        for (sub, c) in state.substates.iter_mut().zip(w.substate) {
            sub.weight = c;
        }
        state.component_weights = w.component;
    }
    aux.weights = aux_weights(acc, &next) - aux_weights(acc, &base);
    next.validate()?;

    let report = EmReport {
        iteration,
        frames: acc.frames,
        avg_loglik: acc.average_loglik(),
        aux,
        floored_weights: w_info.floored,
        floored_variances: l_info.floored,
        ridged: u_info.ridged + g_info.ridged,
        active_histogram: active_histogram(&next),
        substate_occupancy: acc.substate_occupancy(),
    };
    Ok((next, report))
}

/// Runs EM iterations and merges sub-states that stay starved.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    iteration: usize,
    starved: Vec<Vec<u32>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            iteration: 0,
            starved: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        model: &TiedPldaModel,
        data: &Dataset,
    ) -> Result<(TiedPldaModel, EmReport)> {
        self.iteration += 1;
        let (mut next, mut report) = em_iteration(model, data, &self.config, self.iteration)?;
        if self.starved.len() != next.num_states()
            || self
                .starved
                .iter()
                .zip(&next.states)
                .any(|(s, st)| s.len() != st.substates.len())
        {
            self.starved = next
                .states
                .iter()
                .map(|s| vec![0; s.substates.len()])
                .collect();
        }
        if next.family == ModelFamily::Tied {
            for (j, state) in next.states.iter_mut().enumerate() {
                let occ = &mut report.substate_occupancy[j];
                let counts = &mut self.starved[j];
                for (c, o) in counts.iter_mut().zip(occ.iter()) {
                    *c = if *o < 1.0 { *c + 1 } else { 0 };
                }
                while state.substates.len() > 1 {
                    let Some(k) = counts.iter().position(|&c| c >= STARVATION_LIMIT) else {
                        break;
                    };
                    let target = nearest_sibling(state, k);
                    let removed = state.substates.remove(k);
                    let removed_occ = occ.remove(k);
                    counts.remove(k);
                    let target = if target > k { target - 1 } else { target };
                    state.substates[target].weight += removed.weight;
                    occ[target] += removed_occ;
                }
            }
        }
        Ok((next, report))
    }

    /// Runs `config.iterations` iterations, passing every report to `on_report`.
    pub fn run(
        &mut self,
        model: TiedPldaModel,
        data: &Dataset,
        mut on_report: impl FnMut(&EmReport),
    ) -> Result<(TiedPldaModel, Vec<EmReport>)> {
        let mut model = model;
        let mut reports = Vec::with_capacity(self.config.iterations);
        for _ in 0..self.config.iterations {
            let (next, report) = self.step(&model, data)?;
            on_report(&report);
            reports.push(report);
            model = next;
        }
        Ok((model, reports))
    }
}

fn nearest_sibling(state: &StateModel, k: usize) -> usize {
    let z = &state.substates[k].vector;
    let mut best = if k == 0 { 1 } else { 0 };
    let mut best_d = f64::INFINITY;
    for (i, s) in state.substates.iter().enumerate() {
        if i == k {
            continue;
        }
        let d = (&s.vector - z).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Builds a tied model from a background model: biases from the background
/// means, noise from background noise plus the diagonal of the loading Gram,
/// frame loadings from the background loadings (padded or truncated to `p`
/// columns), state loadings drawn from `N(0, 0.1^2)`, zero sub-state vectors,
/// one sub-state per state and uniform weights.
pub fn init_model(
    bg: &BackgroundModel,
    hyper: Hyperparams,
    seed: u64,
) -> Result<TiedPldaModel> {
    hyper.validate()?;
    bg.validate()?;
    if bg.num_components() != hyper.num_components {
        return Err(Error::dim(
            "background component count",
            hyper.num_components,
            bg.num_components(),
        ));
    }
    if bg.feature_dim() != hyper.feature_dim {
        return Err(Error::dim(
            "background feature dimension",
            hyper.feature_dim,
            bg.feature_dim(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TiedPldaModel::new(hyper, 1)?;
    let (d, p, q) = (hyper.feature_dim, hyper.frame_dim, hyper.state_dim);
    for (comp, fa) in model.components.iter_mut().zip(&bg.components) {
        comp.bias = fa.mean.clone();
        comp.noise_var = DVector::from_fn(d, |i, _| {
            fa.noise_var[i] + fa.loading.row(i).norm_squared()
        });
        comp.frame_loading = DMatrix::from_fn(d, p, |i, c| {
            if c < fa.loading.ncols() {
                fa.loading[(i, c)]
            } else {
                0.0
            }
        });
    }
    for comp in model.components.iter_mut() {
        comp.state_loading = DMatrix::from_fn(d, q, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    model.validate()?;
    Ok(model)
}

/// Grows the model to `target` total sub-states by repeatedly splitting the
/// sub-state with the largest occupancy into `z +- 0.1 r` with `r` a random
/// unit vector, halving its weight between the two children. Without
/// occupancies, sub-state weights stand in for them.
pub fn mixup(
    model: &TiedPldaModel,
    target: usize,
    seed: u64,
    occupancy: Option<&[Vec<f64>]>,
) -> Result<TiedPldaModel> {
    let current = model.total_substates();
    if target < current {
        return Err(Error::InvalidArgument(format!(
            "target {target} is below the current {current} sub-states"
        )));
    }
    if model.family == ModelFamily::Mixture && target > current {
        return Err(Error::InvalidArgument(
            "mixing-up applies to tied models only".into(),
        ));
    }
    let mut occ: Vec<Vec<f64>> = match occupancy {
        Some(o) => {
            if o.len() != model.num_states()
                || o.iter().zip(&model.states).any(|(a, s)| a.len() != s.substates.len())
            {
                return Err(Error::InvalidArgument(
                    "occupancy table does not match the model's sub-states".into(),
                ));
            }
            o.to_vec()
        }
        None => model
            .states
            .iter()
            .map(|s| s.substates.iter().map(|x| x.weight).collect())
            .collect(),
    };
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = model.hyper.state_dim;
    for _ in current..target {
        let mut best = (0, 0);
        let mut best_occ = f64::NEG_INFINITY;
        for (j, row) in occ.iter().enumerate() {
            for (k, &o) in row.iter().enumerate() {
                if o > best_occ {
                    best_occ = o;
                    best = (j, k);
                }
            }
        }
        let (j, k) = best;
        let dir = loop {
            let v = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        let state = &mut out.states[j];
        let parent = state.substates[k].clone();
        let half = parent.weight / 2.0;
        state.substates[k] = SubState {
            vector: &parent.vector + &dir * 0.1,
            weight: half,
        };
        state.substates.insert(
            k + 1,
            SubState {
                vector: &parent.vector - &dir * 0.1,
                weight: half,
            },
        );
        let o = occ[j][k] / 2.0;
        occ[j][k] = o;
        occ[j].insert(k + 1, o);
    }
    out.validate()?;
    Ok(out)
}
