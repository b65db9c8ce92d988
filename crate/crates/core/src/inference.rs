//! Latent-variable posteriors and state-level likelihoods.
//!
//! Two scoring schemes are provided. The *point* scheme plugs the posterior
//! mode of the frame variable into the component Gaussian. The *uncertainty*
//! scheme integrates the frame variable out, which turns each component into
//! `N(y; G z + b, U U^T + Lambda)`; that covariance is handled through a
//! low-rank correction of the diagonal inverse and never inverted densely.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, spd_solve, LN_2PI};
use crate::model::{ComponentParams, TiedPldaModel};

/// How a frame is scored against a `(state, sub-state, component)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LikelihoodMode {
    /// Plug in the posterior mode of the frame variable.
    Point,
    /// Marginalize the frame variable.
    #[default]
    Uncertainty,
}

impl std::str::FromStr for LikelihoodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(LikelihoodMode::Point),
            "uncertainty" => Ok(LikelihoodMode::Uncertainty),
            other => Err(Error::InvalidArgument(format!(
                "unknown likelihood mode '{other}' (expected point or uncertainty)"
            ))),
        }
    }
}

/// Gaussian over a latent variable, kept in information form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            precision: DMatrix::identity(dim, dim),
        }
    }

    /// Posterior with precision `precision` and mean `precision^{-1} linear`.
    pub fn from_information(precision: DMatrix<f64>, linear: &DVector<f64>) -> Result<Self> {
        let mean = spd_solve(&precision, linear, "posterior precision")?;
        Ok(Self { mean, precision })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        crate::math::spd_inverse(&self.precision, "posterior precision")
    }

    /// `E[v v^T] = covariance + mean mean^T`.
    pub fn second_moment(&self) -> Result<DMatrix<f64>> {
        Ok(self.covariance()? + &self.mean * self.mean.transpose())
    }
}

/// Low-rank-plus-diagonal inverse: `(U U^T + Lambda)^{-1} = Lambda^{-1} - L L^T`.
#[derive(Clone, Debug)]
pub struct WoodburyFactor {
    /// `L`, `d x p`.
    pub factor: DMatrix<f64>,
    pub noise_inv: DVector<f64>,
    /// `log det(U U^T + Lambda)`.
    pub logdet: f64,
}

impl WoodburyFactor {
    pub fn new(loading: &DMatrix<f64>, noise_var: &DVector<f64>) -> Result<Self> {
        Ok(ComponentCache::from_loading(loading, noise_var)?.woodbury)
    }

    pub fn for_component(comp: &ComponentParams) -> Result<Self> {
        Self::new(&comp.frame_loading, &comp.noise_var)
    }

    pub fn dim(&self) -> usize {
        self.noise_inv.len()
    }

    /// `r^T (U U^T + Lambda)^{-1} r`.
    #[inline]
    pub fn quad_form(&self, r: &[f64]) -> f64 {
        let diag: f64 = r
            .iter()
            .zip(self.noise_inv.iter())
            .map(|(ri, li)| ri * ri * li)
            .sum();
        let d = self.factor.nrows();
        let mut low = 0.0;
        for c in 0..self.factor.ncols() {
            let col = &self.factor.as_slice()[c * d..(c + 1) * d];
            let dot: f64 = col.iter().zip(r).map(|(a, b)| a * b).sum();
            low += dot * dot;
        }
        diag - low
    }

    /// `log N(r; 0, U U^T + Lambda)`.
    #[inline]
    pub fn log_density_centered(&self, r: &[f64]) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.logdet + self.quad_form(r))
    }

    /// Dense inverse; for checks at small dimension.
    pub fn inverse(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.noise_inv) - &self.factor * self.factor.transpose()
    }
}

/// Per-component quantities reused by every frame.
#[derive(Clone, Debug)]
pub struct ComponentCache {
    pub woodbury: WoodburyFactor,
    /// `sum(log Lambda)`.
    pub noise_logdet: f64,
    /// Frame-variable posterior precision `V = I + U^T Lambda^{-1} U`.
    pub frame_precision: DMatrix<f64>,
    /// `V^{-1}`.
    pub frame_cov: DMatrix<f64>,
    /// `V^{-1} U^T Lambda^{-1}`, `p x d`; maps a residual to the posterior mean.
    pub frame_proj: DMatrix<f64>,
    /// `diag(U V^{-1} U^T)`.
    pub frame_cov_diag: DVector<f64>,
}

impl ComponentCache {
    pub fn new(comp: &ComponentParams) -> Result<Self> {
        Self::from_loading(&comp.frame_loading, &comp.noise_var)
    }

    pub fn from_loading(loading: &DMatrix<f64>, noise_var: &DVector<f64>) -> Result<Self> {
        let d = noise_var.len();
        let p = loading.ncols();
        if loading.nrows() != d {
            return Err(Error::dim("loading rows", d, loading.nrows()));
        }
        if let Some(v) = noise_var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Numerical(format!("noise variance entry {v} below floor")));
        }
        if loading.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite loading".into()));
        }
        let noise_inv = noise_var.map(|v| 1.0 / v);
        let noise_logdet: f64 = noise_var.iter().map(|v| v.ln()).sum();
        if p == 0 {
            return Ok(Self {
                woodbury: WoodburyFactor {
                    factor: DMatrix::zeros(d, 0),
                    noise_inv,
                    logdet: noise_logdet,
                },
                noise_logdet,
                frame_precision: DMatrix::zeros(0, 0),
                frame_cov: DMatrix::zeros(0, 0),
                frame_proj: DMatrix::zeros(0, d),
                frame_cov_diag: DVector::zeros(d),
            });
        }
        // Lambda^{-1} U
        let mut scaled = loading.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= noise_inv[i];
        }
        let mut precision = loading.transpose() * &scaled;
        for i in 0..p {
            precision[(i, i)] += 1.0;
        }
        let precision = crate::math::symmetrize(&precision);
        let eig = precision.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Numerical(
                "frame posterior precision is not positive definite".into(),
            ));
        }
        let q = &eig.eigenvectors;
        let inv_sqrt = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt())) * q.transpose();
        let cov = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e)) * q.transpose();
        let cov = crate::math::symmetrize(&cov);
        let factor = &scaled * inv_sqrt;
        let logdet = noise_logdet + eig.eigenvalues.iter().map(|e| e.ln()).sum::<f64>();
        let frame_proj = &cov * scaled.transpose();
        let frame_cov_diag = DVector::from_fn(d, |i, _| {
            let row = loading.row(i);
            (row * &cov * row.transpose())[(0, 0)]
        });
        Ok(Self {
            woodbury: WoodburyFactor {
                factor,
                noise_inv,
                logdet,
            },
            noise_logdet,
            frame_precision: precision,
            frame_cov: cov,
            frame_proj,
            frame_cov_diag,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.woodbury.dim()
    }

    /// Posterior mean of the frame variable for residual `y - G z - b`.
    #[inline]
    pub fn frame_mean(&self, residual: &[f64], out: &mut [f64]) {
        let (p, d) = self.frame_proj.shape();
        debug_assert_eq!(out.len(), p);
        out.fill(0.0);
        let proj = self.frame_proj.as_slice();
        for (i, r) in residual.iter().enumerate().take(d) {
            let col = &proj[i * p..(i + 1) * p];
            for (o, c) in out.iter_mut().zip(col) {
                *o += c * r;
            }
        }
    }

    /// `log N(y; mean, Lambda)` from the residual `y - mean`.
    #[inline]
    pub fn log_density_diag(&self, residual: &[f64]) -> f64 {
        let quad: f64 = residual
            .iter()
            .zip(self.woodbury.noise_inv.iter())
            .map(|(r, l)| r * r * l)
            .sum();
        -0.5 * (residual.len() as f64 * LN_2PI + self.noise_logdet + quad)
    }
}

fn check_len(what: &str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dim(what, expected, v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// `y - G z - b` written into `out`.
#[inline]
pub(crate) fn state_residual(comp: &ComponentParams, z: &[f64], y: &[f64], out: &mut [f64]) {
    let d = y.len();
    out.copy_from_slice(y);
    for (o, b) in out.iter_mut().zip(comp.bias.iter()) {
        *o -= b;
    }
    let g = comp.state_loading.as_slice();
    for (c, zc) in z.iter().enumerate() {
        let col = &g[c * d..(c + 1) * d];
        for (o, gv) in out.iter_mut().zip(col) {
            *o -= gv * zc;
        }
    }
}

/// Posterior of the frame variable under a standard-normal prior:
/// precision `I + U^T Lambda^{-1} U`, mean `V^{-1} U^T Lambda^{-1} (y - G z - b)`.
pub fn posterior_x(comp: &ComponentParams, z_bar: &[f64], y: &[f64]) -> Result<GaussianPosterior> {
    check_len("feature vector", comp.feature_dim(), y)?;
    check_len("state vector", comp.state_dim(), z_bar)?;
    let cache = ComponentCache::new(comp)?;
    let mut residual = vec![0.0; y.len()];
    state_residual(comp, z_bar, y, &mut residual);
    let mut mean = vec![0.0; comp.frame_dim()];
    cache.frame_mean(&residual, &mut mean);
    Ok(GaussianPosterior {
        mean: DVector::from_vec(mean),
        precision: cache.frame_precision,
    })
}

/// One component's contribution of a frame to a state-variable posterior.
#[derive(Clone, Debug)]
pub struct ZTerm {
    pub component: usize,
    pub responsibility: f64,
    /// Posterior mean of the frame variable for this component.
    pub frame_mean: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct ZFrame {
    pub features: DVector<f64>,
    pub terms: Vec<ZTerm>,
}

/// Sufficient statistics for one state-variable posterior:
/// `sum gamma G^T Lambda^{-1} G` and `sum gamma G^T Lambda^{-1} (y - U E[x] - b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVarStats {
    pub precision_sum: DMatrix<f64>,
    pub linear_sum: DVector<f64>,
    pub occupancy: f64,
}

impl StateVarStats {
    pub fn zeros(q: usize) -> Self {
        Self {
            precision_sum: DMatrix::zeros(q, q),
            linear_sum: DVector::zeros(q),
            occupancy: 0.0,
        }
    }

    /// Adds one `(frame, component)` term. `residual` is `y - U E[x] - b`.
    pub fn add(&mut self, gram: &StateLoadingGram, gamma: f64, residual: &[f64]) {
        if gamma == 0.0 {
            return;
        }
        self.occupancy += gamma;
        crate::math::add_scaled(&mut self.precision_sum, gamma, &gram.gram);
        let (q, d) = gram.weighted_t.shape();
        let w = gram.weighted_t.as_slice();
        for (i, r) in residual.iter().enumerate().take(d) {
            let col = &w[i * q..(i + 1) * q];
            let gr = gamma * r;
            for (o, c) in self.linear_sum.iter_mut().zip(col) {
                *o += c * gr;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.precision_sum += &other.precision_sum;
        self.linear_sum += &other.linear_sum;
        self.occupancy += other.occupancy;
    }

    pub fn posterior(&self) -> Result<GaussianPosterior> {
        let q = self.linear_sum.len();
        let mut precision = crate::math::symmetrize(&self.precision_sum);
        for i in 0..q {
            precision[(i, i)] += 1.0;
        }
        GaussianPosterior::from_information(precision, &self.linear_sum)
    }
}

/// `G^T Lambda^{-1}` and `G^T Lambda^{-1} G` for one component.
#[derive(Clone, Debug)]
pub struct StateLoadingGram {
    pub weighted_t: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

impl StateLoadingGram {
    pub fn new(comp: &ComponentParams) -> Self {
        let mut weighted_t = comp.state_loading.transpose();
        for (i, mut col) in weighted_t.column_iter_mut().enumerate() {
            col /= comp.noise_var[i];
        }
        let gram = crate::math::symmetrize(&(&weighted_t * &comp.state_loading));
        Self { weighted_t, gram }
    }
}

/// Posterior of sub-state vector `z_jk` given frames with per-component
/// responsibilities and frame-variable expectations. Without frames this is
/// the standard-normal prior.
pub fn posterior_z(
    model: &TiedPldaModel,
    j: usize,
    k: usize,
    frames: &[ZFrame],
) -> Result<GaussianPosterior> {
    if j >= model.num_states() || k >= model.states[j].substates.len() {
        return Err(Error::InvalidArgument(format!("no sub-state ({j}, {k})")));
    }
    let q = model.hyper.state_dim;
    let grams: Vec<StateLoadingGram> = model.components.iter().map(StateLoadingGram::new).collect();
    let mut stats = StateVarStats::zeros(q);
    let mut residual = vec![0.0; model.feature_dim()];
    for frame in frames {
        check_len("feature vector", model.feature_dim(), frame.features.as_slice())?;
        for term in &frame.terms {
            if !(0.0..=1.0).contains(&term.responsibility) {
                return Err(Error::InvalidArgument(format!(
                    "responsibility {} outside [0, 1]",
                    term.responsibility
                )));
            }
            let comp = model
                .components
                .get(term.component)
                .ok_or_else(|| Error::InvalidArgument(format!("no component {}", term.component)))?;
            check_len("frame mean", comp.frame_dim(), term.frame_mean.as_slice())?;
            for ((r, y), b) in residual.iter_mut().zip(frame.features.iter()).zip(comp.bias.iter()) {
                *r = y - b;
            }
            subtract_frame_term(comp, term.frame_mean.as_slice(), &mut residual);
            stats.add(&grams[term.component], term.responsibility, &residual);
        }
    }
    stats.posterior()
}

/// Evaluates `N(y; G z + b, U U^T + Lambda)` through the Woodbury factor.
pub fn woodbury(comp: &ComponentParams) -> Result<WoodburyFactor> {
    WoodburyFactor::for_component(comp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub substate: usize,
    pub component: usize,
    /// `log w_jkm + log p(y | j, k, m)`.
    pub log_joint: f64,
}

/// Per-pair log joint weights of one frame against one state.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub entries: Vec<PairScore>,
    /// Log-sum-exp of the entries.
    pub total: f64,
    /// Best `(sub-state, component)` pair, if any entry is finite.
    pub best: Option<(usize, usize)>,
}

impl FrameScore {
    pub fn from_entries(entries: Vec<PairScore>) -> Self {
        let total = log_sum_exp(entries.iter().map(|e| e.log_joint));
        let mut best: Option<(usize, usize)> = None;
        let mut best_val = f64::NEG_INFINITY;
        for e in &entries {
            if e.log_joint > best_val {
                best_val = e.log_joint;
                best = Some((e.substate, e.component));
            }
        }
        Self {
            entries,
            total,
            best,
        }
    }
}

/// A model paired with its per-component caches, ready to score frames.
#[derive(Clone, Debug)]
pub struct Scorer<'a> {
    pub model: &'a TiedPldaModel,
    pub caches: Vec<ComponentCache>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a TiedPldaModel) -> Result<Self> {
        let caches = model
            .components
            .iter()
            .map(ComponentCache::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, caches })
    }

    fn check_frame(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.model.feature_dim() {
            return Err(Error::dim("feature vector", self.model.feature_dim(), y.len()));
        }
        Ok(())
    }

    fn check_selection(&self, components: Option<&[usize]>) -> Result<()> {
        if let Some(sel) = components {
            let m = self.model.num_components();
            if let Some(bad) = sel.iter().find(|&&c| c >= m) {
                return Err(Error::InvalidArgument(format!(
                    "selected component {bad} out of range (M = {m})"
                )));
            }
        }
        Ok(())
    }

    /// Scores `y` against every allowed, positively weighted `(k, m)` pair of
    /// state `j`, using the model's sub-state vectors as point estimates.
    /// `components` restricts `m`; `None` means all.
    pub fn frame_score(
        &self,
        j: usize,
        y: &[f64],
        components: Option<&[usize]>,
        mode: LikelihoodMode,
    ) -> Result<FrameScore> {
        self.check_frame(y)?;
        self.check_selection(components)?;
        if j >= self.model.num_states() {
            return Err(Error::InvalidArgument(format!("state {j} out of range")));
        }
        let mut entries = Vec::new();
        let mut scratch = Scratch::new(self.model);
        self.pair_scores(j, y, components, mode, &mut scratch, &mut entries);
        Ok(FrameScore::from_entries(entries))
    }

    /// `log p(y | j)` without allocation beyond `scratch`.
    pub(crate) fn pair_scores(
        &self,
        j: usize,
        y: &[f64],
        components: Option<&[usize]>,
        mode: LikelihoodMode,
        scratch: &mut Scratch,
        out: &mut Vec<PairScore>,
    ) {
        out.clear();
        let model = self.model;
        let state = &model.states[j];
        let all: Vec<usize>;
        let comps = match components {
            Some(c) => c,
            None => {
                all = (0..model.num_components()).collect();
                &all
            }
        };
        for (k, sub) in state.substates.iter().enumerate() {
            for &m in comps {
                if !model.pair_allowed(k, m) {
                    continue;
                }
                let w = model.pair_weight(j, k, m);
                if w <= 0.0 {
                    continue;
                }
                let ll = self.component_loglik(m, sub.vector.as_slice(), y, mode, scratch);
                out.push(PairScore {
                    substate: k,
                    component: m,
                    log_joint: w.ln() + ll,
                });
            }
        }
    }

    /// `log p(y | z, m)` under `mode`.
    #[inline]
    pub(crate) fn component_loglik(
        &self,
        m: usize,
        z: &[f64],
        y: &[f64],
        mode: LikelihoodMode,
        scratch: &mut Scratch,
    ) -> f64 {
        let comp = &self.model.components[m];
        let cache = &self.caches[m];
        state_residual(comp, z, y, &mut scratch.residual);
        match mode {
            LikelihoodMode::Uncertainty => cache.woodbury.log_density_centered(&scratch.residual),
            LikelihoodMode::Point => {
                cache.frame_mean(&scratch.residual, &mut scratch.frame);
                subtract_frame_term(comp, &scratch.frame, &mut scratch.residual);
                cache.log_density_diag(&scratch.residual)
            }
        }
    }

    /// `log p(y | j)` under `mode`, restricted to `components`.
    pub fn state_loglik(
        &self,
        j: usize,
        y: &[f64],
        components: Option<&[usize]>,
        mode: LikelihoodMode,
    ) -> Result<f64> {
        Ok(self.frame_score(j, y, components, mode)?.total)
    }

    /// Best state for `y` under the uncertainty scheme restricted to the
    /// selected components. Ties go to the lowest state index.
    pub fn classify(
        &self,
        y: &[f64],
        candidates: Option<&[usize]>,
        components: &[usize],
    ) -> Result<(usize, Vec<f64>)> {
        self.check_frame(y)?;
        self.check_selection(Some(components))?;
        if components.is_empty() {
            return Err(Error::InvalidArgument("empty component selection".into()));
        }
        let all: Vec<usize>;
        let states = match candidates {
            Some(c) => c,
            None => {
                all = (0..self.model.num_states()).collect();
                &all
            }
        };
        if states.is_empty() {
            return Err(Error::InvalidArgument("empty candidate state set".into()));
        }
        if let Some(bad) = states.iter().find(|&&j| j >= self.model.num_states()) {
            return Err(Error::InvalidArgument(format!("candidate state {bad} out of range")));
        }
        let mut scratch = Scratch::new(self.model);
        let mut entries = Vec::new();
        let mut scores = Vec::with_capacity(states.len());
        let mut best = states[0];
        let mut best_val = f64::NEG_INFINITY;
        for &j in states {
            self.pair_scores(
                j,
                y,
                Some(components),
                LikelihoodMode::Uncertainty,
                &mut scratch,
                &mut entries,
            );
            let v = log_sum_exp(entries.iter().map(|e| e.log_joint));
            if v > best_val || (v == best_val && j < best) {
                best_val = v;
                best = j;
            }
            scores.push(v);
        }
        Ok((best, scores))
    }
}

#[inline]
pub(crate) fn subtract_frame_term(comp: &ComponentParams, x: &[f64], residual: &mut [f64]) {
    let d = residual.len();
    let u = comp.frame_loading.as_slice();
    for (c, xc) in x.iter().enumerate() {
        let col = &u[c * d..(c + 1) * d];
        for (o, uv) in residual.iter_mut().zip(col) {
            *o -= uv * xc;
        }
    }
}

/// Reusable buffers for frame scoring.
#[derive(Clone, Debug)]
pub(crate) struct Scratch {
    pub residual: Vec<f64>,
    pub frame: Vec<f64>,
}

impl Scratch {
    pub fn new(model: &TiedPldaModel) -> Self {
        Self {
            residual: vec![0.0; model.hyper.feature_dim],
            frame: vec![0.0; model.hyper.frame_dim],
        }
    }
}

/// Point-estimate state likelihood
/// `log sum_{k,m} w_jkm N(y; U x_km + G z_k + b, Lambda)` with caller-supplied
/// frame-variable estimates `x_bars[k * M + m]` and sub-state vectors `z_bars[k]`.
pub fn loglik_point(
    model: &TiedPldaModel,
    j: usize,
    y: &[f64],
    x_bars: &[DVector<f64>],
    z_bars: &[DVector<f64>],
) -> Result<FrameScore> {
    let m_count = model.num_components();
    let state = model
        .states
        .get(j)
        .ok_or_else(|| Error::InvalidArgument(format!("state {j} out of range")))?;
    let k_count = state.substates.len();
    if z_bars.len() != k_count {
        return Err(Error::dim("sub-state vector count", k_count, z_bars.len()));
    }
    if x_bars.len() != k_count * m_count {
        return Err(Error::dim("frame-variable estimate count", k_count * m_count, x_bars.len()));
    }
    check_len("feature vector", model.feature_dim(), y)?;
    let mut residual = vec![0.0; y.len()];
    let mut entries = Vec::new();
    for (k, z) in z_bars.iter().enumerate() {
        check_len("state vector", model.hyper.state_dim, z.as_slice())?;
        for (m, comp) in model.components.iter().enumerate() {
            if !model.pair_allowed(k, m) {
                continue;
            }
            let w = model.pair_weight(j, k, m);
            if w <= 0.0 {
                continue;
            }
            let x = &x_bars[k * m_count + m];
            check_len("frame vector", model.hyper.frame_dim, x.as_slice())?;
            state_residual(comp, z.as_slice(), y, &mut residual);
            subtract_frame_term(comp, x.as_slice(), &mut residual);
            let quad: f64 = residual
                .iter()
                .zip(comp.noise_var.iter())
                .map(|(r, l)| r * r / l)
                .sum();
            let logdet: f64 = comp.noise_var.iter().map(|l| l.ln()).sum();
            let ll = -0.5 * (y.len() as f64 * LN_2PI + logdet + quad);
            entries.push(PairScore {
                substate: k,
                component: m,
                log_joint: w.ln() + ll,
            });
        }
    }
    Ok(FrameScore::from_entries(entries))
}

/// Uncertainty-estimate state likelihood
/// `log sum_{k,m} w_jkm N(y; G z_k + b, U U^T + Lambda)` with caller-supplied
/// sub-state vectors.
pub fn loglik_uncertainty(
    model: &TiedPldaModel,
    j: usize,
    y: &[f64],
    z_bars: &[DVector<f64>],
) -> Result<FrameScore> {
    let state = model
        .states
        .get(j)
        .ok_or_else(|| Error::InvalidArgument(format!("state {j} out of range")))?;
    if z_bars.len() != state.substates.len() {
        return Err(Error::dim("sub-state vector count", state.substates.len(), z_bars.len()));
    }
    check_len("feature vector", model.feature_dim(), y)?;
    let caches = model
        .components
        .iter()
        .map(ComponentCache::new)
        .collect::<Result<Vec<_>>>()?;
    let mut residual = vec![0.0; y.len()];
    let mut entries = Vec::new();
    for (k, z) in z_bars.iter().enumerate() {
        check_len("state vector", model.hyper.state_dim, z.as_slice())?;
        for (m, comp) in model.components.iter().enumerate() {
            if !model.pair_allowed(k, m) {
                continue;
            }
            let w = model.pair_weight(j, k, m);
            if w <= 0.0 {
                continue;
            }
            state_residual(comp, z.as_slice(), y, &mut residual);
            entries.push(PairScore {
                substate: k,
                component: m,
                log_joint: w.ln() + caches[m].woodbury.log_density_centered(&residual),
            });
        }
    }
    Ok(FrameScore::from_entries(entries))
}

/// Best state for a frame under uncertainty scoring restricted to
/// `selected_components`; ties go to the lowest state index.
pub fn classify_frame(
    model: &TiedPldaModel,
    y: &[f64],
    candidate_states: Option<&[usize]>,
    selected_components: &[usize],
) -> Result<(usize, Vec<f64>)> {
    Scorer::new(model)?.classify(y, candidate_states, selected_components)
}
