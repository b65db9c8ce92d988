//! Parameter containers for tied PLDA and PLDA mixture models.
//!
//! Every component `m` carries globally shared parameters: a frame-variable
//! loading (`d x p`), a state-variable loading (`d x q`), a bias and a diagonal
//! residual covariance. Every state `j` carries one or more sub-state vectors
//! `z_jk` with weights `c_jk`, and component weights `pi_jm` shared by all of
//! its sub-states. The joint weight of the `(k, m)` pair is `c_jk * pi_jm`.
//!
//! A PLDA mixture model lives in the same container with
//! [`ModelFamily::Mixture`]: each state has exactly `M` sub-states and
//! sub-state `k` is bound to component `k`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio::{put_f64s, put_u32, to_u32, LeReader};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"PLDAMDL1";
pub const MODEL_VERSION: u32 = 1;

/// Tolerance on weight sums when reading a model file.
pub const FILE_WEIGHT_TOLERANCE: f64 = 1e-6;

/// A component weight at or above this value counts as active.
pub const ACTIVE_WEIGHT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hyperparams {
    /// Feature dimension `d`.
    pub feature_dim: usize,
    /// Frame-variable dimension `p`.
    pub frame_dim: usize,
    /// State-variable dimension `q`.
    pub state_dim: usize,
    pub num_components: usize,
    pub num_states: usize,
}

impl Hyperparams {
    pub fn new(
        feature_dim: usize,
        frame_dim: usize,
        state_dim: usize,
        num_components: usize,
        num_states: usize,
    ) -> Result<Self> {
        let h = Self {
            feature_dim,
            frame_dim,
            state_dim,
            num_components,
            num_states,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("feature dimension", self.feature_dim),
            ("frame-variable dimension", self.frame_dim),
            ("state-variable dimension", self.state_dim),
            ("component count", self.num_components),
            ("state count", self.num_states),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.frame_dim > self.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "frame-variable dimension {} exceeds feature dimension {}",
                self.frame_dim, self.feature_dim
            )));
        }
        if self.state_dim > self.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "state-variable dimension {} exceeds feature dimension {}",
                self.state_dim, self.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Tied,
    Mixture,
}

impl ModelFamily {
    fn flag(self) -> u32 {
        match self {
            ModelFamily::Tied => 0,
            ModelFamily::Mixture => 1,
        }
    }

    fn from_flag(flag: u32) -> Result<Self> {
        match flag {
            0 => Ok(ModelFamily::Tied),
            1 => Ok(ModelFamily::Mixture),
            other => Err(Error::format(format!("model file: unknown family flag {other}"))),
        }
    }
}

/// Globally shared parameters of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentParams {
    /// Frame-variable loading, `d x p`.
    pub frame_loading: DMatrix<f64>,
    /// State-variable loading, `d x q`.
    pub state_loading: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Diagonal of the residual covariance.
    pub noise_var: DVector<f64>,
}

impl ComponentParams {
    pub fn zeros(hyper: &Hyperparams) -> Self {
        let d = hyper.feature_dim;
        Self {
            frame_loading: DMatrix::zeros(d, hyper.frame_dim),
            state_loading: DMatrix::zeros(d, hyper.state_dim),
            bias: DVector::zeros(d),
            noise_var: DVector::from_element(d, 1.0),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_loading.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.state_loading.ncols()
    }

    pub fn check_shape(&self, hyper: &Hyperparams, m: usize) -> Result<()> {
        let d = hyper.feature_dim;
        let checks = [
            ("frame loading rows", d, self.frame_loading.nrows()),
            ("frame loading cols", hyper.frame_dim, self.frame_loading.ncols()),
            ("state loading rows", d, self.state_loading.nrows()),
            ("state loading cols", hyper.state_dim, self.state_loading.ncols()),
            ("bias length", d, self.bias.len()),
            ("noise variance length", d, self.noise_var.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::dim(format!("component {m} {what}"), expected, found));
            }
        }
        let finite = self.frame_loading.iter().all(|v| v.is_finite())
            && self.state_loading.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical(format!("component {m} has non-finite parameters")));
        }
        if let Some(v) = self.noise_var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Numerical(format!(
                "component {m} has invalid noise variance {v}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubState {
    /// State-variable point estimate `z_jk`.
    pub vector: DVector<f64>,
    /// Sub-state weight `c_jk`.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateModel {
    pub substates: Vec<SubState>,
    /// Component weights `pi_jm`, shared by all sub-states of the state.
    pub component_weights: DVector<f64>,
}

impl StateModel {
    pub fn num_substates(&self) -> usize {
        self.substates.len()
    }

    fn check(&self, hyper: &Hyperparams, j: usize, tol: f64) -> Result<()> {
        if self.substates.is_empty() {
            return Err(Error::InvalidArgument(format!("state {j} has no sub-states")));
        }
        if self.component_weights.len() != hyper.num_components {
            return Err(Error::dim(
                format!("state {j} component weights"),
                hyper.num_components,
                self.component_weights.len(),
            ));
        }
        for (k, s) in self.substates.iter().enumerate() {
            if s.vector.len() != hyper.state_dim {
                return Err(Error::dim(
                    format!("state {j} sub-state {k} vector"),
                    hyper.state_dim,
                    s.vector.len(),
                ));
            }
            if !s.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("state {j} sub-state {k} is non-finite")));
            }
        }
        let weights_ok = |it: &mut dyn Iterator<Item = f64>| {
            let mut sum = 0.0;
            for w in it {
                if !(0.0..=1.0 + tol).contains(&w) {
                    return false;
                }
                sum += w;
            }
            (sum - 1.0).abs() <= tol
        };
        if !weights_ok(&mut self.substates.iter().map(|s| s.weight)) {
            return Err(Error::InvalidArgument(format!(
                "state {j}: sub-state weights not normalized"
            )));
        }
        if !weights_ok(&mut self.component_weights.iter().copied()) {
            return Err(Error::InvalidArgument(format!(
                "state {j}: component weights not normalized"
            )));
        }
        Ok(())
    }
}

/// Tied PLDA model (or a PLDA mixture model flagged as [`ModelFamily::Mixture`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TiedPldaModel {
    pub hyper: Hyperparams,
    pub family: ModelFamily,
    pub components: Vec<ComponentParams>,
    pub states: Vec<StateModel>,
}

impl TiedPldaModel {
    /// Tied model with zero loadings, zero sub-state vectors, unit noise and
    /// uniform weights. Training initialization overwrites the parameters.
    pub fn new(hyper: Hyperparams, substates_per_state: usize) -> Result<Self> {
        hyper.validate()?;
        if substates_per_state == 0 {
            return Err(Error::InvalidArgument("sub-state count must be positive".into()));
        }
        let m = hyper.num_components;
        let components = vec![ComponentParams::zeros(&hyper); m];
        let state = StateModel {
            substates: vec![
                SubState {
                    vector: DVector::zeros(hyper.state_dim),
                    weight: 1.0 / substates_per_state as f64,
                };
                substates_per_state
            ],
            component_weights: DVector::from_element(m, 1.0 / m as f64),
        };
        Ok(Self {
            hyper,
            family: ModelFamily::Tied,
            components,
            states: vec![state; hyper.num_states],
        })
    }

    /// PLDA mixture model: one sub-state per component, bound to it.
    pub fn new_mixture(hyper: Hyperparams) -> Result<Self> {
        let mut model = Self::new(hyper, hyper.num_components)?;
        model.family = ModelFamily::Mixture;
        Ok(model)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.hyper.feature_dim
    }

    pub fn total_substates(&self) -> usize {
        self.states.iter().map(|s| s.substates.len()).sum()
    }

    /// Joint weight `w_jkm`.
    #[inline]
    pub fn pair_weight(&self, j: usize, k: usize, m: usize) -> f64 {
        let state = &self.states[j];
        match self.family {
            ModelFamily::Tied => state.substates[k].weight * state.component_weights[m],
            ModelFamily::Mixture => {
                if k == m {
                    state.substates[k].weight
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether the `(k, m)` pair can carry mass in this family.
    #[inline]
    pub fn pair_allowed(&self, k: usize, m: usize) -> bool {
        match self.family {
            ModelFamily::Tied => true,
            ModelFamily::Mixture => k == m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(1e-10)
    }

    pub(crate) fn validate_with(&self, weight_tol: f64) -> Result<()> {
        self.hyper.validate()?;
        if self.components.len() != self.hyper.num_components {
            return Err(Error::dim(
                "component count",
                self.hyper.num_components,
                self.components.len(),
            ));
        }
        if self.states.len() != self.hyper.num_states {
            return Err(Error::dim("state count", self.hyper.num_states, self.states.len()));
        }
        for (m, c) in self.components.iter().enumerate() {
            c.check_shape(&self.hyper, m)?;
        }
        for (j, s) in self.states.iter().enumerate() {
            s.check(&self.hyper, j, weight_tol)?;
            if self.family == ModelFamily::Mixture && s.substates.len() != self.hyper.num_components
            {
                return Err(Error::dim(
                    format!("mixture state {j} sub-state count"),
                    self.hyper.num_components,
                    s.substates.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let h = &self.hyper;
        w.write_all(MODEL_MAGIC)?;
        put_u32(w, MODEL_VERSION)?;
        put_u32(w, self.family.flag())?;
        for (field, v) in [
            ("d", h.feature_dim),
            ("p", h.frame_dim),
            ("q", h.state_dim),
            ("M", h.num_components),
            ("J", h.num_states),
        ] {
            put_u32(w, to_u32(v, field)?)?;
        }
        for c in &self.components {
            put_f64s(w, row_major(&c.frame_loading))?;
            put_f64s(w, row_major(&c.state_loading))?;
            put_f64s(w, c.bias.iter().copied())?;
            put_f64s(w, c.noise_var.iter().copied())?;
        }
        for s in &self.states {
            put_u32(w, to_u32(s.substates.len(), "K")?)?;
            for sub in &s.substates {
                put_f64s(w, sub.vector.iter().copied())?;
                put_f64s(w, [sub.weight])?;
            }
            put_f64s(w, s.component_weights.iter().copied())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r, "model file");
        r.magic(MODEL_MAGIC)?;
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::format(format!("model file: unsupported version {version}")));
        }
        let family = ModelFamily::from_flag(r.u32("family flag")?)?;
        let mut dims = [0usize; 5];
        for (slot, field) in dims.iter_mut().zip(["d", "p", "q", "M", "J"]) {
            *slot = r.u32(field)? as usize;
        }
        let hyper = Hyperparams {
            feature_dim: dims[0],
            frame_dim: dims[1],
            state_dim: dims[2],
            num_components: dims[3],
            num_states: dims[4],
        };
        hyper
            .validate()
            .map_err(|e| Error::format(format!("model file: {e}")))?;
        let (d, p, q, m) = (hyper.feature_dim, hyper.frame_dim, hyper.state_dim, hyper.num_components);

        let mut components = Vec::with_capacity(m);
        for _ in 0..m {
            let frame_loading = DMatrix::from_row_slice(d, p, &r.f64s(d * p, "frame loading")?);
            let state_loading = DMatrix::from_row_slice(d, q, &r.f64s(d * q, "state loading")?);
            let bias = DVector::from_vec(r.f64s(d, "bias")?);
            let noise_var = DVector::from_vec(r.f64s(d, "noise variance")?);
            components.push(ComponentParams {
                frame_loading,
                state_loading,
                bias,
                noise_var,
            });
        }
        let mut states = Vec::with_capacity(hyper.num_states);
        for _ in 0..hyper.num_states {
            let k = r.u32("sub-state count")? as usize;
            let mut substates = Vec::with_capacity(k);
            for _ in 0..k {
                let vector = DVector::from_vec(r.f64s(q, "sub-state vector")?);
                let weight = r.f64("sub-state weight")?;
                substates.push(SubState { vector, weight });
            }
            let component_weights = DVector::from_vec(r.f64s(m, "component weights")?);
            states.push(StateModel {
                substates,
                component_weights,
            });
        }
        r.finish()?;
        let model = Self {
            hyper,
            family,
            components,
            states,
        };
        model.validate_with(FILE_WEIGHT_TOLERANCE).map_err(|e| match e {
            Error::InvalidArgument(msg) if msg.contains("not normalized") => {
                Error::format(format!("model file: weights not normalized ({msg})"))
            }
            other => Error::format(format!("model file: {other}")),
        })?;
        Ok(model)
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

pub(crate) fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// Active-parameter counts in the style of a model-size table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub state_dependent: usize,
    pub state_independent: usize,
}

/// Counts parameters. All components count towards the state-independent
/// total (loadings, bias and noise). Per state, every sub-state contributes its
/// vector plus weight, and each active component weight contributes one.
/// `active_per_state` overrides the active counts, which otherwise are the
/// number of `pi_jm >= 0.01`.
pub fn count_params(model: &TiedPldaModel, active_per_state: Option<&[usize]>) -> ParamCount {
    let h = &model.hyper;
    let d = h.feature_dim;
    let state_independent = h.num_components * (d * h.frame_dim + d * h.state_dim + 2 * d);
    let state_dependent = model
        .states
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let active = match active_per_state {
                Some(list) => list[j],
                None => s
                    .component_weights
                    .iter()
                    .filter(|&&w| w >= ACTIVE_WEIGHT_THRESHOLD)
                    .count(),
            };
            s.substates.len() * (h.state_dim + 1) + active
        })
        .sum();
    ParamCount {
        state_dependent,
        state_independent,
    }
}
