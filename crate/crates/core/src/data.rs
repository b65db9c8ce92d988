//! Feature and label files, context splicing, and corpus sampling from the
//! generative model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{put_f64s, put_u32, put_u64, to_u32, LeReader};
use crate::error::{Error, Result};
use crate::model::{ComponentParams, Hyperparams, StateModel, SubState, TiedPldaModel};

pub const FEATURE_MAGIC: &[u8; 8] = b"PLDAFEA1";
pub const LABEL_MAGIC: &[u8; 8] = b"PLDALBL1";

/// Frames as rows, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::InvalidArgument(format!(
                "feature payload of {} values does not match {rows} x {cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(format!(
                "non-finite feature at frame {} dimension {}",
                i / cols,
                i % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("feature row length", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn num_frames(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Per-dimension mean and (population) variance.
    pub fn mean_var(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.rows.max(1) as f64;
        let mut mean = DVector::zeros(self.cols);
        for f in self.frames() {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean /= n;
        let mut var = DVector::zeros(self.cols);
        for f in self.frames() {
            for ((s, v), m) in var.iter_mut().zip(f).zip(mean.iter()) {
                *s += (v - m) * (v - m);
            }
        }
        var /= n;
        (mean, var)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        put_u32(w, 1)?;
        put_u64(w, self.rows as u64)?;
        put_u64(w, self.cols as u64)?;
        put_f64s(w, self.data.iter().copied())?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r, "feature file");
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32("version")?;
        if version != 1 {
            return Err(Error::format(format!("feature file: unsupported version {version}")));
        }
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("feature file: header size overflows"))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for i in 0..n {
            let v = r.f64("payload")?;
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "feature file: non-finite value at frame {} dimension {}",
                    i / cols,
                    i % cols
                )));
            }
            data.push(v);
        }
        r.finish()?;
        Ok(Self { rows, cols, data })
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

/// Concatenates frames `t - context ..= t + context` into each output frame,
/// replicating the first and last frames at the edges.
pub fn splice(features: &FeatureMatrix, context: usize) -> Result<FeatureMatrix> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("cannot splice an empty feature matrix".into()));
    }
    let t_max = features.num_frames() - 1;
    let width = 2 * context + 1;
    let mut data = Vec::with_capacity(features.num_frames() * features.dim() * width);
    for t in 0..features.num_frames() {
        for offset in 0..width {
            let src = (t + offset).saturating_sub(context).min(t_max);
            data.extend_from_slice(features.frame(src));
        }
    }
    FeatureMatrix::new(features.num_frames(), features.dim() * width, data)
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameLabel {
    Hard(usize),
    /// Sparse state posterior `(state, mass)`.
    Soft(Vec<(usize, f64)>),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabelSequence {
    pub frames: Vec<FrameLabel>,
}

impl LabelSequence {
    pub fn hard(states: impl IntoIterator<Item = usize>) -> Self {
        Self {
            frames: states.into_iter().map(FrameLabel::Hard).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_hard(&self) -> bool {
        self.frames.iter().all(|f| matches!(f, FrameLabel::Hard(_)))
    }

    /// State posterior mass of frame `t` as `(state, mass)` pairs.
    pub fn posteriors(&self, t: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (hard, soft): (Option<(usize, f64)>, &[(usize, f64)]) = match &self.frames[t] {
            FrameLabel::Hard(j) => (Some((*j, 1.0)), &[]),
            FrameLabel::Soft(v) => (None, v.as_slice()),
        };
        hard.into_iter().chain(soft.iter().copied())
    }

    /// Most probable state of frame `t` (lowest index on ties).
    pub fn best_state(&self, t: usize) -> Option<usize> {
        match &self.frames[t] {
            FrameLabel::Hard(j) => Some(*j),
            FrameLabel::Soft(v) => {
                let mut best: Option<(usize, f64)> = None;
                for &(j, m) in v {
                    match best {
                        Some((bj, bm)) if m < bm || (m == bm && j > bj) => {}
                        _ => best = Some((j, m)),
                    }
                }
                best.map(|b| b.0)
            }
        }
    }

    pub fn validate(&self, num_states: usize) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            match f {
                FrameLabel::Hard(j) if *j >= num_states => {
                    return Err(Error::InvalidArgument(format!(
                        "frame {t}: state {j} out of range (J = {num_states})"
                    )))
                }
                FrameLabel::Hard(_) => {}
                FrameLabel::Soft(v) => {
                    let mut total = 0.0;
                    for &(j, m) in v {
                        if j >= num_states {
                            return Err(Error::InvalidArgument(format!(
                                "frame {t}: state {j} out of range (J = {num_states})"
                            )));
                        }
                        if !(0.0..=1.0).contains(&m) {
                            return Err(Error::InvalidArgument(format!(
                                "frame {t}: posterior mass {m} outside [0, 1]"
                            )));
                        }
                        total += m;
                    }
                    if total > 1.0 + 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "frame {t}: posterior masses sum to {total} > 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(LABEL_MAGIC)?;
        let hard = self.is_hard();
        put_u32(w, if hard { 1 } else { 2 })?;
        put_u64(w, self.frames.len() as u64)?;
        for f in &self.frames {
            match f {
                FrameLabel::Hard(j) if hard => put_u32(w, to_u32(*j, "state index")?)?,
                FrameLabel::Hard(j) => {
                    put_u32(w, 1)?;
                    put_u32(w, to_u32(*j, "state index")?)?;
                    put_f64s(w, [1.0])?;
                }
                FrameLabel::Soft(v) => {
                    put_u32(w, to_u32(v.len(), "entry count")?)?;
                    for &(j, m) in v {
                        put_u32(w, to_u32(j, "state index")?)?;
                        put_f64s(w, [m])?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r, "label file");
        r.magic(LABEL_MAGIC)?;
        let version = r.u32("version")?;
        let count = r.u64("count")? as usize;
        let mut frames = Vec::with_capacity(count.min(1 << 24));
        match version {
            1 => {
                for _ in 0..count {
                    frames.push(FrameLabel::Hard(r.u32("state index")? as usize));
                }
            }
            2 => {
                for _ in 0..count {
                    let n = r.u32("entry count")? as usize;
                    let mut v = Vec::with_capacity(n.min(1024));
                    for _ in 0..n {
                        let j = r.u32("state index")? as usize;
                        let m = r.f64("posterior mass")?;
                        if !(0.0..=1.0).contains(&m) {
                            return Err(Error::format(format!(
                                "label file: posterior mass {m} outside [0, 1]"
                            )));
                        }
                        v.push((j, m));
                    }
                    frames.push(FrameLabel::Soft(v));
                }
            }
            other => {
                return Err(Error::format(format!("label file: unsupported version {other}")))
            }
        }
        r.finish()?;
        Ok(Self { frames })
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

/// Latent draw behind one sampled frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLatent {
    pub substate: usize,
    pub component: usize,
    pub frame_var: DVector<f64>,
    pub noise: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub features: FeatureMatrix,
    pub labels: LabelSequence,
    pub latents: Vec<FrameLatent>,
}

/// Samples `frames_per_state` frames for every state, cycling through the
/// states round-robin.
pub fn sample_corpus(model: &TiedPldaModel, frames_per_state: usize, seed: u64) -> Result<Corpus> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = &model.hyper;
    let (d, p) = (h.feature_dim, h.frame_dim);
    let num_states = model.num_states();
    let sub_dists = model
        .states
        .iter()
        .map(|s| WeightedIndex::new(s.substates.iter().map(|x| x.weight)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("sub-state weights: {e}")))?;
    let comp_dists = model
        .states
        .iter()
        .map(|s| WeightedIndex::new(s.component_weights.iter().copied()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("component weights: {e}")))?;
    let noise_sd: Vec<DVector<f64>> = model
        .components
        .iter()
        .map(|c| c.noise_var.map(f64::sqrt))
        .collect();

    let total = num_states * frames_per_state;
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut latents = Vec::with_capacity(total);
    for t in 0..total {
        let j = t % num_states;
        let state = &model.states[j];
        let (k, m) = match model.family {
            crate::model::ModelFamily::Tied => {
                (sub_dists[j].sample(&mut rng), comp_dists[j].sample(&mut rng))
            }
            crate::model::ModelFamily::Mixture => {
                let k = sub_dists[j].sample(&mut rng);
                (k, k)
            }
        };
        let comp = &model.components[m];
        let x = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = DVector::from_fn(d, |i, _| noise_sd[m][i] * rng.sample::<f64, _>(StandardNormal));
        let y = &comp.frame_loading * &x
            + &comp.state_loading * &state.substates[k].vector
            + &comp.bias
            + &eps;
        data.extend(y.iter());
        labels.push(j);
        latents.push(FrameLatent {
            substate: k,
            component: m,
            frame_var: x,
            noise: eps,
        });
    }
    Ok(Corpus {
        features: FeatureMatrix::new(total, d, data)?,
        labels: LabelSequence::hard(labels),
        latents,
    })
}

/// Shape and scales of a randomly drawn generating model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub hyper: Hyperparams,
    pub substates_per_state: usize,
    /// Standard deviation of bias entries; sets component separation.
    pub bias_scale: f64,
    pub frame_loading_scale: f64,
    pub state_loading_scale: f64,
    /// Noise variances are drawn uniformly from this range.
    pub noise_range: (f64, f64),
}

impl SyntheticSpec {
    /// J=10, K=2, M=4, d=10, p=q=3 with well separated components.
    pub fn standard() -> Self {
        Self {
            hyper: Hyperparams {
                feature_dim: 10,
                frame_dim: 3,
                state_dim: 3,
                num_components: 4,
                num_states: 10,
            },
            substates_per_state: 2,
            bias_scale: 3.0,
            frame_loading_scale: 0.6,
            state_loading_scale: 0.6,
            noise_range: (0.2, 0.5),
        }
    }
}

/// Draws a generating model: Gaussian loadings and biases, uniform noise
/// variances, standard-normal sub-state vectors and random weights.
pub fn synthetic_model(spec: &SyntheticSpec, seed: u64) -> Result<TiedPldaModel> {
    let h = spec.hyper;
    h.validate()?;
    if spec.substates_per_state == 0 {
        return Err(Error::InvalidArgument("sub-state count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    let mut components = Vec::with_capacity(h.num_components);
    for _ in 0..h.num_components {
        let frame_loading =
            DMatrix::from_fn(h.feature_dim, h.frame_dim, |_, _| normal(spec.frame_loading_scale));
        let state_loading =
            DMatrix::from_fn(h.feature_dim, h.state_dim, |_, _| normal(spec.state_loading_scale));
        let bias = DVector::from_fn(h.feature_dim, |_, _| normal(spec.bias_scale));
        components.push(ComponentParams {
            frame_loading,
            state_loading,
            bias,
            noise_var: DVector::zeros(h.feature_dim),
        });
    }
    let (lo, hi) = spec.noise_range;
    for c in &mut components {
        c.noise_var = DVector::from_fn(h.feature_dim, |_, _| rng.random_range(lo..hi));
    }
    let mut states = Vec::with_capacity(h.num_states);
    for _ in 0..h.num_states {
        let substates = (0..spec.substates_per_state)
            .map(|_| SubState {
                vector: DVector::from_fn(h.state_dim, |_, _| rng.sample(StandardNormal)),
                weight: rng.random_range(0.3..1.0),
            })
            .collect::<Vec<_>>();
        let c_sum: f64 = substates.iter().map(|s| s.weight).sum();
        let substates = substates
            .into_iter()
            .map(|s| SubState {
                weight: s.weight / c_sum,
                ..s
            })
            .collect();
        let pi = DVector::from_fn(h.num_components, |_, _| rng.random_range(0.2..1.0));
        let pi_sum = pi.sum();
        states.push(StateModel {
            substates,
            component_weights: pi / pi_sum,
        });
    }
    let model = TiedPldaModel {
        hyper: h,
        family: crate::model::ModelFamily::Tied,
        components,
        states,
    };
    model.validate()?;
    Ok(model)
}
