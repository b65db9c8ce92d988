//! Frame classification accuracy, held-out likelihood and parameter tables.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::inference::{LikelihoodMode, PairScore, Scorer, Scratch};
use crate::math::{log_sum_exp, LN_2PI};
use crate::model::{count_params, TiedPldaModel};
use crate::shard::ExecPolicy;
use crate::training::Dataset;
use crate::data::{FeatureMatrix, LabelSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalConfig {
    pub mode: LikelihoodMode,
    pub policy: ExecPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    /// Fraction of frames whose best state matches the reference label.
    pub accuracy: f64,
    /// `sum_t sum_j P(j | y_t) log p(y_t | j) / T`.
    pub avg_loglik: f64,
    /// `confusion[reference][hypothesis]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn correct(&self) -> u64 {
        self.confusion.iter().enumerate().map(|(j, r)| r[j]).sum()
    }

    /// One `name<TAB>value` line per metric.
    pub fn to_tsv(&self) -> String {
        format!(
            "frames\t{}\naccuracy\t{}\navg_loglik\t{}\ncorrect\t{}\n",
            self.frames,
            self.accuracy,
            self.avg_loglik,
            self.correct()
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "frames:         {}\naccuracy:       {:.4}\navg log-lik:    {:.6}\n",
            self.frames, self.accuracy, self.avg_loglik
        )
    }
}

struct EvalAcc {
    frames: usize,
    loglik: f64,
    confusion: Vec<Vec<u64>>,
}

impl EvalAcc {
    fn merge(mut self, o: Self) -> Self {
        self.frames += o.frames;
        self.loglik += o.loglik;
        for (a, b) in self.confusion.iter_mut().zip(&o.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }
}

/// Classifies every frame (uncertainty scoring over the selected components,
/// all states as candidates) and accumulates the label-weighted
/// log-likelihood under `config.mode`.
pub fn evaluate(model: &TiedPldaModel, data: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    data.validate(model)?;
    let n = data.num_frames();
    if n == 0 {
        return Err(Error::NoFrames);
    }
    let j_count = model.num_states();
    let scorer = Scorer::new(model)?;
    let all: Vec<usize> = (0..model.num_components()).collect();
    let fold = |range: std::ops::Range<usize>| -> Result<EvalAcc> {
        let mut acc = EvalAcc {
            frames: 0,
            loglik: 0.0,
            confusion: vec![vec![0; j_count]; j_count],
        };
        let mut scratch = Scratch::new(model);
        let mut entries: Vec<PairScore> = Vec::new();
        for t in range {
            let y = data.features.frame(t);
            let comps = data.components(t);
            acc.frames += 1;
            for (j, mass) in data.labels.posteriors(t) {
                if mass <= 0.0 {
                    continue;
                }
                scorer.pair_scores(j, y, comps, config.mode, &mut scratch, &mut entries);
                let total = log_sum_exp(entries.iter().map(|e| e.log_joint));
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "frame {t}: every selected component yields zero likelihood for state {j}"
                    )));
                }
                acc.loglik += mass * total;
            }
            let (hyp, _) = scorer.classify(y, None, comps.unwrap_or(&all))?;
            if let Some(reference) = data.labels.best_state(t) {
                acc.confusion[reference][hyp] += 1;
            }
        }
        Ok(acc)
    };
    let acc = config
        .policy
        .map_reduce(n, fold, |a, b| Ok(a?.merge(b?)))
        .ok_or(Error::NoFrames)??;
    let total: u64 = acc.confusion.iter().flatten().sum();
    let correct: u64 = acc.confusion.iter().enumerate().map(|(j, r)| r[j]).sum();
    Ok(EvalReport {
        frames: acc.frames,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        avg_loglik: acc.loglik / acc.frames as f64,
        confusion: acc.confusion,
    })
}

/// One diagonal Gaussian per state, fitted by maximum likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussianBaseline {
    pub means: Vec<DVector<f64>>,
    pub vars: Vec<DVector<f64>>,
}

impl DiagonalGaussianBaseline {
    /// Fits every state from its hard-assigned (best-label) frames. Variances
    /// are floored at `1e-6` times the global data variance.
    pub fn fit(features: &FeatureMatrix, labels: &LabelSequence, num_states: usize) -> Result<Self> {
        if labels.len() != features.num_frames() {
            return Err(Error::dim("label count", features.num_frames(), labels.len()));
        }
        labels.validate(num_states)?;
        let d = features.dim();
        let mut count = vec![0.0; num_states];
        let mut sum = vec![DVector::<f64>::zeros(d); num_states];
        let mut sq = vec![DVector::<f64>::zeros(d); num_states];
        for (t, y) in features.frames().enumerate() {
            let Some(j) = labels.best_state(t) else { continue };
            count[j] += 1.0;
            for i in 0..d {
                sum[j][i] += y[i];
                sq[j][i] += y[i] * y[i];
            }
        }
        let (_, global_var) = features.mean_var();
        let mut means = Vec::with_capacity(num_states);
        let mut vars = Vec::with_capacity(num_states);
        for j in 0..num_states {
            if count[j] == 0.0 {
                return Err(Error::InvalidArgument(format!("state {j} has no frames")));
            }
            let mean = &sum[j] / count[j];
            let var = DVector::from_fn(d, |i, _| {
                let floor: f64 = 1e-6 * if global_var[i] > 0.0 { global_var[i] } else { 1.0 };
                let v: f64 = sq[j][i] / count[j] - mean[i] * mean[i];
                v.max(floor)
            });
            means.push(mean);
            vars.push(var);
        }
        Ok(Self { means, vars })
    }

    pub fn log_density(&self, j: usize, y: &[f64]) -> f64 {
        let (mean, var) = (&self.means[j], &self.vars[j]);
        -0.5 * y
            .iter()
            .enumerate()
            .map(|(i, v)| LN_2PI + var[i].ln() + (v - mean[i]).powi(2) / var[i])
            .sum::<f64>()
    }

    /// Best state; ties go to the lowest index.
    pub fn classify(&self, y: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..self.means.len() {
            let v = self.log_density(j, y);
            if v > best_val {
                best_val = v;
                best = j;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &FeatureMatrix, labels: &LabelSequence) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (t, y) in features.frames().enumerate() {
            if let Some(j) = labels.best_state(t) {
                total += 1;
                correct += (self.classify(y) == j) as usize;
            }
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    pub system: String,
    pub feature_dim: usize,
    pub state_dependent: usize,
    pub state_independent: usize,
}

/// Active-parameter counts for each named model.
pub fn param_table(models: &[(&str, &TiedPldaModel)]) -> Vec<ParamRow> {
    models
        .iter()
        .map(|(name, model)| {
            let c = count_params(model, None);
            ParamRow {
                system: name.to_string(),
                feature_dim: model.feature_dim(),
                state_dependent: c.state_dependent,
                state_independent: c.state_independent,
            }
        })
        .collect()
}

const HEADERS: [&str; 4] = ["system", "d", "state-dependent", "state-independent"];

pub fn render_table_text(rows: &[ParamRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.system.clone(),
                r.feature_dim.to_string(),
                r.state_dependent.to_string(),
                r.state_independent.to_string(),
            ]
        })
        .collect();
    let mut width = HEADERS.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: [&str; 4]| {
        let _ = write!(out, "{:<w$}", row[0], w = width[0]);
        for i in 1..4 {
            let _ = write!(out, "  {:>w$}", row[i], w = width[i]);
        }
        out.push('\n');
    };
    line(&mut out, HEADERS);
    for row in &cells {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
    }
    out
}

pub fn render_table_tsv(rows: &[ParamRow]) -> String {
    let mut out = HEADERS.join("\t");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.system, r.feature_dim, r.state_dependent, r.state_independent
        );
    }
    out
}
