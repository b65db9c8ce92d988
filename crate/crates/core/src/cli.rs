//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::background::{train_bg, BackgroundModel, BackgroundScorer, BgTrainConfig, DEFAULT_SELECT_N};
use crate::data::{sample_corpus, synthetic_model, FeatureMatrix, LabelSequence, SyntheticSpec};
use crate::error::Error;
use crate::eval::{evaluate, param_table, render_table_text, render_table_tsv, EvalConfig};
use crate::inference::{LikelihoodMode, Scorer};
use crate::model::{Hyperparams, TiedPldaModel, ACTIVE_WEIGHT_THRESHOLD};
use crate::shard::ExecPolicy;
use crate::training::{estep, init_model, mixup, Dataset, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tied-plda", version, about = "Tied PLDA acoustic models")]
struct Cli {
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed sharding and ordered merges, for bit-identical output
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a labelled corpus from a model
    Gen(GenArgs),
    /// Train a factor-analyser background model
    TrainBg(TrainBgArgs),
    /// Initialise a tied model from a background model
    Init(InitArgs),
    /// Run EM iterations
    Train(TrainArgs),
    /// Split sub-states up to a target total
    Mixup(MixupArgs),
    /// Per-frame log-likelihood of the labelled states
    Score(ScoreArgs),
    /// Per-frame best state
    Classify(ClassifyArgs),
    /// Active parameter counts
    CountParams(CountArgs),
    /// Dimensions and weight summary
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Background model for per-frame component selection [default: none, all components]
    #[arg(long)]
    bg: Option<PathBuf>,
    /// Components kept per frame when --bg is given
    #[arg(long, default_value_t = DEFAULT_SELECT_N)]
    select_n: usize,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Generating model [default: none, requires --fixture]
    #[arg(long, required_unless_present = "fixture")]
    model: Option<PathBuf>,
    /// Draw the standard synthetic model from --seed instead of reading --model
    #[arg(long, default_value_t = false, conflicts_with = "model")]
    fixture: bool,
    /// Where to write the fixture model [default: none]
    #[arg(long, requires = "fixture")]
    out_model: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    frames_per_state: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_features: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Debug, Args)]
struct TrainBgArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    components: usize,
    #[arg(long, default_value_t = 3)]
    rank: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    bg: PathBuf,
    #[arg(long)]
    states: usize,
    /// Frame subspace dimension
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// State subspace dimension
    #[arg(long, default_value_t = 3)]
    q: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Training config of `key = value` lines [default: built-in settings]
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    select: SelectArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MixupArgs {
    #[arg(long)]
    model: PathBuf,
    /// Target total number of sub-states
    #[arg(long)]
    target: usize,
    /// Features for occupancy-driven splitting [default: none, weights are used]
    #[arg(long, requires = "labels")]
    features: Option<PathBuf>,
    /// Labels matching --features [default: none]
    #[arg(long, requires = "features")]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// point or uncertainty
    #[arg(long, default_value = "uncertainty")]
    mode: LikelihoodMode,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Reference labels; adds an accuracy summary on stderr [default: none]
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[arg(long)]
    model: PathBuf,
    /// Tab-separated output instead of an aligned table
    #[arg(long, default_value_t = false)]
    tsv: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(String, Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn ctx<T>(r: crate::Result<T>, flag: &str, path: &Path) -> CliResult<T> {
    r.map_err(|e| CliError::Failed(format!("--{flag} {}", path.display()), e))
}

fn ctx_plain<T>(r: crate::Result<T>, what: &str) -> CliResult<T> {
    r.map_err(|e| CliError::Failed(what.to_string(), e))
}

fn load_model(path: &Path) -> CliResult<TiedPldaModel> {
    ctx(TiedPldaModel::load(path), "model", path)
}

fn load_features(path: &Path) -> CliResult<FeatureMatrix> {
    ctx(FeatureMatrix::load(path), "features", path)
}

fn load_labels(path: &Path) -> CliResult<LabelSequence> {
    ctx(LabelSequence::load(path), "labels", path)
}

fn check_feature_dim(model: &TiedPldaModel, features: &FeatureMatrix, path: &Path) -> CliResult<()> {
    if features.dim() != model.feature_dim() {
        return Err(CliError::Failed(
            format!("--features {}", path.display()),
            Error::Dimension {
                what: "feature dimension (model vs features)".into(),
                expected: model.feature_dim(),
                found: features.dim(),
            },
        ));
    }
    Ok(())
}

fn selection(
    select: &SelectArgs,
    model: &TiedPldaModel,
    features: &FeatureMatrix,
    policy: ExecPolicy,
) -> CliResult<Option<Vec<Vec<usize>>>> {
    let Some(path) = &select.bg else {
        return Ok(None);
    };
    if select.select_n == 0 {
        return Err(CliError::Usage("--select-n must be positive".into()));
    }
    let bg = ctx(BackgroundModel::load(path), "bg", path)?;
    if bg.num_components() != model.num_components() {
        return Err(CliError::Failed(
            format!("--bg {}", path.display()),
            Error::dim("background component count", model.num_components(), bg.num_components()),
        ));
    }
    let scorer = ctx(BackgroundScorer::new(&bg), "bg", path)?;
    let sel = ctx(scorer.select_all(features, select.select_n, policy), "bg", path)?;
    Ok(Some(sel))
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Failed("output".into(), Error::Io(e))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code. Streams go to `out`, diagnostics to `err`.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let threads = match cli.threads {
        Some(0) => {
            let _ = writeln!(err, "error: --threads must be positive");
            return EXIT_USAGE;
        }
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: --threads {threads}: {e}");
            return EXIT_USAGE;
        }
    };
    let policy = ExecPolicy {
        deterministic: cli.deterministic,
    };
    let mut out_buf = Vec::new();
    let mut err_buf = Vec::new();
    let result = pool.install(|| dispatch(cli.command, policy, &mut out_buf, &mut err_buf));
    let _ = out.write_all(&out_buf);
    let _ = err.write_all(&err_buf);
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failed(what, e)) => {
            let _ = writeln!(err, "error: {what}: {e}");
            match e {
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            }
        }
    }
}

fn dispatch(
    command: Command,
    policy: ExecPolicy,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    match command {
        Command::Gen(a) => {
            let model = match &a.model {
                Some(p) => load_model(p)?,
                None => ctx_plain(synthetic_model(&SyntheticSpec::standard(), a.seed), "--fixture")?,
            };
            if let Some(p) = &a.out_model {
                ctx(model.save(p), "out-model", p)?;
            }
            let corpus = ctx_plain(
                sample_corpus(&model, a.frames_per_state, a.seed.wrapping_add(1)),
                "--frames-per-state",
            )?;
            ctx(corpus.features.save(&a.out_features), "out-features", &a.out_features)?;
            ctx(corpus.labels.save(&a.out_labels), "out-labels", &a.out_labels)?;
            writeln!(out, "frames\t{}", corpus.features.num_frames()).map_err(io_err)?;
        }
        Command::TrainBg(a) => {
            let features = load_features(&a.features)?;
            let mut cfg = BgTrainConfig::new(a.components, a.rank, a.iters, a.seed);
            cfg.policy = policy;
            let res = ctx(train_bg(&features, &cfg), "features", &a.features)?;
            for (i, ll) in res.loglik_history.iter().enumerate() {
                writeln!(out, "iter={i} avg_loglik={:.8}", ll / features.num_frames() as f64)
                    .map_err(io_err)?;
            }
            ctx(res.model.save(&a.out), "out", &a.out)?;
        }
        Command::Init(a) => {
            let bg = ctx(BackgroundModel::load(&a.bg), "bg", &a.bg)?;
            let hyper = ctx_plain(
                Hyperparams::new(bg.feature_dim(), a.p, a.q, bg.num_components(), a.states),
                "--states/--p/--q",
            )?;
            let model = ctx(init_model(&bg, hyper, a.seed), "bg", &a.bg)?;
            ctx(model.save(&a.out), "out", &a.out)?;
        }
        Command::Train(a) => {
            let model = load_model(&a.model)?;
            let features = load_features(&a.features)?;
            let labels = load_labels(&a.labels)?;
            check_feature_dim(&model, &features, &a.features)?;
            let mut config = match &a.config {
                Some(p) => {
                    let text = ctx(std::fs::read_to_string(p).map_err(Error::from), "config", p)?;
                    ctx(text.parse::<TrainConfig>(), "config", p)?
                }
                None => TrainConfig::default(),
            };
            if policy.deterministic {
                config.deterministic = true;
            }
            let sel = selection(&a.select, &model, &features, config.estep_config().policy)?;
            let mut data = Dataset::new(&features, &labels);
            if let Some(s) = &sel {
                data = data.with_selection(s);
            }
            let mut trainer = Trainer::new(config);
            let mut lines = Vec::new();
            let (trained, _) = ctx(
                trainer.run(model, &data, |r| lines.push(r.to_string())),
                "labels",
                &a.labels,
            )
            .inspect_err(|_| {
                for l in &lines {
                    let _ = writeln!(out, "{l}");
                }
            })?;
            for l in &lines {
                writeln!(out, "{l}").map_err(io_err)?;
            }
            ctx(trained.save(&a.out), "out", &a.out)?;
        }
        Command::Mixup(a) => {
            let model = load_model(&a.model)?;
            let occupancy = match (&a.features, &a.labels) {
                (Some(fp), Some(lp)) => {
                    let features = load_features(fp)?;
                    let labels = load_labels(lp)?;
                    check_feature_dim(&model, &features, fp)?;
                    let data = Dataset::new(&features, &labels);
                    let cfg = crate::training::EStepConfig {
                        mode: LikelihoodMode::Uncertainty,
                        policy,
                    };
                    let e = ctx(estep(&model, &data, &cfg), "features", fp)?;
                    Some(e.acc.substate_occupancy())
                }
                _ => None,
            };
            let grown = ctx_plain(
                mixup(&model, a.target, a.seed, occupancy.as_deref()),
                "--target",
            )?;
            ctx(grown.save(&a.out), "out", &a.out)?;
            writeln!(out, "substates\t{}", grown.total_substates()).map_err(io_err)?;
        }
        Command::Score(a) => {
            let model = load_model(&a.model)?;
            let features = load_features(&a.features)?;
            let labels = load_labels(&a.labels)?;
            check_feature_dim(&model, &features, &a.features)?;
            if labels.len() != features.num_frames() {
                return Err(CliError::Failed(
                    format!("--labels {}", a.labels.display()),
                    Error::dim("label count", features.num_frames(), labels.len()),
                ));
            }
            ctx(labels.validate(model.num_states()), "labels", &a.labels)?;
            let sel = selection(&a.select, &model, &features, policy)?;
            let scorer = ctx(Scorer::new(&model), "model", &a.model)?;
            let mut total = 0.0;
            for t in 0..features.num_frames() {
                let comps = sel.as_ref().map(|s| s[t].as_slice());
                let mut ll = 0.0;
                for (j, mass) in labels.posteriors(t) {
                    if mass > 0.0 {
                        let v = ctx(
                            scorer.state_loglik(j, features.frame(t), comps, a.mode),
                            "features",
                            &a.features,
                        )?;
                        ll += mass * v;
                    }
                }
                total += ll;
                writeln!(out, "{t}\t{ll:.10}").map_err(io_err)?;
            }
            let avg = total / features.num_frames().max(1) as f64;
            writeln!(err, "total_loglik\t{total:.10}\navg_loglik\t{avg:.10}").map_err(io_err)?;
        }
        Command::Classify(a) => {
            let model = load_model(&a.model)?;
            let features = load_features(&a.features)?;
            check_feature_dim(&model, &features, &a.features)?;
            let sel = selection(&a.select, &model, &features, policy)?;
            let scorer = ctx(Scorer::new(&model), "model", &a.model)?;
            let all: Vec<usize> = (0..model.num_components()).collect();
            let mut hyps = Vec::with_capacity(features.num_frames());
            for t in 0..features.num_frames() {
                let comps = sel.as_ref().map_or(all.as_slice(), |s| s[t].as_slice());
                let (best, _) = ctx(
                    scorer.classify(features.frame(t), None, comps),
                    "features",
                    &a.features,
                )?;
                hyps.push(best);
                writeln!(out, "{t}\t{best}").map_err(io_err)?;
            }
            if let Some(lp) = &a.labels {
                let labels = load_labels(lp)?;
                let mut data = Dataset::new(&features, &labels);
                if let Some(s) = &sel {
                    data = data.with_selection(s);
                }
                let cfg = EvalConfig {
                    mode: LikelihoodMode::Uncertainty,
                    policy,
                };
                let report = ctx(evaluate(&model, &data, &cfg), "labels", lp)?;
                write!(err, "{}", report.to_tsv()).map_err(io_err)?;
            }
        }
        Command::CountParams(a) => {
            let model = load_model(&a.model)?;
            let name = a.model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let rows = param_table(&[(name.as_str(), &model)]);
            let text = if a.tsv {
                render_table_tsv(&rows)
            } else {
                render_table_text(&rows)
            };
            write!(out, "{text}").map_err(io_err)?;
        }
        Command::Inspect(a) => {
            let model = load_model(&a.model)?;
            let h = &model.hyper;
            let mut s = String::new();
            use std::fmt::Write as _;
            let _ = writeln!(s, "family\t{:?}", model.family);
            let _ = writeln!(
                s,
                "dims\td={} p={} q={} M={} J={}",
                h.feature_dim, h.frame_dim, h.state_dim, h.num_components, h.num_states
            );
            let _ = writeln!(s, "substates\t{}", model.total_substates());
            let counts: Vec<usize> = model.states.iter().map(|st| st.substates.len()).collect();
            let _ = writeln!(
                s,
                "substates_per_state\tmin={} max={}",
                counts.iter().min().unwrap_or(&0),
                counts.iter().max().unwrap_or(&0)
            );
            let active: Vec<usize> = model
                .states
                .iter()
                .map(|st| {
                    st.component_weights
                        .iter()
                        .filter(|&&w| w >= ACTIVE_WEIGHT_THRESHOLD)
                        .count()
                })
                .collect();
            let mean_active = active.iter().sum::<usize>() as f64 / active.len().max(1) as f64;
            let _ = writeln!(s, "active_components_mean\t{mean_active:.3}");
            let min_w = model
                .states
                .iter()
                .flat_map(|st| st.component_weights.iter().copied())
                .fold(f64::INFINITY, f64::min);
            let _ = writeln!(s, "min_component_weight\t{min_w:e}");
            write!(out, "{s}").map_err(io_err)?;
        }
    }
    Ok(())
}
