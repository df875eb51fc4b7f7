//! Command-line front end shared by the `ssmlab` binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    approx_rate, check_lemma3_condition, decay_histogram, sensitivity_analytic, ApproxConfig,
    ApproxMethod, GroupBy, PiecewiseConstant, ScalarSsm, SensKind, DEFAULT_BINS,
};
use crate::constructions::{
    build_induction_heads_dt, build_keep_nth, build_mqar_mamba, build_mqar_mamba2, build_mqar_s4d,
    EmbedMode, W_DELTA,
};
use crate::error::{bail_invalid, Error, Result};
use crate::mixers::{Evaluator, MambaBlock, MixerKind};
use crate::tasks::{dataset, evaluate_detailed, Split, TaskConfig};
use crate::tensor_core::softplus_inv;
use crate::training::{
    train, DataSizes, ModelConfig, OptimConfig, RunConfig, RunRecord, StopReason,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SSMLAB_OUT";
pub const CSV_SCHEMA: &str = "1";

#[derive(Debug, Parser)]
#[command(
    name = "ssmlab",
    version,
    about = "Selective SSM constructions, analysis and training"
)]
pub struct Cli {
    /// Output root (default: $SSMLAB_OUT, else ./ssmlab-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed for data, initialization and projections.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Ignore wall-clock budgets so that reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Suppress the one-line summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a closed-form construction against the task oracle.
    Verify(VerifyArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train over a grid of sizes and seeds.
    Sweep(SweepArgs),
    /// Closed-form state sensitivities of a scalar-input SSM.
    Sensitivity(SensitivityArgs),
    /// Histogram of per-step decay factors on task inputs.
    Histogram(HistogramArgs),
    /// Approximation error rates of Mamba wavelets and Fourier series.
    Wavelet(WaveletArgs),
    /// Run a JSON experiment spec.
    Spec(SpecArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    KeepNth,
    MqarMamba,
    MqarMamba2,
    MqarS4d,
    InductionHeadsDt,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    pub construction: Construction,
    #[arg(long, default_value_t = 4)]
    pub kappa: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, value_enum, default_value_t = EmbedMode::Onehot)]
    pub mode: EmbedMode,
    /// JL distortion (jl mode).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sequence length (default 50 for keep_nth, else 100).
    #[arg(long)]
    pub t: Option<usize>,
    /// Position to keep (keep_nth).
    #[arg(long = "n", default_value_t = 5)]
    pub nth: usize,
    /// Model width for keep_nth.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// State size for keep_nth.
    #[arg(long, default_value_t = 8)]
    pub state: usize,
    #[arg(long, default_value_t = 0.75)]
    pub p_hard: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Remove the output gate of the S4D construction (negative control).
    #[arg(long)]
    pub no_gate: bool,
    #[arg(short = 'n', long = "num-instances", default_value_t = 1000)]
    pub num_instances: usize,
    #[arg(long, default_value_t = 10)]
    pub max_failures: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    KeepNth,
    Mqar,
    InductionHeads,
}

#[derive(Debug, Clone, Args)]
pub struct TaskModelArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::KeepNth)]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value_t = MixerKind::Mamba)]
    pub kind: MixerKind,
    #[arg(long, default_value_t = 50)]
    pub t: usize,
    #[arg(long, default_value_t = 5)]
    pub nth: usize,
    #[arg(long, default_value_t = 0.75)]
    pub p_hard: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Positional channel t/T in the last embedding column.
    #[arg(long)]
    pub pe: bool,
    /// Skip convolutions and gate.
    #[arg(long)]
    pub simplified: bool,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_final: f64,
    #[arg(long, default_value_t = 20_000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1_000)]
    pub val_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub test_size: usize,
    /// Per-run wall-clock budget in minutes.
    #[arg(long, default_value_t = 30.0)]
    pub budget_mins: f64,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    pub target_val_acc: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TaskModelArgs,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub state: usize,
    #[arg(long, default_value_t = 128)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub kappa: usize,
    /// Exit 1 when test accuracy is below this value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: TaskModelArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [32usize])]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [8usize])]
    pub state: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [128usize])]
    pub vocab: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize])]
    pub kappa: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    /// Total wall-clock budget in minutes.
    #[arg(long)]
    pub total_budget_mins: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    #[arg(long, value_enum, default_value_t = SensKind::S4d)]
    pub kind: SensKind,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5f64])]
    pub lambda: Vec<f64>,
    /// B bias per state.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0f64])]
    pub b: Vec<f64>,
    /// B slope per state (s6).
    #[arg(long, value_delimiter = ',')]
    pub w_b: Vec<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub w_delta: f64,
    /// Δ bias; default gives Δ = 1 at x = 0.
    #[arg(long, allow_hyphen_values = true)]
    pub b_delta: Option<f64>,
    /// Input sequence; random in [-1, 1] when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub t_len: usize,
    /// Constant for the frozen-time check.
    #[arg(long)]
    pub c: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum GroupArg {
    Timestep,
    SequenceLength,
}

#[derive(Debug, Clone, Args)]
pub struct HistogramArgs {
    /// Model file; default is the constructed keep_nth model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "n", default_value_t = 5)]
    pub nth: usize,
    /// Sequence lengths to draw inputs at.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize])]
    pub t: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub state: usize,
    #[arg(long, value_enum, default_value_t = GroupArg::Timestep)]
    pub group_by: GroupArg,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(short = 'i', long = "num-instances", default_value_t = 100)]
    pub num_instances: usize,
}

#[derive(Debug, Clone, Args)]
pub struct WaveletArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.5f64])]
    pub breaks: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 1.0])]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 1 << 19)]
    pub grid: usize,
    #[arg(long, default_value_t = -1e9, allow_hyphen_values = true)]
    pub w_delta: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    pub file: PathBuf,
}

/// A reproducible invocation: `args` are the command's own flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub deterministic: bool,
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    deterministic: bool,
    quiet: bool,
}

impl Ctx {
    fn say(&self, v: serde_json::Value) {
        if !self.quiet {
            println!("{v}");
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let p = self.out.join(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, &s)
    }
}

/// Exit code for an error: 2 for usage and configuration problems, else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) | Error::Shape(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ssmlab-out"))
}

/// Runs a parsed command line; the value is the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let ctx = Ctx {
        out: cli.out.clone().unwrap_or_else(default_out),
        seed: cli.seed,
        deterministic: cli.deterministic,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Verify(a) => cmd_verify(&ctx, &a),
        Command::Train(a) => cmd_train(&ctx, &a),
        Command::Sweep(a) => cmd_sweep(&ctx, &a),
        Command::Sensitivity(a) => cmd_sensitivity(&ctx, &a),
        Command::Histogram(a) => cmd_histogram(&ctx, &a),
        Command::Wavelet(a) => cmd_wavelet(&ctx, &a),
        Command::Spec(a) => cmd_spec(&ctx, &a),
    }
}

/// Parses `argv` (program name first) and runs it.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => match run(cli) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        },
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

fn build_construction(a: &VerifyArgs, seed: u64) -> Result<(MambaBlock, TaskConfig, f64)> {
    let t = a.t.unwrap_or(if a.construction == Construction::KeepNth {
        50
    } else {
        100
    });
    let exact = a.mode == EmbedMode::Onehot;
    let threshold = if exact { 1.0 } else { 0.99 };
    Ok(match a.construction {
        Construction::KeepNth => (
            build_keep_nth(a.nth, t, a.vocab, a.d, a.state, seed)?,
            TaskConfig::keep_nth(a.nth, t, a.vocab, seed),
            1.0,
        ),
        Construction::MqarMamba => (
            build_mqar_mamba(a.kappa, a.vocab, a.mode, a.epsilon, seed)?,
            TaskConfig::mqar(a.kappa, t, a.vocab, seed),
            threshold,
        ),
        Construction::MqarMamba2 => (
            build_mqar_mamba2(a.kappa, a.vocab, a.mode, a.epsilon, seed)?,
            TaskConfig::mqar(a.kappa, t, a.vocab, seed),
            threshold,
        ),
        Construction::MqarS4d => (
            build_mqar_s4d(a.kappa, a.vocab, a.mode, a.epsilon, seed, !a.no_gate)?,
            TaskConfig::mqar(a.kappa, t, a.vocab, seed),
            threshold,
        ),
        Construction::InductionHeadsDt => (
            build_induction_heads_dt(a.vocab, W_DELTA)?,
            TaskConfig::induction_heads(t, a.vocab, a.p_hard, a.gamma, seed),
            1.0,
        ),
    })
}

fn cmd_verify(ctx: &Ctx, a: &VerifyArgs) -> Result<i32> {
    let (block, task, threshold) = build_construction(a, ctx.seed)?;
    let instances = dataset(&task, Split::Test, a.num_instances)?;
    let report = evaluate_detailed(&Evaluator::new(&block)?, &instances, a.max_failures)?;
    let control = a.no_gate && a.construction == Construction::MqarS4d;
    let passed = if control {
        report.accuracy <= 2.0 / a.vocab as f64
    } else {
        report.accuracy >= threshold
    };
    let out = json!({
        "construction": a.construction,
        "mode": a.mode,
        "kappa": a.kappa,
        "vocab": a.vocab,
        "t": task.t,
        "num_instances": a.num_instances,
        "seed": ctx.seed,
        "d": block.d,
        "state": block.n,
        "params": block.num_params(),
        "negative_control": control,
        "threshold": if control { 2.0 / a.vocab as f64 } else { threshold },
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "passed": passed,
        "failures": report.failures,
    });
    ctx.write_json("verify.json", &out)?;
    ctx.say(out.clone());
    Ok(if passed { 0 } else { 1 })
}

fn task_config(c: &TaskModelArgs, vocab: usize, kappa: usize, seed: u64) -> TaskConfig {
    match c.task {
        TaskArg::KeepNth => TaskConfig::keep_nth(c.nth, c.t, vocab, seed),
        TaskArg::Mqar => TaskConfig::mqar(kappa, c.t, vocab, seed),
        TaskArg::InductionHeads => TaskConfig::induction_heads(c.t, vocab, c.p_hard, c.gamma, seed),
    }
}

fn run_config(
    ctx: &Ctx,
    c: &TaskModelArgs,
    d: usize,
    n: usize,
    vocab: usize,
    kappa: usize,
    seed: u64,
) -> RunConfig {
    let task = task_config(c, vocab, kappa, seed);
    let tokens = task.num_tokens();
    RunConfig {
        model: ModelConfig {
            kind: c.kind,
            d,
            n,
            vocab: tokens,
            classes: tokens,
            pe: c.pe,
            simplified: c.simplified,
        },
        task,
        optim: OptimConfig {
            lr_init: c.lr,
            lr_final: c.lr_final,
            epochs: c.epochs,
            batch_size: c.batch_size,
            early_stop_val_acc: c.target_val_acc,
            budget_secs: (!ctx.deterministic).then_some(c.budget_mins * 60.0),
            seed,
            ..OptimConfig::default()
        },
        sizes: DataSizes {
            train: c.train_size,
            val: c.val_size,
            test: c.test_size,
        },
    }
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<i32> {
    let cfg = run_config(ctx, &a.common, a.d, a.state, a.vocab, a.kappa, ctx.seed);
    let res = train(&cfg)?;
    ctx.write_json("run.json", &res.record)?;
    ctx.write("model.json", &(res.model.to_json()? + "\n"))?;
    ctx.say(json!({"test_accuracy": res.record.test_accuracy, "epochs": res.record.epochs, "params": res.record.params}));
    Ok(match a.threshold {
        Some(th) if res.record.test_accuracy < th => 1,
        _ => 0,
    })
}

/// FNV-1a over the JSON form of a run config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let s = serde_json::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Width predicted sufficient by the constructions.
pub fn bound_d(kind: MixerKind, kappa: usize, vocab: usize) -> f64 {
    let lv = (vocab as f64).log2();
    match kind {
        MixerKind::Mamba => kappa as f64 + lv,
        MixerKind::Mamba2 => (kappa as f64).log2() + lv,
        MixerKind::S4d => kappa as f64 * lv,
        MixerKind::MambaDt => 2.0 * vocab as f64,
    }
}

#[derive(Clone, Debug, Serialize)]
struct SweepRow {
    schema: &'static str,
    config_hash: String,
    task: String,
    kind: String,
    kappa: usize,
    vocab: usize,
    d: usize,
    n: usize,
    t: usize,
    seed: u64,
    accuracy: f64,
    epochs: usize,
    params: usize,
    stopped_by: String,
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<i32> {
    if a.seeds.is_empty()
        || a.d.is_empty()
        || a.state.is_empty()
        || a.vocab.is_empty()
        || a.kappa.is_empty()
    {
        bail_invalid!("sweep grid and seed list must be nonempty");
    }
    let kappas: Vec<usize> = if a.common.task == TaskArg::Mqar {
        a.kappa.clone()
    } else {
        vec![0]
    };
    let start = std::time::Instant::now();
    let mut rows: Vec<SweepRow> = vec![];
    let mut records: Vec<RunRecord> = vec![];
    let mut exhausted = false;
    'grid: for &kappa in &kappas {
        for &vocab in &a.vocab {
            for &d in &a.d {
                for &n in &a.state {
                    for &seed in &a.seeds {
                        if !ctx.deterministic
                            && a.total_budget_mins
                                .is_some_and(|b| start.elapsed().as_secs_f64() > b * 60.0)
                        {
                            exhausted = true;
                            break 'grid;
                        }
                        let cfg = run_config(ctx, &a.common, d, n, vocab, kappa.max(1), seed);
                        let rec = train(&cfg)?.record;
                        rows.push(SweepRow {
                            schema: CSV_SCHEMA,
                            config_hash: config_hash(&cfg),
                            task: format!("{:?}", cfg.task.kind),
                            kind: cfg.model.kind.name().into(),
                            kappa: cfg.task.kappa,
                            vocab,
                            d,
                            n,
                            t: cfg.task.t,
                            seed,
                            accuracy: rec.test_accuracy,
                            epochs: rec.epochs,
                            params: rec.params,
                            stopped_by: serde_json::to_value(rec.stopped_by)?
                                .as_str()
                                .unwrap_or("")
                                .into(),
                        });
                        records.push(rec);
                    }
                }
            }
        }
    }
    let mut runs = csv::Writer::from_writer(vec![]);
    for r in &rows {
        runs.serialize(r)?;
    }
    ctx.write(
        "sweep_runs.csv",
        &String::from_utf8(runs.into_inner().map_err(|e| Error::Io(e.into_error()))?).unwrap(),
    )?;
    let mut cells = csv::Writer::from_writer(vec![]);
    cells.write_record([
        "schema",
        "kind",
        "kappa",
        "vocab",
        "d",
        "n",
        "t",
        "seeds",
        "best_accuracy",
        "mean_accuracy",
    ])?;
    let mut i = 0;
    while i < rows.len() {
        let r = &rows[i];
        let same: Vec<&SweepRow> = rows[i..]
            .iter()
            .take_while(|o| (o.kappa, o.vocab, o.d, o.n) == (r.kappa, r.vocab, r.d, r.n))
            .collect();
        let best = same
            .iter()
            .map(|o| o.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let mean = same.iter().map(|o| o.accuracy).sum::<f64>() / same.len() as f64;
        cells.write_record([
            CSV_SCHEMA.to_string(),
            r.kind.clone(),
            r.kappa.to_string(),
            r.vocab.to_string(),
            r.d.to_string(),
            r.n.to_string(),
            r.t.to_string(),
            same.len().to_string(),
            best.to_string(),
            mean.to_string(),
        ])?;
        i += same.len();
    }
    ctx.write(
        "sweep_cells.csv",
        &String::from_utf8(cells.into_inner().map_err(|e| Error::Io(e.into_error()))?).unwrap(),
    )?;
    let mut bounds = csv::Writer::from_writer(vec![]);
    bounds.write_record(["schema", "kind", "kappa", "vocab", "bound_d"])?;
    for kind in MixerKind::ALL {
        for &kappa in &kappas {
            for &vocab in &a.vocab {
                bounds.write_record([
                    CSV_SCHEMA.to_string(),
                    kind.name().to_string(),
                    kappa.to_string(),
                    vocab.to_string(),
                    bound_d(kind, kappa.max(1), vocab).to_string(),
                ])?;
            }
        }
    }
    ctx.write(
        "sweep_bounds.csv",
        &String::from_utf8(bounds.into_inner().map_err(|e| Error::Io(e.into_error()))?).unwrap(),
    )?;
    ctx.write_json("sweep_records.json", &records)?;
    ctx.say(json!({"runs": rows.len(), "budget_exhausted": exhausted}));
    Ok(if exhausted { 1 } else { 0 })
}

fn cmd_sensitivity(ctx: &Ctx, a: &SensitivityArgs) -> Result<i32> {
    let n = a.lambda.len();
    if a.b.len() != n {
        bail_invalid!("need one B value per rate");
    }
    let w_b = if a.w_b.is_empty() {
        vec![0.0; n]
    } else {
        a.w_b.clone()
    };
    let model = ScalarSsm {
        kind: a.kind,
        lambda: a.lambda.clone(),
        w_b,
        b_b: a.b.clone(),
        w_delta: a.w_delta,
        b_delta: a.b_delta.unwrap_or(softplus_inv(1.0)),
    };
    model.validate()?;
    let x: Vec<f64> = if a.x.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        (0..a.t_len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    } else {
        a.x.clone()
    };
    let tl = x.len();
    if tl < 2 {
        bail_invalid!("need at least two inputs");
    }
    let mut profile = vec![];
    for k in 0..n {
        let row: Result<Vec<f64>> = (1..tl)
            .map(|j| sensitivity_analytic(&model, &x, tl, j, k).map(f64::abs))
            .collect();
        profile.push(row?);
    }
    let lemma3 = match a.c {
        Some(c) => Some(
            (0..n)
                .flat_map(|k| (1..=tl).map(move |j| (k, j)))
                .map(|(k, j)| check_lemma3_condition(&model, &x, c, k, j))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let ok = lemma3
        .as_ref()
        .is_none_or(|v| v.iter().all(|r| r.bound_met != Some(false)));
    let out = json!({"model": model, "x": x, "t": tl, "profile": profile, "lemma3": lemma3});
    ctx.write_json("sensitivity.json", &out)?;
    ctx.say(json!({"t": tl, "states": n, "lemma3_ok": ok}));
    Ok(if ok { 0 } else { 1 })
}

fn cmd_histogram(ctx: &Ctx, a: &HistogramArgs) -> Result<i32> {
    let t_max =
        *a.t.iter()
            .max()
            .ok_or_else(|| Error::Invalid("need a sequence length".into()))?;
    let (model, model_id) = match &a.model {
        Some(p) => (load_model(p)?, p.display().to_string()),
        None => (
            build_keep_nth(a.nth, t_max, a.vocab, a.d, a.state, ctx.seed)?,
            format!(
                "keep_nth(n={},T={},V={},d={},N={})",
                a.nth, t_max, a.vocab, a.d, a.state
            ),
        ),
    };
    let vocab = model.vocab.saturating_sub(1).max(1);
    let mut seqs = vec![];
    for &t in &a.t {
        let task = TaskConfig::keep_nth(a.nth, t, vocab, ctx.seed);
        seqs.extend(
            dataset(&task, Split::Test, a.num_instances)?
                .into_iter()
                .map(|i| i.input),
        );
    }
    let group_by = match a.group_by {
        GroupArg::Timestep => GroupBy::Timestep { marker: a.nth },
        GroupArg::SequenceLength => GroupBy::SequenceLength,
    };
    let dataset_id = format!(
        "keep_nth(n={},T={:?},V={},seed={},count={})",
        a.nth, a.t, vocab, ctx.seed, a.num_instances
    );
    let h = decay_histogram(&model, &seqs, a.bins, group_by, &model_id, &dataset_id)?;
    ctx.write("histogram.json", &(h.to_json()? + "\n"))?;
    let mut buf = vec![];
    h.write_csv(&mut buf)?;
    ctx.write("histogram.csv", &String::from_utf8(buf).unwrap())?;
    let props: Vec<serde_json::Value> = (0..h.groups.len())
        .map(|g| json!({"group": h.groups[g], "low": h.proportion(g, 0), "high": h.proportion(g, h.bins() - 1)}))
        .collect();
    ctx.say(json!({"total": h.total(), "groups": props}));
    Ok(0)
}

pub fn load_model(p: &Path) -> Result<MambaBlock> {
    MambaBlock::from_json(&fs::read_to_string(p)?)
}

fn cmd_wavelet(ctx: &Ctx, a: &WaveletArgs) -> Result<i32> {
    let target = PiecewiseConstant::new(a.breaks.clone(), a.values.clone())?;
    if target.jumps() == 0 {
        bail_invalid!("target needs at least one jump");
    }
    let cfg = ApproxConfig {
        grid: a.grid,
        w_delta: a.w_delta,
    };
    let w = approx_rate(&target, &a.n_list, ApproxMethod::MambaWavelet, &cfg)?;
    let f = approx_rate(&target, &a.n_list, ApproxMethod::Fourier, &cfg)?;
    let in_band = |s: Option<f64>| s.is_some_and(|s| (-1.3..=-0.7).contains(&s));
    let below: Vec<bool> = a
        .n_list
        .iter()
        .zip(w.errors.iter().zip(&f.errors))
        .filter(|(&n, _)| n >= 6)
        .map(|(_, (we, fe))| we < fe)
        .collect();
    let checks = json!({
        "wavelet_slope_in_band": in_band(w.slope),
        "fourier_slope_in_band": in_band(f.slope),
        "wavelet_below_fourier_from_6": below.iter().all(|&b| b),
    });
    let passed = in_band(w.slope) && in_band(f.slope) && below.iter().all(|&b| b);
    let out = json!({"mamba_wavelet": w, "fourier": f, "checks": checks, "passed": passed});
    ctx.write_json("wavelet.json", &out)?;
    let mut wr = csv::Writer::from_writer(vec![]);
    wr.write_record(["schema", "n", "wavelet_sq_error", "fourier_sq_error"])?;
    for (i, n) in a.n_list.iter().enumerate() {
        wr.write_record([
            CSV_SCHEMA.to_string(),
            n.to_string(),
            w.errors[i].to_string(),
            f.errors[i].to_string(),
        ])?;
    }
    ctx.write(
        "wavelet.csv",
        &String::from_utf8(wr.into_inner().map_err(|e| Error::Io(e.into_error()))?).unwrap(),
    )?;
    ctx.say(json!({"wavelet_slope": w.slope, "fourier_slope": f.slope, "fourier_l2_slope": f.l2_slope, "passed": passed}));
    Ok(if passed { 0 } else { 1 })
}

fn cmd_spec(ctx: &Ctx, a: &SpecArgs) -> Result<i32> {
    let spec: ExperimentSpec = serde_json::from_str(&fs::read_to_string(&a.file)?)?;
    if spec.command == "spec" {
        bail_invalid!("specs cannot nest");
    }
    let out = spec.out_dir.clone().unwrap_or_else(|| ctx.out.clone());
    let seeds = if spec.seeds.is_empty() {
        vec![ctx.seed]
    } else {
        spec.seeds.clone()
    };
    let mut worst = 0;
    for seed in seeds {
        let dir = if spec.seeds.is_empty() {
            out.clone()
        } else {
            out.join(format!("seed-{seed}"))
        };
        let mut argv = vec!["ssmlab".to_string(), spec.command.clone()];
        argv.extend(spec.args.iter().cloned());
        argv.extend([
            "--out".to_string(),
            dir.display().to_string(),
            "--seed".to_string(),
            seed.to_string(),
        ]);
        if ctx.quiet {
            argv.push("--quiet".into());
        }
        if spec.deterministic || ctx.deterministic {
            argv.push("--deterministic".into());
        }
        let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Invalid(e.to_string()))?;
        worst = worst.max(run(cli)?);
    }
    Ok(worst)
}

/// Whether a run finished by early stopping rather than by exhausting budget.
pub fn converged(rec: &RunRecord) -> bool {
    matches!(
        rec.stopped_by,
        StopReason::ValLoss | StopReason::ValAccuracy
    )
}
