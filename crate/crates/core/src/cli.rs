//! `mechgeo` command line.
//!
//! Every subcommand takes its parameters from flags and, optionally, from a
//! JSON config file (`--config`) whose keys are the flag names without the
//! leading dashes. Flags win over the file. The output directory comes from
//! `--out-dir`, then the config file's `out-dir`, then `MECHGEO_OUT_DIR`,
//! then `./mechgeo-out`. Each run writes `<command>.config.json` there with
//! every parameter resolved; passing it back through `--config` reproduces
//! the run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{build_manifest, CorpusManifest, LengthClass, OrderClass, WordTokenizer};
use crate::error::{Error, Result};
use crate::geometry::{
    baseline_difference, layer_correlation_curve, pr_curve, restrict_distribution, DistanceMetric,
};
use crate::interventions::spec::{
    execute_spec, months_inputs_from_trace, read_results, read_spec, records_from_results,
    write_results, write_spec, InterventionSpec,
};
use crate::interventions::{
    curve_from_records, detect_phase_change, plan_sweep, EffectCurve, InterventionMode, NormTarget,
    SweepOptions, TargetKind,
};
use crate::model::{load_weights, random_init, read_config, ModelConfig, ModelWeights};
use crate::months::{generate_prompts, run_intervention_experiment, BaselinePass, SyntheticVocab, MONTHS};
use crate::report::{group_series, line_chart_svg, read_csv, write_csv, ReportRow};
use crate::trace::{read_trace, write_trace, Predictions, SequenceInput, TokenSelector};
use crate::train::{train_toy_model, TrainConfig};

pub const OUT_DIR_ENV: &str = "MECHGEO_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "mechgeo-out";

#[derive(Debug, Parser)]
#[command(name = "mechgeo", version, about = "Layer-wise interventions and representation geometry for small transformers")]
pub struct Cli {
    /// JSON config file; keys mirror flag names
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory [env: MECHGEO_OUT_DIR] [default: mechgeo-out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy Months model
    TrainToy(TrainToyArgs),
    /// Baseline accuracy of a model on the 144 Months prompts
    RunMonths(RunMonthsArgs),
    /// Layer sweep of one intervention geometry on one target kind
    Sweep(SweepArgs),
    /// Build a paired ordered/shuffled corpus manifest from text files
    Corpus(CorpusArgs),
    /// Capture an activation trace for one manifest condition
    Capture(CaptureArgs),
    /// Participation ratio per layer
    AnalyzePr(AnalyzePrArgs),
    /// Spearman correlation of distances and prediction divergence per layer
    AnalyzeCorrelation(AnalyzeCorrelationArgs),
    /// Locate the phase change between two sweep curves
    Phase(PhaseArgs),
    /// Merge result CSVs and draw one chart per model and condition
    Report(ReportArgs),
    /// Write an intervention spec for an external runner from a Months trace
    BridgeSpec(BridgeSpecArgs),
    /// Run an intervention spec on a local model and write a results file
    ExecuteSpec(ExecuteSpecArgs),
    /// Turn an external runner's results file into an effect curve
    BridgeResults(BridgeResultsArgs),
}

macro_rules! opt_struct {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case", deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$fmeta])*
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl $name {
            fn fill_defaults(&mut self) {
                $(
                    if self.$field.is_none() {
                        self.$field = $default;
                    }
                )*
            }
        }
    };
}

opt_struct!(TrainToyArgs {
    #[arg(long)] n_layers: usize = Some(4),
    #[arg(long)] d_model: usize = Some(64),
    #[arg(long)] n_heads: usize = Some(4),
    #[arg(long)] d_ff: usize = Some(128),
    #[arg(long)] max_seq_len: usize = Some(64),
    #[arg(long)] rope_theta: f32 = Some(10_000.0),
    #[arg(long)] rms_eps: f32 = Some(1e-5),
    #[arg(long)] learning_rate: f32 = Some(TrainConfig::default().learning_rate),
    #[arg(long)] steps: usize = Some(TrainConfig::default().steps),
    #[arg(long)] batch_size: usize = Some(TrainConfig::default().batch_size),
    #[arg(long)] seed: u64 = Some(0),
    #[arg(long)] eval_fraction: f64 = Some(TrainConfig::default().eval_fraction),
    #[arg(long)] augment_copies: usize = Some(0),
    /// Steps between early-stopping checks (0 = never stop early)
    #[arg(long)] check_every: usize = Some(TrainConfig::default().check_every),
    /// Name recorded in result rows
    #[arg(long)] model: String = Some("toy".into()),
});

opt_struct!(RunMonthsArgs {
    /// Weights file (safetensors with config metadata)
    #[arg(long)] weights: PathBuf = None,
    #[arg(long)] model: String = None,
});

opt_struct!(SweepArgs {
    #[arg(long)] weights: PathBuf = None,
    #[arg(long)] model: String = None,
    /// additive | angular | norm
    #[arg(long)] mode: String = Some("additive".into()),
    /// month | interval | output
    #[arg(long)] target: String = Some("output".into()),
    /// member-mean | centroid (norm mode only)
    #[arg(long)] norm_target: String = None,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] leave_one_out: bool = Some(false),
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] correct_only: bool = Some(false),
});

opt_struct!(CorpusArgs {
    /// Plain-text inputs, documents separated by blank lines
    #[arg(long, value_delimiter = ',')] input: Vec<PathBuf> = None,
    /// short | long
    #[arg(long)] length: String = Some("short".into()),
    #[arg(long)] count: usize = Some(crate::corpus::DEFAULT_COUNT),
    #[arg(long)] seed: u64 = Some(0),
    /// Hash words into this many ids (match the model's vocab_size)
    #[arg(long)] vocab_size: usize = Some(SyntheticVocab::months().len()),
});

opt_struct!(CaptureArgs {
    #[arg(long)] weights: PathBuf = None,
    /// Capture from a random init with this seed and the weights' config
    #[arg(long)] untrained_seed: u64 = None,
    #[arg(long)] model: String = None,
    #[arg(long)] manifest: PathBuf = None,
    /// Capture the 144 Months prompts instead of a manifest condition
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] months: bool = Some(false),
    /// ordered | shuffled
    #[arg(long)] condition: String = Some("ordered".into()),
    /// `all` or a comma-separated list
    #[arg(long)] layers: String = Some("all".into()),
    #[arg(long, value_delimiter = ',')] selectors: Vec<String> = Some(vec!["last".into(), "fourth_from_end".into()]),
});

opt_struct!(AnalyzePrArgs {
    #[arg(long)] trace: PathBuf = None,
    /// Shuffled-condition trace for the ordered-minus-shuffled baseline
    #[arg(long)] shuffled_trace: PathBuf = None,
    #[arg(long)] model: String = None,
    #[arg(long)] condition: String = Some("ordered".into()),
    #[arg(long, value_delimiter = ',')] selectors: Vec<String> = None,
});

opt_struct!(AnalyzeCorrelationArgs {
    #[arg(long)] trace: PathBuf = None,
    #[arg(long)] predictions: PathBuf = None,
    #[arg(long)] model: String = None,
    #[arg(long)] condition: String = Some("ordered".into()),
    #[arg(long, value_delimiter = ',')] selectors: Vec<String> = None,
    /// euclidean,angular
    #[arg(long, value_delimiter = ',')] metrics: Vec<String> = Some(vec!["euclidean".into(), "angular".into()]),
    /// Restrict predictions to these token ids before comparing
    #[arg(long, value_delimiter = ',')] restrict_ids: Vec<u32> = None,
});

opt_struct!(PhaseArgs {
    /// Input-centric sweep CSV
    #[arg(long)] input: PathBuf = None,
    /// Output-centric sweep CSV
    #[arg(long)] output: PathBuf = None,
});

opt_struct!(ReportArgs {
    #[arg(long, value_delimiter = ',')] csv: Vec<PathBuf> = None,
});

opt_struct!(BridgeSpecArgs {
    /// Trace of the 144 Months prompts in canonical order
    #[arg(long)] trace: PathBuf = None,
    #[arg(long)] predictions: PathBuf = None,
    #[arg(long)] model: String = None,
    #[arg(long)] mode: String = Some("additive".into()),
    #[arg(long)] target: String = Some("output".into()),
    #[arg(long)] norm_target: String = None,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] leave_one_out: bool = Some(false),
    /// Trace selector of the intervention token (defaults: last for output)
    #[arg(long)] position: String = None,
    /// The 12 month token ids, January first
    #[arg(long, value_delimiter = ',')] readout_ids: Vec<u32> = None,
});

opt_struct!(ExecuteSpecArgs {
    #[arg(long)] weights: PathBuf = None,
    #[arg(long)] spec: PathBuf = None,
});

opt_struct!(BridgeResultsArgs {
    #[arg(long)] spec: PathBuf = None,
    #[arg(long)] results: PathBuf = None,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] correct_only: bool = Some(false),
});

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainToy(_) => "train-toy",
            Command::RunMonths(_) => "run-months",
            Command::Sweep(_) => "sweep",
            Command::Corpus(_) => "corpus",
            Command::Capture(_) => "capture",
            Command::AnalyzePr(_) => "analyze-pr",
            Command::AnalyzeCorrelation(_) => "analyze-correlation",
            Command::Phase(_) => "phase",
            Command::Report(_) => "report",
            Command::BridgeSpec(_) => "bridge-spec",
            Command::ExecuteSpec(_) => "execute-spec",
            Command::BridgeResults(_) => "bridge-results",
        }
    }
}

/// Parse `argv` (program name first), run, and return the exit code.
/// Errors are printed as one line on stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Ctx {
    command: &'static str,
    out_dir: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn snapshot<T: Serialize>(&self, args: &T) -> Result<()> {
        let mut v = serde_json::to_value(args)?;
        if let Value::Object(m) = &mut v {
            m.insert("command".into(), Value::String(self.command.into()));
            m.insert("out-dir".into(), Value::String(self.out_dir.display().to_string()));
        }
        let path = self.path(&format!("{}.config.json", self.command));
        let mut bytes = serde_json::to_vec_pretty(&sorted(v))?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

fn sorted(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let b: BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(b.into_iter().collect::<Map<_, _>>())
        }
        other => other,
    }
}

/// Overlay flags on config-file values; the file's `command` and `out-dir`
/// keys are handled by the caller.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, file: &Map<String, Value>, command: &str) -> Result<T> {
    let mut base = file.clone();
    base.remove("out-dir");
    if let Some(c) = base.remove("command") {
        if c.as_str() != Some(command) {
            return Err(Error::Invalid(format!(
                "config file was written for `{}`, not `{command}`",
                c.as_str().unwrap_or("?")
            )));
        }
    }
    if let Value::Object(over) = serde_json::to_value(flags)? {
        base.extend(over);
    }
    serde_json::from_value(Value::Object(base))
        .map_err(|e| Error::Invalid(format!("config for `{command}`: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    let file: Map<String, Value> = match &cli.config {
        Some(path) => {
            let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            match serde_json::from_slice(&raw) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Error::Invalid(format!("{}: config must be a JSON object", path.display()))),
                Err(e) => return Err(Error::Invalid(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| file.get("out-dir").and_then(Value::as_str).map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ctx = Ctx { command: cli.command.name(), out_dir };

    macro_rules! dispatch {
        ($args:expr, $f:ident) => {{
            let mut a = merge($args, &file, ctx.command)?;
            a.fill_defaults();
            ctx.snapshot(&a)?;
            $f(&ctx, &a)
        }};
    }
    match &cli.command {
        Command::TrainToy(a) => dispatch!(a, train_toy),
        Command::RunMonths(a) => dispatch!(a, run_months),
        Command::Sweep(a) => dispatch!(a, sweep),
        Command::Corpus(a) => dispatch!(a, corpus),
        Command::Capture(a) => dispatch!(a, capture),
        Command::AnalyzePr(a) => dispatch!(a, analyze_pr),
        Command::AnalyzeCorrelation(a) => dispatch!(a, analyze_correlation),
        Command::Phase(a) => dispatch!(a, phase),
        Command::Report(a) => dispatch!(a, report),
        Command::BridgeSpec(a) => dispatch!(a, bridge_spec),
        Command::ExecuteSpec(a) => dispatch!(a, execute_spec_cmd),
        Command::BridgeResults(a) => dispatch!(a, bridge_results),
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Invalid(format!("missing --{flag} (pass the flag or set `{flag}` in the config file)")))
}

fn load_model(path: &Path) -> Result<ModelWeights> {
    let cfg = read_config(path)?;
    load_weights(path, &cfg)
}

fn model_name(explicit: &Option<String>, fallback: &Path) -> String {
    explicit.clone().unwrap_or_else(|| {
        fallback
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    })
}

fn parse_selectors(raw: &[String]) -> Result<Vec<TokenSelector>> {
    raw.iter().map(|s| s.parse()).collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn train_toy(ctx: &Ctx, a: &TrainToyArgs) -> Result<()> {
    let vocab = SyntheticVocab::months();
    let cfg = ModelConfig {
        n_layers: a.n_layers.unwrap(),
        d_model: a.d_model.unwrap(),
        n_heads: a.n_heads.unwrap(),
        d_ff: a.d_ff.unwrap(),
        vocab_size: vocab.len(),
        rope_theta: a.rope_theta.unwrap(),
        rms_eps: a.rms_eps.unwrap(),
        max_seq_len: a.max_seq_len.unwrap(),
    };
    let tc = TrainConfig {
        learning_rate: a.learning_rate.unwrap(),
        steps: a.steps.unwrap(),
        batch_size: a.batch_size.unwrap(),
        seed: a.seed.unwrap(),
        eval_fraction: a.eval_fraction.unwrap(),
        augment_copies: a.augment_copies.unwrap(),
        check_every: a.check_every.unwrap(),
    };
    let out = train_toy_model(&cfg, &tc)?;
    let name = a.model.clone().unwrap();
    let weights_path = ctx.path(&format!("{name}.safetensors"));
    out.weights.save(&weights_path)?;

    let loss_path = ctx.path("train_loss.csv");
    let mut w = csv::Writer::from_path(&loss_path).map_err(|e| Error::Invalid(format!("{}: {e}", loss_path.display())))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in out.loss_history.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&loss_path, e))?;

    write_json(
        &ctx.path("train_summary.json"),
        &serde_json::json!({
            "model": name,
            "steps_run": out.loss_history.len(),
            "final_loss": out.loss_history.last(),
            "canonical_accuracy": out.canonical_accuracy,
            "weights": weights_path.display().to_string(),
        }),
    )?;
    println!(
        "trained {name}: {} steps, accuracy {:.4} on the 144 prompts -> {}",
        out.loss_history.len(),
        out.canonical_accuracy,
        weights_path.display()
    );
    Ok(())
}

fn run_months(ctx: &Ctx, a: &RunMonthsArgs) -> Result<()> {
    let path = required(&a.weights, "weights")?;
    let weights = load_model(path)?;
    let vocab = SyntheticVocab::months();
    let prompts = generate_prompts(&vocab)?;
    let readout = vocab.readout()?;
    let base = BaselinePass::compute(&weights, &prompts, &readout)?;
    let name = model_name(&a.model, path);

    let out = ctx.path("months_baseline.csv");
    let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Invalid(format!("{}: {e}", out.display())))?;
    w.write_record(["model", "alpha", "beta", "gamma", "prediction", "correct"])?;
    for (p, &pred) in prompts.iter().zip(&base.predictions) {
        w.write_record([
            name.clone(),
            MONTHS[p.alpha].to_string(),
            p.beta.to_string(),
            MONTHS[p.gamma].to_string(),
            MONTHS[pred].to_string(),
            (pred == p.gamma).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    let acc = base.accuracy(&prompts);
    write_csv(
        &ctx.path("months_accuracy.csv"),
        &[ReportRow {
            model: name.clone(),
            condition: "baseline".into(),
            token_set: "months".into(),
            layer: weights.config.n_layers,
            metric: "accuracy".into(),
            value: Some(acc),
        }],
    )?;
    println!("{name}: accuracy {acc:.4} on the 144 Months prompts");
    Ok(())
}

fn sweep_options(mode: InterventionMode, norm_target: &Option<String>, leave_one_out: bool, correct_only: bool) -> Result<SweepOptions> {
    let norm_target = match norm_target.as_deref() {
        None => NormTarget::MemberMean,
        Some(_) if mode != InterventionMode::NormRescale => {
            return Err(Error::Invalid("--norm-target only applies with --mode norm".into()))
        }
        Some(s) => s.parse()?,
    };
    Ok(SweepOptions { norm_target, leave_one_out, correct_only })
}

fn condition_tag(mode: InterventionMode, opts: &SweepOptions) -> String {
    let mut c = mode.as_str().to_string();
    if mode == InterventionMode::NormRescale && opts.norm_target == NormTarget::CentroidNorm {
        c.push_str("_centroid");
    }
    if opts.leave_one_out {
        c.push_str("_loo");
    }
    if opts.correct_only {
        c.push_str("_correct");
    }
    c
}

fn curve_rows(model: &str, condition: &str, curve: &EffectCurve) -> Vec<ReportRow> {
    curve
        .layers
        .iter()
        .zip(&curve.values)
        .map(|(&layer, &v)| ReportRow {
            model: model.into(),
            condition: condition.into(),
            token_set: curve.kind.as_str().into(),
            layer,
            metric: "effect".into(),
            value: Some(v),
        })
        .collect()
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let path = required(&a.weights, "weights")?;
    let mode: InterventionMode = a.mode.as_deref().unwrap().parse()?;
    let kind: TargetKind = a.target.as_deref().unwrap().parse()?;
    let opts = sweep_options(mode, &a.norm_target, a.leave_one_out.unwrap(), a.correct_only.unwrap())?;
    let weights = load_model(path)?;
    let name = model_name(&a.model, path);
    let vocab = SyntheticVocab::months();
    let r = run_intervention_experiment(&weights, &vocab, kind, mode, opts)?;
    let cond = condition_tag(mode, &opts);
    let stem = format!("sweep_{}_{}", kind.as_str(), cond);
    write_csv(&ctx.path(&format!("{stem}.csv")), &curve_rows(&name, &cond, &r.curve))?;

    let rec_path = ctx.path(&format!("{stem}_records.csv"));
    let mut w = csv::Writer::from_path(&rec_path).map_err(|e| Error::Invalid(format!("{}: {e}", rec_path.display())))?;
    for rec in &r.records {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io(&rec_path, e))?;
    println!(
        "{name} {} {}: baseline accuracy {:.4}, effects {:?}",
        kind.as_str(),
        cond,
        r.baseline_accuracy,
        r.curve.values
    );
    Ok(())
}

fn corpus(ctx: &Ctx, a: &CorpusArgs) -> Result<()> {
    let inputs = required(&a.input, "input")?;
    if inputs.is_empty() {
        return Err(Error::Invalid("--input needs at least one text file".into()));
    }
    let mut text = String::new();
    for p in inputs {
        text.push_str(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?);
        // files never run into each other
        text.push_str("\n\n");
    }
    let length: LengthClass = a.length.as_deref().unwrap().parse()?;
    let tok = WordTokenizer::hashed(a.vocab_size.unwrap())?;
    let m = build_manifest(&text, &tok, length, a.count.unwrap(), a.seed.unwrap())?;
    m.write(&ctx.path("manifest.json"))?;
    if m.shortfall > 0 {
        eprintln!("warning: corpus supplied {} of {} requested sequences", a.count.unwrap() - m.shortfall, a.count.unwrap());
    }
    println!(
        "{} ordered/shuffled pairs ({} dropped after {} shuffle attempts) -> {}",
        m.ordered.len(),
        m.dropped_pairs,
        crate::corpus::MAX_SHUFFLE_ATTEMPTS,
        ctx.path("manifest.json").display()
    );
    Ok(())
}

fn capture(ctx: &Ctx, a: &CaptureArgs) -> Result<()> {
    let wpath = required(&a.weights, "weights")?;
    let (seqs, tag) = if a.months.unwrap() {
        if a.manifest.is_some() {
            return Err(Error::Invalid("--months and --manifest are mutually exclusive".into()));
        }
        let prompts = generate_prompts(&SyntheticVocab::months())?;
        let seqs = prompts
            .iter()
            .map(|p| SequenceInput { id: format!("{}+{}", MONTHS[p.alpha], p.beta), tokens: p.tokens.clone() })
            .collect();
        (seqs, "months".to_string())
    } else {
        let manifest = CorpusManifest::read(required(&a.manifest, "manifest")?)?;
        let condition: OrderClass = a.condition.as_deref().unwrap().parse()?;
        (manifest.sequence_inputs(condition), condition.to_string())
    };
    let mut weights = load_model(wpath)?;
    let mut name = model_name(&a.model, wpath);
    if let Some(seed) = a.untrained_seed {
        weights = random_init(&weights.config, seed)?;
        if a.model.is_none() {
            name = format!("{name}-untrained");
        }
    }
    let n = weights.config.n_layers;
    let layers: BTreeSet<usize> = match a.layers.as_deref().unwrap() {
        "all" => (0..=n).collect(),
        list => list
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad layer `{s}` in --layers"))))
            .collect::<Result<_>>()?,
    };
    let selectors = parse_selectors(a.selectors.as_ref().unwrap())?;
    let (trace, preds) = crate::trace::capture_trace(&weights, &name, &seqs, &layers, &selectors)?;
    write_trace(&trace, &ctx.path(&format!("trace_{tag}.mgtr")))?;
    preds.write(&ctx.path(&format!("predictions_{tag}.safetensors")))?;
    println!("captured {} sequences × {} layers for {name} ({tag})", seqs.len(), layers.len());
    Ok(())
}

fn pr_curves(
    trace: &crate::trace::ActivationTrace,
    selectors: &[TokenSelector],
) -> Result<BTreeMap<(TokenSelector, String), Vec<Option<f64>>>> {
    let mut out = BTreeMap::new();
    for &sel in selectors {
        for normalize in [false, true] {
            for center in [true, false] {
                let metric = format!(
                    "pr_{}_{}",
                    if normalize { "normalized" } else { "raw" },
                    if center { "centered" } else { "uncentered" }
                );
                let curve = pr_curve(trace, sel, normalize, center)?;
                out.insert((sel, metric), curve.iter().map(|s| s.as_ref().map(|s| s.participation_ratio)).collect());
            }
        }
    }
    Ok(out)
}

fn analyze_pr(ctx: &Ctx, a: &AnalyzePrArgs) -> Result<()> {
    let tpath = required(&a.trace, "trace")?;
    let trace = read_trace(tpath)?;
    let name = a.model.clone().unwrap_or_else(|| trace.header.model_name.clone());
    let selectors = match &a.selectors {
        Some(s) => parse_selectors(s)?,
        None => trace.header.selectors.clone(),
    };
    let condition = a.condition.clone().unwrap();
    let layers = trace.layers().to_vec();
    let ordered = pr_curves(&trace, &selectors)?;
    let mut rows = Vec::new();
    let mut push = |cond: &str, curves: &BTreeMap<(TokenSelector, String), Vec<Option<f64>>>| {
        for ((sel, metric), vals) in curves {
            for (&layer, &v) in layers.iter().zip(vals) {
                rows.push(ReportRow {
                    model: name.clone(),
                    condition: cond.into(),
                    token_set: sel.to_string(),
                    layer,
                    metric: metric.clone(),
                    value: v,
                });
            }
        }
    };
    push(&condition, &ordered);
    if let Some(sp) = &a.shuffled_trace {
        let shuffled_trace = read_trace(sp)?;
        if shuffled_trace.layers() != layers.as_slice() {
            return Err(Error::Invalid("ordered and shuffled traces capture different layers".into()));
        }
        let shuffled = pr_curves(&shuffled_trace, &selectors)?;
        push("shuffled", &shuffled);
        let diff = ordered
            .iter()
            .map(|(k, v)| {
                // undefined on either side stays undefined
                let o: Vec<f64> = v.iter().map(|x| x.unwrap_or(f64::NAN)).collect();
                let s: Vec<f64> = shuffled[k].iter().map(|x| x.unwrap_or(f64::NAN)).collect();
                let d = baseline_difference(&o, &s)?;
                Ok((k.clone(), d.into_iter().map(|x| (!x.is_nan()).then_some(x)).collect()))
            })
            .collect::<Result<BTreeMap<_, Vec<Option<f64>>>>>()?;
        push(&format!("{condition}_minus_shuffled"), &diff);
    }
    write_csv(&ctx.path("pr.csv"), &rows)?;
    println!("participation ratios for {} layers -> {}", layers.len(), ctx.path("pr.csv").display());
    Ok(())
}

fn analyze_correlation(ctx: &Ctx, a: &AnalyzeCorrelationArgs) -> Result<()> {
    let trace = read_trace(required(&a.trace, "trace")?)?;
    let preds = Predictions::read(required(&a.predictions, "predictions")?)?;
    if preds.n_sequences != trace.n_sequences() {
        return Err(Error::Invalid(format!(
            "predictions cover {} sequences but the trace has {}",
            preds.n_sequences,
            trace.n_sequences()
        )));
    }
    let name = a.model.clone().unwrap_or_else(|| trace.header.model_name.clone());
    let selectors = match &a.selectors {
        Some(s) => parse_selectors(s)?,
        None => trace.header.selectors.clone(),
    };
    let metrics: Vec<DistanceMetric> = a.metrics.as_ref().unwrap().iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let condition = a.condition.clone().unwrap();
    let mut rows = Vec::new();
    for &sel in &selectors {
        let mut dists = preds.rows(sel)?;
        if let Some(ids) = &a.restrict_ids {
            dists = dists.iter().map(|p| restrict_distribution(p, ids)).collect::<Result<_>>()?;
        }
        for &metric in &metrics {
            let curve = layer_correlation_curve(&trace, sel, &dists, metric)?;
            for (&layer, &v) in curve.layers.iter().zip(&curve.values) {
                rows.push(ReportRow {
                    model: name.clone(),
                    condition: condition.clone(),
                    token_set: sel.to_string(),
                    layer,
                    metric: format!("spearman_{metric}"),
                    value: v,
                });
            }
        }
    }
    write_csv(&ctx.path("correlation.csv"), &rows)?;
    println!("correlation curves -> {}", ctx.path("correlation.csv").display());
    Ok(())
}

/// Single effect curve from a sweep CSV.
fn read_curve(path: &Path) -> Result<(String, String, Vec<usize>, Vec<f64>)> {
    let rows: Vec<ReportRow> = read_csv(path)?.into_iter().filter(|r| r.metric == "effect").collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::Invalid(format!("{}: no effect rows", path.display())))?;
    if rows.iter().any(|r| r.model != first.model || r.token_set != first.token_set || r.condition != first.condition) {
        return Err(Error::Invalid(format!("{}: holds more than one effect curve", path.display())));
    }
    let mut pts: Vec<(usize, f64)> = rows.iter().map(|r| (r.layer, r.value.unwrap_or(f64::NAN))).collect();
    pts.sort_by_key(|p| p.0);
    Ok((first.model.clone(), first.condition.clone(), pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()))
}

fn phase(ctx: &Ctx, a: &PhaseArgs) -> Result<()> {
    let (model, cond, in_layers, input) = read_curve(required(&a.input, "input")?)?;
    let (out_model, _, out_layers, output) = read_curve(required(&a.output, "output")?)?;
    if model != out_model {
        return Err(Error::Invalid(format!("input curve is for `{model}`, output curve for `{out_model}`")));
    }
    if in_layers != out_layers {
        return Err(Error::Invalid("input and output curves cover different layers".into()));
    }
    let idx = detect_phase_change(&input, &output)?;
    let layer = idx.map(|i| in_layers[i]);
    write_csv(
        &ctx.path("phase.csv"),
        &[ReportRow {
            model: model.clone(),
            condition: cond,
            token_set: "phase".into(),
            layer: 0,
            metric: "phase_change_layer".into(),
            value: layer.map(|l| l as f64),
        }],
    )?;
    match layer {
        Some(l) => println!("{model}: output-centric effects dominate from layer {l}"),
        None => println!("{model}: no phase change (output never stays above input)"),
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let inputs = required(&a.csv, "csv")?;
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_csv(p)?);
    }
    write_csv(&ctx.path("report.csv"), &rows)?;
    let effects: Vec<ReportRow> = rows.iter().filter(|r| r.metric != "phase_change_layer").cloned().collect();
    for ((model, condition), series) in group_series(&effects) {
        let find = |ts: &str| series.iter().find(|s| s.name == format!("{ts} effect"));
        let marker = match (find(TargetKind::InputMonth.as_str()), find(TargetKind::OutputPrediction.as_str())) {
            (Some(i), Some(o)) if i.points.iter().map(|p| p.0).eq(o.points.iter().map(|p| p.0)) => {
                let iv: Vec<f64> = i.points.iter().map(|p| p.1).collect();
                let ov: Vec<f64> = o.points.iter().map(|p| p.1).collect();
                detect_phase_change(&iv, &ov)?.map(|k| i.points[k].0)
            }
            _ => None,
        };
        let y_label = if series.iter().all(|s| s.name.ends_with(" effect")) { "mean preference shift" } else { "value" };
        let svg = line_chart_svg(&format!("{model} ({condition})"), "layer", y_label, &series, marker);
        let path = ctx.path(&format!("{}_{}.svg", sanitize(&model), sanitize(&condition)));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    println!("merged {} rows -> {}", rows.len(), ctx.path("report.csv").display());
    Ok(())
}

fn bridge_spec(ctx: &Ctx, a: &BridgeSpecArgs) -> Result<()> {
    let trace = read_trace(required(&a.trace, "trace")?)?;
    let preds = Predictions::read(required(&a.predictions, "predictions")?)?;
    let mode: InterventionMode = a.mode.as_deref().unwrap().parse()?;
    let kind: TargetKind = a.target.as_deref().unwrap().parse()?;
    let opts = sweep_options(mode, &a.norm_target, a.leave_one_out.unwrap(), false)?;
    let position: TokenSelector = match (&a.position, kind) {
        (Some(p), _) => p.parse()?,
        (None, TargetKind::OutputPrediction) => TokenSelector::Last,
        (None, _) => return Err(Error::Invalid("input-centric specs need --position (the trace selector of the input token)".into())),
    };
    let vocab = SyntheticVocab::months();
    let readout_ids = match &a.readout_ids {
        Some(ids) => ids.clone(),
        None => vocab.readout()?.ids().to_vec(),
    };
    let (prompts, states) = months_inputs_from_trace(&trace, &preds, position, &readout_ids)?;
    let plan = plan_sweep(&prompts, &states, kind, mode, opts)?;
    let texts = generate_prompts(&vocab)?.iter().map(|p| p.text()).collect();
    let name = a.model.clone().unwrap_or_else(|| trace.header.model_name.clone());
    let stem = format!("spec_{}_{}", kind.as_str(), condition_tag(mode, &opts));
    let tensor_file = format!("{stem}.safetensors");
    let (spec, tensors) = InterventionSpec::from_plan(&name, kind, mode, readout_ids, texts, &plan, &tensor_file)?;
    write_spec(&ctx.path(&format!("{stem}.json")), &spec, &tensors)?;
    println!("{} interventions, {} tensors -> {}", spec.entries.len(), tensors.len(), ctx.path(&format!("{stem}.json")).display());
    Ok(())
}

fn execute_spec_cmd(ctx: &Ctx, a: &ExecuteSpecArgs) -> Result<()> {
    let weights = load_model(required(&a.weights, "weights")?)?;
    let spec_path = required(&a.spec, "spec")?;
    let (spec, tensors) = read_spec(spec_path)?;
    let vocab = SyntheticVocab::months();
    let tokens = spec
        .prompts
        .iter()
        .map(|t| vocab.encode(&t.split_whitespace().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let results = execute_spec(&weights, &spec, &tensors, &tokens)?;
    let stem = spec_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let out = ctx.path(&format!("{}_results.json", stem.trim_start_matches("spec_")));
    write_results(&out, &results)?;
    println!("{} results -> {}", results.results.len(), out.display());
    Ok(())
}

fn bridge_results(ctx: &Ctx, a: &BridgeResultsArgs) -> Result<()> {
    let (spec, _) = read_spec(required(&a.spec, "spec")?)?;
    let results = read_results(required(&a.results, "results")?)?;
    let gamma: Vec<usize> = generate_prompts(&SyntheticVocab::months())?.iter().map(|p| p.gamma).collect();
    let truth = (spec.prompts.len() == gamma.len()).then_some(gamma.as_slice());
    let records = records_from_results(&spec, &results, truth)?;
    let layers: BTreeSet<usize> = spec.entries.iter().map(|e| e.layer).collect();
    let layers: Vec<usize> = layers.into_iter().collect();
    let correct_only = a.correct_only.unwrap();
    let curve = curve_from_records(&records, &layers, spec.kind, spec.mode, correct_only);
    let mut cond = spec.mode.as_str().to_string();
    if correct_only {
        cond.push_str("_correct");
    }
    let path = ctx.path(&format!("bridge_{}_{}.csv", spec.kind.as_str(), cond));
    write_csv(&path, &curve_rows(&spec.model, &cond, &curve))?;
    println!("{} records -> {}", records.len(), path.display());
    Ok(())
}
