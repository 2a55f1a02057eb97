//! The `xmodal` command-line tool.
//!
//! Every command resolves its configuration from an optional JSON file
//! (`--config`) overlaid with command-line flags, writes its outputs to
//! `--out`, and records the resolved configuration and input hashes in
//! `<out>/run.json`. Exit codes: 0 success, 2 configuration or input
//! error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::codecsim::{self, ChainSpec};
use crate::data::{self, parse_manifest, ImageBuffer, Label, Manifest, Modality};
use crate::forensics::{self, DatasetOptions, DctHistConfig, SampleFailure, Window};
use crate::linalg::Matrix;
use crate::metrics::{self, Aggregation, FrameScore};
use crate::par;
use crate::pixelops;
use crate::trainer::{self, Checkpoint, FeatureSet, SyntheticSpec, TrainConfig, TrainError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or unusable input (exit 2).
    Input(String),
    /// Non-finite values during training (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn input(msg: impl std::fmt::Display) -> CliError {
    CliError::Input(msg.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "xmodal", version = VERSION, about = "Cross-modal AIGC detection toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct GlobalArgs {
    /// JSON-Lines sample manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use only the first N manifest records.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    /// Worker threads (parallel builds only).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distribution-shift analyses over a manifest.
    Analyze(AnalyzeArgs),
    /// Apply a degradation chain to every sample.
    Degrade(DegradeArgs),
    /// Train the toy model on feature files or synthetic data.
    Train,
    /// Score samples with a checkpoint and write a metric report.
    Evaluate(EvaluateArgs),
    /// Print the tool version.
    Version,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Dct,
    Rapsd,
    Luma,
    Spectrum,
}

impl AnalysisKind {
    fn name(self) -> &'static str {
        match self {
            AnalysisKind::Dct => "dct",
            AnalysisKind::Rapsd => "rapsd",
            AnalysisKind::Luma => "luma",
            AnalysisKind::Spectrum => "spectrum",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    pub kind: AnalysisKind,
    /// Chain spec applied to each image before analysis.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Radial bins (rapsd).
    #[arg(long)]
    pub nbins: Option<usize>,
    /// Window applied before the FFT (rapsd).
    #[arg(long)]
    pub window: Option<WindowArg>,
    /// Blur sigma of the residual filter (spectrum).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Spectrum side length (spectrum).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WindowArg {
    None,
    Hann,
}

#[derive(Debug, Clone, Args)]
pub struct DegradeArgs {
    /// Chain spec JSON.
    #[arg(long)]
    pub chain: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feature JSON-Lines file (instead of a manifest).
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub aggregation: Option<AggregationArg>,
    /// Frames averaged per video.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    SubsetMean,
    Overall,
}

/// Resolved `analyze` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub manifest: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    pub seed: u64,
    pub limit: Option<usize>,
    pub nbins: usize,
    pub window: Window,
    pub sigma: f64,
    pub size: usize,
    pub dct: DctHistConfig,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            chain: None,
            seed: 0,
            limit: None,
            nbins: 32,
            window: Window::Hann,
            sigma: 1.0,
            size: 64,
            dct: DctHistConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub manifest: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    pub seed: u64,
    pub limit: Option<usize>,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    Features {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainJobConfig {
    pub data: DataSource,
    /// Keep only these modalities in the training and validation splits.
    pub train_modalities: Option<Vec<Modality>>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub checkpoint: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub limit: Option<usize>,
    pub aggregation: Aggregation,
    pub frames: usize,
    pub threshold: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            features: None,
            manifest: None,
            limit: None,
            aggregation: Aggregation::SubsetMean,
            frames: 1,
            threshold: metrics::DEFAULT_THRESHOLD,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.global.threads {
        if t == 0 {
            return Err(input("--threads must be positive"));
        }
        if !par::set_threads(t) {
            warn!("thread pool already initialized; --threads ignored");
        }
    }
    match &cli.command {
        Command::Version => {
            println!("xmodal {VERSION}");
            Ok(())
        }
        Command::Analyze(a) => cmd_analyze(&cli.global, a),
        Command::Degrade(d) => cmd_degrade(&cli.global, d),
        Command::Train => cmd_train(&cli.global),
        Command::Evaluate(e) => cmd_evaluate(&cli.global, e),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| input(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| input(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn out_dir(g: &GlobalArgs) -> CliResult<PathBuf> {
    let out = g.out.clone().ok_or_else(|| input("--out is required"))?;
    fs::create_dir_all(&out).map_err(|e| input(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

/// Records the resolved configuration and input hashes.
struct RunRecord {
    command: String,
    inputs: BTreeMap<String, String>,
}

impl RunRecord {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            inputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) {
        if let Some(h) = sha256_file(path) {
            self.inputs.insert(path.display().to_string(), h);
        }
    }

    fn write(&self, out: &Path, config: &impl Serialize, extra: Value) -> CliResult<()> {
        let doc = json!({
            "tool": "xmodal",
            "version": VERSION,
            "command": self.command,
            "config": config,
            "inputs_sha256": self.inputs,
            "details": extra,
        });
        write_file(
            &out.join("run.json"),
            serde_json::to_string_pretty(&doc).expect("json") + "\n",
        )
    }
}

/// Hash over the sample files of a manifest, in manifest order.
fn samples_digest(manifest: &Manifest) -> String {
    let hashes = par::map(&manifest.records, |r| {
        sha256_file(&manifest.resolve(r)).unwrap_or_default()
    });
    let mut h = Sha256::new();
    for (r, d) in manifest.records.iter().zip(hashes) {
        h.update(r.id.as_bytes());
        h.update([0]);
        h.update(d.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn load_manifest(path: Option<&PathBuf>, limit: Option<usize>) -> CliResult<Manifest> {
    let path = path.ok_or_else(|| input("--manifest is required"))?;
    let m = parse_manifest(path).map_err(|e| input(format!("unusable manifest {}: {e}", path.display())))?;
    Ok(match limit {
        Some(0) => return Err(input("--limit must be positive")),
        Some(n) => m.truncated(n),
        None => m,
    })
}

fn load_chain(path: &Path) -> CliResult<ChainSpec> {
    let text =
        fs::read_to_string(path).map_err(|e| input(format!("cannot read chain spec {}: {e}", path.display())))?;
    ChainSpec::from_json(&text).map_err(|e| input(format!("invalid chain spec {}: {e}", path.display())))
}

fn fmt_failures(failures: &[SampleFailure]) -> Value {
    serde_json::to_value(failures).expect("json")
}

fn cmd_analyze(g: &GlobalArgs, a: &AnalyzeArgs) -> CliResult<()> {
    let mut cfg: AnalyzeConfig = load_config(g.config.as_deref())?;
    if g.manifest.is_some() {
        cfg.manifest = g.manifest.clone();
    }
    if a.chain.is_some() {
        cfg.chain = a.chain.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.limit.is_some() {
        cfg.limit = g.limit;
    }
    if let Some(n) = a.nbins {
        cfg.nbins = n;
    }
    if let Some(w) = a.window {
        cfg.window = match w {
            WindowArg::None => Window::None,
            WindowArg::Hann => Window::Hann,
        };
    }
    if let Some(s) = a.sigma {
        cfg.sigma = s;
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    let manifest = load_manifest(cfg.manifest.as_ref(), cfg.limit)?;
    let out = out_dir(g)?;
    let mut rec = RunRecord::new(&format!("analyze {}", a.kind.name()));
    if let Some(p) = &g.config {
        rec.input(p);
    }
    rec.input(Path::new(&manifest.source_path));
    let preprocessing = match &cfg.chain {
        Some(p) => {
            rec.input(p);
            Some(load_chain(p)?)
        }
        None => None,
    };
    let opts = DatasetOptions {
        limit: None,
        preprocessing,
        seed: cfg.seed,
    };
    let kind = a.kind.name();
    let fail = |e: forensics::ForensicsError| input(format!("analysis failed: {e}"));
    let (csv, summary) = match a.kind {
        AnalysisKind::Dct => {
            let r = forensics::dataset_dct_ac_histogram(&manifest, &opts, &cfg.dct).map_err(fail)?;
            let h = &r.value.histogram;
            let mut csv = String::from("bin_lo,bin_hi,count,fraction\n");
            for (i, (c, f)) in h.counts.iter().zip(h.normalized()).enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", h.bin_edges[i], h.bin_edges[i + 1], c, f));
            }
            let summary = json!({
                "zero_fraction": r.value.zero_fraction,
                "n_coefficients": h.total,
                "n_used": r.n_used,
                "n_failed": r.failures.len(),
                "failures": fmt_failures(&r.failures),
            });
            (csv, summary)
        }
        AnalysisKind::Rapsd => {
            let r = forensics::dataset_mean_rapsd(&manifest, &opts, cfg.window, cfg.nbins).map_err(fail)?;
            let p = &r.value;
            let mut csv = String::from("radius,power,count\n");
            for i in 0..p.nbins() {
                csv.push_str(&format!("{},{},{}\n", p.radii[i], p.power[i], p.counts[i]));
            }
            let [lo, mid, hi] = p.band_thirds();
            let summary = json!({
                "band_power_low": lo,
                "band_power_mid": mid,
                "band_power_high": hi,
                "n_used": r.n_used,
                "n_failed": r.failures.len(),
                "failures": fmt_failures(&r.failures),
            });
            (csv, summary)
        }
        AnalysisKind::Luma => {
            let r = forensics::dataset_luminance_histogram(&manifest, &opts).map_err(fail)?;
            let h = &r.value;
            let verdict = forensics::detect_tv_range(h).map_err(fail)?;
            let mut csv = String::from("code,count,fraction\n");
            for (i, (c, f)) in h.counts.iter().zip(h.normalized()).enumerate() {
                csv.push_str(&format!("{i},{c},{f}\n"));
            }
            let summary = json!({
                "range": verdict.class,
                "tail_mass": verdict.tail_mass,
                "comb_score": verdict.comb_score,
                "n_pixels": h.total,
                "n_used": r.n_used,
                "n_failed": r.failures.len(),
                "failures": fmt_failures(&r.failures),
            });
            (csv, summary)
        }
        AnalysisKind::Spectrum => {
            let r = forensics::dataset_residual_spectrum(&manifest, &opts, cfg.sigma, cfg.size).map_err(fail)?;
            let s = &r.value;
            let mut csv = String::new();
            for y in 0..s.height {
                let row: Vec<String> = (0..s.width).map(|x| s.get(x, y).to_string()).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            let summary = json!({
                "size": s.width,
                "sigma": cfg.sigma,
                "band_mean_low": s.radial_band_mean(0.0, 0.125),
                "band_mean_high": s.radial_band_mean(0.375, 0.75),
                "n_used": r.n_used,
                "n_failed": r.failures.len(),
                "failures": fmt_failures(&r.failures),
            });
            (csv, summary)
        }
    };
    let mut summary = summary;
    summary["kind"] = json!(kind);
    summary["n_records"] = json!(manifest.len());
    write_file(&out.join(format!("{kind}.csv")), csv)?;
    write_file(
        &out.join(format!("{kind}.summary.json")),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    rec.inputs.insert("samples".into(), samples_digest(&manifest));
    rec.write(&out, &cfg, json!({ "n_records": manifest.len() }))
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_degrade(g: &GlobalArgs, d: &DegradeArgs) -> CliResult<()> {
    let mut cfg: DegradeConfig = load_config(g.config.as_deref())?;
    if g.manifest.is_some() {
        cfg.manifest = g.manifest.clone();
    }
    if d.chain.is_some() {
        cfg.chain = d.chain.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.limit.is_some() {
        cfg.limit = g.limit;
    }
    let chain_path = cfg.chain.clone().ok_or_else(|| input("--chain is required"))?;
    let chain = load_chain(&chain_path)?;
    let manifest = load_manifest(cfg.manifest.as_ref(), cfg.limit)?;
    let out = out_dir(g)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| input(format!("cannot create {}: {e}", img_dir.display())))?;

    let indexed: Vec<(usize, &data::SampleRecord)> = manifest.records.iter().enumerate().collect();
    let results = par::map(&indexed, |&(i, r)| -> Result<data::SampleRecord, String> {
        let img = data::load_image(manifest.resolve(r)).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(data::sample_seed(cfg.seed, &r.id));
        let out_img = codecsim::apply_chain(&img, &chain, &mut rng).map_err(|e| e.to_string())?;
        let ext = if out_img.channels() == 1 { "pgm" } else { "ppm" };
        let rel = format!("images/{i:06}_{}.{ext}", safe_name(&r.id));
        data::save_image(&pixelops::quantize_8bit(&out_img), out.join(&rel)).map_err(|e| e.to_string())?;
        let mut nr = r.clone();
        nr.path = rel;
        Ok(nr)
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in manifest.records.iter().zip(results) {
        match res {
            Ok(nr) => records.push(nr),
            Err(error) => {
                warn!("{}: {error}", r.id);
                failures.push(SampleFailure {
                    id: r.id.clone(),
                    error,
                });
            }
        }
    }
    let summary = json!({
        "n_records": manifest.len(),
        "n_written": records.len(),
        "n_failed": failures.len(),
        "failures": fmt_failures(&failures),
    });
    write_file(
        &out.join("degrade.summary.json"),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    if records.is_empty() {
        return Err(input(format!("all {} samples failed", failures.len())));
    }
    let out_manifest = Manifest::from_records(records, out.join("manifest.jsonl").display().to_string())
        .map_err(|e| input(e.to_string()))?;
    write_file(&out.join("manifest.jsonl"), out_manifest.to_jsonl())?;

    let mut rec = RunRecord::new("degrade");
    if let Some(p) = &g.config {
        rec.input(p);
    }
    rec.input(Path::new(&manifest.source_path));
    rec.input(&chain_path);
    rec.inputs.insert("samples".into(), samples_digest(&manifest));
    rec.write(&out, &cfg, json!({ "chain": chain }))
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
        other => input(other),
    }
}

fn cmd_train(g: &GlobalArgs) -> CliResult<()> {
    let mut cfg: TrainJobConfig = load_config(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(train_error)?;
    let out = out_dir(g)?;
    let mut rec = RunRecord::new("train");
    if let Some(p) = &g.config {
        rec.input(p);
    }
    let (mut train_set, mut val_set, test_set) = match &cfg.data {
        DataSource::Synthetic { spec } => {
            let d = trainer::generate_synthetic(spec).map_err(train_error)?;
            for (name, set) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                let text = set.to_jsonl();
                rec.inputs.insert(
                    format!("synthetic:{name}"),
                    hex::encode(Sha256::digest(text.as_bytes())),
                );
                write_file(&out.join(format!("{name}.jsonl")), text)?;
            }
            (d.train, d.val, Some(d.test))
        }
        DataSource::Features { train, val, test } => {
            let load = |p: &PathBuf| {
                FeatureSet::load(p).map_err(|e| input(format!("cannot load features {}: {e}", p.display())))
            };
            rec.input(train);
            rec.input(val);
            let test_set = match test {
                Some(t) => {
                    rec.input(t);
                    Some(load(t)?)
                }
                None => None,
            };
            (load(train)?, load(val)?, test_set)
        }
    };
    if let Some(keep) = &cfg.train_modalities {
        train_set = train_set.subset_where(|i| keep.contains(&train_set.modalities[i]));
        val_set = val_set.subset_where(|i| keep.contains(&val_set.modalities[i]));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(input("training and validation splits must be non-empty"));
    }
    let model = cfg.train.init_model(train_set.dim());
    let outcome = trainer::train(model, &train_set, &val_set, &cfg.train).map_err(train_error)?;

    let ck = Checkpoint::new(outcome.model.clone(), cfg.train.clone(), outcome.best_epoch);
    write_file(&out.join("checkpoint.json"), ck.to_json() + "\n")?;
    write_file(&out.join("history.csv"), trainer::history_csv(&outcome.history))?;
    let mut summary = json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "best_val_total": outcome.history[outcome.best_epoch].val_total,
        "warnings": outcome.warnings,
    });
    if let Some(test) = &test_set {
        let mut acc = serde_json::Map::new();
        for m in Modality::ALL {
            let part = test.only(m);
            if !part.is_empty() {
                let a = trainer::accuracy_on(&outcome.model, &part).map_err(train_error)?;
                acc.insert(m.as_str().into(), json!(a));
            }
        }
        summary["test_accuracy"] = Value::Object(acc);
    }
    write_file(
        &out.join("train.summary.json"),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    rec.write(
        &out,
        &cfg,
        json!({ "n_train": train_set.len(), "n_val": val_set.len() }),
    )
}

/// One scored unit before frame grouping.
struct FrameRow {
    id: String,
    group: String,
    order: (u64, usize),
    logit: f64,
    label: Label,
    subset: String,
}

/// `video#frame` ids share the part before the last `#`.
pub fn group_key(id: &str) -> (&str, Option<u64>) {
    match id.rsplit_once('#') {
        Some((g, f)) => (g, f.parse().ok()),
        None => (id, None),
    }
}

fn frame_rows(
    ids: &[String],
    frame_idx: &[Option<u32>],
    logits: &[f64],
    labels: &[Label],
    subsets: &[String],
) -> Vec<FrameRow> {
    (0..ids.len())
        .map(|i| {
            let (g, f) = group_key(&ids[i]);
            let f = frame_idx[i].map(u64::from).or(f).unwrap_or(0);
            FrameRow {
                id: ids[i].clone(),
                group: g.to_string(),
                order: (f, i),
                logit: logits[i],
                label: labels[i],
                subset: subsets[i].clone(),
            }
        })
        .collect()
}

fn cmd_evaluate(g: &GlobalArgs, e: &EvaluateArgs) -> CliResult<()> {
    let mut cfg: EvaluateConfig = load_config(g.config.as_deref())?;
    if e.checkpoint.is_some() {
        cfg.checkpoint = e.checkpoint.clone();
    }
    if e.features.is_some() {
        cfg.features = e.features.clone();
    }
    if g.manifest.is_some() {
        cfg.manifest = g.manifest.clone();
    }
    if g.limit.is_some() {
        cfg.limit = g.limit;
    }
    if let Some(a) = e.aggregation {
        cfg.aggregation = match a {
            AggregationArg::SubsetMean => Aggregation::SubsetMean,
            AggregationArg::Overall => Aggregation::Overall,
        };
    }
    if let Some(t) = e.frames {
        cfg.frames = t;
    }
    if let Some(t) = e.threshold {
        cfg.threshold = t;
    }
    if cfg.frames == 0 {
        return Err(input("--frames must be positive"));
    }
    let ck_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| input("--checkpoint is required"))?;
    let ck = Checkpoint::load(&ck_path)
        .map_err(|err| input(format!("cannot load checkpoint {}: {err}", ck_path.display())))?;
    let model = ck.model;
    let out = out_dir(g)?;
    let mut rec = RunRecord::new("evaluate");
    if let Some(p) = &g.config {
        rec.input(p);
    }
    rec.input(&ck_path);

    let mut failures = Vec::new();
    let rows = if let Some(fp) = &cfg.features {
        rec.input(fp);
        let mut set =
            FeatureSet::load(fp).map_err(|err| input(format!("cannot load features {}: {err}", fp.display())))?;
        if let Some(n) = cfg.limit {
            set = set.subset_where(|i| i < n);
        }
        let fw = trainer::forward(&model, &set.x).map_err(input)?;
        frame_rows(&set.ids, &vec![None; set.len()], &fw.logits, &set.labels, &set.subsets)
    } else {
        let manifest = load_manifest(cfg.manifest.as_ref(), cfg.limit)?;
        rec.input(Path::new(&manifest.source_path));
        rec.inputs.insert("samples".into(), samples_digest(&manifest));
        let loaded = forensics::load_dataset(&manifest, &DatasetOptions::default());
        let mut ok = Vec::new();
        for ((id, img), r) in loaded.into_iter().zip(&manifest.records) {
            match img.and_then(|img: ImageBuffer| {
                if img.data().len() == model.d_in() {
                    Ok(img.into_data())
                } else {
                    Err(format!(
                        "{} pixel values, model expects {}",
                        img.data().len(),
                        model.d_in()
                    ))
                }
            }) {
                Ok(v) => ok.push((r, v)),
                Err(error) => failures.push(SampleFailure { id, error }),
            }
        }
        if ok.is_empty() {
            return Err(input(format!("all {} samples failed", failures.len())));
        }
        let d = model.d_in();
        let x = Matrix::from_vec(ok.len(), d, ok.iter().flat_map(|(_, v)| v.iter().copied()).collect());
        let fw = trainer::forward(&model, &x).map_err(input)?;
        let ids: Vec<String> = ok.iter().map(|(r, _)| r.id.clone()).collect();
        let fidx: Vec<Option<u32>> = ok.iter().map(|(r, _)| r.frame_index).collect();
        let labels: Vec<Label> = ok.iter().map(|(r, _)| r.label).collect();
        let subsets: Vec<String> = ok.iter().map(|(r, _)| r.subset.clone()).collect();
        frame_rows(&ids, &fidx, &fw.logits, &labels, &subsets)
    };

    let mut groups: BTreeMap<String, Vec<&FrameRow>> = BTreeMap::new();
    let mut first_seen: Vec<String> = Vec::new();
    for r in &rows {
        let entry = groups.entry(r.group.clone()).or_default();
        if entry.is_empty() {
            first_seen.push(r.group.clone());
        }
        entry.push(r);
    }
    let mut preds = Vec::new();
    let mut scores_csv = String::from("id,frames,score,label,subset\n");
    for key in &first_seen {
        let mut frames = groups[key].clone();
        frames.sort_by_key(|f| f.order);
        let (label, subset) = (frames[0].label, frames[0].subset.clone());
        if frames.iter().any(|f| f.label != label || f.subset != subset) {
            return Err(input(format!("frames of {key:?} disagree on label or subset")));
        }
        let scores: Vec<FrameScore> = frames.iter().map(|f| FrameScore::Logit(f.logit)).collect();
        let v = metrics::multi_frame_average(key, &scores, cfg.frames, label, &subset).map_err(input)?;
        let id = if frames.len() == 1 {
            frames[0].id.clone()
        } else {
            key.clone()
        };
        scores_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            id,
            v.frames_used.len(),
            v.prediction.score,
            label.as_str(),
            subset
        ));
        preds.push(v.prediction);
    }
    let report = metrics::per_subset_report(&preds, cfg.aggregation, cfg.threshold).map_err(input)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_file(&out.join("report.json"), report.to_json() + "\n")?;
    write_file(&out.join("scores.csv"), scores_csv)?;
    rec.write(
        &out,
        &cfg,
        json!({
            "n_scored": preds.len(),
            "n_failed": failures.len(),
            "failures": fmt_failures(&failures),
        }),
    )
}
