//! Command-line driver: data generation, training, model encryption, the
//! three protocol parties, label-equivalence checks and benchmarks.
//!
//! Successful commands exit 0 and print JSON (or CSV for `--grid` and
//! `gen-data`) on stdout. Failures print `{"error": {"code", "message"}}` on
//! stderr and exit 1; usage errors exit 2.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use hefraud::ckks::{CkksContext, CkksError, CkksKeySet, CkksParams};
use hefraud::data::{
    generate_synthetic, load_csv, DataError, load_reader, split, write_csv, LoadOptions, MetricsReport,
    TransactionRecord,
};
use hefraud::gbdt::{load_model, GbdtError, save_model, train, TrainConfig, TreeEnsemble};
use hefraud::harness::{
    gbdt_similarity, nn_similarity, reference_bytes, register_gbdt_ops, register_nn_ops,
    storage_report, BenchRegistry, GbdtBenchInputs, HarnessError, NnBenchInputs, SimilarityConfig,
    StorageArtifacts,
};
use hefraud::he_gbdt::{
    encrypt_model, encrypt_model_seeded, encrypt_transaction, fit_quantizer, ClientKeyBundle,
    EncryptedEnsemble, HeGbdtError, LeafMode,
};
use hefraud::nn::{encrypt_input, rotation_steps, train_nn, HeOptions, NnError, NnModel, NnTrainConfig};
use hefraud::ope::Quantizer;
use hefraud::protocol::wire::{InferRequestNn, InferRequestXgb};
use hefraud::protocol::{
    serve_host, serve_sms, Client, ClientConfig, Host, HostConfig, HttpHost, HttpSms,
    NnHostConfig, ProtocolError, Sms, SmsApi, SmsConfig,
};

/// Records generated for `--dataset synthetic`.
const SYNTHETIC_RECORDS: usize = 10_000;
const SYNTHETIC_FRAUD_RATE: f64 = 0.05;
const SYNTHETIC_FEATURES: usize = 28;

#[derive(Parser)]
#[command(name = "hefraud", version, about = "Fraud scoring over encrypted transactions")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Transactions CSV; `-` reads stdin, `synthetic` generates records.
    /// Defaults to stdin when it is not a terminal.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Seeds every random choice; fresh entropy when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    cores: usize,
    #[arg(long, global = true, default_value = "paillier-leaves")]
    mode: LeafMode,
    /// Output file; each command has its own default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic transactions CSV.
    GenData(GenDataArgs),
    /// Trains a gradient-boosted tree model.
    TrainXgb(TrainXgbArgs),
    /// Trains a one-hidden-layer network with square activation.
    TrainNn(TrainNnArgs),
    /// Encrypts a tree model under fresh or supplied Client keys.
    EncryptModel(EncryptModelArgs),
    /// Runs the Host over HTTP.
    ServeHost(ServeHostArgs),
    /// Runs the SMS over HTTP.
    ServeSms(ServeSmsArgs),
    /// Scores dataset records against a Host.
    ClientInfer(ClientInferArgs),
    /// Compares plaintext and encrypted labels on a balanced sample.
    SimilarityTest(SimilarityArgs),
    /// Times the registered operations and reports artifact sizes.
    Bench(BenchArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Xgb,
    Nn,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = SYNTHETIC_RECORDS)]
    n: usize,
    #[arg(long, default_value_t = SYNTHETIC_FRAUD_RATE)]
    fraud_rate: f64,
    #[arg(long, default_value_t = SYNTHETIC_FEATURES)]
    features: usize,
}

#[derive(Args)]
struct GridArgs {
    /// `KEY=V1,V2,...`; repeat for a Cartesian grid. Writes one CSV row of
    /// parameters and validation metrics per point and keeps the model with
    /// the best average precision.
    #[arg(long = "grid", value_name = "KEY=VALUES")]
    grid: Vec<String>,
}

#[derive(Args)]
struct TrainXgbArgs {
    #[arg(long, default_value_t = 6)]
    max_depth: usize,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 0.3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    min_child_weight: f64,
    /// Negatives kept per training set; all when absent.
    #[arg(long)]
    undersample: Option<usize>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct TrainNnArgs {
    #[arg(long, default_value_t = 47)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pos_weight: f64,
    #[arg(long)]
    undersample: Option<usize>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct EncryptModelArgs {
    #[arg(long, default_value = "xgb-model.json")]
    model: PathBuf,
    #[arg(long, default_value_t = 3072)]
    paillier_bits: u64,
    /// Reuses an existing key file instead of generating keys.
    #[arg(long)]
    keys_in: Option<PathBuf>,
    #[arg(long, default_value = "client-keys.json")]
    keys_out: PathBuf,
    #[arg(long, default_value = "default")]
    model_id: String,
}

#[derive(Args)]
struct RingArgs {
    /// CKKS ring degree for the network.
    #[arg(long, default_value_t = 16384)]
    ring_degree: usize,
    /// Allows rings below the 128-bit security cap. For testing only.
    #[arg(long)]
    insecure_ring: bool,
    /// Evaluates networks deeper than the modulus chain supports; results
    /// are expected to be wrong.
    #[arg(long)]
    unsafe_depth: bool,
}

#[derive(Args)]
struct ServeHostArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Plaintext tree model encrypted per Client through the SMS.
    #[arg(long)]
    xgb_model: Option<PathBuf>,
    #[arg(long)]
    sms_url: Option<String>,
    /// Pre-encrypted model written by `encrypt-model`.
    #[arg(long)]
    encrypted_model: Option<PathBuf>,
    #[arg(long)]
    nn_model: Option<PathBuf>,
    #[command(flatten)]
    ring: RingArgs,
}

#[derive(Args)]
struct ServeSmsArgs {
    #[arg(long, default_value = "127.0.0.1:8081")]
    listen: SocketAddr,
    #[arg(long, default_value_t = 3072)]
    paillier_bits: u64,
}

#[derive(Args)]
struct ClientInferArgs {
    #[arg(long)]
    host_url: String,
    #[arg(long, value_enum, default_value = "xgb")]
    protocol: Protocol,
    /// Runs the per-client setup through this SMS.
    #[arg(long)]
    sms_url: Option<String>,
    /// Key file from `encrypt-model` for a pre-encrypted model.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    insecure_ring: bool,
    /// Scores at most this many records.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long, value_enum, default_value = "xgb")]
    protocol: Protocol,
    /// Plaintext model; defaults to the matching `train-*` output.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pre-encrypted tree model; the model is encrypted in-process when
    /// absent.
    #[arg(long, requires = "keys")]
    encrypted_model: Option<PathBuf>,
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long, default_value_t = 3072)]
    paillier_bits: u64,
    #[arg(long, default_value_t = 75)]
    n_fraud: usize,
    #[arg(long, default_value_t = 75)]
    n_legit: usize,
    #[command(flatten)]
    ring: RingArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    xgb_model: Option<PathBuf>,
    #[arg(long)]
    nn_model: Option<PathBuf>,
    /// Comma-separated operation names; every registered one when absent.
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3072)]
    paillier_bits: u64,
    #[command(flatten)]
    ring: RingArgs,
}

/// An error with the machine-readable code printed on exit.
#[derive(Debug)]
struct CliError {
    code: String,
    message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn cli_error(code: &str, message: impl Into<String>) -> anyhow::Error {
    CliError {
        code: code.into(),
        message: message.into(),
    }
    .into()
}

fn error_code(e: &anyhow::Error) -> String {
    if let Some(c) = e.downcast_ref::<CliError>() {
        return c.code.clone();
    }
    if let Some(p) = e.downcast_ref::<ProtocolError>() {
        return p.code.as_str().to_string();
    }
    if let Some(h) = e.downcast_ref::<HarnessError>() {
        return match h {
            HarnessError::Configuration(_) => "configuration",
            HarnessError::Size(_) => "size",
            HarnessError::Registry(_) => "registry",
            HarnessError::Data(_) => "data",
            HarnessError::Gbdt(_) => "gbdt",
            HarnessError::HeGbdt(_) => "he-gbdt",
            HarnessError::Nn(_) => "nn",
            HarnessError::Ckks(_) => "ckks",
        }
        .to_string();
    }
    if e.downcast_ref::<DataError>().is_some() {
        return "data".into();
    }
    if e.downcast_ref::<GbdtError>().is_some() {
        return "gbdt".into();
    }
    if e.downcast_ref::<HeGbdtError>().is_some() {
        return "he-gbdt".into();
    }
    if e.downcast_ref::<NnError>().is_some() {
        return "nn".into();
    }
    if e.downcast_ref::<CkksError>().is_some() {
        return "ckks".into();
    }
    if e.downcast_ref::<io::Error>().is_some() {
        return "io".into();
    }
    "error".into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "code": error_code(&e), "message": format!("{e:#}") } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.cores < 1 {
        bail!(cli_error("configuration", "--cores must be at least 1"));
    }
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::TrainXgb(a) => train_xgb(g, a),
        Command::TrainNn(a) => train_nn_cmd(g, a),
        Command::EncryptModel(a) => encrypt_model_cmd(g, a),
        Command::ServeHost(a) => serve_host_cmd(g, a),
        Command::ServeSms(a) => serve_sms_cmd(g, a),
        Command::ClientInfer(a) => client_infer(g, a),
        Command::SimilarityTest(a) => similarity(g, a),
        Command::Bench(a) => bench(g, a),
    }
}

// ---- shared helpers ----

fn rng(g: &GlobalArgs) -> ChaCha20Rng {
    match g.seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_rng(OsRng).expect("operating system entropy"),
    }
}

fn load_records(g: &GlobalArgs) -> Result<Vec<TransactionRecord>> {
    let opts = LoadOptions::default();
    let records = match g.dataset.as_deref() {
        Some("synthetic") => generate_synthetic(
            SYNTHETIC_RECORDS,
            SYNTHETIC_FRAUD_RATE,
            SYNTHETIC_FEATURES,
            g.seed.unwrap_or(0),
        )?,
        Some("-") => load_reader(io::stdin().lock(), &opts)?,
        Some(path) => load_csv(path, &opts)?,
        None if !io::stdin().is_terminal() => load_reader(io::stdin().lock(), &opts)?,
        None => bail!(cli_error(
            "configuration",
            "no dataset: pass --dataset or pipe a CSV on stdin"
        )),
    };
    Ok(records)
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_bytes(path, &serde_json::to_vec(value)?)
}

fn print_json(value: &Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_tree_model(path: &Path) -> Result<TreeEnsemble> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(load_model(&bytes)?)
}

fn load_nn_model(path: &Path) -> Result<NnModel> {
    Ok(NnModel::from_json(&read_json(path)?)?)
}

/// The file written by `encrypt-model`: the encrypted model with the
/// quantizer its thresholds were encrypted under.
struct EncryptedModelFile {
    model_id: String,
    quantizer: Quantizer,
    model: EncryptedEnsemble,
}

fn read_encrypted_model(path: &Path) -> Result<EncryptedModelFile> {
    let v = read_json(path)?;
    let model_id = v["model_id"]
        .as_str()
        .ok_or_else(|| cli_error("bad-encoding", "encrypted model file lacks model_id"))?
        .to_string();
    let quantizer = serde_json::from_value(v["quantizer"].clone())
        .context("encrypted model file has a malformed quantizer")?;
    let model = EncryptedEnsemble::from_json(&v["encrypted_model"])?;
    Ok(EncryptedModelFile {
        model_id,
        quantizer,
        model,
    })
}

/// `(model_id, bundle)` from a key file written by `encrypt-model`.
fn read_keys(path: &Path) -> Result<(String, ClientKeyBundle)> {
    let v = read_json(path)?;
    let model_id = v["model_id"].as_str().unwrap_or("default").to_string();
    Ok((model_id, ClientKeyBundle::from_json(&v["bundle"])?))
}

fn ckks_context(ring: &RingArgs) -> Result<CkksContext> {
    let params = CkksParams {
        n: ring.ring_degree,
        ..CkksParams::default()
    };
    Ok(if ring.insecure_ring {
        CkksContext::new_insecure(params)?
    } else {
        CkksContext::new(params)?
    })
}

fn he_options(ring: &RingArgs) -> HeOptions {
    HeOptions {
        unsafe_depth: ring.unsafe_depth,
    }
}

fn ckks_keys(ctx: &CkksContext, model: &NnModel, rng: &mut ChaCha20Rng) -> CkksKeySet {
    CkksKeySet::generate_with_steps(ctx, &rotation_steps(ctx, model), rng)
}

// ---- gen-data ----

fn gen_data(g: &GlobalArgs, a: &GenDataArgs) -> Result<()> {
    let records = generate_synthetic(a.n, a.fraud_rate, a.features, g.seed.unwrap_or(0))?;
    match &g.out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&records, io::BufWriter::new(file))?;
            print_json(&json!({ "dataset": path, "records": records.len() }))
        }
        None => Ok(write_csv(&records, io::stdout().lock())?),
    }
}

// ---- training ----

/// Parses `KEY=V1,V2` flags into the Cartesian product of assignments,
/// rejecting keys outside `allowed`.
fn grid_points(specs: &[String], allowed: &[&str]) -> Result<Vec<BTreeMap<String, f64>>> {
    let mut points = vec![BTreeMap::new()];
    for spec in specs {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| cli_error("configuration", format!("grid entry `{spec}` is not KEY=VALUES")))?;
        if !allowed.contains(&key) {
            bail!(cli_error(
                "configuration",
                format!("unknown grid key `{key}`; expected one of {}", allowed.join(", "))
            ));
        }
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| cli_error("configuration", format!("grid values for `{key}`: {e}")))?;
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut p = p.clone();
                    p.insert(key.to_string(), v);
                    p
                })
            })
            .collect();
    }
    Ok(points)
}

fn as_count(key: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(cli_error("configuration", format!("`{key}` must be a whole number, got {v}")))
    }
}

fn metrics_json(m: &MetricsReport) -> Value {
    serde_json::to_value(m).expect("metrics serialize")
}


/// Trains every grid point (or the single configuration) on the training
/// split, scores the validation split and keeps the best model by average
/// precision. With a grid, one CSV row per point goes to stdout.
fn select<M>(
    g: &GlobalArgs,
    grid: &GridArgs,
    allowed: &[&str],
    fit: impl Fn(&BTreeMap<String, f64>, &[TransactionRecord]) -> Result<M>,
    proba: impl Fn(&M, &TransactionRecord) -> Result<f64>,
) -> Result<(M, MetricsReport, MetricsReport)> {
    let records = load_records(g)?;
    let parts = split(&records)?;
    let score = |m: &M, recs: &[TransactionRecord]| -> Result<MetricsReport> {
        let scores = recs.iter().map(|r| proba(m, r)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
        Ok(MetricsReport::compute(&scores, &labels)?)
    };
    let points = grid_points(&grid.grid, allowed)?;
    let mut csv_out = (!grid.grid.is_empty()).then(|| csv::Writer::from_writer(io::stdout()));
    if let Some(w) = csv_out.as_mut() {
        let mut header: Vec<&str> = points[0].keys().map(String::as_str).collect();
        header.extend(["auc_roc", "average_precision", "recall_fraud", "recall_legit"]);
        w.write_record(&header)?;
    }
    let mut best: Option<(M, MetricsReport)> = None;
    for point in &points {
        let model = fit(point, &parts.train)?;
        let m = score(&model, &parts.validation)?;
        if let Some(w) = csv_out.as_mut() {
            let mut row: Vec<String> = point.values().map(f64::to_string).collect();
            row.extend([m.auc_roc, m.average_precision, m.recall_fraud, m.recall_legit].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        if best.as_ref().is_none_or(|(_, b)| m.average_precision > b.average_precision) {
            best = Some((model, m));
        }
    }
    if let Some(mut w) = csv_out {
        w.flush()?;
    }
    let (model, validation) = best.expect("the grid has at least one point");
    let test = score(&model, &parts.test)?;
    Ok((model, validation, test))
}

fn count_param(p: &BTreeMap<String, f64>, key: &str, default: usize) -> Result<usize> {
    p.get(key).map_or(Ok(default), |&v| as_count(key, v))
}

fn undersample_param(p: &BTreeMap<String, f64>, default: Option<usize>) -> Result<Option<usize>> {
    p.get("undersample").map_or(Ok(default), |&v| as_count("undersample", v).map(Some))
}

fn train_xgb(g: &GlobalArgs, a: &TrainXgbArgs) -> Result<()> {
    let allowed = ["max_depth", "trees", "learning_rate", "lambda", "min_child_weight", "undersample"];
    let start = Instant::now();
    let fit = |p: &BTreeMap<String, f64>, recs: &[TransactionRecord]| -> Result<TreeEnsemble> {
        let cfg = TrainConfig {
            max_depth: count_param(p, "max_depth", a.max_depth)?,
            num_estimators: count_param(p, "trees", a.trees)?,
            learning_rate: p.get("learning_rate").copied().unwrap_or(a.learning_rate),
            lambda: p.get("lambda").copied().unwrap_or(a.lambda),
            min_child_weight: p.get("min_child_weight").copied().unwrap_or(a.min_child_weight),
            undersampling_num_negatives: undersample_param(p, a.undersample)?,
            seed: g.seed.unwrap_or(0),
            ..TrainConfig::default()
        };
        Ok(train(recs, &cfg)?)
    };
    let (model, validation, test) =
        select(g, &a.grid, &allowed, fit, |m, r| Ok(m.predict_proba(&r.features)?))?;
    let out = g.out.clone().unwrap_or_else(|| "xgb-model.json".into());
    write_bytes(&out, &save_model(&model))?;
    if a.grid.grid.is_empty() {
        print_json(&json!({
            "model": out,
            "trees": model.num_trees(),
            "max_depth": model.max_depth(),
            "validation": metrics_json(&validation),
            "test": metrics_json(&test),
            "elapsed_ms": start.elapsed().as_secs_f64() * 1e3,
        }))?;
    }
    Ok(())
}

fn train_nn_cmd(g: &GlobalArgs, a: &TrainNnArgs) -> Result<()> {
    let allowed = ["hidden", "hidden_layers", "epochs", "learning_rate", "pos_weight", "undersample"];
    let start = Instant::now();
    let fit = |p: &BTreeMap<String, f64>, recs: &[TransactionRecord]| -> Result<NnModel> {
        let cfg = NnTrainConfig {
            hidden_layer_size: count_param(p, "hidden", a.hidden)?,
            hidden_layers: count_param(p, "hidden_layers", a.hidden_layers)?,
            epochs: count_param(p, "epochs", a.epochs)?,
            learning_rate: p.get("learning_rate").copied().unwrap_or(a.learning_rate),
            pos_weight: p.get("pos_weight").copied().unwrap_or(a.pos_weight),
            undersampling_num_negatives: undersample_param(p, a.undersample)?,
            seed: g.seed.unwrap_or(0),
        };
        Ok(train_nn(recs, &cfg)?)
    };
    let proba = |m: &NnModel, r: &TransactionRecord| Ok(m.predict_proba(&m.input_vector(&r.features)?)?);
    let (model, validation, test) = select(g, &a.grid, &allowed, fit, proba)?;
    let out = g.out.clone().unwrap_or_else(|| "nn-model.json".into());
    write_json(&out, &model.to_json())?;
    if a.grid.grid.is_empty() {
        print_json(&json!({
            "model": out,
            "d": model.input_dim(),
            "h": model.hidden_size(),
            "hidden_layers": model.num_hidden_layers(),
            "validation": metrics_json(&validation),
            "test": metrics_json(&test),
            "elapsed_ms": start.elapsed().as_secs_f64() * 1e3,
        }))?;
    }
    Ok(())
}

// ---- encrypt-model ----

fn encrypt_model_cmd(g: &GlobalArgs, a: &EncryptModelArgs) -> Result<()> {
    let model = load_tree_model(&a.model)?;
    let mut rng = rng(g);
    let (model_id, bundle) = match &a.keys_in {
        Some(path) => read_keys(path)?,
        None => (
            a.model_id.clone(),
            ClientKeyBundle::generate(fit_quantizer(&model), a.paillier_bits, &mut rng)?,
        ),
    };
    let start = Instant::now();
    // Seeded leaf randomness keeps the output independent of --cores.
    let encrypted = match g.seed {
        Some(_) => {
            let mut leaf_seed = [0u8; 32];
            rng.fill_bytes(&mut leaf_seed);
            encrypt_model_seeded(&model, &bundle, g.mode, g.cores, leaf_seed)?
        }
        None => encrypt_model(&model, &bundle, g.mode, g.cores)?,
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let out = g.out.clone().unwrap_or_else(|| "xgb-encrypted.json".into());
    write_json(
        &out,
        &json!({
            "model_id": model_id,
            "quantizer": bundle.quantizer,
            "encrypted_model": encrypted.to_json(),
        }),
    )?;
    if a.keys_in.is_none() {
        write_json(&a.keys_out, &json!({ "model_id": model_id, "bundle": bundle.to_json() }))?;
    }
    print_json(&json!({
        "encrypted_model": out,
        "keys": a.keys_in.as_ref().unwrap_or(&a.keys_out),
        "model_id": model_id,
        "trees": encrypted.num_trees(),
        "mode": g.mode.to_string(),
        "cores": g.cores,
        "elapsed_ms": elapsed_ms,
    }))
}

// ---- servers ----

fn announce(role: &str, url: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", json!({ "role": role, "listening": url }))?;
    out.flush()?;
    Ok(())
}

fn serve_host_cmd(g: &GlobalArgs, a: &ServeHostArgs) -> Result<()> {
    let nn = match &a.nn_model {
        Some(path) => Some(NnHostConfig {
            model: load_nn_model(path)?,
            params: CkksParams {
                n: a.ring.ring_degree,
                ..CkksParams::default()
            },
            allow_insecure: a.ring.insecure_ring,
            options: he_options(&a.ring),
        }),
        None => None,
    };
    let xgb_model = a.xgb_model.as_deref().map(load_tree_model).transpose()?;
    if xgb_model.is_some() != a.sms_url.is_some() {
        bail!(cli_error("configuration", "--xgb-model and --sms-url go together"));
    }
    let sms = a
        .sms_url
        .as_deref()
        .map(|u| Arc::new(HttpSms::new(u)) as Arc<dyn SmsApi>);
    let host = Host::new(
        HostConfig {
            xgb_model,
            mode: g.mode,
            quantizer: None,
            nn,
        },
        sms,
    )?;
    if let Some(path) = &a.encrypted_model {
        let file = read_encrypted_model(path)?;
        host.insert_encrypted_model(&file.model_id, file.model, file.quantizer);
    }
    let handle = serve_host(Arc::new(host), a.listen)?;
    announce("host", &handle.url())?;
    Ok(handle.wait()?)
}

fn serve_sms_cmd(g: &GlobalArgs, a: &ServeSmsArgs) -> Result<()> {
    let sms = Sms::new(SmsConfig {
        paillier_bits: a.paillier_bits,
        cores: g.cores,
        seed: g.seed,
    });
    let handle = serve_sms(Arc::new(sms), a.listen)?;
    announce("sms", &handle.url())?;
    Ok(handle.wait()?)
}

// ---- client-infer ----

fn client_infer(g: &GlobalArgs, a: &ClientInferArgs) -> Result<()> {
    let records = load_records(g)?;
    let limit = a.limit.unwrap_or(records.len()).min(records.len());
    let host = HttpHost::new(&a.host_url);
    let mut client = Client::new(ClientConfig {
        allow_insecure: a.insecure_ring,
        seed: g.seed,
    });
    let start = Instant::now();
    match a.protocol {
        Protocol::Xgb => match (&a.keys, &a.sms_url) {
            (Some(path), _) => {
                let (model_id, bundle) = read_keys(path)?;
                client.use_xgb_keys(&host, &model_id, bundle)?;
            }
            (None, Some(url)) => client.setup_xgb(&host, &HttpSms::new(url))?,
            (None, None) => bail!(cli_error("configuration", "tree scoring needs --keys or --sms-url")),
        },
        Protocol::Nn => client.setup_nn(&host)?,
    }
    let setup_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut results = Vec::with_capacity(limit);
    let mut correct = 0usize;
    for (index, r) in records[..limit].iter().enumerate() {
        let score = match a.protocol {
            Protocol::Xgb => client.score_xgb(&host, &r.features)?,
            Protocol::Nn => {
                let x = client.nn_input(&r.features)?;
                client.score_nn(&host, &x)?
            }
        };
        correct += usize::from(score.label == r.label);
        results.push(json!({
            "index": index,
            "label": score.label,
            "proba": score.proba,
            "true_label": r.label,
        }));
    }
    print_json(&json!({
        "protocol": match a.protocol { Protocol::Xgb => "xgb", Protocol::Nn => "nn" },
        "model_id": client.xgb_model_id(),
        "client_id": client.nn_client_id(),
        "scored": limit,
        "accuracy": if limit > 0 { correct as f64 / limit as f64 } else { 0.0 },
        "setup_ms": setup_ms,
        "results": results,
    }))
}

// ---- similarity-test ----

fn similarity(g: &GlobalArgs, a: &SimilarityArgs) -> Result<()> {
    let records = load_records(g)?;
    let test = split(&records)?.test;
    let cfg = SimilarityConfig {
        n_fraud: a.n_fraud,
        n_legit: a.n_legit,
        seed: g.seed.unwrap_or(0),
    };
    let mut rng = rng(g);
    let report = match a.protocol {
        Protocol::Xgb => {
            let model = load_tree_model(a.model.as_deref().unwrap_or(Path::new("xgb-model.json")))?;
            let (encrypted, bundle) = match (&a.encrypted_model, &a.keys) {
                (Some(enc), Some(keys)) => (read_encrypted_model(enc)?.model, read_keys(keys)?.1),
                _ => {
                    let bundle = ClientKeyBundle::generate(fit_quantizer(&model), a.paillier_bits, &mut rng)?;
                    (encrypt_model(&model, &bundle, g.mode, g.cores)?, bundle)
                }
            };
            gbdt_similarity(&model, &encrypted, &bundle, &test, &cfg)?
        }
        Protocol::Nn => {
            let model = load_nn_model(a.model.as_deref().unwrap_or(Path::new("nn-model.json")))?;
            let ctx = ckks_context(&a.ring)?;
            let keys = ckks_keys(&ctx, &model, &mut rng);
            nn_similarity(&model, &ctx, &keys, he_options(&a.ring), &test, &cfg)?
        }
    };
    print_json(&serde_json::to_value(&report)?)?;
    if !report.passed {
        bail!(cli_error(
            "similarity-failed",
            format!("{} of {} labels differ", report.mismatches.len(), report.sample.len())
        ));
    }
    Ok(())
}

// ---- bench ----

fn bench(g: &GlobalArgs, a: &BenchArgs) -> Result<()> {
    let mut reg = BenchRegistry::new();
    reg.warmup = a.warmup;
    let mut storage = serde_json::Map::new();
    let needs_data = a.xgb_model.is_some() || a.nn_model.is_some();
    let record = if needs_data {
        let records = load_records(g)?;
        let test = split(&records)?.test;
        Some(test.into_iter().next().ok_or_else(|| anyhow!("empty test split"))?)
    } else {
        None
    };
    let mut rng = rng(g);

    if let (Some(path), Some(r)) = (&a.xgb_model, &record) {
        let model = load_tree_model(path)?;
        let bundle = ClientKeyBundle::generate(fit_quantizer(&model), a.paillier_bits, &mut rng)?;
        let encrypted = encrypt_model(&model, &bundle, g.mode, g.cores)?;
        let ct = encrypt_transaction(&r.features, &bundle)?;
        let plain_tx = serde_json::to_vec(&r.features)?;
        let enc_tx = serde_json::to_vec(&InferRequestXgb::new("default", &ct))?;
        let plain_model = save_model(&model);
        let enc_model = serde_json::to_vec(&encrypted.to_json())?;
        let report = storage_report(&StorageArtifacts {
            plaintext_tx: &plain_tx,
            encrypted_tx: &enc_tx,
            plaintext_model: &plain_model,
            encrypted_model: Some(&enc_model),
        })?;
        storage.insert(
            "xgb".into(),
            json!({ "measured": report, "tx_expansion": report.tx_expansion(), "reference": reference_bytes("xgb") }),
        );
        register_gbdt_ops(
            &mut reg,
            GbdtBenchInputs {
                model,
                bundle,
                tx: r.features.clone(),
                mode: g.mode,
                cores: g.cores,
            },
        )?;
    }

    if let (Some(path), Some(r)) = (&a.nn_model, &record) {
        let model = load_nn_model(path)?;
        let ctx = ckks_context(&a.ring)?;
        let keys = ckks_keys(&ctx, &model, &mut rng);
        let x = model.input_vector(&r.features)?;
        let ct = encrypt_input(&ctx, &keys.secret, &x, &mut rng)?;
        let plain_tx = serde_json::to_vec(&r.features)?;
        let enc_tx = serde_json::to_vec(&InferRequestNn {
            protocol_version: hefraud::protocol::PROTOCOL_VERSION.into(),
            client_id: "bench".into(),
            context_descriptor: ctx.params().descriptor(),
            ct_b64: hefraud::protocol::wire::encode_b64(&ctx.ciphertext_to_bytes(&ct)),
        })?;
        let plain_model = serde_json::to_vec(&model.to_json())?;
        let report = storage_report(&StorageArtifacts {
            plaintext_tx: &plain_tx,
            encrypted_tx: &enc_tx,
            plaintext_model: &plain_model,
            encrypted_model: None,
        })?;
        storage.insert(
            "nn".into(),
            json!({ "measured": report, "tx_expansion": report.tx_expansion(), "reference": reference_bytes("nn") }),
        );
        register_nn_ops(
            &mut reg,
            NnBenchInputs {
                model,
                ctx: Arc::new(ctx),
                keys: Arc::new(keys),
                x,
                options: he_options(&a.ring),
            },
        )?;
    }

    let ops: Vec<String> = if a.ops.is_empty() {
        reg.names().into_iter().map(String::from).collect()
    } else {
        a.ops.clone()
    };
    let entries = ops
        .iter()
        .map(|op| reg.run(op, a.runs))
        .collect::<Result<Vec<_>, _>>()?;
    let report = json!({ "entries": entries, "storage": storage });
    if let Some(out) = &g.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}
