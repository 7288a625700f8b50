use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use msm::checkpoint::{self, Stage};
use msm::config::RunConfig;
use msm::corpus::{build_corpus, read_corpus, write_corpus, PreferredPair, PreferredSet};
use msm::evalharness::{attention_contentedness, run_ablation_l, run_ablation_style, run_benchmark};
use msm::nets::MsmModel;
use msm::personalize::{personalize_batch, Method, PreparedSet};
use msm::service::{self, AppState};
use msm::training::{train_step1, train_step2, TrainLog};
use msm::Image;

#[derive(Parser)]
#[command(name = "msm", version, about = "Content-aware personalized image enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config merged over the desk preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic training and held-out corpora.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-step training; writes step1.msm, step2.msm and train_log.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from an existing step1.msm in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Benchmark a checkpoint on the held-out users.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also run the content-grid and style-embedding ablations (retrains).
        #[arg(long)]
        ablations: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Personalize one image from a list of preferred pairs.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `original.png:retouched.png`, repeatable.
        #[arg(long = "pair", required = true)]
        pairs: Vec<String>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "masked")]
        method: String,
    },
}

/// A required input (corpus, checkpoint) is absent.
#[derive(Debug)]
struct MissingArtifact(String);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing artifact: {}", self.0)
    }
}

impl std::error::Error for MissingArtifact {}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(MissingArtifact(format!("{what} not found at {}", path.display())).into());
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => {
            require(p, "config file")?;
            RunConfig::load(p)?
        }
        None => RunConfig::desk(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    require(path, "checkpoint")?;
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train = build_corpus(&cfg.corpus)?;
    let test = build_corpus(&cfg.held_out_corpus())?;
    write_corpus(&train, &out.join("train"))?;
    write_corpus(&test, &out.join("test"))?;
    let h_train = sha256_file(&out.join("train/manifest.json"))?;
    let h_test = sha256_file(&out.join("test/manifest.json"))?;
    write_json(&out.join("config.json"), &json!({ "config": cfg, "manifest_sha256": { "train": h_train, "test": h_test } }))?;
    println!("train: {} pairs, manifest sha256 {h_train}", train.num_pairs());
    println!("test: {} pairs, manifest sha256 {h_test}", test.num_pairs());
    Ok(())
}

fn read_split(data: &Path, split: &str) -> Result<msm::corpus::Corpus> {
    let dir = data.join(split);
    require(&dir.join("manifest.json"), &format!("{split} corpus"))?;
    Ok(read_corpus(&dir)?)
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let corpus = read_split(data, "train")?;
    std::fs::create_dir_all(out)?;
    let meta = json!({ "config": cfg });
    let step1_path = out.join("step1.msm");
    let mut log = TrainLog::default();
    let mut model = if resume {
        let ck = load_checkpoint(&step1_path)?;
        if ck.model.cfg != cfg.net {
            bail!(msm::Error::config("net", "step-1 checkpoint was trained with a different net config"));
        }
        log::info!("resuming from {}", step1_path.display());
        ck.model
    } else {
        let mut model = MsmModel::new(cfg.net.clone())?;
        log.step1 = train_step1(&corpus, &mut model, &cfg.train, &cfg.loss, |r| {
            log::info!("step 1 epoch {} loss {:.5} ({:.1}s)", r.epoch, r.loss, r.seconds)
        })?;
        checkpoint::save(&step1_path, &model, Stage::Step1, &meta)?;
        model
    };
    log.step2 = train_step2(&corpus, &mut model, &cfg.train, |r| {
        log::info!("step 2 epoch {} loss {:.5} ({:.1}s)", r.epoch, r.loss, r.seconds)
    })?;
    checkpoint::save(&out.join("step2.msm"), &model, Stage::Step2, &meta)?;
    write_json(&out.join("train_log.json"), &json!({ "config": cfg, "log": log }))?;
    if let Some(last) = log.step2.last() {
        println!("final step-2 loss {:.6}", last.loss);
    }
    Ok(())
}

fn eval(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path, ablations: bool) -> Result<()> {
    let test = read_split(data, "test")?;
    let ck = load_checkpoint(ckpt)?;
    if ck.stage != Stage::Step2 {
        log::warn!("{} holds step-1 weights; the masked method is untrained", ckpt.display());
    }
    std::fs::create_dir_all(out)?;
    let report = run_benchmark(&ck.model, &test, &cfg.bench)?;
    let i_att = cfg.bench.i_new_values.iter().copied().max().unwrap_or(1);
    let att = attention_contentedness(&ck.model, &test, i_att, cfg.bench.n_samplings, cfg.bench.seed)?;
    let mut table = report.to_table();
    table.push_str(&format!(
        "\nattention at I_new={i_att}: same-class mass {:.3}, uniform share {:.3}\n",
        att.same_class_mass, att.uniform_share
    ));
    let mut doc = json!({ "config": cfg, "benchmark": report, "attention": att });
    if ablations {
        let train = read_split(data, "train")?;
        let i_new = cfg.bench.i_new_values.iter().copied().filter(|&i| i <= 20).max().unwrap_or(1);
        let l = run_ablation_l(&ck.model, &train, &test, &[1, 2, 4, 8], &cfg.train, &cfg.bench, i_new)?;
        let s = run_ablation_style(&train, &test, &cfg.net, &cfg.train, &cfg.loss, &cfg.bench, i_new, Some(&ck.model))?;
        table.push('\n');
        table.push_str(&l.to_table());
        table.push('\n');
        table.push_str(&s.to_table());
        doc["ablation_l"] = serde_json::to_value(&l)?;
        doc["ablation_style"] = serde_json::to_value(&s)?;
    }
    write_json(&out.join("report.json"), &doc)?;
    std::fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn serve(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let addr: SocketAddr = format!("{}:{}", cfg.serve.host, cfg.serve.port)
        .parse()
        .map_err(|e| msm::Error::config("serve.host", format!("{e}")))?;
    let state = Arc::new(AppState::new(HashMap::from([(service::DEFAULT_MODEL_ID.to_string(), Arc::new(ck.model))])));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(addr, state)).with_context(|| format!("serving on {addr}"))?;
    Ok(())
}

fn enhance(ckpt: &Path, pairs: &[String], input: &Path, output: &Path, method: &str) -> Result<()> {
    let method: Method = method.parse().map_err(|e: msm::Error| anyhow!(msm::Error::config("method", e.to_string())))?;
    let ck = load_checkpoint(ckpt)?;
    let side = ck.model.cfg.enhancer_input_size;
    let mut prefs = Vec::new();
    for spec in pairs {
        let (x, y) = spec.split_once(':').ok_or_else(|| msm::Error::config("pair", format!("`{spec}` is not original:retouched")))?;
        let (x, y) = (Path::new(x), Path::new(y));
        require(x, "preferred original")?;
        require(y, "preferred retouched image")?;
        prefs.push(PreferredPair::new(Image::read_png(x)?.resize(side, side)?, Image::read_png(y)?.resize(side, side)?, 0)?);
    }
    require(input, "input image")?;
    let unseen = Image::read_png(input)?;
    let set = PreferredSet::new("cli", prefs)?;
    let prepared = PreparedSet::new(&ck.model, &set)?;
    let (img, style, att) = personalize_batch(&ck.model, &prepared, method, &[&unseen])?.remove(0);
    img.write_png(output)?;
    println!("{}", json!({ "output": output, "method": method, "predicted_style_norm": style.norm(), "attention": att }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { cfg, out } => gen_data(&load_config(&cfg)?, &out),
        Cmd::Train { cfg, data, out, resume } => train(&load_config(&cfg)?, &data, &out, resume),
        Cmd::Eval { cfg, data, checkpoint, out, ablations } => eval(&load_config(&cfg)?, &data, &checkpoint, &out, ablations),
        Cmd::Serve { cfg, checkpoint } => serve(&load_config(&cfg)?, &checkpoint),
        Cmd::Enhance { checkpoint, pairs, input, output, method } => enhance(&checkpoint, &pairs, &input, &output, &method),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<MissingArtifact>() {
            return 3;
        }
        if let Some(msm::Error::Config { .. }) = cause.downcast_ref::<msm::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
