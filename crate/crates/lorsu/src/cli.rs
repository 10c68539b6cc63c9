//! Command-line entry points: `generate`, `run`, `report`, `inspect`.
//!
//! Exit codes: 0 success, 2 input/config/parse errors, 3 numeric failure.
//! Every command is deterministic given its inputs; no environment
//! variable affects numerics.

use crate::adapt::{AdapterMode, Strategy, StrategyConfig, StrategyKind};
use crate::dataio::{generate, Dataset, SyntheticSpec, DEFAULT_TEMPLATE};
use crate::encoder::{checkpoint_from_bytes, save_checkpoint, DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::harness::{
    make_splits, mean_std, run_continual, ContinualConfig, ControlEval, SeedOutcome,
};
use crate::select::SelectionPlan;
use crate::train::{train_session, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "lorsu", version, about = "Structured sparse fine-tuning testbed for a toy CLIP-style encoder")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image-caption dataset file.
    Generate(GenerateArgs),
    /// Run a continual-learning experiment and write results.
    Run(RunArgs),
    /// Merge results files into one comparison table.
    Report(ReportArgs),
    /// Print a summary of a dataset or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Samples rendered per class.
    #[arg(long = "shots", alias = "samples-per-class", default_value_t = 30)]
    shots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    /// First class descriptor index; disjoint datasets use disjoint offsets.
    #[arg(long, default_value_t = 0)]
    class_offset: usize,
    /// Caption template with a {} placeholder.
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    /// Target dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Control dataset file (repeatable).
    #[arg(long = "control")]
    controls: Vec<PathBuf>,
    /// Dataset used to pretrain the reference model (optional).
    #[arg(long)]
    pretrain: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    top_k_heads: Option<usize>,
    #[arg(long)]
    fc1_sparsity: Option<f64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    spu_sparsity: Option<f64>,
    #[arg(long)]
    ewc_lambda: Option<f64>,
    /// forward (default), grad, or per-head.
    #[arg(long)]
    adapter_mode: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    pretrain_shots: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results JSON files produced by `run`.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Optional path for the merged table; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
}

// ── Run configuration ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: String,
    pub data: String,
    pub controls: Vec<String>,
    pub pretrain: Option<String>,
    pub out: String,
    pub shots: usize,
    pub sessions: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub rank: usize,
    pub top_k_heads: usize,
    pub fc1_sparsity: f64,
    pub lora_rank: usize,
    pub spu_sparsity: f64,
    pub ewc_lambda: f64,
    pub adapter_mode: String,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_shots: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: "lorsu".into(),
            data: String::new(),
            controls: Vec::new(),
            pretrain: None,
            out: "out".into(),
            shots: 5,
            sessions: 5,
            epochs: 20,
            batch: 16,
            lr: 1e-5,
            seeds: vec![1, 2, 3],
            rank: 4,
            top_k_heads: 2,
            fc1_sparsity: 0.10,
            lora_rank: 2,
            spu_sparsity: 0.15,
            ewc_lambda: 100.0,
            adapter_mode: "forward".into(),
            pretrain_epochs: 0,
            pretrain_lr: 1e-3,
            pretrain_shots: 20,
            dim: 64,
            heads: 8,
            blocks: 4,
            ff_dim: 256,
            patch_size: 4,
            embed_dim: 64,
        }
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Input(format!("config line {} is not key=value: '{line}'", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

macro_rules! cfg_field {
    ($cfg:expr, $map:expr, $args:expr, $field:ident, $key:literal) => {
        if let Some(v) = $map.get($key) {
            $cfg.$field = v.parse().map_err(|_| {
                Error::Input(format!(concat!("config field '", $key, "': cannot parse '{}'"), v))
            })?;
        }
        if let Some(v) = &$args.$field {
            $cfg.$field = v.clone().into();
        }
    };
}

impl RunConfig {
    fn resolve(args: &RunArgs) -> Result<Self> {
        let map = match &args.config {
            Some(p) => parse_config_file(p)?,
            None => BTreeMap::new(),
        };
        let mut cfg = RunConfig::default();
        cfg_field!(cfg, map, args, strategy, "strategy");
        cfg_field!(cfg, map, args, shots, "shots");
        cfg_field!(cfg, map, args, sessions, "sessions");
        cfg_field!(cfg, map, args, epochs, "epochs");
        cfg_field!(cfg, map, args, batch, "batch");
        cfg_field!(cfg, map, args, lr, "lr");
        cfg_field!(cfg, map, args, rank, "rank");
        cfg_field!(cfg, map, args, top_k_heads, "top_k_heads");
        cfg_field!(cfg, map, args, fc1_sparsity, "fc1_sparsity");
        cfg_field!(cfg, map, args, lora_rank, "lora_rank");
        cfg_field!(cfg, map, args, spu_sparsity, "spu_sparsity");
        cfg_field!(cfg, map, args, ewc_lambda, "ewc_lambda");
        cfg_field!(cfg, map, args, adapter_mode, "adapter_mode");
        cfg_field!(cfg, map, args, pretrain_epochs, "pretrain_epochs");
        cfg_field!(cfg, map, args, pretrain_lr, "pretrain_lr");
        cfg_field!(cfg, map, args, pretrain_shots, "pretrain_shots");
        cfg_field!(cfg, map, args, dim, "dim");
        cfg_field!(cfg, map, args, heads, "heads");
        cfg_field!(cfg, map, args, blocks, "blocks");
        cfg_field!(cfg, map, args, ff_dim, "ff_dim");
        cfg_field!(cfg, map, args, patch_size, "patch_size");
        cfg_field!(cfg, map, args, embed_dim, "embed_dim");

        if let Some(v) = map.get("data") {
            cfg.data = v.clone();
        }
        if let Some(v) = &args.data {
            cfg.data = v.display().to_string();
        }
        if let Some(v) = map.get("controls") {
            cfg.controls = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        if !args.controls.is_empty() {
            cfg.controls = args.controls.iter().map(|p| p.display().to_string()).collect();
        }
        if let Some(v) = map.get("pretrain") {
            cfg.pretrain = Some(v.clone());
        }
        if let Some(v) = &args.pretrain {
            cfg.pretrain = Some(v.display().to_string());
        }
        if let Some(v) = map.get("out") {
            cfg.out = v.clone();
        }
        if let Some(v) = &args.out {
            cfg.out = v.display().to_string();
        }
        if let Some(v) = map.get("seeds") {
            cfg.seeds = parse_seeds(v)?;
        }
        if let Some(v) = &args.seeds {
            cfg.seeds = parse_seeds(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        StrategyKind::parse(&self.strategy)?;
        parse_adapter_mode(&self.adapter_mode)?;
        if self.data.is_empty() {
            return Err(Error::Input("field 'data': no target dataset given".into()));
        }
        if !Path::new(&self.data).exists() {
            return Err(Error::Input(format!("field 'data': file '{}' does not exist", self.data)));
        }
        for c in &self.controls {
            if !Path::new(c).exists() {
                return Err(Error::Input(format!("field 'controls': file '{c}' does not exist")));
            }
        }
        if let Some(p) = &self.pretrain {
            if !Path::new(p).exists() {
                return Err(Error::Input(format!("field 'pretrain': file '{p}' does not exist")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Input("field 'seeds': at least one seed required".into()));
        }
        if self.sessions == 0 {
            return Err(Error::Input("field 'sessions': must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Input("field 'shots': must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Input("field 'batch': must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("field 'lr': {} out of range", self.lr)));
        }
        if !(self.fc1_sparsity > 0.0 && self.fc1_sparsity <= 1.0) {
            return Err(Error::Input(format!(
                "field 'fc1_sparsity': {} outside (0, 1]",
                self.fc1_sparsity
            )));
        }
        if !(self.spu_sparsity > 0.0 && self.spu_sparsity <= 1.0) {
            return Err(Error::Input(format!(
                "field 'spu_sparsity': {} outside (0, 1]",
                self.spu_sparsity
            )));
        }
        Ok(())
    }

    fn strategy_config(&self) -> Result<StrategyConfig> {
        let mut sc = StrategyConfig::new(StrategyKind::parse(&self.strategy)?);
        sc.rank = self.rank;
        sc.top_k_heads = self.top_k_heads;
        sc.fc1_sparsity = self.fc1_sparsity;
        sc.lora_rank = self.lora_rank;
        sc.spu_sparsity = self.spu_sparsity;
        sc.ewc_lambda = self.ewc_lambda;
        sc.adapter_mode = parse_adapter_mode(&self.adapter_mode)?;
        Ok(sc)
    }

    fn encoder_config(&self, ds: &Dataset) -> Result<EncoderConfig> {
        if self.dim % self.heads != 0 {
            return Err(Error::Input(format!(
                "field 'dim': {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        let cfg = EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            head_dim: self.dim / self.heads,
            blocks: self.blocks,
            ff_dim: self.ff_dim,
            patch_size: self.patch_size,
            image_size: ds.image_size,
            channels: ds.channels,
            vocab_size: ds.vocab_size(),
            max_tokens: ds.max_tokens,
            embed_dim: self.embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Input(format!("field 'seeds': cannot parse '{p}'")))
        })
        .collect()
}

fn parse_adapter_mode(s: &str) -> Result<AdapterMode> {
    match s {
        "forward" => Ok(AdapterMode::ForwardMasked),
        "grad" => Ok(AdapterMode::GradMasked),
        "per-head" => Ok(AdapterMode::PerHead),
        other => Err(Error::Input(format!(
            "field 'adapter_mode': '{other}' (expected forward|grad|per-head)"
        ))),
    }
}

// ── Results schema ───────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub ti_mean: f64,
    pub ti_std: f64,
    pub cc_mean: Option<f64>,
    pub cc_std: Option<f64>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunResults {
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub trainable_count: usize,
    pub per_seed: Vec<SeedOutcome>,
    pub summary: Summary,
}

fn summarize(outcomes: &[SeedOutcome]) -> Summary {
    let ti: Vec<f64> = outcomes.iter().map(|o| o.ti).collect();
    let acc: Vec<f64> = outcomes.iter().map(|o| o.acc).collect();
    let (ti_mean, ti_std) = mean_std(&ti);
    let (acc_mean, acc_std) = mean_std(&acc);
    let cc: Vec<f64> = outcomes.iter().filter_map(|o| o.cc).collect();
    let bwt: Vec<f64> = outcomes.iter().filter_map(|o| o.bwt).collect();
    let (cc_mean, cc_std) = if cc.len() == outcomes.len() {
        let (m, s) = mean_std(&cc);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let (bwt_mean, bwt_std) = if bwt.len() == outcomes.len() {
        let (m, s) = mean_std(&bwt);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Summary { ti_mean, ti_std, cc_mean, cc_std, acc_mean, acc_std, bwt_mean, bwt_std }
}

// ── Commands ─────────────────────────────────────────────────────────

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        samples_per_class: args.shots,
        image_size: args.image_size,
        noise_std: args.noise_std,
        seed: args.seed,
        class_offset: args.class_offset,
        template: args.template.clone(),
    };
    let ds = generate(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    ds.save(&args.out)?;
    println!(
        "wrote {}: {} classes x {} samples, {}x{}x{} pixels, vocab {}",
        args.out.display(),
        ds.num_classes(),
        args.shots,
        ds.channels,
        ds.image_size,
        ds.image_size,
        ds.vocab_size()
    );
    Ok(())
}

/// Shared vocabulary check: one model embeds prompts from every dataset.
fn check_vocab_compatible(target: &Dataset, other: &Dataset, name: &str) -> Result<()> {
    if target.vocab != other.vocab || target.max_tokens != other.max_tokens {
        return Err(Error::Input(format!(
            "dataset '{name}' has an incompatible vocabulary; regenerate with the same template"
        )));
    }
    if target.image_size != other.image_size || target.channels != other.channels {
        return Err(Error::Input(format!(
            "dataset '{name}' has incompatible image dimensions"
        )));
    }
    Ok(())
}

struct LoadedData {
    target: Dataset,
    controls: Vec<(String, Dataset)>,
    pretrain: Option<(String, Dataset)>,
}

fn load_datasets(cfg: &RunConfig) -> Result<LoadedData> {
    let target = Dataset::load(Path::new(&cfg.data))?;
    let mut controls = Vec::new();
    for c in &cfg.controls {
        let ds = Dataset::load(Path::new(c))?;
        check_vocab_compatible(&target, &ds, c)?;
        controls.push((c.clone(), ds));
    }
    let pretrain = match &cfg.pretrain {
        Some(p) => {
            let ds = Dataset::load(Path::new(p))?;
            check_vocab_compatible(&target, &ds, p)?;
            Some((p.clone(), ds))
        }
        None => None,
    };
    Ok(LoadedData { target, controls, pretrain })
}

/// Per-class pretraining refs (first `shots` of each class in stored
/// order) and the complementary held-out refs.
fn pretrain_partition(ds: &Dataset, shots: usize) -> (Vec<usize>, Vec<usize>) {
    let mut taken = vec![0usize; ds.num_classes()];
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if taken[s.class as usize] < shots {
            taken[s.class as usize] += 1;
            train.push(i);
        } else {
            held.push(i);
        }
    }
    (train, held)
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunResults> {
    let data = load_datasets(cfg)?;
    let enc_cfg = cfg.encoder_config(&data.target)?;
    let sc = cfg.strategy_config()?;
    let out_dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out_dir)?;

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut model = DualEncoder::new(enc_cfg.clone(), seed)?;

        // Optional pretraining stage: establishes the reference model whose
        // accuracies the zero-shot row records.
        if let (Some((ppath, pds)), true) = (&data.pretrain, cfg.pretrain_epochs > 0) {
            let (train_refs, _) = pretrain_partition(pds, cfg.pretrain_shots);
            let samples: Vec<_> = train_refs.iter().map(|&i| &pds.samples[i]).collect();
            let mut fft = Strategy::new(StrategyConfig::new(StrategyKind::Fft));
            let tc = TrainConfig {
                epochs: cfg.pretrain_epochs,
                batch_size: cfg.batch,
                peak_lr: cfg.pretrain_lr,
                min_lr: 0.0,
                seed: seed.wrapping_add(0x9e37),
            };
            train_session(&mut model, &mut fft, &samples, &tc)?;
            let _ = ppath;
        }

        let controls: Vec<ControlEval> = data
            .controls
            .iter()
            .map(|(name, ds)| {
                let held_out = match &data.pretrain {
                    Some((ppath, _)) if ppath == name && cfg.pretrain_epochs > 0 => {
                        pretrain_partition(ds, cfg.pretrain_shots).1
                    }
                    _ => (0..ds.samples.len()).collect(),
                };
                ControlEval { name: name.clone(), dataset: ds.clone(), eval_refs: held_out }
            })
            .collect();

        let splits = make_splits(&data.target, cfg.sessions, cfg.shots, seed)?;
        let mut strategy = Strategy::new(sc.clone());
        let ccfg = ContinualConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch,
            peak_lr: cfg.lr,
            seed,
        };
        let outcome = run_continual(&mut model, &mut strategy, &data.target, &splits, &controls, &ccfg)?;

        // Session log (JSON lines) and checkpoint per seed.
        let mut log = String::new();
        let mut last_plan: Option<SelectionPlan> = None;
        for (t, sl) in outcome.session_logs.iter().enumerate() {
            for e in &sl.epochs {
                let line = serde_json::json!({
                    "session": t + 1,
                    "epoch": e.epoch,
                    "mean_loss": e.mean_loss,
                    "lr": e.lr,
                    "wall_ms": e.wall_ms,
                });
                log.push_str(&line.to_string());
                log.push('\n');
            }
            if let Some(p) = &sl.plan {
                last_plan = Some(p.clone());
            }
        }
        std::fs::write(out_dir.join(format!("session_log_seed{seed}.jsonl")), log)?;
        save_checkpoint(
            &model,
            last_plan.as_ref(),
            &out_dir.join(format!("model_seed{seed}.lsck")),
        )?;

        per_seed.push(outcome);
    }

    let strategy = Strategy::new(sc);
    let results = RunResults {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        trainable_count: strategy.trainable_count(&enc_cfg),
        summary: summarize(&per_seed),
        per_seed,
    };
    Ok(results)
}

fn format_signed(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:+8.2}"),
        None => format!("{:>8}", "-"),
    }
}

pub fn results_table(rows: &[&RunResults]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "method", "TI", "CC", "ACC", "BWT", "params"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8.3} {:>8} {:>10}\n",
            r.config.strategy,
            format!("{:+.2}", r.summary.ti_mean),
            format_signed(r.summary.cc_mean),
            r.summary.acc_mean,
            format_signed(r.summary.bwt_mean),
            r.trainable_count
        ));
    }
    out
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let results = run_experiment(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out);
    let json = serde_json::to_string_pretty(&results)?;
    std::fs::write(out_dir.join("results.json"), &json)?;
    let table = results_table(&[&results]);
    std::fs::write(out_dir.join("results.txt"), &table)?;
    println!("{table}");
    println!(
        "TI {:+.2} CC {} ACC {:.3} BWT {} -> {}",
        results.summary.ti_mean,
        format_signed(results.summary.cc_mean).trim(),
        results.summary.acc_mean,
        format_signed(results.summary.bwt_mean).trim(),
        out_dir.join("results.json").display()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut loaded: Vec<RunResults> = Vec::new();
    for p in &args.results {
        let text = std::fs::read_to_string(p)?;
        let r: RunResults = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?;
        // Recompute metrics from the stored matrices; stored values must match.
        for seed in &r.per_seed {
            seed.matrix.validate()?;
            let ti = crate::harness::metric_ti(seed.matrix.final_target, seed.matrix.zero_shot_target);
            if (ti - seed.ti).abs() > 1e-9 {
                return Err(Error::Schema(format!(
                    "{}: stored TI {} disagrees with recomputed {ti}",
                    p.display(),
                    seed.ti
                )));
            }
            if !seed.matrix.final_controls.is_empty() {
                let cc = crate::harness::metric_cc(
                    &seed.matrix.final_controls,
                    &seed.matrix.zero_shot_controls,
                )?;
                if (cc - seed.cc.unwrap_or(f64::NAN)).abs() > 1e-9 {
                    return Err(Error::Schema(format!(
                        "{}: stored CC {:?} disagrees with recomputed {cc}",
                        p.display(),
                        seed.cc
                    )));
                }
            }
            if seed.matrix.r.len() >= 2 {
                let (acc, bwt) = crate::harness::metric_acc_bwt(&seed.matrix.r)?;
                if (acc - seed.acc).abs() > 1e-9 || (bwt - seed.bwt.unwrap_or(f64::NAN)).abs() > 1e-9
                {
                    return Err(Error::Schema(format!(
                        "{}: stored ACC/BWT disagree with recomputation",
                        p.display()
                    )));
                }
            }
        }
        loaded.push(r);
    }
    loaded.sort_by(|a, b| {
        a.config
            .strategy
            .cmp(&b.config.strategy)
            .then(a.config.data.cmp(&b.config.data))
    });
    let refs: Vec<&RunResults> = loaded.iter().collect();
    let table = results_table(&refs);
    match &args.out {
        Some(p) => std::fs::write(p, &table)?,
        None => print!("{table}"),
    }
    if args.out.is_some() {
        print!("{table}");
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&args.file)?;
    if bytes.len() >= 4 && bytes[..4] == crate::dataio::DATASET_MAGIC {
        let ds = Dataset::from_bytes(&bytes)?;
        println!("dataset {}", args.file.display());
        println!("  image: {}x{}x{}", ds.channels, ds.image_size, ds.image_size);
        println!("  classes: {}", ds.num_classes());
        for (i, c) in ds.class_captions.iter().enumerate() {
            let n = ds.samples.iter().filter(|s| s.class as usize == i).count();
            println!("    {i}: '{c}' ({n} samples)");
        }
        println!("  samples: {}", ds.samples.len());
        println!("  vocab: {} words, max_tokens {}", ds.vocab_size(), ds.max_tokens);
        println!("  template: '{}'", ds.template);
        return Ok(());
    }
    if bytes.len() >= 4 && bytes[..4] == crate::encoder::CHECKPOINT_MAGIC {
        let (model, plan) = checkpoint_from_bytes(&bytes)?;
        let c = &model.config;
        println!("checkpoint {}", args.file.display());
        println!(
            "  model: dim {} heads {} blocks {} ff {} image {}x{} embed {}",
            c.dim, c.heads, c.blocks, c.ff_dim, c.image_size, c.image_size, c.embed_dim
        );
        println!("  parameters: {} tensors", model.store.len());
        println!("  temperature: {:.4}", model.temperature);
        match plan {
            Some(p) => print!("{}", p.report()),
            None => println!("  no selection plan embedded"),
        }
        return Ok(());
    }
    Err(Error::Input(format!(
        "{}: not a dataset or checkpoint file",
        args.file.display()
    )))
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
