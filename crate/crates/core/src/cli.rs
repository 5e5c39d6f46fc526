//! Command-line front end: argument parsing, run manifests and the six
//! subcommands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::SPATIAL_MULTIPLE;
use crate::config::{ExperimentConfig, PhantomConfig};
use crate::data::{
    load_case, normalize_case, read_label_volume, read_manifest, save_case, write_label_volume, write_manifest,
    LabelPolicy, Modality, MultiModalCase, TumorRegion,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, summarize, RegionReport};
use crate::model::{Model, Variant};
use crate::plot::{write_activation_maps, write_overlays};
use crate::report::write_report;
use crate::tensor::Tensor;
use crate::training::{
    center_window, load_checkpoint, predict_labels, sliding_window, StepRecord, TrainState, Trainer,
};
use crate::verify::{self, Suite, VerifyOptions};

/// Source digest embedded at build time.
pub const SOURCE_FINGERPRINT: &str = env!("PROTOSEG_SOURCE_FINGERPRINT");
pub const MANIFEST_NAME: &str = "run_manifest.json";
pub const DATASET_MANIFEST: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "protoseg", version, about = "Multi-modal brain tumour segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic phantom dataset in the BraTS layout.
    GenPhantoms(GenArgs),
    /// Train a model on a case directory.
    Train(TrainArgs),
    /// Score predictions against labels per region.
    Evaluate(EvalArgs),
    /// Predict label volumes for unlabelled cases.
    Segment(SegmentArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
    /// Render mid-slice overlays and activation heatmaps.
    PlotSlices(PlotArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// TOML file with [model], [train], [loss] and [phantom] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Cubic grid extent.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (with manifest.txt or one case per subdirectory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many optimiser steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// `full` or `baseline`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub validate_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Validation dataset; the training cases are used when absent.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// One forward and backward pass; prints the loss breakdown and shapes.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with_all = ["identity", "predictions"])]
    pub checkpoint: Option<PathBuf>,
    /// Score the labels against themselves.
    #[arg(long, conflicts_with = "predictions")]
    pub identity: bool,
    /// Directory of `<case_id>.nii.gz` label volumes to score as they are.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Flip test-time augmentation.
    #[arg(long)]
    pub tta: bool,
    /// Sliding-window extent; defaults to the training crop.
    #[arg(long)]
    pub window: Option<usize>,
    /// HD95 value when exactly one mask is empty; grid diagonal by default.
    #[arg(long)]
    pub penalty: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tta: bool,
    #[arg(long)]
    pub window: Option<usize>,
    /// Also write the 12 prototype vectors of each case as JSON.
    #[arg(long)]
    pub dump_prototypes: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Suite to run (repeatable); all when absent.
    #[arg(long = "suite")]
    pub suites: Vec<String>,
    /// Sabotage the backward rule of the named operation.
    #[arg(long)]
    pub inject_fault: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the manifest and a JSON copy of the results.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Case directory in the BraTS layout.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label volume to overlay; the case's own labels when absent.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// flair, t1ce, t1 or t2.
    #[arg(long, default_value = "flair")]
    pub modality: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also render one heatmap per (modality, region); needs --checkpoint.
    #[arg(long, requires = "checkpoint")]
    pub activations: bool,
    #[arg(long)]
    pub window: Option<usize>,
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub source_fingerprint: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: Option<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn begin(dir: &Path, command: &str, config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let m = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: config.clone(),
            source_fingerprint: SOURCE_FINGERPRINT.to_string(),
            seed,
            started_unix: now(),
            finished_unix: None,
            status: None,
        };
        m.write(dir)?;
        Ok(m)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn finish(mut self, dir: &Path, status: &str) -> Result<()> {
        self.finished_unix = Some(now());
        self.status = Some(status.to_string());
        self.write(dir)
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("E_USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenPhantoms(a) => gen_phantoms(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Segment(a) => segment(&a),
        Command::Verify(a) => run_verify(&a),
        Command::PlotSlices(a) => plot_slices(&a),
    }
    .map(|ok| if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

/// Case directories of a dataset: the manifest when present, else every
/// subdirectory in name order.
pub fn dataset_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join(DATASET_MANIFEST);
    if manifest.exists() {
        return read_manifest(&manifest);
    }
    if !dir.is_dir() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            message: "dataset directory not found".into(),
        });
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            message: "no case directories".into(),
        });
    }
    Ok(dirs)
}

fn load_dataset(dir: &Path, policy: LabelPolicy) -> Result<Vec<MultiModalCase>> {
    dataset_dirs(dir)?
        .iter()
        .map(|d| load_case(d, policy).and_then(|c| normalize_case(&c).map_err(|e| e.with_case(c.case_id.clone()))))
        .collect()
}

fn cube(n: usize) -> [usize; 3] {
    [n; 3]
}

// ---------------------------------------------------------- gen-phantoms

fn gen_phantoms(a: &GenArgs) -> Result<bool> {
    let mut cfg = a.config.load()?;
    let p: &mut PhantomConfig = &mut cfg.phantom;
    if let Some(n) = a.count {
        p.count = n;
    }
    if let Some(s) = a.size {
        p.grid_size = cube(s);
    }
    if let Some(s) = a.seed {
        p.seed = s;
    }
    if a.noise_sigma.is_some() {
        p.noise_sigma = a.noise_sigma;
    }
    if p.grid_size.iter().any(|&n| n % SPATIAL_MULTIPLE != 0) {
        eprintln!(
            "warning: grid {:?} is not a multiple of {SPATIAL_MULTIPLE}; training will crop",
            p.grid_size
        );
    }
    p.spec(0)?;
    let seed = p.seed;
    let manifest = RunManifest::begin(&a.out, "gen-phantoms", &cfg, seed)?;
    let mut entries = Vec::new();
    for case in cfg.phantom.generate()? {
        let dir = a.out.join(&case.case_id);
        save_case(&dir, &case)?;
        entries.push(PathBuf::from(&case.case_id));
    }
    write_manifest(&a.out.join(DATASET_MANIFEST), &entries)?;
    println!("wrote {} cases to {}", entries.len(), a.out.display());
    manifest.finish(&a.out, "ok")?;
    Ok(true)
}

// ----------------------------------------------------------------- train

fn resolve_train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.total_epochs = v;
    }
    if let Some(v) = a.base_channels {
        cfg.model.base_channels = v;
    }
    if let Some(v) = &a.variant {
        cfg.model.variant = match v.as_str() {
            "full" => Variant::Full,
            "baseline" => Variant::Baseline,
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        };
    }
    if a.no_augment {
        cfg.train.augment = false;
    }
    if let Some(v) = a.validate_every {
        cfg.train.validate_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    Ok(cfg)
}

/// Mean of the TC, ET and WT Dice over `cases`, predicted tile by tile.
pub fn validate_model(model: &Model, cases: &[MultiModalCase], window: [usize; 3], tta: bool) -> Result<Vec<RegionReport>> {
    cases
        .iter()
        .map(|c| {
            let truth = c.labels.as_ref().ok_or_else(|| Error::Format {
                path: c.case_id.clone().into(),
                message: "validation case has no labels".into(),
            })?;
            let probs = sliding_window(model, &c.to_tensor(), window, tta)?;
            evaluate_case(&c.case_id, &predict_labels(&probs), truth, [1.0; 3], None)
        })
        .collect()
}

fn mean_dice(reports: &[RegionReport]) -> f64 {
    let s = summarize(reports);
    s.iter().map(|r| r.dice).sum::<f64>() / s.len() as f64
}

fn dry_run(cfg: &ExperimentConfig, cases: &[MultiModalCase]) -> Result<()> {
    let state = TrainState::new(&cfg.model, &cfg.train)?;
    let trainer = Trainer {
        cfg: &cfg.train,
        weights: &cfg.loss,
        cases,
    };
    let mut state = state;
    let batch = trainer.batch_for(&mut state)?;
    let case = &batch[0];
    let labels = case.labels.as_ref().expect("training cases are labelled");
    let mut g = Graph::train(cfg.train.seed);
    let x = g.constant(case.to_tensor());
    let out = state.model.forward(&mut g, x, true)?;
    let loss = state.model.loss(&mut g, &out, labels, &cfg.loss)?;
    let grads = g.backward(loss.total);
    let b = loss.breakdown(&g);
    println!(
        "loss total {:.6} ctp {:.6} share {:.6} expert {:.6} deep {:.6}",
        b.total, b.ctp, b.share, b.expert, b.deep
    );
    let show = |name: String, v| println!("{name:<28} {:?}", g.shape(v));
    show("input".into(), x);
    for (m, enc) in Modality::ALL.iter().zip(&out.modal_levels) {
        for (l, &v) in enc.levels.iter().enumerate() {
            show(format!("encoder.{}.level{}", m.suffix(), l + 1), v);
        }
    }
    if let Some(enc) = &out.extra_levels {
        for (l, &v) in enc.levels.iter().enumerate() {
            show(format!("encoder.concat.level{}", l + 1), v);
        }
    }
    if let Some(c) = &out.ctp {
        for (m, mi) in Modality::ALL.iter().zip(0..) {
            show(format!("ctp.{}.tokens", m.suffix()), c.attended[mi]);
            show(format!("ctp.{}.region_probs", m.suffix()), c.maps[mi].probs);
            for (r, &p) in TumorRegion::ALL.iter().zip(&c.prototypes[mi]) {
                show(format!("ctp.{}.prototype.{}", m.suffix(), r.slug()), p);
            }
        }
    }
    if let Some(p) = &out.pfrf {
        for (m, mi) in Modality::ALL.iter().zip(0..) {
            for (r, &a) in TumorRegion::ALL.iter().zip(&p.activations[mi]) {
                show(format!("pfrf.{}.activation.{}", m.suffix(), r.slug()), a);
            }
            show(format!("pfrf.{}.assembled", m.suffix()), p.modal[mi]);
        }
        show("pfrf.fused".into(), p.fused);
    }
    if let Some(k) = &out.kiimi {
        for (l, (&m, &f)) in k.maps.iter().zip(&k.integrated).enumerate() {
            show(format!("kiimi.level{}.expert_map", l + 1), m);
            show(format!("kiimi.level{}.integrated", l + 1), f);
        }
    }
    for (i, &v) in out.seg_blocks.iter().enumerate() {
        show(format!("decoder.block{}", i + 1), v);
    }
    for (i, &v) in out.share.iter().enumerate() {
        show(format!("shared_decoder.branch{}", i + 1), v);
    }
    show("output".into(), out.output);
    let with_grad = grads.params().count();
    println!(
        "parameters {} in {} tensors, {} with gradients",
        state.model.parameter_count(),
        state.model.store.len(),
        with_grad
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<bool> {
    let mut cfg = resolve_train_config(a)?;
    cfg.validate()?;
    let cases = load_dataset(&a.data, LabelPolicy::Require)?;
    let per_epoch = cases.len().div_ceil(cfg.train.batch_size) as u64;
    // The schedule depends only on the command line, so a resumed run with
    // the same flags continues the same schedule.
    if let (Some(steps), None) = (a.steps, a.epochs) {
        cfg.train.total_epochs = steps.div_ceil(per_epoch).max(1);
    }
    let manifest = RunManifest::begin(&a.out, if a.dry_run { "train --dry-run" } else { "train" }, &cfg, cfg.train.seed)?;
    if a.dry_run {
        dry_run(&cfg, &cases)?;
        manifest.finish(&a.out, "ok")?;
        return Ok(true);
    }
    let val_cases = match &a.val_data {
        Some(d) => load_dataset(d, LabelPolicy::Require)?,
        None => cases.clone(),
    };
    let mut state = match &a.resume {
        Some(p) => load_checkpoint(p, Some(&cfg.model))?,
        None => TrainState::new(&cfg.model, &cfg.train)?,
    };
    let total = a.steps.unwrap_or(cfg.train.total_epochs * per_epoch);
    let remaining = total.saturating_sub(state.step);
    let window = cfg.train.crop;
    let trainer = Trainer {
        cfg: &cfg.train,
        weights: &cfg.loss,
        cases: &cases,
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(a.out.join("train_log.jsonl"))?;
    let mut best = f64::NEG_INFINITY;
    let started = Instant::now();
    let mut validate = |state: &TrainState, log: &mut fs::File| -> Result<()> {
        let reports = validate_model(&state.model, &val_cases, window, false)?;
        let score = mean_dice(&reports);
        let rec = serde_json::json!({"kind": "validation", "step": state.step, "mean_dice": score, "regions": summarize(&reports)});
        writeln!(log, "{rec}")?;
        println!("step {} validation mean dice {score:.4}", state.step);
        if score > best {
            best = score;
            state.save(&a.out.join("best.ckpt"))?;
        }
        Ok(())
    };
    let every = cfg.train.validate_every;
    let ckpt_every = cfg.train.checkpoint_every;
    trainer.run(&mut state, remaining, |s, r: &StepRecord| {
        let mut rec = serde_json::to_value(r)?;
        rec["kind"] = "step".into();
        writeln!(log, "{rec}")?;
        if s.step % 10 == 0 || s.step == 1 {
            println!(
                "step {} epoch {} lr {:.3e} loss {:.4} ({:.1}s)",
                s.step,
                s.epoch,
                r.lr,
                r.loss.total,
                started.elapsed().as_secs_f64()
            );
        }
        if ckpt_every > 0 && s.step % ckpt_every == 0 {
            s.save(&a.out.join("last.ckpt"))?;
        }
        if every > 0 && s.step % every == 0 && s.step < total {
            validate(s, &mut log)?;
        }
        Ok(())
    })?;
    state.save(&a.out.join("final.ckpt"))?;
    validate(&state, &mut log)?;
    manifest.finish(&a.out, "ok")?;
    Ok(true)
}

// -------------------------------------------------------------- evaluate

fn model_from(path: &Path, cfg: &ConfigArg) -> Result<Model> {
    let expected = match &cfg.config {
        Some(_) => Some(cfg.load()?.model),
        None => None,
    };
    Ok(load_checkpoint(path, expected.as_ref())?.model)
}

fn window_of(flag: Option<usize>, cfg: &ExperimentConfig) -> [usize; 3] {
    flag.map_or(cfg.train.crop, cube)
}

fn evaluate(a: &EvalArgs) -> Result<bool> {
    let mut cfg = a.config.load()?;
    cfg.train.tta_enabled = a.tta;
    if a.checkpoint.is_none() && !a.identity && a.predictions.is_none() {
        return Err(Error::Config("one of --checkpoint, --identity or --predictions is required".into()));
    }
    let manifest = RunManifest::begin(&a.out, "evaluate", &cfg, cfg.train.seed)?;
    let cases = load_dataset(&a.data, LabelPolicy::Require)?;
    let model = match &a.checkpoint {
        Some(p) => Some(model_from(p, &a.config)?),
        None => None,
    };
    let window = window_of(a.window, &cfg);
    let mut reports = Vec::with_capacity(cases.len());
    for c in &cases {
        let truth = c.labels.as_ref().expect("required labels");
        let pred = if let Some(m) = &model {
            predict_labels(&sliding_window(m, &c.to_tensor(), window, a.tta)?)
        } else if let Some(dir) = &a.predictions {
            read_label_volume(&dir.join(format!("{}.nii.gz", c.case_id))).map_err(|e| e.with_case(c.case_id.clone()))?
        } else {
            truth.clone()
        };
        reports.push(evaluate_case(&c.case_id, &pred, truth, [1.0; 3], a.penalty).map_err(|e| e.with_case(c.case_id.clone()))?);
    }
    let rows = write_report(&a.out, &reports)?;
    for r in &rows {
        println!("{:<16} {:<3} dice {:.4} hd95 {:.4}", r.case_id, r.region, r.dice, r.hd95);
    }
    manifest.finish(&a.out, "ok")?;
    Ok(true)
}

// --------------------------------------------------------------- segment

#[derive(Serialize)]
struct PrototypeDump {
    case_id: String,
    /// modality suffix -> region slug -> vector
    prototypes: Vec<(String, Vec<(String, Vec<f64>)>)>,
}

fn forward_center(model: &Model, case: &MultiModalCase, window: [usize; 3]) -> Result<(Graph, crate::model::ForwardOutputs)> {
    let x = center_window(&case.to_tensor(), window);
    let mut g = Graph::eval();
    let v = g.constant(x);
    let out = model.forward(&mut g, v, false)?;
    Ok((g, out))
}

fn segment(a: &SegmentArgs) -> Result<bool> {
    let cfg = a.config.load()?;
    let manifest = RunManifest::begin(&a.out, "segment", &cfg, cfg.train.seed)?;
    let model = model_from(&a.checkpoint, &a.config)?;
    let window = window_of(a.window, &cfg);
    let cases = load_dataset(&a.data, LabelPolicy::Optional)?;
    for c in &cases {
        let probs = sliding_window(&model, &c.to_tensor(), window, a.tta)?;
        let labels = predict_labels(&probs);
        write_label_volume(&a.out.join(format!("{}.nii.gz", c.case_id)), &labels)?;
        if a.dump_prototypes {
            let (g, out) = forward_center(&model, c, window)?;
            let ctp = out
                .ctp
                .as_ref()
                .ok_or_else(|| Error::Config("the baseline variant has no prototypes".into()))?;
            let dump = PrototypeDump {
                case_id: c.case_id.clone(),
                prototypes: Modality::ALL
                    .iter()
                    .zip(&ctp.prototypes)
                    .map(|(m, row)| {
                        let regions = TumorRegion::ALL
                            .iter()
                            .zip(row)
                            .map(|(r, &p)| (r.slug().to_string(), g.value(p).data().to_vec()))
                            .collect();
                        (m.suffix().to_string(), regions)
                    })
                    .collect(),
            };
            fs::write(
                a.out.join(format!("{}_prototypes.json", c.case_id)),
                serde_json::to_string_pretty(&dump)?,
            )?;
        }
        println!("{}: {:?}", c.case_id, labels.dims);
    }
    manifest.finish(&a.out, "ok")?;
    Ok(true)
}

// ---------------------------------------------------------------- verify

fn run_verify(a: &VerifyArgs) -> Result<bool> {
    let suites = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|s| s.parse()).collect::<Result<Vec<Suite>>>()?
    };
    let manifest = match &a.out {
        Some(dir) => Some(RunManifest::begin(dir, "verify", &ExperimentConfig::default(), a.seed)?),
        None => None,
    };
    let opts = VerifyOptions {
        suites,
        fault: a.inject_fault.clone(),
        instances: a.instances,
        configs: a.configs,
        seed: a.seed,
    };
    let results = verify::run(&opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}", r.suite, r.name))
        .collect();
    println!("{} checks, {} failed", results.len(), failed.len());
    if let (Some(dir), Some(m)) = (&a.out, manifest) {
        fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&results)?)?;
        m.finish(dir, if failed.is_empty() { "ok" } else { "failed" })?;
    }
    if failed.is_empty() {
        Ok(true)
    } else {
        Err(Error::Verification(failed.join(", ")))
    }
}

// ----------------------------------------------------------- plot-slices

fn plot_slices(a: &PlotArgs) -> Result<bool> {
    let cfg = ExperimentConfig::default();
    let manifest = RunManifest::begin(&a.out, "plot-slices", &cfg, 0)?;
    let modality = Modality::ALL
        .into_iter()
        .find(|m| m.suffix() == a.modality)
        .ok_or_else(|| Error::Config(format!("unknown modality {:?}", a.modality)))?;
    let case = load_case(&a.case, LabelPolicy::Optional)?;
    let labels = match &a.labels {
        Some(p) => Some(read_label_volume(p)?),
        None => case.labels.clone(),
    };
    let base = &case.volume(modality).voxels;
    let mut written = write_overlays(&a.out, &case.case_id, base, labels.as_ref())?;
    if a.activations {
        let ckpt = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
        let model = load_checkpoint(ckpt, None)?.model;
        let norm = normalize_case(&case)?;
        let (g, out) = forward_center(&model, &norm, window_of(a.window, &cfg))?;
        let pfrf = out
            .pfrf
            .as_ref()
            .ok_or_else(|| Error::Config("the baseline variant has no activation maps".into()))?;
        let maps: Vec<Vec<Tensor>> = pfrf
            .activations
            .iter()
            .map(|row| row.iter().map(|&v| g.value(v).clone()).collect())
            .collect();
        written.extend(write_activation_maps(&a.out, &case.case_id, &maps)?);
    }
    for p in &written {
        println!("{}", p.display());
    }
    manifest.finish(&a.out, "ok")?;
    Ok(true)
}
