//! Implementations behind the `fgsb` subcommands.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fgsb_core::config::{self, RunConfig};
use fgsb_core::dataset::{self, SlicePair};
use fgsb_core::inference::{self, InferenceConfig};
use fgsb_core::metrics::{self, SliceMetrics};
use fgsb_core::phantom::{self, PhantomConfig, LESION_THRESHOLD};
use fgsb_core::slice_io;
use fgsb_core::trainer::{self, CheckpointHeader, StepRecord, TrainState};
use fgsb_core::{Error, Result};
use ndarray::Array2;

use crate::plot::{self, Series};

fn check_device(device: &str) -> Result<()> {
    if device == "cpu" {
        Ok(())
    } else {
        Err(Error::Config(format!("device `{device}` is not available in this build (only `cpu`)")))
    }
}

fn check_canvas((h, w): (usize, usize)) -> Result<()> {
    if h != w {
        return Err(Error::Config(format!("dataset canvas {h}x{w} must be square")));
    }
    if h % 4 != 0 {
        return Err(Error::Config(format!(
            "dataset canvas {h} must be divisible by 4 (two stride-2 stages)"
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json_text<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Data(format!("serialize json: {e}")))
}

// ── make-phantom ───────────────────────────────────────────────────────────

#[derive(Debug, clap::Args)]
pub struct MakePhantomArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Subjects to generate; roughly one in five becomes the test split.
    #[arg(long, default_value_t = PhantomConfig::default().subjects)]
    pub subjects: usize,
    /// Slices per subject before foreground filtering.
    #[arg(long, default_value_t = PhantomConfig::default().slices_per_subject)]
    pub slices: usize,
    /// Square canvas size in pixels.
    #[arg(long, default_value_t = PhantomConfig::default().canvas)]
    pub canvas: usize,
    /// Probability that a slice carries a lesion.
    #[arg(long, default_value_t = PhantomConfig::default().lesion_rate)]
    pub lesion_rate: f64,
    /// Generation seed.
    #[arg(long, default_value_t = PhantomConfig::default().seed)]
    pub seed: u64,
}

pub fn make_phantom(args: &MakePhantomArgs) -> Result<()> {
    let cfg = PhantomConfig {
        subjects: args.subjects,
        slices_per_subject: args.slices,
        canvas: args.canvas,
        lesion_rate: args.lesion_rate,
        seed: args.seed,
    };
    let manifest = phantom::write_phantom_dataset(&args.out, &cfg)?;
    // Re-load through the normal reader so a broken write fails loudly here.
    let loaded = dataset::load_dataset(&manifest)?;
    println!(
        "wrote {} train / {} test slice pairs at {}x{} -> {}",
        loaded.train.len(),
        loaded.test.len(),
        loaded.canvas.0,
        loaded.canvas.1,
        manifest.display()
    );
    Ok(())
}

// ── train ──────────────────────────────────────────────────────────────────

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the run output directory from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from a checkpoint produced by the same resolved config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Compute device (only `cpu` is built).
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    check_device(&args.device)?;
    let mut cfg = config::load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.data.out_dir = out.clone();
    }
    cfg.validate()?;
    run_training(&cfg, args.resume.as_deref())?;
    Ok(())
}

/// Execute one training run end to end: echo the resolved config, stream
/// per-step records to `metrics.jsonl`, checkpoint on the configured cadence,
/// and render per-epoch loss curves. Returns the latest-checkpoint path.
pub fn run_training(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let json = config::resolved_json(cfg)?;
    let digest = config::config_digest(&json);
    let out_dir = cfg.data.out_dir.clone();
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    write_text(&out_dir.join("config.json"), &to_json_text(&json)?)?;
    write_text(&out_dir.join("config.sha256"), &format!("{digest}\n"))?;

    let dataset = dataset::load_dataset(&cfg.data.manifest)?;
    check_canvas(dataset.canvas)?;

    let mut state = match resume {
        Some(path) => {
            let (header, state) = trainer::load_checkpoint(path)?;
            if header.config_digest != digest {
                return Err(Error::Config(format!(
                    "resume checkpoint was produced by config digest {}, this run resolves to {digest}",
                    header.config_digest
                )));
            }
            state
        }
        None => TrainState::new(&cfg.model, &cfg.bridge, &cfg.train)?,
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        fs::File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let writer = RefCell::new(std::io::BufWriter::new(file));
    // Running (total-loss sum, step count) for the current epoch's log line.
    let epoch_acc = RefCell::new((0.0f64, 0usize));

    let epochs = cfg.train.epochs;
    let every = cfg.train.checkpoint_every;
    let first_epoch = state.next_epoch;
    let latest = out_dir.join("latest.ckpt");
    let started = Instant::now();

    trainer::train(
        &mut state,
        &dataset,
        |rec| {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Data(format!("serialize step record: {e}")))?;
            let mut w = writer.borrow_mut();
            w.write_all(line.as_bytes())
                .and_then(|()| w.write_all(b"\n"))
                .map_err(|e| Error::io(&metrics_path, e))?;
            let mut acc = epoch_acc.borrow_mut();
            acc.0 += rec.total;
            acc.1 += 1;
            Ok(())
        },
        |st, epoch| {
            let done = epoch + 1;
            if done % every == 0 || done == epochs {
                trainer::save_checkpoint(
                    &ckpt_dir.join(format!("epoch_{done:04}.ckpt")),
                    st,
                    &digest,
                    &json,
                )?;
                trainer::save_checkpoint(&latest, st, &digest, &json)?;
            }
            let (sum, n) = std::mem::take(&mut *epoch_acc.borrow_mut());
            let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
            let elapsed = started.elapsed().as_secs_f64();
            let eta = elapsed / (done - first_epoch) as f64 * (epochs - done) as f64;
            eprintln!(
                "epoch {done:4}/{epochs}  mean loss {mean:9.4}  elapsed {elapsed:8.1}s  eta {eta:8.1}s"
            );
            Ok(())
        },
    )?;
    writer.borrow_mut().flush().map_err(|e| Error::io(&metrics_path, e))?;

    plot_loss_curves(&metrics_path, &out_dir.join("loss_curves.png"))?;
    println!("run complete -> {}", out_dir.display());
    println!("  config digest {digest}");
    println!("  latest checkpoint {}", latest.display());
    Ok(latest)
}

/// Chart per-epoch means of every loss term in a step-record stream.
fn plot_loss_curves(metrics_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics_path).map_err(|e| Error::io(metrics_path, e))?;
    // epoch -> (term sums, total sum, step count)
    let mut per_epoch: BTreeMap<usize, (BTreeMap<String, f64>, f64, usize)> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}: bad step record: {e}", metrics_path.display())))?;
        let entry = per_epoch.entry(rec.epoch).or_default();
        for (name, value) in &rec.terms {
            *entry.0.entry(name.clone()).or_default() += value;
        }
        entry.1 += rec.total;
        entry.2 += 1;
    }
    if per_epoch.is_empty() {
        return Err(Error::Data(format!("{}: no step records", metrics_path.display())));
    }

    let names: Vec<String> = per_epoch
        .values()
        .flat_map(|(terms, _, _)| terms.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut series = vec![Series {
        label: "total".into(),
        values: per_epoch.values().map(|&(_, total, n)| total / n as f64).collect(),
    }];
    for name in names {
        series.push(Series {
            values: per_epoch
                .values()
                .map(|(terms, _, n)| terms.get(&name).map_or(f64::NAN, |s| s / *n as f64))
                .collect(),
            label: name,
        });
    }
    plot::line_chart(out, "loss (per-epoch mean)", "epoch", &series, 960, 420)
}

// ── synthesize ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, clap::Args)]
pub struct SynthesizeArgs {
    /// Trained checkpoint (not needed with --identity).
    #[arg(long, required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest supplying the source slices.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Which split to translate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Output directory for `<stem>_pred.fgsb` slices.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the checkpoint's sampling step count.
    #[arg(long)]
    pub nfe: Option<usize>,
    /// Override the checkpoint's transition noise variance.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Override the sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Copy the sources through unchanged (identity baseline).
    #[arg(long, default_value_t = false)]
    pub identity: bool,
    /// Also write preview PNGs next to the slices.
    #[arg(long, default_value_t = false)]
    pub png: bool,
    /// Compute device (only `cpu` is built).
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

fn slice_stem(pair: &SlicePair) -> String {
    format!("{}_{:04}", pair.subject_id, pair.slice_index)
}

fn inference_config_from(header: &CheckpointHeader) -> Result<InferenceConfig> {
    InferenceConfig::from_run_json(&header.config_json)
        .map_err(|e| Error::Checkpoint(format!("{e} (in checkpoint)")))
}

pub fn synthesize(args: &SynthesizeArgs) -> Result<()> {
    check_device(&args.device)?;
    let dataset = dataset::load_dataset(&args.manifest)?;
    check_canvas(dataset.canvas)?;
    let pairs: Vec<&SlicePair> = match args.split {
        SplitArg::Train => dataset.train.iter().collect(),
        SplitArg::Test => dataset.test.iter().collect(),
        SplitArg::All => dataset.train.iter().chain(dataset.test.iter()).collect(),
    };
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} has no slices in the requested split",
            args.manifest.display()
        )));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let preds: Vec<Array2<f32>> = if args.identity {
        pairs.iter().map(|p| p.source.clone()).collect()
    } else {
        let ckpt_path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("--checkpoint is required unless --identity".into()))?;
        let (header, state) = trainer::load_checkpoint(ckpt_path)?;
        let mut icfg = inference_config_from(&header)?;
        if let Some(nfe) = args.nfe {
            icfg.nfe = nfe;
        }
        if let Some(tau) = args.tau {
            icfg.tau = tau;
        }
        if let Some(seed) = args.seed {
            icfg.seed = seed;
        }
        icfg.validate()?;
        let sources: Vec<Array2<f32>> = pairs.iter().map(|p| p.source.clone()).collect();
        let out =
            inference::synthesize_stack(&sources, &state.models, &state.store, dataset.canvas.0, &icfg)?;
        eprintln!("sampled {} slices at nfe {} tau {}", out.len(), icfg.nfe, icfg.tau);
        out
    };

    for (pair, pred) in pairs.iter().zip(&preds) {
        let stem = slice_stem(pair);
        slice_io::write_slice(&args.out.join(format!("{stem}_pred.fgsb")), pred)?;
        if args.png {
            slice_io::write_gray_png(&args.out.join(format!("{stem}_pred.png")), pred, -1.0, 1.0)?;
        }
    }
    println!("wrote {} predictions -> {}", preds.len(), args.out.display());
    Ok(())
}

// ── evaluate ───────────────────────────────────────────────────────────────

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Directory of `<stem>_pred.fgsb` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference slices (`<stem>_tgt.fgsb` or `<stem>.fgsb`).
    #[arg(long = "ref")]
    pub ref_dir: PathBuf,
    /// Directory of ground-truth masks (`<stem>_msk.fgsb`); when absent the
    /// truth mask is thresholded from the reference slice.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Intensity threshold separating bright structures for overlap metrics.
    #[arg(long, default_value_t = LESION_THRESHOLD)]
    pub mask_threshold: f32,
    /// Rows in the comparison grid image (0 skips the grid).
    #[arg(long, default_value_t = 4)]
    pub grid_rows: usize,
}

/// One scored slice in the report, keyed by its file stem.
#[derive(serde::Serialize)]
struct EvalRow {
    stem: String,
    #[serde(flatten)]
    metrics: SliceMetrics,
}

/// Stems of every `<stem>_pred.fgsb` under `dir`, sorted.
fn pred_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_pred.fgsb") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

fn read_with_suffixes(dir: &Path, stem: &str, suffixes: &[&str]) -> Result<Array2<f32>> {
    for suffix in suffixes {
        let path = dir.join(format!("{stem}{suffix}"));
        if path.is_file() {
            return slice_io::read_slice(&path);
        }
    }
    Err(Error::Data(format!(
        "no slice for `{stem}` under {} (tried {})",
        dir.display(),
        suffixes.iter().map(|s| format!("{stem}{s}")).collect::<Vec<_>>().join(", ")
    )))
}

fn threshold_mask(img: &Array2<f32>, threshold: f32) -> Array2<u8> {
    img.mapv(|v| u8::from(v >= threshold))
}

/// Numeric (subject, slice) ids parsed from a `<subject>_<index>` stem;
/// non-numeric parts fall back to 0.
fn parse_stem(stem: &str) -> (u32, u32) {
    let (subject, index) = stem.rsplit_once('_').unwrap_or((stem, ""));
    let tail: Vec<char> = subject.chars().rev().take_while(char::is_ascii_digit).collect();
    let subject_id = tail.iter().rev().collect::<String>().parse().unwrap_or(0);
    (subject_id, index.parse().unwrap_or(0))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    if !args.mask_threshold.is_finite() || !(-1.0..=1.0).contains(&args.mask_threshold) {
        return Err(Error::Config(format!(
            "mask threshold {} must lie in [-1, 1]",
            args.mask_threshold
        )));
    }
    let stems = pred_stems(&args.pred)?;
    if stems.is_empty() {
        return Err(Error::Data(format!("no *_pred.fgsb slices under {}", args.pred.display())));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut rows = Vec::new();
    let mut report_rows = Vec::new();
    let mut grid = Vec::new();
    for stem in &stems {
        let pred = slice_io::read_slice(&args.pred.join(format!("{stem}_pred.fgsb")))?;
        let reference = read_with_suffixes(&args.ref_dir, stem, &["_tgt.fgsb", ".fgsb"])?;
        if pred.dim() != reference.dim() {
            return Err(Error::dim(
                format!("slice {stem}"),
                format!("{:?}", reference.dim()),
                format!("{:?}", pred.dim()),
            ));
        }
        let pred_u = metrics::to_unit_range(&pred.mapv(f64::from));
        let ref_u = metrics::to_unit_range(&reference.mapv(f64::from));
        let truth = match &args.masks {
            Some(dir) => {
                threshold_mask(&read_with_suffixes(dir, stem, &["_msk.fgsb", ".fgsb"])?, 0.5)
            }
            None => threshold_mask(&reference, args.mask_threshold),
        };
        let (dice, recall) = metrics::dice_recall(&threshold_mask(&pred, args.mask_threshold), &truth)?;
        let (subject_id, slice_index) = parse_stem(stem);
        let m = SliceMetrics {
            subject_id,
            slice_index,
            psnr: metrics::psnr(&pred_u, &ref_u, 1.0)?,
            ssim: metrics::ssim(&pred_u, &ref_u, 1.0)?,
            nrmse: metrics::nrmse(&pred_u, &ref_u)?,
            dice: Some(dice),
            recall: Some(recall),
        };
        if grid.len() < args.grid_rows {
            let diff = (&pred - &reference).mapv(|v| f64::from(v.abs()) / 2.0);
            grid.push((stem.clone(), vec![pred_u.clone(), ref_u.clone(), diff]));
        }
        rows.push(m.clone());
        report_rows.push(EvalRow { stem: stem.clone(), metrics: m });
    }

    let aggregate = metrics::aggregate(&rows)?;
    let report = serde_json::json!({
        "pred_dir": args.pred.display().to_string(),
        "ref_dir": args.ref_dir.display().to_string(),
        "mask_source": if args.masks.is_some() { "mask-files" } else { "reference-threshold" },
        "mask_threshold": args.mask_threshold,
        "n": rows.len(),
        "aggregate": aggregate,
        "slices": report_rows,
    });
    write_text(&args.out.join("report.json"), &to_json_text(&report)?)?;

    let curve = |label: &str, values: Vec<f64>| Series { label: label.into(), values };
    plot::line_chart(
        &args.out.join("curve_psnr.png"),
        "psnr (db)",
        "slice",
        &[curve("psnr", rows.iter().map(|m| m.psnr).collect())],
        640,
        360,
    )?;
    plot::line_chart(
        &args.out.join("curve_ssim.png"),
        "ssim",
        "slice",
        &[curve("ssim", rows.iter().map(|m| m.ssim).collect())],
        640,
        360,
    )?;
    plot::line_chart(
        &args.out.join("curve_nrmse.png"),
        "nrmse",
        "slice",
        &[curve("nrmse", rows.iter().map(|m| m.nrmse).collect())],
        640,
        360,
    )?;
    plot::line_chart(
        &args.out.join("curve_overlap.png"),
        "lesion overlap",
        "slice",
        &[
            curve("dice", rows.iter().map(|m| m.dice.unwrap_or(f64::NAN)).collect()),
            curve("recall", rows.iter().map(|m| m.recall.unwrap_or(f64::NAN)).collect()),
        ],
        640,
        360,
    )?;
    if !grid.is_empty() {
        plot::comparison_grid(&args.out.join("grid.png"), &["PRED", "REF", "DIFF"], &grid)?;
    }

    println!(
        "n={}  psnr {:.2} +- {:.2} db  ssim {:.4} +- {:.4}  nrmse {:.4} +- {:.4}",
        aggregate.n,
        aggregate.psnr.mean,
        aggregate.psnr.std,
        aggregate.ssim.mean,
        aggregate.ssim.std,
        aggregate.nrmse.mean,
        aggregate.nrmse.std,
    );
    if let (Some(dice), Some(recall)) = (&aggregate.dice, &aggregate.recall) {
        println!(
            "dice {:.4} +- {:.4}  recall {:.4} +- {:.4}",
            dice.mean, dice.std, recall.mean, recall.std
        );
    }
    println!("report -> {}", args.out.join("report.json").display());
    Ok(())
}

// ── ablate ─────────────────────────────────────────────────────────────────

/// The standard side-by-side ablation sweep.
pub const ABLATION_VARIANTS: [&str; 6] = ["full", "no_sb", "no_ssl_d", "no_noise", "nfe1", "nfe3"];

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    /// Base run configuration shared by every variant.
    #[arg(long)]
    pub config: PathBuf,
    /// Parent directory receiving one run directory per variant.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variant subset (default: the standard sweep).
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Compute device (only `cpu` is built).
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

/// Apply one named ablation; sampling settings follow the training-side
/// change so synthesized outputs match what the variant trained.
fn apply_variant(cfg: &mut RunConfig, name: &str) -> Result<()> {
    match name {
        "full" => {}
        "no_sb" => {
            cfg.train.ablation.no_sb = true;
            cfg.inference.nfe = 1;
        }
        "no_ssl_d" => cfg.train.ablation.no_ssl_d = true,
        "no_noise" => {
            cfg.train.ablation.no_noise = true;
            cfg.inference.tau = 0.0;
        }
        "no_prior" => cfg.train.ablation.disable_prior = true,
        "nfe1" => {
            cfg.bridge.nfe = 1;
            cfg.inference.nfe = 1;
        }
        "nfe3" => {
            cfg.bridge.nfe = 3;
            cfg.inference.nfe = 3;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant `{other}` (known: full, no_sb, no_ssl_d, no_noise, no_prior, nfe1, nfe3)"
            )))
        }
    }
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    check_device(&args.device)?;
    let base = config::load_run_config(&args.config)?;
    let names = args
        .variants
        .clone()
        .unwrap_or_else(|| ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect());
    if names.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut summary = Vec::new();
    for name in &names {
        let mut cfg = base.clone();
        apply_variant(&mut cfg, name)?;
        cfg.data.out_dir = args.out.join(name);
        cfg.validate()?;
        eprintln!("── variant `{name}` ──");
        let checkpoint = run_training(&cfg, None)?;
        summary.push(serde_json::json!({
            "variant": name,
            "out_dir": cfg.data.out_dir,
            "checkpoint": checkpoint.display().to_string(),
            "config_digest": config::config_digest(&config::resolved_json(&cfg)?),
        }));
    }
    write_text(&args.out.join("summary.json"), &to_json_text(&summary)?)?;
    println!("{} ablation runs complete -> {}", names.len(), args.out.display());
    Ok(())
}
