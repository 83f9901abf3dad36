//! `rdunet`: synthetic data, training, inference and evaluation.

mod config;
mod overlay;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdunet::data::{
    derive_seed, gen_phantom, load_pair, normalize_minmax, read_image, read_manifest, read_volume,
    resize_image, resize_mask, write_image, write_manifest, write_mask, AugmentConfig, ManifestEntry,
    Volume, VolumePair,
};
use rdunet::engine::{predict_sliding, split_validation, train, with_workers, TrainConfig};
use rdunet::eval::{evaluate, postprocess, sweep, sweep_table, EvalCase, EvalSettings};
use rdunet::losses::{LossConfig, LossKind};
use rdunet::model::{self, ModelConfig};

type CliResult<T> = Result<T, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Parser, Debug)]
#[command(name = "rdunet", version, about = "Recurrent 3D dense U-Net tumor segmentation")]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// File of `key=value` lines mirroring the long flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic phantom patients and a manifest.
    #[command(args_override_self = true)]
    Phantom(PhantomArgs),
    /// Train a model and write the best checkpoint and the epoch log.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Sliding-window inference on one volume or every manifest patient.
    #[command(args_override_self = true)]
    Predict(PredictArgs),
    /// Score saved predictions against the manifest masks.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Score saved predictions over thresholds, with and without dilation.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of patients.
    #[arg(long, default_value_t = 4)]
    patients: usize,
    /// Volume shape as slices,height,width.
    #[arg(long, default_value = "16,64,64", value_parser = parse_shape)]
    shape: [usize; 3],
    /// Tumor count range as min,max.
    #[arg(long, default_value = "1,2", value_parser = parse_pair)]
    tumors: (usize, usize),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    Full,
    Tiny,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest of training patients; a validation share is split off.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for best.ckpt, last.ckpt and train.log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    model_scale: Scale,
    /// bce, tversky (alias dice), focal or iou.
    #[arg(long, default_value = "bce")]
    loss: String,
    /// Tversky false-positive weight; 0.5 is dice.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Focal exponent.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Focal class weight.
    #[arg(long, default_value_t = 0.25)]
    focal_weight: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// Epochs without validation improvement before the rate is halved.
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Random augmentation of training patches.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    augment: bool,
    /// Override the preset's spatial dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Override the preset's batch-norm momentum.
    #[arg(long)]
    bn_momentum: Option<f64>,
    /// Global gradient-norm clipping.
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image volume to segment.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    volume: Option<PathBuf>,
    /// Segment every image of a manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Patient id for --volume; defaults to the file stem.
    #[arg(long)]
    id: Option<String>,
    /// Output directory for <id>_prob.vvol and <id>_pred.vvol.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    /// Dilate the thresholded mask with the radius-3 disk.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    dilate: bool,
    /// Directory for per-slice PGM overlays.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding <id>_prob.vvol for every manifest patient.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    dilate: bool,
    /// Whole-volume dice per patient instead of the slice mean.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    volume_dice: bool,
    /// Also write per-patient scores as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DilateMode {
    True,
    False,
    Both,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9", value_delimiter = ',')]
    thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value = "both")]
    dilate: DilateMode,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    volume_dice: bool,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected slices,height,width".to_string())
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected min,max")?;
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// Every argument of the chosen subcommand, defaults included.
fn print_resolved(cmd: &clap::Command, root: &ArgMatches) {
    let Some((name, sub)) = root.subcommand() else {
        return;
    };
    eprintln!("config: command={name}");
    let Some(sub_cmd) = cmd.find_subcommand(name) else {
        return;
    };
    // global flags are propagated into the subcommand's matches
    let ids = cmd.get_arguments().chain(sub_cmd.get_arguments()).map(|a| a.get_id().as_str());
    for id in ids.filter(|id| !["help", "version"].contains(id)) {
        if let Ok(Some(raw)) = sub.try_get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            eprintln!("config: {id}={}", vals.join(","));
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cmd = Cli::command();
    let args = match config::merge(&cmd, args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let matches = match cmd.clone().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    print_resolved(&cmd, &matches);
    let result = if cli.workers == 0 {
        run(&cli)
    } else {
        with_workers(cli.workers, || run(&cli)).map_err(fail).and_then(|r| r)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Cmd::Phantom(a) => cmd_phantom(a, cli.seed),
        Cmd::Train(a) => cmd_train(a, cli.seed),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))
}

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> CliResult<()> {
    if a.patients == 0 {
        return Err("--patients must be at least 1".into());
    }
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(a.patients);
    for i in 0..a.patients {
        let id = format!("patient{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id, 0));
        let pair = gen_phantom(&mut rng, id.clone(), a.shape, a.tumors.0..=a.tumors.1).map_err(fail)?;
        let image = a.out.join(format!("{id}_image.vvol"));
        let mask = a.out.join(format!("{id}_mask.vvol"));
        write_image(&image, &pair.image).map_err(fail)?;
        write_mask(&mask, &pair.mask).map_err(fail)?;
        entries.push(ManifestEntry { id, image, mask });
    }
    let manifest = a.out.join("manifest.tsv");
    write_manifest(&manifest, &entries).map_err(fail)?;
    println!("wrote {} patients and {}", a.patients, manifest.display());
    Ok(())
}

/// Resizes slices to the model's patch height and width when needed.
fn fit_to_patch(pair: VolumePair, h: usize, w: usize) -> CliResult<VolumePair> {
    let [_, ph, pw] = pair.shape();
    if (ph, pw) == (h, w) {
        return Ok(pair);
    }
    let image = resize_image(&pair.image, h, w).map_err(fail)?;
    let mask = resize_mask(&pair.mask, h, w).map_err(fail)?;
    VolumePair::new(pair.id, image, mask).map_err(fail)
}

fn cmd_train(a: &TrainArgs, seed: u64) -> CliResult<()> {
    let mut model_cfg = match a.model_scale {
        Scale::Full => ModelConfig::full(),
        Scale::Tiny => ModelConfig::tiny(),
    };
    if let Some(d) = a.dropout {
        model_cfg.dropout = d;
    }
    if let Some(m) = a.bn_momentum {
        model_cfg.bn_momentum = m;
    }
    model_cfg.validate().map_err(fail)?;
    let kind: LossKind = a.loss.parse().map_err(fail)?;
    let loss = LossConfig {
        alpha: a.alpha,
        gamma: a.gamma,
        focal_weight: a.focal_weight,
        ..LossConfig::new(kind)
    };
    create_dir(&a.out)?;
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        patience: a.patience,
        loss,
        seed,
        val_fraction: a.val_fraction,
        augment: if a.augment {
            AugmentConfig::default()
        } else {
            AugmentConfig::none()
        },
        clip_norm: a.clip_norm,
        max_steps: a.max_steps,
        checkpoint: Some(a.out.join("best.ckpt")),
        log: Some(a.out.join("train.log")),
        ..TrainConfig::default()
    };
    cfg.validate().map_err(fail)?;
    let entries = read_manifest(&a.manifest).map_err(fail)?;
    let [_, h, w, _] = model_cfg.patch;
    let pairs = entries
        .iter()
        .map(|e| fit_to_patch(load_pair(e).map_err(fail)?, h, w))
        .collect::<CliResult<Vec<_>>>()?;
    let (train_set, val_set) = split_validation(pairs, cfg.val_fraction, seed).map_err(fail)?;
    println!(
        "training on {} patients, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let out = train(&train_set, &val_set, &model_cfg, &cfg).map_err(fail)?;
    model::save(&out.last, a.out.join("last.ckpt")).map_err(fail)?;
    print!("{}", rdunet::engine::format_log(&cfg.loss, &out.epochs));
    println!(
        "best validation dice {:.6} at epoch {}; checkpoint {}",
        out.best_val_dice,
        out.best_epoch,
        a.out.join("best.ckpt").display()
    );
    Ok(())
}

fn default_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_image").map(str::to_string).unwrap_or(stem)
}

fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let params = model::load(&a.checkpoint).map_err(fail)?;
    let settings = EvalSettings {
        threshold: a.threshold,
        dilate: a.dilate,
        volume_dice: false,
    };
    let jobs: Vec<(String, PathBuf)> = match (&a.volume, &a.manifest) {
        (Some(v), _) => vec![(a.id.clone().unwrap_or_else(|| default_id(v)), v.clone())],
        (None, Some(m)) => read_manifest(m)
            .map_err(fail)?
            .into_iter()
            .map(|e| (e.id, e.image))
            .collect(),
        (None, None) => return Err("one of --volume or --manifest is required".into()),
    };
    create_dir(&a.out)?;
    for (id, path) in jobs {
        let image = normalize_minmax(&read_image(&path).map_err(fail)?);
        let prob = predict_sliding(&params, &image).map_err(fail)?;
        let mask = postprocess(&prob, &settings).map_err(fail)?;
        let prob_path = a.out.join(format!("{id}_prob.vvol"));
        let pred_path = a.out.join(format!("{id}_pred.vvol"));
        write_image(&prob_path, &prob).map_err(fail)?;
        write_mask(&pred_path, &mask).map_err(fail)?;
        println!("{id}: {} tumor voxels -> {}", mask.count(), pred_path.display());
        if let Some(dir) = &a.overlay {
            let written = overlay::write_overlays(dir, &id, &image, &mask)?;
            println!("{id}: {} overlays in {}", written.len(), dir.display());
        }
    }
    Ok(())
}

/// Pairs every manifest mask with its saved probability volume. A saved
/// binary mask is accepted in place of probabilities.
fn load_cases(manifest: &Path, pred: &Path) -> CliResult<Vec<EvalCase>> {
    read_manifest(manifest)
        .map_err(fail)?
        .into_iter()
        .map(|e| {
            let path = pred.join(format!("{}_prob.vvol", e.id));
            if !path.exists() {
                return Err(format!("missing prediction for {}: {}", e.id, path.display()));
            }
            let prob = match read_volume(&path).map_err(fail)? {
                Volume::Image(t) => t,
                Volume::Mask(m) => m.to_tensor(),
            };
            let gt = rdunet::data::read_mask(&e.mask).map_err(fail)?;
            Ok(EvalCase { id: e.id, prob, gt })
        })
        .collect()
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let cases = load_cases(&a.manifest, &a.pred)?;
    let settings = EvalSettings {
        threshold: a.threshold,
        dilate: a.dilate,
        volume_dice: a.volume_dice,
    };
    let report = evaluate(&cases, &settings).map_err(fail)?;
    print!("{}", report.to_key_value());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let cases = load_cases(&a.manifest, &a.pred)?;
    let dilations: &[bool] = match a.dilate {
        DilateMode::True => &[true],
        DilateMode::False => &[false],
        DilateMode::Both => &[true, false],
    };
    let mut thresholds = a.thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    let rows = sweep(&cases, &thresholds, dilations, a.volume_dice).map_err(fail)?;
    let table = sweep_table(&rows);
    print!("{table}");
    if let Some(path) = &a.out {
        std::fs::write(path, &table).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}
