//! Command-line interface. Parsing is done by clap; every command is a
//! function writing its report to a caller-supplied stream so the binary
//! stays a thin wrapper.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand25d_core::geometry::{mip_project, sum_project};
use rand25d_core::metrics::{evaluate, threshold_mask};
use rand25d_core::par;
use rand25d_core::phantom::{generate_phantom, PhantomSpec};
use rand25d_core::pipeline::{
    cross_validate, train_val_split, CrossValidation, ModelKind, Random25DLearner, Sample,
    TrainConfig, Trainer,
};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
use crate::config::{
    apply_overrides, apply_train_file, load_phantom_spec, parse_dims, phantom_spec_lines,
    train_config_lines,
};
use crate::dataset::{load_dataset, write_index, INDEX_FILE};
use crate::error::{Error, Result};
use crate::pgm::export_image;
use crate::volume_io::{load_volume, save_volume, VolumeKind};

#[derive(Debug, Parser)]
#[command(
    name = "rand25d",
    version,
    about = "Random 2.5D U-net for sparse volumetric segmentation"
)]
pub struct Cli {
    /// Run independent work (projections, slices, folds) on all cores.
    #[arg(long, global = true)]
    pub parallel: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic vessel-phantom dataset.
    Phantom(PhantomArgs),
    /// Write projections of a volume as PGM images.
    Project(ProjectArgs),
    /// Train the random 2.5D model.
    Train(TrainArgs),
    /// Segment a scan with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a prediction against a ground-truth mask.
    Eval(EvalArgs),
    /// Cross-validate the random 2.5D and slice-by-slice models.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Extents as AxBxC; overrides the spec file.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub spec_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProjectionMode {
    Mip,
    Sum,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated angles in degrees, each in [0, 180).
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_angle)]
    pub angles: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ProjectionMode::Mip)]
    pub mode: ProjectionMode,
    /// Clamp to [0, 1] instead of min-max normalising.
    #[arg(long)]
    pub clamp: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset index file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override `key=value`; repeatable.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Probability or mask volume.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_angle(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..180.0).contains(&a) {
        return Err(format!("angle {a} outside [0, 180)"));
    }
    Ok(a)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    par::set_parallel(cli.parallel);
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a, out),
        Command::Project(a) => cmd_project(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|source| Error::Io {
            path: "<stdout>".into(),
            source,
        })
}

fn echo(out: &mut dyn Write, command: &str, lines: &[(&str, String)]) -> Result<()> {
    let mut s = format!("# command={command}\n");
    for (k, v) in lines {
        s.push_str(&format!("# {k}={v}\n"));
    }
    say(out, s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

pub fn cmd_phantom(a: &PhantomArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &a.spec_file {
        Some(p) => load_phantom_spec(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(d) = a.dims {
        spec.dims = d;
    }
    spec.validate()?;
    let mut lines = vec![("n", a.n.to_string()), ("seed", a.seed.to_string())];
    lines.extend(phantom_spec_lines(&spec));
    echo(out, "phantom", &lines)?;
    create_dir(&a.out_dir)?;
    let mut pairs = Vec::new();
    for i in 0..a.n {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(i);
        let (scan, mask) = generate_phantom(&spec, &mut rng)?;
        let (s, m) = (
            format!("phantom_{i:03}_scan.vol"),
            format!("phantom_{i:03}_mask.vol"),
        );
        save_volume(&a.out_dir.join(&s), &scan, VolumeKind::Scan)?;
        save_volume(&a.out_dir.join(&m), &mask, VolumeKind::Mask)?;
        let labeled = mask.data().iter().filter(|&&v| v == 1.0).count();
        say(
            out,
            format!(
                "{s} {m} labeled_fraction={:.6}\n",
                labeled as f64 / mask.len() as f64
            ),
        )?;
        pairs.push((s, m));
    }
    write_index(&a.out_dir.join(INDEX_FILE), &pairs)
}

pub fn cmd_project(a: &ProjectArgs, out: &mut dyn Write) -> Result<()> {
    let mode = match a.mode {
        ProjectionMode::Mip => "mip",
        ProjectionMode::Sum => "sum",
    };
    let angles = a
        .angles
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",");
    echo(
        out,
        "project",
        &[
            ("in", a.input.display().to_string()),
            ("angles", angles),
            ("mode", mode.into()),
            (
                "scaling",
                if a.clamp { "clamp" } else { "normalize" }.into(),
            ),
        ],
    )?;
    let (vol, _) = load_volume(&a.input)?;
    create_dir(&a.out_dir)?;
    for &alpha in &a.angles {
        let img = match a.mode {
            ProjectionMode::Mip => mip_project(&vol, alpha),
            ProjectionMode::Sum => sum_project(&vol, alpha),
        };
        let name = format!("{mode}_{alpha}.pgm");
        export_image(&a.out_dir.join(&name), &img, !a.clamp)?;
        say(out, format!("{name}\n"))?;
    }
    Ok(())
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
fn resolve_config(
    file: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = file {
        apply_train_file(p, &mut cfg)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Seeded shuffle of the dataset followed by the train/validation split.
pub fn split_dataset(data: Vec<Sample>, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let (tr, va) = train_val_split(&idx)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| data[i].clone()).collect();
    Ok((pick(&tr), pick(&va)))
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train.log";

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), a.seed, &a.overrides)?;
    let mut lines = vec![("data", a.data.display().to_string())];
    if let Some(r) = &a.resume {
        lines.push(("resume", r.display().to_string()));
    }
    lines.extend(train_config_lines(&cfg));
    echo(out, "train", &lines)?;

    let (train, val) = split_dataset(load_dataset(&a.data)?, cfg.seed)?;
    let mut trainer = match &a.resume {
        Some(p) => load_checkpoint_for(p, &cfg)?.into_trainer()?,
        None => Trainer::new(
            Random25DLearner::new(rand25d_core::pipeline::Model25D::from_config(&cfg)?)?,
            cfg,
        )?,
    };
    create_dir(&a.out_dir)?;
    let log_path = a.out_dir.join(TRAIN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    while !trainer.is_done() {
        let r = trainer.run_epoch(&train, &val)?;
        let line = format!(
            "epoch={} c={} lr={} train_loss={} val_loss={}\n",
            r.epoch, r.c, r.lr, r.train_loss, r.val_loss
        );
        log.write_all(line.as_bytes())
            .map_err(Error::io(&log_path))?;
        save_checkpoint(
            &a.out_dir.join(LAST_CHECKPOINT),
            &Checkpoint::from_trainer(&trainer),
        )?;
        say(out, line)?;
    }
    let cfg = trainer.cfg.clone();
    let (learner, state, _) = trainer.finish();
    let best = Checkpoint {
        cfg,
        model: learner.model.clone(),
        best: learner.model,
        adam: learner.adam,
        state,
    };
    save_checkpoint(&a.out_dir.join(BEST_CHECKPOINT), &best)?;
    say(
        out,
        format!(
            "best_epoch={} best_val_loss={}\n",
            best.state.best_epoch, best.state.best_val
        ),
    )
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut lines = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        ("in", a.input.display().to_string()),
    ];
    lines.extend(train_config_lines(&ck.cfg));
    echo(out, "predict", &lines)?;
    let (scan, kind) = load_volume(&a.input)?;
    if kind != VolumeKind::Scan {
        return Err(Error::format(
            &a.input,
            0,
            format!("expected a scan volume, found {}", kind.as_str()),
        ));
    }
    let model = if ck.state.best_epoch > 0 {
        &ck.best
    } else {
        &ck.model
    };
    let prob = model.predict(&scan)?;
    create_dir(&a.out_dir)?;
    save_volume(&a.out_dir.join("prob.vol"), &prob, VolumeKind::Prob)?;
    save_volume(
        &a.out_dir.join("mask.vol"),
        &threshold_mask(&prob),
        VolumeKind::Mask,
    )?;
    say(out, "prob.vol\nmask.vol\n")
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    echo(
        out,
        "eval",
        &[
            ("pred", a.pred.display().to_string()),
            ("truth", a.truth.display().to_string()),
        ],
    )?;
    let (pred, pk) = load_volume(&a.pred)?;
    let (truth, tk) = load_volume(&a.truth)?;
    if tk != VolumeKind::Mask {
        return Err(Error::format(
            &a.truth,
            0,
            format!("expected a mask volume, found {}", tk.as_str()),
        ));
    }
    let pred = match pk {
        VolumeKind::Prob => threshold_mask(&pred),
        VolumeKind::Mask => pred,
        VolumeKind::Scan => {
            return Err(Error::format(
                &a.pred,
                0,
                "expected a prob or mask volume, found scan",
            ));
        }
    };
    say(out, evaluate(&truth, &pred)?.to_record())
}

/// One row per model: mean and sample std of MA, IU and DC over folds.
pub fn compare_table(results: &[CrossValidation]) -> String {
    let mut s = format!(
        "{:<16}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
        "model", "ma_mean", "ma_std", "iu_mean", "iu_std", "dc_mean", "dc_std"
    );
    for r in results {
        let m = &r.summary;
        s.push_str(&format!(
            "{:<16}{:>10.6}{:>10.6}{:>10.6}{:>10.6}{:>10.6}{:>10.6}\n",
            r.kind.name(),
            m.ma.mean,
            m.ma.std,
            m.iu.mean,
            m.iu.std,
            m.dc.mean,
            m.dc.std
        ));
    }
    s
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), a.seed, &a.overrides)?;
    if let Some(f) = a.folds {
        cfg.folds = f;
        cfg.validate()?;
    }
    let mut lines = vec![("data", a.data.display().to_string())];
    lines.extend(train_config_lines(&cfg));
    echo(out, "compare", &lines)?;
    let data = load_dataset(&a.data)?;
    let mut results = Vec::new();
    for kind in [ModelKind::Random25D, ModelKind::SliceBySlice] {
        let cv = cross_validate(&data, &cfg, kind)?;
        for f in &cv.folds {
            say(
                out,
                format!(
                    "fold={} model={} epochs={} ma={:.6} iu={:.6} dc={:.6} dice_loss={:.6}\n",
                    f.fold,
                    kind.name(),
                    f.epochs,
                    f.report.ma,
                    f.report.iu,
                    f.report.dc,
                    f.dice_loss
                ),
            )?;
        }
        results.push(cv);
    }
    let table = compare_table(&results);
    if let Some(p) = &a.out {
        std::fs::write(p, &table).map_err(Error::io(p))?;
    }
    say(out, table)
}
