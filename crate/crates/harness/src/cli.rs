//! Command-line front end. [`run`] maps every outcome to an exit code:
//! 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nerfattack_core::attack::{low_intensity_attack, patch_attack, AttackConfig, AttackMode};
use nerfattack_core::render::{render_image, RenderConfig, RendererParams};
use nerfattack_core::scene::{
    apply_edit, choose_edit, load_dataset, make_dataset_with, oracle_render, ppm, save_dataset, EditKind, RigConfig,
    SceneEdit,
};
use nerfattack_core::train::{scene_seed, split_scene, train_with, Split, TrainConfig};
use nerfattack_core::Error;
use sha2::{Digest, Sha256};

use crate::artifacts::{read_json, write_json, AttackRecord};
use crate::provenance::Provenance;
use crate::report::report_dir;
use crate::sweep::{run_sweep, RunOptions, SweepKind, SweepResult, SweepSpec};
use crate::{plot, table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "nerfattack", version, about = "Targeted adversarial attacks on a small generalizable NeRF")]
pub struct Cli {
    /// Master seed; every subcommand is deterministic given it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate oracle-rendered multi-view datasets.
    GenScenes(GenScenesArgs),
    /// Train the renderer and write a checkpoint.
    Train(TrainArgs),
    /// Render a target view of a dataset with a checkpoint.
    Render(RenderArgs),
    /// Apply a scene edit and oracle-render the edited target view.
    Edit(EditArgs),
    /// Attack the source views of one dataset.
    Attack(AttackArgs),
    /// Sweep the number of attacked views for several source-view counts.
    SweepViews(SweepArgs),
    /// Sweep the number of patched views for several patch sizes.
    SweepPatch(SweepArgs),
    /// Turn stored sweep and attack results into CSV tables and SVG plots.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenScenesArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Source views per scene.
    #[arg(long = "views", short = 's', default_value_t = 10)]
    pub views: usize,
    #[arg(long, default_value_t = 48)]
    pub resolution: usize,
    #[arg(long, default_value_t = 2)]
    pub min_primitives: usize,
    #[arg(long, default_value_t = 4)]
    pub max_primitives: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint path. The report goes next to it as `<stem>.json` and the
    /// loss curve as `<stem>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Target view index.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON scene edit.
    #[arg(long, conflicts_with = "kind", required_unless_present = "kind")]
    pub edit: Option<PathBuf>,
    /// Pick an edit of this kind automatically; it is saved as
    /// `<out stem>.edit.json`.
    #[arg(long, value_enum)]
    pub kind: Option<EditArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EditArg {
    Modify,
    Delete,
    Add,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    LowIntensity,
    Patch,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Edited target image (PPM).
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value = "low-intensity")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Defaults to 0.001 (low intensity) or 0.05 (patch).
    #[arg(long, allow_negative_numbers = true)]
    pub step_size: Option<f64>,
    #[arg(long, default_value_t = 0.9, allow_negative_numbers = true)]
    pub momentum: f64,
    /// `all` or comma-separated source-view indices.
    #[arg(long, default_value = "all")]
    pub mask: String,
    #[arg(long, default_value_t = 10)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    /// Result JSON; the rendered target goes to `<stem>.ppm`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the adversarial source views here.
    #[arg(long)]
    pub adversarial_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Desk-scale preset (the default).
    #[arg(long, conflicts_with = "full")]
    pub ci: bool,
    /// Full-scale preset: 48x48, 1000 steps, 10 scenes x 10 repeats.
    #[arg(long)]
    pub full: bool,
    /// JSON sweep spec replacing the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Attack iterations per run.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated attacked-view counts (default 1..=S).
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Comma-separated source-view counts (views sweep).
    #[arg(long, value_delimiter = ',')]
    pub s_values: Option<Vec<usize>>,
    /// Comma-separated patch sides (patch sweep).
    #[arg(long, value_delimiter = ',')]
    pub patch_sizes: Option<Vec<usize>>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Keep per-run JSON and PPM files under `<out>/runs`.
    #[arg(long)]
    pub artifacts: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// Defaults to the results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn invalid(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::GenScenes(a) => gen_scenes(a, seed.unwrap_or(0), out),
        Command::Train(a) => train_cmd(a, seed, out, err),
        Command::Render(a) => render_cmd(a, seed.unwrap_or(0), out),
        Command::Edit(a) => edit_cmd(a, seed.unwrap_or(0), out),
        Command::Attack(a) => attack_cmd(a, seed.unwrap_or(0), out),
        Command::SweepViews(a) => sweep_cmd(a, SweepKind::Views, seed, out, err),
        Command::SweepPatch(a) => sweep_cmd(a, SweepKind::Patch, seed, out, err),
        Command::Report(a) => {
            let dest = a.out.clone().unwrap_or_else(|| a.results.clone());
            for p in report_dir(&a.results, &dest, seed)? {
                let _ = writeln!(out, "{}", p.display());
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> std::result::Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn parent_dir(path: &Path) -> std::result::Result<(), Error> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn gen_scenes(a: GenScenesArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    if a.count == 0 || a.views == 0 || a.resolution == 0 {
        return Err(usage("count, views and resolution must be >= 1"));
    }
    if a.min_primitives == 0 || a.min_primitives > a.max_primitives {
        return Err(usage("need 1 <= min-primitives <= max-primitives"));
    }
    let rig = RigConfig { height: a.resolution, width: a.resolution, ..RigConfig::default() };
    for i in 0..a.count {
        let scene = split_scene(seed, Split::Attack, i, (a.min_primitives, a.max_primitives))?;
        let ds = make_dataset_with(&scene, a.views, &rig, scene_seed(seed, Split::Attack, i))?;
        let dir = a.out.join(format!("scene_{i:03}"));
        save_dataset(&ds, &dir)?;
        let _ = writeln!(out, "{}", dir.display());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Format { .. } => invalid(e),
            other => Failure::Runtime(other),
        })?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
        cfg.eval_interval = cfg.eval_interval.min(n.max(1));
    }
    cfg.validate().map_err(invalid)?;
    parent_dir(&a.out)?;
    let every = (cfg.steps / 20).max(1);
    let outcome = train_with(&cfg, |step, loss| {
        if (step + 1) % every == 0 {
            let _ = writeln!(err, "step {} loss {loss:.5}", step + 1);
        }
    })?;
    outcome.params.save(&a.out)?;
    let mut report = outcome.report;
    report.checkpoint = Some(a.out.clone());

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::Runtime(Error::Contract(format!("csv: {e}")));
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in report.loss_curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.16e}")]).map_err(csv_err)?;
    }
    let loss_path = sibling(&a.out, ".loss.csv");
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(Error::Contract(format!("csv: {e}"))))?;
    fs::write(&loss_path, bytes).map_err(|e| Error::Io { path: loss_path.clone(), source: e })?;

    let report_path = sibling(&a.out, ".json");
    let doc = serde_json::json!({
        "provenance": Provenance::new(cfg.seed, &cfg),
        "config": cfg,
        "report": report,
    });
    write_json(&report_path, &doc)?;
    let _ = writeln!(
        out,
        "held-out PSNR {:.2} dB after {} steps ({:.0} s)",
        report.final_psnr, cfg.steps, report.wall_seconds
    );
    let _ = writeln!(out, "{}", a.out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<RendererParams, Error> {
    RendererParams::load(path)
}

fn render_cmd(a: RenderArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    if a.samples == 0 {
        return Err(usage("samples must be >= 1"));
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let t = ds
        .target_views
        .get(a.view)
        .ok_or_else(|| usage(format!("view {} out of range ({} target views)", a.view, ds.target_views.len())))?;
    let cfg = RenderConfig { seed, ..RenderConfig::for_dataset(&ds, a.samples) };
    let img = render_image(&params, &ds.source_views, &t.pose, &t.intrinsics, &cfg)?;
    parent_dir(&a.out)?;
    ppm::write(&a.out, &img)?;
    let _ = writeln!(out, "{}", a.out.display());
    Ok(())
}

fn edit_cmd(a: EditArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let ds = load_dataset(&a.dataset)?;
    let t = &ds.target_views[0];
    let target = (&t.pose, &t.intrinsics);
    let edit: SceneEdit = match (&a.edit, a.kind) {
        (Some(p), _) => read_json(p)?,
        (None, Some(k)) => {
            let kind = match k {
                EditArg::Modify => EditKind::Modify,
                EditArg::Delete => EditKind::Delete,
                EditArg::Add => EditKind::Add,
            };
            let e = choose_edit(&ds.scene, kind, target, seed)?;
            parent_dir(&a.out)?;
            write_json(&sibling(&a.out, ".edit.json"), &e)?;
            e
        }
        (None, None) => return Err(usage("one of --edit or --kind is required")),
    };
    let edited = apply_edit(&ds.scene, &edit, target)?;
    let img = oracle_render(&edited, &t.pose, &t.intrinsics)?;
    parent_dir(&a.out)?;
    ppm::write(&a.out, &img)?;
    let _ = writeln!(out, "{}", a.out.display());
    Ok(())
}

fn parse_mask(spec: &str, s: usize) -> std::result::Result<Vec<bool>, Failure> {
    if spec.trim() == "all" {
        return Ok(vec![true; s]);
    }
    let mut mask = vec![false; s];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let i: usize = part.parse().map_err(|_| usage(format!("bad mask entry {part:?}")))?;
        if i >= s {
            return Err(usage(format!("mask index {i} out of range for {s} source views")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

fn attack_cmd(a: AttackArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    if !(a.epsilon >= 0.0) {
        return Err(usage(format!("epsilon must be >= 0 (got {})", a.epsilon)));
    }
    if !(0.0..1.0).contains(&a.momentum) {
        return Err(usage(format!("momentum must lie in [0, 1) (got {})", a.momentum)));
    }
    if a.step_size.is_some_and(|s| !(s >= 0.0)) {
        return Err(usage("step-size must be >= 0"));
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let target = ppm::read(&a.target)?;
    let mask = parse_mask(&a.mask, ds.source_views.len())?;
    let mut cfg = match a.mode {
        ModeArg::LowIntensity => AttackConfig { epsilon: a.epsilon, ..AttackConfig::low_intensity(mask) },
        ModeArg::Patch => AttackConfig::patch(mask, a.patch_size),
    };
    if let Some(s) = a.step_size {
        cfg.step_size = s;
    }
    cfg.steps = a.steps;
    cfg.momentum_mu = a.momentum;
    cfg.samples_per_ray = a.samples;
    cfg.seed = seed;
    cfg.validate(ds.source_views.len(), ds.height(), ds.width()).map_err(invalid)?;
    let expect = [3, ds.height(), ds.width()];
    if target.shape() != expect {
        return Err(usage(format!("target is {:?} but views are {:?}", target.shape(), expect)));
    }
    let result = match cfg.mode {
        AttackMode::LowIntensity => low_intensity_attack(&params, &ds, &target, &cfg)?,
        AttackMode::Patch => patch_attack(&params, &ds, &target, &cfg)?,
    };
    parent_dir(&a.out)?;
    if let Some(img) = &result.rendered {
        ppm::write(&sibling(&a.out, ".ppm"), img)?;
    }
    if let Some(dir) = &a.adversarial_dir {
        create_dir(dir)?;
        for (i, v) in result.adversarial_views.iter().enumerate() {
            ppm::write(&dir.join(format!("source_{i:03}.ppm")), v)?;
        }
    }
    let scene = a.dataset.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
    let provenance = Provenance::new(seed, &(&cfg, file_sha256(&a.checkpoint)?, file_sha256(&a.target)?));
    let record = AttackRecord { provenance: Some(provenance), scene, repeat: 0, result };
    write_json(&a.out, &record)?;
    let r = &record.result;
    let _ = writeln!(
        out,
        "distance {:.5} -> {:.5} (best iteration {}, {})",
        r.baseline_distance,
        r.final_distance,
        r.best_iteration,
        if r.success { "success" } else { "no success" }
    );
    Ok(())
}

fn file_sha256(path: &Path) -> std::result::Result<String, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn sweep_spec(a: &SweepArgs, kind: SweepKind, seed: Option<u64>) -> std::result::Result<SweepSpec, Failure> {
    let mut spec = match &a.config {
        Some(p) => {
            let s: SweepSpec = read_json(p).map_err(|e| match e {
                Error::Format { .. } => invalid(e),
                other => Failure::Runtime(other),
            })?;
            if s.kind != kind {
                return Err(usage(format!("config is a {} sweep", s.kind.as_str())));
            }
            s
        }
        None if a.full => SweepSpec::full(kind),
        None => SweepSpec::ci(kind),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(v) = a.scenes {
        spec.scenes = v;
    }
    if let Some(v) = a.repeats {
        spec.repeats = v;
    }
    if let Some(v) = a.steps {
        spec.attack.steps = v;
    }
    if let Some(v) = a.resolution {
        spec.resolution = v;
    }
    if let Some(v) = a.samples {
        spec.attack.samples_per_ray = v;
    }
    if let Some(v) = &a.k {
        spec.k_values = Some(v.clone());
    }
    if let Some(v) = &a.s_values {
        spec.s_values = v.clone();
    }
    if let Some(v) = &a.patch_sizes {
        spec.patch_sizes = v.clone();
    }
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

/// Writes `<dir>/<stem>.{json,csv,svg,provenance.json}`.
pub fn write_sweep_outputs(result: &SweepResult, dir: &Path, stem: &str) -> std::result::Result<Vec<PathBuf>, Error> {
    create_dir(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    let prov = dir.join(format!("{stem}.provenance.json"));
    write_json(&json, result)?;
    table::write_csv(result, &csv)?;
    plot::plot_svg(result, &svg)?;
    write_json(&prov, &result.provenance)?;
    Ok(vec![json, csv, svg, prov])
}

fn sweep_cmd(a: SweepArgs, kind: SweepKind, seed: Option<u64>, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let spec = sweep_spec(&a, kind, seed)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let ckpt_hash = file_sha256(&a.checkpoint)?;
    let runs_dir = a.out.join("runs");
    let _ = writeln!(err, "{} attack runs", spec.run_count());
    let progress = |r: &crate::sweep::RunRecord, done: usize, total: usize| {
        eprintln!(
            "[{done}/{total}] series {} k {} scene {} repeat {}: {:.5}",
            r.series, r.k, r.scene, r.repeat, r.final_distance
        );
    };
    let opts = RunOptions {
        threads: a.threads,
        artifacts: a.artifacts.then_some(runs_dir.as_path()),
        progress: Some(&progress),
    };
    let mut result = run_sweep(&spec, &params, &opts)?;
    result.provenance = Some(Provenance::new(spec.seed, &(&spec, ckpt_hash)));
    let stem = format!("sweep_{}", kind.as_str());
    for p in write_sweep_outputs(&result, &a.out, &stem)? {
        let _ = writeln!(out, "{}", p.display());
    }
    Ok(())
}
