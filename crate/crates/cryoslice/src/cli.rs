//! Command-line driver: `simulate`, `train`, `eval` and `project`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data mismatch,
//! 3 numerical failure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cryoslice_core::metrics::{self, MetricsError, DEFAULT_FSC_THRESHOLD};
use cryoslice_core::physics::{CtfParams, Decoder, DecoderConfig, ImagingParams, OpticsConfig, Volume};
use cryoslice_core::sim::{self, ParticleStack, Scale, SimError};
use cryoslice_core::so3::{self, HeadKind, RotationMatrix, UnitQuaternion};
use cryoslice_core::training::{TrainError, TrainMode, Trainer};

use crate::config::{ConfigError, RunConfig};
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::tables::{self, Report, TableError};
use crate::{fsio, mrc, weights};

pub const STACK_FILE: &str = "particles.mrcs";
pub const METADATA_FILE: &str = "metadata.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.mrc";
pub const CONFIG_FILE: &str = "config.json";
pub const VOLUME_FILE: &str = "volume.mrc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POSES_FILE: &str = "poses.csv";
pub const ENCODER_FILE: &str = "encoder.json";
pub const POSE_TABLE_FILE: &str = "pose_table.json";
pub const SNAPSHOT_FILE: &str = "snapshot_volume.mrc";
pub const FSC_FILE: &str = "fsc.csv";
pub const REPORT_FILE: &str = "report.csv";

/// Relative tolerance between a header pixel size (float32) and a config.
const PIXEL_SIZE_RTOL: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Mismatch(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Mismatch(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Mismatch(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        match e {
            TableError::Io(e) => CliError::Usage(e.to_string()),
            TableError::Schema(e) => CliError::Mismatch(format!("schema mismatch: {e}")),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

fn mrc_err(path: &Path) -> impl Fn(mrc::MrcError) -> CliError + '_ {
    move |e| match e {
        mrc::MrcError::Io(e) => CliError::Usage(format!("{}: {e}", path.display())),
        other => CliError::Mismatch(format!("{}: {other}", path.display())),
    }
}

fn metrics_err(e: MetricsError) -> CliError {
    match e {
        MetricsError::GridMismatch { .. } | MetricsError::PixelSizeMismatch { .. } | MetricsError::EmptySplit => {
            CliError::Mismatch(e.to_string())
        }
        other => CliError::Numerical(other.to_string()),
    }
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::InvalidPhantom(_) | SimError::InvalidDataset(_) => CliError::Usage(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Encoder(_) => CliError::Usage(e.to_string()),
        TrainError::EmptyTrainingSplit => CliError::Mismatch(e.to_string()),
        TrainError::Metrics(m) => metrics_err(m),
        other => CliError::Numerical(other.to_string()),
    }
}

#[derive(Parser, Debug)]
#[command(name = "cryoslice", version, about = "Simulate, reconstruct and evaluate single-particle datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a particle stack, its metadata and the ground-truth volume.
    Simulate(SimulateArgs),
    /// Reconstruct a volume (and poses) from a simulated or external dataset.
    Train(TrainArgs),
    /// Compare a volume with a reference, and optionally two pose sets.
    Eval(EvalArgs),
    /// Render one noiseless projection of a volume.
    Project(ProjectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Learned,
    Tomo,
    Rawad,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadArg {
    Euler,
    Quaternion,
    S2s2,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Shipped preset, tableA through tableG.
    #[arg(long)]
    pub preset: Option<String>,
    /// Problem size of `--preset`.
    #[arg(long, value_enum, default_value = "desk", requires = "preset")]
    pub scale: ScaleArg,
}

impl ConfigArgs {
    fn load(&self, fallback: Option<&Path>) -> Result<(RunConfig, Option<PathBuf>), CliError> {
        if let Some(name) = &self.preset {
            return Ok((RunConfig::named_preset(name, self.scale.into())?, None));
        }
        let path = match (&self.config, fallback) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) if f.exists() => f.to_path_buf(),
            _ => return Err(CliError::Usage("a run configuration is required: pass --config or --preset".into())),
        };
        Ok((RunConfig::load(&path)?, Some(path)))
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`, or one with the same files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to the dataset's own config.json.
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Replaces the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Estimated and ground-truth pose tables (metadata tables are accepted).
    #[arg(long, num_args = 2, value_names = ["EST", "GT"])]
    pub poses: Option<Vec<PathBuf>>,
    /// Pose errors use rows from this index on, e.g. the first test image.
    #[arg(long, default_value_t = 0, requires = "poses")]
    pub from_index: usize,
    /// Skip the rigid alignment of the volume onto the reference.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long, default_value_t = DEFAULT_FSC_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Unit quaternion `q1,q2,q3,q4`, scalar first.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: String,
    /// `d1_um,d2_um,alpha_rad`.
    #[arg(long)]
    pub defocus: Option<String>,
    /// Padding factor applied before the CTF.
    #[arg(long, default_value_t = 1)]
    pub ctf_pad: usize,
    /// Output image file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Parses `argv` and runs the command, reporting errors on stderr.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Project(a) => project(&a),
    }
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| CliError::Usage("an output directory is required: pass --out".into()))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let path = dir.join(CONFIG_FILE);
    fsio::write_atomic(&path, cfg.to_json().as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

fn finish(dir: &Path, mut manifest: Manifest, outputs: &[PathBuf]) -> Result<(), CliError> {
    for p in outputs {
        manifest.output(p).map_err(io_err(p))?;
    }
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path).map_err(io_err(&path))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let (mut cfg, _) = a.config.load(None)?;
    if let Some(seed) = a.seed {
        cfg.dataset.seed = seed;
    }
    let dir = out_dir(&a.out, &cfg)?;
    fsio::claim_dir(&dir, a.force).map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = cfg.phantom_spec();
    let vol = sim::make_phantom(&spec).map_err(sim_err)?;
    let stack = sim::generate_dataset(&vol, &cfg.dataset, &cfg.optics).map_err(sim_err)?;
    let n = stack.n;
    let files = [dir.join(STACK_FILE), dir.join(METADATA_FILE), dir.join(GROUND_TRUTH_FILE)];
    mrc::write_stack(&files[0], n, stack.len(), stack.pixel_size, &stack.images).map_err(io_err(&files[0]))?;
    tables::write_metadata(&files[1], &stack.meta).map_err(io_err(&files[1]))?;
    mrc::write_volume(&files[2], n, vol.pixel_size(), vol.data()).map_err(io_err(&files[2]))?;
    let config_path = write_config(&dir, &cfg)?;
    let mut m = Manifest::new("simulate");
    m.config_sha256 = Some(cfg.hash());
    m.seed = Some(cfg.dataset.seed);
    let mut outputs = files.to_vec();
    outputs.push(config_path);
    finish(&dir, m, &outputs)?;
    eprintln!("wrote {} images of {n}x{n} to {}", stack.len(), dir.display());
    Ok(())
}

fn check_pixel_size(found: f64, expected: f64, what: &Path) -> Result<(), CliError> {
    if ((found - expected) / expected).abs() > PIXEL_SIZE_RTOL {
        return Err(CliError::Mismatch(format!(
            "{}: pixel size {found} differs from optics.pixel_size {expected}",
            what.display()
        )));
    }
    Ok(())
}

/// Stack, metadata and (when present) ground truth of a dataset directory.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<(ParticleStack, Option<Volume>), CliError> {
    let stack_path = dir.join(STACK_FILE);
    let images = mrc::read(&stack_path).map_err(mrc_err(&stack_path))?;
    let h = &images.header;
    if h.nx != h.ny {
        return Err(CliError::Mismatch(format!("{}: images are {} x {}, not square", stack_path.display(), h.nx, h.ny)));
    }
    if !h.nx.is_power_of_two() {
        return Err(CliError::Mismatch(format!("{}: image side {} is not a power of two", stack_path.display(), h.nx)));
    }
    if h.nx != cfg.dataset.n {
        return Err(CliError::Mismatch(format!(
            "{}: image side {} but dataset.n = {}",
            stack_path.display(),
            h.nx,
            cfg.dataset.n
        )));
    }
    check_pixel_size(h.pixel_size(), cfg.optics.pixel_size, &stack_path)?;
    let meta_path = dir.join(METADATA_FILE);
    let meta = tables::read_metadata(&meta_path)?;
    if meta.len() != h.nz {
        return Err(CliError::Mismatch(format!(
            "{} has {} rows but {} holds {} images",
            meta_path.display(),
            meta.len(),
            stack_path.display(),
            h.nz
        )));
    }
    let n = h.nx;
    let n_train = ((meta.len() as f64) * cfg.dataset.train_fraction).round() as usize;
    let stack = ParticleStack { n, pixel_size: cfg.optics.pixel_size, images: images.data, meta, n_train };
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let reference = if gt_path.exists() {
        let (gn, px, data) = mrc::read_volume(&gt_path).map_err(mrc_err(&gt_path))?;
        if gn != n {
            return Err(CliError::Mismatch(format!("{}: volume side {gn} but images are {n} wide", gt_path.display())));
        }
        check_pixel_size(px, cfg.optics.pixel_size, &gt_path)?;
        let v = Volume::new(n, cfg.optics.pixel_size, data)
            .map_err(|e| CliError::Mismatch(format!("{}: {e}", gt_path.display())))?;
        Some(v)
    } else {
        None
    };
    Ok((stack, reference))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let fallback = a.data.as_ref().map(|d| d.join(CONFIG_FILE));
    let (mut cfg, _) = a.config.load(fallback.as_deref())?;
    let data = a
        .data
        .clone()
        .or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| CliError::Usage("a dataset directory is required: pass --data".into()))?;
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Learned => TrainMode::Learned,
            ModeArg::Tomo => TrainMode::Tomo,
            ModeArg::Rawad => TrainMode::Rawad,
        };
    }
    if let Some(h) = a.head {
        cfg.train.head = match h {
            HeadArg::Euler => HeadKind::Euler,
            HeadArg::Quaternion => HeadKind::Quaternion,
            HeadArg::S2s2 => HeadKind::S2s2,
        };
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(e) = a.eval_interval {
        cfg.train.eval_interval = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let dir = out_dir(&a.out, &cfg)?;
    fsio::claim_dir(&dir, a.force).map_err(|e| CliError::Usage(e.to_string()))?;
    let (stack, reference) = load_dataset(&data, &cfg)?;
    let trainer = Trainer::new(&stack, cfg.train.clone(), cfg.optics).map_err(train_err)?;
    let state = trainer.init_state().map_err(train_err)?;
    let outcome = trainer.run(state, reference.as_ref(), |_, row| {
        if let Some(r) = row {
            let res = r.fsc_resolution.map(|v| format!(" fsc {v:.3}")).unwrap_or_default();
            eprintln!(
                "step {:>6} loss {:.6e} pose {:.2}/{:.2} deg{res}",
                r.step, r.loss, r.pose_mae_raw_deg, r.pose_mae_aligned_deg
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::NonFiniteLoss { step, loss, snapshot, .. }) => {
            let path = dir.join(SNAPSHOT_FILE);
            mrc::write_volume(&path, stack.n, stack.pixel_size, &snapshot.volume).map_err(io_err(&path))?;
            return Err(CliError::Numerical(format!(
                "loss became {loss} at step {step}; the last finite volume is in {}",
                path.display()
            )));
        }
        Err(e) => return Err(train_err(e)),
    };
    let mut outputs = Vec::new();
    let vol_path = dir.join(VOLUME_FILE);
    mrc::write_volume(&vol_path, stack.n, stack.pixel_size, &outcome.state.volume).map_err(io_err(&vol_path))?;
    outputs.push(vol_path);
    let metrics_path = dir.join(METRICS_FILE);
    tables::write_metrics(&metrics_path, &outcome.log).map_err(io_err(&metrics_path))?;
    outputs.push(metrics_path);
    let poses: Vec<UnitQuaternion> =
        trainer.predict_poses(&outcome.state).map_err(train_err)?.iter().map(RotationMatrix::to_quaternion).collect();
    let poses_path = dir.join(POSES_FILE);
    tables::write_poses(&poses_path, &poses).map_err(io_err(&poses_path))?;
    outputs.push(poses_path);
    if let Some(w) = &outcome.state.encoder {
        let p = dir.join(ENCODER_FILE);
        weights::write_encoder(&p, trainer.encoder_config(), w).map_err(io_err(&p))?;
        outputs.push(p);
    }
    if let Some(t) = &outcome.state.poses {
        let p = dir.join(POSE_TABLE_FILE);
        weights::write_pose_table(&p, cfg.train.head, t).map_err(io_err(&p))?;
        outputs.push(p);
    }
    outputs.push(write_config(&dir, &cfg)?);
    let mut m = Manifest::new("train");
    m.config_sha256 = Some(cfg.hash());
    m.seed = Some(cfg.train.seed);
    m.argument("n_train", stack.n_train);
    for (role, file) in [("stack", STACK_FILE), ("metadata", METADATA_FILE), ("ground_truth", GROUND_TRUTH_FILE)] {
        let p = data.join(file);
        if p.exists() {
            m.input(role, &p).map_err(io_err(&p))?;
        }
    }
    finish(&dir, m, &outputs)
}

fn read_volume(path: &Path) -> Result<Volume, CliError> {
    let (n, px, data) = mrc::read_volume(path).map_err(mrc_err(path))?;
    Volume::new(n, px, data).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold {} must lie in (0, 1)", a.threshold)));
    }
    fsio::claim_dir(&a.out, a.force).map_err(|e| CliError::Usage(e.to_string()))?;
    let est = read_volume(&a.volume)?;
    let reference = read_volume(&a.reference)?;
    if est.n() != reference.n() {
        return Err(CliError::Mismatch(format!(
            "{} is {}^3 but {} is {}^3",
            a.volume.display(),
            est.n(),
            a.reference.display(),
            reference.n()
        )));
    }
    check_pixel_size(est.pixel_size(), reference.pixel_size(), &a.volume)?;
    let est = Volume::new(est.n(), reference.pixel_size(), est.into_data()).expect("finite data stays valid");
    let mut m = Manifest::new("eval");
    m.input("volume", &a.volume).map_err(io_err(&a.volume))?;
    m.input("reference", &a.reference).map_err(io_err(&a.reference))?;
    m.argument("threshold", a.threshold);
    m.argument("align", !a.no_align);
    let pose_report = match &a.poses {
        Some(files) => {
            let (ep, gp) = (&files[0], &files[1]);
            let est_q = tables::read_poses(ep)?;
            let gt_q = tables::read_poses(gp)?;
            if est_q.len() != gt_q.len() {
                return Err(CliError::Mismatch(format!(
                    "{} has {} poses but {} has {}",
                    ep.display(),
                    est_q.len(),
                    gp.display(),
                    gt_q.len()
                )));
            }
            if a.from_index >= est_q.len() {
                return Err(CliError::Mismatch(format!("--from-index {} leaves no poses out of {}", a.from_index, est_q.len())));
            }
            let to_r = |q: &[UnitQuaternion]| -> Vec<RotationMatrix> {
                q[a.from_index..].iter().map(so3::quaternion_to_matrix).collect()
            };
            m.input("poses_est", ep).map_err(io_err(ep))?;
            m.input("poses_gt", gp).map_err(io_err(gp))?;
            m.argument("from_index", a.from_index);
            Some(metrics::evaluate_poses(&to_r(&est_q), &to_r(&gt_q)).map_err(metrics_err)?)
        }
        None => None,
    };
    let unaligned = metrics::fsc(&est, &reference).map_err(metrics_err)?;
    let curve = if a.no_align {
        unaligned.clone()
    } else {
        let al = metrics::align_volumes(&est, &reference, pose_report.map(|p| p.gauge)).map_err(metrics_err)?;
        metrics::fsc(&al.volume, &reference).map_err(metrics_err)?
    };
    let report = Report {
        fsc_resolution: curve.resolution(a.threshold),
        fsc_resolution_unaligned: unaligned.resolution(a.threshold),
        pose_mae_raw_deg: pose_report.map(|p| p.raw_mae_deg),
        pose_mae_aligned_deg: pose_report.map(|p| p.aligned_mae_deg),
        gauge_flip: pose_report.map(|p| p.gauge.flip),
    };
    let fsc_path = a.out.join(FSC_FILE);
    tables::write_fsc(&fsc_path, &curve).map_err(io_err(&fsc_path))?;
    let report_path = a.out.join(REPORT_FILE);
    tables::write_report(&report_path, &report).map_err(io_err(&report_path))?;
    finish(&a.out, m, &[fsc_path, report_path])?;
    eprintln!("resolution {} A (unaligned {} A)", report.fsc_resolution, report.fsc_resolution_unaligned);
    Ok(())
}

fn parse_floats<const K: usize>(flag: &str, s: &str) -> Result<[f64; K], CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != K {
        return Err(CliError::Usage(format!("--{flag} expects {K} comma-separated numbers, got `{s}`")));
    }
    let mut out = [0.0; K];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CliError::Usage(format!("--{flag}: `{p}` is not a finite number")))?;
    }
    Ok(out)
}

pub fn project(a: &ProjectArgs) -> Result<(), CliError> {
    let q = parse_floats::<4>("pose", &a.pose)?;
    let q = UnitQuaternion::new(q).map_err(|e| CliError::Usage(format!("--pose: {e}")))?;
    let ctf = match &a.defocus {
        Some(s) => {
            let [d1_um, d2_um, alpha_rad] = parse_floats::<3>("defocus", s)?;
            let c = CtfParams { d1_um, d2_um, alpha_rad };
            c.validate().map_err(|e| CliError::Usage(format!("--defocus: {e}")))?;
            Some(c)
        }
        None => None,
    };
    if a.ctf_pad == 0 {
        return Err(CliError::Usage("--ctf-pad must be at least 1".into()));
    }
    fsio::claim_file(&a.out, a.force).map_err(|e| CliError::Usage(e.to_string()))?;
    let vol = read_volume(&a.volume)?;
    let optics = OpticsConfig { pixel_size: vol.pixel_size(), ..OpticsConfig::default() };
    let config = DecoderConfig { ctf_pad: a.ctf_pad, ..DecoderConfig::default() };
    let dec = Decoder::new(vol.n(), config, optics).map_err(|e| CliError::Usage(e.to_string()))?;
    let params = ImagingParams { ctf, ..ImagingParams::from_rotation(so3::quaternion_to_matrix(&q)) };
    let img = dec.forward_project(&vol, &params);
    if !img.iter().all(|v| v.is_finite()) {
        return Err(CliError::Numerical("projection is not finite".into()));
    }
    let n = vol.n();
    fsio::write_atomic(&a.out, &mrc::encode(n, n, 1, vol.pixel_size(), 0, &img)).map_err(io_err(&a.out))
}
