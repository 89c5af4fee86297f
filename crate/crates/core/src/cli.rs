//! Command-line surface: generate, train, render, eval. Every command
//! resolves its config (defaults, then file, then flags), persists the
//! resolved config next to its outputs, and is deterministic given it.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::datagen::{build_procedural_scene, generate, load_dataset, load_manifest, DatagenError};
use crate::image::ImageBuf;
use crate::img_io::{read_ppm, write_pfm, write_ppm, ImgIoError};
use crate::losses::LossError;
use crate::metrics::{his_grouped, mse, psnr_from_mse, ssim, std_luminance};
use crate::optimizer::{checkpoint_dir, neutral_color_init, train, TrainError};
use crate::photometric::{form_ldr, render_params_for_eval};
use crate::rasterizer::{render_hdr, RenderOptions};
use crate::scene::{fmt_f64_exact, load_scene, SceneError};

pub const RENDER_MANIFEST_HEADER: &str = "hdrsplat-renders v1";

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ImgIoError> for CliError {
    fn from(e: ImgIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Loss(_) | TrainError::Aborted { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "hdrsplat",
    about = "HDR-consistent Gaussian splatting: dataset generation, training, rendering, evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-exposure dataset.
    Generate(GenerateArgs),
    /// Train appearance and photometric parameters on a dataset.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// Score renders against a dataset's ground-truth split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct ConfigArgs {
    /// Config file (`key = value` lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra overrides as key=value, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set needs key=value, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Exposure preset: iso-const or iso-var.
    #[arg(long)]
    preset: Option<String>,
    /// ISO standard deviation for iso-var.
    #[arg(long)]
    std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// p2gs or ldr-baseline.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "lambda-exp")]
    lambda_exp: Option<f64>,
    /// Checkpoint directory to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directory (as written by train).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View ids to render; default all views in the checkpoint scene.
    #[arg(long = "view")]
    views: Vec<u32>,
    /// Exposure override; default is the mean over training views.
    #[arg(long)]
    e: Option<f64>,
    /// Tone exponent override; default is the mean over training views.
    #[arg(long)]
    gamma: Option<f64>,
    /// Render each view under its own trained exposure and tone exponent
    /// instead of the shared means.
    #[arg(long = "per-view", conflicts_with_all = ["e", "gamma"])]
    per_view: bool,
    /// Also dump linear radiance as PFM.
    #[arg(long)]
    hdr: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset manifest (or its directory); provides the GT split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Render manifest from the render command; default scores the
    /// dataset's own observations.
    #[arg(long)]
    renders: Option<PathBuf>,
    /// Directory for eval.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force e = 1 in the inconsistency score (for exposure-free models).
    #[arg(long = "unit-exposures")]
    unit_exposures: bool,
    /// Two evaluated run directories (easy, hard); emits their PSNR delta.
    #[arg(long, num_args = 2, value_names = ["EASY", "HARD"])]
    compare: Vec<PathBuf>,
}

/// Parse argv and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    init_thread_pool();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// HDRSPLAT_THREADS caps the worker pool; 0 or unset means automatic.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("HDRSPLAT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.txt")
    } else {
        data.to_path_buf()
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    if let Some(preset) = &args.preset {
        let policy = match preset.as_str() {
            "iso-const" => "const",
            "iso-var" => "var",
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset '{other}' (expected iso-const or iso-var)"
                )))
            }
        };
        cfg.set("dataset.policy", policy)?;
    }
    if let Some(std) = args.std {
        cfg.set("dataset.iso_std", &std.to_string())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(n) = args.gaussians {
        cfg.set("dataset.gaussians", &n.to_string())?;
    }
    if let Some(n) = args.frames {
        cfg.set("dataset.frames", &n.to_string())?;
    }
    fs::create_dir_all(&args.out)?;
    let scene = build_procedural_scene(cfg.seed(), cfg.get_usize("dataset.gaussians"));
    let rig = cfg.rig();
    let policy = cfg.exposure_policy();
    let out = generate(&scene, &rig, &policy, &args.out)?;
    cfg.write_resolved(&args.out.join("config.txt"))?;
    if out.front_coverage < 0.9 {
        eprintln!(
            "warning: front-camera coverage {:.3} below 0.9",
            out.front_coverage
        );
    }
    println!(
        "generated {} frames x {} cameras at {}x{} (front coverage {:.3})",
        rig.frame_count,
        rig.cameras.len(),
        rig.width,
        rig.height,
        out.front_coverage
    );
    println!("manifest: {}", args.out.join("manifest.txt").display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    if let Some(mode) = &args.mode {
        cfg.set("train.mode", mode)?;
    }
    if let Some(n) = args.iterations {
        cfg.set("train.iterations", &n.to_string())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(l) = args.lambda_exp {
        cfg.set("train.lambda_exp", &l.to_string())?;
    }
    let manifest = load_manifest(&manifest_path(&args.data))?;
    let mut scene = load_dataset(&manifest)?;
    neutral_color_init(&mut scene, 0.5);
    let tc = cfg.train_config();
    fs::create_dir_all(&args.out)?;
    cfg.write_resolved(&args.out.join("config.txt"))?;
    let every = (tc.iterations / 8).max(1);
    let state = train(
        scene,
        &tc,
        &args.out,
        args.resume.as_deref(),
        |step, report| {
            if step % every == 0 || step == tc.iterations {
                eprintln!("step {step}/{} total {:.6}", tc.iterations, report.total);
            }
        },
    )?;
    println!(
        "trained {} steps ({}); final checkpoint: {}",
        state.step,
        tc.mode.as_str(),
        checkpoint_dir(&args.out, None).display()
    );
    Ok(())
}

fn render_name(id: u32, ext: &str) -> String {
    format!("render_v{id:04}.{ext}")
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let scene = load_scene(&args.checkpoint.join("scene.txt"))?;
    if scene.views.is_empty() {
        return Err(CliError::Data("checkpoint scene has no views".into()));
    }
    let (e_mean, gamma_mean) = render_params_for_eval(&scene.views);
    let e = args.e.unwrap_or(e_mean);
    let gamma = args.gamma.unwrap_or(gamma_mean);
    if !(e > 0.0 && gamma > 0.0) {
        return Err(CliError::Config(
            "e and gamma overrides must be positive".into(),
        ));
    }
    let ids: Vec<u32> = if args.views.is_empty() {
        scene.views.iter().map(|v| v.id).collect()
    } else {
        args.views.clone()
    };
    fs::create_dir_all(&args.out)?;
    cfg.write_resolved(&args.out.join("config.txt"))?;
    let opts = RenderOptions {
        background: cfg.background(),
    };
    let mut listing = String::new();
    writeln!(listing, "{RENDER_MANIFEST_HEADER}").unwrap();
    for id in &ids {
        let view = scene
            .view_by_id(*id)
            .ok_or_else(|| CliError::Data(format!("unknown view id {id}")))?;
        let (ve, vg) = if args.per_view {
            (view.exposure, view.gamma)
        } else {
            (e, gamma)
        };
        let hdr = render_hdr(&scene, view, &opts);
        let ldr = form_ldr(&hdr, ve, vg);
        let name = render_name(*id, "ppm");
        write_ppm(&ldr, &args.out.join(&name))?;
        if args.hdr {
            write_pfm(&hdr, &args.out.join(render_name(*id, "pfm")))?;
        }
        writeln!(
            listing,
            "R {} {} {} {}",
            id,
            fmt_f64_exact(ve),
            fmt_f64_exact(vg),
            name
        )
        .unwrap();
    }
    fs::write(args.out.join("renders.txt"), listing)?;
    if args.per_view {
        println!(
            "rendered {} views at per-view params into {}",
            ids.len(),
            args.out.display()
        );
    } else {
        println!(
            "rendered {} views at e={} gamma={} into {}",
            ids.len(),
            e,
            gamma,
            args.out.display()
        );
    }
    Ok(())
}

struct RenderEntry {
    id: u32,
    e: f64,
    path: PathBuf,
}

fn load_render_manifest(path: &Path) -> Result<Vec<RenderEntry>, CliError> {
    let path = if path.is_dir() {
        path.join("renders.txt")
    } else {
        path.to_path_buf()
    };
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RENDER_MANIFEST_HEADER) {
        return Err(CliError::Data(format!(
            "{} is not a render manifest",
            path.display()
        )));
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_ascii_whitespace().collect();
        if parts.len() != 5 || parts[0] != "R" {
            return Err(CliError::Data(format!(
                "render manifest line {}: expected 'R id e gamma path'",
                n + 2
            )));
        }
        let bad =
            |what: &str| CliError::Data(format!("render manifest line {}: bad {what}", n + 2));
        entries.push(RenderEntry {
            id: parts[1].parse().map_err(|_| bad("id"))?,
            e: parts[2].parse().map_err(|_| bad("exposure"))?,
            path: root.join(parts[4]),
        });
    }
    Ok(entries)
}

fn read_eval_psnr_mean(dir: &Path) -> Result<f64, CliError> {
    let path = if dir.is_dir() {
        dir.join("eval.csv")
    } else {
        dir.to_path_buf()
    };
    let text = fs::read_to_string(&path)?;
    for line in text.lines().skip(1) {
        if let Some((metric, value)) = line.split_once(',') {
            if metric == "psnr_mean" {
                return value
                    .parse()
                    .map_err(|_| CliError::Data(format!("bad psnr_mean in {}", path.display())));
            }
        }
    }
    Err(CliError::Data(format!(
        "no psnr_mean row in {}",
        path.display()
    )))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if !args.compare.is_empty() {
        let easy = read_eval_psnr_mean(&args.compare[0])?;
        let hard = read_eval_psnr_mean(&args.compare[1])?;
        if !(easy.is_finite() && hard.is_finite()) {
            return Err(CliError::Data(
                "delta_psnr needs finite psnr_mean in both runs".into(),
            ));
        }
        let delta = crate::metrics::delta_psnr(hard, easy);
        let mut csv = String::from("metric,value\n");
        writeln!(csv, "psnr_easy,{easy}").unwrap();
        writeln!(csv, "psnr_hard,{hard}").unwrap();
        writeln!(csv, "delta_psnr,{delta}").unwrap();
        if let Some(out) = &args.out {
            fs::create_dir_all(out)?;
            fs::write(out.join("eval.csv"), &csv)?;
        }
        println!("psnr_easy   {easy}");
        println!("psnr_hard   {hard}");
        println!("delta_psnr  {delta}");
        return Ok(());
    }

    let cfg = args.config.resolve()?;
    let data = args
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs --data (or --compare)".into()))?;
    let manifest = load_manifest(&manifest_path(data))?;
    let renders = match &args.renders {
        Some(p) => Some(load_render_manifest(p)?),
        None => None,
    };

    // target frames in manifest order, with the exposure each was made under
    let mut targets: Vec<(usize, usize, ImageBuf, f64)> = Vec::new();
    for r in &manifest.records {
        let (img, e) = match &renders {
            Some(entries) => {
                let id = manifest.view_id(r.frame, r.camera);
                let entry = entries
                    .iter()
                    .find(|en| en.id == id)
                    .ok_or_else(|| CliError::Data(format!("render manifest lacks view {id}")))?;
                (read_ppm(&entry.path)?, entry.e)
            }
            None => (read_ppm(&manifest.root.join(&r.image))?, r.exposure),
        };
        targets.push((r.frame, r.camera, img, e));
    }

    let mut csv = String::from("metric,value\n");
    let mut mses = Vec::new();
    let mut ssims = Vec::new();
    for (r, (frame, cam, img, _)) in manifest.records.iter().zip(&targets) {
        let gt = read_ppm(&manifest.root.join(&r.gt))?;
        if !gt.same_dims(img) {
            return Err(CliError::Data(format!(
                "frame {frame} cam {cam}: render {}x{} vs gt {}x{}",
                img.width, img.height, gt.width, gt.height
            )));
        }
        let m = mse(img, &gt);
        let s = ssim(img, &gt);
        writeln!(csv, "psnr_f{frame:03}_c{cam},{}", psnr_from_mse(m)).unwrap();
        writeln!(csv, "ssim_f{frame:03}_c{cam},{s}").unwrap();
        mses.push(m);
        ssims.push(s);
    }
    // pooled across frames so a single exact-match frame cannot pin the
    // summary at infinity
    let psnr_mean = psnr_from_mse(mses.iter().sum::<f64>() / mses.len() as f64);
    let ssim_mean = ssims.iter().sum::<f64>() / ssims.len() as f64;

    // inconsistency over each camera's time-ordered frames; frames carry
    // their capture gain, and the score wants the factor that puts the
    // tone-inverted frame back on a common scale, which is its reciprocal
    let mut his_value = f64::NAN;
    if manifest.records.len() >= 2 {
        let mut groups: Vec<(Vec<ImageBuf>, Vec<f64>)> = Vec::new();
        for cam in 0..manifest.n_cameras {
            let mut frames: Vec<(usize, ImageBuf, f64)> = targets
                .iter()
                .filter(|(_, c, _, _)| *c == cam)
                .map(|(f, _, img, e)| {
                    (
                        *f,
                        img.clone(),
                        if args.unit_exposures { 1.0 } else { 1.0 / *e },
                    )
                })
                .collect();
            frames.sort_by_key(|(f, _, _)| *f);
            if frames.len() >= 2 {
                groups.push((
                    frames.iter().map(|(_, i, _)| i.clone()).collect(),
                    frames.iter().map(|(_, _, e)| *e).collect(),
                ));
            }
        }
        if !groups.is_empty() {
            let refs: Vec<(&[ImageBuf], &[f64])> = groups
                .iter()
                .map(|(f, e)| (f.as_slice(), e.as_slice()))
                .collect();
            his_value = his_grouped(&refs, cfg.his_norm());
        }
    }

    let frames_only: Vec<ImageBuf> = targets.iter().map(|(_, _, i, _)| i.clone()).collect();
    let std_lum = std_luminance(&frames_only);

    writeln!(csv, "psnr_mean,{psnr_mean}").unwrap();
    writeln!(csv, "ssim_mean,{ssim_mean}").unwrap();
    if his_value.is_finite() {
        writeln!(csv, "his,{his_value}").unwrap();
    }
    writeln!(csv, "std_luminance,{std_lum}").unwrap();

    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval.csv"), &csv)?;
    cfg.write_resolved(&out.join("config.txt"))?;

    println!("frames         {}", targets.len());
    println!("psnr_mean      {psnr_mean}");
    println!("ssim_mean      {ssim_mean}");
    if his_value.is_finite() {
        println!("his            {his_value}");
    }
    println!("std_luminance  {std_lum}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetManifest, ExposurePolicy, RigSpec};
    use crate::photometric::srgb_oetf;

    fn small_dataset(dir: &Path, std: f64) -> DatasetManifest {
        let scene = build_procedural_scene(0, 50);
        let rig = RigSpec {
            width: 32,
            height: 22,
            frame_count: 2,
            ..RigSpec::desk()
        };
        let policy = if std == 0.0 {
            ExposurePolicy::iso_const(3)
        } else {
            ExposurePolicy::iso_var(3, std)
        };
        generate(&scene, &rig, &policy, dir).unwrap().manifest
    }

    #[test]
    fn generate_then_full_pipeline_via_run() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let code = run([
            "hdrsplat",
            "generate",
            "--out",
            data.to_str().unwrap(),
            "--preset",
            "iso-var",
            "--std",
            "4",
            "--seed",
            "3",
            "--gaussians",
            "50",
            "--frames",
            "2",
            "--set",
            "dataset.width=32",
            "--set",
            "dataset.height=22",
        ]);
        assert_eq!(code, 0);
        assert!(data.join("manifest.txt").exists());
        assert!(data.join("config.txt").exists());

        let rundir = tmp.path().join("run");
        let code = run([
            "hdrsplat",
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            rundir.to_str().unwrap(),
            "--iterations",
            "4",
            "--set",
            "train.lambda_dssim=0",
        ]);
        assert_eq!(code, 0);
        let ckpt = rundir.join("checkpoint-final");
        assert!(ckpt.join("optim.bin").exists());
        assert!(rundir.join("loss.csv").exists());

        let renders = tmp.path().join("renders");
        let code = run([
            "hdrsplat",
            "render",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            renders.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(renders.join("renders.txt").exists());
        assert!(renders.join("render_v0000.ppm").exists());

        let evaldir = tmp.path().join("eval");
        let code = run([
            "hdrsplat",
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--renders",
            renders.to_str().unwrap(),
            "--out",
            evaldir.to_str().unwrap(),
            "--set",
            "train.lambda_dssim=0",
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(evaldir.join("eval.csv")).unwrap();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("psnr_mean,"));
        assert!(csv.contains("his,"));
        assert!(csv.contains("std_luminance,"));
    }

    #[test]
    fn eval_of_gt_against_itself_hits_sentinels() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        small_dataset(&data, 0.0);
        // const policy: observations equal the GT split bit for bit
        let evaldir = tmp.path().join("eval");
        let code = run([
            "hdrsplat",
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--out",
            evaldir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(evaldir.join("eval.csv")).unwrap();
        let get = |metric: &str| -> f64 {
            csv.lines()
                .find_map(|l| l.strip_prefix(&format!("{metric},")))
                .unwrap()
                .parse()
                .unwrap()
        };
        assert_eq!(get("psnr_mean"), f64::INFINITY);
        assert!((get("ssim_mean") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_of_var_observations_shows_drift() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        small_dataset(&data, 4.0);
        let evaldir = tmp.path().join("eval");
        let code = run([
            "hdrsplat",
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--out",
            evaldir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(evaldir.join("eval.csv")).unwrap();
        let std_lum: f64 = csv
            .lines()
            .find_map(|l| l.strip_prefix("std_luminance,"))
            .unwrap()
            .parse()
            .unwrap();
        assert!(std_lum > 0.0, "ISO drift not visible in luminance spread");
    }

    #[test]
    fn compare_mode_emits_delta() {
        let tmp = tempfile::tempdir().unwrap();
        let easy = tmp.path().join("easy");
        let hard = tmp.path().join("hard");
        for (dir, v) in [(&easy, 21.45), (&hard, 19.25)] {
            fs::create_dir_all(dir).unwrap();
            fs::write(
                dir.join("eval.csv"),
                format!("metric,value\npsnr_mean,{v}\n"),
            )
            .unwrap();
        }
        let out = tmp.path().join("cmp");
        let code = run([
            "hdrsplat",
            "eval",
            "--compare",
            easy.to_str().unwrap(),
            hard.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
        let delta: f64 = csv
            .lines()
            .find_map(|l| l.strip_prefix("delta_psnr,"))
            .unwrap()
            .parse()
            .unwrap();
        assert!((delta - (-2.20)).abs() < 1e-9);
    }

    #[test]
    fn render_identity_chain_and_overrides() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        small_dataset(&data, 0.0);
        let rundir = tmp.path().join("run");
        assert_eq!(
            run([
                "hdrsplat",
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                rundir.to_str().unwrap(),
                "--iterations",
                "2",
                "--set",
                "train.lambda_dssim=0",
            ]),
            0
        );
        let ckpt = rundir.join("checkpoint-final");
        let out = tmp.path().join("r_identity");
        assert_eq!(
            run([
                "hdrsplat",
                "render",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--view",
                "0",
                "--e",
                "1",
                "--gamma",
                "1",
                "--hdr",
            ]),
            0
        );
        // with e = gamma = 1 and radiance inside the clamp window, the LDR
        // image is the quantized HDR image
        let ldr = read_ppm(&out.join("render_v0000.ppm")).unwrap();
        let hdr = crate::img_io::read_pfm(&out.join("render_v0000.pfm")).unwrap();
        for (l, h) in ldr.data.iter().zip(&hdr.data) {
            for c in 0..3 {
                if h[c] >= 1e-6 && h[c] <= 1.0 {
                    // PFM stores f32, so compare at f32 precision plus the
                    // 8-bit quantization step
                    assert!((l[c] - h[c]).abs() < 0.5 / 255.0 + 1e-6);
                }
            }
        }
        // unknown view id is a data error
        assert_eq!(
            run([
                "hdrsplat",
                "render",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                tmp.path().join("r_bad").to_str().unwrap(),
                "--view",
                "999",
            ]),
            3
        );
    }

    #[test]
    fn per_view_render_uses_each_views_trained_params() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        small_dataset(&data, 4.0);
        let rundir = tmp.path().join("run");
        assert_eq!(
            run([
                "hdrsplat",
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                rundir.to_str().unwrap(),
                "--iterations",
                "10",
                "--set",
                "train.lambda_dssim=0",
            ]),
            0
        );
        let ckpt = rundir.join("checkpoint-final");
        let out = tmp.path().join("r_perview");
        assert_eq!(
            run([
                "hdrsplat",
                "render",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--per-view",
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let parse = |text: &str, tag: &str| -> Vec<(u32, f64, f64)> {
            text.lines()
                .filter(|l| l.starts_with(tag))
                .map(|l| {
                    let f: Vec<&str> = l.split_whitespace().collect();
                    (
                        f[1].parse().unwrap(),
                        f[2].parse().unwrap(),
                        f[3].parse().unwrap(),
                    )
                })
                .collect()
        };
        let trained = parse(
            &fs::read_to_string(ckpt.join("photometric.txt")).unwrap(),
            "P ",
        );
        let rendered = parse(&fs::read_to_string(out.join("renders.txt")).unwrap(), "R ");
        assert_eq!(trained.len(), rendered.len());
        // render reads the checkpoint scene, whose format pins floats at 9
        // significant digits; photometric.txt keeps the exact values
        for ((ti, te, tg), (ri, re, rg)) in trained.iter().zip(&rendered) {
            assert_eq!(ti, ri);
            assert!((te - re).abs() <= 1e-8 * te.abs());
            assert!((tg - rg).abs() <= 1e-8 * tg.abs());
        }
        // varying-gain observations push the per-view exposures apart even
        // this early, so the manifest must not collapse to one shared value
        let first = rendered[0].1;
        assert!(rendered.iter().any(|(_, e, _)| *e != first));
    }

    #[test]
    fn baseline_mode_zeroes_exp_column() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        small_dataset(&data, 4.0);
        let rundir = tmp.path().join("run");
        assert_eq!(
            run([
                "hdrsplat",
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                rundir.to_str().unwrap(),
                "--mode",
                "ldr-baseline",
                "--iterations",
                "3",
                "--set",
                "train.lambda_dssim=0",
            ]),
            0
        );
        let csv = fs::read_to_string(rundir.join("loss.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let exp: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
            assert_eq!(exp, 0.0);
        }
    }

    #[test]
    fn config_errors_exit_2() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(
            run([
                "hdrsplat",
                "generate",
                "--out",
                tmp.path().join("x").to_str().unwrap(),
                "--set",
                "dataset.nope=1",
            ]),
            2
        );
        assert_eq!(
            run([
                "hdrsplat",
                "generate",
                "--out",
                tmp.path().join("y").to_str().unwrap(),
                "--preset",
                "iso-wild",
            ]),
            2
        );
        // missing manifest is a data error
        assert_eq!(
            run([
                "hdrsplat",
                "train",
                "--data",
                tmp.path().join("nothing").to_str().unwrap(),
                "--out",
                tmp.path().join("r").to_str().unwrap(),
            ]),
            3
        );
    }

    #[test]
    fn unit_exposure_flag_changes_his() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let manifest = small_dataset(&data, 4.0);
        // make sure the subsets actually vary in exposure
        assert!(manifest.records.iter().any(|r| r.iso != 8));
        let with_e = tmp.path().join("with_e");
        let unit = tmp.path().join("unit");
        for (dir, extra) in [(&with_e, None), (&unit, Some("--unit-exposures"))] {
            let mut argv = vec![
                "hdrsplat".to_string(),
                "eval".to_string(),
                "--data".to_string(),
                data.to_str().unwrap().to_string(),
                "--out".to_string(),
                dir.to_str().unwrap().to_string(),
            ];
            if let Some(flag) = extra {
                argv.push(flag.to_string());
            }
            assert_eq!(run(argv), 0);
        }
        let read_his = |dir: &Path| -> f64 {
            fs::read_to_string(dir.join("eval.csv"))
                .unwrap()
                .lines()
                .find_map(|l| l.strip_prefix("his,"))
                .unwrap()
                .parse()
                .unwrap()
        };
        // GT exposures compensate the drift, unit exposures do not
        assert!(read_his(&with_e) < read_his(&unit));
    }

    #[test]
    fn his_compensation_survives_the_cli_quantization() {
        // sanity for the eval path: a 2x exposure step on a static frame is
        // nearly cancelled when scored with the true exposures
        let lin = ImageBuf::filled(8, 8, [0.2, 0.3, 0.4]);
        let f1 = lin.map(srgb_oetf);
        let f2 = lin.map(|x| srgb_oetf(2.0 * x));
        let q = |img: &ImageBuf| {
            img.map(|v| crate::img_io::dequantize_8bit(crate::img_io::quantize_8bit(v)))
        };
        let frames = [q(&f1), q(&f2)];
        let score = crate::metrics::his(&frames, &[2.0, 1.0], crate::metrics::HisNorm::Rms);
        assert!(score < 0.02, "quantized compensation score {score}");
    }
}
