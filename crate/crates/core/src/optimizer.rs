//! Appearance training loop. Geometry is frozen; the trainable parameters
//! are per-Gaussian colors (raw) and opacities (logit) plus per-view
//! exposure and tone exponent (both in log space).
//!
//! Batch selection draws from an RNG derived from (seed, step) alone, so a
//! resumed run consumes exactly the random stream the uninterrupted run
//! would have.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::losses::{loss_total, LossError, LossReport, LossWeights};
use crate::scene::{fmt_f64_exact, save_scene, Scene};

pub const OPTIM_MAGIC: &[u8; 8] = b"HSOPT1\0\0";
pub const PHOTOMETRIC_HEADER: &str = "hdrsplat-photometric v1";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const TAG_EXPOSURE_INIT: u64 = 1;
const TAG_BATCH: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training aborted at step {step}: {source}")]
    Aborted { step: u64, source: LossError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Learn exposure and tone exponent jointly with appearance.
    P2gs,
    /// Identity photometric model: e = 1, gamma = 1, both frozen.
    LdrBaseline,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::P2gs => "p2gs",
            TrainMode::LdrBaseline => "ldr-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        match s {
            "p2gs" => Some(TrainMode::P2gs),
            "ldr-baseline" => Some(TrainMode::LdrBaseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub mode: TrainMode,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_exposure: f64,
    pub lr_gamma: f64,
    pub weights: LossWeights,
    /// Views per step; 0 means the full view set every step.
    pub views_per_step: usize,
    /// Exposure pairs drawn per step.
    pub pairs_per_step: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub exposure_init_std: f64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 600,
            seed: 0,
            mode: TrainMode::P2gs,
            lr_color: 1e-2,
            lr_opacity: 5e-3,
            lr_exposure: 5e-3,
            lr_gamma: 5e-3,
            weights: LossWeights::default(),
            views_per_step: 0,
            pairs_per_step: 1,
            checkpoint_every: 0,
            exposure_init_std: 0.05,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamGroup {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamGroup {
    fn zeros(n: usize) -> Self {
        AdamGroup {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One Adam update with bias correction at 1-based step t.
    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64) {
        debug_assert_eq!(params.len(), grads.len());
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into scene.views.
    pub views: Vec<usize>,
    /// Positions into `views`; (a, b) compares exposures e_a and e_b on
    /// view a's radiance.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub scene: Scene,
    pub colors: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub log_e: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub adam_color: AdamGroup,
    pub adam_opacity: AdamGroup,
    pub adam_log_e: AdamGroup,
    pub adam_log_gamma: AdamGroup,
    pub step: u64,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub background: [f64; 3],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn stream_rng(seed: u64, step: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

impl TrainState {
    pub fn exposure(&self, view: usize) -> f64 {
        self.log_e[view].exp()
    }

    pub fn gamma(&self, view: usize) -> f64 {
        self.log_gamma[view].exp()
    }

    pub fn opacity(&self, gauss: usize) -> f64 {
        sigmoid(self.opacity_logit[gauss])
    }

    /// Scene with the current parameters written back, ready to render.
    pub fn render_scene(&self) -> Scene {
        let mut scene = self.scene.clone();
        for (g, (c, &l)) in scene
            .gaussians
            .iter_mut()
            .zip(self.colors.iter().zip(&self.opacity_logit))
        {
            g.color = nalgebra::Vector3::new(c[0], c[1], c[2]);
            g.opacity = sigmoid(l);
        }
        for (i, v) in scene.views.iter_mut().enumerate() {
            v.exposure = self.log_e[i].exp();
            v.gamma = self.log_gamma[i].exp();
        }
        scene
    }

    /// Deterministic batch for a step, a function of (seed, step) only.
    pub fn make_batch(&self, step: u64) -> Batch {
        let n = self.scene.views.len();
        let k = self.cfg.views_per_step;
        let mut rng = stream_rng(self.cfg.seed, step, TAG_BATCH);
        let mut views: Vec<usize> = if k == 0 || k >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        };
        views.sort_unstable();
        let mut pairs = Vec::new();
        if views.len() >= 2 {
            for _ in 0..self.cfg.pairs_per_step {
                let a = rng.gen_range(0..views.len());
                let mut b = rng.gen_range(0..views.len());
                while b == a {
                    b = rng.gen_range(0..views.len());
                }
                pairs.push((a, b));
            }
        }
        Batch { views, pairs }
    }

    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        let batch = self.make_batch(self.step);
        let (report, grads) = loss_total(self, &batch)?;
        let t = self.step + 1;
        let flat_color: Vec<f64> = grads.d_color.iter().flatten().copied().collect();
        let mut color_params: Vec<f64> = self.colors.iter().flatten().copied().collect();
        self.adam_color
            .update(&mut color_params, &flat_color, self.cfg.lr_color, t);
        for (i, c) in self.colors.iter_mut().enumerate() {
            *c = [
                color_params[3 * i],
                color_params[3 * i + 1],
                color_params[3 * i + 2],
            ];
        }
        self.adam_opacity.update(
            &mut self.opacity_logit,
            &grads.d_opacity_logit,
            self.cfg.lr_opacity,
            t,
        );
        if self.cfg.mode == TrainMode::P2gs {
            self.adam_log_e
                .update(&mut self.log_e, &grads.d_log_e, self.cfg.lr_exposure, t);
            self.adam_log_gamma.update(
                &mut self.log_gamma,
                &grads.d_log_gamma,
                self.cfg.lr_gamma,
                t,
            );
        }
        self.step = t;
        Ok(report)
    }
}

/// Gray out all Gaussian colors so training starts from a neutral
/// appearance instead of the dataset's ground truth.
pub fn neutral_color_init(scene: &mut Scene, value: f64) {
    for g in &mut scene.gaussians {
        g.color = nalgebra::Vector3::new(value, value, value);
    }
}

/// Fresh state: appearance copied from the scene, exposures drawn from
/// N(1, std^2) truncated above 0.5, tone exponent started at the prior.
pub fn init_state(scene: Scene, cfg: &TrainConfig) -> TrainState {
    let colors: Vec<[f64; 3]> = scene
        .gaussians
        .iter()
        .map(|g| [g.color.x, g.color.y, g.color.z])
        .collect();
    let opacity_logit: Vec<f64> = scene.gaussians.iter().map(|g| logit(g.opacity)).collect();
    let n_views = scene.views.len();
    let (log_e, log_gamma) = match cfg.mode {
        TrainMode::P2gs => {
            let mut rng = stream_rng(cfg.seed, 0, TAG_EXPOSURE_INIT);
            let normal = Normal::new(1.0, cfg.exposure_init_std).expect("positive std");
            let log_e = (0..n_views)
                .map(|_| {
                    let mut e = normal.sample(&mut rng);
                    while e <= 0.5 {
                        e = normal.sample(&mut rng);
                    }
                    e.ln()
                })
                .collect();
            let log_gamma = vec![2.2f64.ln(); n_views];
            (log_e, log_gamma)
        }
        TrainMode::LdrBaseline => (vec![0.0; n_views], vec![0.0; n_views]),
    };
    let n = scene.gaussians.len();
    let mut weights = cfg.weights;
    if cfg.mode == TrainMode::LdrBaseline {
        weights.lambda_exp = 0.0;
    }
    TrainState {
        scene,
        colors,
        opacity_logit,
        log_e,
        log_gamma,
        adam_color: AdamGroup::zeros(3 * n),
        adam_opacity: AdamGroup::zeros(n),
        adam_log_e: AdamGroup::zeros(n_views),
        adam_log_gamma: AdamGroup::zeros(n_views),
        step: 0,
        cfg: cfg.clone(),
        weights,
        background: cfg.background,
    }
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.data.len() {
            return Err(TrainError::Checkpoint("truncated optimizer state".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Write a checkpoint directory: a readable scene snapshot, a per-view
/// photometric sidecar, and the exact optimizer state.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let scene = state.render_scene();
    save_scene(&scene, &dir.join("scene.txt"))?;

    let mut sidecar = String::new();
    sidecar.push_str(PHOTOMETRIC_HEADER);
    sidecar.push('\n');
    for (i, v) in scene.views.iter().enumerate() {
        sidecar.push_str(&format!(
            "P {} {} {}\n",
            v.id,
            fmt_f64_exact(state.exposure(i)),
            fmt_f64_exact(state.gamma(i))
        ));
    }
    fs::write(dir.join("photometric.txt"), sidecar)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(OPTIM_MAGIC);
    buf.push(match state.cfg.mode {
        TrainMode::P2gs => 0,
        TrainMode::LdrBaseline => 1,
    });
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(state.colors.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(state.log_e.len() as u64).to_le_bytes());
    let flat_color: Vec<f64> = state.colors.iter().flatten().copied().collect();
    push_f64s(&mut buf, &flat_color);
    push_f64s(&mut buf, &state.opacity_logit);
    push_f64s(&mut buf, &state.log_e);
    push_f64s(&mut buf, &state.log_gamma);
    for g in [
        &state.adam_color,
        &state.adam_opacity,
        &state.adam_log_e,
        &state.adam_log_gamma,
    ] {
        push_f64s(&mut buf, &g.m);
        push_f64s(&mut buf, &g.v);
    }
    fs::write(dir.join("optim.bin"), buf)?;
    Ok(())
}

/// Rebuild training state from a checkpoint, reattaching the dataset scene
/// (poses, geometry, observations). The config must match the original run
/// for the continued trajectory to be meaningful.
pub fn load_checkpoint(
    dir: &Path,
    scene: Scene,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    let raw = fs::read(dir.join("optim.bin"))?;
    let mut r = BinReader { data: &raw, pos: 0 };
    if r.take(8)? != OPTIM_MAGIC {
        return Err(TrainError::Checkpoint("bad optimizer state magic".into()));
    }
    let mode = match r.take(1)?[0] {
        0 => TrainMode::P2gs,
        1 => TrainMode::LdrBaseline,
        m => return Err(TrainError::Checkpoint(format!("unknown mode byte {m}"))),
    };
    if mode != cfg.mode {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint mode {} does not match configured mode {}",
            mode.as_str(),
            cfg.mode.as_str()
        )));
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    if seed != cfg.seed {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint seed {seed} does not match configured seed {}",
            cfg.seed
        )));
    }
    let n_gauss = r.u64()? as usize;
    let n_views = r.u64()? as usize;
    if n_gauss != scene.gaussians.len() || n_views != scene.views.len() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint sized for {n_gauss} gaussians / {n_views} views, scene has {} / {}",
            scene.gaussians.len(),
            scene.views.len()
        )));
    }
    let flat_color = r.f64s(3 * n_gauss)?;
    let colors = flat_color
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let opacity_logit = r.f64s(n_gauss)?;
    let log_e = r.f64s(n_views)?;
    let log_gamma = r.f64s(n_views)?;
    let mut groups = Vec::new();
    for n in [3 * n_gauss, n_gauss, n_views, n_views] {
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        groups.push(AdamGroup { m, v });
    }
    if r.pos != raw.len() {
        return Err(TrainError::Checkpoint(
            "trailing bytes in optimizer state".into(),
        ));
    }
    let adam_log_gamma = groups.pop().unwrap();
    let adam_log_e = groups.pop().unwrap();
    let adam_opacity = groups.pop().unwrap();
    let adam_color = groups.pop().unwrap();
    let mut weights = cfg.weights;
    if cfg.mode == TrainMode::LdrBaseline {
        weights.lambda_exp = 0.0;
    }
    Ok(TrainState {
        scene,
        colors,
        opacity_logit,
        log_e,
        log_gamma,
        adam_color,
        adam_opacity,
        adam_log_e,
        adam_log_gamma,
        step,
        cfg: cfg.clone(),
        weights,
        background: cfg.background,
    })
}

pub const LOSS_CSV_HEADER: &str = "step,total,photo,l1,dssim,exp,reg_escale,reg_evar,reg_gamma";

pub fn loss_csv_row(step: u64, r: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        step, r.total, r.photo, r.l1, r.dssim, r.exp, r.reg_escale, r.reg_evar, r.reg_gamma
    )
}

/// Run training to cfg.iterations, logging one CSV row per step and writing
/// checkpoints under out_dir. Resuming appends to the existing log and
/// reproduces the uninterrupted trajectory exactly.
pub fn train(
    scene: Scene,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(u64, &LossReport),
) -> Result<TrainState, TrainError> {
    fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(dir) => load_checkpoint(dir, scene, cfg)?,
        None => init_state(scene, cfg),
    };
    let csv_path = out_dir.join("loss.csv");
    let mut csv: Box<dyn IoWrite> = if state.step > 0 && csv_path.exists() {
        Box::new(fs::OpenOptions::new().append(true).open(&csv_path)?)
    } else {
        let mut f = fs::File::create(&csv_path)?;
        writeln!(f, "{LOSS_CSV_HEADER}")?;
        Box::new(f)
    };
    while state.step < cfg.iterations {
        let report = match state.train_step() {
            Ok(r) => r,
            Err(TrainError::Loss(source)) => {
                return Err(TrainError::Aborted {
                    step: state.step,
                    source,
                })
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", loss_csv_row(state.step, &report))?;
        progress(state.step, &report);
        if cfg.checkpoint_every > 0
            && state.step % cfg.checkpoint_every == 0
            && state.step < cfg.iterations
        {
            save_checkpoint(&state, &checkpoint_dir(out_dir, Some(state.step)))?;
        }
    }
    csv.flush()?;
    save_checkpoint(&state, &checkpoint_dir(out_dir, None))?;
    Ok(state)
}

pub fn checkpoint_dir(out_dir: &Path, step: Option<u64>) -> PathBuf {
    match step {
        Some(s) => out_dir.join(format!("checkpoint-{s:06}")),
        None => out_dir.join("checkpoint-final"),
    }
}
