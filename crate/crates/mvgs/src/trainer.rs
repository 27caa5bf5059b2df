//! The optimization loop: Adam over all gaussian parameters, loss
//! composition (ℓ1/ℓ2 plus optional D-SSIM terms), adaptive-density
//! scheduling, opacity resets, holdout metrics, and text checkpoints that
//! resume bit-identically.
//!
//! Each iteration draws a mini-batch plan keyed by the global iteration
//! number, renders it thread-efficiently, walks the loss backward, applies
//! one Adam step per parameter group, renormalizes quaternions, and merges
//! the positional-gradient statistics that drive densification. All state
//! that influences arithmetic lives in [`Checkpoint`], so a resumed run
//! replays the uninterrupted one exactly at a fixed worker count.

use crate::batchvar::{masked_l1, masked_l2, sample_batch, BatchError, BatchStrategy};
use crate::densify::{adc_step, opacity_reset, MultiViewThresholds};
use crate::gradients::{backward, GradAccumulator, GradError, ParamGrads};
use crate::io::{fmt_f64, gaussian_line, parse_fields, IoError};
use crate::losses::{
    self, dssim, dssim3d, merge_output, merged_target, scatter_merged_grad, LossError, SsimWindow,
};
use crate::rasterizer::{render, RasterSettings, RenderError, RenderOutput, RenderPlan};
use crate::scene::{normalize_quat, Camera, Gaussian3D, Image, SceneDataset, PARAMS_PER_GAUSSIAN};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("iteration {iteration}: non-finite loss or gradients (gaussians {indices:?})")]
    NonFinite { iteration: u64, indices: Vec<usize> },
    #[error("checkpoint config hash {found:#018x} does not match {expected:#018x}")]
    ConfigHash { found: u64, expected: u64 },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// What the trainer minimizes each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    L1,
    L2,
    /// (1−λ)·ℓ1 + λ·D-SSIM with the 2D kernel; single-view batches only.
    L1Dssim,
    /// (1−λ)·ℓ1 + λ·3D distance-aware D-SSIM on the merged multi-view
    /// canvas; needs a pixel budget of exactly one image.
    L1Dssim3d,
}

impl LossMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "l1" => LossMode::L1,
            "l2" => LossMode::L2,
            "l1_dssim" => LossMode::L1Dssim,
            "l1_dssim3d" => LossMode::L1Dssim3d,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::L1 => "l1",
            LossMode::L2 => "l2",
            LossMode::L1Dssim => "l1_dssim",
            LossMode::L1Dssim3d => "l1_dssim3d",
        }
    }
}

/// Everything that shapes a training run. Hashed into checkpoints so a
/// resume with different settings is rejected instead of silently diverging.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Mean learning rate at iteration 0; decays exponentially to
    /// `lr_mean_end` at the final iteration.
    pub lr_mean: f64,
    pub lr_mean_end: f64,
    pub lr_log_scale: f64,
    pub lr_quat: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Weight λ of the D-SSIM term in the mixed losses.
    pub lambda_dssim: f64,
    pub loss_mode: LossMode,
    pub batch: crate::batchvar::MiniBatchSpec,
    pub adc: crate::densify::AdcConfig,
    /// Clamp all opacities down to `opacity_reset_ceiling` every this many
    /// iterations (0 disables).
    pub opacity_reset_every: u64,
    pub opacity_reset_ceiling: f64,
    /// Metrics row cadence.
    pub eval_every: u64,
    /// Every n-th view is held out for evaluation (0 disables holdout).
    pub holdout_every: usize,
    pub seed: u64,
    /// Densification never takes the gaussian count above this.
    pub max_gaussians: usize,
    pub tile_size: u32,
    pub window: SsimWindow,
    /// Iterations at which to snapshot a [`Checkpoint`] into the result.
    pub checkpoint_at: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr_mean: 1.6e-4,
            lr_mean_end: 1.6e-6,
            lr_log_scale: 5e-3,
            lr_quat: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lambda_dssim: 0.2,
            loss_mode: LossMode::L1,
            batch: crate::batchvar::MiniBatchSpec::single_view(0),
            adc: crate::densify::AdcConfig::default(),
            opacity_reset_every: 3000,
            opacity_reset_ceiling: 0.01,
            eval_every: 100,
            holdout_every: 8,
            seed: 0,
            max_gaussians: 100_000,
            tile_size: 16,
            window: SsimWindow::default(),
            checkpoint_at: Vec::new(),
        }
    }
}

/// FNV-1a over the debug rendering of the config; stable across runs of the
/// same build and cheap to recompute at resume time.
pub fn config_hash(cfg: &TrainConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in format!("{cfg:?}").bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// First and second Adam moments per gaussian, in flat parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub v: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    /// Global step count (bias correction).
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            v: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            t: 0,
        }
    }

    /// Rebuild moments after densification: survivors keep their rows,
    /// fresh gaussians start at zero, the step count carries over.
    pub fn remap(&self, map: &[Option<usize>]) -> AdamState {
        let mut next = AdamState::new(map.len());
        next.t = self.t;
        for (new, old) in map.iter().enumerate() {
            if let Some(old) = *old {
                next.m[new] = self.m[old];
                next.v[new] = self.v[old];
            }
        }
        next
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// One bias-corrected Adam update of every parameter, descending the loss.
pub fn adam_step(
    gaussians: &mut [Gaussian3D],
    grads: &ParamGrads,
    state: &mut AdamState,
    lrs: &[f64; PARAMS_PER_GAUSSIAN],
) {
    assert_eq!(gaussians.len(), grads.len());
    assert_eq!(gaussians.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powf(state.t as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(state.t as f64);
    for (g, gaussian) in gaussians.iter_mut().enumerate() {
        for p in 0..PARAMS_PER_GAUSSIAN {
            let grad = grads.get(g, p);
            let m = &mut state.m[g][p];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
            let v = &mut state.v[g][p];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
            let step = lrs[p] * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            gaussian.set_param(p, gaussian.params()[p] - step);
        }
    }
}

/// Per-lane learning rates at iteration `it` (the mean lr decays
/// geometrically from `lr_mean` to `lr_mean_end` over the run).
fn per_param_lrs(cfg: &TrainConfig, it: u64) -> [f64; PARAMS_PER_GAUSSIAN] {
    let frac = if cfg.iterations == 0 {
        1.0
    } else {
        it as f64 / cfg.iterations as f64
    };
    let lr_mean = cfg.lr_mean * (cfg.lr_mean_end / cfg.lr_mean).powf(frac);
    let mut lrs = [0.0; PARAMS_PER_GAUSSIAN];
    lrs[..3].fill(lr_mean);
    lrs[3..6].fill(cfg.lr_log_scale);
    lrs[6..10].fill(cfg.lr_quat);
    lrs[10] = cfg.lr_opacity;
    lrs[11..].fill(cfg.lr_color);
    lrs
}

/// 10·log10(1/MSE) over all channels, capped at 99 (identical images would
/// otherwise be ∞).
pub fn psnr(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    let mut mse = 0.0;
    for (r, t) in rendered.iter().zip(target) {
        for c in 0..3 {
            let d = r[c] - t[c];
            mse += d * d;
        }
    }
    mse /= 3.0 * rendered.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// Mean SSIM of the 2D-kernel variant (the evaluation metric, not a loss).
pub fn ssim_eval(
    rendered: &Image,
    target: &Image,
    win: &SsimWindow,
) -> std::result::Result<f64, LossError> {
    Ok(dssim(rendered, target, win)?.mean_ssim)
}

/// Full-image render of each listed view, averaged PSNR and SSIM.
pub fn evaluate(
    gaussians: &[Gaussian3D],
    dataset: &SceneDataset,
    views: &[usize],
    tile_size: u32,
    settings: &RasterSettings,
    win: &SsimWindow,
) -> Result<(f64, f64)> {
    assert!(!views.is_empty());
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for &v in views {
        let cam = &dataset.cameras[v];
        let plan = RenderPlan::full(v as u32, cam.width, cam.height, tile_size);
        let out = render(&plan, gaussians, &dataset.cameras, settings)?;
        let target = &dataset.images[v];
        psnr_sum += psnr(&out.color[0], &target.pixels);
        ssim_sum += ssim_eval(&out.image(0), target, win)?;
    }
    let n = views.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// One metrics CSV row: training loss at that iteration, holdout PSNR/SSIM,
/// and mean per-iteration wall time since the previous row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_gauss: usize,
    pub iter_ms: f64,
}

/// One densification event (zero counts when the event was suppressed at the
/// gaussian cap).
#[derive(Debug, Clone)]
pub struct AdcEventRow {
    pub iter: u64,
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    pub total: usize,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iter,loss,psnr,ssim,n_gauss,iter_ms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.iter,
            fmt_f64(r.loss),
            fmt_f64(r.psnr),
            fmt_f64(r.ssim),
            r.n_gauss,
            r.iter_ms
        );
    }
    out
}

pub fn adc_csv(rows: &[AdcEventRow]) -> String {
    let mut out = String::from("iter,split,clone,prune,total\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.iter, r.split, r.cloned, r.pruned, r.total);
    }
    out
}

/// Complete mid-run trainer state; saving and reloading one of these and
/// resuming reproduces the uninterrupted run bit for bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub iteration: u64,
    pub gaussians: Vec<Gaussian3D>,
    pub adam: AdamState,
    pub accumulator: GradAccumulator,
    pub thresholds: Option<MultiViewThresholds>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// Write the `splatckpt 1` text format (all decimals round-trip exact).
    pub fn save(&self, path: &Path) -> std::result::Result<(), IoError> {
        let mut out = String::new();
        out.push_str("splatckpt 1\n");
        let _ = writeln!(out, "confighash {}", self.config_hash);
        let _ = writeln!(out, "iteration {}", self.iteration);
        let _ = writeln!(out, "adamstep {}", self.adam.t);
        let _ = writeln!(out, "gaussians {}", self.gaussians.len());
        for g in &self.gaussians {
            out.push_str(&gaussian_line(g));
            out.push('\n');
        }
        let _ = writeln!(out, "moments {}", self.adam.m.len());
        for g in 0..self.adam.m.len() {
            let fields: Vec<String> = self.adam.m[g]
                .iter()
                .chain(self.adam.v[g].iter())
                .map(|v| fmt_f64(*v))
                .collect();
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        let acc = &self.accumulator;
        let _ = writeln!(
            out,
            "accumulator {} {} {}",
            acc.n_gaussians(),
            acc.n_views(),
            acc.denom
        );
        for g in 0..acc.n_gaussians() {
            let mut fields = vec![fmt_f64(acc.norm_sums[g]), fmt_f64(acc.max_radius[g])];
            for v in 0..acc.n_views() {
                fields.push(fmt_f64(acc.vec_sums[v][g].x));
                fields.push(fmt_f64(acc.vec_sums[v][g].y));
            }
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        match self.thresholds {
            None => out.push_str("thresholds none\n"),
            Some(t) => {
                let _ = writeln!(out, "thresholds {} {}", fmt_f64(t.split), fmt_f64(t.clone));
            }
        }
        let hex: String = self.rng_seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "rng {hex} {} {}", self.rng_stream, self.rng_word_pos);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<Checkpoint, IoError> {
        let text = std::fs::read_to_string(path)?;
        let pstr = path.display().to_string();
        let err = |line: usize, msg: String| IoError::Parse {
            path: pstr.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();

        let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        if header.trim() != "splatckpt 1" {
            return Err(err(ln + 1, format!("expected `splatckpt 1`, got `{header}`")));
        }

        fn section<'a>(
            lines: &mut std::iter::Enumerate<std::str::Lines<'a>>,
            keyword: &str,
            err: &dyn Fn(usize, String) -> IoError,
        ) -> std::result::Result<(usize, Vec<&'a str>), IoError> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing `{keyword}` line")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(keyword) {
                return Err(err(ln + 1, format!("expected `{keyword} ...`, got `{line}`")));
            }
            Ok((ln + 1, toks.collect()))
        }
        fn uint<T: std::str::FromStr>(
            toks: &[&str],
            i: usize,
            ln: usize,
            err: &dyn Fn(usize, String) -> IoError,
        ) -> std::result::Result<T, IoError> {
            toks.get(i)
                .and_then(|t| t.parse::<T>().ok())
                .ok_or_else(|| err(ln, format!("bad integer field {i}")))
        }

        let (ln, toks) = section(&mut lines, "confighash", &err)?;
        let config_hash: u64 = uint(&toks, 0, ln, &err)?;
        let (ln, toks) = section(&mut lines, "iteration", &err)?;
        let iteration: u64 = uint(&toks, 0, ln, &err)?;
        let (ln, toks) = section(&mut lines, "adamstep", &err)?;
        let adam_t: u64 = uint(&toks, 0, ln, &err)?;

        let (ln, toks) = section(&mut lines, "gaussians", &err)?;
        let n: usize = uint(&toks, 0, ln, &err)?;
        let mut gaussians = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, "unexpected end of gaussian section".into()))?;
            let v = parse_fields(line, 14).map_err(|msg| err(ln + 1, msg))?;
            // Verbatim, no quaternion renormalization: a checkpoint must
            // reload to the exact bits it saved.
            gaussians.push(Gaussian3D {
                mean: Vector3::new(v[0], v[1], v[2]),
                log_scale: Vector3::new(v[3], v[4], v[5]),
                rotation: [v[6], v[7], v[8], v[9]],
                opacity_logit: v[10],
                color: [v[11], v[12], v[13]],
            });
        }

        let (ln, toks) = section(&mut lines, "moments", &err)?;
        let n_m: usize = uint(&toks, 0, ln, &err)?;
        if n_m != n {
            return Err(err(ln, format!("moments count {n_m} != gaussian count {n}")));
        }
        let mut adam = AdamState::new(n);
        adam.t = adam_t;
        for g in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, "unexpected end of moments section".into()))?;
            let v = parse_fields(line, 2 * PARAMS_PER_GAUSSIAN).map_err(|msg| err(ln + 1, msg))?;
            adam.m[g].copy_from_slice(&v[..PARAMS_PER_GAUSSIAN]);
            adam.v[g].copy_from_slice(&v[PARAMS_PER_GAUSSIAN..]);
        }

        let (ln, toks) = section(&mut lines, "accumulator", &err)?;
        let n_a: usize = uint(&toks, 0, ln, &err)?;
        let n_views: usize = uint(&toks, 1, ln, &err)?;
        let denom: u64 = uint(&toks, 2, ln, &err)?;
        if n_a != n {
            return Err(err(ln, format!("accumulator count {n_a} != gaussian count {n}")));
        }
        let mut accumulator = GradAccumulator::new(n, n_views);
        accumulator.denom = denom;
        for g in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, "unexpected end of accumulator section".into()))?;
            let v = parse_fields(line, 2 + 2 * n_views).map_err(|msg| err(ln + 1, msg))?;
            accumulator.norm_sums[g] = v[0];
            accumulator.max_radius[g] = v[1];
            for view in 0..n_views {
                accumulator.vec_sums[view][g] = Vector2::new(v[2 + 2 * view], v[3 + 2 * view]);
            }
        }

        let (ln, toks) = section(&mut lines, "thresholds", &err)?;
        let thresholds = if toks.first() == Some(&"none") {
            None
        } else {
            let split: f64 = toks
                .first()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(ln, "bad threshold".into()))?;
            let clone: f64 = toks
                .get(1)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(ln, "bad threshold".into()))?;
            Some(MultiViewThresholds { split, clone })
        };

        let (ln, toks) = section(&mut lines, "rng", &err)?;
        let hex = toks
            .first()
            .filter(|t| t.len() == 64)
            .ok_or_else(|| err(ln, "rng seed must be 64 hex digits".into()))?;
        let mut rng_seed = [0u8; 32];
        for (i, byte) in rng_seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| err(ln, "bad hex in rng seed".into()))?;
        }
        let rng_stream: u64 = uint(&toks, 1, ln, &err)?;
        let rng_word_pos: u128 = uint(&toks, 2, ln, &err)?;

        Ok(Checkpoint {
            config_hash,
            iteration,
            gaussians,
            adam,
            accumulator,
            thresholds,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }
}

/// Final gaussians plus everything logged along the way.
#[derive(Debug)]
pub struct TrainResult {
    pub gaussians: Vec<Gaussian3D>,
    /// One row per `eval_every` iterations (plus the final iteration).
    pub history: Vec<MetricsRow>,
    pub adc_events: Vec<AdcEventRow>,
    /// Training loss of every iteration, in order.
    pub losses: Vec<f64>,
    /// Snapshots taken at `cfg.checkpoint_at`.
    pub checkpoints: Vec<Checkpoint>,
}

struct TrainState {
    gaussians: Vec<Gaussian3D>,
    adam: AdamState,
    acc: GradAccumulator,
    thresholds: Option<MultiViewThresholds>,
    rng: ChaCha8Rng,
}

/// Train from an initial gaussian set.
pub fn train(cfg: &TrainConfig, dataset: &SceneDataset, init: Vec<Gaussian3D>) -> Result<TrainResult> {
    validate(cfg, dataset)?;
    let (train_idx, _) = dataset.split(cfg.holdout_every);
    let n = init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Batch draws use streams 1..=iterations on the batch seed; the densify
    // stream is pinned far away from them.
    rng.set_stream(u64::MAX);
    let state = TrainState {
        gaussians: init,
        adam: AdamState::new(n),
        acc: GradAccumulator::new(n, train_idx.len()),
        thresholds: None,
        rng,
    };
    run_loop(cfg, dataset, state, 1)
}

/// Continue a checkpointed run; the config must hash identically.
pub fn resume(cfg: &TrainConfig, dataset: &SceneDataset, ckpt: &Checkpoint) -> Result<TrainResult> {
    validate(cfg, dataset)?;
    let expected = config_hash(cfg);
    if ckpt.config_hash != expected {
        return Err(TrainError::ConfigHash {
            found: ckpt.config_hash,
            expected,
        });
    }
    let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
    rng.set_stream(ckpt.rng_stream);
    rng.set_word_pos(ckpt.rng_word_pos);
    let state = TrainState {
        gaussians: ckpt.gaussians.clone(),
        adam: ckpt.adam.clone(),
        acc: ckpt.accumulator.clone(),
        thresholds: ckpt.thresholds,
        rng,
    };
    run_loop(cfg, dataset, state, ckpt.iteration + 1)
}

fn validate(cfg: &TrainConfig, dataset: &SceneDataset) -> Result<()> {
    let bad = |msg: String| Err(TrainError::Config(msg));
    for (name, lr) in [
        ("lr_mean", cfg.lr_mean),
        ("lr_mean_end", cfg.lr_mean_end),
        ("lr_log_scale", cfg.lr_log_scale),
        ("lr_quat", cfg.lr_quat),
        ("lr_opacity", cfg.lr_opacity),
        ("lr_color", cfg.lr_color),
    ] {
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("{name} must be positive, got {lr}"));
        }
    }
    if !(0.0..1.0).contains(&cfg.lambda_dssim) {
        return bad(format!("lambda_dssim must be in [0,1), got {}", cfg.lambda_dssim));
    }
    if cfg.eval_every == 0 {
        return bad("eval_every must be at least 1".into());
    }
    if cfg.tile_size == 0 {
        return bad("tile_size must be at least 1".into());
    }
    if cfg.max_gaussians == 0 {
        return bad("max_gaussians must be at least 1".into());
    }
    if !(cfg.opacity_reset_ceiling > 0.0 && cfg.opacity_reset_ceiling <= 1.0) {
        return bad(format!(
            "opacity_reset_ceiling must be in (0,1], got {}",
            cfg.opacity_reset_ceiling
        ));
    }
    cfg.adc.validate().map_err(TrainError::Config)?;
    if dataset.cameras.is_empty() {
        return bad("dataset has no cameras".into());
    }
    if dataset.cameras.len() != dataset.images.len() {
        return bad(format!(
            "dataset has {} cameras but {} images",
            dataset.cameras.len(),
            dataset.images.len()
        ));
    }
    let (w, h) = (dataset.cameras[0].width, dataset.cameras[0].height);
    if dataset
        .cameras
        .iter()
        .any(|c| c.width != w || c.height != h)
    {
        return bad("all dataset views must share one resolution".into());
    }
    let (train_idx, _) = dataset.split(cfg.holdout_every);
    if train_idx.is_empty() {
        return bad(format!(
            "holdout_every = {} leaves no training views",
            cfg.holdout_every
        ));
    }
    if cfg.batch.strategy == BatchStrategy::MultiView
        && cfg.batch.views_per_batch > train_idx.len()
    {
        return bad(format!(
            "batch wants {} views but only {} are in the training split",
            cfg.batch.views_per_batch,
            train_idx.len()
        ));
    }
    match cfg.loss_mode {
        LossMode::L1Dssim if cfg.batch.strategy != BatchStrategy::SingleView => {
            bad("l1_dssim needs a single_view batch (full images)".into())
        }
        LossMode::L1Dssim3d if cfg.batch.strategy != BatchStrategy::MultiView => {
            bad("l1_dssim3d needs a multi_view batch".into())
        }
        LossMode::L1Dssim3d if cfg.batch.pixels_per_batch != (w * h) as usize => bad(format!(
            "l1_dssim3d needs a pixel budget of exactly one image ({}), got {}",
            w * h,
            cfg.batch.pixels_per_batch
        )),
        _ => Ok(()),
    }
}

fn run_loop(
    cfg: &TrainConfig,
    dataset: &SceneDataset,
    mut st: TrainState,
    start: u64,
) -> Result<TrainResult> {
    let settings = RasterSettings::default();
    let (train_idx, holdout_idx) = dataset.split(cfg.holdout_every);
    let eval_views = if holdout_idx.is_empty() { &train_idx } else { &holdout_idx };
    let train_cams: Vec<Camera> = train_idx.iter().map(|&i| dataset.cameras[i].clone()).collect();
    let train_images: Vec<Image> = train_idx.iter().map(|&i| dataset.images[i].clone()).collect();

    let mut history = Vec::new();
    let mut adc_events = Vec::new();
    let mut losses_log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut ms_acc = 0.0;
    let mut ms_n = 0u32;

    for it in start..=cfg.iterations {
        let t0 = Instant::now();
        let plan = sample_batch(&cfg.batch, &train_cams, cfg.tile_size, it)?;
        let out = render(&plan, &st.gaussians, &train_cams, &settings)?;
        let (loss, dl_dcolor, dl_ddepth) =
            compute_loss(cfg, &plan, &out, &train_images, &train_cams)?;
        let (grads, batch_acc) = backward(
            &plan,
            &st.gaussians,
            &train_cams,
            &settings,
            &out,
            &dl_dcolor,
            &dl_ddepth,
        )?;
        guard_finite(it, loss, &grads, &st.gaussians)?;
        st.acc.merge(&batch_acc);
        let lrs = per_param_lrs(cfg, it);
        adam_step(&mut st.gaussians, &grads, &mut st.adam, &lrs);
        for g in &mut st.gaussians {
            g.rotation = normalize_quat(g.rotation);
        }
        losses_log.push(loss);

        if cfg.adc.due(it) {
            let before = st.gaussians.len();
            if before >= cfg.max_gaussians {
                st.acc.reset();
                adc_events.push(AdcEventRow {
                    iter: it,
                    split: 0,
                    cloned: 0,
                    pruned: 0,
                    total: before,
                });
            } else {
                let (next, report) = adc_step(
                    &st.gaussians,
                    &mut st.acc,
                    &cfg.adc,
                    &mut st.thresholds,
                    &mut st.rng,
                );
                if next.len() > cfg.max_gaussians {
                    // Over capacity: drop the whole event (stats were reset).
                    adc_events.push(AdcEventRow {
                        iter: it,
                        split: 0,
                        cloned: 0,
                        pruned: 0,
                        total: before,
                    });
                } else {
                    st.adam = st.adam.remap(&report.remap);
                    st.acc = GradAccumulator::new(next.len(), train_cams.len());
                    st.gaussians = next;
                    adc_events.push(AdcEventRow {
                        iter: it,
                        split: report.split,
                        cloned: report.cloned,
                        pruned: report.pruned,
                        total: report.total,
                    });
                }
            }
        }
        if cfg.opacity_reset_every > 0 && it % cfg.opacity_reset_every == 0 {
            opacity_reset(&mut st.gaussians, cfg.opacity_reset_ceiling);
            // Stale opacity momentum would immediately undo the reset.
            for row in st.adam.m.iter_mut() {
                row[10] = 0.0;
            }
            for row in st.adam.v.iter_mut() {
                row[10] = 0.0;
            }
        }
        ms_acc += t0.elapsed().as_secs_f64() * 1e3;
        ms_n += 1;

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let (psnr_v, ssim_v) = evaluate(
                &st.gaussians,
                dataset,
                eval_views,
                cfg.tile_size,
                &settings,
                &cfg.window,
            )?;
            history.push(MetricsRow {
                iter: it,
                loss,
                psnr: psnr_v,
                ssim: ssim_v,
                n_gauss: st.gaussians.len(),
                iter_ms: ms_acc / f64::from(ms_n.max(1)),
            });
            ms_acc = 0.0;
            ms_n = 0;
        }
        if cfg.checkpoint_at.contains(&it) {
            checkpoints.push(Checkpoint {
                config_hash: config_hash(cfg),
                iteration: it,
                gaussians: st.gaussians.clone(),
                adam: st.adam.clone(),
                accumulator: st.acc.clone(),
                thresholds: st.thresholds,
                rng_seed: st.rng.get_seed(),
                rng_stream: st.rng.get_stream(),
                rng_word_pos: st.rng.get_word_pos(),
            });
        }
    }

    Ok(TrainResult {
        gaussians: st.gaussians,
        history,
        adc_events,
        losses: losses_log,
        checkpoints,
    })
}

/// Loss value plus dense per-slot color and depth adjoints for `backward`.
fn compute_loss(
    cfg: &TrainConfig,
    plan: &RenderPlan,
    out: &RenderOutput,
    images: &[Image],
    cams: &[Camera],
) -> Result<(f64, Vec<Vec<[f64; 3]>>, Vec<Vec<f64>>)> {
    let n_px = (plan.width * plan.height) as usize;
    let zero_depth = vec![vec![0.0; n_px]; plan.views.len()];
    match cfg.loss_mode {
        LossMode::L1 => {
            let (value, grads) = masked_l1(plan, &out.color, images);
            Ok((value, grads, zero_depth))
        }
        LossMode::L2 => {
            let (value, grads) = masked_l2(plan, &out.color, images);
            Ok((value, grads, zero_depth))
        }
        LossMode::L1Dssim => {
            let target = &images[plan.views[0] as usize];
            let (l1_value, l1_grad) = losses::l1(&out.color[0], &target.pixels)?;
            let rendered = Image {
                width: plan.width,
                height: plan.height,
                pixels: out.color[0].clone(),
                depth: None,
            };
            let d = dssim(&rendered, target, &cfg.window)?;
            let lam = cfg.lambda_dssim;
            let mut grads = vec![vec![[0.0; 3]; n_px]];
            for px in 0..n_px {
                for c in 0..3 {
                    grads[0][px][c] = (1.0 - lam) * l1_grad[px][c] + lam * d.grad[px][c];
                }
            }
            Ok(((1.0 - lam) * l1_value + lam * d.value, grads, zero_depth))
        }
        LossMode::L1Dssim3d => {
            let merged = merge_output(out, plan)?;
            let target = merged_target(&merged, images)?;
            let (l1_value, l1_grad) = losses::l1(&merged.color, &target)?;
            let d = dssim3d(&merged, &target, cams, &cfg.window)?;
            let lam = cfg.lambda_dssim;
            let combined: Vec<[f64; 3]> = (0..n_px)
                .map(|px| {
                    let mut g = [0.0; 3];
                    for c in 0..3 {
                        g[c] = (1.0 - lam) * l1_grad[px][c] + lam * d.grad[px][c];
                    }
                    g
                })
                .collect();
            let grads = scatter_merged_grad(&merged, &combined);
            Ok(((1.0 - lam) * l1_value + lam * d.value, grads, zero_depth))
        }
    }
}

fn guard_finite(it: u64, loss: f64, grads: &ParamGrads, gaussians: &[Gaussian3D]) -> Result<()> {
    let mut indices: Vec<usize> = Vec::new();
    for g in 0..gaussians.len() {
        let grad_bad = (0..PARAMS_PER_GAUSSIAN).any(|p| !grads.get(g, p).is_finite());
        let param_bad = gaussians[g].params().iter().any(|v| !v.is_finite());
        if grad_bad || param_bad {
            indices.push(g);
        }
    }
    if loss.is_finite() && indices.is_empty() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            iteration: it,
            indices,
        })
    }
}
