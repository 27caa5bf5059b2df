//! Adaptive density control: periodic split/clone/prune of gaussians driven
//! by the accumulated positional-gradient statistics, plus the opacity reset
//! that prevents saturation.
//!
//! Two metric modes. `EOld` reproduces the classic rule: one threshold on
//! the view-summed gradient, split the large candidates, clone the small
//! ones. `MultiView` gates splitting on the per-pixel-norm metric e1 and
//! cloning on the per-view-norm metric e2, which survive the sign
//! cancellation that zeroes the classic metric when different views pull a
//! gaussian in opposite directions. The e1/e2 thresholds are calibrated
//! once, at the first densification event, by matching the classic rule's
//! candidate counts per size category, then frozen.

use crate::gradients::{densify_metrics, GradAccumulator};
use crate::scene::{logit, Gaussian3D};
use rand::Rng;

/// Which accumulated gradient statistic selects densification candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    EOld,
    MultiView,
}

impl MetricMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "e_old" => MetricMode::EOld,
            "multi_view" => MetricMode::MultiView,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricMode::EOld => "e_old",
            MetricMode::MultiView => "multi_view",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdcConfig {
    /// Candidate threshold in NDC-gradient units (the e_old rule; also the
    /// calibration anchor and fallback for the multi-view thresholds).
    pub grad_threshold: f64,
    /// World-space max-scale boundary between "split it" and "clone it".
    pub size_threshold_world: f64,
    /// Each split child's scales shrink by this factor.
    pub split_factor: f64,
    /// Children per split.
    pub split_count: usize,
    /// Base opacity floor; the effective floor is `prune_opacity · batch_views`.
    pub prune_opacity: f64,
    /// World-space max-scale ceiling past which a gaussian is pruned.
    pub prune_scale_max: f64,
    /// Iterations between densification events.
    pub interval: u64,
    pub start_iter: u64,
    pub stop_iter: u64,
    pub metric_mode: MetricMode,
    /// Views per mini-batch; scales the opacity pruning floor.
    pub batch_views: usize,
}

impl Default for AdcConfig {
    fn default() -> Self {
        AdcConfig {
            grad_threshold: 2e-4,
            size_threshold_world: 0.1,
            split_factor: 1.6,
            split_count: 2,
            prune_opacity: 0.005,
            prune_scale_max: 1.0,
            interval: 100,
            start_iter: 500,
            stop_iter: u64::MAX,
            metric_mode: MetricMode::EOld,
            batch_views: 1,
        }
    }
}

impl AdcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.prune_opacity > 0.0 && self.prune_opacity < 1.0) {
            return Err(format!("prune_opacity must be in (0,1), got {}", self.prune_opacity));
        }
        if self.split_count < 2 {
            return Err(format!("split_count must be >= 2, got {}", self.split_count));
        }
        if self.interval < 1 {
            return Err("interval must be >= 1".into());
        }
        if self.split_factor <= 1.0 {
            return Err(format!("split_factor must be > 1, got {}", self.split_factor));
        }
        if self.batch_views < 1 {
            return Err("batch_views must be >= 1".into());
        }
        Ok(())
    }

    /// True when iteration `it` is a densification event.
    pub fn due(&self, it: u64) -> bool {
        it >= self.start_iter && it <= self.stop_iter && it % self.interval == 0
    }
}

/// Frozen e1/e2 candidate thresholds (multi-view mode only).
#[derive(Debug, Clone, Copy)]
pub struct MultiViewThresholds {
    pub split: f64,
    pub clone: f64,
}

#[derive(Debug, Clone)]
pub struct AdcReport {
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    /// Gaussian count after the step.
    pub total: usize,
    /// For each output gaussian: `Some(old index)` if it is a surviving
    /// input gaussian (optimizer moments carry over), `None` if newly
    /// created (split child or clone copy; moments start at zero).
    pub remap: Vec<Option<usize>>,
    /// Set on the event that calibrated the multi-view thresholds.
    pub calibrated: Option<MultiViewThresholds>,
}

/// Threshold passing exactly `k` of the (descending-sorted) values under a
/// strict `>` test, or the configured default when nothing should pass.
fn count_matching_threshold(mut values: Vec<f64>, k: usize, fallback: f64) -> f64 {
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if k == 0 || values.is_empty() {
        // Nothing passed the classic rule here; keep the uncalibrated
        // default rather than freezing an unreachable threshold.
        return fallback;
    }
    if k >= values.len() {
        return 0.5 * values[values.len() - 1];
    }
    0.5 * (values[k - 1] + values[k])
}

/// Calibrate the multi-view thresholds so that, on this accumulator state,
/// the e1-split and e2-clone candidate counts match the classic e_old rule's
/// counts per size category.
pub fn calibrate_multi_view_thresholds(
    gaussians: &[Gaussian3D],
    acc: &GradAccumulator,
    cfg: &AdcConfig,
) -> MultiViewThresholds {
    let m = densify_metrics(acc);
    let large: Vec<bool> = gaussians
        .iter()
        .map(|g| g.scales().max() > cfg.size_threshold_world)
        .collect();
    let k_split = (0..gaussians.len())
        .filter(|&g| large[g] && m.e_old[g] > cfg.grad_threshold)
        .count();
    let k_clone = (0..gaussians.len())
        .filter(|&g| !large[g] && m.e_old[g] > cfg.grad_threshold)
        .count();
    let e1_large: Vec<f64> = (0..gaussians.len())
        .filter(|&g| large[g])
        .map(|g| m.e1[g])
        .collect();
    let e2_small: Vec<f64> = (0..gaussians.len())
        .filter(|&g| !large[g])
        .map(|g| m.e2[g])
        .collect();
    MultiViewThresholds {
        split: count_matching_threshold(e1_large, k_split, cfg.grad_threshold),
        clone: count_matching_threshold(e2_small, k_clone, cfg.grad_threshold),
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One densification event: select candidates from the accumulated
/// statistics, split the large ones, clone the small ones, prune, and reset
/// the accumulator. `thresholds` holds the frozen multi-view calibration;
/// `None` triggers calibration on a multi-view event.
pub fn adc_step(
    gaussians: &[Gaussian3D],
    acc: &mut GradAccumulator,
    cfg: &AdcConfig,
    thresholds: &mut Option<MultiViewThresholds>,
    rng: &mut impl Rng,
) -> (Vec<Gaussian3D>, AdcReport) {
    let n = gaussians.len();
    let m = densify_metrics(acc);
    let large: Vec<bool> = gaussians
        .iter()
        .map(|g| g.scales().max() > cfg.size_threshold_world)
        .collect();

    let mut calibrated = None;
    let (split_set, clone_set): (Vec<bool>, Vec<bool>) = match cfg.metric_mode {
        MetricMode::EOld => {
            let split = (0..n)
                .map(|g| large[g] && m.e_old[g] > cfg.grad_threshold)
                .collect();
            let clone = (0..n)
                .map(|g| !large[g] && m.e_old[g] > cfg.grad_threshold)
                .collect();
            (split, clone)
        }
        MetricMode::MultiView => {
            let thr = *thresholds.get_or_insert_with(|| {
                let t = calibrate_multi_view_thresholds(gaussians, acc, cfg);
                calibrated = Some(t);
                t
            });
            let split = (0..n).map(|g| large[g] && m.e1[g] > thr.split).collect();
            let clone = (0..n).map(|g| !large[g] && m.e2[g] > thr.clone).collect();
            (split, clone)
        }
    };

    let mut out = Vec::with_capacity(n + 8);
    let mut remap = Vec::with_capacity(n + 8);
    let mut n_split = 0usize;
    let mut n_clone = 0usize;
    for (gi, g) in gaussians.iter().enumerate() {
        if split_set[gi] {
            n_split += 1;
            let rot = g.rotation_matrix();
            let s = g.scales();
            for _ in 0..cfg.split_count {
                let xi = nalgebra::Vector3::new(
                    standard_normal(rng),
                    standard_normal(rng),
                    standard_normal(rng),
                );
                let mut child = g.clone();
                child.mean = g.mean + rot * xi.component_mul(&s);
                child.log_scale = g.log_scale.add_scalar(-cfg.split_factor.ln());
                out.push(child);
                remap.push(None);
            }
        } else if clone_set[gi] {
            n_clone += 1;
            out.push(g.clone());
            remap.push(Some(gi));
            out.push(g.clone());
            remap.push(None);
        } else {
            out.push(g.clone());
            remap.push(Some(gi));
        }
    }

    let floor = cfg.prune_opacity * cfg.batch_views as f64;
    let mut pruned = 0usize;
    let mut kept = Vec::with_capacity(out.len());
    let mut kept_remap = Vec::with_capacity(out.len());
    for (g, r) in out.into_iter().zip(remap) {
        if g.opacity() < floor || g.scales().max() > cfg.prune_scale_max {
            pruned += 1;
        } else {
            kept.push(g);
            kept_remap.push(r);
        }
    }

    acc.reset();
    let report = AdcReport {
        split: n_split,
        cloned: n_clone,
        pruned,
        total: kept.len(),
        remap: kept_remap,
        calibrated,
    };
    (kept, report)
}

/// Clamp every opacity to `min(o, ceiling)` through a logit update.
pub fn opacity_reset(gaussians: &mut [Gaussian3D], ceiling: f64) {
    assert!(ceiling > 0.0 && ceiling <= 1.0, "ceiling must be in (0,1]");
    let cap = logit(ceiling);
    for g in gaussians {
        if g.opacity_logit > cap {
            g.opacity_logit = cap;
        }
    }
}
