//! Mini-batch construction (single-view vs multi-view) and the
//! gradient-variance laboratory.
//!
//! The laboratory has two floors. `estimate_grad_variance` freezes the scene
//! and Monte-Carlo-samples mini-batches to estimate the variance of the
//! mini-batch gradient of the gaussian means, comparing batching strategies
//! at a fixed pixel budget. `lemma1_experiment` studies the underlying
//! statistical claim in isolation: drawing a fixed sample budget from m of N
//! distributions (without replacement) has sample-mean variance
//!
//! 𝕍(Z̄) = K/N²·Σσᵢ² + K²σ_μ²/(N−1)·(N/m − 1),
//!
//! strictly decreasing in m whenever the distribution means differ. The
//! closed form is cross-checked against an exact brute-force enumeration of
//! every subset choice and every finite-support outcome.

use crate::gradients::backward;
use crate::rasterizer::{render, RasterSettings, RenderError, RenderMode, RenderPlan};
use crate::scene::{Camera, Gaussian3D, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::mem;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("batch wants {b} views but the dataset has {views}")]
    ViewCount { b: usize, views: usize },
    #[error("single_view strategy requires views_per_batch = 1, got {0}")]
    SingleViewB(usize),
    #[error("pixel budget {requested} exceeds {available} available pixels")]
    PixelBudget { requested: usize, available: usize },
    #[error("dataset has {images} images for {cams} cameras")]
    DatasetMismatch { images: usize, cams: usize },
    #[error("variance estimation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample budget N·K = {nk} is not divisible by m = {m}")]
    Divisibility { nk: usize, m: usize },
    #[error("setup has {means} means but {variances} variances")]
    SetupMismatch { means: usize, variances: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// How one training mini-batch is assembled from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchStrategy {
    /// One view, all of its pixels.
    SingleView,
    /// B distinct views, the same total pixel budget spread across them.
    MultiView,
}

impl BatchStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "single_view" => BatchStrategy::SingleView,
            "multi_view" => BatchStrategy::MultiView,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            BatchStrategy::SingleView => "single_view",
            BatchStrategy::MultiView => "multi_view",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiniBatchSpec {
    pub strategy: BatchStrategy,
    pub views_per_batch: usize,
    /// Total pixels per mini-batch (multi-view); single-view always takes
    /// the whole image.
    pub pixels_per_batch: usize,
    pub seed: u64,
}

impl MiniBatchSpec {
    pub fn single_view(seed: u64) -> Self {
        MiniBatchSpec {
            strategy: BatchStrategy::SingleView,
            views_per_batch: 1,
            pixels_per_batch: 0,
            seed,
        }
    }

    pub fn multi_view(views_per_batch: usize, pixels_per_batch: usize, seed: u64) -> Self {
        MiniBatchSpec {
            strategy: BatchStrategy::MultiView,
            views_per_batch,
            pixels_per_batch,
            seed,
        }
    }
}

/// Build the render plan for one mini-batch draw. Deterministic in
/// `(spec.seed, draw)`: each draw index gets its own RNG stream.
///
/// Single-view: one uniformly chosen view, every pixel. Multi-view: B
/// distinct uniformly chosen views; each view receives an equal share of the
/// pixel budget, spread uniformly over its tiles. Budgets up to one full
/// image are dealt from a per-tile shuffle into disjoint per-view chunks, so
/// a budget of exactly width·height partitions the canvas across the views
/// (each pixel rendered from exactly one view, as the merged-canvas losses
/// require); larger budgets subsample each view independently.
pub fn sample_batch(
    spec: &MiniBatchSpec,
    cams: &[Camera],
    tile_size: u32,
    draw: u64,
) -> Result<RenderPlan, BatchError> {
    let n_views = cams.len();
    let (w, h) = (cams[0].width, cams[0].height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(draw);
    match spec.strategy {
        BatchStrategy::SingleView => {
            if spec.views_per_batch != 1 {
                return Err(BatchError::SingleViewB(spec.views_per_batch));
            }
            let view = rand::seq::index::sample(&mut rng, n_views, 1).index(0) as u32;
            Ok(RenderPlan::full(view, w, h, tile_size).with_mode(RenderMode::ThreadEfficient))
        }
        BatchStrategy::MultiView => {
            let b = spec.views_per_batch;
            if b > n_views {
                return Err(BatchError::ViewCount { b, views: n_views });
            }
            let canvas = (w * h) as usize;
            if spec.pixels_per_batch > canvas * b {
                return Err(BatchError::PixelBudget {
                    requested: spec.pixels_per_batch,
                    available: canvas * b,
                });
            }
            let mut views: Vec<u32> = rand::seq::index::sample(&mut rng, n_views, b)
                .into_iter()
                .map(|v| v as u32)
                .collect();
            views.sort_unstable();

            // Tile pixel pools, identical for every view.
            let probe = RenderPlan::full(0, w, h, tile_size);
            let n_tiles = probe.n_tiles();
            let tile_pools: Vec<&[u32]> = (0..n_tiles).map(|t| probe.index_array(0, t)).collect();
            // First (budget mod B) views carry one extra pixel.
            let quotas: Vec<usize> = (0..b)
                .map(|slot| {
                    spec.pixels_per_batch / b + usize::from(slot < spec.pixels_per_batch % b)
                })
                .collect();

            let lists = if spec.pixels_per_batch <= canvas {
                // Disjoint scheme: shuffle each tile once, cut into B chunks,
                // each view draws only from its own chunk.
                let mut chunks: Vec<Vec<Vec<u32>>> = vec![Vec::new(); b];
                for pool in &tile_pools {
                    let shuffled = rand::seq::index::sample(&mut rng, pool.len(), pool.len());
                    let base = pool.len() / b;
                    let rem = pool.len() % b;
                    let mut at = 0usize;
                    for (slot, per_view) in chunks.iter_mut().enumerate() {
                        let len = base + usize::from(slot < rem);
                        per_view.push(
                            (at..at + len).map(|i| pool[shuffled.index(i)]).collect(),
                        );
                        at += len;
                    }
                }
                let partition = spec.pixels_per_batch == canvas;
                let mut lists = Vec::with_capacity(b);
                let mut surplus: Vec<u32> = Vec::new();
                for (slot, tile_chunks) in chunks.into_iter().enumerate() {
                    let quota = quotas[slot];
                    let mut chosen: Vec<u32> = Vec::with_capacity(quota);
                    let mut leftovers: Vec<u32> = Vec::new();
                    if partition {
                        // Full-image budget: take whole chunks (partition).
                        for chunk in tile_chunks {
                            chosen.extend(chunk);
                        }
                    } else {
                        let per_tile = quota / n_tiles;
                        let extra = quota % n_tiles;
                        let tile_order =
                            rand::seq::index::sample(&mut rng, n_tiles, n_tiles);
                        for (rank, tile) in tile_order.into_iter().enumerate() {
                            let chunk = &tile_chunks[tile];
                            let want = (per_tile + usize::from(rank < extra)).min(chunk.len());
                            chosen.extend_from_slice(&chunk[..want]);
                            leftovers.extend_from_slice(&chunk[want..]);
                        }
                        // Tiles smaller than their quota: top up from this
                        // view's own leftovers first, preserving disjointness.
                        if chosen.len() < quota {
                            let need = (quota - chosen.len()).min(leftovers.len());
                            for idx in
                                rand::seq::index::sample(&mut rng, leftovers.len(), need)
                            {
                                chosen.push(mem::replace(&mut leftovers[idx], u32::MAX));
                            }
                            leftovers.retain(|&px| px != u32::MAX);
                        }
                        surplus.extend(leftovers);
                    }
                    lists.push(chosen);
                }
                // A view whose chunks cannot hold its quota borrows unused
                // pixels from other views' chunks; each borrowed pixel is
                // struck from the shared pool so the lists stay disjoint.
                for (slot, chosen) in lists.iter_mut().enumerate() {
                    while chosen.len() < quotas[slot] {
                        let idx = rng.gen_range(0..surplus.len());
                        chosen.push(surplus.swap_remove(idx));
                    }
                    chosen.sort_unstable();
                }
                lists
            } else {
                // Budget beyond one canvas cannot stay disjoint: sample each
                // view independently (merged-canvas losses do not apply).
                let mut lists = Vec::with_capacity(b);
                for &quota in &quotas {
                    let mut chosen: Vec<u32> = Vec::with_capacity(quota);
                    let per_tile = quota / n_tiles;
                    let extra = quota % n_tiles;
                    let tile_order = rand::seq::index::sample(&mut rng, n_tiles, n_tiles);
                    for (rank, tile) in tile_order.into_iter().enumerate() {
                        let pool = tile_pools[tile];
                        let want = (per_tile + usize::from(rank < extra)).min(pool.len());
                        for idx in rand::seq::index::sample(&mut rng, pool.len(), want) {
                            chosen.push(pool[idx]);
                        }
                    }
                    if chosen.len() < quota {
                        let mut taken = vec![false; canvas];
                        for &px in &chosen {
                            taken[px as usize] = true;
                        }
                        let free: Vec<u32> =
                            (0..canvas as u32).filter(|&px| !taken[px as usize]).collect();
                        let need = quota - chosen.len();
                        for idx in rand::seq::index::sample(&mut rng, free.len(), need) {
                            chosen.push(free[idx]);
                        }
                    }
                    chosen.sort_unstable();
                    lists.push(chosen);
                }
                lists
            };
            Ok(RenderPlan::from_pixel_lists(
                views,
                w,
                h,
                tile_size,
                lists,
                RenderMode::ThreadEfficient,
            )?)
        }
    }
}

/// Mean absolute color error over exactly the pixels a plan requests, with
/// its gradient as dense per-slot buffers (zero at unrequested pixels).
pub fn masked_l1(
    plan: &RenderPlan,
    color: &[Vec<[f64; 3]>],
    images: &[Image],
) -> (f64, Vec<Vec<[f64; 3]>>) {
    let n_px = (plan.width * plan.height) as usize;
    let inv = 1.0 / (3.0 * plan.n_requested() as f64);
    let mut value = 0.0;
    let mut grads = vec![vec![[0.0f64; 3]; n_px]; plan.views.len()];
    for (slot, &view) in plan.views.iter().enumerate() {
        let img = &images[view as usize];
        for tile in 0..plan.n_tiles() {
            for &px in &plan.pixel_sets[slot][tile] {
                let px = px as usize;
                for c in 0..3 {
                    let d = color[slot][px][c] - img.pixels[px][c];
                    value += d.abs() * inv;
                    grads[slot][px][c] = if d > 0.0 {
                        inv
                    } else if d < 0.0 {
                        -inv
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    (value, grads)
}

/// Mean squared color error over exactly the pixels a plan requests, with
/// its gradient as dense per-slot buffers (zero at unrequested pixels).
pub fn masked_l2(
    plan: &RenderPlan,
    color: &[Vec<[f64; 3]>],
    images: &[Image],
) -> (f64, Vec<Vec<[f64; 3]>>) {
    let n_px = (plan.width * plan.height) as usize;
    let inv = 1.0 / (3.0 * plan.n_requested() as f64);
    let mut value = 0.0;
    let mut grads = vec![vec![[0.0f64; 3]; n_px]; plan.views.len()];
    for (slot, &view) in plan.views.iter().enumerate() {
        let img = &images[view as usize];
        for tile in 0..plan.n_tiles() {
            for &px in &plan.pixel_sets[slot][tile] {
                let px = px as usize;
                for c in 0..3 {
                    let d = color[slot][px][c] - img.pixels[px][c];
                    value += d * d * inv;
                    grads[slot][px][c] = 2.0 * d * inv;
                }
            }
        }
    }
    (value, grads)
}

/// Monte-Carlo estimate of the mini-batch gradient variance at frozen scene
/// parameters.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub strategy: BatchStrategy,
    pub views_per_batch: usize,
    pub n_samples: usize,
    /// (1/n)·Σ‖g_k‖².
    pub mean_sq_norm: f64,
    /// ‖(1/n)·Σ g_k‖².
    pub sq_norm_of_mean: f64,
    /// `mean_sq_norm − sq_norm_of_mean`, clamped at zero.
    pub variance: f64,
}

/// Reduce flattened per-batch gradient vectors to the variance report.
pub fn variance_from_grads(
    grads: &[Vec<f64>],
    strategy: BatchStrategy,
    views_per_batch: usize,
) -> VarianceReport {
    let n = grads.len();
    let dim = grads[0].len();
    let inv = 1.0 / n as f64;
    let mut mean_sq_norm = 0.0;
    let mut mean = vec![0.0f64; dim];
    for g in grads {
        mean_sq_norm += g.iter().map(|v| v * v).sum::<f64>() * inv;
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v * inv;
        }
    }
    let sq_norm_of_mean: f64 = mean.iter().map(|v| v * v).sum();
    let raw = mean_sq_norm - sq_norm_of_mean;
    debug_assert!(raw >= -1e-9, "variance fell below the numerical floor: {raw}");
    VarianceReport {
        strategy,
        views_per_batch,
        n_samples: n,
        mean_sq_norm,
        sq_norm_of_mean,
        variance: raw.max(0.0),
    }
}

/// Sample `n_samples` mini-batches at frozen parameters, compute the ℓ1
/// gradient of every gaussian mean for each, and report the variance of the
/// flattened gradient vector. Batch gradients are evaluated in parallel;
/// the reduction runs in draw order.
pub fn estimate_grad_variance(
    gaussians: &[Gaussian3D],
    cams: &[Camera],
    images: &[Image],
    spec: &MiniBatchSpec,
    settings: &RasterSettings,
    n_samples: usize,
) -> Result<VarianceReport, BatchError> {
    if n_samples < 2 {
        return Err(BatchError::TooFewSamples(n_samples));
    }
    if images.len() != cams.len() {
        return Err(BatchError::DatasetMismatch {
            images: images.len(),
            cams: cams.len(),
        });
    }
    let grads: Vec<Result<Vec<f64>, BatchError>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|draw| {
            let plan = sample_batch(spec, cams, settings.tile_size, draw)?;
            let out = render(&plan, gaussians, cams, settings)?;
            let (_, dl_dcolor) = masked_l1(&plan, &out.color, images);
            let dl_ddepth =
                vec![vec![0.0; (plan.width * plan.height) as usize]; plan.views.len()];
            let (g, _) = backward(&plan, gaussians, cams, settings, &out, &dl_dcolor, &dl_ddepth)
                .expect("forward state was built from the same plan");
            let mut flat = Vec::with_capacity(3 * gaussians.len());
            for m in &g.d_mean {
                flat.extend_from_slice(&[m.x, m.y, m.z]);
            }
            Ok(flat)
        })
        .collect();
    let grads = grads.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(variance_from_grads(
        &grads,
        spec.strategy,
        spec.views_per_batch,
    ))
}

/// N finite-support distributions for the sample-mean variance study. Each
/// is realized as a symmetric two-point distribution μ ± σ (a single point
/// when σ = 0), which attains any requested mean and variance.
#[derive(Debug, Clone)]
pub struct LemmaOneSetup {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// K: the per-distribution sample count of the balanced case; the total
    /// budget N·K is held fixed as m varies.
    pub samples_per_set: usize,
}

impl LemmaOneSetup {
    pub fn new(means: Vec<f64>, variances: Vec<f64>, samples_per_set: usize) -> Result<Self, BatchError> {
        if means.len() != variances.len() {
            return Err(BatchError::SetupMismatch {
                means: means.len(),
                variances: variances.len(),
            });
        }
        Ok(LemmaOneSetup {
            means,
            variances,
            samples_per_set,
        })
    }

    pub fn n(&self) -> usize {
        self.means.len()
    }

    fn support(&self, i: usize) -> Vec<(f64, f64)> {
        let sigma = self.variances[i].sqrt();
        if sigma == 0.0 {
            vec![(self.means[i], 1.0)]
        } else {
            vec![(self.means[i] - sigma, 0.5), (self.means[i] + sigma, 0.5)]
        }
    }

    /// Population variance of the distribution means.
    pub fn sigma_mu_sq(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.means.iter().sum::<f64>() / n;
        self.means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n
    }
}

/// Closed-form variance of the sample mean when m of N distributions are
/// chosen without replacement and N·K/m samples are drawn from each.
pub fn lemma1_prediction(setup: &LemmaOneSetup, m: usize) -> f64 {
    let n = setup.n() as f64;
    let k = setup.samples_per_set as f64;
    let sum_var: f64 = setup.variances.iter().sum();
    k / (n * n) * sum_var
        + k * k * setup.sigma_mu_sq() / (n - 1.0) * (n / m as f64 - 1.0)
}

fn binomial(n: usize, m: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..m {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// Visit every m-subset of 0..n.
fn for_each_subset(n: usize, m: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        f(&idx);
        // Advance the rightmost index that can move.
        let mut i = m;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - m {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact variance of the sample mean by full enumeration of subset choices
/// and finite-support outcomes; `None` when the state space exceeds the cap.
pub fn enumerate_variance(setup: &LemmaOneSetup, m: usize) -> Option<f64> {
    const CAP: u128 = 1_000_000;
    let n = setup.n();
    let nk = n * setup.samples_per_set;
    let per_dist = nk / m;
    let max_support = (0..n).map(|i| self_support_len(setup, i)).max()? as u128;
    let outcomes_bound = binomial(n, m).checked_mul(max_support.checked_pow(nk as u32)?)?;
    if outcomes_bound > CAP {
        return None;
    }

    let supports: Vec<Vec<(f64, f64)>> = (0..n).map(|i| setup.support(i)).collect();
    let subset_prob = 1.0 / binomial(n, m) as f64;
    let mut e_z = 0.0;
    let mut e_z2 = 0.0;
    for_each_subset(n, m, |subset| {
        // Mixed-radix counter over the nk draw slots of this subset.
        let slot_dist: Vec<usize> = subset
            .iter()
            .flat_map(|&d| std::iter::repeat(d).take(per_dist))
            .collect();
        let radix: Vec<usize> = slot_dist.iter().map(|&d| supports[d].len()).collect();
        let mut digits = vec![0usize; nk];
        loop {
            let mut prob = subset_prob;
            let mut sum = 0.0;
            for (slot, &digit) in digits.iter().enumerate() {
                let (v, p) = supports[slot_dist[slot]][digit];
                sum += v;
                prob *= p;
            }
            let z = sum / n as f64;
            e_z += prob * z;
            e_z2 += prob * z * z;
            // Increment.
            let mut carry = 0;
            loop {
                if carry == nk {
                    break;
                }
                digits[carry] += 1;
                if digits[carry] < radix[carry] {
                    break;
                }
                digits[carry] = 0;
                carry += 1;
            }
            if carry == nk {
                break;
            }
        }
    });
    Some(e_z2 - e_z * e_z)
}

fn self_support_len(setup: &LemmaOneSetup, i: usize) -> usize {
    if setup.variances[i] == 0.0 {
        1
    } else {
        2
    }
}

/// One row of the Lemma-1 experiment output.
#[derive(Debug, Clone)]
pub struct LemmaRow {
    pub m: usize,
    pub var_mc: f64,
    pub ci_half: f64,
    pub var_exact: Option<f64>,
}

/// Monte-Carlo variance of the sample mean for each m, with a batched 99%
/// confidence half-width and the enumeration oracle where feasible.
pub fn lemma1_experiment(
    setup: &LemmaOneSetup,
    ms: &[usize],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<LemmaRow>, BatchError> {
    let n = setup.n();
    let nk = n * setup.samples_per_set;
    for &m in ms {
        if m == 0 || m > n || nk % m != 0 {
            return Err(BatchError::Divisibility { nk, m });
        }
    }
    const N_BATCHES: usize = 10;
    let per_batch = (n_trials / N_BATCHES).max(2);
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let per_dist = nk / m;
        let batch_vars: Vec<f64> = (0..N_BATCHES as u64)
            .into_par_iter()
            .map(|batch| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((m as u64) << 32 | batch);
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for _ in 0..per_batch {
                    let subset = rand::seq::index::sample(&mut rng, n, m);
                    let mut total = 0.0;
                    for d in subset {
                        let sup = setup.support(d);
                        for _ in 0..per_dist {
                            let u: f64 = rand::Rng::gen(&mut rng);
                            let mut acc = 0.0;
                            let mut value = sup[sup.len() - 1].0;
                            for &(v, p) in &sup {
                                acc += p;
                                if u < acc {
                                    value = v;
                                    break;
                                }
                            }
                            total += value;
                        }
                    }
                    let z = total / n as f64;
                    sum += z;
                    sum_sq += z * z;
                }
                let inv = 1.0 / per_batch as f64;
                (sum_sq * inv - (sum * inv) * (sum * inv)).max(0.0)
            })
            .collect();
        let mean = batch_vars.iter().sum::<f64>() / N_BATCHES as f64;
        let spread = batch_vars
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (N_BATCHES - 1) as f64;
        let ci_half = 2.576 * spread.sqrt() / (N_BATCHES as f64).sqrt();
        rows.push(LemmaRow {
            m,
            var_mc: mean,
            ci_half,
            var_exact: enumerate_variance(setup, m),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{l1, l2};
    use crate::scene::{make_synthetic, make_synthetic_sized, CameraLayout};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_view_draws_are_uniform() {
        let (_, cams) = make_synthetic(3, 1, 8, CameraLayout::Orbit).unwrap();
        let spec = MiniBatchSpec::single_view(42);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for draw in 0..draws {
            let plan = sample_batch(&spec, &cams, 16, draw).unwrap();
            counts[plan.views[0] as usize] += 1;
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of chi-square with 7 degrees of freedom.
        assert!(chi2 < 18.475, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn multi_view_batches_hit_exact_budget_with_distinct_views() {
        let (_, cams) = make_synthetic(3, 1, 8, CameraLayout::Orbit).unwrap();
        for &budget in &[4096usize, 1001, 64] {
            let spec = MiniBatchSpec::multi_view(4, budget, 9);
            for draw in 0..20 {
                let plan = sample_batch(&spec, &cams, 16, draw).unwrap();
                assert_eq!(plan.n_requested(), budget, "budget {budget} draw {draw}");
                let mut views = plan.views.clone();
                views.dedup();
                assert_eq!(views.len(), 4, "distinct views");
                for slot in 0..4 {
                    let mut all: Vec<u32> = (0..plan.n_tiles())
                        .flat_map(|t| plan.pixel_sets[slot][t].iter().copied())
                        .collect();
                    let before = all.len();
                    all.sort_unstable();
                    all.dedup();
                    assert_eq!(all.len(), before, "no duplicate pixels");
                }
            }
        }
    }

    #[test]
    fn multi_view_spreads_budget_across_tiles() {
        let (_, cams) = make_synthetic(3, 1, 8, CameraLayout::Orbit).unwrap();
        let spec = MiniBatchSpec::multi_view(4, 4096, 9);
        let plan = sample_batch(&spec, &cams, 16, 0).unwrap();
        // 64x64 with 16px tiles: 16 tiles, 1024 px per view => 64 per tile.
        for slot in 0..4 {
            for tile in 0..plan.n_tiles() {
                assert_eq!(plan.pixel_sets[slot][tile].len(), 64);
            }
        }
    }

    #[test]
    fn full_canvas_budget_partitions_pixels_across_views() {
        let (_, cams) = make_synthetic(3, 1, 8, CameraLayout::Orbit).unwrap();
        let spec = MiniBatchSpec::multi_view(4, 64 * 64, 9);
        for draw in 0..6 {
            let plan = sample_batch(&spec, &cams, 16, draw).unwrap();
            let mut owner = vec![0u32; 64 * 64];
            for slot in 0..4 {
                for tile in 0..plan.n_tiles() {
                    for &px in &plan.pixel_sets[slot][tile] {
                        owner[px as usize] += 1;
                    }
                }
            }
            assert!(owner.iter().all(|&c| c == 1), "each pixel in exactly one view");
        }
    }

    #[test]
    fn sub_canvas_budgets_stay_disjoint_even_when_chunks_run_dry() {
        let (_, cams) = make_synthetic(3, 1, 8, CameraLayout::Orbit).unwrap();
        // With B = 3 every 256px tile splits 86/85/85, so the small views hold
        // 1360 pixels while a 4090 budget asks them for 1363: the shortfall
        // must be borrowed from other views' unused pixels without overlap.
        let spec = MiniBatchSpec::multi_view(3, 4090, 9);
        for draw in 0..6 {
            let plan = sample_batch(&spec, &cams, 16, draw).unwrap();
            assert_eq!(plan.n_requested(), 4090);
            let mut owner = vec![0u32; 64 * 64];
            for slot in 0..3 {
                for tile in 0..plan.n_tiles() {
                    for &px in &plan.pixel_sets[slot][tile] {
                        owner[px as usize] += 1;
                    }
                }
            }
            assert!(owner.iter().all(|&c| c <= 1), "no pixel sampled twice");
        }
    }

    #[test]
    fn single_view_plan_reproduces_full_image_loss_exactly() {
        let (gaussians, cams) = make_synthetic(11, 20, 4, CameraLayout::Orbit).unwrap();
        let settings = RasterSettings::default();
        let images: Vec<Image> = (0..4)
            .map(|v| {
                let plan = RenderPlan::full(v, 64, 64, 16);
                render(&plan, &gaussians, &cams, &settings).unwrap().image(0)
            })
            .collect();
        let spec = MiniBatchSpec::single_view(7);
        let plan = sample_batch(&spec, &cams, 16, 3).unwrap();
        let out = render(&plan, &gaussians, &cams, &settings).unwrap();
        let (masked, _) = masked_l1(&plan, &out.color, &images);
        let (full, _) = l1(&out.color[0], &images[plan.views[0] as usize].pixels).unwrap();
        assert_eq!(masked, full);
        let (masked2, _) = masked_l2(&plan, &out.color, &images);
        let (full2, _) = l2(&out.color[0], &images[plan.views[0] as usize].pixels).unwrap();
        assert_eq!(masked2, full2);
    }

    #[test]
    fn batch_spec_errors() {
        let (_, cams) = make_synthetic(3, 1, 4, CameraLayout::Orbit).unwrap();
        let too_many = MiniBatchSpec::multi_view(5, 100, 0);
        assert!(matches!(
            sample_batch(&too_many, &cams, 16, 0),
            Err(BatchError::ViewCount { b: 5, views: 4 })
        ));
        let bad_b = MiniBatchSpec {
            views_per_batch: 2,
            ..MiniBatchSpec::single_view(0)
        };
        assert!(matches!(
            sample_batch(&bad_b, &cams, 16, 0),
            Err(BatchError::SingleViewB(2))
        ));
        let greedy = MiniBatchSpec::multi_view(2, 3 * 64 * 64, 0);
        assert!(matches!(
            sample_batch(&greedy, &cams, 16, 0),
            Err(BatchError::PixelBudget { .. })
        ));
    }

    #[test]
    fn injected_two_gradient_closed_form() {
        let grads = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = variance_from_grads(&grads, BatchStrategy::SingleView, 1);
        assert_relative_eq!(r.mean_sq_norm, 1.0);
        assert_relative_eq!(r.sq_norm_of_mean, 0.5);
        assert_relative_eq!(r.variance, 0.5);
    }

    #[test]
    fn identical_dataset_has_zero_variance() {
        let (gaussians, cams) = make_synthetic(13, 15, 2, CameraLayout::Orbit).unwrap();
        // Four copies of the same camera and the same image.
        let cams: Vec<Camera> = vec![cams[0].clone(); 4];
        let settings = RasterSettings::default();
        let img = {
            let plan = RenderPlan::full(0, 64, 64, 16);
            let mut img = render(&plan, &gaussians, &cams, &settings).unwrap().image(0);
            for px in img.pixels.iter_mut() {
                px[0] = (px[0] + 0.2).min(1.0);
            }
            img
        };
        let images = vec![img.clone(), img.clone(), img.clone(), img];
        let spec = MiniBatchSpec::single_view(3);
        let r = estimate_grad_variance(&gaussians, &cams, &images, &spec, &settings, 8).unwrap();
        assert!(r.variance <= 1e-12, "variance = {}", r.variance);
    }

    #[test]
    fn too_few_samples_rejected() {
        let (gaussians, cams) = make_synthetic(13, 5, 2, CameraLayout::Orbit).unwrap();
        let images = vec![
            Image {
                width: 64,
                height: 64,
                pixels: vec![[0.0; 3]; 64 * 64],
                depth: None,
            };
            2
        ];
        let spec = MiniBatchSpec::single_view(3);
        assert!(matches!(
            estimate_grad_variance(
                &gaussians,
                &cams,
                &images,
                &spec,
                &RasterSettings::default(),
                1
            ),
            Err(BatchError::TooFewSamples(1))
        ));
    }

    #[test]
    fn multi_view_variance_below_single_view_on_fixed_scene() {
        let (gaussians, cams) =
            make_synthetic_sized(55, 40, 8, CameraLayout::Orbit, 32, 32).unwrap();
        let (target_g, _) =
            make_synthetic_sized(56, 40, 8, CameraLayout::Orbit, 32, 32).unwrap();
        let settings = RasterSettings::default();
        let images: Vec<Image> = (0..8)
            .map(|v| {
                let plan = RenderPlan::full(v, 32, 32, 16);
                render(&plan, &target_g, &cams, &settings).unwrap().image(0)
            })
            .collect();
        let n_px = 32 * 32;
        let single = estimate_grad_variance(
            &gaussians,
            &cams,
            &images,
            &MiniBatchSpec::single_view(21),
            &settings,
            24,
        )
        .unwrap();
        let multi = estimate_grad_variance(
            &gaussians,
            &cams,
            &images,
            &MiniBatchSpec::multi_view(4, n_px, 21),
            &settings,
            24,
        )
        .unwrap();
        assert!(
            multi.variance < single.variance,
            "multi {} vs single {}",
            multi.variance,
            single.variance
        );
    }

    #[test]
    fn enumeration_matches_closed_form() {
        let setups = [
            LemmaOneSetup::new(vec![0.0, 1.0], vec![0.3, 0.7], 1).unwrap(),
            LemmaOneSetup::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.0, 1.1], 2).unwrap(),
            LemmaOneSetup::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.5, 0.5, 0.5, 0.5], 1).unwrap(),
        ];
        for setup in &setups {
            let nk = setup.n() * setup.samples_per_set;
            for m in 1..=setup.n() {
                if nk % m != 0 {
                    continue;
                }
                let exact = enumerate_variance(setup, m).expect("state space is tiny");
                let predicted = lemma1_prediction(setup, m);
                assert_relative_eq!(exact, predicted, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_sigma_zero_enumeration() {
        let setup = LemmaOneSetup::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4], 1).unwrap();
        let full = enumerate_variance(&setup, 4).unwrap();
        assert_eq!(full, 0.0);
        // m = 1: Z̄ is the chosen mean, uniform over {0,1,2,3}.
        let single = enumerate_variance(&setup, 1).unwrap();
        assert_relative_eq!(single, 1.25, epsilon = 1e-12);
    }

    #[test]
    fn enumeration_strictly_decreases_in_m() {
        let setup =
            LemmaOneSetup::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.4, 0.1, 0.9, 0.2], 1).unwrap();
        let vars: Vec<f64> = [1usize, 2, 4]
            .iter()
            .map(|&m| enumerate_variance(&setup, m).unwrap())
            .collect();
        assert!(vars[0] > vars[1] && vars[1] > vars[2], "{vars:?}");
    }

    #[test]
    fn monte_carlo_matches_enumeration_within_ci() {
        let setup = LemmaOneSetup::new(vec![0.0, 1.0], vec![0.25, 0.5], 1).unwrap();
        let rows = lemma1_experiment(&setup, &[1, 2], 20_000, 5).unwrap();
        for row in &rows {
            let exact = row.var_exact.expect("feasible");
            assert!(
                (row.var_mc - exact).abs() <= 3.0 * row.ci_half,
                "m={}: mc {} exact {} ci {}",
                row.m,
                row.var_mc,
                exact,
                row.ci_half
            );
        }
        assert!(rows[0].var_mc > rows[1].var_mc);
    }

    #[test]
    fn equal_means_make_variance_independent_of_m() {
        let setup = LemmaOneSetup::new(vec![1.5; 4], vec![0.3, 0.3, 0.3, 0.3], 1).unwrap();
        let e1 = enumerate_variance(&setup, 1).unwrap();
        let e4 = enumerate_variance(&setup, 4).unwrap();
        assert_relative_eq!(e1, e4, epsilon = 1e-12);
        let rows = lemma1_experiment(&setup, &[1, 2, 4], 20_000, 11).unwrap();
        for pair in rows.windows(2) {
            assert!(
                (pair[0].var_mc - pair[1].var_mc).abs()
                    <= 3.0 * (pair[0].ci_half + pair[1].ci_half),
                "{pair:?}"
            );
        }
    }

    #[test]
    fn divisibility_violation_rejected() {
        let setup = LemmaOneSetup::new(vec![0.0, 1.0, 2.0], vec![0.1; 3], 1).unwrap();
        assert!(matches!(
            lemma1_experiment(&setup, &[2], 100, 0),
            Err(BatchError::Divisibility { nk: 3, m: 2 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        /// One-pass estimator equals the two-pass subtract-the-mean form.
        #[test]
        fn estimator_identity(
            flat in prop::collection::vec(-5.0f64..5.0, 6..60),
            dim in 1usize..4,
        ) {
            let n = flat.len() / dim;
            prop_assume!(n >= 2);
            let grads: Vec<Vec<f64>> =
                (0..n).map(|i| flat[i * dim..(i + 1) * dim].to_vec()).collect();
            let r = variance_from_grads(&grads, BatchStrategy::SingleView, 1);
            let mut mean = vec![0.0; dim];
            for g in &grads {
                for (m, v) in mean.iter_mut().zip(g) {
                    *m += v / n as f64;
                }
            }
            let two_pass: f64 = grads
                .iter()
                .map(|g| {
                    g.iter()
                        .zip(&mean)
                        .map(|(v, m)| (v - m) * (v - m))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            let scale = two_pass.abs().max(r.variance.abs()).max(1e-30);
            prop_assert!((two_pass - r.variance).abs() / scale <= 1e-10);
        }

        /// Closed form: strictly decreasing in m whenever means differ.
        #[test]
        fn prediction_monotone_when_means_differ(
            mu0 in -2.0f64..2.0,
            gap in 0.1f64..2.0,
            var in prop::collection::vec(0.0f64..1.0, 4),
            k in 1usize..3,
        ) {
            let means = vec![mu0, mu0 + gap, mu0 + 2.0 * gap, mu0 - gap];
            let setup = LemmaOneSetup::new(means, var, k).unwrap();
            let v1 = lemma1_prediction(&setup, 1);
            let v2 = lemma1_prediction(&setup, 2);
            let v4 = lemma1_prediction(&setup, 4);
            prop_assert!(v1 > v2 && v2 > v4);
        }
    }
}
