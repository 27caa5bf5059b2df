//! Tile-based forward rasterizer with three schedulers.
//!
//! `full` renders one view with one block per tile. `naive_masked` renders a
//! multi-view mini-batch by launching full blocks everywhere and masking
//! pixels off, which leaves lanes idle. `thread_efficient` launches one block
//! per (tile, view) sized to the actual pixel count (padded to warp
//! granularity), so lanes stay busy.
//!
//! A "block" here is a unit of work for one worker; its "threads" are loop
//! lanes. Idle-lane accounting matches the GPU model; the wall-clock benefit
//! on CPU comes from never iterating masked pixels. Blending is per pixel
//! and identical across schedulers, so modes agree bit for bit wherever
//! their pixel sets overlap, at any worker count.

use crate::projection::{project, Projected2D, ProjectionParams};
use crate::scene::{Camera, Gaussian3D, Image};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Full,
    NaiveMasked,
    ThreadEfficient,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Full => "full",
            RenderMode::NaiveMasked => "naive_masked",
            RenderMode::ThreadEfficient => "thread_efficient",
        }
    }
}

/// Rasterization knobs; defaults are the usual splatting constants.
#[derive(Debug, Clone)]
pub struct RasterSettings {
    /// Square tile edge in pixels; one of 8, 16, 32.
    pub tile_size: u32,
    pub projection: ProjectionParams,
    /// Contributions with α below this are skipped.
    pub alpha_cutoff: f64,
    /// Front-to-back accumulation stops once transmittance drops below this.
    pub transmittance_cutoff: f64,
    /// Lane-padding granularity for thread_efficient blocks.
    pub warp: u32,
    /// Hard cap on total (gaussian, tile, view) bin entries.
    pub bin_cap: usize,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            tile_size: 16,
            projection: ProjectionParams::default(),
            alpha_cutoff: 1.0 / 255.0,
            transmittance_cutoff: 1e-4,
            warp: 32,
            bin_cap: 10_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("tile size {0} unsupported (use 8, 16 or 32)")]
    BadTileSize(u32),
    #[error("plan references view {0} but the scene has {1} cameras")]
    BadView(u32, usize),
    #[error("plan is {pw}×{ph} but view {view} is {cw}×{ch}")]
    SizeMismatch {
        view: u32,
        pw: u32,
        ph: u32,
        cw: u32,
        ch: u32,
    },
    #[error("pixel index {0} out of range for a {1}×{2} image")]
    PixelOutOfRange(u32, u32, u32),
    #[error("binning explosion: {0} entries exceed the cap of {1}")]
    BinningExplosion(usize, usize),
    #[error("pixel {0} listed under tile {1}, belongs to tile {2}")]
    PixelTileMismatch(u32, usize, usize),
}

/// Which pixels of which views to render, organized by tile.
///
/// `pixel_sets[slot][tile]` is the ascending list of pixel indices
/// (row-major, within the view's image) that view slot wants from that tile;
/// this doubles as the thread→pixel index array A of the thread-efficient
/// scheduler.
#[derive(Debug, Clone)]
pub struct RenderPlan {
    /// Dataset view indices, one per slot (the mini-batch).
    pub views: Vec<u32>,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub pixel_sets: Vec<Vec<Vec<u32>>>,
    /// Lanes per full block (tile area); power of two ≤ 1024 for the
    /// supported tile sizes.
    pub block_size: u32,
    pub mode: RenderMode,
}

impl RenderPlan {
    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.tile_size) as usize
    }

    pub fn tiles_y(&self) -> usize {
        self.height.div_ceil(self.tile_size) as usize
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles_x() * self.tiles_y()
    }

    pub fn tile_of_pixel(&self, px: u32) -> usize {
        let x = px % self.width;
        let y = px / self.width;
        (y / self.tile_size) as usize * self.tiles_x() + (x / self.tile_size) as usize
    }

    /// Every pixel of one view.
    pub fn full(view: u32, width: u32, height: u32, tile_size: u32) -> Self {
        let mut plan = RenderPlan {
            views: vec![view],
            width,
            height,
            tile_size,
            pixel_sets: Vec::new(),
            block_size: tile_size * tile_size,
            mode: RenderMode::Full,
        };
        let mut sets = vec![Vec::new(); plan.n_tiles()];
        for px in 0..width * height {
            sets[plan.tile_of_pixel(px)].push(px);
        }
        plan.pixel_sets = vec![sets];
        plan
    }

    /// Plan from explicit per-view pixel lists (any order; sorted and bucketed
    /// per tile here).
    pub fn from_pixel_lists(
        views: Vec<u32>,
        width: u32,
        height: u32,
        tile_size: u32,
        pixels_per_view: Vec<Vec<u32>>,
        mode: RenderMode,
    ) -> Result<Self, RenderError> {
        assert_eq!(views.len(), pixels_per_view.len());
        let mut plan = RenderPlan {
            views,
            width,
            height,
            tile_size,
            pixel_sets: Vec::new(),
            block_size: tile_size * tile_size,
            mode,
        };
        let n_tiles = plan.n_tiles();
        for list in pixels_per_view {
            let mut sets = vec![Vec::new(); n_tiles];
            for px in list {
                if px >= width * height {
                    return Err(RenderError::PixelOutOfRange(px, width, height));
                }
                sets[plan.tile_of_pixel(px)].push(px);
            }
            for set in &mut sets {
                set.sort_unstable();
            }
            plan.pixel_sets.push(sets);
        }
        Ok(plan)
    }

    pub fn with_mode(mut self, mode: RenderMode) -> Self {
        self.mode = mode;
        self
    }

    /// The thread→pixel map A for one (tile, view) block.
    pub fn index_array(&self, slot: usize, tile: usize) -> &[u32] {
        &self.pixel_sets[slot][tile]
    }

    pub fn n_requested(&self) -> usize {
        self.pixel_sets
            .iter()
            .map(|sets| sets.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    pub fn validate(&self, cams: &[Camera], settings: &RasterSettings) -> Result<(), RenderError> {
        if !matches!(self.tile_size, 8 | 16 | 32) {
            return Err(RenderError::BadTileSize(self.tile_size));
        }
        for &view in &self.views {
            let cam = cams
                .get(view as usize)
                .ok_or(RenderError::BadView(view, cams.len()))?;
            if cam.width != self.width || cam.height != self.height {
                return Err(RenderError::SizeMismatch {
                    view,
                    pw: self.width,
                    ph: self.height,
                    cw: cam.width,
                    ch: cam.height,
                });
            }
        }
        let _ = settings;
        for sets in &self.pixel_sets {
            for (tile, set) in sets.iter().enumerate() {
                for &px in set {
                    if px >= self.width * self.height {
                        return Err(RenderError::PixelOutOfRange(px, self.width, self.height));
                    }
                    let owner = self.tile_of_pixel(px);
                    if owner != tile {
                        return Err(RenderError::PixelTileMismatch(px, tile, owner));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Depth-sorted gaussians overlapping one tile in one view.
#[derive(Debug, Clone)]
pub struct TileBin {
    pub tile_id: (u32, u32),
    pub view_slot: u32,
    /// (gaussian index, camera depth), ascending depth, ties by index.
    pub entries: Vec<(u32, f64)>,
}

/// Project every gaussian into every view slot of the plan.
pub fn project_all(
    plan: &RenderPlan,
    gaussians: &[Gaussian3D],
    cams: &[Camera],
    params: &ProjectionParams,
) -> Vec<Vec<Projected2D>> {
    plan.views
        .iter()
        .map(|&v| {
            let cam = &cams[v as usize];
            gaussians.iter().map(|g| project(g, cam, params)).collect()
        })
        .collect()
}

fn disk_hits_tile(center: (f64, f64), radius: f64, rect: (f64, f64, f64, f64)) -> bool {
    let (x0, y0, x1, y1) = rect;
    let dx = center.0 - center.0.clamp(x0, x1);
    let dy = center.1 - center.1.clamp(y0, y1);
    dx * dx + dy * dy <= radius * radius
}

/// Bucket projected gaussians into per-(tile, view) bins and depth-sort each
/// bin. Bins are dense, indexed `slot·n_tiles + tile`; different views of the
/// same tile are distinct bins.
pub fn bin_and_sort(
    projected: &[Vec<Projected2D>],
    plan: &RenderPlan,
    cap: usize,
) -> Result<Vec<TileBin>, RenderError> {
    let (tx_n, ty_n) = (plan.tiles_x(), plan.tiles_y());
    let ts = plan.tile_size as f64;
    let mut bins: Vec<TileBin> = (0..projected.len() * tx_n * ty_n)
        .map(|i| {
            let tile = i % (tx_n * ty_n);
            TileBin {
                tile_id: ((tile % tx_n) as u32, (tile / tx_n) as u32),
                view_slot: (i / (tx_n * ty_n)) as u32,
                entries: Vec::new(),
            }
        })
        .collect();

    let mut total = 0usize;
    for (slot, views) in projected.iter().enumerate() {
        for (gi, p) in views.iter().enumerate() {
            if !p.visible {
                continue;
            }
            let (cx, cy, r) = (p.mean2d.x, p.mean2d.y, p.radius);
            let tx0 = (((cx - r) / ts).floor().max(0.0)) as usize;
            let ty0 = (((cy - r) / ts).floor().max(0.0)) as usize;
            let tx1 = ((((cx + r) / ts).floor()) as isize).clamp(0, tx_n as isize - 1) as usize;
            let ty1 = ((((cy + r) / ts).floor()) as isize).clamp(0, ty_n as isize - 1) as usize;
            if tx0 >= tx_n || ty0 >= ty_n {
                continue;
            }
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let rect = (
                        tx as f64 * ts,
                        ty as f64 * ts,
                        ((tx + 1) as f64 * ts).min(plan.width as f64),
                        ((ty + 1) as f64 * ts).min(plan.height as f64),
                    );
                    if disk_hits_tile((cx, cy), r, rect) {
                        total += 1;
                        if total > cap {
                            return Err(RenderError::BinningExplosion(total, cap));
                        }
                        bins[slot * tx_n * ty_n + ty * tx_n + tx]
                            .entries
                            .push((gi as u32, p.depth));
                    }
                }
            }
        }
    }
    for bin in &mut bins {
        bin.entries
            .sort_unstable_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    }
    Ok(bins)
}

/// Front-to-back blend of one pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelBlend {
    pub color: [f64; 3],
    /// Alpha-weighted expected depth (no background sentinel applied).
    pub depth_acc: f64,
    pub t_final: f64,
    /// 1-based rank of the last contributing bin entry; 0 if none.
    pub last_contrib: u32,
    /// Bin entries examined before exit (for fetch accounting).
    pub iterated: u32,
}

/// Blend `entries` (depth-sorted) at pixel position `pos`. Contributions with
/// α < alpha_cutoff are skipped; accumulation stops early once T drops under
/// transmittance_cutoff. Opacities must be < 1 for the backward pass to be
/// well defined; the sigmoid activation guarantees that in training.
pub fn blend_pixel(
    pos: (f64, f64),
    entries: &[(u32, f64)],
    projected: &[Projected2D],
    opacities: &[f64],
    colors: &[[f64; 3]],
    settings: &RasterSettings,
) -> PixelBlend {
    let mut out = PixelBlend {
        t_final: 1.0,
        ..Default::default()
    };
    let mut t = 1.0f64;
    for (rank, &(gi, depth)) in entries.iter().enumerate() {
        out.iterated = rank as u32 + 1;
        let p = &projected[gi as usize];
        let dx = pos.0 - p.mean2d.x;
        let dy = pos.1 - p.mean2d.y;
        let a = &p.cov2d_inv;
        let q = a[(0, 0)] * dx * dx + 2.0 * a[(0, 1)] * dx * dy + a[(1, 1)] * dy * dy;
        let g = (-0.5 * q).exp();
        let alpha = opacities[gi as usize] * g;
        if alpha < settings.alpha_cutoff {
            continue;
        }
        let w = alpha * t;
        let c = colors[gi as usize];
        out.color[0] += c[0] * w;
        out.color[1] += c[1] * w;
        out.color[2] += c[2] * w;
        out.depth_acc += depth * w;
        out.last_contrib = rank as u32 + 1;
        t *= 1.0 - alpha;
        if t < settings.transmittance_cutoff {
            break;
        }
    }
    out.t_final = t;
    out
}

/// One unit of scheduled work: a (tile, view) pair with a lane budget.
#[derive(Debug, Clone, Copy)]
pub struct BlockTask {
    pub slot: usize,
    pub tile: usize,
    pub launched: u32,
}

/// Scheduler: which blocks run and how many lanes each launches.
pub fn build_blocks(plan: &RenderPlan, warp: u32) -> Vec<BlockTask> {
    let n_tiles = plan.n_tiles();
    let mut blocks = Vec::new();
    for slot in 0..plan.views.len() {
        for tile in 0..n_tiles {
            let n = plan.pixel_sets[slot][tile].len() as u32;
            match plan.mode {
                RenderMode::Full | RenderMode::NaiveMasked => {
                    blocks.push(BlockTask {
                        slot,
                        tile,
                        launched: plan.block_size,
                    });
                }
                RenderMode::ThreadEfficient => {
                    if n > 0 {
                        blocks.push(BlockTask {
                            slot,
                            tile,
                            launched: n.div_ceil(warp) * warp,
                        });
                    }
                }
            }
        }
    }
    blocks
}

/// Per-block occupancy and fetch counters.
#[derive(Debug, Clone, Copy)]
pub struct BlockStat {
    pub tile_id: (u32, u32),
    pub view_slot: u32,
    pub threads_launched: u32,
    pub threads_active: u32,
    pub gaussians_fetched: u32,
    pub fetch_rounds: u32,
}

#[derive(Debug, Clone)]
pub struct RenderStats {
    pub mode: RenderMode,
    pub blocks: Vec<BlockStat>,
    pub wall_ms: f64,
    pub degenerate_projections: u32,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub views: Vec<u32>,
    pub width: u32,
    pub height: u32,
    /// Per-view far plane, the background depth sentinel.
    pub zfar: Vec<f64>,
    /// Dense per-slot buffers; only pixels in the plan are written.
    pub color: Vec<Vec<[f64; 3]>>,
    pub depth_acc: Vec<Vec<f64>>,
    pub t_final: Vec<Vec<f64>>,
    pub last_contrib: Vec<Vec<u32>>,
    pub stats: RenderStats,
}

impl RenderOutput {
    /// Expected depth with the background sentinel applied: pixels that kept
    /// nearly all transmittance read as far-plane background.
    pub fn depth(&self, slot: usize, px: usize) -> f64 {
        if self.is_background(slot, px) {
            self.zfar[slot]
        } else {
            self.depth_acc[slot][px]
        }
    }

    pub fn is_background(&self, slot: usize, px: usize) -> bool {
        self.t_final[slot][px] > 0.999
    }

    /// Full image of one slot (sensible for full plans), with depth channel.
    pub fn image(&self, slot: usize) -> Image {
        let n = (self.width * self.height) as usize;
        Image {
            width: self.width,
            height: self.height,
            pixels: self.color[slot].clone(),
            depth: Some((0..n).map(|px| self.depth(slot, px)).collect()),
        }
    }
}

struct BlockResult {
    stat: BlockStat,
    pixels: Vec<(u32, PixelBlend)>,
}

fn run_block(
    task: &BlockTask,
    plan: &RenderPlan,
    bins: &[TileBin],
    projected: &[Vec<Projected2D>],
    opacities: &[f64],
    colors: &[[f64; 3]],
    settings: &RasterSettings,
) -> BlockResult {
    let n_tiles = plan.n_tiles();
    let bin = &bins[task.slot * n_tiles + task.tile];
    let set = &plan.pixel_sets[task.slot][task.tile];
    let projs = &projected[task.slot];
    let mut pixels = Vec::with_capacity(set.len());
    let mut max_iter = 0u32;
    for &px in set {
        let pos = (
            (px % plan.width) as f64 + 0.5,
            (px / plan.width) as f64 + 0.5,
        );
        let blend = blend_pixel(pos, &bin.entries, projs, opacities, colors, settings);
        max_iter = max_iter.max(blend.iterated);
        pixels.push((px, blend));
    }
    // Shared-memory fetch model: lanes fetch cooperatively in rounds of the
    // block width until every lane is done.
    let rounds = max_iter.div_ceil(task.launched);
    let fetched = (bin.entries.len() as u32).min(rounds * task.launched);
    BlockResult {
        stat: BlockStat {
            tile_id: bin.tile_id,
            view_slot: task.slot as u32,
            threads_launched: task.launched,
            threads_active: set.len() as u32,
            gaussians_fetched: fetched,
            fetch_rounds: rounds,
        },
        pixels,
    }
}

/// Render the plan. Pure function of its inputs: repeated calls and any
/// worker count produce bit-identical pixels.
pub fn render(
    plan: &RenderPlan,
    gaussians: &[Gaussian3D],
    cams: &[Camera],
    settings: &RasterSettings,
) -> Result<RenderOutput, RenderError> {
    plan.validate(cams, settings)?;
    let start = std::time::Instant::now();
    let projected = project_all(plan, gaussians, cams, &settings.projection);
    let degenerate = projected
        .iter()
        .flatten()
        .filter(|p| p.degenerate)
        .count() as u32;
    let bins = bin_and_sort(&projected, plan, settings.bin_cap)?;
    let opacities: Vec<f64> = gaussians.iter().map(Gaussian3D::opacity).collect();
    let colors: Vec<[f64; 3]> = gaussians.iter().map(|g| g.color).collect();
    let blocks = build_blocks(plan, settings.warp);

    let results: Vec<BlockResult> = blocks
        .par_iter()
        .map(|task| run_block(task, plan, &bins, &projected, &opacities, &colors, settings))
        .collect();

    let n_px = (plan.width * plan.height) as usize;
    let n_slots = plan.views.len();
    let mut out = RenderOutput {
        views: plan.views.clone(),
        width: plan.width,
        height: plan.height,
        zfar: plan.views.iter().map(|&v| cams[v as usize].zfar).collect(),
        color: vec![vec![[0.0; 3]; n_px]; n_slots],
        depth_acc: vec![vec![0.0; n_px]; n_slots],
        t_final: vec![vec![1.0; n_px]; n_slots],
        last_contrib: vec![vec![0; n_px]; n_slots],
        stats: RenderStats {
            mode: plan.mode,
            blocks: Vec::with_capacity(results.len()),
            wall_ms: 0.0,
            degenerate_projections: degenerate,
        },
    };
    for r in results {
        for (px, blend) in r.pixels {
            let slot = r.stat.view_slot as usize;
            out.color[slot][px as usize] = blend.color;
            out.depth_acc[slot][px as usize] = blend.depth_acc;
            out.t_final[slot][px as usize] = blend.t_final;
            out.last_contrib[slot][px as usize] = blend.last_contrib;
        }
        out.stats.blocks.push(r.stat);
    }
    out.stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Totals over the per-block counters.
#[derive(Debug, Clone, Copy)]
pub struct OccupancyReport {
    pub mode: RenderMode,
    pub threads_launched: u64,
    pub threads_active: u64,
    /// active / launched.
    pub occupancy: f64,
    pub gaussians_fetched: u64,
    pub fetch_rounds: u64,
    pub wall_ms: f64,
}

pub fn occupancy_report(output: &RenderOutput) -> OccupancyReport {
    let launched: u64 = output
        .stats
        .blocks
        .iter()
        .map(|b| b.threads_launched as u64)
        .sum();
    let active: u64 = output
        .stats
        .blocks
        .iter()
        .map(|b| b.threads_active as u64)
        .sum();
    OccupancyReport {
        mode: output.stats.mode,
        threads_launched: launched,
        threads_active: active,
        occupancy: if launched == 0 {
            1.0
        } else {
            active as f64 / launched as f64
        },
        gaussians_fetched: output
            .stats
            .blocks
            .iter()
            .map(|b| b.gaussians_fetched as u64)
            .sum(),
        fetch_rounds: output
            .stats
            .blocks
            .iter()
            .map(|b| b.fetch_rounds as u64)
            .sum(),
        wall_ms: output.stats.wall_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic, make_synthetic_sized, CameraLayout};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Vector2};

    fn centered_proj(px: f64, py: f64, depth: f64) -> Projected2D {
        Projected2D {
            mean2d: Vector2::new(px, py),
            mean_ndc: Vector2::zeros(),
            depth,
            cov2d: Matrix2::identity() * 2.0,
            cov2d_inv: Matrix2::identity() * 0.5,
            radius: 5.0,
            visible: true,
            degenerate: false,
        }
    }

    #[test]
    fn blend_single_gaussian_at_center() {
        let settings = RasterSettings::default();
        let projs = vec![centered_proj(4.5, 4.5, 2.0)];
        let out = blend_pixel(
            (4.5, 4.5),
            &[(0, 2.0)],
            &projs,
            &[0.5],
            &[[0.2, 0.4, 0.8]],
            &settings,
        );
        assert_relative_eq!(out.color[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(out.color[2], 0.4, epsilon = 1e-15);
        assert_relative_eq!(out.t_final, 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.depth_acc, 1.0, epsilon = 1e-15);
        assert_eq!(out.last_contrib, 1);
    }

    #[test]
    fn blend_two_cocentered_gaussians() {
        let settings = RasterSettings::default();
        let projs = vec![centered_proj(4.5, 4.5, 1.0), centered_proj(4.5, 4.5, 2.0)];
        let out = blend_pixel(
            (4.5, 4.5),
            &[(0, 1.0), (1, 2.0)],
            &projs,
            &[0.5, 1.0],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &settings,
        );
        assert_relative_eq!(out.color[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.color[1], 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.t_final, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn blend_matches_no_early_exit_oracle() {
        let (gaussians, cams) = make_synthetic(17, 20, 4, CameraLayout::Orbit).unwrap();
        let settings = RasterSettings::default();
        let plan = RenderPlan::full(0, 64, 64, 16);
        let out = render(&plan, &gaussians, &cams, &settings).unwrap();
        let projected = project_all(&plan, &gaussians, &cams, &settings.projection);
        let bins = bin_and_sort(&projected, &plan, settings.bin_cap).unwrap();
        let opacities: Vec<f64> = gaussians.iter().map(Gaussian3D::opacity).collect();
        for px in 0..64 * 64u32 {
            let tile = plan.tile_of_pixel(px);
            let pos = ((px % 64) as f64 + 0.5, (px / 64) as f64 + 0.5);
            // Straight-line reference: same α skip, no transmittance exit.
            let mut t = 1.0f64;
            let mut color = [0.0f64; 3];
            for &(gi, _) in &bins[tile].entries {
                let p = &projected[0][gi as usize];
                let dx = pos.0 - p.mean2d.x;
                let dy = pos.1 - p.mean2d.y;
                let q = p.cov2d_inv[(0, 0)] * dx * dx
                    + 2.0 * p.cov2d_inv[(0, 1)] * dx * dy
                    + p.cov2d_inv[(1, 1)] * dy * dy;
                let alpha = opacities[gi as usize] * (-0.5 * q).exp();
                if alpha < settings.alpha_cutoff {
                    continue;
                }
                for c in 0..3 {
                    color[c] += gaussians[gi as usize].color[c] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for c in 0..3 {
                assert!(
                    (color[c] - out.color[0][px as usize][c]).abs() <= 2e-3,
                    "pixel {px} channel {c}"
                );
            }
        }
    }

    #[test]
    fn binning_matches_brute_force_oracle() {
        let (gaussians, cams) = make_synthetic(23, 60, 5, CameraLayout::Random).unwrap();
        let settings = RasterSettings::default();
        let plan = RenderPlan::from_pixel_lists(
            vec![0, 3],
            64,
            64,
            8,
            vec![vec![0], vec![1]],
            RenderMode::ThreadEfficient,
        )
        .unwrap();
        let projected = project_all(&plan, &gaussians, &cams, &settings.projection);
        let bins = bin_and_sort(&projected, &plan, settings.bin_cap).unwrap();
        let (tx_n, ty_n) = (plan.tiles_x(), plan.tiles_y());
        for slot in 0..2 {
            for ty in 0..ty_n {
                for tx in 0..tx_n {
                    let bin = &bins[slot * tx_n * ty_n + ty * tx_n + tx];
                    assert_eq!(bin.view_slot as usize, slot);
                    assert_eq!(bin.tile_id, (tx as u32, ty as u32));
                    // Brute force: test every gaussian against this tile.
                    let mut expected: Vec<u32> = Vec::new();
                    for (gi, p) in projected[slot].iter().enumerate() {
                        if !p.visible {
                            continue;
                        }
                        let rect = (
                            tx as f64 * 8.0,
                            ty as f64 * 8.0,
                            (tx + 1) as f64 * 8.0,
                            (ty + 1) as f64 * 8.0,
                        );
                        let cx = p.mean2d.x.clamp(rect.0, rect.2);
                        let cy = p.mean2d.y.clamp(rect.1, rect.3);
                        let d2 = (p.mean2d.x - cx).powi(2) + (p.mean2d.y - cy).powi(2);
                        if d2 <= p.radius * p.radius {
                            expected.push(gi as u32);
                        }
                    }
                    let mut got: Vec<u32> = bin.entries.iter().map(|e| e.0).collect();
                    let mut sorted_check = bin.entries.clone();
                    sorted_check
                        .sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                    assert_eq!(bin.entries, sorted_check, "bin not depth-sorted");
                    got.sort_unstable();
                    expected.sort_unstable();
                    assert_eq!(got, expected);
                }
            }
        }
    }

    #[test]
    fn binning_cap_errors_out() {
        let (gaussians, cams) = make_synthetic(3, 50, 2, CameraLayout::Orbit).unwrap();
        let plan = RenderPlan::full(0, 64, 64, 8);
        let settings = RasterSettings::default();
        let projected = project_all(&plan, &gaussians, &cams, &settings.projection);
        match bin_and_sort(&projected, &plan, 3) {
            Err(RenderError::BinningExplosion(_, 3)) => {}
            other => panic!("expected binning explosion, got {other:?}"),
        }
    }

    #[test]
    fn full_render_occupancy_is_one() {
        let (gaussians, cams) = make_synthetic(5, 10, 3, CameraLayout::Orbit).unwrap();
        let plan = RenderPlan::full(1, 64, 64, 16);
        let out = render(&plan, &gaussians, &cams, &RasterSettings::default()).unwrap();
        let rep = occupancy_report(&out);
        assert_eq!(rep.threads_launched, 64 * 64);
        assert_relative_eq!(rep.occupancy, 1.0);
    }

    #[test]
    fn naive_single_pixel_occupancy() {
        let (gaussians, cams) = make_synthetic_sized(5, 10, 3, CameraLayout::Orbit, 16, 16).unwrap();
        let plan = RenderPlan::from_pixel_lists(
            vec![0],
            16,
            16,
            16,
            vec![vec![37]],
            RenderMode::NaiveMasked,
        )
        .unwrap();
        let out = render(&plan, &gaussians, &cams, &RasterSettings::default()).unwrap();
        let rep = occupancy_report(&out);
        assert_eq!(rep.threads_launched, 256);
        assert_eq!(rep.threads_active, 1);
        assert_relative_eq!(rep.occupancy, 1.0 / 256.0);
    }

    #[test]
    fn thread_efficient_block_sizing() {
        let (gaussians, cams) = make_synthetic(5, 10, 6, CameraLayout::Orbit).unwrap();
        // 4 views × 64 pixels in one 16×16 tile → 4 blocks of 64 lanes.
        let mut lists = vec![Vec::new(); 4];
        for px in 0..256u32 {
            let (x, y) = (px % 16, px / 16);
            lists[(px % 4) as usize].push(y * 64 + x);
        }
        let plan =
            RenderPlan::from_pixel_lists(vec![0, 1, 2, 3], 64, 64, 16, lists, RenderMode::ThreadEfficient)
                .unwrap();
        let out = render(&plan, &gaussians, &cams, &RasterSettings::default()).unwrap();
        assert_eq!(out.stats.blocks.len(), 4);
        for b in &out.stats.blocks {
            assert_eq!(b.threads_launched, 64);
            assert_eq!(b.threads_active, 64);
        }
        assert_relative_eq!(occupancy_report(&out).occupancy, 1.0);
    }

    #[test]
    fn warp_padding_rounds_up() {
        let (gaussians, cams) = make_synthetic(5, 10, 3, CameraLayout::Orbit).unwrap();
        let plan = RenderPlan::from_pixel_lists(
            vec![0],
            64,
            64,
            16,
            vec![(0..33).collect()],
            RenderMode::ThreadEfficient,
        )
        .unwrap();
        let out = render(&plan, &gaussians, &cams, &RasterSettings::default()).unwrap();
        // 33 pixels land in tiles (0,0) [17 px: x 0..16 of row 0 → wait 16 per tile row]
        // Just check the invariant: every launch is a multiple of 32 and ≥ active.
        for b in &out.stats.blocks {
            assert_eq!(b.threads_launched % 32, 0);
            assert!(b.threads_launched >= b.threads_active);
            assert!(b.threads_launched - b.threads_active < 32);
        }
    }

    #[test]
    fn modes_agree_bit_for_bit() {
        let (gaussians, cams) = make_synthetic(29, 40, 4, CameraLayout::Orbit).unwrap();
        let settings = RasterSettings::default();
        // Partition all pixels of views 0..4 across slots by pixel parity.
        let mut lists = vec![Vec::new(); 4];
        for px in 0..64 * 64u32 {
            lists[(px % 4) as usize].push(px);
        }
        let views = vec![0u32, 1, 2, 3];
        let te = RenderPlan::from_pixel_lists(
            views.clone(),
            64,
            64,
            16,
            lists.clone(),
            RenderMode::ThreadEfficient,
        )
        .unwrap();
        let naive = te.clone().with_mode(RenderMode::NaiveMasked);
        let out_te = render(&te, &gaussians, &cams, &settings).unwrap();
        let out_naive = render(&naive, &gaussians, &cams, &settings).unwrap();
        for slot in 0..4 {
            let full = RenderPlan::full(views[slot] as u32, 64, 64, 16);
            let out_full = render(&full, &gaussians, &cams, &settings).unwrap();
            for &px in lists[slot].iter() {
                let px = px as usize;
                assert_eq!(out_te.color[slot][px], out_naive.color[slot][px]);
                assert_eq!(out_te.color[slot][px], out_full.color[0][px]);
                assert_eq!(out_te.depth_acc[slot][px], out_full.depth_acc[0][px]);
                assert_eq!(out_te.t_final[slot][px], out_full.t_final[0][px]);
            }
        }
    }

    #[test]
    fn render_deterministic_across_worker_counts() {
        let (gaussians, cams) = make_synthetic(31, 30, 4, CameraLayout::Random).unwrap();
        let settings = RasterSettings::default();
        let plan = RenderPlan::full(2, 64, 64, 16);
        let reference = render(&plan, &gaussians, &cams, &settings).unwrap();
        for workers in [1usize, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let out = pool.install(|| render(&plan, &gaussians, &cams, &settings).unwrap());
            assert_eq!(out.color, reference.color);
            assert_eq!(out.depth_acc, reference.depth_acc);
            assert_eq!(out.t_final, reference.t_final);
        }
    }

    #[test]
    fn background_depth_sentinel() {
        let (gaussians, cams) = make_synthetic(41, 1, 3, CameraLayout::Orbit).unwrap();
        let plan = RenderPlan::full(0, 64, 64, 16);
        let out = render(&plan, &gaussians, &cams, &RasterSettings::default()).unwrap();
        let mut saw_background = false;
        for px in 0..64 * 64 {
            if out.is_background(0, px) {
                saw_background = true;
                assert_eq!(out.depth(0, px), cams[0].zfar);
            }
        }
        assert!(saw_background);
    }

    #[test]
    fn plan_validation_errors() {
        let (gaussians, cams) = make_synthetic(1, 5, 2, CameraLayout::Orbit).unwrap();
        let settings = RasterSettings::default();
        let plan = RenderPlan::full(9, 64, 64, 16);
        assert!(matches!(
            render(&plan, &gaussians, &cams, &settings),
            Err(RenderError::BadView(9, 2))
        ));
        let plan = RenderPlan::full(0, 32, 32, 16);
        assert!(matches!(
            render(&plan, &gaussians, &cams, &settings),
            Err(RenderError::SizeMismatch { .. })
        ));
    }
}
