//! Photometric losses with hand-written adjoints: ℓ1, ℓ2, windowed D-SSIM,
//! and a 3D distance-aware D-SSIM whose window weights decay with the
//! world-space distance between unprojected surface points rather than pixel
//! distance, so pixels from different views of the same surface reinforce
//! each other while unrelated views are suppressed.
//!
//! The 3D variant consumes a [`MergedView`]: a full-resolution canvas where
//! every pixel was rendered by exactly one view of the mini-batch. Window
//! neighborhoods are formed by pixel adjacency on that canvas; the kernel
//! does the cross-view weighting. Depth enters the weights as a constant
//! (no gradient through the kernel geometry).

use crate::rasterizer::{RenderOutput, RenderPlan};
use crate::scene::{Camera, Image};
use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("pixel sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("image {w}×{h} smaller than the {win}×{win} window")]
    ImageTooSmall { w: u32, h: u32, win: u32 },
    #[error("merged view is missing depth values")]
    MissingDepth,
    #[error("plan does not partition the canvas: pixel {0} covered {1} times")]
    NotAPartition(u32, u32),
    #[error("view {0} out of range for {1} images")]
    BadViewIndex(u32, usize),
}

type Result<T> = std::result::Result<T, LossError>;

/// Window geometry and stabilizers for both SSIM variants.
#[derive(Debug, Clone)]
pub struct SsimWindow {
    /// Window spans (2·half_width+1)² pixels.
    pub half_width: usize,
    /// Spatial kernel σ in pixels (2D variant and fallback).
    pub sigma2d: f64,
    /// World-space kernel σ (3D variant).
    pub sigma3d: f64,
    /// (0.01·L)² with L = 1.
    pub c1: f64,
    /// (0.03·L)² with L = 1.
    pub c2: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow {
            half_width: 5,
            sigma2d: 1.5,
            sigma3d: 0.05,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

impl SsimWindow {
    pub fn span(&self) -> u32 {
        2 * self.half_width as u32 + 1
    }
}

/// Mean absolute error over pixels and channels; gradient is the sign times
/// the normalization (0 at exact agreement).
pub fn l1(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(LossError::SizeMismatch(rendered.len(), target.len()));
    }
    let inv = 1.0 / (3.0 * rendered.len() as f64);
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.len()];
    for (i, (r, t)) in rendered.iter().zip(target).enumerate() {
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d.abs() * inv;
            grad[i][c] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok((loss, grad))
}

/// Mean squared error over pixels and channels.
pub fn l2(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(LossError::SizeMismatch(rendered.len(), target.len()));
    }
    let inv = 1.0 / (3.0 * rendered.len() as f64);
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.len()];
    for (i, (r, t)) in rendered.iter().zip(target).enumerate() {
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d * d * inv;
            grad[i][c] = 2.0 * d * inv;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct DssimResult {
    /// 1 − mean SSIM over window centers and channels.
    pub value: f64,
    /// d value / d rendered color, same layout as the rendered input.
    pub grad: Vec<[f64; 3]>,
    pub mean_ssim: f64,
    /// Channel-averaged SSIM per window center (1.0 where skipped).
    pub per_window_ssim: Vec<f64>,
    /// Windows dropped for having fewer than 4 valid entries.
    pub skipped_windows: usize,
}

/// SSIM statistics of one window under normalized weights, plus the adjoint
/// into the rendered values. μ = Σwx, variances/covariance are weighted
/// central moments; S = (2μ₁μ₂+C₁)(2τ₁₂+C₂) / ((μ₁²+μ₂²+C₁)(τ₁²+τ₂²+C₂)).
/// `grad[k]` receives dS/dx_k (unscaled by the outer mean).
fn ssim_window(
    idx: &[usize],
    w: &[f64],
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    c1: f64,
    c2: f64,
    grad: &mut [[f64; 3]],
) -> [f64; 3] {
    let mut ssim = [0.0; 3];
    for c in 0..3 {
        let (mut mu_x, mut mu_y, mut m_xx, mut m_yy, mut m_xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&k, &wk) in idx.iter().zip(w) {
            let (x, y) = (rendered[k][c], target[k][c]);
            mu_x += wk * x;
            mu_y += wk * y;
            m_xx += wk * x * x;
            m_yy += wk * y * y;
            m_xy += wk * x * y;
        }
        let var_x = m_xx - mu_x * mu_x;
        let var_y = m_yy - mu_y * mu_y;
        let cov = m_xy - mu_x * mu_y;
        let a = 2.0 * mu_x * mu_y + c1;
        let b = 2.0 * cov + c2;
        let den_mu = mu_x * mu_x + mu_y * mu_y + c1;
        let den_var = var_x + var_y + c2;
        let s = (a * b) / (den_mu * den_var);
        ssim[c] = s;
        let ds_dmu_x = (2.0 * mu_y * b) / (den_mu * den_var) - s * 2.0 * mu_x / den_mu;
        let ds_dvar_x = -s / den_var;
        let ds_dcov = 2.0 * a / (den_mu * den_var);
        for (i, (&k, &wk)) in idx.iter().zip(w).enumerate() {
            let (x, y) = (rendered[k][c], target[k][c]);
            grad[i][c] = wk
                * (ds_dmu_x + 2.0 * (x - mu_x) * ds_dvar_x + (y - mu_y) * ds_dcov);
        }
    }
    ssim
}

/// Unnormalized 2D Gaussian window table indexed by (dy+h)·span + (dx+h).
fn kernel2d(win: &SsimWindow) -> Vec<f64> {
    let h = win.half_width as isize;
    let span = 2 * h + 1;
    let inv = 1.0 / (2.0 * win.sigma2d * win.sigma2d);
    (0..span * span)
        .map(|i| {
            let dy = (i / span - h) as f64;
            let dx = (i % span - h) as f64;
            (-(dx * dx + dy * dy) * inv).exp()
        })
        .collect()
}

struct RowPatch {
    loss_sum: f64,
    ssim_row: Vec<f64>,
    skipped: usize,
    y0: usize,
    grad: Vec<[f64; 3]>,
}

fn check_window_fits(width: u32, height: u32, win: &SsimWindow) -> Result<()> {
    if width < win.span() || height < win.span() {
        return Err(LossError::ImageTooSmall {
            w: width,
            h: height,
            win: win.span(),
        });
    }
    Ok(())
}

/// Windowed D-SSIM over one full rectangular image pair. Every pixel is a
/// window center; boundary windows renormalize over in-bounds pixels.
pub fn dssim(rendered: &Image, target: &Image, win: &SsimWindow) -> Result<DssimResult> {
    if rendered.width != target.width
        || rendered.height != target.height
        || rendered.pixels.len() != target.pixels.len()
    {
        return Err(LossError::SizeMismatch(
            rendered.pixels.len(),
            target.pixels.len(),
        ));
    }
    check_window_fits(rendered.width, rendered.height, win)?;
    let (width, height) = (rendered.width as usize, rendered.height as usize);
    let h = win.half_width as isize;
    let table = kernel2d(win);

    let rows: Vec<RowPatch> = (0..height)
        .into_par_iter()
        .map(|cy| {
            let y0 = (cy as isize - h).max(0) as usize;
            let y1 = (cy as isize + h).min(height as isize - 1) as usize;
            let mut patch = RowPatch {
                loss_sum: 0.0,
                ssim_row: Vec::with_capacity(width),
                skipped: 0,
                y0,
                grad: vec![[0.0; 3]; width * (y1 - y0 + 1)],
            };
            let mut idx = Vec::with_capacity(table.len());
            let mut w = Vec::with_capacity(table.len());
            let mut g = vec![[0.0; 3]; table.len()];
            for cx in 0..width {
                idx.clear();
                w.clear();
                let mut w_sum = 0.0;
                for dy in -h..=h {
                    let py = cy as isize + dy;
                    if py < 0 || py >= height as isize {
                        continue;
                    }
                    for dx in -h..=h {
                        let px = cx as isize + dx;
                        if px < 0 || px >= width as isize {
                            continue;
                        }
                        let raw = table[((dy + h) * (2 * h + 1) + dx + h) as usize];
                        idx.push(py as usize * width + px as usize);
                        w.push(raw);
                        w_sum += raw;
                    }
                }
                for wk in &mut w {
                    *wk /= w_sum;
                }
                let ssim = ssim_window(
                    &idx,
                    &w,
                    &rendered.pixels,
                    &target.pixels,
                    win.c1,
                    win.c2,
                    &mut g,
                );
                patch.loss_sum += 3.0 - ssim[0] - ssim[1] - ssim[2];
                patch.ssim_row.push((ssim[0] + ssim[1] + ssim[2]) / 3.0);
                for (i, &k) in idx.iter().enumerate() {
                    let at = k - y0 * width;
                    for c in 0..3 {
                        patch.grad[at][c] += g[i][c];
                    }
                }
            }
            patch
        })
        .collect();

    Ok(assemble(rows, width, height))
}

fn assemble(rows: Vec<RowPatch>, width: usize, height: usize) -> DssimResult {
    let n = width * height;
    let scale = -1.0 / (3.0 * n as f64);
    let mut grad = vec![[0.0; 3]; n];
    let mut loss_sum = 0.0;
    let mut skipped = 0;
    let mut per_window = Vec::with_capacity(n);
    for patch in rows {
        loss_sum += patch.loss_sum;
        skipped += patch.skipped;
        per_window.extend_from_slice(&patch.ssim_row);
        for (i, g) in patch.grad.iter().enumerate() {
            let k = patch.y0 * width + i;
            for c in 0..3 {
                grad[k][c] += g[c] * scale;
            }
        }
    }
    let value = loss_sum / (3.0 * n as f64);
    DssimResult {
        value,
        grad,
        mean_ssim: 1.0 - value,
        per_window_ssim: per_window,
        skipped_windows: skipped,
    }
}

/// Full-resolution canvas assembled from a partial multi-view render in
/// which every pixel was rendered by exactly one view slot.
#[derive(Debug, Clone)]
pub struct MergedView {
    pub width: u32,
    pub height: u32,
    /// Slot → dataset view index.
    pub views: Vec<u32>,
    /// Per pixel: the slot that rendered it.
    pub slot: Vec<u32>,
    pub color: Vec<[f64; 3]>,
    /// Expected depth with the background sentinel applied.
    pub depth: Vec<f64>,
    /// Pixels whose transmittance stayed above the background threshold.
    pub background: Vec<bool>,
}

/// Fold a rendered mini-batch into the merged canvas. Errors unless the
/// plan's pixel sets partition the canvas exactly.
pub fn merge_output(out: &RenderOutput, plan: &RenderPlan) -> Result<MergedView> {
    let n = (plan.width * plan.height) as usize;
    let mut slot_of = vec![u32::MAX; n];
    for (slot, sets) in plan.pixel_sets.iter().enumerate() {
        for set in sets {
            for &px in set {
                if slot_of[px as usize] != u32::MAX {
                    return Err(LossError::NotAPartition(px, 2));
                }
                slot_of[px as usize] = slot as u32;
            }
        }
    }
    if let Some(px) = slot_of.iter().position(|&s| s == u32::MAX) {
        return Err(LossError::NotAPartition(px as u32, 0));
    }
    let mut merged = MergedView {
        width: plan.width,
        height: plan.height,
        views: out.views.clone(),
        slot: slot_of,
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        background: Vec::with_capacity(n),
    };
    for px in 0..n {
        let s = merged.slot[px] as usize;
        merged.color.push(out.color[s][px]);
        merged.depth.push(out.depth(s, px));
        merged.background.push(out.is_background(s, px));
    }
    Ok(merged)
}

/// Ground-truth colors in the merged layout: each pixel reads from the
/// target image of the view that rendered it.
pub fn merged_target(merged: &MergedView, images: &[Image]) -> Result<Vec<[f64; 3]>> {
    let n = (merged.width * merged.height) as usize;
    let mut out = Vec::with_capacity(n);
    for px in 0..n {
        let view = merged.views[merged.slot[px] as usize];
        let img = images
            .get(view as usize)
            .ok_or(LossError::BadViewIndex(view, images.len()))?;
        if img.width != merged.width || img.height != merged.height {
            return Err(LossError::SizeMismatch(img.pixels.len(), n));
        }
        out.push(img.pixels[px]);
    }
    Ok(out)
}

/// Route a merged-layout color gradient back to dense per-slot buffers.
pub fn scatter_merged_grad(merged: &MergedView, grad: &[[f64; 3]]) -> Vec<Vec<[f64; 3]>> {
    let mut out = vec![vec![[0.0; 3]; grad.len()]; merged.views.len()];
    for (px, g) in grad.iter().enumerate() {
        out[merged.slot[px] as usize][px] = *g;
    }
    out
}

/// 3D distance-aware D-SSIM on a merged canvas. Window weights are
/// w = exp(−‖X−X_center‖²/2σ₃d²) over world points unprojected through each
/// pixel's own view; background pixels get weight 0. A background center
/// falls back to the plain 2D kernel over its window; a window with fewer
/// than 4 valid entries is skipped (counts as SSIM 1) and tallied.
pub fn dssim3d(
    merged: &MergedView,
    target: &[[f64; 3]],
    cams: &[Camera],
    win: &SsimWindow,
) -> Result<DssimResult> {
    let n = (merged.width * merged.height) as usize;
    if merged.depth.len() != n {
        return Err(LossError::MissingDepth);
    }
    if target.len() != n {
        return Err(LossError::SizeMismatch(n, target.len()));
    }
    check_window_fits(merged.width, merged.height, win)?;
    for &v in &merged.views {
        if v as usize >= cams.len() {
            return Err(LossError::BadViewIndex(v, cams.len()));
        }
    }
    let (width, height) = (merged.width as usize, merged.height as usize);
    let h = win.half_width as isize;
    let table = kernel2d(win);
    let inv3d = 1.0 / (2.0 * win.sigma3d * win.sigma3d);

    // Kernel geometry: world point of every foreground pixel, fixed during
    // the loss (no gradient flows through depth).
    let worlds: Vec<Vector3<f64>> = (0..n)
        .map(|px| {
            if merged.background[px] {
                Vector3::zeros()
            } else {
                let cam = &cams[merged.views[merged.slot[px] as usize] as usize];
                cam.unproject(
                    (px % width) as f64 + 0.5,
                    (px / width) as f64 + 0.5,
                    merged.depth[px],
                )
            }
        })
        .collect();

    let rows: Vec<RowPatch> = (0..height)
        .into_par_iter()
        .map(|cy| {
            let y0 = (cy as isize - h).max(0) as usize;
            let y1 = (cy as isize + h).min(height as isize - 1) as usize;
            let mut patch = RowPatch {
                loss_sum: 0.0,
                ssim_row: Vec::with_capacity(width),
                skipped: 0,
                y0,
                grad: vec![[0.0; 3]; width * (y1 - y0 + 1)],
            };
            let mut idx = Vec::with_capacity(table.len());
            let mut w = Vec::with_capacity(table.len());
            let mut g = vec![[0.0; 3]; table.len()];
            for cx in 0..width {
                let center = cy * width + cx;
                idx.clear();
                w.clear();
                let center_bg = merged.background[center];
                for dy in -h..=h {
                    let py = cy as isize + dy;
                    if py < 0 || py >= height as isize {
                        continue;
                    }
                    for dx in -h..=h {
                        let px = cx as isize + dx;
                        if px < 0 || px >= width as isize {
                            continue;
                        }
                        let k = py as usize * width + px as usize;
                        if center_bg {
                            idx.push(k);
                            w.push(table[((dy + h) * (2 * h + 1) + dx + h) as usize]);
                        } else if !merged.background[k] {
                            idx.push(k);
                            w.push((-(worlds[k] - worlds[center]).norm_squared() * inv3d).exp());
                        }
                    }
                }
                if idx.len() < 4 {
                    patch.skipped += 1;
                    patch.ssim_row.push(1.0);
                    continue;
                }
                let w_sum: f64 = w.iter().sum();
                for wk in &mut w {
                    *wk /= w_sum;
                }
                let ssim =
                    ssim_window(&idx, &w, &merged.color, target, win.c1, win.c2, &mut g);
                patch.loss_sum += 3.0 - ssim[0] - ssim[1] - ssim[2];
                patch.ssim_row.push((ssim[0] + ssim[1] + ssim[2]) / 3.0);
                for (i, &k) in idx.iter().enumerate() {
                    let at = k - y0 * width;
                    for c in 0..3 {
                        patch.grad[at][c] += g[i][c];
                    }
                }
            }
            patch
        })
        .collect();

    Ok(assemble(rows, width, height))
}
