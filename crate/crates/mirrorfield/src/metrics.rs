//! Image fidelity scores and the per-view evaluation report.

use std::fmt::Write as _;

use thiserror::Error;

use crate::diff::Scalar;
use crate::geometry::pose_delta_deg;
use crate::img::Image;
use crate::model::Model;
use crate::renderer::{render_image, ReferenceView, RenderConfig};
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} smaller than the {2}x{2} window")]
    TooSmall(usize, usize, usize),
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// PSNR of a unit-range signal with the given mean squared error. An error of
/// zero scores the cap so aggregates stay finite.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    -10.0 * mse.log10()
}

/// Peak signal-to-noise ratio in dB over unit-range images; identical
/// images score the 100 dB cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity with a Gaussian 11x11 window over valid
/// positions, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(a.width, a.height, SSIM_WINDOW));
    }
    let mut total = 0.0;
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let (h, w) = (a.height, a.width);
        let mu_x = gauss_valid(&x, h, w);
        let mu_y = gauss_valid(&y, h, w);
        let m_xx = gauss_valid(&xx, h, w);
        let m_yy = gauss_valid(&yy, h, w);
        let m_xy = gauss_valid(&xy, h, w);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - mx * mx;
            let var_y = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / 3.0)
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

fn gauss_kernel() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Separable Gaussian over valid positions: [h, w] -> [h-10, w-10].
fn gauss_valid(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gauss_kernel();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut s = 0.0;
            for (k, &gv) in g.iter().enumerate() {
                s += gv * data[y * w + x + k];
            }
            rows[y * wo + x] = s;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut s = 0.0;
            for (k, &gv) in g.iter().enumerate() {
                s += gv * rows[(y + k) * wo + x];
            }
            out[y * wo + x] = s;
        }
    }
    out
}

pub const BUCKET_EDGES_DEG: [f64; 6] = [0.0, 30.0, 60.0, 90.0, 120.0, 180.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Scores one rendered view against its ground truth.
pub fn score_pair(rendered: &Image, truth: &Image) -> Result<(f64, f64), MetricsError> {
    Ok((psnr(rendered, truth)?, ssim(rendered, truth)?))
}

/// Renders every view of the split conditioned on each scene's reference
/// view and scores it against ground truth. Rows are ordered by scene then
/// view id, so reruns produce identical reports.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    reference_view: usize,
    render: &RenderConfig,
    seed: u64,
) -> anyhow::Result<MetricsReport> {
    let mut rows = Vec::new();
    for scene in &dataset.scenes {
        anyhow::ensure!(
            scene.train_views.contains(&reference_view),
            "reference view {reference_view} is not a training view of scene {}",
            scene.id
        );
        let view_ids = match split {
            Split::Train => &scene.train_views,
            Split::Test => &scene.test_views,
        };
        anyhow::ensure!(
            !view_ids.is_empty(),
            "scene {} has no views in the requested split",
            scene.id
        );
        let reference = ReferenceView::from_scene(scene, reference_view)?;
        for &view in view_ids {
            let record = &scene.views[view];
            let truth = record.image()?;
            let rendered =
                render_image(model, &reference, &record.intrinsics, &record.extrinsics, render, seed)?;
            let (psnr_db, ssim) = score_pair(&rendered, truth)?;
            rows.push(RowScore {
                scene: scene.id.clone(),
                view,
                pose_delta_deg: pose_delta_deg(&reference.extrinsics, &record.extrinsics),
                psnr_db,
                ssim,
            });
        }
    }
    Ok(MetricsReport::from_rows(rows))
}

#[derive(Clone, Debug)]
pub struct RowScore {
    pub scene: String,
    pub view: usize,
    pub pose_delta_deg: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct BucketScore {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub count: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub rows: Vec<RowScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub buckets: Vec<BucketScore>,
}

impl MetricsReport {
    /// Aggregates are plain arithmetic means over rows; buckets partition
    /// rows by the angle between reference and target viewing axes.
    pub fn from_rows(rows: Vec<RowScore>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let mut buckets = Vec::new();
        for win in BUCKET_EDGES_DEG.windows(2) {
            let (lo, hi) = (win[0], win[1]);
            let inside: Vec<&RowScore> = rows
                .iter()
                .filter(|r| r.pose_delta_deg >= lo && (r.pose_delta_deg < hi || (hi == 180.0 && r.pose_delta_deg <= 180.0)))
                .collect();
            let c = inside.len();
            buckets.push(BucketScore {
                lo_deg: lo,
                hi_deg: hi,
                count: c,
                mean_psnr_db: inside.iter().map(|r| r.psnr_db).sum::<f64>() / c.max(1) as f64,
                mean_ssim: inside.iter().map(|r| r.ssim).sum::<f64>() / c.max(1) as f64,
            });
        }
        MetricsReport { rows, mean_psnr_db, mean_ssim, buckets }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,view,pose_delta_deg,psnr_db,ssim\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.scene, r.view, r.pose_delta_deg, r.psnr_db, r.ssim).unwrap();
        }
        writeln!(out, "aggregate,,,{},{}", self.mean_psnr_db, self.mean_ssim).unwrap();
        out
    }

    pub fn summary_line(&self) -> String {
        format!("PSNR {:.2} dB  SSIM {:.4}", self.mean_psnr_db, self.mean_ssim)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "ssim: {SSIM_WINDOW}x{SSIM_WINDOW} gaussian window, sigma {SSIM_SIGMA}, c1 {SSIM_C1}, c2 {SSIM_C2}"
        )
        .unwrap();
        writeln!(out, "{:<10} {:>5} {:>10} {:>9} {:>7}", "scene", "view", "delta_deg", "psnr_db", "ssim").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>5} {:>10.1} {:>9.2} {:>7.4}",
                r.scene, r.view, r.pose_delta_deg, r.psnr_db, r.ssim
            )
            .unwrap();
        }
        writeln!(out, "buckets:").unwrap();
        for b in &self.buckets {
            if b.count == 0 {
                continue;
            }
            writeln!(
                out,
                "  [{:>3.0}, {:>3.0}) n={:<3} psnr {:>6.2} ssim {:>6.4}",
                b.lo_deg, b.hi_deg, b.count, b.mean_psnr_db, b.mean_ssim
            )
            .unwrap();
        }
        writeln!(out, "{}", self.summary_line()).unwrap();
        out
    }
}
