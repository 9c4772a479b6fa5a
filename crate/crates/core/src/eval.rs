//! Image and depth metrics, held-out evaluation and the sampling benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costvolume::CascadeConfig;
use crate::dataset::{Image, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::networks::ModelWeights;
use crate::renderer::{prepare_sources, render_image, render_with_sources, RenderConfig, RenderStats, SamplingMode};
use crate::tensor::Graph;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            op,
            "image size",
            format!("{}x{}", b.width, b.height),
            format!("{}x{}", a.width, a.height),
        ));
    }
    Ok(())
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    same_shape("mse", pred, gt)?;
    let s: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    Ok(s / pred.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| p.iter().map(|&v| f64::from(v)).sum::<f64>() / 3.0)
        .collect()
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows of the channel-mean images.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let x = grayscale(pred);
    let y = grayscale(gt);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_err: f64,
    pub taus: Vec<f64>,
    pub acc: Vec<f64>,
    pub n_pixels: usize,
}

/// Thresholds `{0.02, 0.10}·(far − near)`.
pub fn default_taus(near: f64, far: f64) -> Vec<f64> {
    vec![0.02 * (far - near), 0.10 * (far - near)]
}

pub fn depth_metrics(pred: &[f32], gt: &[f32], mask: &[bool], taus: &[f64]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::shape("depth_metrics", "length", gt.len(), pred.len().min(mask.len())));
    }
    let errs: Vec<f64> = (0..gt.len())
        .filter(|&i| mask[i])
        .map(|i| (f64::from(pred[i]) - f64::from(gt[i])).abs())
        .collect();
    if errs.is_empty() {
        return Err(Error::invalid("depth_metrics: mask selects no pixels"));
    }
    let n = errs.len() as f64;
    Ok(DepthMetrics {
        abs_err: errs.iter().sum::<f64>() / n,
        taus: taus.to_vec(),
        acc: taus.iter().map(|&t| errs.iter().filter(|&&e| e < t).count() as f64 / n).collect(),
        n_pixels: errs.len(),
    })
}

/// Pixel-wise mean of all training images.
pub fn mean_train_image(ds: &SceneDataset) -> Result<Image> {
    let ids = ds.ids(Split::Train);
    if ids.is_empty() {
        return Err(Error::invalid("dataset has no training views"));
    }
    let mut acc = vec![0.0f64; ds.width() * ds.height() * 3];
    for &id in &ids {
        for (a, &v) in acc.iter_mut().zip(&ds.view(id)?.image.data) {
            *a += f64::from(v);
        }
    }
    let mut img = Image::new(ds.width(), ds.height());
    for (o, a) in img.data.iter_mut().zip(acc) {
        *o = (a / ids.len() as f64) as f32;
    }
    Ok(img)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewReport {
    pub id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub depth_mvs: DepthMetrics,
    pub depth_nerf: DepthMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub mode: SamplingMode,
    pub n_samples: usize,
    pub n_views: usize,
    pub cascade: bool,
    pub planes_coarse: usize,
    pub planes_fine: usize,
    pub planes_single: usize,
    pub threads: usize,
}

impl ConfigSnapshot {
    pub fn of(cfg: &RenderConfig) -> Self {
        Self {
            mode: cfg.mode,
            n_samples: cfg.n_samples,
            n_views: cfg.n_views,
            cascade: cfg.cascade.cascade,
            planes_coarse: cfg.cascade.planes_coarse,
            planes_fine: cfg.cascade.planes_fine,
            planes_single: cfg.cascade.planes_single,
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_baseline_psnr: f64,
    pub depth_mvs_abs_err: f64,
    pub depth_mvs_acc: Vec<f64>,
    pub taus: Vec<f64>,
    pub config: ConfigSnapshot,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Renders every test view and scores it against ground truth.
pub fn evaluate(ds: &SceneDataset, w: &ModelWeights, cfg: &RenderConfig) -> Result<EvalReport> {
    let ids = ds.ids(Split::Test);
    if ids.is_empty() {
        return Err(Error::invalid("dataset has no test views"));
    }
    let baseline = mean_train_image(ds)?;
    let taus = default_taus(ds.near, ds.far);
    let mut views = Vec::with_capacity(ids.len());
    for id in ids {
        let view = ds.view(id)?;
        let out = render_image(ds, w, &view.camera, cfg)?;
        let mask: Vec<bool> = view.depth.iter().map(|&d| d > 0.0).collect();
        views.push(ViewReport {
            id,
            psnr: psnr(&out.image, &view.image)?,
            ssim: ssim(&out.image, &view.image)?,
            baseline_psnr: psnr(&baseline, &view.image)?,
            depth_mvs: depth_metrics(&out.depth_mvs, &view.depth, &mask, &taus)?,
            depth_nerf: depth_metrics(&out.depth_nerf, &view.depth, &mask, &taus)?,
        });
    }
    let depth_mvs_acc = (0..taus.len())
        .map(|t| mean(views.iter().map(|v| v.depth_mvs.acc[t])))
        .collect();
    Ok(EvalReport {
        mean_psnr: mean(views.iter().map(|v| v.psnr)),
        mean_ssim: mean(views.iter().map(|v| v.ssim)),
        mean_baseline_psnr: mean(views.iter().map(|v| v.baseline_psnr)),
        depth_mvs_abs_err: mean(views.iter().map(|v| v.depth_mvs.abs_err)),
        depth_mvs_acc,
        taus,
        config: ConfigSnapshot::of(cfg),
        views,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchCase {
    pub name: String,
    pub mode: SamplingMode,
    pub n_samples: usize,
    pub cascade: bool,
}

impl BenchCase {
    pub fn new(name: &str, mode: SamplingMode, n_samples: usize, cascade: bool) -> Self {
        Self {
            name: name.to_string(),
            mode,
            n_samples,
            cascade,
        }
    }

    pub fn render_config(&self, base: &RenderConfig) -> RenderConfig {
        RenderConfig {
            mode: self.mode,
            n_samples: self.n_samples,
            cascade: CascadeConfig {
                cascade: self.cascade,
                ..base.cascade.clone()
            },
            ..base.clone()
        }
    }
}

/// Guided-2, uniform-128, uniform-2 and the single-volume guided-2 variant.
pub fn default_bench_cases() -> Vec<BenchCase> {
    vec![
        BenchCase::new("guided-2", SamplingMode::Guided, 2, true),
        BenchCase::new("uniform-128", SamplingMode::Uniform, 128, true),
        BenchCase::new("uniform-2", SamplingMode::Uniform, 2, true),
        BenchCase::new("guided-2-single", SamplingMode::Guided, 2, false),
    ]
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub cv: f64,
}

impl TimingSummary {
    pub fn of(samples: &[f64]) -> Self {
        let m = mean(samples.iter().copied());
        let var = mean(samples.iter().map(|&s| (s - m).powi(2)));
        Self {
            mean_ms: m,
            std_ms: var.sqrt(),
            cv: if m > 0.0 { var.sqrt() / m } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchResult {
    pub case: BenchCase,
    pub psnr: f64,
    pub features: TimingSummary,
    pub volume: TimingSummary,
    pub radiance: TimingSummary,
    pub total: TimingSummary,
    pub fps: f64,
    pub noisy: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub warmups: usize,
    pub repeats: usize,
    pub threads: usize,
    /// Timed view (first test view).
    pub view: usize,
    pub noisy: bool,
    pub fps_guided: Option<f64>,
    pub fps_uniform128: Option<f64>,
    /// Radiance-phase speedup of guided-2 over uniform-128.
    pub speedup: Option<f64>,
}

impl BenchReport {
    pub fn get(&self, name: &str) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.case.name == name)
    }
}

pub const NOISY_CV: f64 = 0.15;

/// Times each case on the first test view (`warmups` untimed renders, then
/// `repeats` timed ones) and scores it on all test views.
pub fn benchmark_sampling(
    ds: &SceneDataset,
    w: &ModelWeights,
    base: &RenderConfig,
    cases: &[BenchCase],
    warmups: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 2 {
        return Err(Error::invalid("benchmark needs at least 2 repeats"));
    }
    let test = ds.ids(Split::Test);
    let &view_id = test.first().ok_or_else(|| Error::invalid("dataset has no test views"))?;
    let tgt = ds.view(view_id)?.camera.clone();
    let mut results = Vec::with_capacity(cases.len());
    for case in cases {
        let cfg = case.render_config(base);
        let mut samples: Vec<RenderStats> = Vec::with_capacity(repeats);
        for i in 0..warmups + repeats {
            let g = Graph::new();
            let t = Instant::now();
            let sources = prepare_sources(&g, w, ds, &tgt, cfg.n_views)?;
            let stats = RenderStats {
                ms_features: t.elapsed().as_secs_f64() * 1e3,
                ..Default::default()
            };
            let out = render_with_sources(w, &sources, &tgt, &cfg, stats)?;
            if i >= warmups {
                samples.push(out.stats);
            }
        }
        let pick = |f: fn(&RenderStats) -> f64| TimingSummary::of(&samples.iter().map(f).collect::<Vec<_>>());
        let total = pick(RenderStats::total_ms);
        let radiance = pick(|s| s.ms_radiance);
        let mut psnrs = Vec::with_capacity(test.len());
        for &id in &test {
            let view = ds.view(id)?;
            psnrs.push(psnr(&render_image(ds, w, &view.camera, &cfg)?.image, &view.image)?);
        }
        results.push(BenchResult {
            case: case.clone(),
            psnr: mean(psnrs),
            features: pick(|s| s.ms_features),
            volume: pick(|s| s.ms_volume),
            noisy: total.cv >= NOISY_CV || radiance.cv >= NOISY_CV,
            fps: 1e3 / total.mean_ms,
            radiance,
            total,
        });
    }
    let find = |n: &str| results.iter().find(|r| r.case.name == n);
    let (guided, uniform) = (find("guided-2"), find("uniform-128"));
    let speedup = match (guided, uniform) {
        (Some(g), Some(u)) => Some(u.radiance.mean_ms / g.radiance.mean_ms),
        _ => None,
    };
    Ok(BenchReport {
        fps_guided: guided.map(|r| r.fps),
        fps_uniform128: uniform.map(|r| r.fps),
        speedup,
        noisy: results.iter().any(|r| r.noisy),
        warmups,
        repeats,
        threads: rayon::current_num_threads(),
        view: view_id,
        results,
    })
}
