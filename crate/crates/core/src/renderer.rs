//! Depth-guided sampling, per-point radiance and alpha compositing.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costvolume::{cascade_predict, select_sources, upsample_map, CascadeConfig, CascadeOutput, SourceView};
use crate::dataset::{Image, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{direction_delta, project_points, Camera};
use crate::networks::{blend_color, density_mlp, pool_features, ModelWeights, ViewSamples};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Samples inside the predicted per-pixel depth range.
    Guided,
    /// Samples spread over `[near, far]`.
    Uniform,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(Self::Guided),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::invalid(format!("unknown sampling mode '{s}' (expected guided or uniform)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderConfig {
    pub mode: SamplingMode,
    pub n_samples: usize,
    pub n_views: usize,
    pub cascade: CascadeConfig,
    pub background: [f64; 3],
    /// Samples per parallel work item; fixed so results do not depend on the
    /// number of workers.
    pub chunk_samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Guided,
            n_samples: 2,
            n_views: 3,
            cascade: CascadeConfig::default(),
            background: [0.0; 3],
            chunk_samples: 4096,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub ms_features: f64,
    pub ms_volume: f64,
    pub ms_radiance: f64,
    pub n_samples_total: usize,
}

impl RenderStats {
    pub fn total_ms(&self) -> f64 {
        self.ms_features + self.ms_volume + self.ms_radiance
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated compositing weight per pixel.
    pub acc: Vec<f32>,
    /// Expected depth under the compositing weights.
    pub depth_nerf: Vec<f32>,
    /// Mean of the final depth distribution, upsampled to full resolution.
    pub depth_mvs: Vec<f32>,
    pub stats: RenderStats,
}

/// Midpoints of `n` equal sub-intervals of `[lo, hi]` and their common width.
pub fn sample_points(lo: f64, hi: f64, n: usize) -> Result<(Vec<f64>, f64)> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("sample_points: empty range [{lo}, {hi}]")));
    }
    if n == 0 {
        return Err(Error::invalid("sample_points: need at least one sample"));
    }
    let delta = (hi - lo) / n as f64;
    Ok(((0..n).map(|k| lo + (k as f64 + 0.5) * delta).collect(), delta))
}

/// Untracked per-ray results of [`composite`].
#[derive(Clone, Debug)]
pub struct CompositeAux {
    pub acc: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Alpha compositing of `k` samples per ray. `sigma`, `delta` are `[r, k]`,
/// `colors` is `[r*k, 3]` (ray-major), `depths` holds the `r*k` sample
/// depths. Returns `[r, 3]` colors, differentiable in all tensor inputs.
pub fn composite<T: Scalar>(
    g: &Graph<T>,
    sigma: &Tensor<T>,
    delta: &Tensor<T>,
    colors: &Tensor<T>,
    depths: &[f64],
    background: [f64; 3],
) -> Result<(Tensor<T>, CompositeAux)> {
    sigma.expect_rank("composite", 2)?;
    let (r, k) = (sigma.shape()[0], sigma.shape()[1]);
    if delta.shape() != sigma.shape() {
        return Err(Error::shape("composite", "delta", format!("[{r}, {k}]"), format!("{:?}", delta.shape())));
    }
    if colors.shape() != [r * k, 3] {
        return Err(Error::shape("composite", "colors", format!("[{}, 3]", r * k), format!("{:?}", colors.shape())));
    }
    if depths.len() != r * k {
        return Err(Error::shape("composite", "depths", r * k, depths.len()));
    }
    if let Some(s) = sigma.data().iter().find(|s| **s < T::zero()) {
        return Err(Error::invalid(format!("composite: negative density {s}")));
    }
    let (sd, dd, cd) = (sigma.data(), delta.data(), colors.data());
    let bg = background.map(T::lit);
    let mut out = vec![T::zero(); 3 * r];
    // Transmittance before each sample plus the final one, per ray.
    let mut trans = vec![T::zero(); r * (k + 1)];
    let mut aux = CompositeAux {
        acc: vec![0.0; r],
        depth: vec![0.0; r],
    };
    for ray in 0..r {
        let mut t = T::one();
        let mut zsum = 0.0;
        for s in 0..k {
            let i = ray * k + s;
            trans[ray * (k + 1) + s] = t;
            let next = t * (-(sd[i] * dd[i])).exp();
            let wk = t - next;
            for c in 0..3 {
                out[3 * ray + c] += wk * cd[3 * i + c];
            }
            zsum += wk.to_f64() * depths[i];
            t = next;
        }
        trans[ray * (k + 1) + k] = t;
        for c in 0..3 {
            out[3 * ray + c] += t * bg[c];
        }
        let acc = 1.0 - t.to_f64();
        aux.acc[ray] = acc;
        aux.depth[ray] = zsum / acc.max(1e-10);
    }
    let (ts, td, tc) = (sigma.requires_grad(), delta.requires_grad(), colors.requires_grad());
    let (sa, da, ca) = (sigma.arc(), delta.arc(), colors.arc());
    let out_t = g.record(vec![r, 3], out, &[sigma, delta, colors], move |gr| {
        let mut gs = vec![T::zero(); r * k];
        let mut gd = vec![T::zero(); r * k];
        let mut gc = vec![T::zero(); 3 * r * k];
        for ray in 0..r {
            let go = &gr[3 * ray..3 * ray + 3];
            let dot = |c: &[T]| go[0] * c[0] + go[1] * c[1] + go[2] * c[2];
            let tr = &trans[ray * (k + 1)..(ray + 1) * (k + 1)];
            // Σ_{j>s} w_j (g·c_j), accumulated from the back.
            let mut tail = T::zero();
            let gbg = tr[k] * dot(&bg);
            for s in (0..k).rev() {
                let i = ray * k + s;
                let c = &ca[3 * i..3 * i + 3];
                let wk = tr[s] - tr[s + 1];
                let gsk = tr[s + 1] * dot(c) - tail - gbg;
                tail += wk * dot(c);
                gs[i] = gsk * da[i];
                gd[i] = gsk * sa[i];
                for ch in 0..3 {
                    gc[3 * i + ch] = wk * go[ch];
                }
            }
        }
        vec![ts.then_some(gs), td.then_some(gd), tc.then_some(gc)]
    });
    Ok((out_t, aux))
}

/// Full-resolution per-pixel maps that guide sampling, each `[H*W, 1]`.
#[derive(Clone, Debug)]
pub struct GuideMaps<T: Scalar = f32> {
    pub lo: Tensor<T>,
    pub hi: Tensor<T>,
    /// Depth span of each pixel's fine plane stack.
    pub plane_lo: Tensor<T>,
    pub plane_hi: Tensor<T>,
    pub mean: Tensor<T>,
}

impl<T: Scalar> GuideMaps<T> {
    pub fn from_cascade(g: &Graph<T>, out: &CascadeOutput<T>) -> Result<Self> {
        let flat = |m: &Tensor<T>| -> Result<Tensor<T>> {
            let up = upsample_map(g, m, 2)?;
            let n = up.numel();
            g.reshape(&up, &[n, 1])
        };
        Ok(Self {
            lo: flat(&out.fine.lo)?,
            hi: flat(&out.fine.hi)?,
            plane_lo: flat(&out.plane_lo)?,
            plane_hi: flat(&out.plane_hi)?,
            mean: flat(&out.fine.mean)?,
        })
    }

    /// Same maps with the sampling range widened to `[near, far]`.
    pub fn widened(&self, near: f64, far: f64) -> Self {
        let n = self.lo.shape()[0];
        Self {
            lo: Tensor::full(&[n, 1], T::lit(near)),
            hi: Tensor::full(&[n, 1], T::lit(far)),
            ..self.clone()
        }
    }
}

/// Per-ray outputs of [`render_rays`].
pub struct RayOutput<T: Scalar> {
    /// `[r, 3]`
    pub rgb: Tensor<T>,
    pub aux: CompositeAux,
}

/// Renders the given pixels (flat indices `y * W + x`) of `tgt`.
///
/// `offsets`, when given, places sample `k` of ray `r` at fraction
/// `(k + offsets[r*n + k]) / n` of the ray's range; the default is 0.5
/// (sub-interval midpoints).
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Scalar>(
    g: &Graph<T>,
    w: &ModelWeights<T>,
    sources: &[SourceView<T>],
    tgt: &Camera,
    cascade: &CascadeOutput<T>,
    maps: &GuideMaps<T>,
    pixels: &[usize],
    n_samples: usize,
    offsets: Option<&[f64]>,
    background: [f64; 3],
) -> Result<RayOutput<T>> {
    let (r, k) = (pixels.len(), n_samples);
    if r == 0 || k == 0 {
        return Err(Error::invalid("render_rays: need at least one ray and one sample"));
    }
    if let Some(o) = offsets {
        if o.len() != r * k {
            return Err(Error::shape("render_rays", "offsets", r * k, o.len()));
        }
    }
    let m = r * k;
    let lo = g.gather_rows(&maps.lo, pixels)?;
    let hi = g.gather_rows(&maps.hi, pixels)?;
    let width = g.sub(&hi, &lo)?;
    let inv_k = T::lit(1.0 / k as f64);

    // Sample depths [r, k] and the matching per-sample spacing.
    let frac: Vec<T> = match offsets {
        Some(o) => o.iter().enumerate().map(|(i, &u)| T::lit(((i % k) as f64 + u) / k as f64)).collect(),
        None => (0..m).map(|i| T::lit(((i % k) as f64 + 0.5) / k as f64)).collect(),
    };
    let frac = Tensor::new(&[r, k], frac)?;
    let lo_k = g.concat_cols(&vec![&lo; k])?;
    let width_k = g.concat_cols(&vec![&width; k])?;
    let z = g.add(&lo_k, &g.mul(&width_k, &frac)?)?;
    let delta = g.mul_scalar(&width_k, inv_k);
    let z_col = g.reshape(&z, &[m, 1])?;

    // World points X = C + z · Rᵀ K⁻¹ [u, v, 1].
    let center = tgt.center();
    let mut dirs = Vec::with_capacity(3 * m);
    let mut origin = Vec::with_capacity(3 * m);
    let mut grid_xy = Vec::with_capacity(2 * m);
    let (w2, h2) = (cascade.feat_volume.shape()[3], cascade.feat_volume.shape()[2]);
    for &p in pixels {
        let (x, y) = ((p % tgt.width) as f64, (p / tgt.width) as f64);
        let d = tgt.ray_direction_z1(x, y);
        let gx = (x / 2.0).min((w2 - 1) as f64);
        let gy = (y / 2.0).min((h2 - 1) as f64);
        for _ in 0..k {
            dirs.extend(d.iter().map(|&v| T::lit(v)));
            origin.extend(center.iter().map(|&v| T::lit(v)));
            grid_xy.push((gx, gy));
        }
    }
    let dirs = Tensor::new(&[m, 3], dirs)?;
    let origin = Tensor::new(&[m, 3], origin)?;
    let points = g.add(&origin, &g.mul(&g.concat_cols(&[&z_col, &z_col, &z_col])?, &dirs)?)?;

    // Voxel-aligned features: position of each sample inside its pixel's plane stack.
    let d_fine = cascade.feat_volume.shape()[1];
    let plo = g.gather_rows(&maps.plane_lo, pixels)?;
    let phi = g.gather_rows(&maps.plane_hi, pixels)?;
    let plo_k = g.reshape(&g.concat_cols(&vec![&plo; k])?, &[m, 1])?;
    let span_k = g.reshape(&g.concat_cols(&vec![&g.sub(&phi, &plo)?; k])?, &[m, 1])?;
    let zc = g.mul_scalar(&g.div(&g.sub(&z_col, &plo_k)?, &span_k)?, T::lit((d_fine - 1) as f64));
    let zc = g.clamp_max(&g.clamp_min(&zc, T::zero()), T::lit((d_fine - 1) as f64));
    let gx = Tensor::new(&[m, 1], grid_xy.iter().map(|&(x, _)| T::lit(x)).collect())?;
    let gy = Tensor::new(&[m, 1], grid_xy.iter().map(|&(_, y)| T::lit(y)).collect())?;
    let vcoords = g.concat_cols(&[&gx, &gy, &zc])?;
    let (f_voxel, _) = g.grid_sample_3d(&cascade.feat_volume, &vcoords)?;

    // Pixel-aligned features and colors from every source view.
    let mut feats = Vec::with_capacity(sources.len());
    let mut colors = Vec::with_capacity(sources.len());
    let mut deltas = Vec::with_capacity(sources.len());
    let mut masks = Vec::with_capacity(sources.len());
    for s in sources {
        let (uv, depth) = project_points(g, &s.camera, &points)?;
        let (f, inb) = g.grid_sample_2d(&s.pyramid.f3, &uv)?;
        let (c, _) = g.grid_sample_2d(&s.image, &uv)?;
        masks.push(inb.iter().zip(&depth).map(|(&a, &d)| a && d > 0.0).collect::<Vec<bool>>());
        feats.push(f);
        colors.push(c);
        deltas.push(direction_delta(g, &points, &center, &s.camera.center())?);
    }
    let frefs: Vec<&Tensor<T>> = feats.iter().collect();
    let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
    let f_img = pool_features(g, w, &frefs, &mrefs)?;
    let (f_p, sigma) = density_mlp(g, w, &f_img, &f_voxel)?;
    let seen: Vec<T> = (0..m)
        .map(|i| if masks.iter().any(|mk| mk[i]) { T::one() } else { T::zero() })
        .collect();
    let sigma = g.scale_rows(&sigma, &seen)?;
    let views: Vec<ViewSamples<T>> = (0..sources.len())
        .map(|i| ViewSamples {
            feat: &feats[i],
            color: &colors[i],
            delta: &deltas[i],
            valid: &masks[i],
        })
        .collect();
    let rgb_pts = blend_color(g, w, &f_p, &views)?;
    let depths: Vec<f64> = z.data().iter().map(|&v| v.to_f64()).collect();
    let (rgb, aux) = composite(g, &g.reshape(&sigma, &[r, k])?, &delta, &rgb_pts, &depths, background)?;
    Ok(RayOutput { rgb, aux })
}

/// Source views used to render `tgt`: the nearest training views.
pub fn prepare_sources<T: Scalar>(
    g: &Graph<T>,
    w: &ModelWeights<T>,
    ds: &SceneDataset,
    tgt: &Camera,
    n_views: usize,
) -> Result<Vec<SourceView<T>>> {
    let ids = select_sources(ds, tgt, &ds.ids(Split::Train), n_views)?;
    ids.into_iter().map(|id| SourceView::new(g, w, ds, id)).collect()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Renders a full image of `tgt` with prepared source views.
pub fn render_with_sources(
    w: &ModelWeights,
    sources: &[SourceView],
    tgt: &Camera,
    cfg: &RenderConfig,
    mut stats: RenderStats,
) -> Result<RenderOutput> {
    tgt.validate()?;
    let g = Graph::new();
    let t = Instant::now();
    let cascade = cascade_predict(&g, w, sources, tgt, &cfg.cascade)?;
    let guided = GuideMaps::from_cascade(&g, &cascade)?;
    stats.ms_volume = ms_since(t);
    let (maps, n) = match cfg.mode {
        SamplingMode::Guided => (guided, cfg.n_samples),
        SamplingMode::Uniform => (guided.widened(tgt.near, tgt.far), cfg.n_samples),
    };
    let t = Instant::now();
    let npix = tgt.width * tgt.height;
    let rays_per_chunk = (cfg.chunk_samples / n).max(1);
    let pixels: Vec<usize> = (0..npix).collect();
    let shared = Arc::new((cascade, maps));
    let chunks: Vec<Result<(Vec<f32>, CompositeAux)>> = pixels
        .par_chunks(rays_per_chunk)
        .map(|px| {
            let g = Graph::new();
            let (cascade, maps) = &*shared;
            let out = render_rays(&g, w, sources, tgt, cascade, maps, px, n, None, cfg.background)?;
            Ok((out.rgb.data().to_vec(), out.aux))
        })
        .collect();
    let mut image = Image::new(tgt.width, tgt.height);
    let mut acc = Vec::with_capacity(npix);
    let mut depth_nerf = Vec::with_capacity(npix);
    let mut offset = 0;
    for c in chunks {
        let (rgb, aux) = c?;
        image.data[offset..offset + rgb.len()].copy_from_slice(&rgb);
        offset += rgb.len();
        acc.extend(aux.acc.iter().map(|&a| a as f32));
        depth_nerf.extend(aux.depth.iter().map(|&d| d as f32));
    }
    stats.ms_radiance = ms_since(t);
    stats.n_samples_total = npix * n;
    let depth_mvs = shared.1.mean.data().to_vec();
    Ok(RenderOutput {
        image,
        acc,
        depth_nerf,
        depth_mvs,
        stats,
    })
}

/// Selects source views, extracts their features and renders `tgt`.
pub fn render_image(ds: &SceneDataset, w: &ModelWeights, tgt: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    let g = Graph::new();
    let t = Instant::now();
    let sources = prepare_sources(&g, w, ds, tgt, cfg.n_views)?;
    let stats = RenderStats {
        ms_features: ms_since(t),
        ..Default::default()
    };
    render_with_sources(w, &sources, tgt, cfg, stats)
}
