//! Plane-sweep cost volumes, depth distributions and the two-level cascade.

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::geometry::{plane_warp_coords, Camera};
use crate::networks::{extract_features, regularize_volume, FeaturePyramid, Level, ModelWeights};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct CascadeConfig {
    pub planes_coarse: usize,
    pub planes_fine: usize,
    /// Half-width of the depth range in standard deviations.
    pub lambda: f64,
    /// Plane count of the single volume used when the cascade is disabled.
    pub planes_single: usize,
    pub cascade: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            planes_coarse: 64,
            planes_fine: 8,
            lambda: 1.0,
            planes_single: 128,
            cascade: true,
        }
    }
}

/// A source view prepared for rendering: camera, image `[3, H, W]` and
/// feature pyramid.
#[derive(Clone, Debug)]
pub struct SourceView<T: Scalar = f32> {
    pub id: usize,
    pub camera: Camera,
    pub image: Tensor<T>,
    pub pyramid: FeaturePyramid<T>,
}

impl<T: Scalar> SourceView<T> {
    pub fn new(g: &Graph<T>, w: &ModelWeights<T>, ds: &SceneDataset, id: usize) -> Result<Self> {
        let v = ds.view(id)?;
        let image = Tensor::new(
            &[3, v.camera.height, v.camera.width],
            v.image.to_chw().into_iter().map(|x| T::lit(x as f64)).collect(),
        )?;
        let pyramid = extract_features(g, w, &image)?;
        Ok(Self {
            id,
            camera: v.camera.clone(),
            image,
            pyramid,
        })
    }
}

/// The `n` views in `candidates` whose camera centers are nearest to
/// `target`, ties broken by lower id.
pub fn select_sources(ds: &SceneDataset, target: &Camera, candidates: &[usize], n: usize) -> Result<Vec<usize>> {
    let c = target.center();
    let mut scored = Vec::with_capacity(candidates.len());
    for &id in candidates {
        scored.push(((ds.view(id)?.camera.center() - c).norm(), id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, id)| id).collect())
}

#[derive(Clone, Debug)]
pub struct PlaneSweepVolume<T: Scalar = f32> {
    /// Variance over valid views, `[C, D, gh, gw]`.
    pub cost: Tensor<T>,
    /// Per-voxel count of views with a valid warp.
    pub valid_count: Vec<u8>,
}

/// Warps each source's feature map onto `planes [D, gh, gw]` and takes the
/// per-voxel variance across views with valid warps. `scale` maps target
/// pixels to grid cells.
pub fn build_cost_volume<T: Scalar>(
    g: &Graph<T>,
    sources: &[SourceView<T>],
    tgt: &Camera,
    planes: &Tensor<T>,
    level: Level,
) -> Result<PlaneSweepVolume<T>> {
    if sources.len() < 2 {
        return Err(Error::invalid(format!(
            "build_cost_volume: need at least 2 source views, got {}",
            sources.len()
        )));
    }
    planes.expect_rank("build_cost_volume", 3)?;
    let (d, gh, gw) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let scale = level_scale(level);
    let mut warped = Vec::with_capacity(sources.len());
    let mut masks = Vec::with_capacity(sources.len());
    for s in sources {
        let feat = match level {
            Level::Coarse => &s.pyramid.f1,
            Level::Fine => &s.pyramid.f2,
        };
        let (coords, front) = plane_warp_coords(g, planes, &s.camera, tgt, scale)?;
        let (vals, inb) = g.grid_sample_2d(feat, &coords)?;
        masks.push(front.iter().zip(&inb).map(|(&a, &b)| a && b).collect::<Vec<bool>>());
        warped.push(vals);
    }
    let c = warped[0].shape()[1];
    let refs: Vec<&Tensor<T>> = warped.iter().collect();
    let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
    let moments = g.masked_moments(&refs, &mrefs)?;
    let var = g.slice_cols(&moments, c, 2 * c)?;
    let cost = g.reshape(&g.transpose(&var)?, &[c, d, gh, gw])?;
    let valid_count = (0..d * gh * gw)
        .map(|i| masks.iter().filter(|m| m[i]).count() as u8)
        .collect();
    Ok(PlaneSweepVolume { cost, valid_count })
}

/// Grid cells per target pixel for each level.
pub fn level_scale(level: Level) -> f64 {
    match level {
        Level::Coarse => 0.25,
        Level::Fine => 0.5,
    }
}

#[derive(Clone, Debug)]
pub struct DepthDistribution<T: Scalar = f32> {
    /// Expected depth, `[gh, gw]`.
    pub mean: Tensor<T>,
    /// Standard deviation, `[gh, gw]`.
    pub std: Tensor<T>,
    pub lo: Tensor<T>,
    pub hi: Tensor<T>,
}

/// Minimum half-width of a depth range.
pub fn range_floor(near: f64, far: f64) -> f64 {
    1e-3 * (far - near)
}

/// Softmax over planes, then mean, standard deviation and the range
/// `[mean - hw, mean + hw]` with `hw = max(λ·std, ε)`, clamped to `[near, far]`.
pub fn depth_distribution<T: Scalar>(
    g: &Graph<T>,
    logits: &Tensor<T>,
    planes: &Tensor<T>,
    lambda: f64,
    near: f64,
    far: f64,
) -> Result<DepthDistribution<T>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("depth_distribution: lambda must be positive, got {lambda}")));
    }
    if logits.shape() != planes.shape() || logits.shape().len() != 3 {
        return Err(Error::shape(
            "depth_distribution",
            "logits/planes",
            format!("{:?}", planes.shape()),
            format!("{:?}", logits.shape()),
        ));
    }
    let d = planes.shape()[0];
    let p = g.softmax_axis(logits, 0)?;
    let mean = g.sum_axis0(&g.mul(&p, planes)?)?;
    let diff = g.sub(planes, &g.broadcast_axis0(&mean, d))?;
    let var = g.sum_axis0(&g.mul(&p, &g.square(&diff))?)?;
    let std = g.sqrt(&var);
    let hw = g.clamp_min(&g.mul_scalar(&std, T::lit(lambda)), T::lit(range_floor(near, far)));
    let lo = g.clamp_min(&g.sub(&mean, &hw)?, T::lit(near));
    let hi = g.clamp_max(&g.add(&mean, &hw)?, T::lit(far));
    Ok(DepthDistribution { mean, std, lo, hi })
}

/// Bilinear upsampling of a `[h, w]` map.
pub fn upsample_map<T: Scalar>(g: &Graph<T>, map: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let up = g.upsample_bilinear(&g.reshape(map, &[1, h, w])?, factor)?;
    g.reshape(&up, &[h * factor, w * factor])
}

/// Upsamples the low and high range maps independently.
pub fn upsample_range<T: Scalar>(g: &Graph<T>, lo: &Tensor<T>, hi: &Tensor<T>, factor: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((upsample_map(g, lo, factor)?, upsample_map(g, hi, factor)?))
}

/// `d` planes per pixel evenly spaced from `lo` to `hi` inclusive: `[d, h, w]`.
pub fn planes_in_range<T: Scalar>(g: &Graph<T>, lo: &Tensor<T>, hi: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    if d < 2 {
        return Err(Error::invalid("planes_in_range: need at least 2 planes"));
    }
    let n = lo.numel();
    let steps: Vec<T> = (0..d)
        .flat_map(|k| std::iter::repeat_n(T::lit(k as f64 / (d - 1) as f64), n))
        .collect();
    let mut shape = vec![d];
    shape.extend_from_slice(lo.shape());
    let steps = Tensor::new(&shape, steps)?;
    let width = g.sub(hi, lo)?;
    g.add(&g.broadcast_axis0(lo, d), &g.mul(&g.broadcast_axis0(&width, d), &steps)?)
}

/// `d` depths shared by all `h × w` cells, evenly spaced over `[near, far]`.
pub fn uniform_planes<T: Scalar>(near: f64, far: f64, d: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut v = Vec::with_capacity(d * h * w);
    for k in 0..d {
        let z = near + (far - near) * k as f64 / (d - 1).max(1) as f64;
        v.extend(std::iter::repeat_n(T::lit(z), h * w));
    }
    Tensor::new(&[d, h, w], v)
}

#[derive(Clone, Debug)]
pub struct CascadeOutput<T: Scalar = f32> {
    /// Absent when the cascade is disabled.
    pub coarse: Option<DepthDistribution<T>>,
    /// Distribution of the final volume on the H/2 grid.
    pub fine: DepthDistribution<T>,
    /// `[16, D', H/2, W/2]`
    pub feat_volume: Tensor<T>,
    /// `[D', H/2, W/2]`
    pub fine_planes: Tensor<T>,
    /// First and last plane depth of each fine-grid pixel's stack.
    pub plane_lo: Tensor<T>,
    pub plane_hi: Tensor<T>,
}

/// Coarse volume (H/4 grid, uniform planes) → range, upsampled ×2 → fine
/// volume inside the range (H/2 grid) → fine distribution and feature volume.
/// With the cascade disabled, a single uniform volume is built at H/2.
pub fn cascade_predict<T: Scalar>(
    g: &Graph<T>,
    w: &ModelWeights<T>,
    sources: &[SourceView<T>],
    tgt: &Camera,
    cfg: &CascadeConfig,
) -> Result<CascadeOutput<T>> {
    let (near, far) = (tgt.near, tgt.far);
    if tgt.width % 4 != 0 || tgt.height % 4 != 0 {
        return Err(Error::shape("cascade_predict", "target H/W", "multiples of 4", format!("{}x{}", tgt.height, tgt.width)));
    }
    let (h2, w2) = (tgt.height / 2, tgt.width / 2);
    let (coarse, fine_planes) = if cfg.cascade {
        let planes = uniform_planes::<T>(near, far, cfg.planes_coarse, tgt.height / 4, tgt.width / 4)?;
        let vol = build_cost_volume(g, sources, tgt, &planes, Level::Coarse)?;
        let (logits, _) = regularize_volume(g, w, &vol.cost, Level::Coarse)?;
        let dist = depth_distribution(g, &logits, &planes, cfg.lambda, near, far)?;
        let (lo, hi) = upsample_range(g, &dist.lo, &dist.hi, 2)?;
        let planes = planes_in_range(g, &lo, &hi, cfg.planes_fine)?;
        (Some(dist), planes)
    } else {
        (None, uniform_planes::<T>(near, far, cfg.planes_single, h2, w2)?)
    };
    let d = fine_planes.shape()[0];
    let vol = build_cost_volume(g, sources, tgt, &fine_planes, Level::Fine)?;
    let (logits, feat) = regularize_volume(g, w, &vol.cost, Level::Fine)?;
    let fine = depth_distribution(g, &logits, &fine_planes, cfg.lambda, near, far)?;
    let plane_lo = g.reshape(&g.slice0(&fine_planes, 0, 1)?, &[h2, w2])?;
    let plane_hi = g.reshape(&g.slice0(&fine_planes, d - 1, d)?, &[h2, w2])?;
    Ok(CascadeOutput {
        coarse,
        fine,
        feat_volume: feat.expect("fine level emits a feature volume"),
        fine_planes,
        plane_lo,
        plane_hi,
    })
}
