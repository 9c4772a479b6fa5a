//! Trainable components: the 2D feature UNet, the two 3D regularizers, the
//! view-pooling MLP, the density MLP and the blending MLP.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor};

pub const GROUPS: [&str; 6] = ["unet", "reg3d_coarse", "reg3d_fine", "pool_mlp", "phi", "varphi"];

pub const F1_CHANNELS: usize = 32;
pub const F2_CHANNELS: usize = 16;
pub const F3_CHANNELS: usize = 8;
pub const VOXEL_CHANNELS: usize = 16;
pub const POINT_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Conv2d,
    Deconv2d,
    Conv3d,
    Deconv3d,
    Linear,
}

/// Layer table: name, kind, weight shape. Every layer has a bias.
const LAYERS: &[(&str, Kind, &[usize])] = &[
    ("unet.e0", Kind::Conv2d, &[8, 3, 3, 3]),
    ("unet.e1", Kind::Conv2d, &[16, 8, 3, 3]),
    ("unet.e2", Kind::Conv2d, &[32, 16, 3, 3]),
    ("unet.f1", Kind::Conv2d, &[32, 32, 3, 3]),
    ("unet.up1", Kind::Deconv2d, &[32, 16, 3, 3]),
    ("unet.f2", Kind::Conv2d, &[16, 16, 3, 3]),
    ("unet.up2", Kind::Deconv2d, &[16, 8, 3, 3]),
    ("unet.f3", Kind::Conv2d, &[8, 8, 3, 3]),
    ("reg3d_coarse.c0", Kind::Conv3d, &[8, 32, 3, 3, 3]),
    ("reg3d_coarse.d1", Kind::Conv3d, &[16, 8, 3, 3, 3]),
    ("reg3d_coarse.c1", Kind::Conv3d, &[16, 16, 3, 3, 3]),
    ("reg3d_coarse.d2", Kind::Conv3d, &[32, 16, 3, 3, 3]),
    ("reg3d_coarse.c2", Kind::Conv3d, &[32, 32, 3, 3, 3]),
    ("reg3d_coarse.u2", Kind::Deconv3d, &[32, 16, 3, 3, 3]),
    ("reg3d_coarse.u1", Kind::Deconv3d, &[16, 8, 3, 3, 3]),
    ("reg3d_coarse.prob", Kind::Conv3d, &[1, 8, 3, 3, 3]),
    ("reg3d_fine.c0", Kind::Conv3d, &[8, 16, 3, 3, 3]),
    ("reg3d_fine.d1", Kind::Conv3d, &[16, 8, 3, 3, 3]),
    ("reg3d_fine.c1", Kind::Conv3d, &[16, 16, 3, 3, 3]),
    ("reg3d_fine.d2", Kind::Conv3d, &[32, 16, 3, 3, 3]),
    ("reg3d_fine.c2", Kind::Conv3d, &[32, 32, 3, 3, 3]),
    ("reg3d_fine.u2", Kind::Deconv3d, &[32, 16, 3, 3, 3]),
    ("reg3d_fine.u1", Kind::Deconv3d, &[16, 8, 3, 3, 3]),
    ("reg3d_fine.prob", Kind::Conv3d, &[1, 8, 3, 3, 3]),
    ("reg3d_fine.feat", Kind::Conv3d, &[16, 8, 3, 3, 3]),
    ("pool_mlp.l0", Kind::Linear, &[16, 24]),
    ("pool_mlp.l1", Kind::Linear, &[1, 16]),
    ("phi.l0", Kind::Linear, &[128, 24]),
    ("phi.l1", Kind::Linear, &[65, 128]),
    ("varphi.l0", Kind::Linear, &[128, 76]),
    ("varphi.l1", Kind::Linear, &[64, 128]),
    ("varphi.l2", Kind::Linear, &[1, 64]),
];

fn fan_in(kind: Kind, shape: &[usize]) -> usize {
    match kind {
        Kind::Deconv2d => shape[0] * shape[2] * shape[3],
        Kind::Deconv3d => shape[0] * shape[2] * shape[3] * shape[4],
        _ => shape[1..].iter().product(),
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelWeights<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Expected `(name, shape)` of every parameter.
    pub fn spec() -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * LAYERS.len());
        for (name, kind, shape) in LAYERS {
            out.push((format!("{name}.w"), shape.to_vec()));
            out.push((format!("{name}.b"), vec![bias_len(*kind, shape)]));
        }
        out
    }

    fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        let names: Vec<String> = Self::spec().into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// He-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(2 * LAYERS.len());
        for (_, kind, shape) in LAYERS {
            let bound = (6.0 / fan_in(*kind, shape) as f64).sqrt();
            let n = shape.iter().product();
            let w = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
            tensors.push(Tensor::new(shape, w).expect("layer table shape"));
            tensors.push(Tensor::zeros(&[bias_len(*kind, shape)]));
        }
        Self::from_tensors(tensors)
    }

    pub fn zeros() -> Self {
        Self::from_tensors(Self::spec().iter().map(|(_, s)| Tensor::zeros(s)).collect())
    }

    /// Builds weights from named tensors; every expected name must appear
    /// exactly once with the expected shape.
    pub fn from_named(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let spec = Self::spec();
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; spec.len()];
        let pos: HashMap<&str, usize> = spec.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
        for (name, t) in named {
            let &i = pos
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
            if t.shape() != spec[i].1.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    spec[i].1
                )));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
        }
        let tensors = slots
            .into_iter()
            .zip(&spec)
            .map(|(t, (n, _))| t.ok_or_else(|| Error::Checkpoint(format!("missing tensor '{n}'"))))
            .collect::<Result<_>>()?;
        Ok(Self::from_tensors(tensors))
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[self.index[name]]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor's values, keeping shapes.
    pub fn set_values(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::shape("set_values", "tensor count", self.tensors.len(), values.len()));
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            *t = Tensor::new(t.shape(), v)?;
        }
        Ok(())
    }

    /// Copy whose tensors are gradient leaves of `g`.
    pub fn track(&self, g: &Graph<T>) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| g.leaf(t)).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights::from_tensors(self.tensors.iter().map(Tensor::cast).collect())
    }

    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    fn conv2d(&self, g: &Graph<T>, layer: &str, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        g.conv2d(x, self.get(&format!("{layer}.w")), self.get(&format!("{layer}.b")), stride, 1)
    }

    fn deconv2d(&self, g: &Graph<T>, layer: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        g.conv2d_transposed(x, self.get(&format!("{layer}.w")), self.get(&format!("{layer}.b")), 2, 1)
    }

    fn conv3d(&self, g: &Graph<T>, layer: &str, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        g.conv3d(x, self.get(&format!("{layer}.w")), self.get(&format!("{layer}.b")), stride, 1)
    }

    fn deconv3d(&self, g: &Graph<T>, layer: &str, x: &Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
        let s = like.shape();
        let w = self.get(&format!("{layer}.w"));
        g.conv3d_transposed(x, w, self.get(&format!("{layer}.b")), 2, 1, [s[1], s[2], s[3]])
    }

    fn linear(&self, g: &Graph<T>, layer: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        g.linear(x, self.get(&format!("{layer}.w")), Some(self.get(&format!("{layer}.b"))))
    }
}

fn bias_len(kind: Kind, shape: &[usize]) -> usize {
    // Transposed convolutions store [c_in, c_out, ..].
    match kind {
        Kind::Deconv2d | Kind::Deconv3d => shape[1],
        _ => shape[0],
    }
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Scalar = f32> {
    /// `[32, H/4, W/4]`
    pub f1: Tensor<T>,
    /// `[16, H/2, W/2]`
    pub f2: Tensor<T>,
    /// `[8, H, W]`
    pub f3: Tensor<T>,
}

/// Runs the UNet on `image [3, H, W]`.
pub fn extract_features<T: Scalar>(g: &Graph<T>, w: &ModelWeights<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
    image.expect_rank("extract_features", 3)?;
    let s = image.shape();
    if s[0] != 3 {
        return Err(Error::shape("extract_features", "channels", 3, s[0]));
    }
    if s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::shape("extract_features", "H/W", "multiples of 4", format!("{}x{}", s[1], s[2])));
    }
    let e0 = g.relu(&w.conv2d(g, "unet.e0", image, 1)?);
    let e1 = g.relu(&w.conv2d(g, "unet.e1", &e0, 2)?);
    let e2 = g.relu(&w.conv2d(g, "unet.e2", &e1, 2)?);
    let f1 = w.conv2d(g, "unet.f1", &e2, 1)?;
    let d1 = g.add(&g.relu(&w.deconv2d(g, "unet.up1", &e2)?), &e1)?;
    let f2 = w.conv2d(g, "unet.f2", &d1, 1)?;
    let d2 = g.add(&g.relu(&w.deconv2d(g, "unet.up2", &d1)?), &e0)?;
    let f3 = w.conv2d(g, "unet.f3", &d2, 1)?;
    Ok(FeaturePyramid { f1, f2, f3 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

impl Level {
    pub fn channels(self) -> usize {
        match self {
            Level::Coarse => F1_CHANNELS,
            Level::Fine => F2_CHANNELS,
        }
    }
}

/// Two-scale 3D UNet over a cost volume `[C, D, h, w]`. Returns plane logits `[D, h, w]`
/// and, at the fine level, a `[16, D, h, w]` feature volume.
pub fn regularize_volume<T: Scalar>(
    g: &Graph<T>,
    w: &ModelWeights<T>,
    cost: &Tensor<T>,
    level: Level,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    cost.expect_rank("regularize_volume", 4)?;
    let s = cost.shape().to_vec();
    if s[0] != level.channels() {
        return Err(Error::shape("regularize_volume", "C", level.channels(), s[0]));
    }
    let p = match level {
        Level::Coarse => "reg3d_coarse",
        Level::Fine => "reg3d_fine",
    };
    let l = |n: &str| format!("{p}.{n}");
    let e0 = g.relu(&w.conv3d(g, &l("c0"), cost, 1)?);
    let e1 = g.relu(&w.conv3d(g, &l("d1"), &e0, 2)?);
    let e1 = g.relu(&w.conv3d(g, &l("c1"), &e1, 1)?);
    let e2 = g.relu(&w.conv3d(g, &l("d2"), &e1, 2)?);
    let e2 = g.relu(&w.conv3d(g, &l("c2"), &e2, 1)?);
    let u1 = g.add(&g.relu(&w.deconv3d(g, &l("u2"), &e2, &e1)?), &e1)?;
    let u0 = g.add(&g.relu(&w.deconv3d(g, &l("u1"), &u1, &e0)?), &e0)?;
    let logits = g.reshape(&w.conv3d(g, &l("prob"), &u0, 1)?, &s[1..])?;
    let feat = match level {
        Level::Coarse => None,
        Level::Fine => Some(w.conv3d(g, "reg3d_fine.feat", &u0, 1)?),
    };
    Ok((logits, feat))
}

/// Pools per-view pixel features `[m, 8]` into one `[m, 8]` feature per row.
/// Each view feature is concatenated with the masked mean and variance and
/// scored by the pooling MLP; scores are soft-maxed over valid views.
pub fn pool_features<T: Scalar>(
    g: &Graph<T>,
    w: &ModelWeights<T>,
    feats: &[&Tensor<T>],
    masks: &[&[bool]],
) -> Result<Tensor<T>> {
    if feats.is_empty() {
        return Err(Error::invalid("pool_features: no views"));
    }
    let c = feats[0].shape().get(1).copied().unwrap_or(0);
    if c != F3_CHANNELS {
        return Err(Error::shape("pool_features", "feature width", F3_CHANNELS, c));
    }
    let m = feats[0].shape()[0];
    let moments = g.masked_moments(feats, masks)?;
    let mut scores = Vec::with_capacity(feats.len());
    for f in feats {
        let x = g.concat_cols(&[f, &moments])?;
        let h = g.relu(&w.linear(g, "pool_mlp.l0", &x)?);
        scores.push(w.linear(g, "pool_mlp.l1", &h)?);
    }
    let refs: Vec<&Tensor<T>> = scores.iter().collect();
    let logits = g.concat_cols(&refs)?;
    let weights = g.masked_softmax_rows(&logits, &interleave_masks(masks, m))?;
    g.weighted_sum(&weights, feats)
}

/// Row-major `[m, n]` mask from `n` per-view masks of length `m`.
pub fn interleave_masks(masks: &[&[bool]], m: usize) -> Vec<bool> {
    let n = masks.len();
    let mut out = vec![false; m * n];
    for (i, mk) in masks.iter().enumerate() {
        for r in 0..m {
            out[r * n + i] = mk[r];
        }
    }
    out
}

/// Density MLP: `[f_img (8) | f_voxel (16)]` → point feature `[m, 64]` and
/// density `[m, 1]` (softplus).
pub fn density_mlp<T: Scalar>(
    g: &Graph<T>,
    w: &ModelWeights<T>,
    f_img: &Tensor<T>,
    f_voxel: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = g.concat_cols(&[f_img, f_voxel])?;
    if x.shape()[1] != F3_CHANNELS + VOXEL_CHANNELS {
        return Err(Error::shape("density_mlp", "input width", F3_CHANNELS + VOXEL_CHANNELS, x.shape()[1]));
    }
    let h = g.relu(&w.linear(g, "phi.l0", &x)?);
    let out = w.linear(g, "phi.l1", &h)?;
    let f_p = g.slice_cols(&out, 0, POINT_CHANNELS)?;
    let sigma = g.softplus(&g.slice_cols(&out, POINT_CHANNELS, POINT_CHANNELS + 1)?);
    Ok((f_p, sigma))
}

/// Per-view inputs to [`blend_color`], each with `m` rows.
pub struct ViewSamples<'a, T: Scalar> {
    /// `[m, 8]`
    pub feat: &'a Tensor<T>,
    /// `[m, 3]`
    pub color: &'a Tensor<T>,
    /// `[m, 4]`: norm and unit direction of the viewing-direction difference.
    pub delta: &'a Tensor<T>,
    pub valid: &'a [bool],
}

/// Raw blending logits `[m, n]` from the blending MLP.
pub fn blend_logits<T: Scalar>(g: &Graph<T>, w: &ModelWeights<T>, f_p: &Tensor<T>, views: &[ViewSamples<T>]) -> Result<Tensor<T>> {
    if views.is_empty() {
        return Err(Error::invalid("blend_color: no views"));
    }
    let mut logits = Vec::with_capacity(views.len());
    for v in views {
        let x = g.concat_cols(&[f_p, v.feat, v.delta])?;
        let h = g.relu(&w.linear(g, "varphi.l0", &x)?);
        let h = g.relu(&w.linear(g, "varphi.l1", &h)?);
        logits.push(w.linear(g, "varphi.l2", &h)?);
    }
    let refs: Vec<&Tensor<T>> = logits.iter().collect();
    g.concat_cols(&refs)
}

/// Soft-argmax blend of source colors over valid views; `[m, 3]`.
pub fn blend_from_logits<T: Scalar>(g: &Graph<T>, logits: &Tensor<T>, views: &[ViewSamples<T>]) -> Result<Tensor<T>> {
    let m = logits.shape()[0];
    let masks: Vec<&[bool]> = views.iter().map(|v| v.valid).collect();
    let weights = g.masked_softmax_rows(logits, &interleave_masks(&masks, m))?;
    let colors: Vec<&Tensor<T>> = views.iter().map(|v| v.color).collect();
    g.weighted_sum(&weights, &colors)
}

pub fn blend_color<T: Scalar>(g: &Graph<T>, w: &ModelWeights<T>, f_p: &Tensor<T>, views: &[ViewSamples<T>]) -> Result<Tensor<T>> {
    let logits = blend_logits(g, w, f_p, views)?;
    blend_from_logits(g, &logits, views)
}
