//! Per-scene optimization of all networks from RGB supervision.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::costvolume::{cascade_predict, select_sources, CascadeConfig, SourceView};
use crate::dataset::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::networks::{ModelWeights, GROUPS};
use crate::renderer::{render_rays, GuideMaps};
use crate::tensor::{adam_step, AdamState, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub rays_per_batch: usize,
    pub lr: f64,
    /// Defaults to `iters / 4` when zero.
    pub halve_every: usize,
    pub seed: u64,
    pub views_per_target: usize,
    pub n_samples: usize,
    pub planes_coarse: usize,
    pub planes_fine: usize,
    /// Uniformly jitter samples inside their sub-interval.
    pub jitter: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 5000,
            rays_per_batch: 512,
            lr: 5e-4,
            halve_every: 0,
            seed: 0,
            views_per_target: 3,
            n_samples: 2,
            planes_coarse: 64,
            planes_fine: 8,
            jitter: false,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iters", self.iters),
            ("rays_per_batch", self.rays_per_batch),
            ("views_per_target", self.views_per_target),
            ("n_samples", self.n_samples),
            ("planes_coarse", self.planes_coarse),
            ("planes_fine", self.planes_fine),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("train config: {name} must be positive")));
        }
        if self.planes_coarse < 2 || self.planes_fine < 2 {
            return Err(Error::invalid("train config: need at least 2 planes per level"));
        }
        if self.views_per_target < 2 {
            return Err(Error::invalid("train config: need at least 2 source views"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train config: lr must be positive"));
        }
        Ok(())
    }

    pub fn halving_period(&self) -> usize {
        if self.halve_every > 0 {
            self.halve_every
        } else {
            (self.iters / 4).max(1)
        }
    }

    /// Learning rate in effect at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr * 0.5f64.powi((iter / self.halving_period()) as i32)
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            planes_coarse: self.planes_coarse,
            planes_fine: self.planes_fine,
            ..CascadeConfig::default()
        }
    }
}

/// `(1/n) Σ ‖pred_i − gt_i‖²` over rows of `[n, 3]`.
pub fn mse_loss(g: &Graph, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "mse_loss",
            "prediction/target",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = pred.shape().first().copied().unwrap_or(1);
    let sq = g.sum(&g.square(&g.sub(pred, gt)?));
    Ok(g.mul_scalar(&sq, 1.0 / n as f32))
}

pub struct TrainState {
    pub weights: ModelWeights,
    pub adam: Vec<AdamState<f32>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(weights: ModelWeights, seed: u64) -> Self {
        let adam = weights.tensors().iter().map(|t| AdamState::new(t.numel())).collect();
        Self {
            weights,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f32,
    /// L2 gradient norm per weight group, in [`GROUPS`] order.
    pub grad_norms: [f64; 6],
    pub target: usize,
}

/// One optimizer step on a random training view.
pub fn train_step(ds: &SceneDataset, state: &mut TrainState, cfg: &TrainConfig, lr: f64) -> Result<StepReport> {
    let train = ds.ids(Split::Train);
    if train.len() < cfg.views_per_target + 1 {
        return Err(Error::invalid(format!(
            "training needs at least {} training views, dataset has {}",
            cfg.views_per_target + 1,
            train.len()
        )));
    }
    let target = *train.choose(&mut state.rng).expect("nonempty split");
    let view = ds.view(target)?;
    let tgt = &view.camera;
    let others: Vec<usize> = train.iter().copied().filter(|&i| i != target).collect();
    let src_ids = select_sources(ds, tgt, &others, cfg.views_per_target)?;
    let npix = tgt.width * tgt.height;
    let pixels: Vec<usize> = (0..cfg.rays_per_batch).map(|_| state.rng.gen_range(0..npix)).collect();
    let offsets: Option<Vec<f64>> = cfg
        .jitter
        .then(|| (0..pixels.len() * cfg.n_samples).map(|_| state.rng.gen::<f64>()).collect());

    let g = Graph::new();
    let w = state.weights.track(&g);
    let sources = src_ids
        .iter()
        .map(|&id| SourceView::new(&g, &w, ds, id))
        .collect::<Result<Vec<_>>>()?;
    let cascade = cascade_predict(&g, &w, &sources, tgt, &cfg.cascade())?;
    let maps = GuideMaps::from_cascade(&g, &cascade)?;
    let out = render_rays(&g, &w, &sources, tgt, &cascade, &maps, &pixels, cfg.n_samples, offsets.as_deref(), [0.0; 3])?;
    let gt: Vec<f32> = pixels.iter().flat_map(|&p| view.image.data[3 * p..3 * p + 3].to_vec()).collect();
    let gt = Tensor::new(&[pixels.len(), 3], gt)?;
    let loss = mse_loss(&g, &out.rgb, &gt)?;
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(Error::invalid(format!("non-finite loss at step {}", state.step + 1)));
    }
    let grads = g.backward(&loss)?;

    let mut sq = [0.0f64; 6];
    let mut updates = Vec::with_capacity(w.tensors().len());
    for (name, leaf) in w.iter() {
        let gv = grads.get(leaf).expect("every weight is a leaf").to_vec();
        let gi = GROUPS
            .iter()
            .position(|&gname| gname == ModelWeights::<f32>::group_of(name))
            .expect("known group");
        sq[gi] += gv.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        updates.push(gv);
    }
    state.step += 1;
    let mut values = Vec::with_capacity(updates.len());
    for ((t, gv), st) in state.weights.tensors().iter().zip(&updates).zip(&mut state.adam) {
        let mut p = t.to_vec();
        adam_step(&mut p, gv, st, lr as f32, 0.9, 0.999, 1e-8, state.step)?;
        values.push(p);
    }
    state.weights.set_values(values)?;
    Ok(StepReport {
        loss: loss_value,
        grad_norms: sq.map(f64::sqrt),
        target,
    })
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub losses: Vec<f32>,
    pub weights: ModelWeights,
}

/// Runs `cfg.iters` steps, writing `model.enrf` (every `checkpoint_every`
/// iterations and at the end) and `metrics.csv` into `out_dir`. Starts from
/// `init` when given, otherwise from a fresh initialization.
pub fn train(
    ds: &SceneDataset,
    cfg: &TrainConfig,
    init: Option<ModelWeights>,
    out_dir: &Path,
    mut on_step: impl FnMut(usize, &StepReport),
) -> Result<TrainResult> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let weights = init.unwrap_or_else(|| ModelWeights::init(cfg.seed));
    let mut state = TrainState::new(weights, cfg.seed);
    let ckpt = out_dir.join("model.enrf");
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "iter,loss,lr").map_err(|e| Error::io(&metrics_path, e))?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let lr = cfg.lr_at(iter);
        let report = train_step(ds, &mut state, cfg, lr)?;
        writeln!(metrics, "{},{},{}", iter + 1, report.loss, lr).map_err(|e| Error::io(&metrics_path, e))?;
        losses.push(report.loss);
        on_step(iter + 1, &report);
        if (iter + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save(&state.weights, &ckpt)?;
        }
    }
    checkpoint::save(&state.weights, &ckpt)?;
    Ok(TrainResult {
        checkpoint: ckpt,
        metrics: metrics_path,
        losses,
        weights: state.weights,
    })
}
