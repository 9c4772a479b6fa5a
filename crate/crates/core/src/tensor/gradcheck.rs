//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error per input, in input order.
    pub max_rel_err: Vec<f64>,
    /// Worst absolute error per input.
    pub max_abs_err: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is zero are judged by absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares the backward pass of `f` against central differences with step
/// `h`. The scalar probed is `sum(f(inputs) ⊙ r)` for a fixed random `r`
/// drawn from `seed`, so every output element contributes.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let probe = |xs: &[Tensor<f64>], g: &Graph<f64>, r: &Option<Tensor<f64>>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let out = f(g, xs)?;
        let r = match r {
            Some(r) => r.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                let v = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::new(out.shape(), v)?
            }
        };
        let loss = g.sum(&g.mul(&out, &r)?);
        Ok((loss, r))
    };

    let g = Graph::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|x| g.leaf(x)).collect();
    let (loss, r) = probe(&leaves, &g, &None)?;
    let grads = g.backward(&loss)?;
    let r = Some(r);

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        Ok(probe(xs, &g, &r)?.0.item())
    };

    let mut report = GradCheck {
        max_rel_err: Vec::new(),
        max_abs_err: Vec::new(),
    };
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).expect("leaf gradient").to_vec();
        let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
        for i in 0..inputs[k].numel() {
            let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
            let mut v = inputs[k].to_vec();
            v[i] += h;
            shifted[k] = Tensor::new(inputs[k].shape(), v.clone())?;
            let fp = eval(&shifted)?;
            v[i] -= 2.0 * h;
            shifted[k] = Tensor::new(inputs[k].shape(), v)?;
            let fm = eval(&shifted)?;
            let numeric = (fp - fm) / (2.0 * h);
            worst_rel = worst_rel.max(rel_err(analytic[i], numeric));
            worst_abs = worst_abs.max((analytic[i] - numeric).abs());
        }
        report.max_rel_err.push(worst_rel);
        report.max_abs_err.push(worst_abs);
    }
    Ok(report)
}

/// Tensor of uniform values in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, v).expect("valid random tensor shape")
}
