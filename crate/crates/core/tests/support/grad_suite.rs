//! Finite-difference gradient checks for every differentiable tensor op.
//! Each check panics on failure.

use enerf_core::geometry::{self, Camera, Vec3};
use enerf_core::tensor::gradcheck::{check_gradients, random_tensor};
use enerf_core::tensor::{Graph, Tensor};
use enerf_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn assert_grads<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, f: F)
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let report = check_gradients(inputs, H, seed, f).unwrap();
    assert!(
        report.worst() < TOL,
        "{name} seed {seed}: max rel err {:?} (abs {:?})",
        report.max_rel_err,
        report.max_abs_err
    );
}

pub fn grad_conv2d() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[2, 5, 5], -1.0, 1.0, &mut r),
            random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut r),
            random_tensor(&[3], -1.0, 1.0, &mut r),
        ];
        for (stride, pad) in [(1, 1), (2, 1)] {
            assert_grads("conv2d", &xs, seed, |g, x| g.conv2d(&x[0], &x[1], &x[2], stride, pad));
        }
    }
}

pub fn grad_conv2d_transposed() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[2, 3, 4], -1.0, 1.0, &mut r),
            random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut r),
            random_tensor(&[3], -1.0, 1.0, &mut r),
        ];
        assert_grads("conv2d_transposed", &xs, seed, |g, x| g.conv2d_transposed(&x[0], &x[1], &x[2], 2, 1));
    }
}

pub fn grad_conv3d() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[2, 3, 4, 3], -1.0, 1.0, &mut r),
            random_tensor(&[2, 2, 3, 3, 3], -1.0, 1.0, &mut r),
            random_tensor(&[2], -1.0, 1.0, &mut r),
        ];
        assert_grads("conv3d", &xs, seed, |g, x| g.conv3d(&x[0], &x[1], &x[2], 1, 1));
    }
}

pub fn grad_conv3d_strided() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[2, 4, 5, 3], -1.0, 1.0, &mut r),
            random_tensor(&[2, 2, 3, 3, 3], -1.0, 1.0, &mut r),
            random_tensor(&[2], -1.0, 1.0, &mut r),
        ];
        assert_grads("conv3d stride 2", &xs, seed, |g, x| g.conv3d(&x[0], &x[1], &x[2], 2, 1));
    }
}

pub fn grad_conv3d_transposed() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[2, 2, 3, 2], -1.0, 1.0, &mut r),
            random_tensor(&[2, 3, 3, 3, 3], -1.0, 1.0, &mut r),
            random_tensor(&[3], -1.0, 1.0, &mut r),
        ];
        assert_grads("conv3d_transposed", &xs, seed, |g, x| {
            g.conv3d_transposed(&x[0], &x[1], &x[2], 2, 1, [4, 5, 3])
        });
    }
}

/// Continuous coordinates whose fractional part stays away from cell edges.
fn interior_coords(m: usize, extents: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let k = extents.len();
    let mut v = Vec::with_capacity(m * k);
    for _ in 0..m {
        for &n in extents {
            let cell = rng.gen_range(0..n - 1) as f64;
            v.push(cell + rng.gen_range(0.1..0.9));
        }
    }
    Tensor::new(&[m, k], v).unwrap()
}

pub fn grad_grid_sample_2d() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [random_tensor(&[3, 4, 5], -1.0, 1.0, &mut r), interior_coords(7, &[5, 4], &mut r)];
        assert_grads("grid_sample_2d", &xs, seed, |g, x| Ok(g.grid_sample_2d(&x[0], &x[1])?.0));
    }
}

pub fn grad_grid_sample_3d() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [random_tensor(&[2, 3, 4, 5], -1.0, 1.0, &mut r), interior_coords(6, &[5, 4, 3], &mut r)];
        assert_grads("grid_sample_3d", &xs, seed, |g, x| Ok(g.grid_sample_3d(&x[0], &x[1])?.0));
    }
}

pub fn grad_softmax() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [random_tensor(&[3, 4, 2], -3.0, 3.0, &mut r)];
        for axis in 0..3 {
            assert_grads("softmax_axis", &xs, seed, |g, x| g.softmax_axis(&x[0], axis));
        }
    }
}

pub fn grad_elementwise() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let a = off_zero(&[2, 3], &mut r);
        let b = off_zero(&[2, 3], &mut r);
        let pos = random_tensor(&[2, 3], 0.2, 2.0, &mut r);
        let ab = [a.clone(), b.clone()];
        assert_grads("add", &ab, seed, |g, x| g.add(&x[0], &x[1]));
        assert_grads("sub", &ab, seed, |g, x| g.sub(&x[0], &x[1]));
        assert_grads("mul", &ab, seed, |g, x| g.mul(&x[0], &x[1]));
        assert_grads("div", &[a.clone(), pos.clone()], seed, |g, x| g.div(&x[0], &x[1]));
        let one = [a.clone()];
        assert_grads("add_scalar", &one, seed, |g, x| Ok(g.add_scalar(&x[0], 0.7)));
        assert_grads("mul_scalar", &one, seed, |g, x| Ok(g.mul_scalar(&x[0], -1.3)));
        assert_grads("relu", &one, seed, |g, x| Ok(g.relu(&x[0])));
        assert_grads("softplus", &one, seed, |g, x| Ok(g.softplus(&x[0])));
        assert_grads("exp", &one, seed, |g, x| Ok(g.exp(&x[0])));
        assert_grads("square", &one, seed, |g, x| Ok(g.square(&x[0])));
        assert_grads("sqrt", &[pos.clone()], seed, |g, x| Ok(g.sqrt(&x[0])));
        assert_grads("clamp_min", &one, seed, |g, x| Ok(g.clamp_min(&x[0], 0.05)));
        assert_grads("clamp_max", &one, seed, |g, x| Ok(g.clamp_max(&x[0], 0.05)));
        assert_grads("sum", &one, seed, |g, x| Ok(g.sum(&x[0])));
        assert_grads("mean", &one, seed, |g, x| Ok(g.mean(&x[0])));
    }
}

pub fn grad_shape_ops() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let a = random_tensor(&[4, 3], -1.0, 1.0, &mut r);
        let b = random_tensor(&[4, 2], -1.0, 1.0, &mut r);
        let c = random_tensor(&[2, 3], -1.0, 1.0, &mut r);
        let one = [a.clone()];
        assert_grads("reshape", &one, seed, |g, x| g.reshape(&x[0], &[2, 6]));
        assert_grads("sum_axis0", &one, seed, |g, x| g.sum_axis0(&x[0]));
        assert_grads("broadcast_axis0", &one, seed, |g, x| Ok(g.broadcast_axis0(&x[0], 3)));
        assert_grads("transpose", &one, seed, |g, x| g.transpose(&x[0]));
        assert_grads("slice_cols", &one, seed, |g, x| g.slice_cols(&x[0], 1, 3));
        assert_grads("slice0", &one, seed, |g, x| g.slice0(&x[0], 1, 3));
        assert_grads("gather_rows", &one, seed, |g, x| g.gather_rows(&x[0], &[3, 0, 3, 1]));
        assert_grads("concat_cols", &[a.clone(), b.clone()], seed, |g, x| g.concat_cols(&[&x[0], &x[1]]));
        assert_grads("concat0", &[a.clone(), c.clone()], seed, |g, x| g.concat0(&[&x[0], &x[1]]));
    }
}

pub fn grad_linear() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[5, 4], -1.0, 1.0, &mut r),
            random_tensor(&[3, 4], -1.0, 1.0, &mut r),
            random_tensor(&[3], -1.0, 1.0, &mut r),
        ];
        assert_grads("linear", &xs, seed, |g, x| g.linear(&x[0], &x[1], Some(&x[2])));
        assert_grads("linear (no bias)", &xs[..2], seed, |g, x| g.linear(&x[0], &x[1], None));
    }
}

pub fn grad_upsample_bilinear() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [random_tensor(&[2, 3, 4], -1.0, 1.0, &mut r)];
        assert_grads("upsample_bilinear", &xs, seed, |g, x| g.upsample_bilinear(&x[0], 2));
    }
}

pub fn ring_camera(angle: f64, rng: &mut ChaCha8Rng) -> Camera {
    let eye = Vec3::new(4.0 * angle.cos(), 4.0 * angle.sin(), rng.gen_range(0.5..1.5));
    let target = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
    Camera::look_at(
        eye,
        target,
        Vec3::z(),
        Camera::intrinsics(20.0, 20.0, 7.5, 7.5),
        16,
        16,
        1.0,
        8.0,
    )
    .unwrap()
}

pub fn grad_plane_warp_coords() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let tgt = ring_camera(0.0, &mut r);
        let src = ring_camera(0.4, &mut r);
        let xs = [random_tensor(&[2, 3, 3], 3.0, 5.0, &mut r)];
        assert_grads("plane_warp_coords", &xs, seed, |g, x| {
            Ok(geometry::plane_warp_coords(g, &x[0], &src, &tgt, 0.25)?.0)
        });
    }
}

pub fn grad_project_points() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let cam = ring_camera(1.0, &mut r);
        let xs = [random_tensor(&[5, 3], -0.5, 0.5, &mut r)];
        assert_grads("project_points", &xs, seed, |g, x| Ok(geometry::project_points(g, &cam, &x[0])?.0));
    }
}

pub fn grad_direction_delta() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let (a, b) = (ring_camera(0.0, &mut r), ring_camera(0.7, &mut r));
        let xs = [random_tensor(&[5, 3], -0.5, 0.5, &mut r)];
        assert_grads("direction_delta", &xs, seed, |g, x| {
            geometry::direction_delta(g, &x[0], &a.center(), &b.center())
        });
    }
}

/// Warp source features onto target planes, weight them by a softmax over
/// plane logits, and compare against a target with a squared-error loss.
pub fn grad_micro_pipeline() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let tgt = ring_camera(0.0, &mut r);
        let src = ring_camera(0.3, &mut r);
        let (d, gh, gw, c) = (3, 3, 3, 2);
        let planes: Vec<f64> = (0..d).map(|k| 3.6 + 0.3 * k as f64).collect();
        let xs = [
            random_tensor(&[c, 16, 16], -1.0, 1.0, &mut r),
            random_tensor(&[d, gh * gw], -2.0, 2.0, &mut r),
        ];
        let target = random_tensor(&[gh * gw, c], -1.0, 1.0, &mut r);
        let report = check_gradients(&xs, H, seed, |g, x| {
            let (warped, _) = geometry::warp_feature_planes(g, &x[0], &src, &tgt, &planes, (gh, gw), 1.0)?;
            let warped = g.reshape(&warped, &[d, gh * gw * c])?;
            let prob = g.softmax_axis(&x[1], 0)?;
            let prob = g.reshape(&prob, &[d, gh * gw, 1])?;
            let mut acc: Option<Tensor<f64>> = None;
            for k in 0..d {
                let pk = g.reshape(&g.slice0(&prob, k, k + 1)?, &[gh * gw, 1])?;
                let wk = g.reshape(&g.slice0(&warped, k, k + 1)?, &[gh * gw, c])?;
                let pk = g.concat_cols(&vec![&pk; c])?;
                let term = g.mul(&pk, &wk)?;
                acc = Some(match acc {
                    Some(a) => g.add(&a, &term)?,
                    None => term,
                });
            }
            let diff = g.sub(&acc.unwrap(), &target)?;
            Ok(g.mean(&g.square(&diff)))
        })
        .unwrap();
        assert!(report.worst() < TOL, "micro pipeline seed {seed}: {:?}", report.max_rel_err);
    }
}

fn random_mask(len: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..len).map(|_| rng.gen_bool(0.75)).collect()
}

pub fn grad_masked_moments() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[6, 4], -1.0, 1.0, &mut r)).collect();
        let masks: Vec<Vec<bool>> = (0..3).map(|_| random_mask(6, &mut r)).collect();
        assert_grads("masked_moments", &xs, seed, |g, x| {
            let refs: Vec<&Tensor<f64>> = x.iter().collect();
            let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
            g.masked_moments(&refs, &mrefs)
        });
    }
}

pub fn grad_masked_softmax_rows() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [random_tensor(&[5, 3], -2.0, 2.0, &mut r)];
        let mask = random_mask(15, &mut r);
        assert_grads("masked_softmax_rows", &xs, seed, |g, x| g.masked_softmax_rows(&x[0], &mask));
    }
}

pub fn grad_weighted_sum_and_scale_rows() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = [
            random_tensor(&[4, 2], -1.0, 1.0, &mut r),
            random_tensor(&[4, 3], -1.0, 1.0, &mut r),
            random_tensor(&[4, 3], -1.0, 1.0, &mut r),
        ];
        assert_grads("weighted_sum", &xs, seed, |g, x| g.weighted_sum(&x[0], &[&x[1], &x[2]]));
        let s: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        assert_grads("scale_rows", &xs[1..2], seed, |g, x| g.scale_rows(&x[0], &s));
    }
}

pub const SUITE: &[(&str, fn())] = &[
    ("conv2d", grad_conv2d),
    ("conv2d_transposed", grad_conv2d_transposed),
    ("conv3d", grad_conv3d),
    ("conv3d_strided", grad_conv3d_strided),
    ("conv3d_transposed", grad_conv3d_transposed),
    ("grid_sample_2d", grad_grid_sample_2d),
    ("grid_sample_3d", grad_grid_sample_3d),
    ("softmax", grad_softmax),
    ("elementwise", grad_elementwise),
    ("shape_ops", grad_shape_ops),
    ("linear", grad_linear),
    ("upsample_bilinear", grad_upsample_bilinear),
    ("plane_warp_coords", grad_plane_warp_coords),
    ("project_points", grad_project_points),
    ("direction_delta", grad_direction_delta),
    ("micro_pipeline", grad_micro_pipeline),
    ("masked_moments", grad_masked_moments),
    ("masked_softmax_rows", grad_masked_softmax_rows),
    ("weighted_sum_and_scale_rows", grad_weighted_sum_and_scale_rows),
];
