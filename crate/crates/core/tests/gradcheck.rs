//! Brute-force and adjoint oracles for the convolutions and homography, plus
//! one finite-difference test per differentiable op.

#[path = "support/grad_suite.rs"]
#[allow(dead_code)]
mod grad_suite;

use enerf_core::geometry::{self, Mat3, Vec3};
use enerf_core::tensor::gradcheck::random_tensor;
use enerf_core::tensor::{Graph, Tensor};
use grad_suite::{ring_camera, rng, SEEDS};
use rand::Rng;

macro_rules! grad_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                grad_suite::$name();
            }
        )*
    };
}

grad_tests!(
    grad_conv2d,
    grad_conv2d_transposed,
    grad_conv3d,
    grad_conv3d_strided,
    grad_conv3d_transposed,
    grad_grid_sample_2d,
    grad_grid_sample_3d,
    grad_softmax,
    grad_elementwise,
    grad_shape_ops,
    grad_linear,
    grad_upsample_bilinear,
    grad_plane_warp_coords,
    grad_project_points,
    grad_direction_delta,
    grad_micro_pipeline,
    grad_masked_moments,
    grad_masked_softmax_rows,
    grad_weighted_sum_and_scale_rows,
);

fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xo * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((o * ci + c) * kh + i) * kw + j]
                                * x.data()[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let s = x.shape();
    let (ci, d, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (od, oh, ow) = (d + 2 * pad - k + 1, h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = vec![0.0; co * od * oh * ow];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for a in 0..k {
                            for i in 0..k {
                                for j in 0..k {
                                    let iz = (z + a) as isize - pad as isize;
                                    let iy = (y + i) as isize - pad as isize;
                                    let ix = (xo + j) as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[(((o * ci + c) * k + a) * k + i) * k + j]
                                        * x.data()[((c * d + iz as usize) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[((o * od + z) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_matches_loop_oracle() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = random_tensor(&[2, 5, 5], -1.0, 1.0, &mut r);
        let w = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = random_tensor(&[3], -1.0, 1.0, &mut r);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let g = Graph::new();
            let y = g.conv2d(&x, &w, &b, stride, pad).unwrap();
            assert!(max_abs_diff(y.data(), &naive_conv2d(&x, &w, &b, stride, pad)) < 1e-6);
        }
    }
}

#[test]
fn conv3d_matches_loop_oracle() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = random_tensor(&[2, 4, 5, 3], -1.0, 1.0, &mut r);
        let w = random_tensor(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = random_tensor(&[3], -1.0, 1.0, &mut r);
        for pad in [0, 1] {
            let g = Graph::new();
            let y = g.conv3d(&x, &w, &b, 1, pad).unwrap();
            assert!(max_abs_diff(y.data(), &naive_conv3d(&x, &w, &b, pad)) < 1e-6);
        }
    }
}

#[test]
fn conv2d_transposed_is_adjoint() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = random_tensor(&[3, 8, 6], -1.0, 1.0, &mut r);
        let w = random_tensor(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
        let y = random_tensor(&[4, 4, 3], -1.0, 1.0, &mut r);
        let g = Graph::new();
        let conv = g.conv2d(&x, &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
        let tconv = g.conv2d_transposed(&y, &w, &Tensor::zeros(&[3]), 2, 1).unwrap();
        assert_eq!(tconv.shape(), x.shape());
        let (lhs, rhs) = (dot(conv.data(), y.data()), dot(x.data(), tconv.data()));
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-6, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv2d_transposed_hand_expanded() {
    let g = Graph::<f64>::new();
    let y = g
        .conv2d_transposed(
            &Tensor::full(&[1, 1, 1], 1.0),
            &Tensor::full(&[1, 1, 2, 2], 1.0),
            &Tensor::zeros(&[1]),
            2,
            0,
        )
        .unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[1.0; 4]);
}

#[test]
fn conv3d_transposed_is_adjoint() {
    for seed in SEEDS {
        for size in [[4, 6, 5], [5, 3, 8]] {
            let mut r = rng(seed);
            let x = random_tensor(&[3, size[0], size[1], size[2]], -1.0, 1.0, &mut r);
            let w = random_tensor(&[4, 3, 3, 3, 3], -1.0, 1.0, &mut r);
            let g = Graph::new();
            let conv = g.conv3d(&x, &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
            let s = conv.shape().to_vec();
            let y = random_tensor(&s, -1.0, 1.0, &mut r);
            let tconv = g.conv3d_transposed(&y, &w, &Tensor::zeros(&[3]), 2, 1, size).unwrap();
            assert_eq!(tconv.shape(), x.shape());
            let (lhs, rhs) = (dot(conv.data(), y.data()), dot(x.data(), tconv.data()));
            assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-6, "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn conv3d_transposed_rejects_unreachable_size() {
    let g = Graph::<f64>::new();
    let y = Tensor::zeros(&[1, 2, 2, 2]);
    let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
    assert!(g.conv3d_transposed(&y, &w, &Tensor::zeros(&[1]), 2, 1, [4, 3, 4]).is_ok());
    assert!(g.conv3d_transposed(&y, &w, &Tensor::zeros(&[1]), 2, 1, [4, 5, 4]).is_err());
    assert!(g.conv3d_transposed(&y, &w, &Tensor::zeros(&[2]), 2, 1, [4, 4, 4]).is_err());
}

#[test]
fn homography_round_trip_random_pairs() {
    let mut r = rng(42);
    for _ in 0..100 {
        let a = ring_camera(r.gen_range(0.0..6.28), &mut r);
        let b = ring_camera(r.gen_range(0.0..6.28), &mut r);
        let z = r.gen_range(2.0..6.0);
        let (u, v) = (r.gen_range(0.0..15.0), r.gen_range(0.0..15.0));
        let p = a.unproject(u, v, z);
        let proj = b.project(&p);
        if proj.behind_camera() {
            continue;
        }
        let hm: Mat3 = geometry::homography(z, &b, &a).unwrap();
        let q = hm * Vec3::new(u, v, 1.0);
        assert!((q.x / q.z - proj.u).abs() < 1e-9 && (q.y / q.z - proj.v).abs() < 1e-9);
        let back = a.project(&b.unproject(proj.u, proj.v, proj.depth));
        assert!((back.u - u).abs() < 1e-9 && (back.v - v).abs() < 1e-9);
    }
}
