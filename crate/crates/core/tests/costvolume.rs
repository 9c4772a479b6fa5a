use enerf_core::costvolume::{
    build_cost_volume, cascade_predict, depth_distribution, planes_in_range, range_floor, upsample_range, CascadeConfig,
    SourceView,
};
use enerf_core::dataset::Split;
use enerf_core::geometry::{Camera, Vec3};
use enerf_core::networks::{FeaturePyramid, Level, ModelWeights};
use enerf_core::scenegen::{generate_scene, SceneSpec};
use enerf_core::tensor::gradcheck::random_tensor;
use enerf_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ring(az: f64) -> Camera {
    Camera::look_at(
        Vec3::new(4.5 * az.cos(), 4.5 * az.sin(), 2.5),
        Vec3::new(0.0, 0.0, 0.3),
        Vec3::z(),
        Camera::intrinsics(60.0, 60.0, 31.5, 31.5),
        64,
        64,
        2.0,
        8.0,
    )
    .unwrap()
}

/// A source view whose fine features sample `tex` on the plane at target
/// depth `z_star`, as seen from `cam`.
fn plane_view(cam: Camera, tgt: &Camera, z_star: f64, tex: impl Fn(f64, f64) -> [f64; 2]) -> SourceView<f64> {
    let (gh, gw) = (32, 32);
    let axis = tgt.principal_axis();
    let mut f2 = vec![0.0; 2 * gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let ray = cam.ray_for_pixel(x as f64 * 2.0, y as f64 * 2.0);
            let s = (z_star - axis.dot(&(ray.origin - tgt.center()))) / axis.dot(&ray.dir);
            let p = tgt.project(&ray.at(s));
            let t = tex(p.u, p.v);
            f2[y * gw + x] = t[0];
            f2[gh * gw + y * gw + x] = t[1];
        }
    }
    SourceView {
        id: 0,
        camera: cam,
        image: Tensor::zeros(&[3, 64, 64]),
        pyramid: FeaturePyramid {
            f1: Tensor::zeros(&[2, 16, 16]),
            f2: Tensor::new(&[2, gh, gw], f2).unwrap(),
            f3: Tensor::zeros(&[2, 64, 64]),
        },
    }
}

#[test]
fn needs_two_sources() {
    let g = Graph::<f64>::new();
    let tgt = ring(0.0);
    let v = plane_view(ring(0.3), &tgt, 4.0, |_, _| [0.0, 0.0]);
    let planes = Tensor::full(&[2, 32, 32], 4.0);
    assert!(build_cost_volume(&g, &[v], &tgt, &planes, Level::Fine).is_err());
}

#[test]
fn identical_views_have_zero_variance() {
    let g = Graph::<f64>::new();
    let tgt = ring(0.0);
    let v = plane_view(ring(0.3), &tgt, 4.0, |u, v| [u.sin(), (0.3 * v).cos()]);
    let planes = Tensor::full(&[3, 32, 32], 4.5);
    let vol = build_cost_volume(&g, &[v.clone(), v.clone(), v], &tgt, &planes, Level::Fine).unwrap();
    assert_eq!(vol.cost.shape(), &[2, 3, 32, 32]);
    assert!(vol.cost.data().iter().all(|&c| c.abs() < 1e-12));
}

/// Sources looking at a textured plane agree best on the plane's depth.
#[test]
fn variance_is_minimal_on_the_true_plane() {
    let tgt = ring(0.0);
    let z_star = 4.4;
    let tex = |u: f64, v: f64| [(0.35 * u).sin() + (0.21 * v).cos(), (0.17 * u + 0.29 * v).sin()];
    let views: Vec<_> = [-0.25, 0.2, 0.35]
        .into_iter()
        .map(|a| plane_view(ring(a), &tgt, z_star, tex))
        .collect();
    let zs: Vec<f64> = (0..9).map(|k| z_star + 0.15 * (k as f64 - 4.0)).collect();
    let mut pv = Vec::new();
    for &z in &zs {
        pv.extend(std::iter::repeat_n(z, 32 * 32));
    }
    let g = Graph::<f64>::new();
    let planes = Tensor::new(&[9, 32, 32], pv).unwrap();
    let vol = build_cost_volume(&g, &views, &tgt, &planes, Level::Fine).unwrap();
    let cost = vol.cost.data();
    let (mut hits, mut total) = (0, 0);
    for cell in 0..32 * 32 {
        if (0..9).any(|k| vol.valid_count[k * 1024 + cell] < 3) {
            continue;
        }
        let score = |k: usize| cost[k * 1024 + cell] + cost[9 * 1024 + k * 1024 + cell];
        let best = (0..9).min_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        total += 1;
        hits += usize::from(best == 4);
    }
    assert!(total > 300, "too few fully covered cells: {total}");
    assert!(hits as f64 > 0.95 * total as f64, "{hits}/{total}");
}

#[test]
fn hand_distribution() {
    let g = Graph::<f64>::new();
    let planes = Tensor::new(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
    let logits = Tensor::zeros(&[2, 1, 1]);
    let d = depth_distribution(&g, &logits, &planes, 1.0, 0.5, 10.0).unwrap();
    assert!((d.mean.data()[0] - 2.0).abs() < 1e-12);
    assert!((d.std.data()[0] - 1.0).abs() < 1e-12);
    assert!((d.lo.data()[0] - 1.0).abs() < 1e-12);
    assert!((d.hi.data()[0] - 3.0).abs() < 1e-12);
}

#[test]
fn range_is_clamped_to_near_far() {
    let g = Graph::<f64>::new();
    let planes = Tensor::new(&[2, 1, 1], vec![2.0, 8.0]).unwrap();
    let d = depth_distribution(&g, &Tensor::zeros(&[2, 1, 1]), &planes, 1.0, 2.0, 8.0).unwrap();
    assert_eq!((d.lo.data()[0], d.hi.data()[0]), (2.0, 8.0));
}

#[test]
fn distribution_matches_per_pixel_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, h, w) = (6, 3, 4);
    let logits = random_tensor(&[d, h, w], -3.0, 3.0, &mut rng);
    let base = random_tensor(&[d, h, w], 0.0, 1.0, &mut rng);
    // Increasing planes per pixel in [2, 8].
    let mut pv = vec![0.0; d * h * w];
    for p in 0..h * w {
        let mut z = 2.0;
        for k in 0..d {
            z += 0.2 + base.data()[k * h * w + p] * 0.7;
            pv[k * h * w + p] = z.min(8.0);
        }
    }
    let planes = Tensor::new(&[d, h, w], pv.clone()).unwrap();
    let (lambda, near, far) = (1.3, 2.0, 8.0);
    let g = Graph::<f64>::new();
    let out = depth_distribution(&g, &logits, &planes, lambda, near, far).unwrap();
    for p in 0..h * w {
        let l: Vec<f64> = (0..d).map(|k| logits.data()[k * h * w + p]).collect();
        let z: Vec<f64> = (0..d).map(|k| pv[k * h * w + p]).collect();
        let mx = l.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let prob: Vec<f64> = e.iter().map(|x| x / s).collect();
        let mean: f64 = prob.iter().zip(&z).map(|(p, z)| p * z).sum();
        let std = prob.iter().zip(&z).map(|(p, z)| p * (z - mean).powi(2)).sum::<f64>().sqrt();
        let hw = (lambda * std).max(range_floor(near, far));
        assert!((out.mean.data()[p] - mean).abs() < 1e-6);
        assert!((out.std.data()[p] - std).abs() < 1e-6);
        assert!((out.lo.data()[p] - (mean - hw).max(near)).abs() < 1e-6);
        assert!((out.hi.data()[p] - (mean + hw).min(far)).abs() < 1e-6);
    }
}

#[test]
fn loss_on_depth_reaches_both_regularizers() {
    let ds = generate_scene(&SceneSpec::micro(0)).unwrap();
    let ids = ds.ids(Split::Train);
    let tgt = ds.view(ids[0]).unwrap().camera.clone();
    let weights = ModelWeights::<f32>::init(5);
    let g = Graph::new();
    let w = weights.track(&g);
    let sources: Vec<_> = ids[1..4].iter().map(|&id| SourceView::new(&g, &w, &ds, id).unwrap()).collect();
    let out = cascade_predict(&g, &w, &sources, &tgt, &CascadeConfig::default()).unwrap();
    let loss = g.sum(&out.fine.mean);
    let grads = g.backward(&loss).unwrap();
    for name in ["reg3d_coarse.c0.w", "reg3d_coarse.prob.w", "reg3d_fine.c0.w", "reg3d_fine.prob.w", "unet.e0.w"] {
        let gv = grads.get(w.get(name)).unwrap();
        assert!(gv.iter().any(|&v| v != 0.0), "{name} received no gradient");
    }
}

#[test]
fn cascade_shapes() {
    let ds = generate_scene(&SceneSpec::micro(0)).unwrap();
    let ids = ds.ids(Split::Train);
    let tgt = ds.view(ids[0]).unwrap().camera.clone();
    let w = ModelWeights::<f32>::init(1);
    let g = Graph::new();
    let sources: Vec<_> = ids[1..4].iter().map(|&id| SourceView::new(&g, &w, &ds, id).unwrap()).collect();
    let out = cascade_predict(&g, &w, &sources, &tgt, &CascadeConfig::default()).unwrap();
    assert_eq!(out.fine.mean.shape(), &[16, 16]);
    assert_eq!(out.feat_volume.shape(), &[16, 8, 16, 16]);
    assert_eq!(out.coarse.as_ref().unwrap().mean.shape(), &[8, 8]);
    let single = CascadeConfig {
        cascade: false,
        ..CascadeConfig::default()
    };
    let out = cascade_predict(&g, &w, &sources, &tgt, &single).unwrap();
    assert!(out.coarse.is_none());
    assert_eq!(out.fine_planes.shape(), &[128, 16, 16]);
}

fn range_maps(h: usize, w: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = random_tensor(&[h, w], 2.0, 6.0, &mut rng);
    let width = random_tensor(&[h, w], 0.01, 2.0, &mut rng);
    let hi = Tensor::new(&[h, w], lo.data().iter().zip(width.data()).map(|(a, b)| a + b).collect()).unwrap();
    (lo, hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fine_planes_increase_inside_upsampled_range(seed in 0u64..10_000, d in 2usize..10) {
        let g = Graph::<f64>::new();
        let (lo, hi) = range_maps(3, 4, seed);
        let (ulo, uhi) = upsample_range(&g, &lo, &hi, 2).unwrap();
        prop_assert_eq!(ulo.shape(), &[6, 8]);
        let planes = planes_in_range(&g, &ulo, &uhi, d).unwrap();
        let n = 48;
        for p in 0..n {
            prop_assert!(ulo.data()[p] < uhi.data()[p]);
            prop_assert!(ulo.data()[p] >= lo.data().iter().cloned().fold(f64::MAX, f64::min) - 1e-12);
            for k in 0..d {
                let z = planes.data()[k * n + p];
                prop_assert!(z >= ulo.data()[p] - 1e-12 && z <= uhi.data()[p] + 1e-12);
                if k > 0 {
                    prop_assert!(z > planes.data()[(k - 1) * n + p]);
                }
            }
        }
    }

    #[test]
    fn range_contains_mean(seed in 0u64..10_000, lambda in 0.1..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::<f64>::new();
        let logits = random_tensor(&[5, 2, 2], -4.0, 4.0, &mut rng);
        let mut pv = Vec::new();
        for k in 0..5 {
            pv.extend(std::iter::repeat_n(2.0 + 1.5 * k as f64, 4));
        }
        let planes = Tensor::new(&[5, 2, 2], pv).unwrap();
        let d = depth_distribution(&g, &logits, &planes, lambda, 2.0, 8.0).unwrap();
        for p in 0..4 {
            let (m, lo, hi) = (d.mean.data()[p], d.lo.data()[p], d.hi.data()[p]);
            prop_assert!(lo <= m && m <= hi && lo < hi);
            prop_assert!(lo >= 2.0 && hi <= 8.0);
            prop_assert!(d.std.data()[p] >= 0.0);
        }
    }
}
