use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsm_core::background::{vsharp_remove, SmvConfig};
use qsm_core::inversion::{invert_tkd, passband_error, TkdConfig};
use qsm_core::io::{read_raw, write_raw};
use qsm_core::metrics::{hfen, rmse, ssim};
use qsm_core::neural::train::blend_coverage;
use qsm_core::neural::{build_unet, loss_masked_mse, SkipMode, Tensor, UNetConfig};
use qsm_core::phantom::forward_field;
use qsm_core::preprocess::{normalize_phase, NormalizedPhase};
use qsm_core::volume::{dilate_mask, distance_to_boundary, erode_mask};
use qsm_core::{Dims, Mask, Unit, Volume3D};

fn random_volume(dims: Dims, seed: u64, unit: Unit) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Volume3D::new(dims, [1.0; 3], unit, data).unwrap()
}

/// Union of a few random balls and boxes, so masks have a mix of deep and thin parts.
fn random_mask(dims: Dims, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.as_array();
    let blobs: Vec<([f64; 3], f64, bool)> = (0..rng.random_range(1..5))
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.random_range(0.0..d[a] as f64));
            (c, rng.random_range(1.5..d[0].max(4) as f64 / 2.0), rng.random_bool(0.5))
        })
        .collect();
    Mask::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        blobs.iter().any(|(c, r, ball)| {
            if *ball {
                (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
            } else {
                (0..3).all(|a| (p[a] - c[a]).abs() <= *r)
            }
        })
    })
}

/// Erosion straight from the definition; voxels beyond the grid count as outside.
fn brute_erode(m: &Mask, r: usize) -> Mask {
    let dims = m.dims();
    let d = dims.as_array().map(|n| n as i64);
    let r = r as i64;
    Mask::from_fn(dims, |x, y, z| {
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy + dz * dz > r * r {
                        continue;
                    }
                    let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if px < 0 || py < 0 || pz < 0 || px >= d[0] || py >= d[1] || pz >= d[2] {
                        return false;
                    }
                    if !m.get(px as usize, py as usize, pz as usize) {
                        return false;
                    }
                }
            }
        }
        true
    })
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn small_dims() -> impl Strategy<Value = Dims> {
    (6usize..=14, 6usize..=14, 6usize..=14).prop_map(|(a, b, c)| Dims(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raw_round_trip_is_bitwise(vals in prop::collection::vec(-1e30f32..1e30f32, 1..200), vs in 0.1f32..5.0) {
        let n = vals.len();
        let v = Volume3D::new(Dims(n, 1, 1), [vs as f64, 1.0, 2.5], Unit::Radians, vals.iter().map(|&x| x as f64).collect()).unwrap();
        let mut bytes = Vec::new();
        write_raw(&v, &mut bytes).unwrap();
        let back = read_raw(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &v);
        let mut again = Vec::new();
        write_raw(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn erosion_matches_definition(dims in small_dims(), seed in any::<u64>(), r in 0usize..4) {
        let m = random_mask(dims, seed);
        prop_assert_eq!(erode_mask(&m, r), brute_erode(&m, r));
    }

    #[test]
    fn erosion_composes_by_containment(dims in small_dims(), seed in any::<u64>(), a in 0usize..3, b in 0usize..3) {
        let m = random_mask(dims, seed);
        let once = erode_mask(&m, a + b);
        let twice = erode_mask(&erode_mask(&m, a), b);
        prop_assert!(once.is_subset_of(&twice));
        prop_assert_eq!(&once, &brute_erode(&m, a + b));
    }

    #[test]
    fn opening_never_grows(dims in small_dims(), seed in any::<u64>(), r in 0usize..4) {
        let m = random_mask(dims, seed);
        prop_assert!(dilate_mask(&erode_mask(&m, r), r).is_subset_of(&m));
    }

    #[test]
    fn distance_exceeds_r_exactly_on_erosion(dims in small_dims(), seed in any::<u64>()) {
        let m = random_mask(dims, seed);
        prop_assume!(!m.is_empty());
        let d = distance_to_boundary(&m).unwrap();
        for r in 0..=5 {
            let e = erode_mask(&m, r);
            for (i, &b) in e.bits().iter().enumerate() {
                prop_assert_eq!(d.data()[i] > r as f64, b, "r = {}, voxel {}", r, i);
            }
        }
    }

    #[test]
    fn forward_field_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let dims = Dims(16, 16, 16);
        let x = random_volume(dims, seed, Unit::Ppm);
        let y = random_volume(dims, seed ^ 1, Unit::Ppm);
        let combo = x.with_data(Unit::Ppm, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = forward_field(&combo).unwrap();
        let (fx, fy) = (forward_field(&x).unwrap(), forward_field(&y).unwrap());
        let rhs: Vec<f64> = fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assume!(rhs.iter().any(|v| *v != 0.0));
        prop_assert!(rel_diff(lhs.data(), &rhs) < 1e-10);
    }

    #[test]
    fn tkd_passband_exact_for_any_threshold(seed in any::<u64>(), t in 0.02f64..0.6) {
        let chi = random_volume(Dims(32, 32, 32), seed, Unit::Ppm);
        let rec = invert_tkd(&forward_field(&chi).unwrap(), &TkdConfig { threshold: t, ..Default::default() }).unwrap();
        prop_assert!(passband_error(&rec, &chi, t).unwrap() <= 1e-10);
    }

    #[test]
    fn tkd_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let dims = Dims(12, 10, 8);
        let x = random_volume(dims, seed, Unit::Ppm);
        let y = random_volume(dims, seed ^ 7, Unit::Ppm);
        let cfg = TkdConfig::default();
        let combo = x.with_data(Unit::Ppm, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = invert_tkd(&combo, &cfg).unwrap();
        let (tx, ty) = (invert_tkd(&x, &cfg).unwrap(), invert_tkd(&y, &cfg).unwrap());
        let rhs: Vec<f64> = tx.data().iter().zip(ty.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assume!(rhs.iter().any(|v| *v != 0.0));
        prop_assert!(rel_diff(lhs.data(), &rhs) < 1e-12);
    }

    #[test]
    fn normalization_is_linear(seed in any::<u64>(), a in -2.0f64..2.0) {
        let dims = Dims(5, 4, 3);
        let train = qsm_core::phantom::EchoTrain::uniform(3, 4e-3, 2e-3, 3.0);
        let ws: Vec<Volume3D> = (0..3).map(|i| random_volume(dims, seed + i, Unit::Radians)).collect();
        let scaled: Vec<Volume3D> = ws.iter().map(|w| w.map(Unit::Radians, |v| a * v).unwrap()).collect();
        let p = normalize_phase(&ws, &train).unwrap();
        let q = normalize_phase(&scaled, &train).unwrap();
        for (x, y) in p.psi.data().iter().zip(q.psi.data()) {
            prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn metrics_survive_axis_relabeling_and_scaling(seed in any::<u64>(), s in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0]) {
        let dims = Dims(12, 10, 8);
        let truth = random_volume(dims, seed, Unit::Ppm);
        let recon = random_volume(dims, seed ^ 3, Unit::Ppm);
        let mask = Mask::from_fn(dims, |x, y, z| (x + y + z) % 3 != 0);
        let swap = |v: &Volume3D| Volume3D::from_fn(Dims(8, 10, 12), [1.0; 3], Unit::Ppm, |x, y, z| v.get(z, y, x)).unwrap();
        let swap_mask = Mask::from_fn(Dims(8, 10, 12), |x, y, z| mask.get(z, y, x));
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        prop_assert!(close(rmse(&recon, &truth, &mask).unwrap(), rmse(&swap(&recon), &swap(&truth), &swap_mask).unwrap()));
        prop_assert!(close(hfen(&recon, &truth, &mask).unwrap(), hfen(&swap(&recon), &swap(&truth), &swap_mask).unwrap()));
        prop_assert!(close(ssim(&recon, &truth, &mask).unwrap(), ssim(&swap(&recon), &swap(&truth), &swap_mask).unwrap()));
        let sc = |v: &Volume3D| v.map(Unit::Ppm, |x| s * x).unwrap();
        prop_assert!(close(rmse(&recon, &truth, &mask).unwrap(), rmse(&sc(&recon), &sc(&truth), &mask).unwrap()));
        prop_assert!(close(hfen(&recon, &truth, &mask).unwrap(), hfen(&sc(&recon), &sc(&truth), &mask).unwrap()));
        prop_assert!((ssim(&truth, &truth, &mask).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn blending_is_a_partition_of_unity(nx in 8usize..30, ny in 8usize..30, nz in 8usize..30, half in 2usize..5) {
        let p = 2 * half;
        let cover = blend_coverage(Dims(nx, ny, nz), p).unwrap();
        prop_assert!(cover.iter().all(|c| (c - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn unet_preserves_spatial_shape(depth in 1usize..3, base in 1usize..3, k in (1usize..3, 1usize..3, 1usize..3), add in any::<bool>()) {
        let unit = 1 << depth;
        let cfg = UNetConfig {
            depth,
            base_channels: base,
            patch_size: unit,
            skip_mode: if add { SkipMode::Add } else { SkipMode::Concat },
            ..Default::default()
        };
        let mut m = build_unet(&cfg, 0).unwrap();
        let shape = [2, 1, k.2 * unit, k.1 * unit, k.0 * unit];
        let y = m.infer(&Tensor::zeros(shape)).unwrap();
        prop_assert_eq!(y.shape(), shape);
    }

    #[test]
    fn masked_loss_ignores_outside(vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 8)) {
        let pred = Tensor::from_vec([1, 1, 2, 2, 2], vals.iter().map(|v| v.0).collect()).unwrap();
        let label = Tensor::from_vec([1, 1, 2, 2, 2], vals.iter().map(|v| v.1).collect()).unwrap();
        let mask: Vec<bool> = vals.iter().map(|v| v.2).collect();
        let (l, g) = loss_masked_mse(&pred, &label, &mask);
        let n = mask.iter().filter(|&&b| b).count();
        let expect = if n == 0 { 0.0 } else { vals.iter().filter(|v| v.2).map(|v| (v.0 - v.1).powi(2)).sum::<f64>() / n as f64 };
        prop_assert!((l - expect).abs() <= 1e-12 * (1.0 + expect));
        for (i, v) in vals.iter().enumerate() {
            let e = if v.2 { 2.0 * (v.0 - v.1) / n as f64 } else { 0.0 };
            prop_assert!((g.data()[i] - e).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn vsharp_reliable_mask_nests(seed in any::<u64>(), r_hi in 2usize..4) {
        let dims = Dims(24, 24, 24);
        let mut m = random_mask(dims, seed);
        m = m.and(&Mask::from_fn(dims, |x, y, z| (x as f64 - 12.0).powi(2) + (y as f64 - 12.0).powi(2) + (z as f64 - 12.0).powi(2) <= 100.0)).unwrap();
        let ball = Mask::from_fn(dims, |x, y, z| (x as f64 - 12.0).powi(2) + (y as f64 - 12.0).powi(2) + (z as f64 - 12.0).powi(2) <= 64.0);
        let m = Mask::new(dims, m.bits().iter().zip(ball.bits()).map(|(a, b)| *a || *b).collect()).unwrap();
        let psi = NormalizedPhase::from_field(random_volume(dims, seed, Unit::Ppm));
        let cfg = |r_min| SmvConfig { r_min, r_max: 6, truncation: 0.05 };
        let lo = vsharp_remove(&psi, &m, &cfg(1)).unwrap();
        let hi = vsharp_remove(&psi, &m, &cfg(r_hi)).unwrap();
        prop_assert!(lo.reliable_mask.is_subset_of(&m));
        prop_assert!(hi.reliable_mask.is_subset_of(&lo.reliable_mask));
    }

    #[test]
    fn vsharp_is_linear(seed in any::<u64>(), a in -2.0f64..2.0) {
        let dims = Dims(20, 20, 20);
        let m = Mask::from_fn(dims, |x, y, z| (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2) + (z as f64 - 10.0).powi(2) <= 49.0);
        let f = random_volume(dims, seed, Unit::Ppm);
        let cfg = SmvConfig { r_min: 1, r_max: 4, truncation: 0.05 };
        let l1 = vsharp_remove(&NormalizedPhase::from_field(f.clone()), &m, &cfg).unwrap();
        let l2 = vsharp_remove(&NormalizedPhase::from_field(f.map(Unit::Ppm, |v| a * v).unwrap()), &m, &cfg).unwrap();
        let scaled: Vec<f64> = l1.local.data().iter().map(|v| a * v).collect();
        prop_assume!(a.abs() > 1e-6);
        prop_assert!(rel_diff(l2.local.data(), &scaled) < 1e-10);
    }
}

/// The digital ball of radius 2 is not the Minkowski sum of two radius-1 balls,
/// so erosion by 2 is strictly smaller than two erosions by 1 on this mask.
#[test]
fn erosion_does_not_compose_exactly() {
    let dims = Dims(9, 9, 9);
    let m = Mask::from_fn(dims, |x, y, z| !(x == 5 && y == 5 && z == 5));
    let once = erode_mask(&m, 2);
    let twice = erode_mask(&erode_mask(&m, 1), 1);
    assert!(once.is_subset_of(&twice));
    assert_ne!(once, twice);
    assert!(!once.get(4, 4, 4) && twice.get(4, 4, 4));
}
