//! Property tests for the module-level invariants.

use ndarray::Array2;
use proptest::prelude::*;

use sdrpn::noise::{conditional_mean_check, simulate, variance_reduction_check, NoiseModel, NoiseModelSpec};
use sdrpn::postprocess::{
    binarize, box_upscale, connected_components, gaussian_smooth, masked_upscale, roi_from_map, GaussianKernel, UpscaleMode,
};
use sdrpn::pseudo_label::{assign_labels, LabelThresholds, NormThreshold, LABEL_BG, LABEL_FG};
use sdrpn::student::loss::{masked_bce_loss, masked_loss_sum, LossKind, TargetMap};
use sdrpn::student::model::{ModelDims, StudentModel, Transformer};
use sdrpn::teacher::{generate_sample, TeacherConfig};
use sdrpn::{read_grid, write_grid, Grid, RngStream};

fn arb_map() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..=16, 2usize..=16).prop_flat_map(|(h, w)| {
        let cell = prop_oneof![3 => 0.0f64..1.0, 1 => Just(0.0), 1 => Just(1.0)];
        (Just(h), Just(w), proptest::collection::vec(cell, h * w))
    })
}

fn thresholds(fg: f64, bg: f64) -> LabelThresholds {
    LabelThresholds {
        fg,
        bg,
        norm: NormThreshold::default(),
    }
}

fn fg_set(labels: &[i8]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == LABEL_FG).collect()
}

fn bg_set(labels: &[i8]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == LABEL_BG).collect()
}

fn subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn grid_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), code in 0u8..3, seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = RngStream::new(seed, 0);
        let g = match code {
            0 => Grid::from_f32(shape, (0..n).map(|_| rng.normal() as f32).collect()),
            1 => Grid::from_f64(shape, (0..n).map(|_| rng.normal() * 1e6).collect()),
            _ => Grid::from_i8(shape, (0..n).map(|_| rng.below(256) as i32 as i8).collect()),
        }.unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.grid");
        write_grid(&g, &p).unwrap();
        prop_assert_eq!(read_grid(&p).unwrap(), g);
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), stream in any::<u64>(), tag in any::<u64>()) {
        let a = RngStream::new(seed, stream).derive(tag).uniform(8);
        let b = RngStream::new(seed, stream).derive(tag).uniform(8);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn labels_are_scale_invariant((h, w, m) in arb_map(), c in 1e-3f64..1e3, fg in 0.05f64..1.0, frac in 0.0f64..0.99) {
        let t = thresholds(fg, fg * frac);
        let scaled: Vec<f64> = m.iter().map(|v| v * c).collect();
        let a = assign_labels(&m, h, w, &t).unwrap();
        let b = assign_labels(&scaled, h, w, &t).unwrap();
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn thresholds_are_monotone((h, w, m) in arb_map(), fg in 0.05f64..0.9, up in 0.0f64..0.1, frac in 0.0f64..0.99, down in 0.0f64..1.0) {
        let base = thresholds(fg, fg * frac);
        let a = assign_labels(&m, h, w, &base).unwrap();
        let higher_fg = assign_labels(&m, h, w, &thresholds(fg + up, base.bg)).unwrap();
        prop_assert!(subset(&fg_set(&higher_fg.labels), &fg_set(&a.labels)));
        let lower_bg = assign_labels(&m, h, w, &thresholds(fg, base.bg * down)).unwrap();
        prop_assert!(subset(&bg_set(&lower_bg.labels), &bg_set(&a.labels)));
    }

    #[test]
    fn ignored_logits_never_move_the_loss(labels in proptest::collection::vec(-1i8..=1, 1..40), seed in any::<u64>(), bump in -50.0f64..50.0) {
        let mut rng = RngStream::new(seed, 1);
        let z = Array2::from_shape_fn((1, labels.len()), |_| 4.0 * rng.normal());
        let base = masked_bce_loss(&z, &labels).unwrap();
        for i in (0..labels.len()).filter(|&i| labels[i] == -1) {
            let mut z2 = z.clone();
            z2[[0, i]] += bump;
            prop_assert_eq!(masked_bce_loss(&z2, &labels).unwrap().loss, base.loss);
            prop_assert_eq!(base.grad[[0, i]], 0.0);
        }
    }

    #[test]
    fn dense_targets_ignore_negative_entries(seed in any::<u64>(), n in 1usize..30, mse in any::<bool>()) {
        let mut rng = RngStream::new(seed, 2);
        let values: Vec<f64> = (0..n).map(|_| if rng.bernoulli(0.3) { -1.0 } else { rng.next_f64() }).collect();
        let target = TargetMap { values: values.clone(), kind: if mse { LossKind::Mse } else { LossKind::Bce } };
        let z = Array2::from_shape_fn((2, n), |_| 3.0 * rng.normal());
        let (sum, _, g) = masked_loss_sum(&z, &target).unwrap();
        for i in (0..n).filter(|&i| values[i] < 0.0) {
            let mut z2 = z.clone();
            z2[[0, i]] += 7.0;
            z2[[1, i]] -= 7.0;
            prop_assert_eq!(masked_loss_sum(&z2, &target).unwrap().0, sum);
            prop_assert_eq!(g[[0, i]], 0.0);
            prop_assert_eq!(g[[1, i]], 0.0);
        }
    }

    #[test]
    fn interior_impulse_keeps_its_mass(sigma in 0.3f64..2.0, extra in 0usize..4, mass in 0.1f64..10.0) {
        let k = GaussianKernel::new(sigma);
        let r = k.radius();
        let side = 2 * r + 1 + 2 * extra + 2;
        let mut m = vec![0.0; side * side];
        let c = side / 2;
        m[c * side + c] = mass;
        let s = gaussian_smooth(&m, side, side, &k).unwrap();
        prop_assert!((s.iter().sum::<f64>() - mass).abs() < 1e-9 * mass.max(1.0));
    }

    #[test]
    fn upscaling_geometry((h, w, m) in arb_map(), tau in 0.0f64..1.0) {
        let mask = binarize(&m, tau);
        let regions = connected_components(&mask, h, w).unwrap();
        let boxed = box_upscale(&regions);
        let masked = masked_upscale(&regions, &mask, w);
        if let Some(all) = masked.union_box {
            for b in &boxed.boxes {
                prop_assert!(all.encloses(b));
            }
            let box_tokens: usize = boxed.covered_tokens(h, w).iter().map(|&v| v as usize).sum();
            prop_assert!(box_tokens <= all.area());
            // the pasted mask is the binarized map itself
            prop_assert_eq!(masked.selected_tokens(h, w), mask);
        } else {
            prop_assert!(regions.is_empty() && boxed.empty);
        }
    }

    #[test]
    fn box_and_mask_modes_agree_on_emptiness((h, w, m) in arb_map(), tau in 0.0f64..1.0) {
        let k = GaussianKernel::new(1.0);
        let a = roi_from_map(&m, h, w, &k, tau, UpscaleMode::Box).unwrap();
        let b = roi_from_map(&m, h, w, &k, tau, UpscaleMode::Mask).unwrap();
        prop_assert_eq!(a.empty, b.empty);
        prop_assert_eq!(a.regions, b.regions);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), id in 0u64..1000) {
        let cfg = TeacherConfig { seed, ..TeacherConfig::default() };
        let s = generate_sample(&cfg, id).unwrap();
        let t = s.attention.tokens();
        for row in s.attention.rows().chunks_exact(t) {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sinks_stand_apart_in_norm(seed in any::<u64>(), id in 0u64..1000, mult in 4.0f64..12.0, sinks in 1usize..6) {
        let cfg = TeacherConfig { seed, sink_multiplier: mult, sink_count: sinks, ..TeacherConfig::default() };
        let s = generate_sample(&cfg, id).unwrap();
        let norms = s.token_norms();
        let min_sink = s.sinks.iter().map(|&i| norms[i]).fold(f64::INFINITY, f64::min);
        let max_other = (0..norms.len()).filter(|i| !s.sinks.contains(i)).map(|i| norms[i]).fold(0.0, f64::max);
        prop_assert!(min_sink > max_other, "{} <= {}", min_sink, max_other);
    }

    #[test]
    fn student_starts_as_teacher_copy(seed in any::<u64>(), depth in 2usize..5, pick in 0usize..100) {
        let dims = ModelDims { feature_dim: 3, d_model: 4, heads: 2, mlp_ratio: 2, depth, max_turns: 2 };
        let teacher = Transformer::random(dims, seed).unwrap();
        let trainable = 1 + pick % depth;
        let frozen = (pick / depth) % (depth - trainable + 1);
        let s = StudentModel::from_teacher(&teacher, frozen, trainable).unwrap();
        prop_assert_eq!(&s.embed, &teacher.embed);
        prop_assert_eq!(&s.blocks[..], &teacher.blocks[..frozen + trainable]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn theory_holds_for_random_noise(kind in 0u8..3, a in 0.0f64..0.45, b in 0.0f64..0.45, seed in any::<u64>()) {
        let noise = match kind {
            0 => NoiseModel::Ccn { rho0: a, rho1: b },
            1 => NoiseModel::SymmetricCcn { rho: a },
            _ => NoiseModel::Additive { mu0: a * 0.5, mu1: 1.0 - b * 0.5, scale: 0.02 + a * 0.1 },
        };
        let spec = NoiseModelSpec::new(noise);
        let t = simulate(&spec, 200_000, seed).unwrap();
        let c = conditional_mean_check(&t, &spec, 20).unwrap();
        // 3-SE bands fail about 0.3% of the time per bin
        prop_assert!(c.fraction_within >= 0.9, "{:?}", c.rows);
        let (v, fit) = variance_reduction_check(&t, &spec, 50).unwrap();
        prop_assert!(v.mse_fitted < v.mse_raw);
        prop_assert!(fit.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
