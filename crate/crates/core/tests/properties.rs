//! Property tests of metric, data and schedule invariants.

use proptest::prelude::*;

use protoseg::autograd::Graph;
use protoseg::config::PhantomConfig;
use protoseg::data::{
    apply_draw, export_label, normalize_case, read_label_volume, remap_raw_label, write_label_volume, AugmentDraw,
    LabelMap,
};
use protoseg::metrics::{compose_regions, dice_score, hd95, squared_distance_transform, BinaryMask};
use protoseg::tensor::Tensor;
use protoseg::training::{poly_lr, window_starts, TrainConfig};

fn dims_strategy(max: usize) -> impl Strategy<Value = [usize; 3]> {
    (1..=max, 1..=max, 1..=max).prop_map(|(a, b, c)| [a, b, c])
}

fn mask_pair() -> impl Strategy<Value = ([usize; 3], Vec<bool>, Vec<bool>, [f64; 3])> {
    (dims_strategy(7), prop::array::uniform3(0.5f64..2.0)).prop_flat_map(|(dims, spacing)| {
        let n = dims.iter().product::<usize>();
        (
            Just(dims),
            prop::collection::vec(prop::bool::weighted(0.3), n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
            Just(spacing),
        )
    })
}

fn label_map(max: usize) -> impl Strategy<Value = LabelMap> {
    dims_strategy(max).prop_flat_map(|dims| {
        prop::collection::vec(0u8..4, dims.iter().product::<usize>()).prop_map(move |data| LabelMap { dims, data })
    })
}

/// Embeds a mask in a grid padded by `pad` voxels, offset by `shift`.
fn embed(dims: [usize; 3], data: &[bool], pad: usize, shift: [usize; 3]) -> ([usize; 3], Vec<bool>) {
    let big = dims.map(|n| n + 2 * pad);
    let mut out = vec![false; big.iter().product()];
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let src = (h * dims[1] + w) * dims[2] + d;
                let dst = ((h + shift[0]) * big[1] + w + shift[1]) * big[2] + d + shift[2];
                out[dst] = data[src];
            }
        }
    }
    (big, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded((dims, a, b, sp) in mask_pair()) {
        let a = BinaryMask::new(dims, a, sp).unwrap();
        let b = BinaryMask::new(dims, b, sp).unwrap();
        let ab = dice_score(&a, &b).unwrap();
        prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hd95_is_symmetric_and_zero_on_identity((dims, a, b, sp) in mask_pair()) {
        let a = BinaryMask::new(dims, a, sp).unwrap();
        let b = BinaryMask::new(dims, b, sp).unwrap();
        let ab = hd95(&a, &b, None).unwrap();
        prop_assert!((ab - hd95(&b, &a, None).unwrap()).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(hd95(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn hd95_is_translation_invariant(
        (dims, a, b, sp) in mask_pair(),
        s1 in prop::array::uniform3(1usize..=3),
        s2 in prop::array::uniform3(1usize..=3),
    ) {
        prop_assume!(a.iter().any(|&x| x) && b.iter().any(|&x| x));
        // Interior masks only: the grid edge counts as surface.
        let score = |pad: usize, shift: [usize; 3]| {
            let (big, ea) = embed(dims, &a, pad, shift);
            let (_, eb) = embed(dims, &b, pad, shift);
            hd95(&BinaryMask::new(big, ea, sp).unwrap(), &BinaryMask::new(big, eb, sp).unwrap(), None).unwrap()
        };
        let reference = score(1, [1; 3]);
        let one = score(2, s1);
        let two = score(2, s2);
        prop_assert!((one - two).abs() < 1e-9, "{} vs {}", one, two);
        prop_assert!((one - reference).abs() < 1e-9);
    }

    #[test]
    fn distance_transform_matches_brute_force((dims, sites, _, sp) in mask_pair()) {
        prop_assume!(sites.iter().any(|&x| x));
        let fast = squared_distance_transform(&sites, dims, sp);
        let coord = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        for (i, &f) in fast.iter().enumerate() {
            let p = coord(i);
            let brute = sites
                .iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(j, _)| {
                    let q = coord(j);
                    (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            prop_assert!((f - brute).abs() < 1e-9, "voxel {}: {} vs {}", i, f, brute);
        }
    }

    #[test]
    fn regions_are_nested(labels in label_map(6)) {
        let [wt, tc, et] = compose_regions(&labels, [1.0; 3]).unwrap();
        for i in 0..labels.data.len() {
            prop_assert!(!et.data[i] || tc.data[i]);
            prop_assert!(!tc.data[i] || wt.data[i]);
            prop_assert_eq!(wt.data[i], labels.data[i] != 0);
        }
    }

    #[test]
    fn window_starts_cover_every_voxel(n in 1usize..80, win in 1usize..40) {
        let starts = window_starts(n, win);
        prop_assert!(starts.windows(2).all(|w| w[0] < w[1]));
        let covered = |i: usize| starts.iter().any(|&s| s <= i && i < s + win);
        prop_assert!((0..n).all(covered));
        if n > win {
            prop_assert_eq!(*starts.last().unwrap(), n - win);
        }
    }

    #[test]
    fn raw_labels_round_trip(raw in 0i64..8) {
        match remap_raw_label(raw) {
            Ok(c) => prop_assert_eq!(export_label(c) as i64, raw),
            Err(_) => prop_assert!(raw == 3 || raw > 4),
        }
    }

    #[test]
    fn poly_lr_decreases_to_zero(total in 1u64..500, base in 1e-5f64..1e-1, power in 0.5f64..2.0) {
        let cfg = TrainConfig { total_epochs: total, base_lr: base, poly_power: power, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let lr = poly_lr(e, &cfg).unwrap();
            prop_assert!(lr <= prev && (0.0..=base).contains(&lr));
            prev = lr;
        }
        prop_assert_eq!(poly_lr(0, &cfg).unwrap(), base);
        prop_assert_eq!(poly_lr(total, &cfg).unwrap(), 0.0);
        prop_assert!(poly_lr(total + 1, &cfg).is_err());
    }

    #[test]
    fn softmax_columns_sum_to_one(
        c in 1usize..6,
        n in 1usize..20,
        scale in prop::sample::select(vec![1.0, 50.0, 1000.0]),
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let t = Tensor::from_fn(&[c, n], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
        });
        let mut g = Graph::eval();
        let x = g.constant(t);
        let p = g.softmax(x, 0);
        let v = g.value(p);
        for j in 0..n {
            let col: f64 = (0..c).map(|k| v.data()[k * n + j]).sum();
            prop_assert!((col - 1.0).abs() < 1e-12);
            prop_assert!((0..c).all(|k| v.data()[k * n + j] >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn label_volumes_round_trip_through_nifti(labels in label_map(9)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.nii.gz");
        write_label_volume(&path, &labels).unwrap();
        prop_assert_eq!(read_label_volume(&path).unwrap(), labels);
    }

    #[test]
    fn flips_are_involutions(seed in any::<u64>(), flips in prop::array::uniform3(any::<bool>())) {
        let cfg = PhantomConfig { count: 1, seed, grid_size: [12, 10, 8], ..PhantomConfig::default() };
        let case = cfg.generate().unwrap().remove(0);
        let draw = AugmentDraw { offset: [0; 3], flips, scale: 1.0, shifts: [0.0; 4] };
        let dims = case.dims();
        let twice = apply_draw(&apply_draw(&case, dims, &draw), dims, &draw);
        prop_assert_eq!(&twice.labels, &case.labels);
        for m in 0..4 {
            prop_assert_eq!(&twice.volumes[m].voxels, &case.volumes[m].voxels);
        }
    }

    #[test]
    fn normalised_modalities_are_standard_inside_the_mask(seed in any::<u64>()) {
        let cfg = PhantomConfig { count: 1, seed, grid_size: [16; 3], ..PhantomConfig::default() };
        let case = normalize_case(&cfg.generate().unwrap()[0]).unwrap();
        for v in &case.volumes {
            let inside: Vec<f64> = v.voxels.data.iter().zip(&v.brain_mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
            let n = inside.len() as f64;
            let mean = inside.iter().sum::<f64>() / n;
            let var = inside.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9, "mean {}", mean);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        }
    }
}
