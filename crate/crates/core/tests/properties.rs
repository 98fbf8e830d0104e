use std::collections::{BTreeMap, BTreeSet};

use activest::classifier::{init_model, loss, Matrix, PointLabel};
use activest::cloud::{augment, estimate_normals, read_cloud, write_cloud, AugmentParams, Cloud, CloudFormat, Rotation};
use activest::ensemble::uncertainty_of;
use activest::eval::{confusion, miou, ConfusionMatrix};
use activest::labels::{generate_pseudo, merge_annotations, propagate, Annotation, AnnotationSource, LabelState};
use activest::sampler::{select_1t1c, select_uncertain, Strategy as Selection};
use activest::supervoxel::{segment, Partition, SegmentParams};
use activest::cloud::Neighborhoods;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f32> {
    (-2.0f32..2.0).prop_map(|v| (v * 64.0).round() / 64.0)
}

fn unit() -> impl Strategy<Value = f32> {
    0.0f32..=1.0
}

fn cloud_strategy(max_n: usize) -> impl Strategy<Value = Cloud> {
    (1..=max_n).prop_flat_map(|n| {
        (
            prop::collection::vec([coord(), coord(), coord()], n),
            prop::collection::vec([unit(), unit(), unit()], n),
            prop::option::of(prop::collection::vec(0u32..6, n)),
            prop::option::of(prop::collection::vec(0u32..40, n)),
            any::<bool>(),
        )
            .prop_map(|(positions, colors, semantic, instances, with_normals)| {
                let mut c = Cloud::new("prop", positions, colors).unwrap();
                if with_normals {
                    let n = c.len();
                    c = c.with_normals(vec![[0.0, 0.6, 0.8]; n]).unwrap();
                }
                if let Some(s) = semantic {
                    c = c.with_semantic(s, None).unwrap();
                }
                if let Some(i) = instances {
                    c = c.with_instances(i).unwrap();
                }
                c
            })
    })
}

/// Row-stochastic `n x c` matrix from raw non-negative weights.
fn stochastic(raw: &[f64], n: usize, c: usize) -> Matrix {
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = &raw[i * c..(i + 1) * c];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            data.extend(row.iter().map(|v| v / s));
        } else {
            data.extend(std::iter::repeat_n(1.0 / c as f64, c));
        }
    }
    Matrix::new(n, c, data).unwrap()
}

fn versions_strategy() -> impl Strategy<Value = (Vec<Matrix>, usize, usize)> {
    (1usize..=5, 1usize..=12, 2usize..=6).prop_flat_map(|(k, n, c)| {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, n * c), k)
            .prop_map(move |raws| (raws.iter().map(|r| stochastic(r, n, c)).collect(), n, c))
    })
}

fn annotation(scene: &str, point: u32, class_id: u32) -> Annotation {
    Annotation { scene_id: scene.into(), point_index: point, class_id, iteration: 1, source: AnnotationSource::Oracle }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn binary_cloud_round_trip_is_lossless(cloud in cloud_strategy(40)) {
        let mut buf = Vec::new();
        write_cloud(&cloud, &mut buf, CloudFormat::TableBinary).unwrap();
        let back = read_cloud(buf.as_slice(), CloudFormat::TableBinary, "prop").unwrap();
        prop_assert_eq!(back.positions(), cloud.positions());
        prop_assert_eq!(back.colors(), cloud.colors());
        prop_assert_eq!(back.normals(), cloud.normals());
        prop_assert_eq!(back.gt_semantic(), cloud.gt_semantic());
        prop_assert_eq!(back.gt_instance(), cloud.gt_instance());
    }

    #[test]
    fn augmentation_preserves_point_correspondence(cloud in cloud_strategy(30), seed in any::<u64>(), s in 0.5f64..2.0) {
        let params = AugmentParams {
            rotation: Rotation::AboutUpAxisUniform,
            scale_range: [s, s],
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            color_jitter: 0.0,
            seed,
        };
        let out = augment(&cloud, &params).unwrap();
        prop_assert_eq!(out.len(), cloud.len());
        prop_assert_eq!(out.gt_semantic(), cloud.gt_semantic());
        prop_assert_eq!(out.gt_instance(), cloud.gt_instance());
        prop_assert_eq!(out.colors(), cloud.colors());
        let d = |c: &Cloud, i: usize, j: usize| {
            let (a, b) = (c.position_f64(i), c.position_f64(j));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let dz = |c: &Cloud, i: usize, j: usize| c.position_f64(i)[2] - c.position_f64(j)[2];
        for i in 0..cloud.len() {
            for j in 0..cloud.len() {
                prop_assert!((d(&out, i, j) - s * d(&cloud, i, j)).abs() < 1e-4);
                prop_assert!((dz(&out, i, j) - s * dz(&cloud, i, j)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn identity_augmentation_is_identity(cloud in cloud_strategy(30), seed in any::<u64>()) {
        let out = augment(&cloud, &AugmentParams::identity().with_seed(seed)).unwrap();
        prop_assert_eq!(out, cloud);
    }

    #[test]
    fn forward_is_row_stochastic_and_pointwise(
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..12, 0..3),
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 1..20),
        rot in 0usize..20,
    ) {
        let mut widths = vec![5];
        widths.extend(&hidden);
        widths.push(4);
        let model = init_model(seed, &widths).unwrap();
        let x = Matrix::from_rows(&rows).unwrap();
        let p = model.forward(&x).unwrap();
        for i in 0..p.rows() {
            prop_assert!(p.row(i).iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut shifted = rows.clone();
        let r = rot % rows.len();
        shifted.rotate_left(r);
        let q = model.forward(&Matrix::from_rows(&shifted).unwrap()).unwrap();
        for i in 0..rows.len() {
            prop_assert_eq!(q.row(i), p.row((i + r) % rows.len()));
        }
    }

    #[test]
    fn loss_without_pseudo_labels_ignores_lambda(
        raw in prop::collection::vec(0.0f64..1.0, 8 * 3),
        labels in prop::collection::btree_map(0u32..8, 0u32..3, 1..8),
        l1 in 0.0f64..=1.0,
        l2 in 0.0f64..=1.0,
    ) {
        let probs = stochastic(&raw, 8, 3);
        let t: Vec<PointLabel> = labels.into_iter().collect();
        prop_assert_eq!(loss(&probs, &t, &[], l1).unwrap(), loss(&probs, &t, &[], l2).unwrap());
    }

    #[test]
    fn ensemble_statistics((versions, n, c) in versions_strategy(), rot in 0usize..5) {
        let s = uncertainty_of(&versions).unwrap();
        let k = versions.len() as f64;
        for i in 0..n {
            for j in 0..c {
                let mean = versions.iter().map(|v| v.get(i, j)).sum::<f64>() / k;
                assert_abs_diff_eq!(s.mean_probs.get(i, j), mean, epsilon = 1e-12);
            }
            prop_assert!(s.uncertainty[i] >= 0.0 && s.uncertainty[i] <= 0.5);
            let top = s.top_class[i] as usize;
            let agree = versions.iter().all(|v| v.get(i, top) == versions[0].get(i, top));
            prop_assert_eq!(s.uncertainty[i] == 0.0, agree);
            prop_assert_eq!(s.confidence[i], s.mean_probs.get(i, top));
        }
        let mut permuted = versions.clone();
        permuted.rotate_left(rot % versions.len());
        let p = uncertainty_of(&permuted).unwrap();
        prop_assert_eq!(&p.top_class, &s.top_class);
        for i in 0..n {
            assert_abs_diff_eq!(p.uncertainty[i], s.uncertainty[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn pseudo_label_count_is_monotone_in_tau(
        (versions, n, _) in versions_strategy(),
        excluded in prop::collection::btree_map(0u32..12, 0u32..2, 0..4),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let s = uncertainty_of(&versions).unwrap();
        let exclude: BTreeMap<u32, u32> = excluded.into_iter().filter(|(p, _)| (*p as usize) < n).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = generate_pseudo(&s, lo, &exclude);
        let p_hi = generate_pseudo(&s, hi, &exclude);
        prop_assert!(p_hi.len() <= p_lo.len());
        prop_assert!(p_hi.keys().all(|k| p_lo.contains_key(k)));
        prop_assert!(p_lo.keys().all(|k| !exclude.contains_key(k)));
    }

    #[test]
    fn propagation_invariants(
        assignment in prop::collection::vec(0u32..8, 1..60),
        picks in prop::collection::vec((any::<prop::sample::Index>(), 0u32..4), 0..8),
    ) {
        // densify ids
        let mut remap = BTreeMap::new();
        let dense: Vec<u32> = assignment.iter().map(|a| { let l = remap.len() as u32; *remap.entry(*a).or_insert(l) }).collect();
        let part = Partition::from_assignment(dense, "prop").unwrap();
        let mut used = BTreeSet::new();
        let anns: Vec<Annotation> = picks
            .iter()
            .map(|(idx, c)| (idx.index(part.len()) as u32, *c))
            .filter(|(p, _)| used.insert(part.supervoxel_of(*p as usize)))
            .map(|(p, c)| annotation("s", p, c))
            .collect();
        let t = propagate(&anns, &part).unwrap();
        prop_assert_eq!(&propagate(&anns, &part).unwrap(), &t);
        let expected: usize = anns.iter().map(|a| part.members(part.supervoxel_of(a.point_index as usize)).len()).sum();
        prop_assert_eq!(t.len(), expected);
        for a in &anns {
            prop_assert_eq!(t.get(&a.point_index), Some(&a.class_id));
        }
        let scenes: BTreeMap<String, Partition> = [("s".to_string(), part.clone())].into();
        let state = merge_annotations(&LabelState::new(), &anns, &scenes, 4).unwrap();
        prop_assert_eq!(state.true_labels("s"), &t);
        prop_assert_eq!(state.annotations(), anns.as_slice());
    }

    #[test]
    fn uncertain_selection_respects_supervoxels(
        assignment in prop::collection::vec(0u32..12, 12..60),
        u in prop::collection::vec(0.0f64..0.5, 60),
        annotated in prop::collection::btree_set(0u32..12, 0..4),
        m in 0usize..5,
        seed in any::<u64>(),
        top in any::<bool>(),
    ) {
        let mut remap = BTreeMap::new();
        let dense: Vec<u32> = assignment.iter().map(|a| { let l = remap.len() as u32; *remap.entry(*a).or_insert(l) }).collect();
        let part = Partition::from_assignment(dense, "prop").unwrap();
        let annotated: BTreeSet<u32> = annotated.into_iter().filter(|&s| (s as usize) < part.num_supervoxels()).collect();
        let u = &u[..part.len()];
        let strategy = if top { Selection::TopM } else { Selection::UncertaintyWeighted };
        let free = part.num_supervoxels() - annotated.len();
        let picked = select_uncertain(u, &part, &annotated, m, strategy, seed);
        if m > free {
            prop_assert!(picked.is_err());
        } else {
            let picked = picked.unwrap();
            prop_assert_eq!(picked.len(), m);
            let svs: BTreeSet<u32> = picked.iter().map(|&p| part.supervoxel_of(p as usize) as u32).collect();
            prop_assert_eq!(svs.len(), m);
            prop_assert!(svs.is_disjoint(&annotated));
            prop_assert_eq!(select_uncertain(u, &part, &annotated, m, strategy, seed).unwrap(), picked);
        }
    }

    #[test]
    fn one_click_selection_is_instance_distinct(
        instances in prop::collection::vec(0u32..10, 10..50),
        u in prop::collection::vec(0.0f64..0.5, 50),
        sampled in prop::collection::btree_set(0u32..10, 0..3),
        m in 1usize..4,
    ) {
        let n = instances.len();
        let part = Partition::singletons(n);
        let none = BTreeSet::new();
        let u = &u[..n];
        let left: BTreeSet<u32> = instances.iter().copied().filter(|i| !sampled.contains(i)).collect();
        match select_1t1c(u, &part, &none, &instances, &sampled, m) {
            Ok(picked) => {
                prop_assert_eq!(picked.len(), m);
                let inst: BTreeSet<u32> = picked.iter().map(|&p| instances[p as usize]).collect();
                prop_assert_eq!(inst.len(), m);
                prop_assert!(inst.is_disjoint(&sampled));
                let first = picked[0] as usize;
                let best = (0..n).filter(|&i| !sampled.contains(&instances[i])).map(|i| u[i]).fold(f64::MIN, f64::max);
                prop_assert_eq!(u[first], best);
            }
            Err(_) => prop_assert!(left.len() < m),
        }
    }

    #[test]
    fn miou_is_permutation_invariant_and_bounded(
        pairs in prop::collection::vec((0u32..5, 0u32..5), 1..200),
        perm in Just((0u32..5).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let cm = confusion(&pred, &gt, 5).unwrap();
        let r = miou(&cm).unwrap();
        let pp: Vec<u32> = pred.iter().map(|&c| perm[c as usize]).collect();
        let pg: Vec<u32> = gt.iter().map(|&c| perm[c as usize]).collect();
        let r2 = miou(&confusion(&pp, &pg, 5).unwrap()).unwrap();
        assert_abs_diff_eq!(r.mean, r2.mean, epsilon = 1e-12);
        for c in 0..5 {
            prop_assert_eq!(r.per_class[c], r2.per_class[perm[c] as usize]);
        }
        prop_assert!(r.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let diagonal = pred == gt;
        prop_assert_eq!(r.mean == 1.0, diagonal);
    }

    #[test]
    fn confusion_total_counts_points(pairs in prop::collection::vec((0u32..4, 0u32..4), 1..100)) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let cm: ConfusionMatrix = confusion(&pred, &gt, 4).unwrap();
        prop_assert_eq!(cm.total(), pairs.len() as u64);
    }
}

fn random_cloud(n: usize, seed: u64) -> Cloud {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n)
        .map(|_| [rng.random_range(0.0f32..1.0), rng.random_range(0.0f32..1.0), rng.random_range(0.0f32..0.3)])
        .collect();
    let colors = (0..n).map(|_| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]).collect();
    Cloud::new("rand", positions, colors).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn segmentation_is_total_connected_and_deterministic(
        n in 8usize..200,
        seed in any::<u64>(),
        angle in 5.0f64..60.0,
        color in 0.05f64..0.6,
        dist in 0.02f64..0.3,
        min_sv in 1usize..12,
    ) {
        let cloud = estimate_normals(&random_cloud(n, seed), 6).unwrap();
        let params = SegmentParams { k_neighbors: 6, normal_angle_max: angle, color_dist_max: color, spatial_dist_max: dist, min_sv_size: min_sv };
        let part = segment(&cloud, &params).unwrap();
        prop_assert_eq!(part.len(), n);
        let mut seen = vec![false; n];
        for members in part.all_members() {
            prop_assert!(!members.is_empty());
            for &m in members {
                prop_assert!(!seen[m as usize]);
                seen[m as usize] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert!(part.is_connected_under(&Neighborhoods::build(cloud.positions(), 6)));
        prop_assert_eq!(segment(&cloud, &params).unwrap(), part);
    }

    #[test]
    fn halving_thresholds_never_coarsens(
        n in 8usize..200,
        seed in any::<u64>(),
        angle in 5.0f64..60.0,
        color in 0.05f64..0.6,
        dist in 0.02f64..0.3,
    ) {
        let cloud = estimate_normals(&random_cloud(n, seed), 6).unwrap();
        let coarse = SegmentParams { k_neighbors: 6, normal_angle_max: angle, color_dist_max: color, spatial_dist_max: dist, min_sv_size: 1 };
        let fine = SegmentParams { normal_angle_max: angle / 2.0, color_dist_max: color / 2.0, spatial_dist_max: dist / 2.0, ..coarse };
        let s_coarse = segment(&cloud, &coarse).unwrap().num_supervoxels();
        let s_fine = segment(&cloud, &fine).unwrap().num_supervoxels();
        prop_assert!(s_fine >= s_coarse, "{} < {}", s_fine, s_coarse);
    }
}
