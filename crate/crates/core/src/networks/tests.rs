use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::geometry::{norm, scale, Vec3};
use crate::gradcheck::{check_params, jitter_offsets, GradCheckOptions};
use crate::rng::stream;
use crate::train::he_init;

fn unit(rng: &mut Stream) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let l = norm(v);
        if l > 0.1 && l < 1.0 {
            return scale(v, 1.0 / l);
        }
    }
}

fn cloud(rng: &mut Stream, n: usize) -> PointCloud {
    let coords = (0..n).map(|_| scale(unit(rng), rng.random_range(0.3..1.0))).collect();
    let normals = (0..n).map(|_| unit(rng)).collect();
    PointCloud::new(coords, Some(normals), None, Some(0)).unwrap()
}

fn build<T: Real>(config: NetworkConfig, seed: u64) -> (ParamStore<T>, Network) {
    let mut store = ParamStore::new();
    let net = Network::build(config, &mut store).unwrap();
    he_init(&mut store, &mut stream(seed, &[]));
    (store, net)
}

fn logits(store: &ParamStore<f64>, net: &Network, hs: &[&Hierarchy], training: bool) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let out = net.classify(&mut tape, hs, training, &mut stream(0, &[])).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn presets_validate() {
    NetworkConfig::desk_classifier(4, RelationKind::Full).validate().unwrap();
    NetworkConfig::rotation_robust_classifier(4).validate().unwrap();
    NetworkConfig::desk_segmenter(Task::Segmentation, 3, 5).validate().unwrap();
    NetworkConfig::desk_segmenter(Task::NormalEstimation, 3, 0).validate().unwrap();
    NetworkConfig::miniature(3).validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = NetworkConfig::miniature(3);
    c.layers[1].points = 16;
    assert!(c.validate().is_err());
    let mut c = NetworkConfig::miniature(3);
    c.layers[1].conv.in_channels = 5;
    assert!(c.validate().is_err());
    let mut c = NetworkConfig::miniature(3);
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    let mut c = NetworkConfig::desk_segmenter(Task::Segmentation, 3, 0);
    c.fp_widths.pop();
    assert!(c.validate().is_err());
    let c = NetworkConfig::desk_segmenter(Task::NormalEstimation, 4, 0);
    assert!(c.validate().is_err());
}

#[test]
fn hierarchy_shapes_follow_the_config() {
    let config = NetworkConfig::miniature(3);
    let (_, net) = build::<f64>(config, 1);
    let c = cloud(&mut stream(2, &[]), 32);
    let h = net.prepare(&c, &mut stream(3, &[])).unwrap();
    let sizes: Vec<usize> = h.levels.iter().map(|l| l.len()).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4]);
    for (l, g) in h.layers.iter().enumerate() {
        assert_eq!(g.input_points, sizes[l]);
        assert_eq!(g.centroids.len(), sizes[l + 1]);
    }
    assert!(h.levels[1].has_normals());
}

#[test]
fn sparse_clouds_shrink_early_layers() {
    let (_, net) = build::<f64>(NetworkConfig::miniature(3), 1);
    let c = cloud(&mut stream(2, &[]), 3);
    assert!(net.prepare(&c, &mut stream(3, &[])).is_err());
    let sparse = net.prepare(&cloud(&mut stream(2, &[]), 10), &mut stream(3, &[])).unwrap();
    let sizes: Vec<usize> = sparse.levels.iter().map(|l| l.len()).collect();
    assert_eq!(sizes, vec![10, 10, 8, 4]);
}

#[test]
fn classifier_output_shape_and_finiteness() {
    let (store, net) = build::<f64>(NetworkConfig::miniature(5), 4);
    let clouds: Vec<PointCloud> = (0..3).map(|i| cloud(&mut stream(5, &[i]), 32)).collect();
    let hs = net.prepare_batch(&clouds, 6, Exec::Sequential).unwrap();
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let mut tape = Tape::new(&store);
    let out = net.classify(&mut tape, &refs, true, &mut stream(0, &[])).unwrap();
    assert_eq!(tape.shape(out), &[3, 5]);
    assert!(tape.value(out).iter().all(|v| v.is_finite()));
    let single = logits(&store, &net, &refs[..1], false);
    assert_eq!(single.len(), 5);
}

#[test]
fn inference_logits_do_not_depend_on_batch_company() {
    let (store, net) = build::<f64>(NetworkConfig::miniature(3), 7);
    let clouds: Vec<PointCloud> = (0..3).map(|i| cloud(&mut stream(8, &[i]), 32)).collect();
    let hs = net.prepare_batch(&clouds, 9, Exec::Sequential).unwrap();
    let all = logits(&store, &net, &hs.iter().collect::<Vec<_>>(), false);
    for (b, h) in hs.iter().enumerate() {
        let one = logits(&store, &net, &[h], false);
        assert_eq!(one, all[b * 3..(b + 1) * 3]);
    }
}

#[test]
fn parallel_and_sequential_preparation_agree() {
    let (_, net) = build::<f64>(NetworkConfig::miniature(3), 7);
    let clouds: Vec<PointCloud> = (0..4).map(|i| cloud(&mut stream(8, &[i]), 32)).collect();
    let a = net.prepare_batch(&clouds, 9, Exec::Sequential).unwrap();
    let b = net.prepare_batch(&clouds, 9, Exec::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.layers, y.layers);
    }
}

#[test]
fn permuting_input_points_keeps_logits_bitwise() {
    let (store, net) = build::<f64>(NetworkConfig::miniature(3), 10);
    let c = cloud(&mut stream(11, &[]), 32);
    let base = logits(&store, &net, &[&net.prepare(&c, &mut stream(12, &[])).unwrap()], false);
    let mut rng = stream(13, &[]);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..32).collect();
        for i in (1..32).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p = c.select(&perm);
        let out = logits(&store, &net, &[&net.prepare(&p, &mut stream(12, &[])).unwrap()], false);
        assert_eq!(out, base);
    }
}

#[test]
fn miniature_network_gradients_match_finite_differences() {
    let (mut store, net) = build::<f64>(NetworkConfig::miniature(3), 14);
    jitter_offsets(&mut store, &mut stream(14, &[1]), 0.1);
    let clouds: Vec<PointCloud> = (0..2).map(|i| cloud(&mut stream(15, &[i]), 32)).collect();
    let hs = net.prepare_batch(&clouds, 16, Exec::Sequential).unwrap();
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let report = check_params(
        &store,
        |s| {
            let mut tape = Tape::new(s);
            let out = net.classify(&mut tape, &refs, true, &mut stream(17, &[]))?;
            let loss = tape.softmax_cross_entropy(out, &[0, 2])?;
            let g = tape.backward(loss)?;
            Ok::<_, Error>((tape.value(loss)[0], g))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn dropout_only_acts_in_training() {
    let mut config = NetworkConfig::miniature(3);
    config.dropout = 0.5;
    let (store, net) = build::<f64>(config, 18);
    let h = net.prepare(&cloud(&mut stream(19, &[]), 32), &mut stream(20, &[])).unwrap();
    let h2 = net.prepare(&cloud(&mut stream(19, &[1]), 32), &mut stream(20, &[])).unwrap();
    let a = logits(&store, &net, &[&h, &h2], false);
    let b = logits(&store, &net, &[&h, &h2], false);
    assert_eq!(a, b);
    let mut t1 = Tape::new(&store);
    let o1 = net.classify(&mut t1, &[&h, &h2], true, &mut stream(1, &[])).unwrap();
    let mut t2 = Tape::new(&store);
    let o2 = net.classify(&mut t2, &[&h, &h2], true, &mut stream(2, &[])).unwrap();
    assert_ne!(t1.value(o1), t2.value(o2));
}

#[test]
fn interpolation_weights_are_normalised() {
    let mut rng = stream(21, &[]);
    let fine: Vec<Vec3> = (0..40).map(|_| unit(&mut rng)).collect();
    let coarse: Vec<Vec3> = fine[..7].to_vec();
    let interp = interpolation_weights(&fine, &coarse).unwrap();
    assert_eq!(interp.k, 3);
    for row in interp.weights.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&w| w >= 0.0));
    }
}

#[test]
fn coincident_point_takes_its_coarse_value() {
    let coarse = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let interp = interpolation_weights(&[[1.0, 0.0, 0.0]], &coarse).unwrap();
    assert_eq!(interp.indices[0], 1);
    assert!(interp.weights[0] > 1.0 - 1e-7);
}

#[test]
fn fewer_than_three_coarse_points() {
    let interp = interpolation_weights(&[[0.2, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(interp.k, 1);
    assert_eq!(interp.weights, vec![1.0]);
    assert!(interpolation_weights(&[[0.0; 3]], &[]).is_err());
}

#[test]
fn propagation_preserves_constants_before_mixing() {
    let mut store = ParamStore::<f64>::new();
    let mix = Dense::register(&mut store, "mix", 2, 2, false, false).unwrap();
    let w = store.find("mix.weight").unwrap();
    store.get_mut(w).value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut rng = stream(22, &[]);
    let fine: Vec<Vec3> = (0..20).map(|_| unit(&mut rng)).collect();
    let coarse: Vec<Vec3> = fine[..5].to_vec();
    let mut tape = Tape::new(&store);
    let feats = tape.constant(Tensor::new(vec![5, 2], [3.5, -1.25].repeat(5)).unwrap());
    let out = feature_propagation(&mut tape, &[&fine], &[&coarse], feats, None, &mix, false).unwrap();
    for row in tape.value(out).chunks(2) {
        assert!((row[0] - 3.5).abs() < 1e-12 && (row[1] + 1.25).abs() < 1e-12);
    }
}

#[test]
fn segmenter_and_normal_heads() {
    let mut rng = stream(23, &[]);
    let clouds: Vec<PointCloud> = (0..2).map(|_| cloud(&mut rng, 256)).collect();

    let (store, net) = build::<f64>(NetworkConfig::desk_segmenter(Task::Segmentation, 4, 2), 24);
    let hs = net.prepare_batch(&clouds, 25, Exec::Sequential).unwrap();
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let mut tape = Tape::new(&store);
    let out = net.segment(&mut tape, &refs, Some(&[0, 1]), true, &mut rng).unwrap();
    assert_eq!(tape.shape(out), &[512, 4]);
    assert!(net.segment(&mut tape, &refs, None, true, &mut rng).is_err());
    assert!(net.segment(&mut tape, &refs, Some(&[0, 2]), true, &mut rng).is_err());
    assert!(net.classify(&mut tape, &refs, true, &mut rng).is_err());

    let (store, net) = build::<f64>(NetworkConfig::desk_segmenter(Task::NormalEstimation, 3, 0), 26);
    let hs = net.prepare_batch(&clouds, 27, Exec::Sequential).unwrap();
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let mut tape = Tape::new(&store);
    let out = net.normals(&mut tape, &refs, false, &mut rng).unwrap();
    assert_eq!(tape.shape(out), &[512, 3]);
    for row in tape.value(out).chunks(3) {
        assert!((norm([row[0], row[1], row[2]]) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn segmenter_gradients_match_finite_differences() {
    let mut config = NetworkConfig::miniature(3);
    config.task = Task::Segmentation;
    config.fc_widths.clear();
    config.fp_widths = vec![8, 8, 6];
    config.onehot_classes = 2;
    let (mut store, net) = build::<f64>(config, 28);
    jitter_offsets(&mut store, &mut stream(28, &[1]), 0.1);
    let clouds: Vec<PointCloud> = (0..2).map(|i| cloud(&mut stream(29, &[i]), 32)).collect();
    let hs = net.prepare_batch(&clouds, 30, Exec::Sequential).unwrap();
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let targets: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let report = check_params(
        &store,
        |s| {
            let mut tape = Tape::new(s);
            let out = net.segment(&mut tape, &refs, Some(&[1, 0]), true, &mut stream(31, &[]))?;
            let loss = tape.softmax_cross_entropy(out, &targets)?;
            let g = tape.backward(loss)?;
            Ok::<_, Error>((tape.value(loss)[0], g))
        },
        GradCheckOptions {
            max_per_tensor: Some(12),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn task_and_fps_names_round_trip() {
    for t in [Task::Classification, Task::Segmentation, Task::NormalEstimation] {
        assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
    }
    for m in [FpsStartMode::Geometric, FpsStartMode::First, FpsStartMode::Random] {
        assert_eq!(m.to_string().parse::<FpsStartMode>().unwrap(), m);
    }
    assert!("bogus".parse::<Task>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn interpolated_points_stay_in_the_hull(seed in 0u64..1000) {
        let mut rng = stream(seed, &[]);
        let fine: Vec<Vec3> = (0..16).map(|_| unit(&mut rng)).collect();
        let coarse: Vec<Vec3> = (0..6).map(|_| unit(&mut rng)).collect();
        let interp = interpolation_weights(&fine, &coarse).unwrap();
        for r in 0..fine.len() {
            for axis in 0..3 {
                let vals: Vec<f64> = (0..3).map(|j| coarse[interp.indices[r * 3 + j]][axis]).collect();
                let v: f64 = (0..3).map(|j| interp.weights[r * 3 + j] * vals[j]).sum();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

