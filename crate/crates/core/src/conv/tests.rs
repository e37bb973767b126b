use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{add, mat_vec, norm, rotation_axis_angle, scale, Plane, Vec3};
use crate::gradcheck::{check_params, GradCheckOptions};
use crate::tensor::Gradients;
use crate::train::he_init;

type Rng8 = ChaCha8Rng;

fn unit(rng: &mut Rng8) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let l = norm(v);
        if l > 0.1 && l < 1.0 {
            return scale(v, 1.0 / l);
        }
    }
}

fn cloud(rng: &mut Rng8, n: usize) -> PointCloud {
    let coords = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let normals = (0..n).map(|_| unit(rng)).collect();
    PointCloud::new(coords, Some(normals), None, None).unwrap()
}

fn layer(kind: RelationKind, c_in: usize, c_out: usize) -> RSConvLayerConfig {
    RSConvLayerConfig::new(
        c_in,
        c_out,
        kind,
        vec![ScaleSpec { radius: 0.5, k: 4 }, ScaleSpec { radius: 0.9, k: 6 }],
    )
}

fn params(config: &RSConvLayerConfig, seed: u64) -> (ParamStore<f64>, RSConvLayerParams) {
    let mut store = ParamStore::new();
    let p = RSConvLayerParams::register(&mut store, "l0", config).unwrap();
    he_init(&mut store, &mut Rng8::seed_from_u64(seed));
    (store, p)
}

fn features(rng: &mut Rng8, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn no_rng() -> Option<&'static mut Rng8> {
    None
}

fn forward(
    store: &ParamStore<f64>,
    config: &RSConvLayerConfig,
    p: &RSConvLayerParams,
    feats: Option<&Tensor<f64>>,
    geoms: &[&LayerGeometry],
    training: bool,
) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let input = match feats {
        Some(f) => LayerInput::Features(tape.constant(f.clone())),
        None => LayerInput::LocalCoords,
    };
    let out = rs_conv_forward(&mut tape, config, p, input, geoms, training, no_rng()).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn config_validation() {
    let mut c = layer(RelationKind::Full, 8, 16);
    assert!(c.validate().is_ok());
    c.relation_mlp_widths = vec![8, 4];
    assert!(c.validate().is_err());
    let mut c = layer(RelationKind::Full, 8, 16);
    c.scales.reverse();
    assert!(c.validate().is_err());
    let mut c = layer(RelationKind::Full, 8, 16);
    c.relation_cut_ratio = 1.0;
    assert!(c.validate().is_err());
    let mut c = layer(RelationKind::Full, 8, 16);
    c.scales = vec![];
    assert!(c.validate().is_err());
    c.scales = vec![ScaleSpec { radius: 0.9, k: 2 }, ScaleSpec { radius: 0.1, k: 2 }];
    c.neighbor_mode = NeighborMode::Knn;
    assert!(c.validate().is_ok());
}

#[test]
fn default_relation_widths() {
    assert_eq!(RSConvLayerConfig::default_relation_widths(3), vec![3, 3, 3]);
    assert_eq!(RSConvLayerConfig::default_relation_widths(128), vec![16, 64, 128]);
}

#[test]
fn zero_mapping_gives_zero_weights() {
    let config = layer(RelationKind::Full, 5, 8);
    let mut store = ParamStore::<f64>::new();
    let p = RSConvLayerParams::register(&mut store, "l", &config).unwrap();
    let mut rng = Rng8::seed_from_u64(1);
    let mut tape = Tape::new(&store);
    let h = tape.constant(features(&mut rng, 12, 10));
    let w = relation_weights(&mut tape, &p, h, false, None).unwrap();
    assert!(tape.value(w).iter().all(|&v| v == 0.0));
}

#[test]
fn relation_weights_shared_and_row_equivariant() {
    let config = layer(RelationKind::Full, 5, 8);
    let (store, p) = params(&config, 2);
    let mut rng = Rng8::seed_from_u64(3);
    let mut rows = features(&mut rng, 6, 10).into_data();
    rows.copy_within(0..10, 50);
    let t = Tensor::new(vec![6, 10], rows.clone()).unwrap();
    let mut tape = Tape::new(&store);
    let h = tape.constant(t);
    let w = relation_weights(&mut tape, &p, h, false, None).unwrap();
    let w = tape.value(w).to_vec();
    assert_eq!(w[..5], w[25..]);

    let perm = [3, 0, 5, 1, 4, 2];
    let permuted: Vec<f64> = perm.iter().flat_map(|&r| rows[r * 10..(r + 1) * 10].to_vec()).collect();
    let mut tape = Tape::new(&store);
    let h = tape.constant(Tensor::new(vec![6, 10], permuted).unwrap());
    let wp = relation_weights(&mut tape, &p, h, false, None).unwrap();
    let wp = tape.value(wp).to_vec();
    for (i, &r) in perm.iter().enumerate() {
        assert_eq!(wp[i * 5..(i + 1) * 5], w[r * 5..(r + 1) * 5]);
    }
}

#[test]
fn relation_weights_errors_and_cut() {
    let config = layer(RelationKind::Full, 5, 8);
    let (store, p) = params(&config, 4);
    let mut rng = Rng8::seed_from_u64(5);
    let mut tape = Tape::new(&store);
    let bad = tape.constant(features(&mut rng, 3, 4));
    assert!(relation_weights(&mut tape, &p, bad, false, None).is_err());
    let h = tape.constant(features(&mut rng, 3, 10));
    let w = relation_weights(&mut tape, &p, h, false, Some(&[false, true, false])).unwrap();
    let w = tape.value(w);
    assert!(w[5..10].iter().all(|&v| v == 0.0));
    assert!(w[..5].iter().any(|&v| v != 0.0));
    assert!(relation_weights(&mut tape, &p, h, false, Some(&[true])).is_err());
}

fn eval_bn(store: &ParamStore<f64>, bn: BnId, x: &mut [f64]) {
    let st = store.bn(bn);
    let (g, b) = (store.get(st.scale).value.data(), store.get(st.shift).value.data());
    for (c, v) in x.iter_mut().enumerate() {
        *v = (*v - st.running_mean[c]) / (st.running_var[c] + 1e-5).sqrt() * g[c] + b[c];
    }
}

fn dense_by_hand(store: &ParamStore<f64>, d: &Dense, x: &[f64]) -> Vec<f64> {
    let w = store.get(d.weight).value.clone();
    let b = store.get(d.bias).value.data();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut y: Vec<f64> = (0..cols).map(|c| b[c] + (0..rows).map(|r| x[r] * w.at(r, c)).sum::<f64>()).collect();
    if let Some(bn) = d.bn {
        eval_bn(store, bn, &mut y);
    }
    if d.relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

#[test]
fn self_neighbourhood_traces_by_hand() {
    let mut config = layer(RelationKind::Full, 4, 6);
    config.scales = vec![ScaleSpec { radius: 0.5, k: 1 }];
    let (mut store, p) = params(&config, 6);
    let mut rng = Rng8::seed_from_u64(7);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let c = PointCloud::from_coords(vec![[0.0; 3]]).unwrap();
    let g = prepare_layer(&config, &c, &[0], false, &mut rng).unwrap();
    assert_eq!(g.scales[0].relations[0], vec![0.0; 10]);
    let f = features(&mut rng, 1, 4);
    let out = forward(&store, &config, &p, Some(&f), &[&g], false);

    let mut m = vec![0.0; 10];
    for d in &p.mapping {
        m = dense_by_hand(&store, d, &m);
    }
    let agg: Vec<f64> = m.iter().zip(f.data()).map(|(a, b)| (a * b).max(0.0)).collect();
    let want = dense_by_hand(&store, &p.raise, &agg);
    for (a, b) in out.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn neighbour_order_does_not_matter_for_max() {
    let config = layer(RelationKind::Full, 4, 8);
    let (store, p) = params(&config, 8);
    let mut rng = Rng8::seed_from_u64(9);
    let c = cloud(&mut rng, 40);
    let f = features(&mut rng, 40, 4);
    let g = prepare_layer(&config, &c, &[0, 7, 21], false, &mut rng).unwrap();
    let base = forward(&store, &config, &p, Some(&f), &[&g], false);
    let mut shuffled = g.clone();
    for s in &mut shuffled.scales {
        let k = s.k;
        for ci in 0..3 {
            let mut order: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let idx: Vec<usize> = order.iter().map(|&o| s.indices[ci * k + o]).collect();
            s.indices[ci * k..(ci + 1) * k].copy_from_slice(&idx);
            for rel in &mut s.relations {
                let h = rel.len() / s.indices.len();
                let block: Vec<f64> = order.iter().flat_map(|&o| rel[(ci * k + o) * h..(ci * k + o + 1) * h].to_vec()).collect();
                rel[ci * k * h..(ci + 1) * k * h].copy_from_slice(&block);
            }
        }
    }
    assert_eq!(forward(&store, &config, &p, Some(&f), &[&shuffled], false), base);
}

#[test]
fn local_frames_make_layer_pose_invariant() {
    let mut rng = Rng8::seed_from_u64(10);
    let config = layer(RelationKind::DistOnly, 3, 8);
    let (store, p) = params(&config, 11);
    for _ in 0..10 {
        let c = cloud(&mut rng, 48);
        let rot = rotation_axis_angle(unit(&mut rng), rng.random_range(0.0..6.28));
        let t = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        let moved = c.rigid_transform(&rot, t);
        let cents = [1, 5, 9, 30];
        let g0 = prepare_layer(&config, &c, &cents, true, &mut Rng8::seed_from_u64(1)).unwrap();
        let g1 = prepare_layer(&config, &moved, &cents, true, &mut Rng8::seed_from_u64(1)).unwrap();
        let a = forward(&store, &config, &p, None, &[&g0], false);
        let b = forward(&store, &config, &p, None, &[&g1], false);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-12), "{x} vs {y}");
        }
    }
}

#[test]
fn batched_forward_matches_single_clouds_in_eval() {
    let mut rng = Rng8::seed_from_u64(12);
    let config = layer(RelationKind::Full, 3, 8);
    let (store, p) = params(&config, 13);
    let clouds: Vec<PointCloud> = (0..3).map(|_| cloud(&mut rng, 30)).collect();
    let geoms: Vec<LayerGeometry> = clouds
        .iter()
        .map(|c| prepare_layer(&config, c, &[0, 3, 4], false, &mut rng).unwrap())
        .collect();
    let refs: Vec<&LayerGeometry> = geoms.iter().collect();
    let all = forward(&store, &config, &p, None, &refs, false);
    for (b, g) in geoms.iter().enumerate() {
        assert_eq!(forward(&store, &config, &p, None, &[g], false), all[b * 24..(b + 1) * 24]);
    }
}

fn layer_loss(
    store: &ParamStore<f64>,
    config: &RSConvLayerConfig,
    p: &RSConvLayerParams,
    feats: &Tensor<f64>,
    geoms: &[&LayerGeometry],
    probe: &Tensor<f64>,
) -> crate::Result<(f64, Gradients<f64>)> {
    let mut tape = Tape::new(store);
    let x = tape.constant(feats.clone());
    let out = rs_conv_forward(&mut tape, config, p, LayerInput::Features(x), geoms, true, no_rng())?;
    let w = tape.constant(probe.clone());
    let prod = tape.mul(out, w)?;
    let rows = tape.reduce(ReduceKind::Sum, prod, 1)?;
    let loss = tape.reduce(ReduceKind::Sum, rows, 0)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss)[0], g))
}

#[test]
fn layer_parameter_gradients_match_finite_differences() {
    let mut rng = Rng8::seed_from_u64(14);
    for kind in [RelationKind::Full, RelationKind::DistOnly, RelationKind::NormalCos, RelationKind::PlanarFusion] {
        let mut config = layer(kind, 4, 5);
        config.aggregation = Aggregation::Max;
        let (store, p) = params(&config, 15);
        let clouds: Vec<PointCloud> = (0..2).map(|_| cloud(&mut rng, 20)).collect();
        let geoms: Vec<LayerGeometry> = clouds
            .iter()
            .map(|c| prepare_layer(&config, c, &[0, 1, 2], false, &mut rng).unwrap())
            .collect();
        let refs: Vec<&LayerGeometry> = geoms.iter().collect();
        let f = features(&mut rng, 40, 4);
        let probe = features(&mut rng, 6, 5);
        let report = check_params(&store, |s| layer_loss(s, &config, &p, &f, &refs, &probe), GradCheckOptions::default())
            .unwrap();
        assert!(report.passed(), "{kind}: {:?}", report.failures);
    }
}

#[test]
fn all_aggregations_and_fusions_run() {
    let mut rng = Rng8::seed_from_u64(16);
    let c = cloud(&mut rng, 30);
    for agg in [Aggregation::Max, Aggregation::Avg, Aggregation::Sum] {
        for fusion in [ScaleFusion::Max, ScaleFusion::Sum] {
            let mut config = layer(RelationKind::Planar(Plane::XZ), 3, 4);
            config.aggregation = agg;
            config.scale_fusion = fusion;
            let (store, p) = params(&config, 17);
            let g = prepare_layer(&config, &c, &[0, 1], false, &mut rng).unwrap();
            let out = forward(&store, &config, &p, None, &[&g], true);
            assert_eq!(out.len(), 8);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn mapping_gradient_equals_sum_of_single_applications() {
    let config = layer(RelationKind::Full, 3, 4);
    let (store, p) = params(&config, 18);
    let mut rng = Rng8::seed_from_u64(19);
    let h = features(&mut rng, 2 * 4, 10);
    let f = features(&mut rng, 2 * 4, 3);
    let grad_of = |rows: std::ops::Range<usize>| {
        let mut tape = Tape::new(&store);
        let n = rows.len();
        let hv = tape.constant(Tensor::new(vec![n, 10], h.data()[rows.start * 10..rows.end * 10].to_vec()).unwrap());
        let fv = tape.constant(Tensor::new(vec![n, 3], f.data()[rows.start * 3..rows.end * 3].to_vec()).unwrap());
        let w = relation_weights(&mut tape, &p, hv, false, None).unwrap();
        let prod = tape.mul(w, fv).unwrap();
        let s = tape.reduce(ReduceKind::Sum, prod, 1).unwrap();
        let loss = tape.reduce(ReduceKind::Sum, s, 0).unwrap();
        tape.backward(loss).unwrap()
    };
    let all = grad_of(0..8);
    let singles: Vec<Gradients<f64>> = (0..8).map(|r| grad_of(r..r + 1)).collect();
    for d in &p.mapping {
        for id in [d.weight, d.bias] {
            let total = all.param(id).unwrap();
            for (e, &g) in total.iter().enumerate() {
                let sum: f64 = singles.iter().map(|s| s.param(id).unwrap()[e]).sum();
                assert!((g - sum).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mapping_gradient_depends_on_centroid_position() {
    let mut config = layer(RelationKind::Full, 3, 4);
    config.scales = vec![ScaleSpec { radius: 2.0, k: 3 }];
    let (store, p) = params(&config, 20);
    let base = vec![[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [0.0, 0.4, 0.2]];
    let mapping_grad = |coords: Vec<Vec3>| {
        let c = PointCloud::from_coords(coords).unwrap();
        let g = prepare_layer(&config, &c, &[0], false, &mut Rng8::seed_from_u64(0)).unwrap();
        let f = Tensor::new(vec![3, 3], vec![0.5, -0.2, 0.9, 0.1, 0.7, -0.4, 0.3, 0.3, 0.8]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(f);
        let out = rs_conv_forward(&mut tape, &config, &p, LayerInput::Features(x), &[&g], false, no_rng()).unwrap();
        let s = tape.reduce(ReduceKind::Sum, out, 1).unwrap();
        let loss = tape.reduce(ReduceKind::Sum, s, 0).unwrap();
        tape.backward(loss).unwrap().param(p.mapping[0].weight).unwrap().to_vec()
    };
    let g0 = mapping_grad(base.clone());
    let mut moved = base;
    moved[0] = add(moved[0], [1e-3, 0.0, 0.0]);
    let g1 = mapping_grad(moved);
    let delta: f64 = g0.iter().zip(&g1).map(|(a, b)| (a - b).abs()).sum();
    assert!(delta > 1e-9, "gradient insensitive to centroid: {delta}");
}

#[test]
fn under_full_neighbourhoods_are_well_defined() {
    let mut config = layer(RelationKind::Full, 3, 4);
    config.scales = vec![ScaleSpec { radius: 0.25, k: 8 }];
    let (store, p) = params(&config, 21);
    let coords: Vec<Vec3> = (0..8).map(|i| [0.1 * i as f64, 0.0, 0.0]).collect();
    let c = PointCloud::from_coords(coords).unwrap();
    let g = prepare_layer(&config, &c, &[0, 3, 7], false, &mut Rng8::seed_from_u64(0)).unwrap();
    assert_eq!(g.scales[0].valid_counts, vec![3, 5, 3]);
    let out = forward(&store, &config, &p, None, &[&g], true);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn relation_cut_zeroes_some_weights_in_training() {
    let mut config = layer(RelationKind::Full, 3, 4);
    config.relation_cut_ratio = 0.5;
    let (store, p) = params(&config, 22);
    let mut rng = Rng8::seed_from_u64(23);
    let c = cloud(&mut rng, 30);
    let g = prepare_layer(&config, &c, &[0, 1, 2, 3], false, &mut rng).unwrap();
    let run = |seed: u64| {
        let mut tape = Tape::new(&store);
        let mut r = Rng8::seed_from_u64(seed);
        let out = rs_conv_forward(&mut tape, &config, &p, LayerInput::LocalCoords, &[&g], true, Some(&mut r)).unwrap();
        tape.value(out).to_vec()
    };
    assert_ne!(run(1), run(2));
    assert_eq!(run(1), run(1));
}

#[test]
fn wrong_feature_shape_is_rejected() {
    let config = layer(RelationKind::Full, 4, 4);
    let (store, p) = params(&config, 24);
    let mut rng = Rng8::seed_from_u64(25);
    let c = cloud(&mut rng, 10);
    let g = prepare_layer(&config, &c, &[0], false, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(features(&mut rng, 9, 4));
    assert!(rs_conv_forward(&mut tape, &config, &p, LayerInput::Features(x), &[&g], false, no_rng()).is_err());
    assert!(rs_conv_forward(&mut tape, &config, &p, LayerInput::LocalCoords, &[&g], false, no_rng()).is_err());
    let c_plain = PointCloud::from_coords(c.coords.clone()).unwrap();
    let nc = layer(RelationKind::NormalCos, 3, 4);
    assert!(prepare_layer(&nc, &c_plain, &[0], false, &mut rng).is_err());
    assert!(prepare_layer(&config, &c_plain, &[0], true, &mut rng).is_err());
}

#[test]
fn grid_conv_counting_and_identity() {
    let out = grid_conv_oracle(&[1.0; 9], &[1.0; 16], 4, 4, 1).unwrap();
    assert_eq!(out, vec![9.0; 4]);
    let mut k = vec![0.0; 9 * 2];
    k[4 * 2] = 1.0;
    k[4 * 2 + 1] = 1.0;
    let mut rng = Rng8::seed_from_u64(26);
    let map: Vec<f64> = (0..5 * 4 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = grid_conv_oracle(&k, &map, 5, 4, 2).unwrap();
    for y in 1..4 {
        for x in 1..3 {
            let i = (y * 4 + x) * 2;
            assert!((out[(y - 1) * 2 + (x - 1)] - (map[i] + map[i + 1])).abs() < 1e-15);
        }
    }
}

#[test]
fn grid_conv_rejects_bad_shapes() {
    assert!(grid_conv_oracle(&[1.0; 9], &[1.0; 4], 2, 2, 1).is_err());
    assert!(grid_conv_oracle(&[1.0; 8], &[1.0; 16], 4, 4, 1).is_err());
    assert!(dense_conv2d(&[1.0; 9], &[1.0; 15], 4, 4, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_grid_conv_matches_dense(seed in any::<u64>(), c in 1usize..5) {
        let mut rng = Rng8::seed_from_u64(seed);
        let k: Vec<f64> = (0..9 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..25 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = grid_conv_oracle(&k, &m, 5, 5, c).unwrap();
        let b = dense_conv2d(&k, &m, 5, 5, c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn prop_sum_aggregation_order_insensitive(seed in any::<u64>()) {
        let mut rng = Rng8::seed_from_u64(seed);
        let mut config = layer(RelationKind::DistDiff, 3, 4);
        config.aggregation = Aggregation::Sum;
        let (store, p) = params(&config, seed);
        let c = cloud(&mut rng, 25);
        let g = prepare_layer(&config, &c, &[0, 1], false, &mut rng).unwrap();
        let mut rev = g.clone();
        for s in &mut rev.scales {
            let (k, rows) = (s.k, s.indices.len());
            let h = s.relations[0].len() / rows;
            for ci in 0..rows / k {
                s.indices[ci * k..(ci + 1) * k].reverse();
                let lc: Vec<f64> = (0..k).rev().flat_map(|o| s.local_coords[(ci * k + o) * 3..(ci * k + o + 1) * 3].to_vec()).collect();
                s.local_coords[ci * k * 3..(ci + 1) * k * 3].copy_from_slice(&lc);
                let rel: Vec<f64> = (0..k).rev().flat_map(|o| s.relations[0][(ci * k + o) * h..(ci * k + o + 1) * h].to_vec()).collect();
                s.relations[0][ci * k * h..(ci + 1) * k * h].copy_from_slice(&rel);
            }
        }
        let a = forward(&store, &config, &p, None, &[&g], false);
        let b = forward(&store, &config, &p, None, &[&rev], false);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn rotated_geometry_differs_without_frames() {
    let mut rng = Rng8::seed_from_u64(27);
    let config = layer(RelationKind::Full, 3, 4);
    let c = cloud(&mut rng, 30);
    let rot = rotation_axis_angle([0.0, 1.0, 0.0], 1.0);
    let moved = c.rigid_transform(&rot, [0.0; 3]);
    let g0 = prepare_layer(&config, &c, &[0], false, &mut Rng8::seed_from_u64(1)).unwrap();
    let g1 = prepare_layer(&config, &moved, &[0], false, &mut Rng8::seed_from_u64(1)).unwrap();
    assert_eq!(g0.scales[0].indices, g1.scales[0].indices);
    let lc = &g1.scales[0].local_coords;
    let back = mat_vec(&rotation_axis_angle([0.0, 1.0, 0.0], -1.0), [lc[3], lc[4], lc[5]]);
    assert!(norm(crate::geometry::sub(back, [g0.scales[0].local_coords[3], g0.scales[0].local_coords[4], g0.scales[0].local_coords[5]])) < 1e-12);
}

#[test]
fn each_batch_norm_is_updated_once_per_forward() {
    // Shared mapping across scales and views must still produce a single
    // set of batch statistics, or running averages mix unlike batches.
    let mut rng = Rng8::seed_from_u64(40);
    for kind in [RelationKind::Full, RelationKind::PlanarFusion] {
        let config = layer(kind, 3, 6);
        let (store, p) = params(&config, 41);
        let c = cloud(&mut rng, 30);
        let g = prepare_layer(&config, &c, &[0, 4, 9, 12], false, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        rs_conv_forward(&mut tape, &config, &p, LayerInput::LocalCoords, &[&g, &g], true, no_rng()).unwrap();
        let mut ids: Vec<usize> = tape.bn_updates().iter().map(|u| u.bn.0).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n, "{kind}: a batch norm was updated more than once");
        assert_eq!(n, store.bn_states().len());
    }
}
