//! Finite-difference checks of every tape operation, one RS-Conv layer per
//! relation kind, and the miniature classifier and segmenter.

use rand::Rng;

use super::{check_inputs, check_params, jitter_offsets, GradCheckOptions, GradCheckReport};
use crate::conv::{prepare_layer, rs_conv_forward, LayerGeometry, LayerInput, RSConvLayerConfig, RSConvLayerParams};
use crate::data::{generate, Family, ShapeSpec};
use crate::geometry::{PointCloud, RelationKind, ScaleSpec};
use crate::networks::{Hierarchy, Network, NetworkConfig, Task};
use crate::rng::{stream, Stream};
use crate::tensor::{ParamStore, ReduceKind, Tape, Tensor, Var};
use crate::train::he_init;
use crate::{Error, Exec, Result};

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Values bounded away from zero, for checks across the ReLU kink.
fn off_zero(rng: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn unit_rows(rng: &mut Stream, rows: usize) -> Tensor<f64> {
    let mut t = random(rng, &[rows, 3]);
    for row in t.data_mut().chunks_mut(3) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Weights the output with a fixed random probe so that the checked scalar
/// depends on every output entry differently.
fn probed(tape: &mut Tape<'_, f64>, out: Var, probe_seed: u64) -> Result<Var, crate::tensor::TensorError> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random(&mut stream(probe_seed, &[]), &shape));
    tape.mul(out, w)
}

fn shape_cloud(family: Family, seed: u64, points: usize) -> Result<PointCloud> {
    Ok(generate(&ShapeSpec { family, points, seed })?.normalize_global())
}

fn op_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = stream(seed, &[1]);
    let mut out = Vec::new();
    let mut push = |name: &str, r: crate::tensor::Result<GradCheckReport>| -> Result<()> {
        out.push(SuiteEntry {
            name: name.into(),
            report: r?,
        });
        Ok(())
    };

    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
    push("matmul", check_inputs(&[a, b], |t, v| t.matmul(v[0], v[1]), opts))?;
    let (a, row, col) = (random(&mut rng, &[4, 3]), random(&mut rng, &[1, 3]), random(&mut rng, &[4, 1]));
    push(
        "add",
        check_inputs(&[a.clone(), row], |t, v| {
            let s = t.add(v[0], v[1])?;
            probed(t, s, 11)
        }, opts),
    )?;
    push("mul", check_inputs(&[a, col], |t, v| t.mul(v[0], v[1]), opts))?;
    let x = off_zero(&mut rng, &[5, 3]);
    push(
        "relu",
        check_inputs(&[x.clone()], |t, v| {
            let r = t.relu(v[0]);
            probed(t, r, 12)
        }, opts),
    )?;
    push("scale", check_inputs(&[x], |t, v| Ok(t.scale(v[0], -2.5)), opts))?;
    let x = random(&mut rng, &[2, 4, 3]);
    for (kind, name) in [(ReduceKind::Max, "max"), (ReduceKind::Mean, "mean"), (ReduceKind::Sum, "sum")] {
        for axis in 0..3 {
            push(
                &format!("reduce_{name}_axis{axis}"),
                check_inputs(&[x.clone()], |t, v| {
                    let r = t.reduce(kind, v[0], axis)?;
                    probed(t, r, 13)
                }, opts),
            )?;
        }
    }
    let (a, b) = (random(&mut rng, &[4, 3]), random(&mut rng, &[4, 2]));
    push(
        "gather_slice_concat_stack_reshape",
        check_inputs(&[a, b], |t, v| {
            let g = t.gather_rows(v[0], &[3, 0, 0, 2, 1])?;
            let s = t.slice_rows(g, 1, 5)?;
            let c = t.concat_cols(&[s, v[1]])?;
            let st = t.stack(&[c, c])?;
            let m = probed(t, st, 14)?;
            t.reshape(m, &[8, 5])
        }, opts),
    )?;
    let x = random(&mut rng, &[4, 3]);
    push(
        "normalize_rows",
        check_inputs(&[x.clone()], |t, v| {
            let n = t.normalize_rows(v[0])?;
            probed(t, n, 15)
        }, opts),
    )?;
    push(
        "softmax_cross_entropy",
        check_inputs(&[x.clone()], |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]), opts),
    )?;
    let target = unit_rows(&mut rng, 4);
    push("cosine_loss", check_inputs(&[x], |t, v| t.cosine_loss(v[0], &target), opts))?;

    let mut store = ParamStore::<f64>::new();
    let bn = store.add_batchnorm("bn", 3)?;
    jitter_offsets(&mut store, &mut rng, 0.5);
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.3;
        }
    }
    let x = random(&mut rng, &[5, 3]);
    for training in [true, false] {
        let name = if training { "batchnorm_train" } else { "batchnorm_eval" };
        push(
            name,
            check_params(
                &store,
                |s| {
                    let mut tape = Tape::new(s);
                    let xv = tape.constant(x.clone());
                    let y = tape.batchnorm(xv, bn, training)?;
                    let p = probed(&mut tape, y, 16)?;
                    let flat = tape.reshape(p, &[15])?;
                    let l = tape.reduce(ReduceKind::Sum, flat, 0)?;
                    Ok((tape.value(l)[0], tape.backward(l)?))
                },
                opts,
            ),
        )?;
        push(&format!("{name}_inputs"), check_bn_inputs(&store, bn, &x, training, opts))?;
    }
    Ok(out)
}

/// Batch-norm gradient with respect to its input, computed over a store
/// that holds the layer's scale and shift.
fn check_bn_inputs(
    store: &ParamStore<f64>,
    bn: crate::tensor::BnId,
    x: &Tensor<f64>,
    training: bool,
    opts: GradCheckOptions,
) -> crate::tensor::Result<GradCheckReport> {
    let eval = |x: &Tensor<f64>| -> crate::tensor::Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(store);
        let xv = tape.leaf(x.clone(), true);
        let y = tape.batchnorm(xv, bn, training)?;
        let p = probed(&mut tape, y, 17)?;
        let flat = tape.reshape(p, &[x.numel()])?;
        let l = tape.reduce(ReduceKind::Sum, flat, 0)?;
        let g = tape.backward(l)?;
        Ok((tape.value(l)[0], g.wrt(xv).map(|g| g.to_vec()).unwrap_or_default()))
    };
    let (_, analytic) = eval(x)?;
    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for e in 0..x.numel() {
        let orig = x.data()[e];
        probe.data_mut()[e] = orig + opts.step;
        let plus = eval(&probe)?.0;
        probe.data_mut()[e] = orig - opts.step;
        let minus = eval(&probe)?.0;
        probe.data_mut()[e] = orig;
        report.record(format!("x[{e}]"), analytic[e], (plus - minus) / (2.0 * opts.step), &opts);
    }
    Ok(report)
}

fn layer_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = stream(seed, &[2]);
    let clouds = [
        shape_cloud(Family::Sphere { radius: 1.0 }, seed, 24)?,
        shape_cloud(Family::Torus { major: 1.0, minor: 0.4 }, seed + 1, 24)?,
    ];
    let kinds = [
        RelationKind::DistOnly,
        RelationKind::DistDiff,
        RelationKind::Full,
        RelationKind::NormalCos,
        RelationKind::PlanarFusion,
    ];
    let mut out = Vec::new();
    for kind in kinds {
        let config = RSConvLayerConfig::new(
            4,
            5,
            kind,
            vec![ScaleSpec { radius: 0.5, k: 4 }, ScaleSpec { radius: 0.9, k: 6 }],
        );
        let mut store = ParamStore::new();
        let params = RSConvLayerParams::register(&mut store, "layer", &config)?;
        he_init(&mut store, &mut stream(seed, &[3]));
        jitter_offsets(&mut store, &mut stream(seed, &[4]), 0.1);
        let geoms = clouds
            .iter()
            .map(|c| prepare_layer(&config, c, &[0, 5, 11], false, &mut rng))
            .collect::<Result<Vec<LayerGeometry>>>()?;
        let refs: Vec<&LayerGeometry> = geoms.iter().collect();
        let feats = random(&mut rng, &[48, 4]);
        let report = check_params(
            &store,
            |s| {
                let mut tape = Tape::new(s);
                let x = tape.constant(feats.clone());
                let y = rs_conv_forward(&mut tape, &config, &params, LayerInput::Features(x), &refs, true, None::<&mut Stream>)?;
                let p = probed(&mut tape, y, 18)?;
                let rows = tape.reduce(ReduceKind::Sum, p, 1)?;
                let l = tape.reduce(ReduceKind::Sum, rows, 0)?;
                Ok::<_, Error>((tape.value(l)[0], tape.backward(l)?))
            },
            opts,
        )?;
        out.push(SuiteEntry {
            name: format!("rs_conv_{kind}"),
            report,
        });
    }
    Ok(out)
}

fn network_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let clouds = vec![
        shape_cloud(Family::Cube { half_extent: 1.0, per_face_labels: false }, seed, 32)?,
        shape_cloud(Family::Cylinder { radius: 0.5, height: 1.5 }, seed + 1, 32)?,
    ];
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let net = Network::build(NetworkConfig::miniature(3), &mut store)?;
    he_init(&mut store, &mut stream(seed, &[5]));
    jitter_offsets(&mut store, &mut stream(seed, &[6]), 0.1);
    let hs = net.prepare_batch(&clouds, seed, Exec::Sequential)?;
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let report = check_params(
        &store,
        |s| {
            let mut tape = Tape::new(s);
            let logits = net.classify(&mut tape, &refs, true, &mut stream(seed, &[7]))?;
            let loss = tape.softmax_cross_entropy(logits, &[0, 2])?;
            Ok::<_, Error>((tape.value(loss)[0], tape.backward(loss)?))
        },
        opts,
    )?;
    out.push(SuiteEntry {
        name: "miniature_classifier".into(),
        report,
    });

    let mut config = NetworkConfig::miniature(3);
    config.task = Task::Segmentation;
    config.fc_widths.clear();
    config.fp_widths = vec![8, 8, 6];
    config.onehot_classes = 2;
    let mut store = ParamStore::new();
    let net = Network::build(config, &mut store)?;
    he_init(&mut store, &mut stream(seed, &[8]));
    jitter_offsets(&mut store, &mut stream(seed, &[9]), 0.1);
    let hs = net.prepare_batch(&clouds, seed, Exec::Sequential)?;
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let targets: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let report = check_params(
        &store,
        |s| {
            let mut tape = Tape::new(s);
            let y = net.segment(&mut tape, &refs, Some(&[1, 0]), true, &mut stream(seed, &[10]))?;
            let loss = tape.softmax_cross_entropy(y, &targets)?;
            Ok::<_, Error>((tape.value(loss)[0], tape.backward(loss)?))
        },
        GradCheckOptions {
            max_per_tensor: Some(12),
            ..opts
        },
    )?;
    out.push(SuiteEntry {
        name: "miniature_segmenter".into(),
        report,
    });
    Ok(out)
}

/// Runs every check. Biases are jittered off zero first so that no check
/// sits on a max or ReLU tie.
pub fn run_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut all = op_checks(seed, opts)?;
    all.extend(layer_checks(seed, opts)?);
    all.extend(network_checks(seed, opts)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_in_the_suite_passes() {
        let entries = run_suite(3, GradCheckOptions::default()).unwrap();
        assert!(entries.len() > 20);
        for e in &entries {
            assert!(e.report.passed(), "{}: {:?}", e.name, e.report.failures);
        }
    }
}
