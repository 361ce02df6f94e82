//! The finite-difference suite: every graph primitive probed individually,
//! plus the end-to-end segmentation graph probed through its parameters.

use crate::error::{PipelineError, TensorError};
use crate::gradcheck::{
    check_target, check_target_floored, fuzz_tensor, loss_weights, FdReport, FnTarget,
    ModuleTarget,
};
use crate::graph::{Graph, Labels, NodeId};
use crate::layers::{batch_moments, Phase};
use crate::model::{ModelConfig, SegModel, Variant};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct SuiteRow {
    pub name: String,
    pub report: FdReport,
}

fn check<F>(
    rows: &mut Vec<SuiteRow>,
    name: &str,
    inputs: Vec<(String, Tensor<f64>)>,
    build: F,
) -> Result<(), TensorError>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut target = FnTarget::new(inputs, build);
    let report = check_target(&mut target, 1e-4, 48, 0x5eed)?;
    rows.push(SuiteRow {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Weighted sum to a scalar: random positive weights break the permutation
/// symmetries a plain sum would leave unchecked.
fn wsum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    let w = g.leaf(loss_weights(g.value(y).shape(), seed));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn t(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    fuzz_tensor(shape, lo, hi, seed)
}

/// One FD check per primitive, including the awkward geometry variants of
/// convolution and both batch-norm statistics modes.
pub fn primitive_reports(seed: u64) -> Result<Vec<SuiteRow>, TensorError> {
    let mut rows = Vec::new();
    let s4 = Shape::new(1, 2, 3, 4);

    check(
        &mut rows,
        "add",
        vec![
            ("x".into(), t(s4, -1.0, 1.0, seed)),
            ("y".into(), t(s4, -1.0, 1.0, seed ^ 1)),
        ],
        move |g, ids| {
            let z = g.add(ids[0], ids[1])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "mul",
        vec![
            ("x".into(), t(s4, -1.0, 1.0, seed ^ 2)),
            ("y".into(), t(s4, -1.0, 1.0, seed ^ 3)),
        ],
        move |g, ids| {
            let z = g.mul(ids[0], ids[1])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "scale",
        vec![("x".into(), t(s4, -1.0, 1.0, seed ^ 4))],
        move |g, ids| {
            let z = g.scale(ids[0], 0.7)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "mul_scalar",
        vec![
            ("x".into(), t(s4, -1.0, 1.0, seed ^ 5)),
            ("s".into(), t(Shape::scalar(), 0.2, 0.9, seed ^ 6)),
        ],
        move |g, ids| {
            let z = g.mul_scalar(ids[0], ids[1])?;
            wsum(g, z, seed)
        },
    )?;

    // Keep every input a safe distance from the kink so the central
    // difference never straddles it.
    let off_kink = t(s4, -1.0, 1.0, seed ^ 7).map(|v| if v.abs() < 0.1 { v + 0.25 } else { v });
    check(&mut rows, "relu", vec![("x".into(), off_kink)], move |g, ids| {
        let z = g.relu(ids[0])?;
        wsum(g, z, seed)
    })?;

    check(
        &mut rows,
        "sigmoid",
        vec![("x".into(), t(s4, -2.0, 2.0, seed ^ 8))],
        move |g, ids| {
            let z = g.sigmoid(ids[0])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "matmul",
        vec![
            ("a".into(), t(Shape::mat(3, 4), -1.0, 1.0, seed ^ 9)),
            ("b".into(), t(Shape::mat(4, 2), -1.0, 1.0, seed ^ 10)),
        ],
        move |g, ids| {
            let z = g.matmul(ids[0], ids[1])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "transpose",
        vec![("x".into(), t(Shape::mat(3, 5), -1.0, 1.0, seed ^ 11))],
        move |g, ids| {
            let z = g.transpose_mat(ids[0])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "softmax_rows",
        vec![("x".into(), t(Shape::mat(4, 6), -2.0, 2.0, seed ^ 12))],
        move |g, ids| {
            let z = g.softmax_rows(ids[0])?;
            wsum(g, z, seed)
        },
    )?;

    for (name, xs, ws, bias, stride, pad, dilation, salt) in [
        ("conv2d 3x3", Shape::new(2, 3, 6, 6), Shape::new(4, 3, 3, 3), true, 1, 1, 1, 13u64),
        ("conv2d stride 2", Shape::new(1, 3, 7, 7), Shape::new(2, 3, 3, 3), false, 2, 1, 1, 17),
        ("conv2d dilated", Shape::new(1, 2, 8, 8), Shape::new(3, 2, 3, 3), true, 1, 2, 2, 21),
        ("conv2d 1x1", Shape::new(1, 4, 5, 5), Shape::new(6, 4, 1, 1), true, 1, 0, 1, 25),
        ("conv2d 7x7 stride 2", Shape::new(1, 3, 16, 16), Shape::new(4, 3, 7, 7), false, 2, 3, 1, 29),
    ] {
        let mut inputs = vec![
            ("x".to_string(), t(xs, -1.0, 1.0, seed ^ salt)),
            ("w".to_string(), t(ws, -0.5, 0.5, seed ^ (salt + 1))),
        ];
        if bias {
            inputs.push((
                "b".to_string(),
                t(Shape::new(1, ws.b, 1, 1), -0.3, 0.3, seed ^ (salt + 2)),
            ));
        }
        check(&mut rows, name, inputs, move |g, ids| {
            let b = if bias { Some(ids[2]) } else { None };
            let z = g.conv2d(ids[0], ids[1], b, stride, pad, dilation)?;
            wsum(g, z, seed ^ salt)
        })?;
    }

    let bn_shapes = (
        Shape::new(2, 3, 4, 4),
        Shape::new(1, 3, 1, 1),
        Shape::new(1, 3, 1, 1),
    );
    check(
        &mut rows,
        "batchnorm batch-stats",
        vec![
            ("x".into(), t(bn_shapes.0, -1.0, 1.0, seed ^ 33)),
            ("gamma".into(), t(bn_shapes.1, 0.5, 1.5, seed ^ 34)),
            ("beta".into(), t(bn_shapes.2, -0.5, 0.5, seed ^ 35)),
        ],
        move |g, ids| {
            // Recompute the moments from the nudged input, exactly as the
            // batch-norm layer does in training phases.
            let (mean, var) = batch_moments(g.value(ids[0]));
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect();
            let z = g.batchnorm(ids[0], ids[1], ids[2], mean, inv_std, true)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "batchnorm frozen-stats",
        vec![
            ("x".into(), t(bn_shapes.0, -1.0, 1.0, seed ^ 36)),
            ("gamma".into(), t(bn_shapes.1, 0.5, 1.5, seed ^ 37)),
            ("beta".into(), t(bn_shapes.2, -0.5, 0.5, seed ^ 38)),
        ],
        move |g, ids| {
            let mean = vec![0.1, -0.2, 0.3];
            let inv_std = vec![0.9, 1.1, 1.3];
            let z = g.batchnorm(ids[0], ids[1], ids[2], mean, inv_std, false)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "avg_pool 2s2",
        vec![("x".into(), t(Shape::new(1, 3, 6, 6), -1.0, 1.0, seed ^ 39))],
        move |g, ids| {
            let z = g.avg_pool2d(ids[0], 2, 2)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "avg_pool 3s1",
        vec![("x".into(), t(Shape::new(1, 2, 5, 5), -1.0, 1.0, seed ^ 40))],
        move |g, ids| {
            let z = g.avg_pool2d(ids[0], 3, 1)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "bilinear up",
        vec![("x".into(), t(Shape::new(1, 2, 3, 5), -1.0, 1.0, seed ^ 41))],
        move |g, ids| {
            let z = g.bilinear_resize(ids[0], 7, 6)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "bilinear down",
        vec![("x".into(), t(Shape::new(1, 2, 6, 6), -1.0, 1.0, seed ^ 42))],
        move |g, ids| {
            let z = g.bilinear_resize(ids[0], 4, 3)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "crop_hw",
        vec![("x".into(), t(Shape::new(1, 2, 5, 6), -1.0, 1.0, seed ^ 43))],
        move |g, ids| {
            let z = g.crop_hw(ids[0], 1, 2, 3, 3)?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "reshape",
        vec![("x".into(), t(s4, -1.0, 1.0, seed ^ 44))],
        move |g, ids| {
            let z = g.reshape(ids[0], Shape::mat(6, 4))?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "batch slice+concat",
        vec![("x".into(), t(Shape::new(3, 2, 2, 2), -1.0, 1.0, seed ^ 45))],
        move |g, ids| {
            let a = g.slice_batch(ids[0], 2)?;
            let b = g.slice_batch(ids[0], 0)?;
            let c = g.slice_batch(ids[0], 1)?;
            let z = g.concat_batch(&[a, b, c])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "mean_hw",
        vec![("x".into(), t(Shape::new(2, 3, 4, 5), -1.0, 1.0, seed ^ 46))],
        move |g, ids| {
            let z = g.mean_hw(ids[0])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "scale_channels",
        vec![
            ("x".into(), t(Shape::new(2, 3, 4, 4), -1.0, 1.0, seed ^ 47)),
            ("gate".into(), t(Shape::new(2, 3, 1, 1), 0.1, 1.0, seed ^ 48)),
        ],
        move |g, ids| {
            let z = g.scale_channels(ids[0], ids[1])?;
            wsum(g, z, seed)
        },
    )?;

    check(
        &mut rows,
        "sum_all",
        vec![("x".into(), t(Shape::new(1, 1, 3, 3), -1.0, 1.0, seed ^ 49))],
        move |g, ids| g.sum_all(ids[0]),
    )?;

    let ce_shape = Shape::new(2, 3, 4, 4);
    let mut lr = ChaCha8Rng::seed_from_u64(seed ^ 50);
    let label_data: Vec<u8> = (0..2 * 4 * 4).map(|_| lr.gen_range(0..3u8)).collect();
    let labels = Labels::new(2, 4, 4, label_data)?;
    check(
        &mut rows,
        "cross_entropy",
        vec![("logits".into(), t(ce_shape, -2.0, 2.0, seed ^ 51))],
        move |g, ids| g.cross_entropy(ids[0], &labels),
    )?;

    Ok(rows)
}

/// FD over every trainable parameter of the full segmentation model:
/// image -> encoder -> neck -> decoder -> cross-entropy.
///
/// Batch statistics stay live (`train_frozen`), so the check covers the
/// moment-dependent batch-norm backward. The tiny step keeps central
/// differences clear of ReLU kinks; the denominator floor turns the check
/// into an absolute one for near-zero gradients, where a relative ratio
/// would only amplify roundoff.
pub fn model_report(
    variant: Variant,
    sample_per_group: usize,
    seed: u64,
) -> Result<FdReport, PipelineError> {
    let config = ModelConfig {
        variant,
        init_seed: seed,
        ..ModelConfig::default()
    };
    config.validate()?;
    let mut model: SegModel<f64> = SegModel::new(config)?;
    let image = fuzz_tensor(Shape::new(2, 3, 32, 32), 0.05, 0.95, seed ^ 0xA1);
    let mut lr = ChaCha8Rng::seed_from_u64(seed ^ 0xB2);
    let label_data: Vec<u8> = (0..2 * 32 * 32).map(|_| lr.gen_range(0..2u8)).collect();
    let labels = Labels::new(2, 32, 32, label_data)?;
    let mut target = ModuleTarget::new(&mut model, move |g, m| {
        let x = g.leaf(image.clone());
        let out = m.forward(g, x, Phase::train_frozen())?;
        g.cross_entropy(out.logits, &labels)
    });
    Ok(check_target_floored(
        &mut target,
        1e-6,
        sample_per_group,
        seed,
        1e-2,
    )?)
}
