//! Gradient check cases shared by the gradient tests and the acceptance run.

use rand::Rng;
use tabseq_core::codec::{build_structure_vocab, Task, Vocab};
use tabseq_core::image::{batch_tensor, RasterImage};
use tabseq_core::model::{EncoderConfig, TaskConfig, TaskModel};
use tabseq_core::nn::{self, Graph};
use tabseq_core::tensor::{ConvGeom, Tensor};

use super::{check_inputs, check_params, rng};

/// One checked case: primitive name, seed, worst relative error.
pub type Case = (&'static str, u64, f64);

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Values bounded away from zero so kinks are never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v = 0.05f32.copysign(*v);
        }
    });
    t
}

pub fn elementwise() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..12 {
        let a = randn(&[3, 4], seed);
        let b = randn(&[3, 4], seed + 100);
        let c = randn(&[4], seed + 200);
        out.push((
            "add",
            seed,
            check_inputs(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        ));
        out.push((
            "sub",
            seed,
            check_inputs(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        ));
        out.push((
            "mul",
            seed,
            check_inputs(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        ));
        out.push((
            "scale",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7)),
        ));
        out.push((
            "add_scalar",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 0.3)),
        ));
        out.push((
            "sum",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.sum(v[0])),
        ));
        out.push((
            "mean",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.mean(v[0])),
        ));
        out.push((
            "mse",
            seed,
            check_inputs(&[a.clone(), b], |t, v| t.mse(v[0], v[1])),
        ));
        out.push((
            "add_bcast",
            seed,
            check_inputs(&[a, c], |t, v| t.add_bcast(v[0], v[1])),
        ));
    }
    out
}

pub fn activations() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..12 {
        let a = away_from_zero(&[2, 5], seed);
        out.push((
            "relu",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.relu(v[0])),
        ));
        out.push((
            "gelu",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.gelu(v[0])),
        ));
        out.push((
            "sigmoid",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.sigmoid(v[0])),
        ));
        out.push(("softmax", seed, check_inputs(&[a], |t, v| t.softmax(v[0]))));
    }
    out
}

pub fn products() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..12 {
        let mut r = rng(seed);
        let (m, k, n) = (
            r.random_range(1..5),
            r.random_range(1..5),
            r.random_range(1..5),
        );
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed + 1);
        out.push((
            "matmul",
            seed,
            check_inputs(&[a, b], |t, v| t.matmul(v[0], v[1])),
        ));
        let a = randn(&[2, m, k], seed + 2);
        let b = randn(&[2, k, n], seed + 3);
        out.push(("bmm", seed, check_inputs(&[a, b], |t, v| t.bmm(v[0], v[1]))));
    }
    out
}

pub fn layout() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..10 {
        let a = randn(&[2, 3, 4], seed);
        out.push((
            "permute",
            seed,
            check_inputs(std::slice::from_ref(&a), |t, v| t.permute(v[0], &[2, 0, 1])),
        ));
        out.push((
            "reshape",
            seed,
            check_inputs(&[a], |t, v| t.reshape(v[0], &[6, 4])),
        ));
        let table = randn(&[5, 3], seed + 1);
        out.push((
            "embedding",
            seed,
            check_inputs(&[table], |t, v| t.embedding(v[0], &[4, 0, 4, 2])),
        ));
        let img = randn(&[1, 2, 3, 2], seed + 2);
        out.push((
            "gather",
            seed,
            check_inputs(std::slice::from_ref(&img), |t, v| {
                t.gather(v[0], vec![5, 0, 5, 11, 3], &[5])
            }),
        ));
        out.push((
            "pad_replicate",
            seed,
            check_inputs(std::slice::from_ref(&img), |t, v| {
                nn::pad_replicate(t, v[0], 2)
            }),
        ));
        out.push((
            "upsample_nearest",
            seed,
            check_inputs(&[img], |t, v| nn::upsample_nearest(t, v[0], 2)),
        ));
    }
    out
}

pub fn normalization_and_loss() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..12 {
        let x = randn(&[3, 6], seed);
        let g = randn(&[6], seed + 1);
        let b = randn(&[6], seed + 2);
        out.push((
            "layer_norm",
            seed,
            check_inputs(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ));
        let logits = randn(&[4, 5], seed + 3);
        let mask = [true, false, true, true];
        out.push((
            "cross_entropy",
            seed,
            check_inputs(&[logits], |t, v| {
                t.cross_entropy(v[0], &[1, 4, 0, 2], Some(&mask))
            }),
        ));
    }
    out
}

pub fn convolutions() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..10 {
        let mut r = rng(seed);
        let geom = ConvGeom::new(r.random_range(1..3), r.random_range(0..2));
        let x = randn(&[2, 2, 5, 5], seed);
        let w = randn(&[3, 2, 3, 3], seed + 1);
        let b = randn(&[3], seed + 2);
        out.push((
            "conv2d",
            seed,
            check_inputs(&[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom)),
        ));
        let x = randn(&[1, 3, 3, 3], seed + 3);
        let w = randn(&[3, 2, 4, 4], seed + 4);
        let b = randn(&[2], seed + 5);
        let geom = ConvGeom::new(2, 1);
        out.push((
            "conv_transpose2d",
            seed,
            check_inputs(&[x, w, b], |t, v| {
                t.conv_transpose2d(v[0], v[1], Some(v[2]), geom)
            }),
        ));
    }
    out
}

pub fn all_primitives() -> Vec<Case> {
    [
        elementwise(),
        activations(),
        products(),
        layout(),
        normalization_and_loss(),
        convolutions(),
    ]
    .concat()
}

/// Width-16 model with one encoder and one decoder layer, no dropout.
pub fn composed_model(seed: u64) -> TaskModel {
    let encoder = EncoderConfig {
        layers: 1,
        heads: 2,
        width: 16,
        image_height: 32,
        image_width: 32,
        dropout: 0.0,
        ..EncoderConfig::tiny()
    };
    let config = TaskConfig {
        decoder_layers: 1,
        max_len: 8,
        ..TaskConfig::new(Task::Structure, encoder)
    };
    TaskModel::new(config, build_structure_vocab(), seed).expect("model")
}

/// Teacher-forced loss of the composed model, probing `per_param` entries
/// of every parameter.
pub fn composed(seed: u64, per_param: usize) -> f64 {
    let model = composed_model(seed);
    let mut r = rng(seed ^ 0x1111);
    let pixels: Vec<f32> = (0..32 * 32 * 3).map(|_| r.random::<f32>()).collect();
    let image = RasterImage::new(32, 32, 3, pixels).expect("image");
    let v = model.vocab.len() as u32;
    let target: Vec<u32> = (0..4)
        .map(|_| r.random_range(Vocab::SPECIALS.len() as u32..v))
        .collect();
    let (inputs, outs, mask) = model.teacher_batch(&[&target]).expect("batch");
    check_params(&model.params, per_param, |p| {
        let mut g = Graph::eval(p);
        let x = g.tape.constant(batch_tensor(&[&image])?);
        let m = model.encode_var(&mut g, x)?;
        let logits = model.decode_var(&mut g, m, &inputs)?;
        let loss = g.tape.cross_entropy(logits, &outs, Some(&mask))?;
        Ok((g.tape, loss))
    })
}
