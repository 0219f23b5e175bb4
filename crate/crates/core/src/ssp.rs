//! Masked visual-token pretraining of the linear-projection encoder: about
//! 40% of patch embeddings are swapped for a learned mask vector and the
//! model predicts the frozen VQ-VAE token at each masked position.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{batch_tensor, RasterImage};
use crate::model::encoder::{self, EncoderConfig, EncoderVariant};
use crate::model::save_encoder_checkpoint;
use crate::nn::{self, Graph};
use crate::tensor::{ParamStore, Tensor, Var};
use crate::train::{BatchSampler, OptimConfig, Optimizer, TrainLog};
use crate::vqvae::VqvaeModel;

/// Flatten `image` into `N = HW/P²` rows of `P·P·C` values, patches in
/// row-major order, each patch row-major with channels innermost.
pub fn patchify(image: &RasterImage, p: usize) -> Result<Vec<Vec<f32>>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {h}x{w} not divisible by {p}"),
        ));
    }
    let mut out = Vec::with_capacity((h / p) * (w / p));
    for py in 0..h / p {
        for px in 0..w / p {
            let mut row = Vec::with_capacity(p * p * c);
            for y in 0..p {
                for x in 0..p {
                    row.extend_from_slice(image.pixel(py * p + y, px * p + x));
                }
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for an image of `height × width`.
pub fn unpatchify(
    patches: &[Vec<f32>],
    p: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<RasterImage> {
    if p == 0
        || !height.is_multiple_of(p)
        || !width.is_multiple_of(p)
        || patches.len() != (height / p) * (width / p)
    {
        return Err(Error::shape(
            "unpatchify",
            format!("{} patches for {height}x{width}, P={p}", patches.len()),
        ));
    }
    let mut img = RasterImage::filled(height, width, &vec![0.0; channels]);
    let gw = width / p;
    for (i, row) in patches.iter().enumerate() {
        if row.len() != p * p * channels {
            return Err(Error::shape(
                "unpatchify",
                format!("patch {i} has {} values", row.len()),
            ));
        }
        let (py, px) = (i / gw, i % gw);
        for (j, px_vals) in row.chunks(channels).enumerate() {
            img.set_pixel(py * p + j / p, px * p + j % p, px_vals);
        }
    }
    Ok(img)
}

/// Masked patch positions of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted, unique, in `[0, n)`.
    pub indices: Vec<usize>,
    pub n: usize,
    pub ratio: f32,
}

impl MaskPlan {
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Uniformly choose `round(ratio·n)` positions without replacement.
pub fn sample_mask(n: usize, ratio: f32, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside (0, 1)"
        )));
    }
    let k = (ratio as f64 * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} masks nothing of {n} patches"
        )));
    }
    let mut indices = index::sample(rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(MaskPlan { indices, n, ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SspConfig {
    pub encoder: EncoderConfig,
    pub mask_ratio: f32,
    pub optim: OptimConfig,
}

impl Default for SspConfig {
    fn default() -> Self {
        SspConfig {
            encoder: EncoderConfig::tiny(),
            mask_ratio: 0.4,
            optim: OptimConfig {
                steps: 1000,
                batch_size: 16,
                lr: 1e-3,
                warmup_steps: 50,
                ..OptimConfig::default()
            },
        }
    }
}

/// Encoder, learned mask vector and per-position token head.
#[derive(Clone, Debug)]
pub struct SspModel {
    pub encoder: EncoderConfig,
    pub codebook_size: usize,
    pub params: ParamStore,
}

impl SspModel {
    pub fn new(encoder: EncoderConfig, codebook_size: usize, seed: u64) -> Result<Self> {
        if encoder.variant != EncoderVariant::LinearProjection {
            return Err(Error::InvalidArgument(
                "pretraining uses the linear-projection encoder".into(),
            ));
        }
        if codebook_size < 2 {
            return Err(Error::InvalidArgument(
                "codebook needs at least 2 entries".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_encoder(&mut params, &encoder, &mut rng)?;
        params.insert(
            "ssp.mask",
            Tensor::randn([1, encoder.width], 0.02, &mut rng),
        );
        // Small head keeps the initial prediction close to uniform.
        nn::init_linear(
            &mut params,
            "ssp.head",
            encoder.width,
            codebook_size,
            0.002,
            &mut rng,
        );
        Ok(SspModel {
            encoder,
            codebook_size,
            params,
        })
    }

    /// Head logits `[B*N, K]`. `masked` flags positions of all images in
    /// batch order; their embeddings become the mask vector.
    pub fn logits_var(&self, g: &mut Graph, x: Var, masked: &[bool]) -> Result<Var> {
        let e = encoder::embed(g, x, &self.encoder)?;
        let s = g.shape(e);
        let (b, n, d) = (s[0], s[1], s[2]);
        if masked.len() != b * n {
            return Err(Error::shape(
                "ssp",
                format!("{} mask flags for {b}x{n} patches", masked.len()),
            ));
        }
        let keep: Vec<f32> = masked
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 0.0 } else { 1.0 }, d))
            .collect();
        let keep = g.tape.constant(Tensor::new([b, n, d], keep)?);
        let kept = g.tape.mul(e, keep)?;
        let ind = masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let ind = g.tape.constant(Tensor::new([b * n, 1], ind)?);
        let mv = g.param("ssp.mask")?;
        let fill = g.tape.matmul(ind, mv)?;
        let fill = g.tape.reshape(fill, &[b, n, d])?;
        let mixed = g.tape.add(kept, fill)?;
        let h = encoder::encode_embedded(g, mixed, &self.encoder)?;
        let logits = g.linear(h, "ssp.head")?;
        g.tape.reshape(logits, &[b * n, self.codebook_size])
    }

    /// Masked-position cross-entropy for one image with its token grid.
    pub fn loss(&self, image: &RasterImage, tokens: &[usize], plan: &MaskPlan) -> Result<f32> {
        let mut g = Graph::eval(&self.params);
        let x = g.tape.constant(batch_tensor(&[image])?);
        let flags = plan.flags();
        let l = self.logits_var(&mut g, x, &flags)?;
        if tokens.len() != flags.len() {
            return Err(Error::shape(
                "ssp loss",
                format!("{} tokens for {} patches", tokens.len(), flags.len()),
            ));
        }
        let ce = g.tape.cross_entropy(l, tokens, Some(&flags))?;
        g.tape.value(ce).item()
    }

    /// Encoder-only weights for task-model initialization.
    pub fn export_encoder(&self) -> ParamStore {
        encoder::encoder_params(&self.params)
    }

    pub fn save_encoder(&self, path: impl AsRef<Path>) -> Result<()> {
        save_encoder_checkpoint(path, &self.export_encoder(), &self.encoder)
    }
}

/// VQ-VAE token grid of `image`, flattened row-major, checked against the
/// encoder's patch grid.
pub fn target_tokens(
    vqvae: &VqvaeModel,
    encoder: &EncoderConfig,
    image: &RasterImage,
) -> Result<Vec<usize>> {
    if vqvae.config.patch_size() != encoder.patch_size {
        return Err(Error::shape(
            "ssp targets",
            format!(
                "tokenizer grid stride {} vs patch size {}",
                vqvae.config.patch_size(),
                encoder.patch_size
            ),
        ));
    }
    Ok(vqvae.token_grid(image)?.concat())
}

/// Pretrain on `images` against the frozen tokenizer. The log's metric is
/// masked-position top-1 accuracy of the batch.
pub fn pretrain(
    images: &[RasterImage],
    vqvae: &VqvaeModel,
    config: &SspConfig,
    seed: u64,
) -> Result<(SspModel, TrainLog)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let targets = images
        .iter()
        .map(|im| target_tokens(vqvae, &config.encoder, im))
        .collect::<Result<Vec<_>>>()?;
    let mut model = SspModel::new(config.encoder.clone(), vqvae.config.codebook_size, seed)?;
    let oc = &config.optim;
    let mut sampler = BatchSampler::new(images.len(), oc.batch_size, seed ^ 0x55A0)?;
    let mut opt = Optimizer::new(oc)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3A5C);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD40F);
    let mut log = TrainLog::new("masked_acc");
    for step in 0..oc.steps {
        let idx = sampler.next_batch();
        let refs: Vec<&RasterImage> = idx.iter().map(|&i| &images[i]).collect();
        let mut flags = Vec::new();
        let mut tgt = Vec::new();
        for &i in &idx {
            flags.extend(sample_mask(targets[i].len(), config.mask_ratio, &mut mask_rng)?.flags());
            tgt.extend_from_slice(&targets[i]);
        }
        let (loss, acc, mut grads) = {
            let mut g = Graph::train(&model.params, &mut drop_rng);
            let x = g.tape.constant(batch_tensor(&refs)?);
            let logits = model.logits_var(&mut g, x, &flags)?;
            let l = g.tape.cross_entropy(logits, &tgt, Some(&flags))?;
            let acc = masked_accuracy(g.tape.value(logits), &tgt, &flags);
            (
                g.tape.value(l).item()?,
                acc,
                g.tape.backward(l)?.param_grads(),
            )
        };
        let lr = opt.step(step, loss, &mut model.params, &mut grads)?;
        log.push(step, loss, lr, acc);
        if step % 100 == 0 {
            log::info!("ssp step {step} loss {loss:.4} masked_acc {acc:.3}");
        }
    }
    Ok((model, log))
}

fn masked_accuracy(logits: &Tensor, targets: &[usize], masked: &[bool]) -> f32 {
    let k = logits.shape()[1];
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, row) in logits.data().chunks(k).enumerate() {
        if masked[i] {
            total += 1;
            let mut best = 0;
            for (j, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = j;
                }
            }
            hit += usize::from(best == targets[i]);
        }
    }
    hit as f32 / total.max(1) as f32
}

/// Masked top-1 accuracy of `model` on `images` with a fixed mask seed.
pub fn evaluate_masked_accuracy(
    model: &SspModel,
    vqvae: &VqvaeModel,
    images: &[RasterImage],
    ratio: f32,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0.0f64, 0usize);
    for im in images {
        let tokens = target_tokens(vqvae, &model.encoder, im)?;
        let plan = sample_mask(tokens.len(), ratio, &mut rng)?;
        let flags = plan.flags();
        let mut g = Graph::eval(&model.params);
        let x = g.tape.constant(batch_tensor(&[im])?);
        let l = model.logits_var(&mut g, x, &flags)?;
        hit += masked_accuracy(g.tape.value(l), &tokens, &flags) as f64 * plan.indices.len() as f64;
        total += plan.indices.len();
    }
    Ok((hit / total.max(1) as f64) as f32)
}
