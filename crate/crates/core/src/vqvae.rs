//! Discrete image tokenizer: a strided conv encoder emits codebook logits
//! per grid cell, Gumbel-softmax weights mix codebook rows, and a mirrored
//! upsample-and-conv decoder reconstructs the image. All convolutions pad by
//! edge replication, so a flat image maps to a flat code grid and back.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{batch_tensor, RasterImage};
use crate::nn::{self, Graph};
use crate::tensor::{load_checkpoint, save_checkpoint, ConvGeom, ParamStore, Tape, Tensor, Var};
use crate::train::{BatchSampler, OptimConfig, Optimizer, TrainLog};

const DOWN: ConvGeom = ConvGeom { stride: 2, pad: 0 };
const SAME: ConvGeom = ConvGeom { stride: 1, pad: 0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqvaeConfig {
    pub channels: usize,
    /// Widths of all but the last stride-2 layer; the last emits `code_dim`.
    pub hidden: Vec<usize>,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub tau_start: f32,
    pub tau_min: f32,
    /// Use hard one-hot codes forward with soft gradients.
    pub straight_through: bool,
    pub optim: OptimConfig,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        VqvaeConfig {
            channels: 3,
            hidden: vec![32, 64, 128],
            codebook_size: 256,
            code_dim: 64,
            tau_start: 1.0,
            tau_min: 0.0625,
            straight_through: false,
            optim: OptimConfig {
                steps: 400,
                batch_size: 8,
                lr: 2e-3,
                warmup_steps: 20,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        }
    }
}

impl VqvaeConfig {
    /// Total downsampling factor of the encoder.
    pub fn patch_size(&self) -> usize {
        1 << (self.hidden.len() + 1)
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.channels];
        w.extend(&self.hidden);
        w.push(self.code_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument(
                "codebook needs at least 2 entries".into(),
            ));
        }
        if self.code_dim == 0 || self.channels == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        if !(self.tau_start > 0.0 && self.tau_min > 0.0 && self.tau_min <= self.tau_start) {
            return Err(Error::InvalidArgument(
                "need 0 < tau_min <= tau_start".into(),
            ));
        }
        Ok(())
    }

    /// Exponential anneal from `tau_start` to `tau_min` over the first half
    /// of training, then constant.
    pub fn tau_at(&self, step: usize) -> f32 {
        let half = (self.optim.steps / 2).max(1);
        let frac = (step as f32 / half as f32).min(1.0);
        self.tau_start * (self.tau_min / self.tau_start).powf(frac)
    }
}

/// i.i.d. Gumbel(0, 1) noise.
pub fn sample_gumbel(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f32 = rng.random_range(f32::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `softmax((logits + g) / tau)` over the last axis of `logits [N,K]`.
/// `noise` of `None` means `g = 0`.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: Var,
    tau: f32,
    noise: Option<&Tensor>,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let x = match noise {
        Some(g) => {
            let g = tape.constant(g.clone());
            tape.add(logits, g)?
        }
        None => logits,
    };
    let x = tape.scale(x, 1.0 / tau)?;
    tape.softmax(x)
}

/// Per-row argmax of `logits [N,K]`; ties go to the lowest index.
pub fn quantize(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// One-hot rows for `ids` over `k` classes.
pub fn one_hot(ids: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * k];
    for (r, &i) in ids.iter().enumerate() {
        data[r * k + i] = 1.0;
    }
    Tensor::new([ids.len(), k], data).expect("shape matches data")
}

/// How code weights are formed in [`VqvaeModel::forward`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CodeMode {
    /// Gumbel-softmax at the given temperature.
    Soft { tau: f32 },
    /// Hard one-hot forward, soft gradient.
    StraightThrough { tau: f32 },
    /// Argmax one-hot, no noise.
    Hard,
}

#[derive(Clone, Debug)]
pub struct VqvaeModel {
    pub config: VqvaeConfig,
    pub params: ParamStore,
}

impl VqvaeModel {
    pub fn new(config: VqvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w = config.widths();
        for i in 0..w.len() - 1 {
            nn::init_conv(
                &mut params,
                &format!("enc.{i}"),
                w[i],
                w[i + 1],
                4,
                &mut rng,
            );
        }
        nn::init_conv(
            &mut params,
            "enc.logits",
            config.code_dim,
            config.codebook_size,
            1,
            &mut rng,
        );
        params.insert(
            "codebook",
            Tensor::randn([config.codebook_size, config.code_dim], 1.0, &mut rng),
        );
        for i in (0..w.len() - 1).rev() {
            nn::init_conv(
                &mut params,
                &format!("dec.{i}"),
                w[i + 1],
                w[i],
                3,
                &mut rng,
            );
        }
        Ok(VqvaeModel { config, params })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get("codebook").expect("codebook present")
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let p = self.config.patch_size();
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h == 0 || w == 0 {
            return Err(Error::shape(
                "vqvae",
                format!("image {h}x{w} not divisible by {p}"),
            ));
        }
        Ok(())
    }

    /// Encoder logits for `x [B,C,H,W]`, returned as `[B*h*w, K]` rows in
    /// row-major grid order.
    pub fn encode_logits_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(Error::shape("vqvae encode", format!("input {s:?}")));
        }
        self.check_dims(s[2], s[3])?;
        let mut h = x;
        let n = self.config.widths().len() - 1;
        for i in 0..n {
            h = nn::pad_replicate(&mut g.tape, h, 1)?;
            h = g.conv(h, &format!("enc.{i}"), DOWN)?;
            if i + 1 < n {
                h = g.tape.relu(h)?;
            }
        }
        let l = g.conv(h, "enc.logits", ConvGeom::new(1, 0))?;
        let sl = g.shape(l);
        let l = g.tape.permute(l, &[0, 2, 3, 1])?;
        g.tape.reshape(l, &[sl[0] * sl[2] * sl[3], sl[1]])
    }

    /// Decode code weights `[B*h*w, K]` to images `[B,C,H,W]`.
    pub fn decode_var(
        &self,
        g: &mut Graph,
        weights: Var,
        batch: usize,
        grid: (usize, usize),
    ) -> Result<Var> {
        let sw = g.shape(weights);
        if sw != [batch * grid.0 * grid.1, self.config.codebook_size] {
            return Err(Error::shape(
                "vqvae decode",
                format!("weights {sw:?} for grid {grid:?} x {batch}"),
            ));
        }
        let z = g.param("codebook")?;
        let codes = g.tape.matmul(weights, z)?;
        let codes = g
            .tape
            .reshape(codes, &[batch, grid.0, grid.1, self.config.code_dim])?;
        let mut h = g.tape.permute(codes, &[0, 3, 1, 2])?;
        let n = self.config.widths().len() - 1;
        for i in (0..n).rev() {
            h = nn::upsample_nearest(&mut g.tape, h, 2)?;
            h = nn::pad_replicate(&mut g.tape, h, 1)?;
            h = g.conv(h, &format!("dec.{i}"), SAME)?;
            if i > 0 {
                h = g.tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Full pass on a batch; returns `(reconstruction, logits)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: CodeMode,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let s = g.shape(x);
        let p = self.config.patch_size();
        let grid = (s[2] / p, s[3] / p);
        let logits = self.encode_logits_var(g, x)?;
        let weights = match mode {
            CodeMode::Soft { tau } => {
                let noise = sample_gumbel(&g.shape(logits), rng);
                gumbel_softmax(&mut g.tape, logits, tau, Some(&noise))?
            }
            CodeMode::StraightThrough { tau } => {
                let noise = sample_gumbel(&g.shape(logits), rng);
                let soft = gumbel_softmax(&mut g.tape, logits, tau, Some(&noise))?;
                let sv = g.tape.value(soft).clone();
                let hard = one_hot(&quantize(&sv), self.config.codebook_size);
                let mut delta = hard;
                delta
                    .data_mut()
                    .iter_mut()
                    .zip(sv.data())
                    .for_each(|(h, s)| *h -= s);
                let delta = g.tape.constant(delta);
                g.tape.add(soft, delta)?
            }
            CodeMode::Hard => {
                let lv = g.tape.value(logits).clone();
                g.tape
                    .constant(one_hot(&quantize(&lv), self.config.codebook_size))
            }
        };
        let recon = self.decode_var(g, weights, s[0], grid)?;
        Ok((recon, logits))
    }

    /// Codebook logits `[h*w, K]` for one image.
    pub fn encode_logits(&self, image: &RasterImage) -> Result<Tensor> {
        let mut g = Graph::eval(&self.params);
        let x = g.tape.constant(batch_tensor(&[image])?);
        let l = self.encode_logits_var(&mut g, x)?;
        Ok(g.tape.value(l).clone())
    }

    /// Token index grid `[h][w]`.
    pub fn token_grid(&self, image: &RasterImage) -> Result<Vec<Vec<usize>>> {
        self.check_dims(image.height(), image.width())?;
        let p = self.config.patch_size();
        let ids = quantize(&self.encode_logits(image)?);
        Ok(ids
            .chunks(image.width() / p)
            .map(<[usize]>::to_vec)
            .collect())
    }

    /// Decode code weights `[h*w, K]` into an image of `grid` cells.
    pub fn decode(&self, weights: &Tensor, grid: (usize, usize)) -> Result<RasterImage> {
        let mut g = Graph::eval(&self.params);
        let w = g.tape.constant(weights.clone());
        let out = self.decode_var(&mut g, w, 1, grid)?;
        let t = g.tape.value(out);
        let s = t.shape();
        RasterImage::from_chw(s[1], s[2], s[3], t.data())
    }

    /// Decode by codebook row lookup.
    pub fn decode_tokens(&self, grid: &[Vec<usize>]) -> Result<RasterImage> {
        let (h, w) = (grid.len(), grid.first().map_or(0, Vec::len));
        let ids: Vec<usize> = grid.iter().flatten().copied().collect();
        if ids.iter().any(|&i| i >= self.config.codebook_size) || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(
                "token grid empty or index out of range".into(),
            ));
        }
        self.decode(&one_hot(&ids, self.config.codebook_size), (h, w))
    }

    /// Mean squared reconstruction error over `images` with hard codes.
    pub fn reconstruction_mse(&self, images: &[RasterImage]) -> Result<f32> {
        let mut total = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in images.chunks(8) {
            let refs: Vec<&RasterImage> = chunk.iter().collect();
            let mut g = Graph::eval(&self.params);
            let x = g.tape.constant(batch_tensor(&refs)?);
            let (r, _) = self.forward(&mut g, x, CodeMode::Hard, &mut rng)?;
            let l = g.tape.mse(r, x)?;
            total += g.tape.value(l).item()? as f64 * chunk.len() as f64;
        }
        Ok((total / images.len().max(1) as f64) as f32)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({"kind": "vqvae", "config": self.config});
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.metadata["kind"] != "vqvae" {
            return Err(Error::Checkpoint("not a VQ-VAE checkpoint".into()));
        }
        let config: VqvaeConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let mut model = VqvaeModel::new(config, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }
}

/// Plain-text token grid: a header line, then one row of indices per line.
pub fn format_token_grid(grid: &[Vec<usize>]) -> String {
    let width = grid
        .iter()
        .flatten()
        .max()
        .map_or(1, |m| m.to_string().len());
    let mut s = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| format!("{v:>width$}")).collect();
        writeln!(s, "{}", line.join(" ")).unwrap();
    }
    s
}

/// Train on `images`, returning the model and a log whose metric column is
/// the temperature.
pub fn train_vqvae(
    images: &[RasterImage],
    config: &VqvaeConfig,
    seed: u64,
) -> Result<(VqvaeModel, TrainLog)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "VQ-VAE training corpus is empty".into(),
        ));
    }
    let mut model = VqvaeModel::new(config.clone(), seed)?;
    model.check_dims(images[0].height(), images[0].width())?;
    let oc = &config.optim;
    let mut sampler = BatchSampler::new(images.len(), oc.batch_size, seed ^ 0x5A17)?;
    let mut opt = Optimizer::new(oc)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E01);
    let mut log = TrainLog::new("tau");
    for step in 0..oc.steps {
        let idx = sampler.next_batch();
        let refs: Vec<&RasterImage> = idx.iter().map(|&i| &images[i]).collect();
        let tau = config.tau_at(step);
        let mode = if config.straight_through {
            CodeMode::StraightThrough { tau }
        } else {
            CodeMode::Soft { tau }
        };
        let (loss, mut grads) = {
            let mut g = Graph::eval(&model.params);
            let x = g.tape.constant(batch_tensor(&refs)?);
            let (r, _) = model.forward(&mut g, x, mode, &mut noise_rng)?;
            let l = g.tape.mse(r, x)?;
            (g.tape.value(l).item()?, g.tape.backward(l)?.param_grads())
        };
        let lr = opt.step(step, loss, &mut model.params, &mut grads)?;
        log.push(step, loss, lr, tau);
        if step % 50 == 0 {
            log::info!("vqvae step {step} loss {loss:.5} tau {tau:.4}");
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VqvaeConfig {
        VqvaeConfig {
            hidden: vec![4, 4, 4],
            codebook_size: 8,
            code_dim: 4,
            ..VqvaeConfig::default()
        }
    }

    #[test]
    fn grid_shapes() {
        let m = VqvaeModel::new(small(), 0).unwrap();
        let img = RasterImage::filled(112, 112, &[0.5, 0.2, 0.9]);
        assert_eq!(m.encode_logits(&img).unwrap().shape(), [49, 8]);
        let grid = m.token_grid(&img).unwrap();
        assert_eq!((grid.len(), grid[0].len()), (7, 7));
        assert!(grid.iter().flatten().all(|&i| i < 8));
        let rec = m.decode_tokens(&grid).unwrap();
        assert_eq!((rec.height(), rec.width(), rec.channels()), (112, 112, 3));
        assert!(m
            .encode_logits(&RasterImage::filled(100, 112, &[0.0; 3]))
            .is_err());
    }

    #[test]
    fn gumbel_uniform_and_sharp() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros([2, 4]));
        let w = gumbel_softmax(&mut t, l, 1.0, None).unwrap();
        assert!(t.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let l = t.constant(Tensor::new([1, 3], vec![10.0, 0.0, 0.0]).unwrap());
        let w = gumbel_softmax(&mut t, l, 0.01, None).unwrap();
        assert!(t.value(w).data()[0] > 0.999);
        assert!(gumbel_softmax(&mut t, l, 0.0, None).is_err());
    }

    #[test]
    fn gumbel_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let l = t.constant(Tensor::randn([5, 7], 2.0, &mut rng));
        let g = sample_gumbel(&[5, 7], &mut rng);
        let w = gumbel_softmax(&mut t, l, 0.5, Some(&g)).unwrap();
        for row in t.value(w).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn quantize_ties_and_limit() {
        let t = Tensor::new([1, 8], vec![0., 0., 0., 5., 0., 0., 0., 5.]).unwrap();
        assert_eq!(quantize(&t), vec![3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::randn([20, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let w = gumbel_softmax(&mut tape, l, 1e-3, None).unwrap();
        assert_eq!(quantize(tape.value(w)), quantize(&logits));
    }

    #[test]
    fn hard_decode_equals_soft_on_one_hot() {
        let m = VqvaeModel::new(small(), 3).unwrap();
        let ids: Vec<usize> = (0..49).map(|i| i % 8).collect();
        let grid: Vec<Vec<usize>> = ids.chunks(7).map(<[usize]>::to_vec).collect();
        let a = m.decode_tokens(&grid).unwrap();
        let b = m.decode(&one_hot(&ids, 8), (7, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tau_schedule_endpoints() {
        let c = VqvaeConfig::default();
        assert_eq!(c.tau_at(0), 1.0);
        assert!((c.tau_at(c.optim.steps / 2) - 0.0625).abs() < 1e-6);
        assert!((c.tau_at(c.optim.steps) - 0.0625).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = VqvaeModel::new(small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        m.save(&p).unwrap();
        let back = VqvaeModel::load(&p).unwrap();
        assert_eq!(back.params, m.params);
    }
}
