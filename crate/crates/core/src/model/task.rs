use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{self, EncoderConfig};
use crate::codec::{Task, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, RasterImage};
use crate::nn::{self, Graph};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tensor, Var};
use crate::train::{BatchSampler, OptimConfig, Optimizer, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub task: Task,
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    /// Longest framed sequence (BOS and EOS included).
    pub max_len: usize,
    pub optim: OptimConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::new(Task::Structure, EncoderConfig::tiny())
    }
}

impl TaskConfig {
    pub fn new(task: Task, encoder: EncoderConfig) -> Self {
        TaskConfig {
            task,
            encoder,
            decoder_layers: 4,
            max_len: task.max_len(),
            optim: OptimConfig {
                steps: 2000,
                batch_size: 16,
                lr: 1e-3,
                warmup_steps: 100,
                ..OptimConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_layers == 0 {
            return Err(Error::InvalidArgument(
                "decoder needs at least one layer".into(),
            ));
        }
        if self.max_len < 2 || self.max_len > self.task.max_len() {
            return Err(Error::InvalidArgument(format!(
                "max_len {} outside [2, {}] for the {} task",
                self.max_len,
                self.task.max_len(),
                self.task.name()
            )));
        }
        Ok(())
    }
}

/// One supervised pair: the model input image and the unframed target ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub image: RasterImage,
    pub target: Vec<u32>,
}

/// Outcome of greedy decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// BOS, generated tokens, and EOS unless truncated.
    pub seq: TokenSeq,
    /// Softmax probability of each generated token.
    pub probs: Vec<f32>,
    /// `max_len` was reached without EOS.
    pub truncated: bool,
}

/// Names moved by an encoder transfer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    pub unmatched: Vec<String>,
}

fn dec(name: &str) -> String {
    format!("decoder.{name}")
}

/// Visual encoder plus autoregressive decoder for one task.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub config: TaskConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl TaskModel {
    pub fn new(config: TaskConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() <= Vocab::SPECIALS.len() {
            return Err(Error::InvalidArgument(
                "task vocabulary has no tokens".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_encoder(&mut params, &config.encoder, &mut rng)?;
        let d = config.encoder.width;
        params.insert(dec("tok"), Tensor::randn([vocab.len(), d], 0.02, &mut rng));
        params.insert(
            dec("pos"),
            Tensor::randn([config.max_len, d], 0.02, &mut rng),
        );
        for l in 0..config.decoder_layers {
            let p = dec(&format!("layers.{l}"));
            nn::init_layer_norm(&mut params, &format!("{p}.ln1"), d);
            nn::init_attention(&mut params, &format!("{p}.self"), d, &mut rng);
            nn::init_layer_norm(&mut params, &format!("{p}.ln2"), d);
            nn::init_attention(&mut params, &format!("{p}.cross"), d, &mut rng);
            nn::init_layer_norm(&mut params, &format!("{p}.ln3"), d);
            nn::init_mlp(
                &mut params,
                &format!("{p}.mlp"),
                d,
                d * config.encoder.mlp_ratio,
                &mut rng,
            );
        }
        nn::init_layer_norm(&mut params, &dec("ln_f"), d);
        nn::init_linear(&mut params, &dec("head"), d, vocab.len(), 0.02, &mut rng);
        Ok(TaskModel {
            config,
            vocab,
            params,
        })
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// Memory `[B, N, D]` for images `x [B, C, H, W]`.
    pub fn encode_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        encoder::encode(g, x, &self.config.encoder)
    }

    /// Memory for one image as a plain tensor `[1, N, D]`.
    pub fn encode(&self, image: &RasterImage) -> Result<Tensor> {
        let mut g = Graph::eval(&self.params);
        let x = g.tape.constant(batch_tensor(&[image])?);
        let m = self.encode_var(&mut g, x)?;
        Ok(g.tape.value(m).clone())
    }

    /// Decoder logits `[B*T, V]` for equal-length input rows `inputs`
    /// attending to `memory [B, N, D]`.
    pub fn decode_var(&self, g: &mut Graph, memory: Var, inputs: &[Vec<u32>]) -> Result<Var> {
        let b = inputs.len();
        let t = inputs.first().map_or(0, Vec::len);
        if b == 0 || t == 0 || inputs.iter().any(|r| r.len() != t) {
            return Err(Error::shape(
                "decoder",
                "input rows must be non-empty and equal length",
            ));
        }
        if t > self.config.max_len {
            return Err(Error::SequenceTooLong {
                task: self.task().name(),
                len: t,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = inputs
            .iter()
            .flatten()
            .find(|&&id| id as usize >= self.vocab.len())
        {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab.len()
            )));
        }
        let ec = &self.config.encoder;
        let (d, heads, p_drop) = (ec.width, ec.heads(), ec.dropout);
        let ids: Vec<usize> = inputs.iter().flatten().map(|&i| i as usize).collect();
        let table = g.param(&dec("tok"))?;
        let h = g.tape.embedding(table, &ids)?;
        let h = g.tape.reshape(h, &[b, t, d])?;
        let h = g.add_positions(h, &dec("pos"))?;
        let mut h = g.dropout(h, p_drop)?;
        for l in 0..self.config.decoder_layers {
            let p = dec(&format!("layers.{l}"));
            let sa = format!("{p}.self");
            h = g.residual(h, &format!("{p}.ln1"), p_drop, |g, y| {
                g.attention(y, y, &sa, heads, true)
            })?;
            let ca = format!("{p}.cross");
            h = g.residual(h, &format!("{p}.ln2"), p_drop, |g, y| {
                g.attention(y, memory, &ca, heads, false)
            })?;
            let mlp = format!("{p}.mlp");
            h = g.residual(h, &format!("{p}.ln3"), p_drop, |g, y| g.mlp(y, &mlp))?;
        }
        let h = g.layer_norm(h, &dec("ln_f"))?;
        let logits = g.linear(h, &dec("head"))?;
        g.tape.reshape(logits, &[b * t, self.vocab.len()])
    }

    /// Teacher-forced logits `[T, V]` for the decoder input `input_ids`
    /// (BOS first). Row `i` predicts the token after `input_ids[..=i]`.
    pub fn forward_teacher_forced(&self, image: &RasterImage, input_ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::eval(&self.params);
        let x = g.tape.constant(batch_tensor(&[image])?);
        let m = self.encode_var(&mut g, x)?;
        let l = self.decode_var(&mut g, m, &[input_ids.to_vec()])?;
        Ok(g.tape.value(l).clone())
    }

    /// Padded decoder inputs, targets and loss mask for a batch of payloads.
    pub fn teacher_batch(&self, targets: &[&[u32]]) -> Result<TeacherBatch> {
        let t = targets.iter().map(|p| p.len() + 1).max().unwrap_or(1);
        let mut inputs = Vec::with_capacity(targets.len());
        let mut outs = Vec::with_capacity(targets.len() * t);
        let mut mask = Vec::with_capacity(targets.len() * t);
        for p in targets {
            if p.len() + 2 > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    task: self.task().name(),
                    len: p.len() + 2,
                    max: self.config.max_len,
                });
            }
            let mut inp = vec![Vocab::BOS];
            inp.extend_from_slice(p);
            inp.resize(t, Vocab::PAD);
            inputs.push(inp);
            for i in 0..t {
                let (id, live) = match i.cmp(&p.len()) {
                    std::cmp::Ordering::Less => (p[i], true),
                    std::cmp::Ordering::Equal => (Vocab::EOS, true),
                    std::cmp::Ordering::Greater => (Vocab::PAD, false),
                };
                outs.push(id as usize);
                mask.push(live);
            }
        }
        Ok((inputs, outs, mask))
    }

    /// Greedy decoding of several same-size images in lockstep.
    pub fn greedy_decode_batch(
        &self,
        images: &[&RasterImage],
        max_len: usize,
    ) -> Result<Vec<Decoded>> {
        let max_len = max_len.min(self.config.max_len);
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let memory = {
            let mut g = Graph::eval(&self.params);
            let x = g.tape.constant(batch_tensor(images)?);
            let m = self.encode_var(&mut g, x)?;
            g.tape.value(m).clone()
        };
        let n = images.len();
        let v = self.vocab.len();
        let mut state = self.start_incremental(&memory)?;
        let mut seqs = vec![vec![Vocab::BOS]; n];
        let mut probs = vec![Vec::new(); n];
        let mut done = vec![false; n];
        while seqs[0].len() < max_len && done.iter().any(|d| !d) {
            let last: Vec<u32> = seqs.iter().map(|s| *s.last().unwrap()).collect();
            let logits = self.step_incremental(&mut state, &last, seqs[0].len() - 1)?;
            let logits = logits.data();
            for (i, seq) in seqs.iter_mut().enumerate() {
                let row = &logits[i * v..(i + 1) * v];
                if done[i] {
                    seq.push(Vocab::PAD);
                    continue;
                }
                let mut best = 0;
                for (k, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = k;
                    }
                }
                let max = row[best];
                let denom: f32 = row.iter().map(|&z| (z - max).exp()).sum();
                probs[i].push(1.0 / denom);
                seq.push(best as u32);
                done[i] = best as u32 == Vocab::EOS;
            }
        }
        Ok(seqs
            .into_iter()
            .zip(probs)
            .zip(done)
            .map(|((mut ids, probs), finished)| {
                ids.truncate(probs.len() + 1);
                Decoded {
                    seq: TokenSeq {
                        ids,
                        task: self.task(),
                    },
                    probs,
                    truncated: !finished,
                }
            })
            .collect())
    }

    /// Cross-attention keys and values per layer, computed once per image batch.
    fn start_incremental(&self, memory: &Tensor) -> Result<IncrementalState> {
        let heads = self.config.encoder.heads();
        let mut g = Graph::eval(&self.params);
        let m = g.tape.constant(memory.clone());
        let mut cross = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let p = dec(&format!("layers.{l}.cross"));
            let k = g.project_heads(m, &format!("{p}.k"), heads)?;
            let v = g.project_heads(m, &format!("{p}.v"), heads)?;
            cross.push((g.tape.value(k).clone(), g.tape.value(v).clone()));
        }
        Ok(IncrementalState {
            cross,
            keys: vec![None; self.config.decoder_layers],
            values: vec![None; self.config.decoder_layers],
        })
    }

    /// Logits `[B, V]` for the next token after feeding `last` at position
    /// `pos`, reusing cached self-attention keys and values.
    fn step_incremental(
        &self,
        state: &mut IncrementalState,
        last: &[u32],
        pos: usize,
    ) -> Result<Tensor> {
        let ec = &self.config.encoder;
        let (b, d, heads) = (last.len(), ec.width, ec.heads());
        let mut g = Graph::eval(&self.params);
        let ids: Vec<usize> = last.iter().map(|&i| i as usize).collect();
        let table = g.param(&dec("tok"))?;
        let h = g.tape.embedding(table, &ids)?;
        let h = g.tape.reshape(h, &[b, 1, d])?;
        let pos_table = g.param(&dec("pos"))?;
        let pos_row = g.tape.embedding(pos_table, &[pos])?;
        let mut h = g.tape.add_bcast(h, pos_row)?;
        for l in 0..self.config.decoder_layers {
            let p = dec(&format!("layers.{l}"));
            let sa = format!("{p}.self");
            let y = g.layer_norm(h, &format!("{p}.ln1"))?;
            let q = g.project_heads(y, &format!("{sa}.q"), heads)?;
            let k = g.project_heads(y, &format!("{sa}.k"), heads)?;
            let v = g.project_heads(y, &format!("{sa}.v"), heads)?;
            let k_all = append_step(&mut state.keys[l], g.tape.value(k))?;
            let v_all = append_step(&mut state.values[l], g.tape.value(v))?;
            let k = g.tape.constant(k_all);
            let v = g.tape.constant(v_all);
            let a = g.attend(q, k, v, &sa, heads, false)?;
            h = g.tape.add(h, a)?;

            let ca = format!("{p}.cross");
            let y = g.layer_norm(h, &format!("{p}.ln2"))?;
            let q = g.project_heads(y, &format!("{ca}.q"), heads)?;
            let (ck, cv) = &state.cross[l];
            let k = g.tape.constant(ck.clone());
            let v = g.tape.constant(cv.clone());
            let a = g.attend(q, k, v, &ca, heads, false)?;
            h = g.tape.add(h, a)?;

            let y = g.layer_norm(h, &format!("{p}.ln3"))?;
            let a = g.mlp(y, &format!("{p}.mlp"))?;
            h = g.tape.add(h, a)?;
        }
        let h = g.layer_norm(h, &dec("ln_f"))?;
        let logits = g.linear(h, &dec("head"))?;
        let logits = g.tape.reshape(logits, &[b, self.vocab.len()])?;
        Ok(g.tape.value(logits).clone())
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens; ties go to
    /// the lowest id.
    pub fn greedy_decode(&self, image: &RasterImage, max_len: usize) -> Result<Decoded> {
        Ok(self.greedy_decode_batch(&[image], max_len)?.remove(0))
    }

    /// Replace the encoder with pretrained weights, all-or-nothing.
    pub fn load_encoder(
        &mut self,
        weights: &ParamStore,
        config: &EncoderConfig,
    ) -> Result<LoadReport> {
        if !same_architecture(config, &self.config.encoder) {
            return Err(Error::Checkpoint(format!(
                "encoder config mismatch: checkpoint {config:?} vs model {:?}",
                self.config.encoder
            )));
        }
        let unmatched = encoder::encoder_params(&self.params)
            .names()
            .filter(|n| !weights.contains(n))
            .map(str::to_string)
            .collect::<Vec<_>>();
        if !unmatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "encoder tensors missing from checkpoint: {unmatched:?}"
            )));
        }
        let matched = self.params.load_from(weights)?;
        Ok(LoadReport { matched, unmatched })
    }

    /// [`TaskModel::load_encoder`] from an exported encoder checkpoint.
    pub fn load_ssp_encoder(&mut self, path: impl AsRef<Path>) -> Result<LoadReport> {
        let (weights, config) = load_encoder_checkpoint(path)?;
        self.load_encoder(&weights, &config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "task_model",
            "config": self.config,
            "vocab": self.vocab.tokens()[Vocab::SPECIALS.len()..],
        });
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.metadata["kind"] != "task_model" {
            return Err(Error::Checkpoint("not a task model checkpoint".into()));
        }
        let config: TaskConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(ck.metadata["vocab"].clone())?;
        let mut model = TaskModel::new(config, Vocab::with_specials(tokens), 0)?;
        model.params.load_from(&ck.params)?;
        if model.params.len() != ck.params.len() {
            return Err(Error::Checkpoint(
                "checkpoint tensor set differs from the model".into(),
            ));
        }
        Ok(model)
    }
}

fn same_architecture(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    EncoderConfig {
        dropout: 0.0,
        ..a.clone()
    } == EncoderConfig {
        dropout: 0.0,
        ..b.clone()
    }
}

/// Write encoder-only weights with their config.
struct IncrementalState {
    cross: Vec<(Tensor, Tensor)>,
    keys: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
}

/// Append `step [BH, 1, dh]` to `cache [BH, t, dh]` along time.
fn append_step(cache: &mut Option<Tensor>, step: &Tensor) -> Result<Tensor> {
    let next = match cache.take() {
        None => step.clone(),
        Some(c) => {
            let (bh, t, dh) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            let mut data = Vec::with_capacity(bh * (t + 1) * dh);
            for r in 0..bh {
                data.extend_from_slice(&c.data()[r * t * dh..(r + 1) * t * dh]);
                data.extend_from_slice(&step.data()[r * dh..(r + 1) * dh]);
            }
            Tensor::new([bh, t + 1, dh], data)?
        }
    };
    *cache = Some(next.clone());
    Ok(next)
}

pub fn save_encoder_checkpoint(
    path: impl AsRef<Path>,
    weights: &ParamStore,
    config: &EncoderConfig,
) -> Result<()> {
    let meta = serde_json::json!({"kind": "encoder", "encoder": config});
    save_checkpoint(path, weights, &meta)
}

pub fn load_encoder_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, EncoderConfig)> {
    let ck = load_checkpoint(path)?;
    if ck.metadata["kind"] != "encoder" {
        return Err(Error::Checkpoint("not an encoder checkpoint".into()));
    }
    let config: EncoderConfig = serde_json::from_value(ck.metadata["encoder"].clone())?;
    Ok((ck.params, config))
}

/// Starting point for [`train_task`].
#[derive(Clone, Debug)]
pub enum Init {
    Scratch,
    /// Pretrained encoder weights and the config they were trained with.
    Encoder(ParamStore, EncoderConfig),
}

/// Fraction of live positions whose argmax equals the target.
fn token_accuracy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> f32 {
    let v = logits.shape()[1];
    let (mut hit, mut live) = (0usize, 0usize);
    for (i, row) in logits.data().chunks(v).enumerate() {
        if !mask[i] {
            continue;
        }
        live += 1;
        let mut best = 0;
        for (k, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = k;
            }
        }
        hit += usize::from(best == targets[i]);
    }
    hit as f32 / live.max(1) as f32
}

/// Decoder inputs per sequence, flat targets and the loss mask over them.
pub type TeacherBatch = (Vec<Vec<u32>>, Vec<usize>, Vec<bool>);

/// Teacher-forced cross-entropy training. The log's metric column is the
/// batch token accuracy.
pub fn train_task(
    config: &TaskConfig,
    vocab: &Vocab,
    samples: &[TaskSample],
    init: &Init,
    seed: u64,
) -> Result<(TaskModel, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "task training corpus is empty".into(),
        ));
    }
    let mut model = TaskModel::new(config.clone(), vocab.clone(), seed)?;
    if let Init::Encoder(w, c) = init {
        model.load_encoder(w, c)?;
    }
    for (i, s) in samples.iter().enumerate() {
        if let Some(&bad) = s
            .target
            .iter()
            .find(|&&id| id as usize >= vocab.len() || Vocab::is_special(id))
        {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: id {bad} is not a {} token",
                config.task.name()
            )));
        }
    }
    let oc = &config.optim;
    let mut sampler = BatchSampler::new(samples.len(), oc.batch_size, seed ^ 0x7A5C)?;
    let mut opt = Optimizer::new(oc)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD40F);
    let mut log = TrainLog::new("token_acc");
    for step in 0..oc.steps {
        let idx = sampler.next_batch();
        let images: Vec<&RasterImage> = idx.iter().map(|&i| &samples[i].image).collect();
        let targets: Vec<&[u32]> = idx.iter().map(|&i| samples[i].target.as_slice()).collect();
        let (inputs, outs, mask) = model.teacher_batch(&targets)?;
        let (loss, acc, mut grads) = {
            let mut g = Graph::train(&model.params, &mut drop_rng);
            let x = g.tape.constant(batch_tensor(&images)?);
            let m = model.encode_var(&mut g, x)?;
            let logits = model.decode_var(&mut g, m, &inputs)?;
            let l = g.tape.cross_entropy(logits, &outs, Some(&mask))?;
            let acc = token_accuracy(g.tape.value(logits), &outs, &mask);
            (
                g.tape.value(l).item()?,
                acc,
                g.tape.backward(l)?.param_grads(),
            )
        };
        let lr = opt.step(step, loss, &mut model.params, &mut grads)?;
        log.push(step, loss, lr, acc);
        if step % 100 == 0 {
            log::info!(
                "{} step {step} loss {loss:.4} token_acc {acc:.3}",
                config.task.name()
            );
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::build_structure_vocab;

    fn micro() -> TaskConfig {
        let encoder = EncoderConfig {
            layers: 1,
            heads: 2,
            width: 16,
            image_height: 32,
            image_width: 32,
            dropout: 0.0,
            ..EncoderConfig::tiny()
        };
        TaskConfig {
            decoder_layers: 1,
            max_len: 16,
            ..TaskConfig::new(Task::Structure, encoder)
        }
    }

    fn image(v: f32) -> RasterImage {
        RasterImage::filled(32, 32, &[v, 0.5, 1.0 - v])
    }

    #[test]
    fn causal_prefix_unchanged() {
        let m = TaskModel::new(micro(), build_structure_vocab(), 1).unwrap();
        let a = m
            .forward_teacher_forced(&image(0.2), &[1, 10, 11, 12, 13])
            .unwrap();
        let b = m
            .forward_teacher_forced(&image(0.2), &[1, 10, 11, 30, 40])
            .unwrap();
        let v = m.vocab.len();
        assert_eq!(a.shape(), [5, v]);
        assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
        assert_ne!(a.data()[3 * v..], b.data()[3 * v..]);
    }

    #[test]
    fn initial_loss_near_uniform() {
        let m = TaskModel::new(micro(), build_structure_vocab(), 2).unwrap();
        let logits = m.forward_teacher_forced(&image(0.7), &[1, 10, 11]).unwrap();
        let mut g = Graph::eval(&m.params);
        let l = g.tape.constant(logits);
        let ce = g.tape.cross_entropy(l, &[10, 11, 2], None).unwrap();
        let ln_v = (m.vocab.len() as f32).ln();
        assert!((g.tape.value(ce).item().unwrap() - ln_v).abs() < 0.05 * ln_v);
    }

    #[test]
    fn pad_positions_masked() {
        let m = TaskModel::new(micro(), build_structure_vocab(), 3).unwrap();
        let (inputs, outs, mask) = m.teacher_batch(&[&[10, 11], &[12]]).unwrap();
        assert_eq!(inputs, vec![vec![1, 10, 11], vec![1, 12, 0]]);
        assert_eq!(outs, vec![10, 11, 2, 12, 2, 0]);
        assert_eq!(mask, vec![true, true, true, true, true, false]);
        assert!(m.teacher_batch(&[&[10; 15]]).is_err());
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let m = TaskModel::new(micro(), build_structure_vocab(), 9).unwrap();
        let img = image(0.3);
        let ids: Vec<u32> = vec![Vocab::BOS, 7, 12, 5, 30, 9];
        let full = m.forward_teacher_forced(&img, &ids).unwrap();
        let mut state = m.start_incremental(&m.encode(&img).unwrap()).unwrap();
        let v = m.vocab.len();
        for (pos, &id) in ids.iter().enumerate() {
            let step = m.step_incremental(&mut state, &[id], pos).unwrap();
            for k in 0..v {
                let want = full.data()[pos * v + k];
                assert!((step.data()[k] - want).abs() < 1e-4, "pos {pos} id {k}");
            }
        }
    }

    #[test]
    fn greedy_respects_max_len_and_is_deterministic() {
        let m = TaskModel::new(micro(), build_structure_vocab(), 4).unwrap();
        let a = m.greedy_decode(&image(0.1), 6).unwrap();
        let b = m.greedy_decode(&image(0.1), 6).unwrap();
        assert_eq!(a, b);
        assert!(a.seq.ids.len() <= 6);
        assert_eq!(a.seq.ids[0], Vocab::BOS);
        assert_eq!(a.probs.len() + 1, a.seq.ids.len());
        assert_eq!(a.truncated, a.seq.ids.last() != Some(&Vocab::EOS));
    }

    #[test]
    fn memorizes_two_samples() {
        let mut cfg = micro();
        cfg.optim.steps = 150;
        cfg.optim.batch_size = 2;
        cfg.optim.lr = 3e-3;
        cfg.optim.warmup_steps = 10;
        let samples = vec![
            TaskSample {
                image: image(0.0),
                target: vec![10, 11, 12],
            },
            TaskSample {
                image: image(1.0),
                target: vec![13, 14],
            },
        ];
        let (m, log) =
            train_task(&cfg, &build_structure_vocab(), &samples, &Init::Scratch, 5).unwrap();
        assert!(log.final_loss().unwrap() < log.losses()[0] * 0.2);
        for s in &samples {
            assert_eq!(
                m.greedy_decode(&s.image, 16).unwrap().seq.payload(),
                s.target.as_slice()
            );
        }
    }

    #[test]
    fn encoder_transfer_rejects_width_mismatch() {
        let mut m = TaskModel::new(micro(), build_structure_vocab(), 6).unwrap();
        let mut wide = micro().encoder;
        wide.width = 32;
        let mut store = ParamStore::new();
        encoder::init_encoder(&mut store, &wide, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = m.params.clone();
        assert!(m.load_encoder(&store, &wide).is_err());
        assert_eq!(m.params, before);
        let own = encoder::encoder_params(
            &TaskModel::new(micro(), build_structure_vocab(), 7)
                .unwrap()
                .params,
        );
        let r = m.load_encoder(&own, &micro().encoder).unwrap();
        assert!(r.unmatched.is_empty());
        assert_eq!(r.matched.len(), own.len());
    }
}
