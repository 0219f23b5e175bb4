//! Layer helpers over the tape: parameter initialization and the
//! building blocks shared by the encoder, decoder and VQ-VAE.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f32 = 1e-5;
const MASK_NEG: f32 = -1e9;

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f32,
    rng: &mut impl Rng,
) {
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn([d_in, d_out], std, rng),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros([d_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full([d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros([d]));
}

/// He-normal kernel `[out, in, k, k]` and zero bias.
pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let std = (2.0 / (c_in * k * k) as f32).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn([c_out, c_in, k, k], std, rng),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros([c_out]));
}

/// Replicate-pad `x [B,C,H,W]` by `p` pixels on every side.
pub fn pad_replicate(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let [b, c, h, w] = dims4(tape, x, "pad_replicate")?;
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let mut idx = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        for y in 0..ho {
            let sy = y.saturating_sub(p).min(h - 1);
            idx.extend((0..wo).map(|x| (plane * h + sy) * w + x.saturating_sub(p).min(w - 1)));
        }
    }
    tape.gather(x, idx, &[b, c, ho, wo])
}

/// Nearest-neighbour upsampling of `x [B,C,H,W]` by an integer factor.
pub fn upsample_nearest(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    let [b, c, h, w] = dims4(tape, x, "upsample_nearest")?;
    let (ho, wo) = (h * factor, w * factor);
    let mut idx = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        for y in 0..ho {
            idx.extend((0..wo).map(|x| (plane * h + y / factor) * w + x / factor));
        }
    }
    tape.gather(x, idx, &[b, c, ho, wo])
}

fn dims4(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, c, h, w] if h > 0 && w > 0 => Ok([b, c, h, w]),
        ref s => Err(Error::shape(
            op,
            format!("need non-empty [B,C,H,W], got {s:?}"),
        )),
    }
}

/// Multi-head attention sizes.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub n_heads: usize,
    pub d_model: usize,
}

impl Heads {
    fn head_dim(self) -> Result<usize> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(self.d_model / self.n_heads)
    }
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), d, d, 0.02, rng);
    }
}

pub fn init_mlp(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) {
    init_linear(store, &format!("{prefix}.fc1"), d, hidden, 0.02, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, d, 0.02, rng);
}

/// A forward pass in progress: the tape, the parameters it reads, and the
/// dropout source (absent in evaluation).
pub struct Graph<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    pub fn eval(params: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            dropout_rng: None,
        }
    }

    pub fn train(params: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.params, name)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    /// `x [..., in] · w + b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let sx = self.shape(x);
        let d_in = *sx.last().unwrap_or(&0);
        let d_out = self.tape.shape(w)[1];
        let flat = self
            .tape
            .reshape(x, &[sx.iter().product::<usize>() / d_in.max(1), d_in])?;
        let y = self.tape.matmul(flat, w)?;
        let y = self.tape.add_bcast(y, b)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = d_out;
        self.tape.reshape(y, &out_shape)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, geom: ConvGeom) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), geom)
    }

    /// Inverted dropout; identity in evaluation or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let keep = 1.0 - p;
        let n: usize = shape.iter().product();
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    /// `[B,T,D] -> [B*H, T, dh]`
    fn split_heads(&mut self, x: Var, heads: Heads) -> Result<Var> {
        let s = self.shape(x);
        let dh = heads.head_dim()?;
        let x = self.tape.reshape(x, &[s[0], s[1], heads.n_heads, dh])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[s[0] * heads.n_heads, s[1], dh])
    }

    /// Linear projection `prefix` of `x [B,T,D]`, split into heads `[B*H, T, dh]`.
    pub fn project_heads(&mut self, x: Var, prefix: &str, heads: Heads) -> Result<Var> {
        let y = self.linear(x, prefix)?;
        self.split_heads(y, heads)
    }

    /// Attention over pre-split heads followed by the output projection
    /// `prefix.o`. Returns `[B, T, D]`.
    pub fn attend(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: &str,
        heads: Heads,
        causal: bool,
    ) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        let (bh, t, dh, s) = (sq[0], sq[1], sq[2], sk[1]);
        let b = bh / heads.n_heads;
        let kt = self.tape.permute(k, &[0, 2, 1])?;
        let scores = self.tape.bmm(q, kt)?;
        let mut scores = self.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        if causal {
            if t != s {
                return Err(Error::shape(
                    "attention",
                    format!("causal mask needs square scores, got {t}x{s}"),
                ));
            }
            let mut m = vec![0.0; t * t];
            for i in 0..t {
                for j in i + 1..t {
                    m[i * t + j] = MASK_NEG;
                }
            }
            let mask = self.tape.constant(Tensor::new([t, t], m)?);
            scores = self.tape.add_bcast(scores, mask)?;
        }
        let attn = self.tape.softmax(scores)?;
        let out = self.tape.bmm(attn, v)?;
        let out = self.tape.reshape(out, &[b, heads.n_heads, t, dh])?;
        let out = self.tape.permute(out, &[0, 2, 1, 3])?;
        let out = self.tape.reshape(out, &[b, t, heads.d_model])?;
        self.linear(out, &format!("{prefix}.o"))
    }

    /// Multi-head scaled dot-product attention of queries from `x [B,T,D]`
    /// over keys and values from `kv [B,S,D]`.
    pub fn attention(
        &mut self,
        x: Var,
        kv: Var,
        prefix: &str,
        heads: Heads,
        causal: bool,
    ) -> Result<Var> {
        heads.head_dim()?;
        let q = self.project_heads(x, &format!("{prefix}.q"), heads)?;
        let k = self.project_heads(kv, &format!("{prefix}.k"), heads)?;
        let v = self.project_heads(kv, &format!("{prefix}.v"), heads)?;
        self.attend(q, k, v, prefix, heads, causal)
    }

    pub fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h)?;
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// Pre-norm residual wrapper: `x + dropout(f(LN(x)))`.
    pub fn residual<F>(&mut self, x: Var, ln: &str, dropout: f32, f: F) -> Result<Var>
    where
        F: FnOnce(&mut Self, Var) -> Result<Var>,
    {
        let h = self.layer_norm(x, ln)?;
        let h = f(self, h)?;
        let h = self.dropout(h, dropout)?;
        self.tape.add(x, h)
    }

    /// Add a learned position table `[max, D]` to `x [B,T,D]`.
    pub fn add_positions(&mut self, x: Var, table: &str) -> Result<Var> {
        let t = self.shape(x)[1];
        let tab = self.param(table)?;
        let max = self.tape.shape(tab)[0];
        if t > max {
            return Err(Error::shape(
                "positions",
                format!("{t} positions, table holds {max}"),
            ));
        }
        let ids: Vec<usize> = (0..t).collect();
        let pos = self.tape.embedding(tab, &ids)?;
        self.tape.add_bcast(x, pos)
    }
}
