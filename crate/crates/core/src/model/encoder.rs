//! Visual encoder shared by the pretraining model and the task models.
//! Parameters live under `encoder.` so a pretrained encoder transfers by name.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Graph, Heads};
use crate::tensor::{ConvGeom, ParamStore, Tensor, Var};

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// One `P×P`, stride-`P` convolution.
    LinearProjection,
    /// Residual stride-2 conv blocks reaching a total stride of `P`.
    HybridConvStem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Input size the position table is built for.
    pub image_height: usize,
    pub image_width: usize,
    pub mlp_ratio: usize,
    pub dropout: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::tiny()
    }
}

impl EncoderConfig {
    fn preset(layers: usize, heads: usize, width: usize, image: usize) -> Self {
        EncoderConfig {
            variant: EncoderVariant::LinearProjection,
            layers,
            heads,
            width,
            patch_size: 16,
            channels: 3,
            image_height: image,
            image_width: image,
            mlp_ratio: 4,
            dropout: 0.1,
        }
    }

    /// 4 layers, 8 heads, width 512 at 448×448.
    pub fn base() -> Self {
        Self::preset(4, 8, 512, 448)
    }

    /// 12 layers, 12 heads, width 768 at 448×448.
    pub fn large() -> Self {
        Self::preset(12, 12, 768, 448)
    }

    /// 2 layers, 4 heads, width 128 at 112×112.
    pub fn tiny() -> Self {
        Self::preset(2, 4, 128, 112)
    }

    pub fn with_variant(mut self, variant: EncoderVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn heads(&self) -> Heads {
        Heads {
            n_heads: self.heads,
            d_model: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 || self.width == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        let p = self.patch_size;
        if p == 0
            || !self.image_height.is_multiple_of(p)
            || !self.image_width.is_multiple_of(p)
            || self.num_patches() == 0
        {
            return bad(format!(
                "image {}x{} not divisible by patch {p}",
                self.image_height, self.image_width
            ));
        }
        if self.variant == EncoderVariant::HybridConvStem && (p < 2 || !p.is_power_of_two()) {
            return bad(format!(
                "conv stem needs a power-of-two patch size, got {p}"
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Output widths of the conv stem blocks.
    fn stem_widths(&self) -> Vec<usize> {
        let n = self.patch_size.trailing_zeros() as usize;
        (0..n)
            .map(|i| (self.width >> (n - 1 - i)).max(16.min(self.width)))
            .collect()
    }
}

fn layer(l: usize) -> String {
    format!("{PREFIX}layers.{l}")
}

/// Insert freshly initialized encoder parameters.
pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    match cfg.variant {
        EncoderVariant::LinearProjection => {
            nn::init_conv(
                store,
                &format!("{PREFIX}patch"),
                cfg.channels,
                d,
                cfg.patch_size,
                rng,
            );
        }
        EncoderVariant::HybridConvStem => {
            let mut c_in = cfg.channels;
            for (i, c_out) in cfg.stem_widths().into_iter().enumerate() {
                let p = format!("{PREFIX}stem.{i}");
                nn::init_conv(store, &format!("{p}.conv1"), c_in, c_out, 3, rng);
                nn::init_conv(store, &format!("{p}.conv2"), c_out, c_out, 3, rng);
                nn::init_conv(store, &format!("{p}.skip"), c_in, c_out, 1, rng);
                c_in = c_out;
            }
        }
    }
    store.insert(
        format!("{PREFIX}pos"),
        Tensor::randn([cfg.num_patches(), d], 0.02, rng),
    );
    for l in 0..cfg.layers {
        let p = layer(l);
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        nn::init_attention(store, &format!("{p}.attn"), d, rng);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_mlp(store, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, rng);
    }
    nn::init_layer_norm(store, &format!("{PREFIX}ln_f"), d);
    Ok(())
}

/// Patch embeddings `[B, N, D]` for images `x [B, C, H, W]`.
pub fn embed(g: &mut Graph, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    let s = g.shape(x);
    let p = cfg.patch_size;
    if s.len() != 4
        || s[1] != cfg.channels
        || !s[2].is_multiple_of(p)
        || !s[3].is_multiple_of(p)
        || s[2] == 0
        || s[3] == 0
    {
        return Err(Error::shape(
            "encoder",
            format!("input {s:?} for {} channels, patch {p}", cfg.channels),
        ));
    }
    let n = (s[2] / p) * (s[3] / p);
    if n > cfg.num_patches() {
        return Err(Error::shape(
            "encoder",
            format!("{n} patches exceed position table of {}", cfg.num_patches()),
        ));
    }
    let h = match cfg.variant {
        EncoderVariant::LinearProjection => {
            g.conv(x, &format!("{PREFIX}patch"), ConvGeom::new(p, 0))?
        }
        EncoderVariant::HybridConvStem => {
            let mut h = x;
            for i in 0..cfg.stem_widths().len() {
                let pre = format!("{PREFIX}stem.{i}");
                let a = g.conv(h, &format!("{pre}.conv1"), ConvGeom::new(2, 1))?;
                let a = g.tape.relu(a)?;
                let a = g.conv(a, &format!("{pre}.conv2"), ConvGeom::new(1, 1))?;
                let skip = g.conv(h, &format!("{pre}.skip"), ConvGeom::new(2, 0))?;
                let sum = g.tape.add(a, skip)?;
                h = g.tape.relu(sum)?;
            }
            h
        }
    };
    let sh = g.shape(h);
    let h = g.tape.permute(h, &[0, 2, 3, 1])?;
    g.tape.reshape(h, &[sh[0], sh[2] * sh[3], sh[1]])
}

/// Positions, transformer blocks and final norm over embeddings `[B, N, D]`.
pub fn encode_embedded(g: &mut Graph, e: Var, cfg: &EncoderConfig) -> Result<Var> {
    let heads = cfg.heads();
    let mut h = g.add_positions(e, &format!("{PREFIX}pos"))?;
    h = g.dropout(h, cfg.dropout)?;
    for l in 0..cfg.layers {
        let p = layer(l);
        let attn = format!("{p}.attn");
        h = g.residual(h, &format!("{p}.ln1"), cfg.dropout, |g, y| {
            g.attention(y, y, &attn, heads, false)
        })?;
        let mlp = format!("{p}.mlp");
        h = g.residual(h, &format!("{p}.ln2"), cfg.dropout, |g, y| g.mlp(y, &mlp))?;
    }
    g.layer_norm(h, &format!("{PREFIX}ln_f"))
}

/// Memory sequence `[B, N, D]` for images `x [B, C, H, W]`.
pub fn encode(g: &mut Graph, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    let e = embed(g, x, cfg)?;
    encode_embedded(g, e, cfg)
}

/// Encoder-only parameters of `store`.
pub fn encoder_params(store: &ParamStore) -> ParamStore {
    store.with_prefix(PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn memory_shape(cfg: &EncoderConfig) -> (Vec<usize>, usize) {
        let mut store = ParamStore::new();
        init_encoder(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::eval(&store);
        let x = g
            .tape
            .constant(Tensor::full([1, 3, cfg.image_height, cfg.image_width], 0.5));
        let m = encode(&mut g, x, cfg).unwrap();
        assert!(g.tape.value(m).is_finite());
        (g.shape(m), store.num_scalars())
    }

    #[test]
    fn tiny_memory_is_49_by_128() {
        let (shape, linear_params) = memory_shape(&EncoderConfig::tiny());
        assert_eq!(shape, [1, 49, 128]);
        let hybrid = EncoderConfig::tiny().with_variant(EncoderVariant::HybridConvStem);
        let (hshape, hybrid_params) = memory_shape(&hybrid);
        assert_eq!(hshape, shape);
        assert!(hybrid_params > linear_params);
    }

    #[test]
    fn presets() {
        let b = EncoderConfig::base();
        assert_eq!(
            (b.layers, b.heads, b.width, b.num_patches()),
            (4, 8, 512, 784)
        );
        let l = EncoderConfig::large();
        assert_eq!((l.layers, l.heads, l.width), (12, 12, 768));
        assert!(EncoderConfig {
            heads: 3,
            ..EncoderConfig::tiny()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            image_height: 100,
            ..EncoderConfig::tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::new();
        init_encoder(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::eval(&store);
        let x = g.tape.constant(Tensor::zeros([1, 3, 100, 112]));
        assert!(encode(&mut g, x, &cfg).is_err());
    }
}
