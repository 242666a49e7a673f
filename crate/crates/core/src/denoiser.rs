//! The volumetric U-Net noise predictor.
//!
//! Input is the channel-concatenation of the noisy target latent and the
//! fused condition. Two resolution levels; every residual block is FiLM-
//! modulated by a context vector built from the sinusoidal timestep
//! embedding plus the availability embedding; text conditioning enters the
//! two decoder blocks through zero-gated cross-attention. The final
//! convolution and all gates start at zero, so a fresh net predicts zero
//! noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{AvailEmbed, AvailabilityMask, InjectText};
use crate::tensor::{
    cross_attention, sinusoidal_embedding, AttentionWeights, Conv3dLayer, GroupNormLayer,
    LinearLayer, Mlp, NdTensor, ParamBinding, Params, Scalar, Tape, Var,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DenoiserConfig {
    #[serde(default = "d_cz")]
    pub c_z: usize,
    #[serde(default = "d_cf")]
    pub c_f: usize,
    #[serde(default = "d_width")]
    pub base_width: usize,
    #[serde(default = "d_tdim")]
    pub t_dim: usize,
    #[serde(default = "d_groups")]
    pub groups: usize,
    #[serde(default = "d_attn")]
    pub attn_width: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_dtext")]
    pub d_text: usize,
    /// Optional spatial self-attention at the bottleneck (off by default).
    #[serde(default)]
    pub bottleneck_self_attention: bool,
}

fn d_cz() -> usize {
    4
}
fn d_cf() -> usize {
    8
}
fn d_width() -> usize {
    32
}
fn d_tdim() -> usize {
    128
}
fn d_groups() -> usize {
    8
}
fn d_attn() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_dtext() -> usize {
    crate::conditioning::TEXT_EMBED_DIM
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            c_z: d_cz(),
            c_f: d_cf(),
            base_width: d_width(),
            t_dim: d_tdim(),
            groups: d_groups(),
            attn_width: d_attn(),
            heads: d_heads(),
            d_text: d_dtext(),
            bottleneck_self_attention: false,
        }
    }
}

const FILM_HIDDEN: usize = 64;
const GN_EPS: f64 = 1e-5;

/// GroupNorm/SiLU/conv twice, FiLM after the first conv, residual skip.
struct ResBlock {
    gn1: GroupNormLayer,
    conv1: Conv3dLayer,
    film_mlp: Mlp,
    gn2: GroupNormLayer,
    conv2: Conv3dLayer,
    skip: Option<Conv3dLayer>,
    c_out: usize,
}

impl ResBlock {
    fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        t_dim: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> crate::Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        Ok(ResBlock {
            gn1: GroupNormLayer::init(params, &format!("{name}.gn1"), c_in, groups, GN_EPS)?,
            conv1: Conv3dLayer::init(params, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng)?,
            film_mlp: Mlp::init_zero_out(params, &format!("{name}.film"), t_dim, FILM_HIDDEN, 2 * c_out, rng)?,
            gn2: GroupNormLayer::init(params, &format!("{name}.gn2"), c_out, groups, GN_EPS)?,
            conv2: Conv3dLayer::init(params, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv3dLayer::init(params, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)?)
            },
            c_out,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        x: Var,
        ctx: Var,
    ) -> crate::Result<Var> {
        let h = self.gn1.forward(tape, bind, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, bind, h)?;
        // FiLM: gamma starts at exactly 1 (zero MLP output plus constant 1).
        let film = self.film_mlp.forward_vec(tape, bind, ctx)?;
        let gamma_raw = tape.slice_channels(film, 0, self.c_out)?;
        let gamma = tape.add_scalar(gamma_raw, T::one());
        let beta = tape.slice_channels(film, self.c_out, 2 * self.c_out)?;
        let h = tape.film(h, gamma, beta)?;
        let h = self.gn2.forward(tape, bind, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, bind, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, bind, x)?,
            None => x,
        };
        tape.add(h, s)
    }
}

struct SelfAttention {
    name: String,
    heads: usize,
}

impl SelfAttention {
    fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> crate::Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let std = T::of_f64(1.0 / (channels as f64).sqrt());
        for role in ["wq", "wk", "wv", "wo"] {
            params.insert(&format!("{name}.{role}"), NdTensor::randn(&[channels, channels], std, rng))?;
        }
        Ok(SelfAttention { name: name.to_string(), heads })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        x: Var,
    ) -> crate::Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let c = shape[0];
        let spatial: usize = shape[1..].iter().product();
        let flat = tape.reshape(x, &[c, spatial])?;
        let tokens = tape.transpose2d(flat)?;
        let w = AttentionWeights {
            wq: bind.var(&format!("{}.wq", self.name)),
            wk: bind.var(&format!("{}.wk", self.name)),
            wv: bind.var(&format!("{}.wv", self.name)),
            wo: bind.var(&format!("{}.wo", self.name)),
        };
        let attn = cross_attention(tape, tokens, tokens, self.heads, &w)?;
        let mixed = tape.add(tokens, attn)?;
        let back = tape.transpose2d(mixed)?;
        tape.reshape(back, &shape)
    }
}

/// Descriptor tree for the U-Net; weights live in an external store so one
/// optimizer covers the denoiser together with the fusion and text modules.
pub struct DenoiserNet {
    pub cfg: DenoiserConfig,
    trunk: Mlp,
    avail_embed: AvailEmbed,
    stem: Conv3dLayer,
    enc0: ResBlock,
    down: Conv3dLayer,
    mid: ResBlock,
    mid_attn: Option<SelfAttention>,
    up: Conv3dLayer,
    dec0: ResBlock,
    inject0: InjectText,
    dec1: ResBlock,
    inject1: InjectText,
    out_norm: GroupNormLayer,
    out_conv: Conv3dLayer,
}

impl DenoiserNet {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        cfg: DenoiserConfig,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let w = cfg.base_width;
        let (g, td) = (cfg.groups, cfg.t_dim);
        Ok(DenoiserNet {
            cfg,
            trunk: Mlp::init(params, &format!("{name}.trunk"), td, td, td, rng)?,
            avail_embed: AvailEmbed::init(params, &format!("{name}.avail"), td, rng)?,
            stem: Conv3dLayer::init(params, &format!("{name}.stem"), cfg.c_z + cfg.c_f, w, 3, 1, 1, rng)?,
            enc0: ResBlock::init(params, &format!("{name}.enc0"), w, w, td, g, rng)?,
            down: Conv3dLayer::init(params, &format!("{name}.down"), w, 2 * w, 3, 1, 1, rng)?,
            mid: ResBlock::init(params, &format!("{name}.mid"), 2 * w, 2 * w, td, g, rng)?,
            mid_attn: if cfg.bottleneck_self_attention {
                Some(SelfAttention::init(params, &format!("{name}.midattn"), 2 * w, cfg.heads, rng)?)
            } else {
                None
            },
            up: Conv3dLayer::init(params, &format!("{name}.up"), 2 * w, w, 3, 1, 1, rng)?,
            dec0: ResBlock::init(params, &format!("{name}.dec0"), 2 * w, w, td, g, rng)?,
            inject0: InjectText::init(params, &format!("{name}.inj0"), w, cfg.d_text, cfg.attn_width, cfg.heads, rng)?,
            dec1: ResBlock::init(params, &format!("{name}.dec1"), w, w, td, g, rng)?,
            inject1: InjectText::init(params, &format!("{name}.inj1"), w, cfg.d_text, cfg.attn_width, cfg.heads, rng)?,
            out_norm: GroupNormLayer::init(params, &format!("{name}.out.gn"), w, g, GN_EPS)?,
            out_conv: Conv3dLayer::init_zero(params, &format!("{name}.out.conv"), w, cfg.c_z, 3, 1, 1)?,
        })
    }

    /// Noise prediction on a tape. `z_t` is [c_z, d, h, w], `z_fused`
    /// [c_f, d, h, w] with matching spatial axes, `z_text` a [n_tok, d_text]
    /// token sequence.
    pub fn forward_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        z_t: Var,
        z_fused: Var,
        z_text: Var,
        avail: &AvailabilityMask,
        t: usize,
    ) -> Result<Var> {
        let zs = tape.value(z_t).shape().to_vec();
        let fs = tape.value(z_fused).shape().to_vec();
        match (&zs[..], &fs[..]) {
            ([cz, d0, h0, w0], [cf, d1, h1, w1]) => {
                if *cz != self.cfg.c_z {
                    return Err(Error::shape("predict_noise", format!("z_t channels {cz} vs c_z {}", self.cfg.c_z)));
                }
                if *cf != self.cfg.c_f {
                    return Err(Error::shape("predict_noise", format!("z_fused channels {cf} vs c_f {}", self.cfg.c_f)));
                }
                for (axis, (a, b)) in [("D", (d0, d1)), ("H", (h0, h1)), ("W", (w0, w1))] {
                    if a != b {
                        return Err(Error::shape(
                            "predict_noise",
                            format!("z_t and z_fused misaligned on axis {axis}: {a} vs {b}"),
                        ));
                    }
                }
            }
            _ => return Err(Error::shape("predict_noise", format!("expected rank-4 latents, got {zs:?} / {fs:?}"))),
        }
        if tape.value(z_text).shape().get(1) != Some(&self.cfg.d_text) {
            return Err(Error::shape(
                "predict_noise",
                format!("z_text {:?} vs d_text {}", tape.value(z_text).shape(), self.cfg.d_text),
            ));
        }

        // Context vector: sinusoidal(t) + availability, through the trunk.
        let sin = tape.constant(sinusoidal_embedding::<T>(t as f64, self.cfg.t_dim)?);
        let av = self.avail_embed.forward(tape, bind, avail)?;
        let mix = tape.add(sin, av)?;
        let ctx = self.trunk.forward_vec(tape, bind, mix)?;

        let x = tape.concat_channels(z_t, z_fused)?;
        let h = self.stem.forward(tape, bind, x)?;
        let e0 = self.enc0.forward(tape, bind, h, ctx)?;
        let d = tape.downsample3d(e0, 2)?;
        let d = self.down.forward(tape, bind, d)?;
        let mut m = self.mid.forward(tape, bind, d, ctx)?;
        if let Some(attn) = &self.mid_attn {
            m = attn.forward(tape, bind, m)?;
        }
        let u = tape.upsample3d(m, 2)?;
        let u = self.up.forward(tape, bind, u)?;
        let cat = tape.concat_channels(u, e0)?;
        let h = self.dec0.forward(tape, bind, cat, ctx)?;
        let h = self.inject0.forward(tape, bind, h, z_text)?;
        let h = self.dec1.forward(tape, bind, h, ctx)?;
        let h = self.inject1.forward(tape, bind, h, z_text)?;
        let h = self.out_norm.forward(tape, bind, h)?;
        let h = tape.silu(h);
        self.out_conv.forward(tape, bind, h)
    }
}

/// Frozen-weights inference wrapper.
pub fn predict_noise(
    net: &DenoiserNet,
    params: &Params<f32>,
    z_t: &NdTensor<f32>,
    z_fused: &NdTensor<f32>,
    z_text: &NdTensor<f32>,
    avail: &AvailabilityMask,
    t: usize,
) -> Result<NdTensor<f32>> {
    let mut tape = Tape::new();
    let bind = params.bind_frozen(&mut tape);
    let z_t = tape.constant(z_t.clone());
    let z_fused = tape.constant(z_fused.clone());
    let z_text = tape.constant(z_text.clone());
    let out = net.forward_tape(&mut tape, &bind, z_t, z_fused, z_text, avail, t)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
