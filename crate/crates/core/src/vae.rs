//! Modality-specific volumetric VAEs: 8x-per-axis compression into the
//! latent space the diffusion model runs in.
//!
//! Three resolution stages (strided subsample down, nearest-neighbour up)
//! around stride-1 convolutions. Training minimizes voxel MSE plus a small
//! KL term; afterwards the VAE is frozen and acts as a fixed codec.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint;
use crate::parallel;
use crate::phantom::Modality;
use crate::rng::{derive2, rng_from};
use crate::tensor::{
    AdamWConfig, AdamWState, Conv3dLayer, GroupNormLayer, NdTensor, ParamBinding, Params, Tape,
    Var,
};
use crate::volume::Volume;
use crate::{Error, Result};

/// Compressed representation of one modality volume.
#[derive(Debug, Clone)]
pub struct Latent {
    pub tensor: NdTensor<f32>,
    pub modality: Modality,
}

impl Latent {
    pub fn spatial(&self) -> (usize, usize, usize) {
        match self.tensor.shape() {
            [_, d, h, w] => (*d, *h, *w),
            _ => unreachable!("latents are rank 4"),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VaeConfig {
    #[serde(default = "default_c_z")]
    pub c_z: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_w_kl")]
    pub w_kl: f64,
    #[serde(default = "default_groups")]
    pub groups: usize,
}

fn default_c_z() -> usize {
    4
}
fn default_base_width() -> usize {
    16
}
fn default_w_kl() -> f64 {
    1e-4
}
fn default_groups() -> usize {
    4
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            c_z: default_c_z(),
            base_width: default_base_width(),
            w_kl: default_w_kl(),
            groups: default_groups(),
        }
    }
}

const GN_EPS: f64 = 1e-5;

struct EncoderLayers {
    conv_in: Conv3dLayer,
    blocks: Vec<(GroupNormLayer, Conv3dLayer)>,
    head_norm: GroupNormLayer,
    head: Conv3dLayer,
}

struct DecoderLayers {
    conv_in: Conv3dLayer,
    blocks: Vec<(GroupNormLayer, Conv3dLayer)>,
    head_norm: GroupNormLayer,
    head: Conv3dLayer,
}

/// One modality's encoder/decoder pair plus its parameter store.
pub struct ModalityVae {
    pub modality: Modality,
    pub cfg: VaeConfig,
    pub params: Params<f32>,
    pub frozen: bool,
    enc: EncoderLayers,
    dec: DecoderLayers,
}

impl ModalityVae {
    pub fn new(modality: Modality, cfg: VaeConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from(derive2(seed, 0xAE, modality.index() as u64));
        let mut params = Params::new();
        let w = cfg.base_width;
        let g = cfg.groups;
        // Encoder: width profile 1 -> w -> w -> 2w -> 2w, spatial /8.
        let enc = EncoderLayers {
            conv_in: Conv3dLayer::init(&mut params, "enc.in", 1, w, 3, 1, 1, &mut rng)?,
            blocks: vec![
                (
                    GroupNormLayer::init(&mut params, "enc.b0.gn", w, g, GN_EPS)?,
                    Conv3dLayer::init(&mut params, "enc.b0.conv", w, w, 3, 1, 1, &mut rng)?,
                ),
                (
                    GroupNormLayer::init(&mut params, "enc.b1.gn", w, g, GN_EPS)?,
                    Conv3dLayer::init(&mut params, "enc.b1.conv", w, 2 * w, 3, 1, 1, &mut rng)?,
                ),
                (
                    GroupNormLayer::init(&mut params, "enc.b2.gn", 2 * w, g, GN_EPS)?,
                    Conv3dLayer::init(&mut params, "enc.b2.conv", 2 * w, 2 * w, 3, 1, 1, &mut rng)?,
                ),
            ],
            head_norm: GroupNormLayer::init(&mut params, "enc.head.gn", 2 * w, g, GN_EPS)?,
            head: Conv3dLayer::init(&mut params, "enc.head.conv", 2 * w, 2 * cfg.c_z, 3, 1, 1, &mut rng)?,
        };
        // Decoder mirror: c_z -> 2w -> 2w -> w, spatial x8, then 1-channel head.
        let dec = DecoderLayers {
            conv_in: Conv3dLayer::init(&mut params, "dec.in", cfg.c_z, 2 * w, 3, 1, 1, &mut rng)?,
            blocks: vec![
                (
                    GroupNormLayer::init(&mut params, "dec.b0.gn", 2 * w, g, GN_EPS)?,
                    Conv3dLayer::init(&mut params, "dec.b0.conv", 2 * w, 2 * w, 3, 1, 1, &mut rng)?,
                ),
                (
                    GroupNormLayer::init(&mut params, "dec.b1.gn", 2 * w, g, GN_EPS)?,
                    Conv3dLayer::init(&mut params, "dec.b1.conv", 2 * w, w, 3, 1, 1, &mut rng)?,
                ),
            ],
            head_norm: GroupNormLayer::init(&mut params, "dec.head.gn", w, g, GN_EPS)?,
            head: Conv3dLayer::init(&mut params, "dec.head.conv", w, 1, 3, 1, 1, &mut rng)?,
        };
        Ok(ModalityVae { modality, cfg, params, frozen: false, enc, dec })
    }

    /// Latent spatial shape for a volume shape: three halvings with floor
    /// division (matches the paper-scale 160x180x160 -> 20x22x20 rule).
    pub fn latent_shape_for(shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let mut s = [shape.0, shape.1, shape.2];
        for _ in 0..3 {
            for e in &mut s {
                *e /= 2;
            }
        }
        (s[0], s[1], s[2])
    }

    fn check_divisible(shape: (usize, usize, usize)) -> Result<()> {
        let (d, h, w) = shape;
        for (axis, e) in [("D", d), ("H", h), ("W", w)] {
            if e % 8 != 0 || e == 0 {
                return Err(Error::shape(
                    "vae::encode",
                    format!("axis {axis} extent {e} not divisible by 8"),
                ));
            }
        }
        Ok(())
    }

    /// Encoder forward on a tape; returns (mu, logvar) vars.
    pub fn encode_tape(
        &self,
        tape: &mut Tape<f32>,
        bind: &ParamBinding<f32>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let mut h = self.enc.conv_in.forward(tape, bind, x)?;
        for (gn, conv) in &self.enc.blocks {
            let n = gn.forward(tape, bind, h)?;
            let a = tape.silu(n);
            let d = tape.downsample3d(a, 2)?;
            h = conv.forward(tape, bind, d)?;
        }
        let n = self.enc.head_norm.forward(tape, bind, h)?;
        let a = tape.silu(n);
        let out = self.enc.head.forward(tape, bind, a)?;
        let mu = tape.slice_channels(out, 0, self.cfg.c_z)?;
        let logvar = tape.slice_channels(out, self.cfg.c_z, 2 * self.cfg.c_z)?;
        Ok((mu, logvar))
    }

    /// Decoder forward on a tape; tanh-bounded single-channel output.
    pub fn decode_tape(
        &self,
        tape: &mut Tape<f32>,
        bind: &ParamBinding<f32>,
        z: Var,
    ) -> Result<Var> {
        let mut h = self.dec.conv_in.forward(tape, bind, z)?;
        for (gn, conv) in &self.dec.blocks {
            let n = gn.forward(tape, bind, h)?;
            let a = tape.silu(n);
            let u = tape.upsample3d(a, 2)?;
            h = conv.forward(tape, bind, u)?;
        }
        let n = self.dec.head_norm.forward(tape, bind, h)?;
        let a = tape.silu(n);
        let u = tape.upsample3d(a, 2)?;
        let out = self.dec.head.forward(tape, bind, u)?;
        Ok(tape.tanh(out))
    }

    /// Deterministic posterior parameters for a volume.
    pub fn encode(&self, volume: &Volume) -> Result<(Latent, Latent)> {
        Self::check_divisible(volume.shape())?;
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let x = tape.constant(volume.to_tensor());
        let (mu, logvar) = self.encode_tape(&mut tape, &bind, x)?;
        Ok((
            Latent { tensor: tape.value(mu).clone(), modality: self.modality },
            Latent { tensor: tape.value(logvar).clone(), modality: self.modality },
        ))
    }

    /// Decode a latent back to a full-resolution volume in [-1, 1].
    pub fn decode(&self, latent: &NdTensor<f32>) -> Result<Volume> {
        let expected_c = self.cfg.c_z;
        match latent.shape() {
            [c, _, _, _] if *c == expected_c => {}
            other => {
                return Err(Error::shape(
                    "vae::decode",
                    format!("latent {other:?} does not match C_z={expected_c}"),
                ))
            }
        }
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let z = tape.constant(latent.clone());
        let out = self.decode_tape(&mut tape, &bind, z)?;
        Volume::from_tensor(tape.value(out))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Checkpoint with sidecar manifest.
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let manifest = serde_json::json!({
            "kind": "vae",
            "modality": self.modality.code(),
            "c_z": self.cfg.c_z,
            "base_width": self.cfg.base_width,
            "w_kl": self.cfg.w_kl,
            "groups": self.cfg.groups,
            "seed": seed,
            "frozen": self.frozen,
        });
        checkpoint::save_with_manifest(path, &checkpoint::params_entries(&self.params), &manifest)
    }

    pub fn load(path: &Path) -> Result<ModalityVae> {
        let manifest = checkpoint::load_manifest(path)?;
        let modality = manifest["modality"]
            .as_str()
            .and_then(Modality::from_code)
            .ok_or_else(|| Error::config("vae manifest lacks modality".to_string()))?;
        let cfg = VaeConfig {
            c_z: manifest["c_z"].as_u64().unwrap_or(default_c_z() as u64) as usize,
            base_width: manifest["base_width"].as_u64().unwrap_or(default_base_width() as u64) as usize,
            w_kl: manifest["w_kl"].as_f64().unwrap_or(default_w_kl()),
            groups: manifest["groups"].as_u64().unwrap_or(default_groups() as u64) as usize,
        };
        let mut vae = ModalityVae::new(modality, cfg, 0)?;
        let entries = checkpoint::load_checkpoint(path)?;
        checkpoint::restore_params(&mut vae.params, &entries)?;
        vae.frozen = manifest["frozen"].as_bool().unwrap_or(false);
        Ok(vae)
    }
}

/// Analytic KL(N(mu, e^logvar) || N(0, I)), element-mean.
pub fn kl_normal(mu: &[f32], logvar: &[f32]) -> f64 {
    let n = mu.len() as f64;
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m as f64 * m as f64 + (lv as f64).exp() - 1.0 - lv as f64))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_vae_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    1200
}
fn default_batch() -> usize {
    2
}
fn default_vae_lr() -> f64 {
    1e-3
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig { steps: default_steps(), batch: default_batch(), lr: default_vae_lr(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VaeTraceRow {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Train reconstruction + w_kl * KL with AdamW, then freeze. Batch elements
/// run data-parallel; gradients are averaged in index order so parallel and
/// serial runs agree bit-for-bit.
pub fn train_vae(
    vae: &mut ModalityVae,
    volumes: &[&Volume],
    cfg: &VaeTrainConfig,
) -> Result<Vec<VaeTraceRow>> {
    if vae.frozen {
        return Err(Error::config(format!(
            "VAE for modality {} is frozen; weight updates are not allowed",
            vae.modality
        )));
    }
    if volumes.is_empty() {
        return Err(Error::config("train_vae: no volumes".to_string()));
    }
    for v in volumes {
        ModalityVae::check_divisible(v.shape())?;
    }
    let mut opt = AdamWState::new(&vae.params, AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() })?;
    let w_kl = vae.cfg.w_kl as f32;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // Per-step, per-element seeds make runs independent of batch layout.
        let results: Vec<Result<(Vec<Option<Vec<f32>>>, f64, f64)>> =
            parallel::run_indexed(cfg.batch, |e| {
                let mut rng = rng_from(derive2(cfg.seed, step as u64, e as u64));
                let vol = volumes[rng.gen_range(0..volumes.len())];
                let mut tape = Tape::new();
                let bind = vae.params.bind(&mut tape);
                let x = tape.constant(vol.to_tensor());
                let (mu, logvar) = vae.encode_tape(&mut tape, &bind, x)?;
                // Reparameterized sample z = mu + exp(logvar/2) * eps.
                let shape = tape.value(mu).shape().to_vec();
                let eps = tape.constant(NdTensor::randn(&shape, 1.0f32, &mut rng));
                let half_lv = tape.scale(logvar, 0.5);
                let std = tape.exp(half_lv);
                let noise = tape.mul(std, eps)?;
                let z = tape.add(mu, noise)?;
                let xhat = vae.decode_tape(&mut tape, &bind, z)?;
                let diff = tape.sub(xhat, x)?;
                let sq = tape.mul(diff, diff)?;
                let recon = tape.mean(sq);
                // KL = mean(.5 * (mu^2 + e^logvar - 1 - logvar))
                let mu2 = tape.mul(mu, mu)?;
                let elv = tape.exp(logvar);
                let s = tape.add(mu2, elv)?;
                let s = tape.add_scalar(s, -1.0);
                let s = tape.sub(s, logvar)?;
                let klm = tape.mean(s);
                let kl = tape.scale(klm, 0.5);
                let klw = tape.scale(kl, w_kl);
                let total = tape.add(recon, klw)?;
                tape.backward(total)?;
                Ok((
                    bind.grads(&tape),
                    tape.value(recon).item() as f64,
                    tape.value(kl).item() as f64,
                ))
            });

        let mut grad_sum: Vec<Option<Vec<f32>>> = vec![None; vae.params.len()];
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        for r in results {
            let (grads, recon, kl) = r?;
            accumulate_grads(&mut grad_sum, grads, 1.0 / cfg.batch as f32);
            recon_sum += recon;
            kl_sum += kl;
        }
        let recon = recon_sum / cfg.batch as f64;
        let kl = kl_sum / cfg.batch as f64;
        let total = recon + vae.cfg.w_kl * kl;
        if !total.is_finite() {
            return Err(Error::Training { step, detail: format!("non-finite loss {total}") });
        }
        opt.step(&mut vae.params, &grad_sum)?;
        trace.push(VaeTraceRow { step, recon, kl, total });
    }
    vae.freeze();
    Ok(trace)
}

/// Sum scaled per-element gradients into the accumulator, in entry order.
pub(crate) fn accumulate_grads(
    acc: &mut [Option<Vec<f32>>],
    grads: Vec<Option<Vec<f32>>>,
    scale: f32,
) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match slot {
                None => *slot = Some(g.iter().map(|v| v * scale).collect()),
                Some(s) => {
                    for (si, gi) in s.iter_mut().zip(&g) {
                        *si += gi * scale;
                    }
                }
            }
        }
    }
}

/// Windowed moving average of a loss sequence (for smoothed-trace checks).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(w - 1);
            let n = i - lo + 1;
            values[lo..=i].iter().sum::<f64>() / n as f64
        })
        .collect()
}
