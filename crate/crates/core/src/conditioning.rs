//! Conditioning signals: availability masks, the adaptive 2->1 / 1->1
//! fusion, clinical prompt composition, and the pluggable text encoders.
//!
//! Prompt grammar (exact):
//! `Generate <TARGET> from <M1>[, <M2>]` plus an optional
//! ` for <DX> patient with MMSE=<int>, ADAS13=<int>, CDR-SOB=<fixed-1dp>`
//! where TARGET/Mi are sMRI | FDG-PET | AV45-PET and DX is HC | MCI | AD.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::phantom::{ClinicalRecord, Diagnosis, Modality};
use crate::rng::{derive, rng_from};
use crate::tensor::{
    cross_attention, AttentionWeights, Conv3dLayer, LinearLayer, NdTensor, ParamBinding, Params,
    Scalar, Tape, Var,
};
use crate::vae::Latent;
use crate::{Error, Result};

// ---- availability ----

/// Which modalities condition the generation of `target`. The target's own
/// bit is always false; one or two other bits are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AvailabilityMask {
    bits: [bool; 3],
    target: Modality,
}

impl AvailabilityMask {
    pub fn new(target: Modality, bits: [bool; 3]) -> Result<Self> {
        if bits[target.index()] {
            return Err(Error::config(format!(
                "availability mask must exclude the target {target}"
            )));
        }
        match bits.iter().filter(|&&b| b).count() {
            1 | 2 => Ok(AvailabilityMask { bits, target }),
            0 => Err(Error::config("no conditioning modality available".to_string())),
            _ => unreachable!("target bit is false"),
        }
    }

    /// Mask from the modalities a subject actually has.
    pub fn for_subject(target: Modality, present: &[Modality]) -> Result<Self> {
        let mut bits = [false; 3];
        for m in present {
            if *m != target {
                bits[m.index()] = true;
            }
        }
        AvailabilityMask::new(target, bits)
    }

    pub fn target(&self) -> Modality {
        self.target
    }

    pub fn bits(&self) -> [bool; 3] {
        self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Available modalities in canonical order A < B < C.
    pub fn available(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.bits[m.index()]).collect()
    }

    /// All valid (target, availability) combinations.
    pub fn all_valid() -> Vec<AvailabilityMask> {
        let mut out = Vec::new();
        for target in Modality::ALL {
            let others: Vec<Modality> =
                Modality::ALL.into_iter().filter(|&m| m != target).collect();
            for subset in 1usize..4 {
                let mut bits = [false; 3];
                if subset & 1 != 0 {
                    bits[others[0].index()] = true;
                }
                if subset & 2 != 0 {
                    bits[others[1].index()] = true;
                }
                out.push(AvailabilityMask::new(target, bits).expect("valid by construction"));
            }
        }
        out
    }
}

// ---- prompts ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalPrompt {
    pub text: String,
    pub includes_clinical: bool,
}

/// Deterministic prompt text per the template grammar. A missing clinical
/// record (clinical dropout) omits the clinical clause.
pub fn compose_prompt(
    target: Modality,
    avail: &AvailabilityMask,
    clinical: Option<&ClinicalRecord>,
) -> Result<ClinicalPrompt> {
    if avail.target() != target {
        return Err(Error::config(format!(
            "availability mask targets {}, not {target}",
            avail.target()
        )));
    }
    let sources: Vec<&str> = avail.available().iter().map(|m| m.display_name()).collect();
    let mut text = format!("Generate {} from {}", target.display_name(), sources.join(", "));
    if let Some(c) = clinical {
        text.push_str(&format!(
            " for {} patient with MMSE={}, ADAS13={}, CDR-SOB={:.1}",
            c.diagnosis,
            c.mmse.round() as i64,
            c.adas13.round() as i64,
            c.cdr_sob
        ));
    }
    Ok(ClinicalPrompt { text, includes_clinical: clinical.is_some() })
}

/// Fields recovered from a prompt by the grammar parser.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    pub target: Modality,
    pub sources: Vec<Modality>,
    pub clinical: Option<(Diagnosis, i64, i64, f64)>,
}

pub fn parse_prompt(text: &str) -> Result<ParsedPrompt> {
    let bad = |what: &str| Error::config(format!("prompt does not match grammar ({what}): {text}"));
    let rest = text.strip_prefix("Generate ").ok_or_else(|| bad("Generate"))?;
    let (target_str, rest) = rest.split_once(" from ").ok_or_else(|| bad("from"))?;
    let target = Modality::from_display_name(target_str).ok_or_else(|| bad("target"))?;
    let (sources_str, clinical_str) = match rest.split_once(" for ") {
        Some((s, c)) => (s, Some(c)),
        None => (rest, None),
    };
    let sources = sources_str
        .split(", ")
        .map(|s| Modality::from_display_name(s).ok_or_else(|| bad("source")))
        .collect::<Result<Vec<_>>>()?;
    if sources.is_empty() || sources.len() > 2 {
        return Err(bad("source count"));
    }
    let clinical = match clinical_str {
        None => None,
        Some(c) => {
            let (dx_str, scores) = c.split_once(" patient with MMSE=").ok_or_else(|| bad("patient"))?;
            let dx = Diagnosis::from_str_opt(dx_str).ok_or_else(|| bad("diagnosis"))?;
            let (mmse_str, scores) = scores.split_once(", ADAS13=").ok_or_else(|| bad("ADAS13"))?;
            let (adas_str, cdr_str) = scores.split_once(", CDR-SOB=").ok_or_else(|| bad("CDR-SOB"))?;
            let mmse: i64 = mmse_str.parse().map_err(|_| bad("MMSE value"))?;
            let adas: i64 = adas_str.parse().map_err(|_| bad("ADAS13 value"))?;
            if !cdr_str.contains('.') || cdr_str.split('.').nth(1).map(str::len) != Some(1) {
                return Err(bad("CDR-SOB precision"));
            }
            let cdr: f64 = cdr_str.parse().map_err(|_| bad("CDR-SOB value"))?;
            Some((dx, mmse, adas, cdr))
        }
    };
    Ok(ParsedPrompt { target, sources, clinical })
}

// ---- score binning and the token vocabulary ----

/// MMSE in 6 bins of width 5, ADAS13 in 9 bins, CDR-SOB in 6 bins.
pub fn mmse_bin(mmse: i64) -> usize {
    ((mmse.max(0) / 5) as usize).min(5)
}

pub fn adas13_bin(adas: i64) -> usize {
    ((adas.max(0) * 9 / 85) as usize).min(8)
}

pub fn cdr_bin(cdr: f64) -> usize {
    ((cdr.max(0.0) / 3.0).floor() as usize).min(5)
}

const N_TARGET: usize = 3;
const N_AVAILSET: usize = 6;
const N_DX: usize = 3;
const N_MMSE: usize = 6;
const N_ADAS: usize = 9;
const N_CDR: usize = 6;
/// Vocabulary: targets, available-sets, diagnoses, score bins, and a
/// reserved null-clinical token.
pub const VOCAB_SIZE: usize = N_TARGET + N_AVAILSET + N_DX + N_MMSE + N_ADAS + N_CDR + 1;
pub const NULL_CLINICAL_TOKEN: usize = VOCAB_SIZE - 1;

fn availset_index(sources: &[Modality]) -> usize {
    let mut bits = 0usize;
    for m in sources {
        bits |= 1 << m.index();
    }
    // Non-empty subsets of {A, B, C} in bit order: 1,2,3,4,5,6 -> 0..6.
    bits - 1
}

/// Template fields of a prompt as vocabulary token ids.
pub fn prompt_tokens(parsed: &ParsedPrompt) -> Vec<usize> {
    let mut tokens = vec![
        parsed.target.index(),
        N_TARGET + availset_index(&parsed.sources),
    ];
    let base = N_TARGET + N_AVAILSET;
    match &parsed.clinical {
        Some((dx, mmse, adas, cdr)) => {
            let dx_idx = match dx {
                Diagnosis::HC => 0,
                Diagnosis::MCI => 1,
                Diagnosis::AD => 2,
            };
            tokens.push(base + dx_idx);
            tokens.push(base + N_DX + mmse_bin(*mmse));
            tokens.push(base + N_DX + N_MMSE + adas13_bin(*adas));
            tokens.push(base + N_DX + N_MMSE + N_ADAS + cdr_bin(*cdr));
        }
        None => tokens.push(NULL_CLINICAL_TOKEN),
    }
    tokens
}

// ---- text encoders ----

pub const TEXT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Frozen deterministic embedding from hashed template fields
    /// (stand-in for an external language model).
    FeatureHash,
    /// Trainable lookup table over template fields, dim 512.
    Learnable,
}

impl EncoderKind {
    pub fn id(self) -> &'static str {
        match self {
            EncoderKind::FeatureHash => "feature-hash",
            EncoderKind::Learnable => "learnable",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "feature-hash" => Ok(EncoderKind::FeatureHash),
            "learnable" => Ok(EncoderKind::Learnable),
            other => Err(Error::config(format!("unknown encoder id `{other}`"))),
        }
    }
}

/// One row per token; the interface supports longer sequences but both
/// built-in encoders emit a single pooled token.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: NdTensor<f32>,
    pub encoder_id: &'static str,
}

const HASH_LANE: u64 = 0x7E57;

/// Deterministic per-token vector summed over the prompt's fields and
/// L2-normalized. A pure function of the prompt string.
pub fn feature_hash_embedding(prompt: &ClinicalPrompt, dim: usize) -> Result<TextEmbedding> {
    let parsed = parse_prompt(&prompt.text)?;
    let tokens = prompt_tokens(&parsed);
    let mut acc = vec![0.0f32; dim];
    for tok in tokens {
        let mut rng = rng_from(derive(HASH_LANE, tok as u64));
        for a in acc.iter_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *a += z;
        }
    }
    let norm = acc.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12) as f32;
    for a in &mut acc {
        *a /= norm;
    }
    Ok(TextEmbedding {
        tokens: NdTensor::new(vec![1, dim], acc)?,
        encoder_id: EncoderKind::FeatureHash.id(),
    })
}

/// Trainable token-table encoder. The table lives in the generator's
/// parameter store so it trains jointly with the denoiser.
#[derive(Debug, Clone)]
pub struct LearnableEncoder {
    name: String,
    pub dim: usize,
}

impl LearnableEncoder {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let std = T::of_f64(0.02);
        params.insert(
            &format!("{name}.table"),
            NdTensor::randn(&[VOCAB_SIZE, dim], std, rng),
        )?;
        Ok(LearnableEncoder { name: name.to_string(), dim })
    }

    /// Summed token embeddings as a [1, dim] sequence, on the tape.
    pub fn encode_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        prompt: &ClinicalPrompt,
    ) -> Result<Var> {
        let parsed = parse_prompt(&prompt.text)?;
        let tokens = prompt_tokens(&parsed);
        let table = bind.var(&format!("{}.table", self.name));
        let rows = tape.gather_rows(table, &tokens)?;
        let summed = tape.sum_rows(rows)?;
        tape.reshape(summed, &[1, self.dim])
    }
}

/// Encode with the frozen feature-hash path (inference-side helper).
pub fn encode_text(kind: EncoderKind, prompt: &ClinicalPrompt, dim: usize) -> Result<TextEmbedding> {
    match kind {
        EncoderKind::FeatureHash => feature_hash_embedding(prompt, dim),
        EncoderKind::Learnable => Err(Error::config(
            "learnable encoder needs its parameter table; encode via the generator".to_string(),
        )),
    }
}

// ---- fused image conditioning ----

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Latent channel count of the conditioning inputs.
    pub c_z: usize,
    /// Output channel count (both branches emit this width).
    pub c_f: usize,
    /// Token width of the cross-attention branch.
    pub attn_width: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { c_z: 4, c_f: 8, attn_width: 64, heads: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionBranch {
    CrossAttention,
    Projection,
}

/// Availability-driven fusion: cross-attention between two latents
/// (first-available in canonical order queries the other) or a learned
/// 3-D convolution projection of a single latent.
#[derive(Debug, Clone)]
pub struct FusionModule {
    name: String,
    pub cfg: FusionConfig,
    token_proj: LinearLayer,
    attn_out: LinearLayer,
    proj_conv: Conv3dLayer,
}

impl FusionModule {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        cfg: FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let token_proj = LinearLayer::init(params, &format!("{name}.tok"), cfg.c_z, cfg.attn_width, rng)?;
        for role in ["wq", "wk", "wv", "wo"] {
            let std = T::of_f64(1.0 / (cfg.attn_width as f64).sqrt());
            params.insert(
                &format!("{name}.attn.{role}"),
                NdTensor::randn(&[cfg.attn_width, cfg.attn_width], std, rng),
            )?;
        }
        let attn_out = LinearLayer::init(params, &format!("{name}.out"), cfg.attn_width, cfg.c_f, rng)?;
        let proj_conv =
            Conv3dLayer::init(params, &format!("{name}.proj"), cfg.c_z, cfg.c_f, 3, 1, 1, rng)?;
        Ok(FusionModule { name: name.to_string(), cfg, token_proj, attn_out, proj_conv })
    }

    /// Which branch a mask selects (the paper's case formula).
    pub fn branch_for(avail: &AvailabilityMask) -> FusionBranch {
        match avail.popcount() {
            2 => FusionBranch::CrossAttention,
            1 => FusionBranch::Projection,
            _ => unreachable!("masks are validated at construction"),
        }
    }

    /// Fuse available latents into a [c_f, d, h, w] condition tensor.
    /// `latents` must match the mask's available set (canonical order).
    pub fn fuse_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        latents: &[(Modality, Var)],
        avail: &AvailabilityMask,
    ) -> Result<Var> {
        let expected = avail.available();
        if latents.len() != expected.len()
            || latents.iter().map(|(m, _)| *m).ne(expected.iter().copied())
        {
            return Err(Error::config(format!(
                "latents {:?} do not match availability {:?}",
                latents.iter().map(|(m, _)| *m).collect::<Vec<_>>(),
                expected
            )));
        }
        let spatial = match tape.value(latents[0].1).shape() {
            [c, d, h, w] if *c == self.cfg.c_z => (*d, *h, *w),
            other => {
                return Err(Error::shape(
                    "fuse_available",
                    format!("latent {other:?} vs C_z={}", self.cfg.c_z),
                ))
            }
        };
        for (_, v) in latents.iter().skip(1) {
            if tape.value(*v).shape() != tape.value(latents[0].1).shape() {
                return Err(Error::shape(
                    "fuse_available",
                    "conditioning latents must share one shape".to_string(),
                ));
            }
        }
        let (d, h, w) = spatial;
        let n_tokens = d * h * w;
        match Self::branch_for(avail) {
            FusionBranch::Projection => self.proj_conv.forward(tape, bind, latents[0].1),
            FusionBranch::CrossAttention => {
                // [c_z, d, h, w] -> [N, c_z] token rows.
                let to_tokens = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
                    let flat = tape.reshape(v, &[self.cfg.c_z, n_tokens])?;
                    tape.transpose2d(flat)
                };
                let q_tokens = to_tokens(tape, latents[0].1)?;
                let kv_tokens = to_tokens(tape, latents[1].1)?;
                let q = self.token_proj.forward(tape, bind, q_tokens)?;
                let kv = self.token_proj.forward(tape, bind, kv_tokens)?;
                let weights = AttentionWeights {
                    wq: bind.var(&format!("{}.attn.wq", self.name)),
                    wk: bind.var(&format!("{}.attn.wk", self.name)),
                    wv: bind.var(&format!("{}.attn.wv", self.name)),
                    wo: bind.var(&format!("{}.attn.wo", self.name)),
                };
                let attn = cross_attention(tape, q, kv, self.cfg.heads, &weights)?;
                let mixed = tape.add(q, attn)?; // residual in token space
                let out = self.attn_out.forward(tape, bind, mixed)?;
                let out_t = tape.transpose2d(out)?;
                tape.reshape(out_t, &[self.cfg.c_f, d, h, w])
            }
        }
    }
}

/// Sort latents into canonical A < B < C order for fusion.
pub fn canonical_order(latents: &mut Vec<Latent>) {
    latents.sort_by_key(|l| l.modality.index());
}

// ---- text injection ----

/// Gated residual cross-attention of feature-map tokens over text tokens:
/// F <- F + g * CrossAttn(F, z_text). The gate starts at zero so injection
/// begins as the identity.
#[derive(Debug, Clone)]
pub struct InjectText {
    name: String,
    pub channels: usize,
    pub d_text: usize,
    pub attn_width: usize,
    pub heads: usize,
}

impl InjectText {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        channels: usize,
        d_text: usize,
        attn_width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let wq_std = T::of_f64(1.0 / (channels as f64).sqrt());
        let wkv_std = T::of_f64(1.0 / (d_text as f64).sqrt());
        let wo_std = T::of_f64(1.0 / (attn_width as f64).sqrt());
        params.insert(&format!("{name}.wq"), NdTensor::randn(&[channels, attn_width], wq_std, rng))?;
        params.insert(&format!("{name}.wk"), NdTensor::randn(&[d_text, attn_width], wkv_std, rng))?;
        params.insert(&format!("{name}.wv"), NdTensor::randn(&[d_text, attn_width], wkv_std, rng))?;
        params.insert(&format!("{name}.wo"), NdTensor::randn(&[attn_width, channels], wo_std, rng))?;
        params.insert(&format!("{name}.gate"), NdTensor::zeros(&[1]))?;
        Ok(InjectText { name: name.to_string(), channels, d_text, attn_width, heads })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        features: Var,
        z_text: Var,
    ) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        if shape[0] != self.channels {
            return Err(Error::shape(
                "inject_text",
                format!("features {shape:?} vs channels {}", self.channels),
            ));
        }
        let spatial: usize = shape[1..].iter().product();
        let flat = tape.reshape(features, &[self.channels, spatial])?;
        let tokens = tape.transpose2d(flat)?;
        let weights = AttentionWeights {
            wq: bind.var(&format!("{}.wq", self.name)),
            wk: bind.var(&format!("{}.wk", self.name)),
            wv: bind.var(&format!("{}.wv", self.name)),
            wo: bind.var(&format!("{}.wo", self.name)),
        };
        let attn = cross_attention(tape, tokens, z_text, self.heads, &weights)?;
        let gate = bind.var(&format!("{}.gate", self.name));
        let gated = tape.scale_by_var(attn, gate)?;
        let gated_t = tape.transpose2d(gated)?;
        let gated_map = tape.reshape(gated_t, &shape)?;
        tape.add(features, gated_map)
    }
}

// ---- availability embedding ----

/// Linear projection of the 3-bit availability vector into the timestep
/// embedding, added before FiLM parameter generation.
#[derive(Debug, Clone)]
pub struct AvailEmbed {
    name: String,
    pub dim: usize,
}

impl AvailEmbed {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let std = T::of_f64(1.0 / 3f64.sqrt());
        params.insert(&format!("{name}.w"), NdTensor::randn(&[3, dim], std, rng))?;
        Ok(AvailEmbed { name: name.to_string(), dim })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding<T>,
        avail: &AvailabilityMask,
    ) -> Result<Var> {
        let bits: Vec<T> = avail
            .bits()
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        let bits = tape.constant(NdTensor::new(vec![1, 3], bits)?);
        let w = bind.var(&format!("{}.w", self.name));
        let out = tape.matmul(bits, w)?;
        tape.reshape(out, &[self.dim])
    }
}

#[cfg(test)]
mod tests;
