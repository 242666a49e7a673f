//! Multi-head attention composed from tape primitives, plus the sinusoidal
//! timestep embedding.

use super::{NdTensor, Scalar, Tape, Var};
use crate::{Error, Result};

/// Projection set for one attention op: all four matrices live on the tape.
/// `wq`: [d_q_in, d_attn], `wk`/`wv`: [d_kv_in, d_attn], `wo`: [d_attn, d_out].
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Scaled dot-product cross-attention: query rows attend over key/value rows.
/// Per head: softmax(Q K^T / sqrt(d_attn/heads)) V; heads are concatenated
/// and output-projected. Row-stochastic attention by construction.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    key_value: Var,
    heads: usize,
    w: &AttentionWeights,
) -> Result<Var> {
    let d_attn = match tape.value(w.wq).shape() {
        [_, d] => *d,
        other => return Err(Error::shape("cross_attention", format!("wq must be 2-D, got {other:?}"))),
    };
    if heads == 0 || d_attn % heads != 0 {
        return Err(Error::config(format!(
            "attention width {d_attn} not divisible by {heads} heads"
        )));
    }
    let dh = d_attn / heads;
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());

    let q = tape.matmul(query, w.wq)?; // [N_q, d_attn]
    let k = tape.matmul(key_value, w.wk)?; // [N_kv, d_attn]
    let v = tape.matmul(key_value, w.wv)?; // [N_kv, d_attn]

    // Column-slice one head: transpose, take channel rows, transpose back.
    let mut slice_head = |tape: &mut Tape<T>, m: Var, h: usize| -> Result<Var> {
        let mt = tape.transpose2d(m)?;
        let s = tape.slice_channels(mt, h * dh, (h + 1) * dh)?;
        tape.transpose2d(s)
    };

    let mut concat: Option<Var> = None; // [d_attn, N_q] accumulated head-wise
    for h in 0..heads {
        let qh = slice_head(tape, q, h)?;
        let kh = slice_head(tape, k, h)?;
        let vh = slice_head(tape, v, h)?;
        let scores = tape.matmul_nt(qh, kh)?; // [N_q, N_kv]
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        let out_h = tape.matmul(attn, vh)?; // [N_q, dh]
        let out_h_t = tape.transpose2d(out_h)?; // [dh, N_q]
        concat = Some(match concat {
            None => out_h_t,
            Some(prev) => tape.concat_channels(prev, out_h_t)?,
        });
    }
    let merged = tape.transpose2d(concat.expect("heads >= 1"))?; // [N_q, d_attn]
    tape.matmul(merged, w.wo)
}

/// Self-sized multi-head attention: query [N_q, d] attends over key/value
/// rows [N_kv, d] with square [d, d] projections.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    key_value: Var,
    heads: usize,
    w: &AttentionWeights,
) -> Result<Var> {
    let d = match tape.value(query).shape() {
        [_, d] => *d,
        other => return Err(Error::shape("multi_head_attention", format!("query must be 2-D, got {other:?}"))),
    };
    match tape.value(key_value).shape() {
        [_, dk] if *dk == d => {}
        other => {
            return Err(Error::shape(
                "multi_head_attention",
                format!("key/value width {other:?} vs query width {d}"),
            ))
        }
    }
    for (name, var) in [("wq", w.wq), ("wk", w.wk), ("wv", w.wv), ("wo", w.wo)] {
        if tape.value(var).shape() != [d, d] {
            return Err(Error::shape(
                "multi_head_attention",
                format!("{name} must be [{d}, {d}], got {:?}", tape.value(var).shape()),
            ));
        }
    }
    cross_attention(tape, query, key_value, heads, w)
}

/// Sinusoidal embedding of a (continuous) timestep into `dim` channels:
/// interleaved sin/cos over a geometric frequency ladder.
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Result<NdTensor<T>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::config(format!("sinusoidal embedding dim must be even >= 2, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.push(T::of_f64((t * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.push(T::of_f64((t * freq).cos()));
    }
    NdTensor::new(vec![dim], data)
}
