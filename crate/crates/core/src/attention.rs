//! Auxiliary self-attention features: `softmax(Q Kᵀ / √d_k) V` with affine
//! `Q`, `K`, `V` projections of the encoder output. Two independent
//! instances exist, one feeding head tagging and one feeding tail tagging.

use rand::Rng;

use crate::encoder::SegmentLayout;
use crate::error::{Error, Result};
use crate::numerics::{rng, Float, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
}

impl AttentionParams {
    /// Registers `{prefix}.w_q`, `{prefix}.b_q`, ... with `[d, d]` weights.
    pub fn init<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let bound = (1.0 / d as f64).sqrt();
        let mut weight = |store: &mut ParamStore<T>, name: &str| store.insert(format!("{prefix}.{name}"), rng::uniform(&[d, d], bound, rng));
        let w_q = weight(store, "w_q")?;
        let w_k = weight(store, "w_k")?;
        let w_v = weight(store, "w_v")?;
        let zeros = |store: &mut ParamStore<T>, name: &str| store.insert(format!("{prefix}.{name}"), crate::numerics::Tensor::zeros([d]));
        Ok(Self {
            w_q,
            b_q: zeros(store, "b_q")?,
            w_k,
            b_k: zeros(store, "b_k")?,
            w_v,
            b_v: zeros(store, "b_v")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v]
    }
}

/// Self-attention over each sentence of the batch. Keys beyond a
/// sentence's length are masked out. With `heads > 1` the projections are
/// split column-wise and each head uses `d_k = d / heads`.
pub fn aux_features<T: Float>(
    tape: &mut Tape<'_, T>,
    h: Var,
    params: &AttentionParams,
    heads: usize,
    layout: &SegmentLayout,
) -> Result<Var> {
    let d = tape.value(h).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("{heads} attention heads do not divide width {d}")));
    }
    if tape.value(h).rows() != layout.rows() {
        return Err(Error::shape("aux_features", format!("{} rows vs layout of {}", tape.value(h).rows(), layout.rows())));
    }
    let project = |tape: &mut Tape<'_, T>, w, b| -> Result<Var> {
        let (w, b) = (tape.param(w), tape.param(b));
        tape.linear(h, w, b)
    };
    let q = project(tape, params.w_q, params.b_q)?;
    let k = project(tape, params.w_k, params.b_k)?;
    let v = project(tape, params.w_v, params.b_v)?;
    let d_k = d / heads;
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let (lo, hi) = (head * d_k, (head + 1) * d_k);
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let scores = tape.seg_matmul_nt(qh, kh, layout.seg_len)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax_rows(scores, layout.seg_len, layout.lens.clone())?;
        outputs.push(tape.seg_matmul(weights, vh, layout.seg_len)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        tape.concat_cols(&outputs)
    }
}
