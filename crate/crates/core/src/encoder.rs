//! Input embedding and the stack of gated dilated residual blocks.
//!
//! A block maps `X: [n, d]` to `conv_a(X) ⊗ σ(conv_b(X)) + X`, both
//! convolutions sharing the block's dilation rate and reading the same
//! input. Batches are stacked row-wise as `[B * seg_len, d]`; every
//! convolution pads each sentence independently and padded rows are
//! zeroed after each block, so a sentence encodes the same way alone or
//! inside a padded batch.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, Float, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub kernel_size: usize,
    pub layers: usize,
    pub dilation_rates: Vec<usize>,
    pub dropout: f64,
    pub max_len: usize,
    pub glove_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            kernel_size: 3,
            layers: 6,
            dilation_rates: vec![1, 2, 4, 1, 1, 1],
            dropout: 0.1,
            max_len: 100,
            glove_dim: 300,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.len() != self.layers {
            return Err(Error::InvalidArgument(format!(
                "{} dilation rates given for {} layers",
                self.dilation_rates.len(),
                self.layers
            )));
        }
        if self.dilation_rates.iter().any(|&r| r < 1) {
            return Err(Error::InvalidArgument("dilation rates must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.hidden == 0 || self.max_len == 0 || self.glove_dim == 0 {
            return Err(Error::InvalidArgument("hidden, max_len and glove_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of input positions one output position depends on.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilation_rates.iter().map(|r| r * (self.kernel_size - 1)).sum::<usize>()
    }
}

/// Which parts of the block equation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    pub gate: bool,
    pub residual: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            gate: true,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub conv_a_kernel: ParamId,
    pub conv_a_bias: ParamId,
    pub conv_b_kernel: ParamId,
    pub conv_b_bias: ParamId,
}

impl BlockParams {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / (d * kernel_size) as f64).sqrt();
        Ok(Self {
            conv_a_kernel: store.insert(format!("{prefix}.conv_a.kernel"), rng::uniform(&[d, d, kernel_size], bound, rng))?,
            conv_a_bias: store.insert(format!("{prefix}.conv_a.bias"), rng::uniform(&[d], 0.0, rng))?,
            conv_b_kernel: store.insert(format!("{prefix}.conv_b.kernel"), rng::uniform(&[d, d, kernel_size], bound, rng))?,
            conv_b_bias: store.insert(format!("{prefix}.conv_b.bias"), rng::uniform(&[d], 0.0, rng))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub projection_weight: ParamId,
    pub projection_bias: ParamId,
    pub position: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn init<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let bound = (1.0 / config.glove_dim as f64).sqrt();
        let projection_weight = store.insert("embed.projection.weight", rng::uniform(&[d, config.glove_dim], bound, rng))?;
        let projection_bias = store.insert("embed.projection.bias", rng::uniform(&[d], 0.0, rng))?;
        let position = store.insert("embed.position", rng::uniform(&[config.max_len, d], 0.1, rng))?;
        let blocks = (0..config.layers)
            .map(|i| BlockParams::init(store, &format!("encoder.block{i}"), d, config.kernel_size, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            projection_weight,
            projection_bias,
            position,
            blocks,
        })
    }
}

/// Row layout of a stacked batch: `lens.len()` sentences of at most
/// `seg_len` tokens each.
#[derive(Debug, Clone)]
pub struct SegmentLayout {
    pub seg_len: usize,
    pub lens: Rc<[usize]>,
    pub keep: Rc<[bool]>,
}

impl SegmentLayout {
    pub fn new(lens: &[usize]) -> Result<Self> {
        let seg_len = lens.iter().copied().max().unwrap_or(0);
        if seg_len == 0 {
            return Err(Error::InvalidArgument("batch holds no tokens".into()));
        }
        if lens.iter().any(|&l| l == 0) {
            return Err(Error::InvalidArgument("empty sentence in batch".into()));
        }
        let keep: Vec<bool> = lens.iter().flat_map(|&l| (0..seg_len).map(move |i| i < l)).collect();
        Ok(Self {
            seg_len,
            lens: Rc::from(lens),
            keep: Rc::from(keep),
        })
    }

    pub fn rows(&self) -> usize {
        self.seg_len * self.lens.len()
    }

    pub fn row(&self, sentence: usize, position: usize) -> usize {
        sentence * self.seg_len + position
    }

    /// Position index of every row (padding rows reuse position 0).
    pub fn positions(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .map(|(r, &k)| if k { r % self.seg_len } else { 0 })
            .collect()
    }
}

/// `X = projection(glove rows) + position rows`, padded rows zeroed.
///
/// `glove_rows` holds the frozen word vectors already gathered per row.
pub fn embed_input<T: Float>(
    tape: &mut Tape<'_, T>,
    glove_rows: Var,
    params: &EncoderParams,
    layout: &SegmentLayout,
    max_len: usize,
) -> Result<Var> {
    if layout.seg_len > max_len {
        return Err(Error::InvalidArgument(format!(
            "sentence of {} tokens exceeds max length {max_len}",
            layout.seg_len
        )));
    }
    let w = tape.param(params.projection_weight);
    let b = tape.param(params.projection_bias);
    let projected = tape.linear(glove_rows, w, b)?;
    let table = tape.param(params.position);
    let positions = tape.gather_rows(table, layout.positions())?;
    let x = tape.add(projected, positions)?;
    tape.mask_rows(x, layout.keep.clone())
}

/// Dropout applied to block outputs during training.
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    block: &BlockParams,
    dilation: usize,
    layout: &SegmentLayout,
    options: BlockOptions,
    dropout: Option<&mut Dropout<'_, R>>,
) -> Result<Var> {
    let (ka, ba) = (tape.param(block.conv_a_kernel), tape.param(block.conv_a_bias));
    let ya = tape.conv1d_dilated(x, ka, ba, dilation, layout.seg_len)?;
    let mut y = if options.gate {
        let (kb, bb) = (tape.param(block.conv_b_kernel), tape.param(block.conv_b_bias));
        let yb = tape.conv1d_dilated(x, kb, bb, dilation, layout.seg_len)?;
        let gate = tape.sigmoid(yb);
        tape.mul(ya, gate)?
    } else {
        ya
    };
    if options.residual {
        y = tape.add(y, x)?;
    }
    if let Some(d) = dropout {
        y = tape.dropout(y, d.rate, d.rng)?;
    }
    tape.mask_rows(y, layout.keep.clone())
}

/// `H = Block_L(... Block_1(X))`.
pub fn encode<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    params: &EncoderParams,
    config: &EncoderConfig,
    layout: &SegmentLayout,
    options: BlockOptions,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> Result<Var> {
    if params.blocks.len() != config.layers {
        return Err(Error::InvalidArgument(format!(
            "{} blocks for {} configured layers",
            params.blocks.len(),
            config.layers
        )));
    }
    let mut h = x;
    for (block, &rate) in params.blocks.iter().zip(&config.dilation_rates) {
        h = block_forward(tape, h, block, rate, layout, options, dropout.as_deref_mut())?;
    }
    Ok(h)
}
