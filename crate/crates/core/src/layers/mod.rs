//! Forward and explicit backward passes for every block of the two speed
//! models. Layers borrow their parameters; backward passes accumulate into
//! owned gradient structs so a batch can be summed without reallocation.
//!
//! All matrices are row-major with one time step (or sample) per row and the
//! row-vector convention `y = x·W + b`.

mod attention;
mod conv;
mod dense;
mod dropout;
mod encoder;
mod norm;
mod recurrent;

pub use attention::{
    positional_encoding, AttentionCache, MhsaCache, MhsaGrads, MultiHeadSelfAttention,
    TemporalAttention, TemporalAttentionGrads,
};
pub use conv::{Conv1d, Conv1dGrads, KERNEL_SIZE};
pub use dense::{Dense, DenseGrads};
pub use dropout::{dropout, dropout_backward, dropout_forward};
pub use encoder::{EncoderCache, EncoderConfig, EncoderLayer, EncoderLayerGrads};
pub use norm::{LayerNorm, LayerNormCache, LayerNormGrads, LAYER_NORM_EPS};
pub use recurrent::{CellKind, Recurrent, RecurrentCache, RecurrentGrads};

use crate::tensor::{Result, Tensor, TensorError};

pub(crate) fn expect_cols(op: &'static str, x: &Tensor, cols: usize) -> Result<()> {
    if x.cols() != cols || x.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![cols],
        });
    }
    Ok(())
}

pub(crate) fn expect_shape(op: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(())
}
