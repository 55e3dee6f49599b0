use serde::{Deserialize, Serialize};

use super::attention::{MhsaCache, MhsaGrads, MultiHeadSelfAttention};
use super::dense::{Dense, DenseGrads};
use super::dropout::{dropout_backward, dropout_forward};
use super::norm::{LayerNorm, LayerNormCache, LayerNormGrads};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout_p: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

/// Post-norm encoder block:
/// `y = LN(x + drop(MHSA(x)))`, `out = LN(y + drop(FFN(y)))`,
/// with `FFN = dense(d_ff) → relu → dense(d_model)`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer<'a> {
    pub dropout_p: f64,
    pub attn: MultiHeadSelfAttention<'a>,
    pub norm1: LayerNorm<'a>,
    pub ff1: Dense<'a>,
    pub ff2: Dense<'a>,
    pub norm2: LayerNorm<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerGrads {
    pub attn: MhsaGrads,
    pub norm1: LayerNormGrads,
    pub ff1: DenseGrads,
    pub ff2: DenseGrads,
    pub norm2: LayerNormGrads,
}

impl EncoderLayerGrads {
    pub fn zeros_like(l: &EncoderLayer<'_>) -> Self {
        Self {
            attn: MhsaGrads::zeros_like(&l.attn),
            norm1: LayerNormGrads::zeros_like(&l.norm1),
            ff1: DenseGrads::zeros_like(&l.ff1),
            ff2: DenseGrads::zeros_like(&l.ff2),
            norm2: LayerNormGrads::zeros_like(&l.norm2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    attn: MhsaCache,
    attn_mask: Option<Tensor>,
    norm1: LayerNormCache,
    y: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    ff_mask: Option<Tensor>,
    norm2: LayerNormCache,
}

impl EncoderLayer<'_> {
    pub fn forward(
        &self,
        x: &Tensor,
        train_mode: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Tensor, EncoderCache)> {
        let (a, attn_cache) = self.attn.forward(x)?;
        let (a, attn_mask) = dropout_forward(&a, self.dropout_p, train_mode, rng.as_deref_mut());
        let (y, norm1) = self.norm1.forward(&x.add(&a)?)?;
        let hidden_pre = self.ff1.forward(&y)?;
        let hidden = hidden_pre.map(|v| v.max(0.0));
        let f = self.ff2.forward(&hidden)?;
        let (f, ff_mask) = dropout_forward(&f, self.dropout_p, train_mode, rng.as_deref_mut());
        let (out, norm2) = self.norm2.forward(&y.add(&f)?)?;
        Ok((
            out,
            EncoderCache {
                attn: attn_cache,
                attn_mask,
                norm1,
                y,
                hidden_pre,
                hidden,
                ff_mask,
                norm2,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        dout: &Tensor,
        grads: &mut EncoderLayerGrads,
    ) -> Result<Tensor> {
        let dsum2 = self.norm2.backward(&cache.norm2, dout, &mut grads.norm2)?;
        let df = dropout_backward(&dsum2, cache.ff_mask.as_ref());
        let dhidden = self.ff2.backward(&cache.hidden, &df, &mut grads.ff2)?;
        let dhidden_pre = Tensor::new(
            dhidden.shape().to_vec(),
            dhidden
                .data()
                .iter()
                .zip(cache.hidden_pre.data())
                .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
                .collect(),
        )?;
        let mut dy = self.ff1.backward(&cache.y, &dhidden_pre, &mut grads.ff1)?;
        dy.add_assign(&dsum2)?;
        let dsum1 = self.norm1.backward(&cache.norm1, &dy, &mut grads.norm1)?;
        let da = dropout_backward(&dsum1, cache.attn_mask.as_ref());
        let mut dx = self.attn.backward(&cache.attn, &da, &mut grads.attn)?;
        dx.add_assign(&dsum1)?;
        Ok(dx)
    }
}
