//! Additive temporal attention for the recurrent pipeline, scaled dot-product
//! multi-head self-attention and sinusoidal positional encodings for the
//! encoder pipeline.

use super::{expect_cols, expect_shape};
use crate::tensor::{
    axpy, dot, gemm, gemm_nt, gemm_tn, softmax_backward_into, softmax_into, Result, Tensor,
    TensorError,
};

/// `score_t = v·tanh(h_t·W)`, `α = softmax(score)`, `out_t = T·α_t·h_t`.
///
/// The output keeps the time axis so a convolution can follow. Scaling by `T`
/// makes uniform attention the identity map.
#[derive(Debug, Clone, Copy)]
pub struct TemporalAttention<'a> {
    /// `[H, H]`
    pub w: &'a Tensor,
    /// `[H]`
    pub v: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttentionGrads {
    pub w: Tensor,
    pub v: Tensor,
}

impl TemporalAttentionGrads {
    pub fn zeros_like(layer: &TemporalAttention<'_>) -> Self {
        Self {
            w: Tensor::zeros(layer.w.shape()),
            v: Tensor::zeros(layer.v.shape()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    h: Tensor,
    /// `tanh(h·W)`, `[T, H]`
    u: Tensor,
    alpha: Tensor,
}

impl AttentionCache {
    pub fn weights(&self) -> &Tensor {
        &self.alpha
    }
}

impl TemporalAttention<'_> {
    /// Returns the re-weighted sequence and the attention weights.
    pub fn forward(&self, h: &Tensor) -> Result<(Tensor, Tensor, AttentionCache)> {
        let d = self.v.len();
        expect_shape("attention w", self.w, &[d, d])?;
        expect_cols("attention", h, d)?;
        let t = h.rows();
        let mut u = Tensor::zeros(&[t, d]);
        gemm(h.data(), self.w.data(), u.data_mut(), t, d, d);
        u.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        let scores: Vec<f64> = (0..t).map(|r| dot(u.row(r), self.v.data())).collect();
        let mut alpha = vec![0.0; t];
        softmax_into(&scores, &mut alpha);
        let alpha = Tensor::vector(alpha);
        let mut out = Tensor::zeros(&[t, d]);
        for r in 0..t {
            axpy(t as f64 * alpha.data()[r], h.row(r), out.row_mut(r));
        }
        let cache = AttentionCache {
            h: h.clone(),
            u,
            alpha: alpha.clone(),
        };
        Ok((out, alpha, cache))
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Tensor,
        grads: &mut TemporalAttentionGrads,
    ) -> Result<Tensor> {
        let d = self.v.len();
        expect_shape("attention backward", dy, cache.h.shape())?;
        let t = cache.h.rows();
        let tf = t as f64;
        let alpha = cache.alpha.data();
        let mut dh = Tensor::zeros(&[t, d]);
        let dalpha: Vec<f64> = (0..t).map(|r| tf * dot(dy.row(r), cache.h.row(r))).collect();
        for r in 0..t {
            axpy(tf * alpha[r], dy.row(r), dh.row_mut(r));
        }
        let mut ds = vec![0.0; t];
        softmax_backward_into(alpha, &dalpha, &mut ds);
        // Through score_t = v·u_t and u_t = tanh(h_t·W).
        let mut dpre = Tensor::zeros(&[t, d]);
        for r in 0..t {
            let ur = cache.u.row(r);
            axpy(ds[r], ur, grads.v.data_mut());
            for (j, o) in dpre.row_mut(r).iter_mut().enumerate() {
                *o = ds[r] * self.v.data()[j] * (1.0 - ur[j] * ur[j]);
            }
        }
        gemm_tn(cache.h.data(), dpre.data(), grads.w.data_mut(), t, d, d);
        gemm_nt(dpre.data(), self.w.data(), dh.data_mut(), t, d, d);
        Ok(dh)
    }
}

/// Sinusoidal encodings: `PE[t, 2i] = sin(t/10000^(2i/d))`, `PE[t, 2i+1] = cos(·)`.
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![t, d_model],
            len: t * d_model,
        });
    }
    let mut pe = Tensor::zeros(&[t, d_model]);
    for pos in 0..t {
        let row = pe.row_mut(pos);
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Unmasked multi-head self-attention with learned Q, K, V and output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadSelfAttention<'a> {
    pub n_heads: usize,
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaGrads {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhsaGrads {
    pub fn zeros_like(l: &MultiHeadSelfAttention<'_>) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            wq: z(l.wq),
            bq: z(l.bq),
            wk: z(l.wk),
            bk: z(l.bk),
            wv: z(l.wv),
            bv: z(l.bv),
            wo: z(l.wo),
            bo: z(l.bo),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhsaCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per head `[T, T]` row-stochastic attention matrices.
    attn: Vec<Tensor>,
    /// Concatenated head outputs `[T, d]`.
    concat: Tensor,
}

impl MhsaCache {
    pub fn attention(&self) -> &[Tensor] {
        &self.attn
    }
}

impl MultiHeadSelfAttention<'_> {
    fn d_model(&self) -> Result<usize> {
        let d = self.bq.len();
        for (name, w) in [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)] {
            expect_shape(name, w, &[d, d])?;
        }
        for b in [self.bk, self.bv, self.bo] {
            expect_shape("mhsa bias", b, &[d])?;
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![d, self.n_heads],
                len: d,
            });
        }
        Ok(d)
    }

    fn project(x: &Tensor, w: &Tensor, b: &Tensor, t: usize, d: usize) -> Tensor {
        let mut out = Tensor::zeros(&[t, d]);
        for r in 0..t {
            out.row_mut(r).copy_from_slice(b.data());
        }
        gemm(x.data(), w.data(), out.data_mut(), t, d, d);
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MhsaCache)> {
        let d = self.d_model()?;
        expect_cols("mhsa", x, d)?;
        let t = x.rows();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = Self::project(x, self.wq, self.bq, t, d);
        let k = Self::project(x, self.wk, self.bk, t, d);
        let v = Self::project(x, self.wv, self.bv, t, d);
        let mut concat = Tensor::zeros(&[t, d]);
        let mut attn = Vec::with_capacity(self.n_heads);
        let mut scores = vec![0.0; t];
        for head in 0..self.n_heads {
            let off = head * dh;
            let mut a = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let qi = &q.row(i)[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                }
                softmax_into(&scores, a.row_mut(i));
                let ai = a.row(i).to_vec();
                let out = &mut concat.row_mut(i)[off..off + dh];
                for (j, &w) in ai.iter().enumerate() {
                    axpy(w, &v.row(j)[off..off + dh], out);
                }
            }
            attn.push(a);
        }
        let y = Self::project(&concat, self.wo, self.bo, t, d);
        Ok((
            y,
            MhsaCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                concat,
            },
        ))
    }

    pub fn backward(&self, cache: &MhsaCache, dy: &Tensor, grads: &mut MhsaGrads) -> Result<Tensor> {
        let d = self.d_model()?;
        expect_shape("mhsa backward", dy, cache.x.shape())?;
        let t = cache.x.rows();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        gemm_tn(cache.concat.data(), dy.data(), grads.wo.data_mut(), t, d, d);
        for r in 0..t {
            axpy(1.0, dy.row(r), grads.bo.data_mut());
        }
        let mut dconcat = Tensor::zeros(&[t, d]);
        gemm_nt(dy.data(), self.wo.data(), dconcat.data_mut(), t, d, d);

        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        let mut da = vec![0.0; t];
        let mut ds = vec![0.0; t];
        for (head, a) in cache.attn.iter().enumerate() {
            let off = head * dh;
            for i in 0..t {
                let doi = dconcat.row(i)[off..off + dh].to_vec();
                for j in 0..t {
                    da[j] = dot(&doi, &cache.v.row(j)[off..off + dh]);
                    axpy(a.get2(i, j), &doi, &mut dv.row_mut(j)[off..off + dh]);
                }
                softmax_backward_into(a.row(i), &da, &mut ds);
                for j in 0..t {
                    let g = ds[j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, &cache.k.row(j)[off..off + dh], &mut dq.row_mut(i)[off..off + dh]);
                    axpy(g, &cache.q.row(i)[off..off + dh], &mut dk.row_mut(j)[off..off + dh]);
                }
            }
        }

        let mut dx = Tensor::zeros(&[t, d]);
        for (dp, w, gw, gb) in [
            (&dq, self.wq, &mut grads.wq, &mut grads.bq),
            (&dk, self.wk, &mut grads.wk, &mut grads.bk),
            (&dv, self.wv, &mut grads.wv, &mut grads.bv),
        ] {
            gemm_tn(cache.x.data(), dp.data(), gw.data_mut(), t, d, d);
            for r in 0..t {
                axpy(1.0, dp.row(r), gb.data_mut());
            }
            gemm_nt(dp.data(), w.data(), dx.data_mut(), t, d, d);
        }
        Ok(dx)
    }
}
