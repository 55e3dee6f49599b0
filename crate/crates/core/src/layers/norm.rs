use super::{expect_cols, expect_shape};
use crate::tensor::{Result, Tensor};

/// Variance offset. Kept tiny so a normalized row has unit variance to ~1e-12.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm<'a> {
    pub gain: &'a Tensor,
    pub bias: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormGrads {
    pub fn zeros_like(layer: &LayerNorm<'_>) -> Self {
        Self {
            gain: Tensor::zeros(layer.gain.shape()),
            bias: Tensor::zeros(layer.bias.shape()),
        }
    }
}

impl LayerNorm<'_> {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = self.gain.len();
        expect_shape("layernorm bias", self.bias, &[d])?;
        expect_cols("layernorm", x, d)?;
        let n = x.rows();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = self.gain.data()[j] * xh[j] + self.bias.data()[j];
            }
        }
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Tensor,
        grads: &mut LayerNormGrads,
    ) -> Result<Tensor> {
        let d = self.gain.len();
        expect_cols("layernorm backward", dy, d)?;
        let n = dy.rows();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let xh = cache.xhat.row(r);
            let g = dy.row(r);
            for j in 0..d {
                grads.gain.data_mut()[j] += g[j] * xh[j];
                grads.bias.data_mut()[j] += g[j];
                dxhat[j] = g[j] * self.gain.data()[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::*;
    use crate::rng::Rng;

    #[test]
    fn rows_have_zero_mean_unit_variance() {
        let mut rng = Rng::new(4);
        let x = random(&[6, 8], 5.0, &mut rng);
        let gain = Tensor::ones(&[8]);
        let bias = Tensor::zeros(&[8]);
        let (y, _) = LayerNorm { gain: &gain, bias: &bias }.forward(&x).unwrap();
        for r in 0..6 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(40 + seed);
            let x = random(&[3, 6], 1.0, &mut rng);
            let gain = random(&[6], 1.0, &mut rng);
            let bias = random(&[6], 1.0, &mut rng);
            let c = random(&[3, 6], 1.0, &mut rng);
            let ln = LayerNorm { gain: &gain, bias: &bias };
            let (_, cache) = ln.forward(&x).unwrap();
            let mut g = LayerNormGrads::zeros_like(&ln);
            let dx = ln.backward(&cache, &c, &mut g).unwrap();
            check("ln x", &dx, &x, |x2| weighted(&ln.forward(x2).unwrap().0, &c));
            check("ln gain", &g.gain, &gain, |g2| {
                weighted(&LayerNorm { gain: g2, bias: &bias }.forward(&x).unwrap().0, &c)
            });
            check("ln bias", &g.bias, &bias, |b2| {
                weighted(&LayerNorm { gain: &gain, bias: b2 }.forward(&x).unwrap().0, &c)
            });
        }
    }
}
