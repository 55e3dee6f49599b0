use super::{expect_cols, expect_shape};
use crate::tensor::{axpy, gemm, gemm_nt, gemm_tn, Result, Tensor};

pub const KERNEL_SIZE: usize = 3;

/// Temporal convolution with kernel 3, stride 1 and zero "same" padding:
/// `out[t] = b + Σ_{k∈{-1,0,1}} x[t+k]·W_k`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d<'a> {
    /// `[3, c_in, c_out]`; tap 0 multiplies `x[t-1]`.
    pub w: &'a Tensor,
    /// `[c_out]`
    pub b: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dGrads {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv1dGrads {
    pub fn zeros_like(layer: &Conv1d<'_>) -> Self {
        Self {
            w: Tensor::zeros(layer.w.shape()),
            b: Tensor::zeros(layer.b.shape()),
        }
    }
}

/// Output and input row ranges touched by tap `k` over a length-`t` sequence.
fn tap_ranges(k: usize, t: usize) -> (usize, usize, usize) {
    // (first output row, first input row, row count)
    match k {
        0 => (1, 0, t - 1),
        1 => (0, 0, t),
        _ => (0, 1, t - 1),
    }
}

impl Conv1d<'_> {
    fn dims(&self) -> Result<(usize, usize)> {
        let s = self.w.shape();
        if s.len() != 3 || s[0] != KERNEL_SIZE {
            return Err(crate::tensor::TensorError::Rank {
                op: "conv1d kernel",
                expected: 3,
                shape: s.to_vec(),
            });
        }
        expect_shape("conv1d bias", self.b, &[s[2]])?;
        Ok((s[1], s[2]))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cin, cout) = self.dims()?;
        expect_cols("conv1d", x, cin)?;
        let t = x.rows();
        let mut out = Tensor::zeros(&[t, cout]);
        for r in 0..t {
            out.row_mut(r).copy_from_slice(self.b.data());
        }
        let tap_len = cin * cout;
        for k in 0..KERNEL_SIZE {
            let (o0, i0, n) = tap_ranges(k, t);
            if n == 0 {
                continue;
            }
            gemm(
                &x.data()[i0 * cin..(i0 + n) * cin],
                &self.w.data()[k * tap_len..(k + 1) * tap_len],
                &mut out.data_mut()[o0 * cout..(o0 + n) * cout],
                n,
                cin,
                cout,
            );
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Conv1dGrads) -> Result<Tensor> {
        let (cin, cout) = self.dims()?;
        expect_cols("conv1d backward", dy, cout)?;
        let t = x.rows();
        let tap_len = cin * cout;
        let mut dx = Tensor::zeros(&[t, cin]);
        for r in 0..t {
            axpy(1.0, dy.row(r), grads.b.data_mut());
        }
        for k in 0..KERNEL_SIZE {
            let (o0, i0, n) = tap_ranges(k, t);
            if n == 0 {
                continue;
            }
            let xs = &x.data()[i0 * cin..(i0 + n) * cin];
            let dys = &dy.data()[o0 * cout..(o0 + n) * cout];
            gemm_tn(
                xs,
                dys,
                &mut grads.w.data_mut()[k * tap_len..(k + 1) * tap_len],
                n,
                cin,
                cout,
            );
            gemm_nt(
                dys,
                &self.w.data()[k * tap_len..(k + 1) * tap_len],
                &mut dx.data_mut()[i0 * cin..(i0 + n) * cin],
                n,
                cout,
                cin,
            );
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::*;
    use crate::rng::Rng;

    /// Direct sliding-window summation.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (t, cin) = x.dims2().unwrap();
        let cout = b.len();
        let mut out = Tensor::zeros(&[t, cout]);
        for ti in 0..t {
            for o in 0..cout {
                let mut s = b.data()[o];
                for k in 0..3 {
                    let src = ti as isize + k as isize - 1;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for i in 0..cin {
                        s += x.get2(src as usize, i) * w.data()[(k * cin + i) * cout + o];
                    }
                }
                out.data_mut()[ti * cout + o] = s;
            }
        }
        out
    }

    #[test]
    fn zero_kernel_emits_bias() {
        let w = Tensor::zeros(&[3, 2, 3]);
        let b = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let y = Conv1d { w: &w, b: &b }.forward(&x).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), b.data());
        }
    }

    #[test]
    fn center_identity_tap_is_identity() {
        let c = 4;
        let mut w = Tensor::zeros(&[3, c, c]);
        for i in 0..c {
            w.data_mut()[c * c + i * c + i] = 1.0;
        }
        let b = Tensor::zeros(&[c]);
        let x = random(&[5, c], 1.0, &mut Rng::new(2));
        assert_eq!(Conv1d { w: &w, b: &b }.forward(&x).unwrap(), x);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = Rng::new(8);
        let x = random(&[6, 4], 1.0, &mut rng);
        let w = random(&[3, 4, 5], 1.0, &mut rng);
        let b = random(&[5], 1.0, &mut rng);
        let y = Conv1d { w: &w, b: &b }.forward(&x).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn single_step_sequence() {
        let mut rng = Rng::new(1);
        let x = random(&[1, 3], 1.0, &mut rng);
        let w = random(&[3, 3, 2], 1.0, &mut rng);
        let b = random(&[2], 1.0, &mut rng);
        let y = Conv1d { w: &w, b: &b }.forward(&x).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(100 + seed);
            let x = random(&[5, 3], 1.0, &mut rng);
            let w = random(&[3, 3, 4], 1.0, &mut rng);
            let b = random(&[4], 1.0, &mut rng);
            let c = random(&[5, 4], 1.0, &mut rng);
            let layer = Conv1d { w: &w, b: &b };
            let mut g = Conv1dGrads::zeros_like(&layer);
            let dx = layer.backward(&x, &c, &mut g).unwrap();
            check("conv w", &g.w, &w, |w2| weighted(&Conv1d { w: w2, b: &b }.forward(&x).unwrap(), &c));
            check("conv b", &g.b, &b, |b2| weighted(&Conv1d { w: &w, b: b2 }.forward(&x).unwrap(), &c));
            check("conv x", &dx, &x, |x2| weighted(&layer.forward(x2).unwrap(), &c));
        }
    }
}
