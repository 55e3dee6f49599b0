use super::{expect_cols, expect_shape};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Result, Tensor};

/// Affine map `x·W + b` applied to every row of `x`.
#[derive(Debug, Clone, Copy)]
pub struct Dense<'a> {
    /// `[in, out]`
    pub w: &'a Tensor,
    /// `[out]`
    pub b: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseGrads {
    pub fn zeros_like(layer: &Dense<'_>) -> Self {
        Self {
            w: Tensor::zeros(layer.w.shape()),
            b: Tensor::zeros(layer.b.shape()),
        }
    }
}

impl Dense<'_> {
    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (i, o) = self.w.dims2()?;
        expect_shape("dense bias", self.b, &[o])?;
        expect_cols("dense", x, i)?;
        let n = x.rows();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.b.data());
        }
        gemm(x.data(), self.w.data(), &mut out, n, i, o);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        Tensor::new(shape, out)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut DenseGrads) -> Result<Tensor> {
        let (i, o) = self.w.dims2()?;
        expect_cols("dense backward", dy, o)?;
        let n = x.rows();
        gemm_tn(x.data(), dy.data(), grads.w.data_mut(), n, i, o);
        for r in 0..n {
            crate::tensor::axpy(1.0, dy.row(r), grads.b.data_mut());
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm_nt(dy.data(), self.w.data(), dx.data_mut(), n, o, i);
        Ok(dx)
    }
}
