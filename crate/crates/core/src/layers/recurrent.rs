//! Vanilla RNN, LSTM and GRU cells with full backpropagation through time.
//!
//! Gate weights are packed side by side: `wx: [C, G·H]`, `wh: [H, G·H]`,
//! `b: [G·H]` with `G` = 1 (RNN), 4 (LSTM: i, f, g, o) or 3 (GRU: z, r, n).
//! The initial hidden and cell states are zero.

use serde::{Deserialize, Serialize};

use super::{expect_cols, expect_shape};
use crate::tensor::{axpy, gemm, gemm_nt, gemm_tn, sigmoid, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Recurrent<'a> {
    pub kind: CellKind,
    pub wx: &'a Tensor,
    pub wh: &'a Tensor,
    pub b: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentGrads {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

impl RecurrentGrads {
    pub fn zeros_like(layer: &Recurrent<'_>) -> Self {
        Self {
            wx: Tensor::zeros(layer.wx.shape()),
            wh: Tensor::zeros(layer.wh.shape()),
            b: Tensor::zeros(layer.b.shape()),
        }
    }
}

/// Activations kept from an unrolled forward pass.
#[derive(Debug, Clone)]
pub struct RecurrentCache {
    x: Tensor,
    /// `[T, H]` hidden states.
    h: Tensor,
    /// `[T, G·H]` post-nonlinearity gate values (RNN: unused).
    gates: Tensor,
    /// LSTM cell states `[T, H]`; GRU `h_prev·W_hn` terms `[T, H]`.
    aux: Tensor,
}

impl RecurrentCache {
    pub fn hidden(&self) -> &Tensor {
        &self.h
    }
}

impl<'a> Recurrent<'a> {
    pub fn hidden_dim(&self) -> usize {
        self.wh.shape()[0]
    }

    fn check(&self) -> Result<(usize, usize, usize)> {
        let h = self.hidden_dim();
        let g = self.kind.gates() * h;
        let c = self.wx.shape()[0];
        expect_shape("recurrent wx", self.wx, &[c, g])?;
        expect_shape("recurrent wh", self.wh, &[h, g])?;
        expect_shape("recurrent b", self.b, &[g])?;
        Ok((c, h, g))
    }

    /// `h_t = tanh(x_t·W_x + h_prev·W_h + b)`.
    pub fn rnn_step(&self, x_t: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        assert_eq!(self.kind, CellKind::Rnn);
        let (c, h, _) = self.check()?;
        let pre = self.preact(x_t, h_prev, c, h)?;
        Ok(Tensor::vector(pre.into_iter().map(f64::tanh).collect()))
    }

    /// One LSTM step, returning `(h_t, c_t)`.
    pub fn lstm_step(&self, x_t: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        assert_eq!(self.kind, CellKind::Lstm);
        let (c, h, _) = self.check()?;
        expect_shape("lstm c_prev", c_prev, &[h])?;
        let pre = self.preact(x_t, h_prev, c, h)?;
        let mut gates = vec![0.0; 4 * h];
        let mut h_t = vec![0.0; h];
        let mut c_t = vec![0.0; h];
        lstm_pointwise(&pre, c_prev.data(), &mut gates, &mut c_t, &mut h_t);
        Ok((Tensor::vector(h_t), Tensor::vector(c_t)))
    }

    /// One GRU step.
    pub fn gru_step(&self, x_t: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        assert_eq!(self.kind, CellKind::Gru);
        let (c, h, g) = self.check()?;
        expect_shape("gru x", x_t, &[c])?;
        expect_shape("gru h_prev", h_prev, &[h])?;
        let mut xp = self.b.data().to_vec();
        gemm(x_t.data(), self.wx.data(), &mut xp, 1, c, g);
        let mut hp = vec![0.0; g];
        gemm(h_prev.data(), self.wh.data(), &mut hp, 1, h, g);
        let mut gates = vec![0.0; g];
        let mut h_t = vec![0.0; h];
        gru_pointwise(&xp, &hp, h_prev.data(), &mut gates, &mut h_t);
        Ok(Tensor::vector(h_t))
    }

    fn preact(&self, x_t: &Tensor, h_prev: &Tensor, c: usize, h: usize) -> Result<Vec<f64>> {
        expect_shape("recurrent x", x_t, &[c])?;
        expect_shape("recurrent h_prev", h_prev, &[h])?;
        let g = self.kind.gates() * h;
        let mut pre = self.b.data().to_vec();
        gemm(x_t.data(), self.wx.data(), &mut pre, 1, c, g);
        gemm(h_prev.data(), self.wh.data(), &mut pre, 1, h, g);
        Ok(pre)
    }

    /// Unrolls the cell over the rows of `x: [T, C]`, returning all hidden states `[T, H]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, RecurrentCache)> {
        let (c, h, g) = self.check()?;
        expect_cols("recurrent", x, c)?;
        let t = x.rows();
        // Input projections for every step at once.
        let mut xp = Tensor::zeros(&[t, g]);
        for r in 0..t {
            xp.row_mut(r).copy_from_slice(self.b.data());
        }
        gemm(x.data(), self.wx.data(), xp.data_mut(), t, c, g);

        let mut hs = Tensor::zeros(&[t, h]);
        let mut gates = Tensor::zeros(&[t, g]);
        let mut aux = Tensor::zeros(&[t, h]);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut hp = vec![0.0; g];
        for step in 0..t {
            hp.iter_mut().for_each(|v| *v = 0.0);
            gemm(&h_prev, self.wh.data(), &mut hp, 1, h, g);
            let xr = xp.row(step);
            match self.kind {
                CellKind::Rnn => {
                    for (o, (a, b)) in hs.row_mut(step).iter_mut().zip(xr.iter().zip(&hp)) {
                        *o = (a + b).tanh();
                    }
                }
                CellKind::Lstm => {
                    let pre: Vec<f64> = xr.iter().zip(&hp).map(|(a, b)| a + b).collect();
                    let mut c_t = vec![0.0; h];
                    let mut h_t = vec![0.0; h];
                    lstm_pointwise(&pre, &c_prev, gates.row_mut(step), &mut c_t, &mut h_t);
                    aux.row_mut(step).copy_from_slice(&c_t);
                    hs.row_mut(step).copy_from_slice(&h_t);
                    c_prev = c_t;
                }
                CellKind::Gru => {
                    let mut h_t = vec![0.0; h];
                    gru_pointwise(xr, &hp, &h_prev, gates.row_mut(step), &mut h_t);
                    aux.row_mut(step).copy_from_slice(&hp[2 * h..]);
                    hs.row_mut(step).copy_from_slice(&h_t);
                }
            }
            h_prev.copy_from_slice(hs.row(step));
        }
        let cache = RecurrentCache {
            x: x.clone(),
            h: hs.clone(),
            gates,
            aux,
        };
        Ok((hs, cache))
    }

    /// Backpropagation through time. `dh: [T, H]` is the loss gradient with
    /// respect to every emitted hidden state; returns `dL/dx`.
    pub fn backward(
        &self,
        cache: &RecurrentCache,
        dh: &Tensor,
        grads: &mut RecurrentGrads,
    ) -> Result<Tensor> {
        let (c, h, g) = self.check()?;
        expect_shape("recurrent backward", dh, cache.h.shape())?;
        let t = cache.h.rows();
        // Gradients w.r.t. the input projection and the recurrent projection.
        let mut dxp = Tensor::zeros(&[t, g]);
        let mut dhp = Tensor::zeros(&[t, g]);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let zeros = vec![0.0; h];

        for step in (0..t).rev() {
            let h_prev: &[f64] = if step > 0 { cache.h.row(step - 1) } else { &zeros };
            let dh_t: Vec<f64> = dh.row(step).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            match self.kind {
                CellKind::Rnn => {
                    let ht = cache.h.row(step);
                    let d = dxp.row_mut(step);
                    for j in 0..h {
                        d[j] = dh_t[j] * (1.0 - ht[j] * ht[j]);
                    }
                    let d = d.to_vec();
                    dhp.row_mut(step).copy_from_slice(&d);
                }
                CellKind::Lstm => {
                    let gt = cache.gates.row(step);
                    let (gi, rest) = gt.split_at(h);
                    let (gf, rest) = rest.split_at(h);
                    let (gg, go) = rest.split_at(h);
                    let ct = cache.aux.row(step);
                    let c_prev: &[f64] = if step > 0 { cache.aux.row(step - 1) } else { &zeros };
                    let d = dxp.row_mut(step);
                    for j in 0..h {
                        let tc = ct[j].tanh();
                        let dc = dc_next[j] + dh_t[j] * go[j] * (1.0 - tc * tc);
                        let d_o = dh_t[j] * tc;
                        let di = dc * gg[j];
                        let dg = dc * gi[j];
                        let df = dc * c_prev[j];
                        dc_next[j] = dc * gf[j];
                        d[j] = di * gi[j] * (1.0 - gi[j]);
                        d[h + j] = df * gf[j] * (1.0 - gf[j]);
                        d[2 * h + j] = dg * (1.0 - gg[j] * gg[j]);
                        d[3 * h + j] = d_o * go[j] * (1.0 - go[j]);
                    }
                    let d = d.to_vec();
                    dhp.row_mut(step).copy_from_slice(&d);
                }
                CellKind::Gru => {
                    let gt = cache.gates.row(step);
                    let (gz, rest) = gt.split_at(h);
                    let (gr, gn) = rest.split_at(h);
                    let hpn = cache.aux.row(step);
                    let dx_row = dxp.row_mut(step);
                    let mut dh_row = vec![0.0; g];
                    for j in 0..h {
                        let dn = dh_t[j] * (1.0 - gz[j]);
                        let dz = dh_t[j] * (h_prev[j] - gn[j]);
                        let dpre_n = dn * (1.0 - gn[j] * gn[j]);
                        let dr = dpre_n * hpn[j];
                        let dpre_z = dz * gz[j] * (1.0 - gz[j]);
                        let dpre_r = dr * gr[j] * (1.0 - gr[j]);
                        dx_row[j] = dpre_z;
                        dx_row[h + j] = dpre_r;
                        dx_row[2 * h + j] = dpre_n;
                        dh_row[j] = dpre_z;
                        dh_row[h + j] = dpre_r;
                        dh_row[2 * h + j] = dpre_n * gr[j];
                    }
                    dhp.row_mut(step).copy_from_slice(&dh_row);
                }
            }
            // Carry to the previous hidden state.
            let mut carry = vec![0.0; h];
            gemm_nt(dhp.row(step), self.wh.data(), &mut carry, 1, g, h);
            if self.kind == CellKind::Gru {
                let gz = &cache.gates.row(step)[..h];
                for j in 0..h {
                    carry[j] += dh_t[j] * gz[j];
                }
            }
            dh_next = carry;
        }

        gemm_tn(cache.x.data(), dxp.data(), grads.wx.data_mut(), t, c, g);
        for r in 0..t {
            axpy(1.0, dxp.row(r), grads.b.data_mut());
        }
        if t > 1 {
            gemm_tn(
                &cache.h.data()[..(t - 1) * h],
                &dhp.data()[g..],
                grads.wh.data_mut(),
                t - 1,
                h,
                g,
            );
        }
        let mut dx = Tensor::zeros(&[t, c]);
        gemm_nt(dxp.data(), self.wx.data(), dx.data_mut(), t, g, c);
        Ok(dx)
    }
}

fn lstm_pointwise(pre: &[f64], c_prev: &[f64], gates: &mut [f64], c_t: &mut [f64], h_t: &mut [f64]) {
    let h = c_prev.len();
    for j in 0..h {
        let i = sigmoid(pre[j]);
        let f = sigmoid(pre[h + j]);
        let g = pre[2 * h + j].tanh();
        let o = sigmoid(pre[3 * h + j]);
        gates[j] = i;
        gates[h + j] = f;
        gates[2 * h + j] = g;
        gates[3 * h + j] = o;
        c_t[j] = f * c_prev[j] + i * g;
        h_t[j] = o * c_t[j].tanh();
    }
}

/// `xp` includes the bias; `hp` is `h_prev·W_h` without bias.
fn gru_pointwise(xp: &[f64], hp: &[f64], h_prev: &[f64], gates: &mut [f64], h_t: &mut [f64]) {
    let h = h_prev.len();
    for j in 0..h {
        let z = sigmoid(xp[j] + hp[j]);
        let r = sigmoid(xp[h + j] + hp[h + j]);
        let n = (xp[2 * h + j] + r * hp[2 * h + j]).tanh();
        gates[j] = z;
        gates[h + j] = r;
        gates[2 * h + j] = n;
        h_t[j] = (1.0 - z) * n + z * h_prev[j];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::*;
    use crate::rng::Rng;

    struct Owned {
        kind: CellKind,
        wx: Tensor,
        wh: Tensor,
        b: Tensor,
    }

    impl Owned {
        fn random(kind: CellKind, c: usize, h: usize, rng: &mut Rng) -> Self {
            let g = kind.gates() * h;
            Self {
                kind,
                wx: random(&[c, g], 0.8, rng),
                wh: random(&[h, g], 0.8, rng),
                b: random(&[g], 0.5, rng),
            }
        }

        fn zeros(kind: CellKind, c: usize, h: usize) -> Self {
            let g = kind.gates() * h;
            Self {
                kind,
                wx: Tensor::zeros(&[c, g]),
                wh: Tensor::zeros(&[h, g]),
                b: Tensor::zeros(&[g]),
            }
        }

        fn layer(&self) -> Recurrent<'_> {
            Recurrent {
                kind: self.kind,
                wx: &self.wx,
                wh: &self.wh,
                b: &self.b,
            }
        }
    }

    #[test]
    fn zero_params_give_zero_state() {
        let x = Tensor::zeros(&[3]);
        let h = Tensor::zeros(&[4]);
        let rnn = Owned::zeros(CellKind::Rnn, 3, 4);
        assert_eq!(rnn.layer().rnn_step(&x, &h).unwrap(), h);
        let gru = Owned::zeros(CellKind::Gru, 3, 4);
        assert_eq!(gru.layer().gru_step(&x, &h).unwrap(), h);
        let lstm = Owned::zeros(CellKind::Lstm, 3, 4);
        let (h1, c1) = lstm.layer().lstm_step(&x, &h, &h).unwrap();
        assert_eq!(h1, h);
        assert_eq!(c1, h);
    }

    #[test]
    fn lstm_zero_params_halve_cell_state() {
        let lstm = Owned::zeros(CellKind::Lstm, 2, 3);
        let x = Tensor::vector(vec![0.7, -1.0]);
        let h = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let c = Tensor::vector(vec![1.0, -2.0, 4.0]);
        let (h1, c1) = lstm.layer().lstm_step(&x, &h, &c).unwrap();
        for j in 0..3 {
            let want_c = 0.5 * c.data()[j];
            assert_eq!(c1.data()[j], want_c);
            assert!((h1.data()[j] - 0.5 * want_c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn rnn_without_recurrence_is_tanh_dense() {
        let mut rng = Rng::new(3);
        let mut cell = Owned::random(CellKind::Rnn, 3, 4, &mut rng);
        cell.wh.fill(0.0);
        let x = random(&[3], 1.0, &mut rng);
        let h = random(&[4], 1.0, &mut rng);
        let out = cell.layer().rnn_step(&x, &h).unwrap();
        let dense = crate::layers::Dense { w: &cell.wx, b: &cell.b }.forward(&x).unwrap();
        assert!(out.max_abs_diff(&dense.map(f64::tanh)) < 1e-15);
    }

    #[test]
    fn saturated_forget_gate_preserves_memory() {
        let (c, h) = (3, 4);
        let mut rng = Rng::new(12);
        let mut cell = Owned::random(CellKind::Lstm, c, h, &mut rng);
        // Forget gate driven by its bias alone.
        for r in 0..c {
            cell.wx.row_mut(r)[h..2 * h].fill(0.0);
        }
        for r in 0..h {
            cell.wh.row_mut(r)[h..2 * h].fill(0.0);
        }
        cell.b.data_mut()[h..2 * h].fill(20.0);
        let x = random(&[c], 1.0, &mut rng);
        let hp = random(&[h], 1.0, &mut rng);
        let cp = random(&[h], 2.0, &mut rng);
        let (_, c1) = cell.layer().lstm_step(&x, &hp, &cp).unwrap();

        let mut pre = cell.b.data().to_vec();
        gemm(x.data(), cell.wx.data(), &mut pre, 1, c, 4 * h);
        gemm(hp.data(), cell.wh.data(), &mut pre, 1, h, 4 * h);
        for j in 0..h {
            let ig = sigmoid(pre[j]) * pre[2 * h + j].tanh();
            assert!((c1.data()[j] - (cp.data()[j] + ig)).abs() < 1e-8);
        }
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let (c, h) = (3, 4);
        let mut rng = Rng::new(13);
        let mut cell = Owned::random(CellKind::Gru, c, h, &mut rng);
        for r in 0..c {
            cell.wx.row_mut(r)[..h].fill(0.0);
        }
        for r in 0..h {
            cell.wh.row_mut(r)[..h].fill(0.0);
        }
        cell.b.data_mut()[..h].fill(20.0);
        let x = random(&[c], 1.0, &mut rng);
        let hp = random(&[h], 1.0, &mut rng);
        let h1 = cell.layer().gru_step(&x, &hp).unwrap();
        assert!(h1.max_abs_diff(&hp) < 1e-8);
    }

    #[test]
    fn unrolled_forward_matches_single_steps() {
        let mut rng = Rng::new(21);
        for kind in [CellKind::Rnn, CellKind::Lstm, CellKind::Gru] {
            let cell = Owned::random(kind, 3, 5, &mut rng);
            let layer = cell.layer();
            let x = random(&[4, 3], 1.0, &mut rng);
            let (hs, _) = layer.forward(&x).unwrap();
            let mut h = Tensor::zeros(&[5]);
            let mut cs = Tensor::zeros(&[5]);
            for t in 0..4 {
                let xt = Tensor::vector(x.row(t).to_vec());
                h = match kind {
                    CellKind::Rnn => layer.rnn_step(&xt, &h).unwrap(),
                    CellKind::Gru => layer.gru_step(&xt, &h).unwrap(),
                    CellKind::Lstm => {
                        let (h1, c1) = layer.lstm_step(&xt, &h, &cs).unwrap();
                        cs = c1;
                        h1
                    }
                };
                let row = Tensor::vector(hs.row(t).to_vec());
                assert!(row.max_abs_diff(&h) < 1e-14, "{kind:?} step {t}");
            }
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for kind in [CellKind::Rnn, CellKind::Lstm, CellKind::Gru] {
            for seed in 0..3 {
                let mut rng = Rng::new(500 + seed);
                let cell = Owned::random(kind, 3, 4, &mut rng);
                let x = random(&[5, 3], 1.0, &mut rng);
                let cw = random(&[5, 4], 1.0, &mut rng);
                let layer = cell.layer();
                let (_, cache) = layer.forward(&x).unwrap();
                let mut g = RecurrentGrads::zeros_like(&layer);
                let dx = layer.backward(&cache, &cw, &mut g).unwrap();

                let loss = |wx: &Tensor, wh: &Tensor, b: &Tensor, x: &Tensor| {
                    let l = Recurrent { kind, wx, wh, b };
                    weighted(&l.forward(x).unwrap().0, &cw)
                };
                check("wx", &g.wx, &cell.wx, |p| loss(p, &cell.wh, &cell.b, &x));
                check("wh", &g.wh, &cell.wh, |p| loss(&cell.wx, p, &cell.b, &x));
                check("b", &g.b, &cell.b, |p| loss(&cell.wx, &cell.wh, p, &x));
                check("x", &dx, &x, |p| loss(&cell.wx, &cell.wh, &cell.b, p));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cell = Owned::random(CellKind::Lstm, 3, 4, &mut Rng::new(7));
        let x = random(&[6, 3], 1.0, &mut Rng::new(8));
        let a = cell.layer().forward(&x).unwrap().0;
        let b = cell.layer().forward(&x).unwrap().0;
        assert_eq!(a, b);
    }
}
