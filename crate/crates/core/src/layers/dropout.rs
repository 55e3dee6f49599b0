use crate::rng::Rng;
use crate::tensor::Tensor;

/// Inverted dropout. Returns the output and, when elements were dropped, the
/// mask of `0` or `1/(1-p)` multipliers needed by the backward pass.
pub fn dropout_forward(
    x: &Tensor,
    p: f64,
    train_mode: bool,
    rng: Option<&mut Rng>,
) -> (Tensor, Option<Tensor>) {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    if !train_mode || p == 0.0 {
        return (x.clone(), None);
    }
    let rng = rng.expect("train-mode dropout needs an rng");
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(x.shape());
    for m in mask.data_mut() {
        *m = if rng.next_f64() < p { 0.0 } else { keep };
    }
    let out = x.mul(&mask).expect("mask shares input shape");
    (out, Some(mask))
}

pub fn dropout(x: &Tensor, p: f64, train_mode: bool, rng: Option<&mut Rng>) -> Tensor {
    dropout_forward(x, p, train_mode, rng).0
}

pub fn dropout_backward(dy: &Tensor, mask: Option<&Tensor>) -> Tensor {
    match mask {
        Some(m) => dy.mul(m).expect("mask shares gradient shape"),
        None => dy.clone(),
    }
}
