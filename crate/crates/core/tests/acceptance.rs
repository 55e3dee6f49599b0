//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero if a hard criterion fails.
//!
//! Set `TRACKSPEED_EXTERNAL_DATA=/path/to/tracks.jsonl` to run the
//! external-data harness on a real converted dataset; otherwise it runs on the
//! held-out synthetic tracks so the code path is still exercised.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use trackspeed::dataio::{self, split_dataset, write_tracks, Track};
use trackspeed::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_EPS};
use trackspeed::layers::{
    CellKind, Conv1d, Conv1dGrads, Dense, DenseGrads, EncoderLayer, EncoderLayerGrads, LayerNorm,
    LayerNormGrads, MhsaGrads, MultiHeadSelfAttention, Recurrent, RecurrentGrads,
    TemporalAttention, TemporalAttentionGrads,
};
use trackspeed::metrics::{self, accuracy_pct, emit_report, evaluate, rmse, Metrics};
use trackspeed::models::{stack_windows, ModelConfig, SpeedModel, TargetStats, Variant};
use trackspeed::synth::{
    generate_dataset, generate_track, oracle_speed_lateral, CameraConfig, DatasetConfig, ScenarioConfig,
};
use trackspeed::train::{fit, Checkpoint, History, TrainConfig};
use trackspeed::{Rng, Tensor};

const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

/// Thresholds pinned from the first full run (lowest accuracy 97.5 %, highest
/// RMSE 2.07 km/h across variants; LSTM 98.7 % and 1.03 km/h) minus a margin.
const MIN_ACCURACY: f64 = 95.0;
const MAX_RMSE: f64 = 3.5;
const LSTM_MIN_ACCURACY: f64 = 97.0;
const LSTM_MAX_RMSE: f64 = 2.0;

type Outcome = Result<String, String>;

struct Report {
    hard_failures: usize,
}

impl Report {
    fn record(&mut self, name: &str, soft: bool, started: Instant, outcome: Outcome) {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} ({secs:.1}s)"),
            Err(reason) => {
                let tag = if soft { " (soft, investigation notes required)" } else { "" };
                println!("[FAIL] {name}{tag}: {reason} ({secs:.1}s)");
                if !soft {
                    self.hard_failures += 1;
                }
            }
        }
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-scale, scale));
    t
}

fn weighted(y: &Tensor, c: &Tensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Checks a layer whose parameters are `p` and input is `x`.
/// `forward` returns the output; `backward` returns the parameter gradients
/// followed by the input gradient for upstream `dy`.
fn check_layer(
    p: &[Tensor],
    x: &Tensor,
    forward: impl Fn(&[Tensor], &Tensor) -> Tensor,
    backward: impl Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Tensor>,
    rng: &mut Rng,
) -> f64 {
    let y = forward(p, x);
    let c = random(y.shape(), 1.0, rng);
    let analytic = backward(p, x, &c);
    assert_eq!(analytic.len(), p.len() + 1, "backward must return every parameter plus dx");
    let mut worst: f64 = 0.0;
    for (i, a) in analytic[..p.len()].iter().enumerate() {
        let n = finite_diff_grad(
            |pi| {
                let mut q = p.to_vec();
                q[i] = pi.clone();
                weighted(&forward(&q, x), &c)
            },
            &p[i],
            DEFAULT_EPS,
        )
        .expect("finite objective");
        worst = worst.max(max_rel_error(a, &n, ABS_FLOOR));
    }
    let n = finite_diff_grad(|xi| weighted(&forward(p, xi), &c), x, DEFAULT_EPS).expect("finite objective");
    worst.max(max_rel_error(&analytic[p.len()], &n, ABS_FLOOR))
}

fn recurrent(kind: CellKind, p: &[Tensor]) -> Recurrent<'_> {
    Recurrent {
        kind,
        wx: &p[0],
        wh: &p[1],
        b: &p[2],
    }
}

fn mhsa(p: &[Tensor], n_heads: usize) -> MultiHeadSelfAttention<'_> {
    MultiHeadSelfAttention {
        n_heads,
        wq: &p[0],
        bq: &p[1],
        wk: &p[2],
        bk: &p[3],
        wv: &p[4],
        bv: &p[5],
        wo: &p[6],
        bo: &p[7],
    }
}

fn mhsa_grads(g: MhsaGrads) -> Vec<Tensor> {
    vec![g.wq, g.bq, g.wk, g.bk, g.wv, g.bv, g.wo, g.bo]
}

fn mhsa_params(d: usize, rng: &mut Rng) -> Vec<Tensor> {
    let mut p = Vec::new();
    for _ in 0..4 {
        p.push(random(&[d, d], 0.5, rng));
        p.push(random(&[d], 0.2, rng));
    }
    p
}

fn encoder(p: &[Tensor], n_heads: usize, dropout_p: f64) -> EncoderLayer<'_> {
    EncoderLayer {
        dropout_p,
        attn: mhsa(&p[..8], n_heads),
        norm1: LayerNorm {
            gain: &p[8],
            bias: &p[9],
        },
        ff1: Dense { w: &p[10], b: &p[11] },
        ff2: Dense { w: &p[12], b: &p[13] },
        norm2: LayerNorm {
            gain: &p[14],
            bias: &p[15],
        },
    }
}

fn layer_cases(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let p = vec![random(&[5, 3], 0.7, r), random(&[3], 0.3, r)];
    let x = random(&[4, 5], 1.0, r);
    let err = check_layer(
        &p,
        &x,
        |p, x| Dense { w: &p[0], b: &p[1] }.forward(x).unwrap(),
        |p, x, dy| {
            let l = Dense { w: &p[0], b: &p[1] };
            let mut g = DenseGrads::zeros_like(&l);
            let dx = l.backward(x, dy, &mut g).unwrap();
            vec![g.w, g.b, dx]
        },
        r,
    );
    out.push(("dense", err));

    let p = vec![random(&[3, 4, 5], 0.5, r), random(&[5], 0.3, r)];
    let x = random(&[6, 4], 1.0, r);
    let err = check_layer(
        &p,
        &x,
        |p, x| Conv1d { w: &p[0], b: &p[1] }.forward(x).unwrap(),
        |p, x, dy| {
            let l = Conv1d { w: &p[0], b: &p[1] };
            let mut g = Conv1dGrads::zeros_like(&l);
            let dx = l.backward(x, dy, &mut g).unwrap();
            vec![g.w, g.b, dx]
        },
        r,
    );
    out.push(("conv1d", err));

    for (name, kind) in [("rnn cell (5-step BPTT)", CellKind::Rnn), ("lstm cell (5-step BPTT)", CellKind::Lstm), ("gru cell (5-step BPTT)", CellKind::Gru)] {
        let (c, h) = (3, 4);
        let g = kind.gates() * h;
        let p = vec![random(&[c, g], 0.6, r), random(&[h, g], 0.6, r), random(&[g], 0.3, r)];
        let x = random(&[5, c], 1.0, r);
        let err = check_layer(
            &p,
            &x,
            move |p, x| recurrent(kind, p).forward(x).unwrap().0,
            move |p, x, dy| {
                let l = recurrent(kind, p);
                let (_, cache) = l.forward(x).unwrap();
                let mut g = RecurrentGrads::zeros_like(&l);
                let dx = l.backward(&cache, dy, &mut g).unwrap();
                vec![g.wx, g.wh, g.b, dx]
            },
            r,
        );
        out.push((name, err));
    }

    let p = vec![random(&[4, 4], 0.8, r), random(&[4], 0.8, r)];
    let x = random(&[5, 4], 1.0, r);
    let err = check_layer(
        &p,
        &x,
        |p, x| TemporalAttention { w: &p[0], v: &p[1] }.forward(x).unwrap().0,
        |p, x, dy| {
            let l = TemporalAttention { w: &p[0], v: &p[1] };
            let (_, _, cache) = l.forward(x).unwrap();
            let mut g = TemporalAttentionGrads::zeros_like(&l);
            let dx = l.backward(&cache, dy, &mut g).unwrap();
            vec![g.w, g.v, dx]
        },
        r,
    );
    out.push(("temporal attention", err));

    let p = vec![Tensor::ones(&[6]).add(&random(&[6], 0.3, r)).unwrap(), random(&[6], 0.3, r)];
    let x = random(&[4, 6], 1.0, r);
    let err = check_layer(
        &p,
        &x,
        |p, x| LayerNorm { gain: &p[0], bias: &p[1] }.forward(x).unwrap().0,
        |p, x, dy| {
            let l = LayerNorm { gain: &p[0], bias: &p[1] };
            let (_, cache) = l.forward(x).unwrap();
            let mut g = LayerNormGrads::zeros_like(&l);
            let dx = l.backward(&cache, dy, &mut g).unwrap();
            vec![g.gain, g.bias, dx]
        },
        r,
    );
    out.push(("layer norm", err));

    let p = mhsa_params(8, r);
    let x = random(&[4, 8], 1.0, r);
    let err = check_layer(
        &p,
        &x,
        |p, x| mhsa(p, 2).forward(x).unwrap().0,
        |p, x, dy| {
            let l = mhsa(p, 2);
            let (_, cache) = l.forward(x).unwrap();
            let mut g = MhsaGrads::zeros_like(&l);
            let dx = l.backward(&cache, dy, &mut g).unwrap();
            let mut v = mhsa_grads(g);
            v.push(dx);
            v
        },
        r,
    );
    out.push(("multi-head self-attention", err));

    let (d, dff) = (8, 12);
    let mut p = mhsa_params(d, r);
    p.push(Tensor::ones(&[d]).add(&random(&[d], 0.2, r)).unwrap());
    p.push(random(&[d], 0.2, r));
    p.push(random(&[d, dff], 0.5, r));
    p.push(random(&[dff], 0.2, r));
    p.push(random(&[dff, d], 0.5, r));
    p.push(random(&[d], 0.2, r));
    p.push(Tensor::ones(&[d]).add(&random(&[d], 0.2, r)).unwrap());
    p.push(random(&[d], 0.2, r));
    let x = random(&[4, d], 1.0, r);
    let mask_seed = seed + 1000;
    let err = check_layer(
        &p,
        &x,
        |p, x| encoder(p, 2, 0.2).forward(x, true, Some(&mut Rng::new(mask_seed))).unwrap().0,
        |p, x, dy| {
            let l = encoder(p, 2, 0.2);
            let (_, cache) = l.forward(x, true, Some(&mut Rng::new(mask_seed))).unwrap();
            let mut g = EncoderLayerGrads::zeros_like(&l);
            let dx = l.backward(&cache, dy, &mut g).unwrap();
            let mut v = mhsa_grads(g.attn);
            v.extend([g.norm1.gain, g.norm1.bias, g.ff1.w, g.ff1.b, g.ff2.w, g.ff2.b, g.norm2.gain, g.norm2.bias]);
            v.push(dx);
            v
        },
        r,
    );
    out.push(("encoder layer (train mode)", err));
    out
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        hidden_dim: 8,
        n_heads: 2,
        d_ff: 8,
        seq_len: 4,
        ..ModelConfig::new(variant)
    }
}

fn model_case(variant: Variant, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut m = SpeedModel::build(tiny(variant), &mut rng).unwrap();
    for (_, p, _) in m.params_mut().iter_with_grads_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.1, 0.1));
    }
    m.target_stats = TargetStats { mean: 55.0, std: 12.0 };
    let x = random(&[2, 4, 8], 1.5, &mut rng);
    let c = Tensor::vector(vec![0.8, -1.1]);
    let mask_seed = seed + 77;
    let objective = |m: &SpeedModel| {
        let y = m.forward(&x, true, Some(&mut Rng::new(mask_seed))).unwrap().0;
        weighted(&y, &c)
    };
    let (_, cache) = m.forward(&x, true, Some(&mut Rng::new(mask_seed))).unwrap();
    let grads = m.backward(&cache, &c).unwrap();
    let mut worst: f64 = 0.0;
    for (name, a) in &grads {
        let p0 = m.params().get(name).unwrap().clone();
        let mut probe = m.clone();
        let n = finite_diff_grad(
            |p| {
                *probe.params_mut().get_mut(name).unwrap() = p.clone();
                objective(&probe)
            },
            &p0,
            DEFAULT_EPS,
        )
        .unwrap();
        worst = worst.max(max_rel_error(a, &n, ABS_FLOOR));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for seed in [11, 22, 33] {
        for (name, e) in layer_cases(seed) {
            let w = worst.entry(name.to_string()).or_insert(0.0);
            *w = w.max(e);
        }
        for v in Variant::ALL {
            let w = worst.entry(format!("{v} model (tiny)")).or_insert(0.0);
            *w = w.max(model_case(v, seed));
        }
    }
    let elapsed = t.elapsed();
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, &e)| !(e < REL_TOL))
        .map(|(k, e)| format!("{k} {e:.2e}"))
        .collect();
    let max = worst.values().cloned().fold(0.0, f64::max);
    if !bad.is_empty() {
        return Err(format!("relative error above {REL_TOL:e}: {}", bad.join(", ")));
    }
    if elapsed > Duration::from_secs(60) {
        return Err(format!("took {:.1}s, budget 60s", elapsed.as_secs_f64()));
    }
    Ok(format!("{} checks on 3 seeds, max rel error {max:.2e}", worst.len()))
}

fn metrics_exactness(trained: &BTreeMap<Variant, (SpeedModel, History)>, test: &[Track]) -> Outcome {
    let exact = [
        (accuracy_pct(60.0, 60.0).unwrap(), 100.0),
        (accuracy_pct(95.0, 100.0).unwrap(), 95.0),
        (accuracy_pct(210.0, 100.0).unwrap(), -10.0),
        (rmse(&[(5.0, 5.0), (7.0, 7.0)]).unwrap(), 0.0),
        (rmse(&[(3.0, 1.0), (1.0, 3.0)]).unwrap(), 2.0),
        (rmse(&[(105.0, 100.0)]).unwrap(), 5.0),
    ];
    if let Some((got, want)) = exact.iter().find(|(g, w)| g != w) {
        return Err(format!("formula example gave {got}, expected {want}"));
    }
    if accuracy_pct(1.0, 0.0).is_ok() || rmse(&[]).is_ok() {
        return Err("degenerate inputs were accepted".into());
    }
    let single = Metrics::from_predictions(vec![("t".to_string(), 57.0, 60.0)]).unwrap();
    if (single.mean_accuracy_pct, single.rmse_kmh) != (95.0, 3.0) {
        return Err(format!("single-track reduction gave {single:?}"));
    }
    let mut worst: f64 = 0.0;
    for (model, _) in trained.values() {
        let m = evaluate(model, test).map_err(|e| e.to_string())?;
        let n = m.per_sample.len() as f64;
        let acc = m.per_sample.iter().map(|r| (1.0 - (r.predicted_kmh - r.actual_kmh).abs() / r.actual_kmh.abs()) * 100.0).sum::<f64>() / n;
        let err = (m.per_sample.iter().map(|r| (r.predicted_kmh - r.actual_kmh).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max((acc - m.mean_accuracy_pct).abs()).max((err - m.rmse_kmh).abs());
        if m.n != test.len() {
            return Err(format!("{} rows for {} tracks", m.n, test.len()));
        }
    }
    if worst > 1e-3 {
        return Err(format!("evaluate differs from recomputation by {worst:e}"));
    }
    Ok(format!("formula examples exact; evaluate vs recomputation max diff {worst:.1e}"))
}

fn oracle_inversion() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let cam = CameraConfig {
            focal_px: rng.uniform(600.0, 2000.0),
            ..CameraConfig::default()
        };
        let depth = rng.uniform(20.0, 80.0);
        let speed = rng.uniform(30.0, 105.0);
        let n_frames = 21 + rng.below(20) as usize;
        let travel_m = speed / 3.6 * (n_frames - 1) as f64 / cam.fps;
        let scn = ScenarioConfig {
            depth_m: depth,
            speed_kmh: speed,
            n_frames,
            noise_px_std: 0.0,
            x0_m: Some(-travel_m / 2.0 + rng.uniform(-1.0, 1.0)),
            seed: i,
            ..ScenarioConfig::default()
        };
        let track = generate_track(&scn, &cam).map_err(|e| format!("scenario {i}: {e}"))?;
        let got = oracle_speed_lateral(&track, &cam, depth).map_err(|e| e.to_string())?;
        worst = worst.max((got - speed).abs());
    }
    if worst < 1e-9 {
        Ok(format!("100 scenarios, max |error| {worst:.2e} km/h"))
    } else {
        Err(format!("max |error| {worst:e} km/h"))
    }
}

fn learning_sanity(
    results: &BTreeMap<Variant, (SpeedModel, History)>,
    test: &[Track],
    elapsed: Duration,
) -> Outcome {
    let mut parts = Vec::new();
    let mut bad = Vec::new();
    for (v, (model, hist)) in results {
        let m = evaluate(model, test).map_err(|e| e.to_string())?;
        let (min_acc, max_rmse) = if *v == Variant::Lstm {
            (LSTM_MIN_ACCURACY, LSTM_MAX_RMSE)
        } else {
            (MIN_ACCURACY, MAX_RMSE)
        };
        parts.push(format!(
            "{v} {:.2}%/{:.3} km/h ({} epochs)",
            m.mean_accuracy_pct,
            m.rmse_kmh,
            hist.train_loss.len()
        ));
        if m.mean_accuracy_pct < min_acc || m.rmse_kmh > max_rmse {
            bad.push(format!("{v} below {min_acc}% / {max_rmse} km/h"));
        }
    }
    if elapsed > Duration::from_secs(15 * 60) {
        bad.push(format!("training took {:.0}s (budget 900s)", elapsed.as_secs_f64()));
    }
    // Training loss should fall over the first five epochs.
    let lstm = &results[&Variant::Lstm].1.train_loss;
    if lstm.len() >= 5 && lstm[4] >= lstm[0] {
        bad.push(format!("lstm train loss did not fall over 5 epochs: {:?}", &lstm[..5]));
    }
    if bad.is_empty() {
        Ok(parts.join("; "))
    } else {
        Err(format!("{}; {}", bad.join(", "), parts.join("; ")))
    }
}

fn window_consistency(model: &SpeedModel) -> Outcome {
    // A clean constant-speed lateral track: window predictions should agree.
    let scn = ScenarioConfig {
        speed_kmh: 72.0,
        noise_px_std: 0.0,
        ..ScenarioConfig::default()
    };
    let track = generate_track(&scn, &CameraConfig::default()).map_err(|e| e.to_string())?;
    let (speed, per) = model.predict_track(&track).map_err(|e| e.to_string())?;
    let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut unlabeled = track.clone();
    unlabeled.speed_kmh = None;
    model.predict_track(&unlabeled).map_err(|e| e.to_string())?;
    if hi <= 1.1 * lo {
        Ok(format!("{} windows in [{lo:.2}, {hi:.2}] km/h, track {speed:.2} km/h (label 72)", per.len()))
    } else {
        Err(format!("window spread [{lo:.2}, {hi:.2}] exceeds 10%"))
    }
}

fn split_and_train(
    data_cfg: &DatasetConfig,
    variants: &[Variant],
    model_cfg: impl Fn(Variant) -> ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(BTreeMap<Variant, (SpeedModel, History)>, Vec<Track>), String> {
    let data = generate_dataset(data_cfg).map_err(|e| e.to_string())?;
    let split = split_dataset(&data, 0.9, data_cfg.seed).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for &v in variants {
        let r = fit(model_cfg(v), &split.train, train_cfg).map_err(|e| format!("{v}: {e}"))?;
        out.insert(v, r);
    }
    Ok((out, split.test))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn gating_claim() -> Outcome {
    let variants = [Variant::Rnn, Variant::Lstm, Variant::Gru];
    let mut by_variant: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for seed in [1, 2, 3] {
        let data_cfg = DatasetConfig {
            seed,
            lateral_fraction: 0.2,
            ..DatasetConfig::default()
        };
        let train_cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (models, test) = split_and_train(&data_cfg, &variants, ModelConfig::new, &train_cfg)?;
        for (v, (m, _)) in &models {
            let r = evaluate(m, &test).map_err(|e| e.to_string())?.rmse_kmh;
            by_variant.entry(*v).or_default().push(r);
        }
    }
    let med: BTreeMap<Variant, f64> = by_variant.iter().map(|(v, r)| (*v, median(r.clone()))).collect();
    let detail = format!(
        "median test RMSE rnn {:.3}, lstm {:.3}, gru {:.3} km/h (approach-heavy mix, seeds 1-3)",
        med[&Variant::Rnn],
        med[&Variant::Lstm],
        med[&Variant::Gru]
    );
    if med[&Variant::Lstm] <= med[&Variant::Rnn] && med[&Variant::Gru] <= med[&Variant::Rnn] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sequence_length_claim() -> Outcome {
    let data_cfg = DatasetConfig::default();
    let train_cfg = TrainConfig {
        epochs: 20,
        early_stop_patience: 20,
        ..TrainConfig::default()
    };
    let data = generate_dataset(&data_cfg).map_err(|e| e.to_string())?;
    let split = split_dataset(&data, 0.9, data_cfg.seed).map_err(|e| e.to_string())?;
    let mut res = Vec::new();
    for seq_len in [5, 30] {
        let cfg = ModelConfig {
            seq_len,
            ..ModelConfig::new(Variant::Lstm)
        };
        let (m, _) = fit(cfg, &split.train, &train_cfg).map_err(|e| e.to_string())?;
        res.push(evaluate(&m, &split.test).map_err(|e| e.to_string())?.rmse_kmh);
    }
    let detail = format!("lstm test RMSE seq_len 5: {:.3}, seq_len 30: {:.3} km/h (20 epochs each)", res[0], res[1]);
    if res[1] <= res[0] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn positional_encoding_property() -> Outcome {
    let mut rng = Rng::new(5);
    let (b, t) = (4, 20);
    let x = random(&[b, t, 8], 2.0, &mut rng);
    let mut perm: Vec<usize> = (0..t).collect();
    rng.shuffle(&mut perm);
    let windows: Vec<Tensor> = (0..b)
        .map(|i| {
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .map(|&r| x.data()[(i * t + r) * 8..(i * t + r + 1) * 8].to_vec())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        })
        .collect();
    let xp = stack_windows(&windows.iter().collect::<Vec<_>>()).unwrap();
    let delta = |pe: bool| {
        let cfg = ModelConfig {
            use_positional_encoding: pe,
            ..ModelConfig::new(Variant::Transformer)
        };
        let m = SpeedModel::build(cfg, &mut Rng::new(9)).unwrap();
        let a = m.forward(&x, false, None).unwrap().0;
        let c = m.forward(&xp, false, None).unwrap().0;
        a.max_abs_diff(&c)
    };
    let (off, on) = (delta(false), delta(true));
    let detail = format!("max |delta| without PE {off:.1e}, with PE {on:.3}");
    if off < 1e-9 && on > 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism_and_persistence(trained: &BTreeMap<Variant, (SpeedModel, History)>, test: &[Track]) -> Outcome {
    let cfg = DatasetConfig::default();
    let bytes = |c: &DatasetConfig| {
        let mut buf = Vec::new();
        write_tracks(&generate_dataset(c).unwrap(), &mut buf).unwrap();
        buf
    };
    let (a, b) = (bytes(&cfg), bytes(&cfg));
    if a != b {
        return Err("same-seed generated datasets differ".into());
    }
    let other = bytes(&DatasetConfig { seed: 43, ..cfg.clone() });
    if other == a {
        return Err("a different seed produced the same dataset".into());
    }

    let small = DatasetConfig {
        n_tracks: 60,
        ..cfg
    };
    let tcfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    for v in Variant::ALL {
        let (m1, h1) = split_and_train(&small, &[v], ModelConfig::new, &tcfg)?.0.remove(&v).unwrap();
        let (m2, h2) = split_and_train(&small, &[v], ModelConfig::new, &tcfg)?.0.remove(&v).unwrap();
        if h1 != h2 || m1.params() != m2.params() {
            return Err(format!("{v}: same-seed training runs differ"));
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (v, (model, hist)) in trained {
        let path = dir.path().join(format!("{v}.json"));
        Checkpoint::new(model, None, Some(hist)).save(&path).map_err(|e| e.to_string())?;
        let loaded = Checkpoint::load(&path).and_then(|c| Ok(c.model()?)).map_err(|e| e.to_string())?;
        for t in test {
            let (x, y) = (model.predict_track(t).unwrap(), loaded.predict_track(t).unwrap());
            let same = x.0.to_bits() == y.0.to_bits() && x.1.iter().zip(&y.1).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("{v}: reloaded checkpoint predicts differently on {}", t.track_id));
            }
        }
    }
    Ok(format!(
        "dataset bytes identical ({} B), 4 variants x 2 training runs identical, {} checkpoints bit-exact on {} tracks",
        a.len(),
        trained.len(),
        test.len()
    ))
}

fn external_data_harness(synthetic: &BTreeMap<Variant, (SpeedModel, History)>, synthetic_test: &[Track]) -> Outcome {
    let out_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (dataset, by_model) = match std::env::var_os("TRACKSPEED_EXTERNAL_DATA") {
        Some(path) => {
            let tracks = dataio::load_tracks(&path).map_err(|e| e.to_string())?;
            let split = split_dataset(&tracks, 0.9, 42).map_err(|e| e.to_string())?;
            let mut by_model = BTreeMap::new();
            for v in Variant::ALL {
                let (m, _) = fit(ModelConfig::new(v), &split.train, &TrainConfig::default()).map_err(|e| format!("{v}: {e}"))?;
                by_model.insert(v.to_string(), evaluate(&m, &split.test).map_err(|e| e.to_string())?);
            }
            (std::path::Path::new(&path).display().to_string(), by_model)
        }
        None => {
            // Round-trip the held-out tracks through the JSONL format as a stand-in.
            let file = out_dir.path().join("stand_in.jsonl");
            dataio::save_tracks(synthetic_test, &file).map_err(|e| e.to_string())?;
            let tracks = dataio::load_tracks(&file).map_err(|e| e.to_string())?;
            let mut by_model = BTreeMap::new();
            for (v, (m, _)) in synthetic {
                by_model.insert(v.to_string(), evaluate(m, &tracks).map_err(|e| e.to_string())?);
            }
            ("synthetic stand-in".to_string(), by_model)
        }
    };
    emit_report(&by_model, &dataset, out_dir.path()).map_err(|e| e.to_string())?;
    let summary = std::fs::read_to_string(out_dir.path().join(metrics::SUMMARY_FILE)).map_err(|e| e.to_string())?;
    if summary.lines().count() != by_model.len() + 1 {
        return Err(format!("summary has {} lines for {} models", summary.lines().count(), by_model.len()));
    }
    print!("{}", metrics::format_table(&by_model, &dataset));
    Ok(format!("report for {dataset} written ({} models); no threshold asserted", by_model.len()))
}

fn main() {
    let mut report = Report { hard_failures: 0 };
    let suite = Instant::now();

    let t = Instant::now();
    report.record("gradient suite", false, t, gradient_suite());

    let t = Instant::now();
    report.record("oracle inversion", false, t, oracle_inversion());

    let t = Instant::now();
    report.record("positional-encoding property", false, t, positional_encoding_property());

    let t = Instant::now();
    let trained = split_and_train(&DatasetConfig::default(), &Variant::ALL, ModelConfig::new, &TrainConfig::default());
    let train_time = t.elapsed();
    let (trained, test) = match trained {
        Ok(r) => r,
        Err(e) => {
            report.record("learning sanity", false, t, Err(e));
            println!("aborting: later criteria need the trained models");
            std::process::exit(1);
        }
    };
    report.record("learning sanity", false, t, learning_sanity(&trained, &test, train_time));

    let t = Instant::now();
    report.record("metrics exactness", false, t, metrics_exactness(&trained, &test));

    let t = Instant::now();
    report.record(
        "window consistency (trained lstm)",
        false,
        t,
        window_consistency(&trained[&Variant::Lstm].0),
    );

    let t = Instant::now();
    report.record("determinism & persistence", false, t, determinism_and_persistence(&trained, &test));

    let t = Instant::now();
    report.record("external-data harness", false, t, external_data_harness(&trained, &test));

    let t = Instant::now();
    report.record("sequence-length claim", false, t, sequence_length_claim());

    let t = Instant::now();
    report.record("gating claim", true, t, gating_claim());

    println!(
        "acceptance finished in {:.0}s, {} hard failure(s)",
        suite.elapsed().as_secs_f64(),
        report.hard_failures
    );
    if report.hard_failures > 0 {
        std::process::exit(1);
    }
}
