use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use trackspeed::dataio::{self, Track};
use trackspeed::metrics::{self, Metrics, OraclePredictor};
use trackspeed::models::{ModelConfig, Variant};
use trackspeed::synth::{self, DatasetConfig};
use trackspeed::train::{self, Checkpoint, TrainConfig};

use crate::failure::{CliResult, Failure};
use crate::{EvalArgs, GenerateArgs, PredictArgs, TrainArgs};

/// Reads a JSON object from `path`, or starts from an empty one.
fn config_object(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Failure::config(format!("{}: {e}", path.display()))),
    }
}

fn typed<T: DeserializeOwned>(what: &str, obj: Map<String, Value>) -> CliResult<T> {
    serde_json::from_value(Value::Object(obj)).map_err(|e| Failure::config(format!("{what}: {e}")))
}

fn load_data(path: &Path) -> CliResult<Vec<Track>> {
    let tracks = dataio::load_tracks(path)?;
    if tracks.is_empty() {
        return Err(Failure::data(format!("{}: no tracks", path.display())));
    }
    Ok(tracks)
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    train::write_atomic(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mut obj = config_object(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        obj.insert("seed".into(), seed.into());
    }
    let cfg: DatasetConfig = typed("dataset config", obj)?;
    cfg.validate()?;
    let tracks = synth::generate_dataset(&cfg)?;
    let mut buf = Vec::new();
    dataio::write_tracks(&tracks, &mut buf).map_err(|e| Failure::data(e.to_string()))?;
    write_out(&args.out, &buf)?;

    let speeds: Vec<f64> = tracks.iter().filter_map(|t| t.speed_kmh).collect();
    let lo = speeds.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = speeds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("wrote {} tracks to {}", tracks.len(), args.out.display());
    println!("speeds {lo:.2} to {hi:.2} km/h");
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut model_obj = config_object(args.model_config.as_deref())?;
    if let Some(v) = &args.variant {
        let v: Variant = v.parse().map_err(Failure::config)?;
        model_obj.insert("variant".into(), v.as_str().into());
    }
    if !model_obj.contains_key("variant") {
        return Err(Failure::config(
            "no model variant: pass --variant or a --model-config with a \"variant\" field",
        ));
    }
    let model_cfg: ModelConfig = typed("model config", model_obj)?;
    model_cfg.validate()?;

    let mut train_obj = config_object(args.train_config.as_deref())?;
    if let Some(seed) = args.seed {
        train_obj.insert("seed".into(), seed.into());
    }
    if let Some(epochs) = args.epochs {
        train_obj.insert("epochs".into(), epochs.into());
    }
    let train_cfg: TrainConfig = typed("train config", train_obj)?;
    train_cfg.validate()?;

    let tracks = load_data(&args.data)?;
    log::info!("training {} on {} tracks", model_cfg.variant, tracks.len());
    let (model, history) = train::fit(model_cfg, &tracks, &train_cfg)?;
    Checkpoint::new(&model, Some(&train_cfg), Some(&history)).save(&args.out)?;

    let last = history.train_loss.last().copied().unwrap_or(f64::NAN);
    println!("epochs run {}", history.train_loss.len());
    println!("final train loss {last:.6}");
    println!(
        "best validation RMSE {:.4} km/h (epoch {})",
        history.best_val_rmse, history.best_epoch
    );
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

fn dataset_name(args: &EvalArgs) -> String {
    args.dataset_name.clone().unwrap_or_else(|| {
        args.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let tracks = load_data(&args.data)?;
    let (name, metrics): (String, Metrics) = match (&args.oracle_predictions, &args.checkpoint) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let answers: BTreeMap<String, f64> =
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let name = args.name.clone().unwrap_or_else(|| "oracle".into());
            (name, metrics::evaluate(&OraclePredictor { answers }, &tracks)?)
        }
        (None, Some(ckpt)) => {
            let model = train::load_checkpoint(ckpt)?;
            let name = args.name.clone().unwrap_or_else(|| model.config().variant.to_string());
            (name, metrics::evaluate(&model, &tracks)?)
        }
        (None, None) => return Err(Failure::config("eval needs --checkpoint")),
    };
    let dataset = dataset_name(args);
    let by_model: BTreeMap<String, Metrics> = [(name.clone(), metrics)].into();
    metrics::emit_report(&by_model, &dataset, &args.report_dir)?;

    let m = &by_model[&name];
    println!("model {name}, dataset {dataset}, {} tracks", m.n);
    println!("mean accuracy {:.4} %", m.mean_accuracy_pct);
    println!("rmse {:.4} km/h", m.rmse_kmh);
    println!("report written to {}", args.report_dir.display());
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let model = train::load_checkpoint(&args.checkpoint)?;
    let tracks = load_data(&args.data)?;
    let needed = model.config().seq_len + 1;
    let short: Vec<&str> = tracks
        .iter()
        .filter(|t| t.frames.len() < needed)
        .map(|t| t.track_id.as_str())
        .collect();
    if !short.is_empty() {
        return Err(Failure::data(format!(
            "tracks too short for this model (need {needed} frames): {}",
            short.join(", ")
        )));
    }
    let mut lines = String::new();
    for t in &tracks {
        let (speed, _) = model.predict_track(t)?;
        lines.push_str(&format!("{},{speed:.4}\n", t.track_id));
    }
    print!("{lines}");
    Ok(())
}
