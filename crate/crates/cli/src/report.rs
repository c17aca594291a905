//! Metrics and threshold JSON, and the training loss log.

use std::fs;
use std::path::Path;

use milseg::densepriors::ThresholdSet;
use milseg::evalmetrics::ClassConfusion;
use milseg::training::LossRecord;
use serde_json::{json, Map, Value};

use crate::CliError;

pub const LOSS_LOG_HEADER: &str = "step,examples_seen,lr,mean_loss";

pub fn loss_line(r: &LossRecord) -> String {
    format!("{},{},{:e},{:.17e}", r.step, r.examples_seen, r.learning_rate, r.mean_loss)
}

pub fn thresholds_json(t: &ThresholdSet) -> Value {
    let map: Map<String, Value> = t.values().iter().enumerate().map(|(i, &d)| ((i + 1).to_string(), json!(d))).collect();
    Value::Object(map)
}

pub fn write_thresholds(path: &Path, t: &ThresholdSet) -> Result<(), CliError> {
    write_json(path, &thresholds_json(t))
}

/// Reads `{"1": δ₁, "2": δ₂, …}` for `foreground_classes` classes.
pub fn read_thresholds(path: &Path, foreground_classes: usize) -> Result<ThresholdSet, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let obj = value.as_object().ok_or_else(|| CliError::Io(format!("{}: expected a JSON object", path.display())))?;
    let deltas = (1..=foreground_classes)
        .map(|k| {
            obj.get(&k.to_string())
                .and_then(Value::as_f64)
                .ok_or_else(|| CliError::Io(format!("{}: missing threshold for class {k}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ThresholdSet::new(deltas)?)
}

/// `{per_class_accuracy, ap, mAP, thresholds}`; classes without ground truth
/// (accuracy) or absent everywhere (AP) are left out of their maps.
pub fn metrics_json(conf: &ClassConfusion, thresholds: Option<&ThresholdSet>) -> Result<Value, CliError> {
    let per_class = |f: &dyn Fn(usize) -> Option<f64>| -> Map<String, Value> {
        (0..conf.classes()).filter_map(|k| f(k).map(|v| (k.to_string(), json!(v)))).collect()
    };
    Ok(json!({
        "per_class_accuracy": per_class(&|k| conf.accuracy(k)),
        "ap": per_class(&|k| conf.ap(k)),
        "mAP": conf.mean_ap()?,
        "thresholds": thresholds.map_or(json!({}), thresholds_json),
    }))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
