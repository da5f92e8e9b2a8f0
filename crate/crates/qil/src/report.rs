//! CSV exports: per-epoch training reports, pruning-ratio tables and
//! value histograms with threshold markers. All floats use the shortest
//! round-trip formatting, so identical runs produce byte-identical files.

use crate::error::Result;
use crate::nn::Network;
use crate::quantizer::{thresholds, thresholds_by_search, IntervalParams, QuantizerSpec};
use crate::train::RunReport;

pub const HISTOGRAM_BINS: usize = 64;

fn layer_columns(report: &RunReport) -> (Vec<String>, Vec<String>) {
    match report.records.first() {
        Some(r) => (
            r.prune_weights.iter().map(|(n, _)| n.clone()).collect(),
            r.prune_acts.iter().map(|(n, _)| n.clone()).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    }
}

/// Full training report: one train and one eval row per epoch, with the
/// per-layer pruning ratios repeated on both.
pub fn run_report_csv(report: &RunReport) -> String {
    let (w_layers, a_layers) = layer_columns(report);
    let mut out = String::from("epoch,split,loss,accuracy");
    for l in &w_layers {
        out.push_str(&format!(",prune_w_{l}"));
    }
    for l in &a_layers {
        out.push_str(&format!(",prune_a_{l}"));
    }
    out.push('\n');
    for r in &report.records {
        let prunes: String = r
            .prune_weights
            .iter()
            .map(|(_, v)| format!(",{v}"))
            .chain(r.prune_acts.iter().map(|(_, v)| format!(",{v}")))
            .collect();
        out.push_str(&format!(
            "{},train,{},{}{}\n",
            r.epoch, r.train_loss, r.train_accuracy, prunes
        ));
        out.push_str(&format!(
            "{},eval,{},{}{}\n",
            r.epoch, r.eval_loss, r.eval_accuracy, prunes
        ));
    }
    out
}

/// Pruning ratios over epochs only (one row per epoch).
pub fn pruning_over_epochs_csv(report: &RunReport) -> String {
    let (w_layers, a_layers) = layer_columns(report);
    let mut out = String::from("epoch");
    for l in &w_layers {
        out.push_str(&format!(",prune_w_{l}"));
    }
    for l in &a_layers {
        out.push_str(&format!(",prune_a_{l}"));
    }
    out.push('\n');
    for r in &report.records {
        out.push_str(&r.epoch.to_string());
        for (_, v) in &r.prune_weights {
            out.push_str(&format!(",{v}"));
        }
        for (_, v) in &r.prune_acts {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// 64 uniform bins over the value range, preceded by the pruning and
/// clipping thresholds as comment metadata rows (gnuplot-friendly).
pub fn histogram_csv(values: &[f64], prune_threshold: f64, clip_threshold: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("# prune_threshold={prune_threshold}\n"));
    out.push_str(&format!("# clip_threshold={clip_threshold}\n"));
    out.push_str("bin_lo,bin_hi,count\n");
    if values.is_empty() {
        return out;
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / HISTOGRAM_BINS as f64
    } else {
        1.0
    };
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[b] += 1;
    }
    for (b, &n) in counts.iter().enumerate() {
        let blo = lo + b as f64 * width;
        let bhi = lo + (b + 1) as f64 * width;
        out.push_str(&format!("{blo},{bhi},{n}\n"));
    }
    out
}

/// Thresholds of one quantizer for histogram markers: closed form at
/// gamma = 1, bisection over the composed quantizer otherwise.
pub fn layer_thresholds(p: &IntervalParams, spec: &QuantizerSpec) -> (f64, f64) {
    if (p.gamma - 1.0).abs() < 1e-12 {
        thresholds(p, spec)
    } else {
        thresholds_by_search(p, spec)
    }
}

/// Weight histogram (full-precision values with the current quantizer's
/// thresholds) for one quantized layer.
pub fn weight_histogram_csv(net: &Network, layer: &str) -> Result<String> {
    let spec = net
        .weight_quant_spec(layer)
        .ok_or_else(|| crate::error::QilError::InvalidConfig(format!("{layer} is not quantized")))?;
    let p = net.interval_params(layer, true);
    let (pr, cl) = layer_thresholds(&p, &spec);
    let w = net.params.get(&format!("{layer}.weight"));
    Ok(histogram_csv(w.data(), pr, cl))
}

/// Activation histogram for one quantized layer measured on a batch.
pub fn activation_histogram_csv(net: &Network, layer: &str, acts: &[f64]) -> Result<String> {
    let spec = net
        .act_quant_spec(layer)
        .ok_or_else(|| crate::error::QilError::InvalidConfig(format!("{layer} is not quantized")))?;
    let p = net.interval_params(layer, false);
    let (pr, cl) = layer_thresholds(&p, &spec);
    Ok(histogram_csv(acts, pr, cl))
}
