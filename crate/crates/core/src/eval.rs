//! Evaluation metrics (per-dimension and mean MSE / R²) and attention-map
//! export as PGM heatmaps and raw CSV grids.

use crate::error::{Error, Result};
use crate::loss::{mismatch, VadLabel};
use std::io::Write;

const DIMENSION_NAMES: [&str; 3] = ["valence", "arousal", "dominance"];

/// Per-dimension and mean regression metrics over M samples.
///
/// Values are unscaled; any presentation-side scaling is a formatting
/// concern, not part of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: [f64; 3],
    pub mse_mean: f64,
    pub r2: [f64; 3],
    pub r2_mean: f64,
    pub count: usize,
}

fn check_lengths(preds: &[[f64; 3]], gts: &[VadLabel], op: &'static str) -> Result<usize> {
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{op}: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract(format!("{op}: empty input")));
    }
    Ok(preds.len())
}

/// Mean squared error per dimension plus the mean over dimensions.
pub fn mse_metric(preds: &[[f64; 3]], gts: &[VadLabel]) -> Result<([f64; 3], f64)> {
    let m = check_lengths(preds, gts, "mse_metric")?;
    let mut acc = [0.0f64; 3];
    for (p, g) in preds.iter().zip(gts.iter()) {
        let t = g.as_array();
        for j in 0..3 {
            let d = p[j] - t[j];
            acc[j] += d * d;
        }
    }
    for a in acc.iter_mut() {
        *a /= m as f64;
    }
    let mean = (acc[0] + acc[1] + acc[2]) / 3.0;
    Ok((acc, mean))
}

/// Coefficient of determination per dimension: 1 − MSE / Var(ground truth).
pub fn r2_metric(preds: &[[f64; 3]], gts: &[VadLabel]) -> Result<([f64; 3], f64)> {
    let m = check_lengths(preds, gts, "r2_metric")?;
    if m < 2 {
        return Err(Error::Contract(
            "r2_metric needs at least 2 samples".to_string(),
        ));
    }
    let (mse, _) = mse_metric(preds, gts)?;
    let mut mean = [0.0f64; 3];
    for g in gts {
        let t = g.as_array();
        for j in 0..3 {
            mean[j] += t[j];
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut var = [0.0f64; 3];
    for g in gts {
        let t = g.as_array();
        for j in 0..3 {
            let d = t[j] - mean[j];
            var[j] += d * d;
        }
    }
    let mut r2 = [0.0f64; 3];
    for j in 0..3 {
        var[j] /= m as f64;
        if var[j] == 0.0 {
            return Err(Error::DegenerateMetric {
                dimension: DIMENSION_NAMES[j],
            });
        }
        r2[j] = 1.0 - mse[j] / var[j];
    }
    let r2_mean = (r2[0] + r2[1] + r2[2]) / 3.0;
    Ok((r2, r2_mean))
}

/// Compute the full report.
pub fn metric_report(preds: &[[f64; 3]], gts: &[VadLabel]) -> Result<MetricReport> {
    let (mse, mse_mean) = mse_metric(preds, gts)?;
    let (r2, r2_mean) = r2_metric(preds, gts)?;
    Ok(MetricReport {
        mse,
        mse_mean,
        r2,
        r2_mean,
        count: preds.len(),
    })
}

/// Fraction of predictions whose polarity matches the ground truth on every
/// dimension.
pub fn polarity_match_rate(preds: &[[f64; 3]], gts: &[VadLabel], threshold: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let matched = preds
        .iter()
        .zip(gts.iter())
        .filter(|(p, g)| {
            let t = g.as_array();
            (0..3).all(|j| mismatch(p[j], t[j], threshold) == 0)
        })
        .count();
    matched as f64 / preds.len() as f64
}

/// Aligned text table in V / A / D / M column order.
pub fn format_report_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str("metric          V          A          D          M\n");
    out.push_str(&format!(
        "MSE    {:>10.6} {:>10.6} {:>10.6} {:>10.6}\n",
        report.mse[0], report.mse[1], report.mse[2], report.mse_mean
    ));
    out.push_str(&format!(
        "R2     {:>10.6} {:>10.6} {:>10.6} {:>10.6}\n",
        report.r2[0], report.r2[1], report.r2[2], report.r2_mean
    ));
    out.push_str(&format!("samples {}\n", report.count));
    out
}

/// Machine-readable key=value form of the report.
pub fn format_report_kv(report: &MetricReport) -> String {
    format!(
        "mse_v={:.17e}\nmse_a={:.17e}\nmse_d={:.17e}\nmse_mean={:.17e}\n\
         r2_v={:.17e}\nr2_a={:.17e}\nr2_d={:.17e}\nr2_mean={:.17e}\ncount={}\n",
        report.mse[0],
        report.mse[1],
        report.mse[2],
        report.mse_mean,
        report.r2[0],
        report.r2[1],
        report.r2[2],
        report.r2_mean,
        report.count
    )
}

/// First index holding the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Nearest-neighbor upsampling of an h×w grid by an integer factor.
pub fn upsample_nearest(grid: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len() * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            out.push(grid[(y / factor) * w + (x / factor)]);
        }
    }
    out
}

fn check_grid(attention: &[f64], h: usize, w: usize) -> Result<()> {
    if attention.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "export_attention",
            left: vec![attention.len()],
            right: vec![h, w],
        });
    }
    Ok(())
}

/// Write a P5 PGM heatmap min-max scaled to 0..255; a constant map renders
/// as all-128.
pub fn write_heatmap_pgm(
    attention: &[f64],
    h: usize,
    w: usize,
    sink: &mut impl Write,
) -> Result<()> {
    check_grid(attention, h, w)?;
    let min = attention.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = attention.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes: Vec<u8> = if max == min {
        vec![128u8; h * w]
    } else {
        attention
            .iter()
            .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
            .collect()
    };
    write!(sink, "P5\n{w} {h}\n255\n")?;
    sink.write_all(&bytes)?;
    Ok(())
}

/// Write the raw grid as CSV, one spatial row per line, 6 significant digits.
pub fn write_attention_csv(
    attention: &[f64],
    h: usize,
    w: usize,
    sink: &mut impl Write,
) -> Result<()> {
    check_grid(attention, h, w)?;
    for row in 0..h {
        let line: Vec<String> = (0..w)
            .map(|col| format!("{:.5e}", attention[row * w + col]))
            .collect();
        writeln!(sink, "{}", line.join(","))?;
    }
    Ok(())
}

/// Write both export forms of one attention map.
pub fn export_attention(
    attention: &[f64],
    h: usize,
    w: usize,
    heatmap_sink: &mut impl Write,
    csv_sink: &mut impl Write,
) -> Result<()> {
    write_heatmap_pgm(attention, h, w, heatmap_sink)?;
    write_attention_csv(attention, h, w, csv_sink)
}

/// Parse a CSV grid written by [`export_attention`].
pub fn parse_attention_csv(text: &str) -> Result<(Vec<f64>, usize, usize)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    what: format!("'{t}' is not a number"),
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: idx + 1,
                    what: format!("ragged row: {} values, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    Ok((values, height, width.unwrap_or(0)))
}
