//! Evaluation report files: per-trip CSVs, aggregate tables, per-hour
//! and per-duration breakdowns, and small bar-chart renderings.

use crate::error::Result;
use crate::estimation::{compute_metrics, MetricsReport};
use crate::features::ClockContext;
use std::io::Write;
use std::path::Path;

/// One evaluated test trip; estimates are None where a method could
/// not answer (no neighbors).
#[derive(Debug, Clone, PartialEq)]
pub struct TripRow {
    pub trip_id: usize,
    pub departure: i64,
    pub actual_s: f64,
    pub aware: Option<f64>,
    pub blind: Option<f64>,
    pub ablated: Option<f64>,
    pub lr: Option<f64>,
    pub avg: Option<f64>,
    pub temp: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trip_csv(path: &Path, rows: &[TripRow], config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# config={config_hash}")?;
    writeln!(out, "trip_id,departure,actual_s,aware_s,blind_s,ablated_s,lr_s,avg_s,temp_s")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.trip_id,
            r.departure,
            r.actual_s,
            fmt_opt(r.aware),
            fmt_opt(r.blind),
            fmt_opt(r.ablated),
            fmt_opt(r.lr),
            fmt_opt(r.avg),
            fmt_opt(r.temp),
        )?;
    }
    Ok(())
}

/// Aggregate a method column over the rows where it answered.
pub fn method_metrics(
    rows: &[TripRow],
    pick: impl Fn(&TripRow) -> Option<f64>,
) -> Option<MetricsReport> {
    let pairs: Vec<(f64, f64)> =
        rows.iter().filter_map(|r| pick(r).map(|e| (r.actual_s, e))).collect();
    if pairs.is_empty() {
        None
    } else {
        Some(compute_metrics(&pairs).expect("non-empty"))
    }
}

pub fn write_aggregate_csv(
    path: &Path,
    table: &[(&str, Option<MetricsReport>)],
    config_hash: &str,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# config={config_hash}")?;
    writeln!(out, "method,count,mae_s,mape_pct,sr_pct")?;
    for (name, metrics) in table {
        match metrics {
            Some(m) => writeln!(out, "{name},{},{},{},{}", m.count, m.mae_s, m.mape_pct, m.sr_pct)?,
            None => writeln!(out, "{name},0,,,")?,
        }
    }
    Ok(())
}

/// Per-departure-hour MAPE for one method, written as CSV and a bar
/// chart.
pub fn write_hourly_report(
    csv_path: &Path,
    png_path: &Path,
    rows: &[TripRow],
    pick: impl Fn(&TripRow) -> Option<f64>,
    clock: &ClockContext,
    config_hash: &str,
) -> Result<()> {
    let items: Vec<(i64, f64, f64)> = rows
        .iter()
        .filter_map(|r| pick(r).map(|e| (r.departure, r.actual_s, e)))
        .collect();
    let by_hour = crate::estimation::per_hour_metrics(&items, clock);

    let mut out = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(out, "# config={config_hash}")?;
    writeln!(out, "hour,count,mae_s,mape_pct,sr_pct")?;
    let mut bars = vec![0.0f64; 24];
    for (hour, m) in &by_hour {
        writeln!(out, "{hour},{},{},{},{}", m.count, m.mae_s, m.mape_pct, m.sr_pct)?;
        bars[*hour as usize] = m.mape_pct;
    }
    drop(out);
    let labels: Vec<String> = (0..24).map(|h| format!("{h}")).collect();
    bar_chart(png_path, "MAPE (%) by departure hour", &labels, &bars)
}

/// Per-travel-time-bucket MAPE (bucket width in seconds).
pub fn write_duration_report(
    csv_path: &Path,
    png_path: &Path,
    rows: &[TripRow],
    pick: impl Fn(&TripRow) -> Option<f64>,
    bucket_s: f64,
    config_hash: &str,
) -> Result<()> {
    let mut buckets: Vec<Vec<(f64, f64)>> = Vec::new();
    for r in rows {
        if let Some(e) = pick(r) {
            let b = (r.actual_s / bucket_s).floor() as usize;
            if buckets.len() <= b {
                buckets.resize(b + 1, Vec::new());
            }
            buckets[b].push((r.actual_s, e));
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(out, "# config={config_hash}")?;
    writeln!(out, "bucket_start_s,bucket_end_s,count,mae_s,mape_pct,sr_pct")?;
    let mut labels = Vec::new();
    let mut bars = Vec::new();
    for (i, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let m = compute_metrics(bucket).expect("non-empty");
        writeln!(
            out,
            "{},{},{},{},{},{}",
            i as f64 * bucket_s,
            (i + 1) as f64 * bucket_s,
            m.count,
            m.mae_s,
            m.mape_pct,
            m.sr_pct
        )?;
        labels.push(format!("{}", (i as f64 * bucket_s) as i64));
        bars.push(m.mape_pct);
    }
    drop(out);
    bar_chart(png_path, "MAPE (%) by travel time bucket", &labels, &bars)
}

/// Minimal deterministic bar chart (no plotting dependency).
pub fn bar_chart(path: &Path, _title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 360;
    const MARGIN: u32 = 24;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([250, 250, 248]));
    let n = values.len().max(1) as u32;
    let vmax = values.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
    let plot_w = W - 2 * MARGIN;
    let plot_h = H - 2 * MARGIN;
    // axes
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, image::Rgb([60, 60, 60]));
    }
    for y in MARGIN..H - MARGIN {
        img.put_pixel(MARGIN, y, image::Rgb([60, 60, 60]));
    }
    let slot = plot_w / n;
    let bar_w = (slot * 3 / 4).max(1);
    for (i, &v) in values.iter().enumerate() {
        let h = ((v / vmax) * plot_h as f64) as u32;
        let x0 = MARGIN + i as u32 * slot + (slot - bar_w) / 2;
        for x in x0..x0 + bar_w {
            for y in (H - MARGIN - h)..(H - MARGIN) {
                img.put_pixel(x, y, image::Rgb([86, 119, 194]));
            }
        }
    }
    let _ = labels;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_history_csv(
    path: &Path,
    history: &[crate::training::EpochStats],
    config_hash: &str,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# config={config_hash}")?;
    writeln!(out, "epoch,train_loss,train_mape,eval_mape,wall_s")?;
    for s in history {
        writeln!(out, "{},{},{},{},{}", s.epoch, s.train_loss, s.train_mape, s.eval_mape, s.wall_s)?;
    }
    Ok(())
}
