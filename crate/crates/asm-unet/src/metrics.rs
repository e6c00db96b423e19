//! Dice overlap metrics and the coarse/fine aggregate columns used in
//! evaluation reports.
//!
//! Conventions: a class empty in both volumes scores 1.0; empty in
//! exactly one scores 0.0. Aggregation over a dataset is per-case then
//! mean-over-cases, column by column.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, CLASS_NAMES, HARD_CLASSES, N_CLASSES};

/// Dice for a single class id: 2|P∩G| / (|P|+|G|).
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::invalid(format!(
            "dice dims mismatch: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (a, b) in pred.data.iter().zip(&gt.data) {
        let (in_p, in_g) = (*a == class, *b == class);
        p += in_p as u64;
        g += in_g as u64;
        both += (in_p && in_g) as u64;
    }
    Ok(dice_from_counts(p, g, both))
}

fn dice_from_counts(p: u64, g: u64, both: u64) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Dice after merging every foreground class into one.
pub fn coarse_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::invalid(format!(
            "coarse_dice dims mismatch: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (a, b) in pred.data.iter().zip(&gt.data) {
        let (in_p, in_g) = (*a >= 1, *b >= 1);
        p += in_p as u64;
        g += in_g as u64;
        both += (in_p && in_g) as u64;
    }
    Ok(dice_from_counts(p, g, both))
}

/// Mean over all 8 foreground classes, and over the 6 that are not in
/// the hard set.
pub fn fine_means(per_class: &[f64; N_CLASSES - 1]) -> (f64, f64) {
    let with_hard = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, d) in per_class.iter().enumerate() {
        if !HARD_CLASSES.contains(&(i + 1)) {
            sum += d;
            n += 1;
        }
    }
    (with_hard, sum / n as f64)
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Dice for class id k at index k-1.
    pub dice_per_class: [f64; N_CLASSES - 1],
    pub avg_coarse: f64,
    pub avg_fine_with_hard: f64,
    pub avg_fine_without_hard: f64,
}

impl MetricsReport {
    pub fn class_dice(&self, class: u8) -> f64 {
        self.dice_per_class[class as usize - 1]
    }

    /// Column-wise mean over per-case reports.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        assert!(!reports.is_empty(), "mean of zero reports");
        let n = reports.len() as f64;
        let mut per_class = [0.0; N_CLASSES - 1];
        let (mut coarse, mut w, mut wo) = (0.0, 0.0, 0.0);
        for r in reports {
            for (acc, d) in per_class.iter_mut().zip(&r.dice_per_class) {
                *acc += d / n;
            }
            coarse += r.avg_coarse / n;
            w += r.avg_fine_with_hard / n;
            wo += r.avg_fine_without_hard / n;
        }
        MetricsReport {
            dice_per_class: per_class,
            avg_coarse: coarse,
            avg_fine_with_hard: w,
            avg_fine_without_hard: wo,
        }
    }
}

/// Per-case report: every class Dice plus the three aggregate columns.
pub fn report(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    let mut per_class = [0.0; N_CLASSES - 1];
    for class in 1..N_CLASSES as u8 {
        per_class[class as usize - 1] = dice(pred, gt, class)?;
    }
    let (with_hard, without_hard) = fine_means(&per_class);
    Ok(MetricsReport {
        dice_per_class: per_class,
        avg_coarse: coarse_dice(pred, gt)?,
        avg_fine_with_hard: with_hard,
        avg_fine_without_hard: without_hard,
    })
}

/// Class column label, starring the hard classes.
fn class_header(class: usize) -> String {
    if HARD_CLASSES.contains(&class) {
        format!("{}*", CLASS_NAMES[class])
    } else {
        CLASS_NAMES[class].to_string()
    }
}

/// CSV with one row per case plus a final mean row.
pub fn csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("case,avg_coarse,avg_fine_wo_hard,avg_fine_w_hard");
    for class in 1..N_CLASSES {
        let _ = write!(out, ",{}", class_header(class));
    }
    out.push('\n');
    let mut emit = |label: &str, r: &MetricsReport| {
        let _ = write!(
            out,
            "{label},{:.6},{:.6},{:.6}",
            r.avg_coarse, r.avg_fine_without_hard, r.avg_fine_with_hard
        );
        for d in &r.dice_per_class {
            let _ = write!(out, ",{d:.6}");
        }
        out.push('\n');
    };
    for (label, r) in rows {
        emit(label, r);
    }
    if !rows.is_empty() {
        let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
        emit("mean", &MetricsReport::mean(&reports));
    }
    out
}

/// Human-readable table over the same columns as the CSV.
pub fn table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10} {:>10} {:>14} {:>13}", "case", "Avg.Coarse", "Fine(w/o Hard)", "Fine(w/ Hard)");
    for class in 1..N_CLASSES {
        let _ = write!(out, " {:>6}", class_header(class));
    }
    out.push('\n');
    let mut emit = |label: &str, r: &MetricsReport| {
        let _ = write!(
            out,
            "{label:<10} {:>10.4} {:>14.4} {:>13.4}",
            r.avg_coarse, r.avg_fine_without_hard, r.avg_fine_with_hard
        );
        for d in &r.dice_per_class {
            let _ = write!(out, " {d:>6.4}");
        }
        out.push('\n');
    };
    for (label, r) in rows {
        emit(label, r);
    }
    if !rows.is_empty() {
        let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
        emit("mean", &MetricsReport::mean(&reports));
    }
    out
}
