//! CSV and SVG artifacts for training runs and evaluations.
//!
//! Floats are written with Rust's shortest round-trip formatting so the
//! files are byte-stable for a given run and parse back to the same values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::decode::LevelScore;
use crate::error::Result;
use crate::train::{StepRecord, TrainRun};

pub const LOSS_CSV: &str = "loss_curve.csv";
pub const MIOU_CSV: &str = "miou.csv";
pub const COHERENCE_CSV: &str = "coherence.csv";
pub const LOSS_SVG: &str = "loss_curve.svg";
pub const RUN_JSON: &str = "run.json";

pub fn loss_curve_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("step,beta,classification,triplet,total,triplets\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.step, s.beta, s.classification, s.triplet, s.total, s.triplets
        );
    }
    out
}

/// `level,class,iou` rows followed by one `level,mIoU,value` row per level.
/// The root level (always the highest) is labeled `mIoU-trivial`.
pub fn miou_csv(levels: &[LevelScore], class_names: &[String]) -> String {
    let root = levels.iter().map(|l| l.level).max();
    let mut out = String::from("level,class,iou\n");
    for l in levels {
        for (&c, iou) in &l.per_class {
            let name = class_names
                .get(c)
                .map_or_else(|| c.to_string(), |n| csv_field(n));
            let _ = writeln!(out, "{},{},{}", l.level, name, iou);
        }
    }
    for l in levels {
        let tag = if Some(l.level) == root && levels.len() > 1 {
            "mIoU-trivial"
        } else {
            "mIoU"
        };
        let _ = writeln!(out, "{},{},{}", l.level, tag, l.miou);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn coherence_csv(run: &TrainRun) -> String {
    let c = &run.coherence;
    format!(
        "metric,value\nthreshold,{}\npixels,{}\npositive_violations,{}\nnegative_violations,{}\nany_violation,{}\nviolation_rate,{}\n",
        c.threshold,
        c.pixels,
        c.positive,
        c.negative,
        c.any,
        c.rate()
    )
}

/// Static line plot of the total loss per step.
pub fn loss_curve_svg(steps: &[StepRecord]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = H - PAD,
        x1 = W - PAD,
    );
    if !steps.is_empty() {
        let max = steps
            .iter()
            .map(|s| s.total)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let span = (steps.len().max(2) - 1) as f64;
        let points: Vec<String> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x = PAD + (W - 2.0 * PAD) * i as f64 / span;
                let y = H - PAD - (H - 2.0 * PAD) * (s.total / max);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{PAD}\" y=\"{}\" font-size=\"12\">max loss {max:.4}</text>",
            PAD - 10.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes every report file for `run` into `dir` and returns their paths.
pub fn write_report(run: &TrainRun, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = [
        (LOSS_CSV, loss_curve_csv(&run.steps)),
        (MIOU_CSV, miou_csv(&run.levels, &run.class_names)),
        (COHERENCE_CSV, coherence_csv(run)),
        (LOSS_SVG, loss_curve_svg(&run.steps)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn write_run(run: &TrainRun, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(run)
        .map_err(|e| crate::error::Error::invalid(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_run(path: impl AsRef<Path>) -> Result<TrainRun> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| crate::error::Error::invalid(format!("run artifact: {e}")))
}
