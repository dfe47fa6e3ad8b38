//! Schema-versioned CSV reports. Every row carries its schema tag so files
//! stay self-describing; headers are fixed per schema version.
//!
//! `report.csv` holds only deterministic content (config echo, losses,
//! warnings, metrics); wall-clock timings go to the separate `timings.csv`
//! so artifact byte-identity across reruns is checkable.

use std::path::Path;

use crate::error::Result;

pub const REPORT_SCHEMA: &str = "psm-report-v1";
pub const TIMINGS_SCHEMA: &str = "psm-timings-v1";
pub const EVAL_SEG_SCHEMA: &str = "psm-eval-seg-v1";
pub const EVAL_DET_SCHEMA: &str = "psm-eval-det-v1";
pub const ABLATE_DEPTH_SCHEMA: &str = "psm-ablate-depth-v1";
pub const ABLATE_PROXY_SCHEMA: &str = "psm-ablate-proxy-v1";

/// Aggregate-row marker in per-image evaluation tables.
pub const AGGREGATE_ROW: &str = "__aggregate__";

#[derive(Default, Debug)]
pub struct RunReport {
    /// (section, key, value) rows in emission order.
    pub rows: Vec<(String, String, String)>,
    /// Stage name → wall-clock seconds, in stage order.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn put(&mut self, section: &str, key: &str, value: impl ToString) {
        self.rows
            .push((section.to_string(), key.to_string(), value.to_string()));
    }

    pub fn warn(&mut self, key: &str, msg: &str) {
        self.put("warning", key, msg);
    }

    pub fn time(&mut self, stage: &str, seconds: f64) {
        self.timings.push((stage.to_string(), seconds));
    }

    /// Looks up a numeric metric row.
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(s, k, _)| s == "metric" && k == key)
            .and_then(|(_, _, v)| v.parse().ok())
    }

    /// Writes `report.csv` (deterministic) and `timings.csv` (wall clock).
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(out_dir.join("report.csv"))?;
        w.write_record(["schema", "section", "key", "value"])?;
        for (section, key, value) in &self.rows {
            w.write_record([REPORT_SCHEMA, section, key, value])?;
        }
        w.flush().map_err(csv::Error::from)?;

        let mut t = csv::Writer::from_path(out_dir.join("timings.csv"))?;
        t.write_record(["schema", "stage", "seconds"])?;
        for (stage, secs) in &self.timings {
            t.write_record([TIMINGS_SCHEMA, stage, &format!("{secs:.3}")])?;
        }
        t.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SegEvalRow {
    pub image: String,
    pub pixel_iou: f64,
    pub pixel_f1: f64,
    pub aji: f64,
    pub dice_object: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SegEvalSummary {
    pub rows: Vec<SegEvalRow>,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub mean_aji: f64,
    pub mean_dice: f64,
}

pub fn write_eval_seg(path: &Path, summary: &SegEvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["schema", "image", "pixel_iou", "pixel_f1", "aji", "dice_object"])?;
    for r in &summary.rows {
        w.write_record([
            EVAL_SEG_SCHEMA,
            &r.image,
            &r.pixel_iou.to_string(),
            &r.pixel_f1.to_string(),
            &r.aji.to_string(),
            &r.dice_object.to_string(),
        ])?;
    }
    w.write_record([
        EVAL_SEG_SCHEMA,
        AGGREGATE_ROW,
        &summary.mean_iou.to_string(),
        &summary.mean_f1.to_string(),
        &summary.mean_aji.to_string(),
        &summary.mean_dice.to_string(),
    ])?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DetEvalRow {
    pub image: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub err_pos: f64,
    pub err_neg: f64,
}

/// Aggregate precision/recall/F1 are micro-averaged over summed TP/FP/FN;
/// `mp`/`mn` are the mean absolute counting errors for classes 1 and 2.
#[derive(Clone, Debug, Default)]
pub struct DetEvalSummary {
    pub rows: Vec<DetEvalRow>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mp: f64,
    pub mn: f64,
}

pub fn write_eval_det(path: &Path, summary: &DetEvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "schema", "image", "tp", "fp", "fn", "precision", "recall", "f1", "err_pos", "err_neg",
    ])?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for r in &summary.rows {
        tp += r.tp;
        fp += r.fp;
        fn_ += r.fn_;
        w.write_record([
            EVAL_DET_SCHEMA,
            &r.image,
            &r.tp.to_string(),
            &r.fp.to_string(),
            &r.fn_.to_string(),
            &r.precision.to_string(),
            &r.recall.to_string(),
            &r.f1.to_string(),
            &r.err_pos.to_string(),
            &r.err_neg.to_string(),
        ])?;
    }
    w.write_record([
        EVAL_DET_SCHEMA,
        AGGREGATE_ROW,
        &tp.to_string(),
        &fp.to_string(),
        &fn_.to_string(),
        &summary.precision.to_string(),
        &summary.recall.to_string(),
        &summary.f1.to_string(),
        &summary.mp.to_string(),
        &summary.mn.to_string(),
    ])?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
