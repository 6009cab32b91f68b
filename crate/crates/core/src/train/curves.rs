//! Training logs and accuracy/loss charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<EpochRow>,
}

impl TrainingLog {
    /// Header `epoch,train_loss,train_acc,val_loss,val_acc`. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<TrainingLog> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRow>, _>>()
            .map_err(|e| Error::Format(format!("training log: {e}")))?;
        Ok(TrainingLog { rows })
    }

    /// Row with the highest validation accuracy, earliest on ties.
    pub fn best(&self) -> Option<&EpochRow> {
        self.rows
            .iter()
            .fold(None, |b: Option<&EpochRow>, r| match b {
                Some(b) if b.val_acc >= r.val_acc => Some(b),
                _ => Some(r),
            })
    }
}

/// Paths written by [`emit_training_curves`].
#[derive(Clone, Debug)]
pub struct CurveFiles {
    pub accuracy_svg: PathBuf,
    pub loss_svg: PathBuf,
    pub table_csv: PathBuf,
}

/// A two-series line chart over epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub y_label: String,
    pub x_range: (usize, usize),
    pub y_range: (f64, f64),
    pub train: Vec<(usize, f64)>,
    pub val: Vec<(usize, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;

impl LineChart {
    fn new(title: &str, y_label: &str, log: &TrainingLog, pick: impl Fn(&EpochRow) -> (f64, f64)) -> LineChart {
        let train: Vec<_> = log.rows.iter().map(|r| (r.epoch, pick(r).0)).collect();
        let val: Vec<_> = log.rows.iter().map(|r| (r.epoch, pick(r).1)).collect();
        let ys = train.iter().chain(&val).map(|p| p.1).filter(|v| v.is_finite());
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo > hi {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        };
        let x0 = log.rows.iter().map(|r| r.epoch).min().unwrap_or(1);
        let x1 = log.rows.iter().map(|r| r.epoch).max().unwrap_or(1);
        LineChart {
            title: title.into(),
            y_label: y_label.into(),
            x_range: (x0, x1),
            y_range: (lo, hi),
            train,
            val,
        }
    }

    fn px(&self, x: usize) -> f64 {
        let (a, b) = self.x_range;
        if a == b {
            return LEFT + (W - LEFT - RIGHT) / 2.0;
        }
        LEFT + (x - a) as f64 / (b - a) as f64 * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        TOP + (1.0 - (y - lo) / (hi - lo)) * (H - TOP - BOTTOM)
    }

    fn x_ticks(&self) -> Vec<usize> {
        let (a, b) = self.x_range;
        let span = b - a;
        let step = [1, 2, 5, 10, 20, 25, 50, 100, 200, 500]
            .into_iter()
            .find(|s| span / s <= 10)
            .unwrap_or(span.max(1));
        let mut t: Vec<usize> = (a..=b).step_by(step).collect();
        if t.last() != Some(&b) {
            t.push(b);
        }
        t
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, self.title);
        let (bx, by) = (H - BOTTOM, W - RIGHT);
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{bx}" x2="{by}" y2="{bx}" stroke="black"/>"#);
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{bx}" stroke="black"/>"#);
        for t in self.x_ticks() {
            let x = self.px(t);
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bx}" x2="{x:.2}" y2="{}" stroke="black"/>"#, bx + 5.0);
            let _ = writeln!(s, r#"<text class="xtick" x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#, bx + 18.0);
        }
        let (lo, hi) = self.y_range;
        for i in 0..=4 {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, LEFT - 8.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, (LEFT + W - RIGHT) / 2.0, H - 12.0);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            self.y_label
        );
        for (series, colour, name, ly) in [(&self.train, "#1f77b4", "train", TOP + 8.0), (&self.val, "#d62728", "validation", TOP + 24.0)] {
            let pts: Vec<String> = series
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
                .collect();
            if pts.len() > 1 {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            }
            for p in &pts {
                let (x, y) = p.split_once(',').expect("pair");
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{colour}"/>"#);
            }
            let lx = W - RIGHT - 110.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, lx + 20.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, lx + 26.0, ly + 4.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

pub fn accuracy_chart(log: &TrainingLog) -> LineChart {
    LineChart::new("Accuracy", "accuracy", log, |r| (r.train_acc, r.val_acc))
}

pub fn loss_chart(log: &TrainingLog) -> LineChart {
    LineChart::new("Loss", "loss", log, |r| (r.train_loss, r.val_loss))
}

/// Writes `accuracy.svg`, `loss.svg` and `training_log.csv` into `dir`.
pub fn emit_training_curves(log: &TrainingLog, dir: &Path) -> Result<CurveFiles> {
    if log.rows.is_empty() {
        return Err(Error::Harness("training log is empty".into()));
    }
    std::fs::create_dir_all(dir)?;
    let files = CurveFiles {
        accuracy_svg: dir.join("accuracy.svg"),
        loss_svg: dir.join("loss.svg"),
        table_csv: dir.join("training_log.csv"),
    };
    std::fs::write(&files.accuracy_svg, accuracy_chart(log).to_svg())?;
    std::fs::write(&files.loss_svg, loss_chart(log).to_svg())?;
    std::fs::write(&files.table_csv, log.to_csv()?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(n: usize) -> TrainingLog {
        TrainingLog {
            rows: (1..=n)
                .map(|e| EpochRow {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    train_acc: 1.0 - 0.3 / e as f64,
                    val_loss: 0.1 + 1.0 / (e as f64 + 1.0),
                    val_acc: 0.9 - 0.1 / e as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let l = log(30);
        let text = l.to_csv().unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert_eq!(TrainingLog::from_csv(&text).unwrap(), l);
    }

    #[test]
    fn axis_spans_epochs() {
        let c = accuracy_chart(&log(30));
        assert_eq!(c.x_range, (1, 30));
        let svg = c.to_svg();
        assert!(svg.contains(r#"class="xtick""#));
        assert!(svg.contains(">1</text>") && svg.contains(">30</text>"));
    }

    #[test]
    fn single_row() {
        let dir = tempfile::tempdir().unwrap();
        let f = emit_training_curves(&log(1), dir.path()).unwrap();
        assert!(std::fs::read_to_string(f.loss_svg).unwrap().contains("<circle"));
        assert!(matches!(emit_training_curves(&TrainingLog::default(), dir.path()), Err(Error::Harness(_))));
    }

    #[test]
    fn best_prefers_earliest() {
        let mut l = log(3);
        l.rows[0].val_acc = 0.95;
        l.rows[2].val_acc = 0.95;
        assert_eq!(l.best().unwrap().epoch, 1);
    }
}
