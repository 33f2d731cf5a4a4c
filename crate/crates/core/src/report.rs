//! Run artifacts: metrics and confusion CSVs, confusion heatmap, loss-curve
//! SVG and run comparison.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::write_ppm_bytes;
use crate::error::{Error, Result};
use crate::metrics::{offdiag_sum, ConfusionMatrix, EvalReport};
use crate::trainer::TrainLog;

pub const METRICS_HEADER: &str = "class_id,name,instances,precision,recall,ap50,ap50_95";
pub const CELL_PX: usize = 16;

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for c in &report.classes {
        writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            c.class_id,
            csv_field(&c.name),
            c.instances,
            c.precision,
            c.recall,
            c.ap50,
            c.ap50_95
        )
        .expect("write to string");
    }
    let total: usize = report.classes.iter().map(|c| c.instances).sum();
    match report.means {
        Some(m) => writeln!(
            s,
            "mean,all,{total},{:.4},{:.4},{:.4},{:.4}",
            m.precision, m.recall, m.map50, m.map50_95
        ),
        None => writeln!(s, "mean,all,{total},,,,"),
    }
    .expect("write to string");
    s
}

/// One parsed row of a metrics CSV; `class_id` is `None` for the mean row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub class_id: Option<usize>,
    pub name: String,
    pub instances: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Invalid("metrics CSV header mismatch".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Invalid(format!("metrics CSV line {}: malformed", n + 2));
        let f = split_csv_line(line.trim_end());
        if f.len() != 7 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        rows.push(MetricsRow {
            class_id: if f[0] == "mean" { None } else { Some(f[0].parse().map_err(|_| bad())?) },
            name: f[1].clone(),
            instances: f[2].parse().map_err(|_| bad())?,
            precision: opt(&f[3])?,
            recall: opt(&f[4])?,
            ap50: opt(&f[5])?,
            ap50_95: opt(&f[6])?,
        });
    }
    Ok(rows)
}

/// Header row and column carry the class names and `background`.
pub fn confusion_csv(cm: &ConfusionMatrix, names: &[String]) -> String {
    let mut labels: Vec<String> = names.iter().map(|n| csv_field(n)).collect();
    labels.push("background".into());
    let mut s = format!("predicted\\actual,{}\n", labels.join(","));
    for (label, row) in labels.iter().zip(&cm.counts) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(s, "{label},{}", cells.join(",")).expect("write to string");
    }
    s
}

pub fn parse_confusion_csv(text: &str) -> Result<Vec<Vec<u64>>> {
    let bad = || Error::Invalid("malformed confusion CSV".into());
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let n = split_csv_line(lines.next().ok_or_else(bad)?).len() - 1;
    let rows: Vec<Vec<u64>> = lines
        .map(|l| {
            split_csv_line(l)
                .iter()
                .skip(1)
                .map(|v| v.parse().map_err(|_| bad()))
                .collect::<Result<Vec<u64>>>()
        })
        .collect::<Result<_>>()?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(bad());
    }
    Ok(rows)
}

const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const DARK: [f64; 3] = [24.0, 24.0, 24.0];
const DARK_BACKGROUND: [f64; 3] = [20.0, 40.0, 110.0];

/// P6 heatmap bytes: one `CELL_PX`² block per cell, shaded linearly from
/// white at 0 to dark at the row maximum; background row and column shade
/// towards blue instead of gray.
pub fn confusion_heatmap(cm: &ConfusionMatrix) -> (usize, Vec<u8>) {
    let n = cm.size;
    let side = n * CELL_PX;
    let mut rgb = vec![0u8; side * side * 3];
    let bg = cm.background();
    for (i, row) in cm.counts.iter().enumerate() {
        let max = row.iter().copied().max().unwrap_or(0);
        for (j, &c) in row.iter().enumerate() {
            let t = if max == 0 { 0.0 } else { c as f64 / max as f64 };
            let dark = if i == bg || j == bg { DARK_BACKGROUND } else { DARK };
            let px: [u8; 3] = std::array::from_fn(|k| (WHITE[k] + t * (dark[k] - WHITE[k])).round() as u8);
            for y in i * CELL_PX..(i + 1) * CELL_PX {
                for x in j * CELL_PX..(j + 1) * CELL_PX {
                    let o = (y * side + x) * 3;
                    rgb[o..o + 3].copy_from_slice(&px);
                }
            }
        }
    }
    (side, rgb)
}

pub fn emit_confusion_heatmap(cm: &ConfusionMatrix, names: &[String], ppm: &Path, csv: &Path) -> Result<()> {
    let (side, rgb) = confusion_heatmap(cm);
    write_ppm_bytes(ppm, side, side, &rgb)?;
    std::fs::write(csv, confusion_csv(cm, names)).map_err(|e| Error::io(csv, e))
}

/// Shared plotting range for curve SVGs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub epoch_min: f64,
    pub epoch_max: f64,
    pub loss_max: f64,
}

impl Viewport {
    pub fn fit(logs: &[&TrainLog]) -> Result<Self> {
        let rows: Vec<_> = logs.iter().flat_map(|l| &l.rows).collect();
        if rows.is_empty() {
            return Err(Error::Invalid("cannot plot an empty training log".into()));
        }
        let epoch_min = rows.iter().map(|r| r.epoch).min().unwrap() as f64;
        let epoch_max = rows.iter().map(|r| r.epoch).max().unwrap() as f64;
        let top = rows
            .iter()
            .flat_map(|r| [r.total, r.box_loss])
            .fold(0.0f64, f64::max);
        Ok(Self {
            epoch_min,
            epoch_max,
            loss_max: if top > 0.0 { top * 1.05 } else { 1.0 },
        })
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 45.0;

impl Viewport {
    pub fn x(&self, epoch: f64) -> f64 {
        let plot = SVG_W - MARGIN_L - MARGIN_R;
        if self.epoch_max == self.epoch_min {
            MARGIN_L + plot / 2.0
        } else {
            MARGIN_L + plot * (epoch - self.epoch_min) / (self.epoch_max - self.epoch_min)
        }
    }

    /// Larger losses map to smaller (higher on screen) coordinates.
    pub fn y(&self, loss: f64) -> f64 {
        let plot = SVG_H - MARGIN_T - MARGIN_B;
        MARGIN_T + plot * (1.0 - loss / self.loss_max)
    }
}

pub fn curves_svg(log: &TrainLog) -> Result<String> {
    curves_svg_in(log, &Viewport::fit(&[log])?)
}

/// Total and box loss polylines over epochs with axes and a legend.
pub fn curves_svg_in(log: &TrainLog, vp: &Viewport) -> Result<String> {
    if log.rows.is_empty() {
        return Err(Error::Invalid("cannot plot an empty training log".into()));
    }
    let mut s = String::new();
    let w = |s: &mut String, line: String| {
        s.push_str(&line);
        s.push('\n');
    };
    w(&mut s, format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    ));
    w(&mut s, format!("<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>"));
    let (x0, x1) = (MARGIN_L, SVG_W - MARGIN_R);
    let (y0, y1) = (SVG_H - MARGIN_B, MARGIN_T);
    w(&mut s, format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"));
    w(&mut s, format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"));
    for k in 0..=4 {
        let v = vp.loss_max * k as f64 / 4.0;
        let y = vp.y(v);
        w(&mut s, format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>",
            x0 - 6.0,
            y + 4.0
        ));
    }
    let ticks: Vec<f64> = if vp.epoch_max == vp.epoch_min {
        vec![vp.epoch_min]
    } else {
        (0..=4)
            .map(|k| (vp.epoch_min + (vp.epoch_max - vp.epoch_min) * k as f64 / 4.0).round())
            .collect()
    };
    let mut last = f64::NAN;
    for e in ticks {
        if e == last {
            continue;
        }
        last = e;
        w(&mut s, format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{e}</text>",
            vp.x(e),
            y0 + 16.0
        ));
    }
    w(&mut s, format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">epoch</text>",
        (x0 + x1) / 2.0,
        SVG_H - 8.0
    ));
    w(&mut s, format!(
        "<text x=\"14\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">loss</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));
    let series: [(&str, &str, fn(&crate::trainer::TrainRow) -> f64); 2] = [
        ("total", "#1f77b4", |r| r.total),
        ("box", "#d62728", |r| r.box_loss),
    ];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<String> = log
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", vp.x(r.epoch as f64), vp.y(get(r))))
            .collect();
        w(&mut s, format!(
            "<polyline id=\"{name}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 10.0 + 16.0 * k as f64;
        w(&mut s, format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            x1 - 90.0,
            x1 - 70.0
        ));
        w(&mut s, format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{name} loss</text>",
            x1 - 64.0,
            ly + 4.0
        ));
    }
    w(&mut s, "</svg>".into());
    Ok(s)
}

/// Per-class change between two runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGain {
    pub class_id: usize,
    pub name: String,
    pub ap50: (f64, f64),
    pub ap50_95: (f64, f64),
}

impl ClassGain {
    pub fn gain50(&self) -> f64 {
        self.ap50.1 - self.ap50.0
    }

    pub fn gain(&self) -> f64 {
        self.ap50_95.1 - self.ap50_95.0
    }
}

/// Run B measured against run A; every delta is `B − A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// `(epoch, Δtotal, Δbox, Δcls, Δmask, Δrisk)` over epochs both runs logged.
    pub loss_deltas: Vec<(usize, [f64; 5])>,
    pub classes: Vec<ClassGain>,
    pub map50: (Option<f64>, Option<f64>),
    pub map50_95: (Option<f64>, Option<f64>),
    pub offdiag: (u64, u64),
    pub foreground_offdiag: (u64, u64),
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn foreground_offdiag(m: &[Vec<u64>]) -> u64 {
    let bg = m.len().saturating_sub(1);
    (0..bg)
        .flat_map(|i| (0..bg).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| m[i][j])
        .sum()
}

pub fn compare_runs(a: &Path, b: &Path) -> Result<Comparison> {
    let load = |dir: &Path| -> Result<(TrainLog, Vec<MetricsRow>, Vec<Vec<u64>>)> {
        let log = TrainLog::from_csv(&read(&dir.join("curves.csv"))?)?;
        let metrics = parse_metrics_csv(&read(&dir.join("metrics.csv"))?)?;
        let conf = parse_confusion_csv(&read(&dir.join("confusion.csv"))?)?;
        Ok((log, metrics, conf))
    };
    let (log_a, met_a, conf_a) = load(a)?;
    let (log_b, met_b, conf_b) = load(b)?;
    let classes_of = |m: &[MetricsRow]| -> Vec<(usize, String)> {
        m.iter()
            .filter_map(|r| r.class_id.map(|id| (id, r.name.clone())))
            .collect()
    };
    if classes_of(&met_a) != classes_of(&met_b) || conf_a.len() != conf_b.len() {
        return Err(Error::Invalid("runs have mismatched class tables".into()));
    }
    let loss_deltas = log_a
        .rows
        .iter()
        .filter_map(|ra| {
            let rb = log_b.rows.iter().find(|r| r.epoch == ra.epoch)?;
            Some((
                ra.epoch,
                [
                    rb.total - ra.total,
                    rb.box_loss - ra.box_loss,
                    rb.cls - ra.cls,
                    rb.mask - ra.mask,
                    rb.risk - ra.risk,
                ],
            ))
        })
        .collect();
    let classes = met_a
        .iter()
        .zip(&met_b)
        .filter_map(|(ra, rb)| {
            let id = ra.class_id?;
            Some(ClassGain {
                class_id: id,
                name: ra.name.clone(),
                ap50: (ra.ap50.unwrap_or(0.0), rb.ap50.unwrap_or(0.0)),
                ap50_95: (ra.ap50_95.unwrap_or(0.0), rb.ap50_95.unwrap_or(0.0)),
            })
        })
        .collect();
    let mean = |m: &[MetricsRow]| m.iter().find(|r| r.class_id.is_none()).cloned();
    let (ma, mb) = (mean(&met_a), mean(&met_b));
    Ok(Comparison {
        loss_deltas,
        classes,
        map50: (ma.as_ref().and_then(|r| r.ap50), mb.as_ref().and_then(|r| r.ap50)),
        map50_95: (ma.as_ref().and_then(|r| r.ap50_95), mb.as_ref().and_then(|r| r.ap50_95)),
        offdiag: (offdiag_sum(&conf_a)?, offdiag_sum(&conf_b)?),
        foreground_offdiag: (foreground_offdiag(&conf_a), foreground_offdiag(&conf_b)),
    })
}

fn signed(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r >= 0.0 {
        format!("+{:.2}", r.abs())
    } else {
        format!("{r:.2}")
    }
}

impl Comparison {
    /// Per-class gain table on AP50-95 with an average-gain footer.
    pub fn gain_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(12);
        let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}\n", "Class", "A", "B", "Gain");
        for c in &self.classes {
            writeln!(
                s,
                "{:<width$}  {:>6.2}  {:>6.2}  {:>6}",
                c.name,
                c.ap50_95.0,
                c.ap50_95.1,
                signed(c.gain())
            )
            .expect("write to string");
        }
        if !self.classes.is_empty() {
            let avg = self.classes.iter().map(ClassGain::gain).sum::<f64>() / self.classes.len() as f64;
            writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}", "Average Gain", "--", "--", signed(avg))
                .expect("write to string");
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = self.gain_table();
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let delta = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => format!("{:+.4}", b - a),
            _ => "-".into(),
        };
        writeln!(
            s,
            "\nmAP50     A {}  B {}  delta {}",
            opt(self.map50.0),
            opt(self.map50.1),
            delta(self.map50.0, self.map50.1)
        )
        .expect("write to string");
        writeln!(
            s,
            "mAP50-95  A {}  B {}  delta {}",
            opt(self.map50_95.0),
            opt(self.map50_95.1),
            delta(self.map50_95.0, self.map50_95.1)
        )
        .expect("write to string");
        writeln!(
            s,
            "off-diagonal  A {}  B {}  delta {:+}",
            self.offdiag.0,
            self.offdiag.1,
            self.offdiag.1 as i64 - self.offdiag.0 as i64
        )
        .expect("write to string");
        writeln!(
            s,
            "foreground off-diagonal  A {}  B {}  delta {:+}",
            self.foreground_offdiag.0,
            self.foreground_offdiag.1,
            self.foreground_offdiag.1 as i64 - self.foreground_offdiag.0 as i64
        )
        .expect("write to string");
        if let Some((e, d)) = self.loss_deltas.last() {
            writeln!(s, "final total loss delta (epoch {e}) {:+.6}", d[0]).expect("write to string");
        }
        s
    }

    pub fn classes_csv(&self) -> String {
        let mut s = String::from("class_id,name,ap50_a,ap50_b,ap50_gain,ap50_95_a,ap50_95_b,gain\n");
        for c in &self.classes {
            writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                c.class_id,
                csv_field(&c.name),
                c.ap50.0,
                c.ap50.1,
                c.gain50(),
                c.ap50_95.0,
                c.ap50_95.1,
                c.gain()
            )
            .expect("write to string");
        }
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,total_delta,box_delta,cls_delta,mask_delta,risk_delta\n");
        for (e, d) in &self.loss_deltas {
            writeln!(s, "{e},{:.6},{:.6},{:.6},{:.6},{:.6}", d[0], d[1], d[2], d[3], d[4])
                .expect("write to string");
        }
        s
    }
}
