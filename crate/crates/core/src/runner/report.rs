use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{MetricsReport, SessionMatrix};

use super::RunRecord;

/// Shortest round-trip form, padded to at least six decimals when that is
/// still exact.
pub fn format_value(v: f64) -> String {
    let padded = format!("{v:.6}");
    if padded.parse::<f64>().ok() == Some(v) {
        padded
    } else {
        v.to_string()
    }
}

pub fn heatmap_csv(m: &SessionMatrix) -> String {
    let mut out = String::from("task");
    for s in 0..m.n_sessions() {
        write!(out, ",session_{s}").unwrap();
    }
    out.push('\n');
    for (t, row) in m.rows().iter().enumerate() {
        write!(out, "task_{t}").unwrap();
        for v in row {
            write!(out, ",{}", format_value(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_heatmap_csv(text: &str) -> Result<SessionMatrix> {
    let rows = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Data(format!("bad heatmap value `{v}`: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    SessionMatrix::from_rows(&rows)
}

/// Rows are tasks, columns sessions; cells shade from white to blue.
pub fn heatmap_svg(m: &SessionMatrix, title: &str) -> String {
    const CELL: usize = 56;
    const LEFT: usize = 70;
    const TOP: usize = 50;
    let width = LEFT + CELL * m.n_sessions() + 10;
    let height = TOP + CELL * m.n_tasks() + 10;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    writeln!(out, "<text x=\"{LEFT}\" y=\"18\" font-size=\"14\">{}</text>", escape(title)).unwrap();
    for s in 0..m.n_sessions() {
        let x = LEFT + s * CELL + CELL / 2;
        writeln!(out, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">S{s}</text>", TOP - 8).unwrap();
    }
    for t in 0..m.n_tasks() {
        let y = TOP + t * CELL;
        writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">Task-{t}</text>", LEFT - 6, y + CELL / 2 + 4).unwrap();
        for s in 0..m.n_sessions() {
            let v = m.get(t, s);
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let (r, g, b) = (shade(33.0), shade(102.0), shade(172.0));
            let x = LEFT + s * CELL;
            writeln!(
                out,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#{r:02x}{g:02x}{b:02x}\" stroke=\"#888\"/>"
            )
            .unwrap();
            let ink = if v > 0.6 { "#fff" } else { "#000" };
            writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{:.1}</text>",
                x + CELL / 2,
                y + CELL / 2 + 4,
                100.0 * v
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const NEIGHBORS_HEADER: &str = "query_row\tquery_instance\tquery_task\trank\tgallery_row\tinstance\tdistance";

pub fn neighbors_txt(record: &RunRecord) -> String {
    let mut out = String::from(NEIGHBORS_HEADER);
    out.push('\n');
    for q in &record.neighbors {
        for (rank, n) in q.neighbors.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                q.query_row,
                q.instance_id,
                q.task_id,
                rank + 1,
                n.row,
                n.instance_id,
                n.distance
            )
            .unwrap();
        }
    }
    out
}

/// Acc and For in percent, one row per run, plus cross-dataset columns when
/// any row has them.
pub fn format_table(report: &MetricsReport) -> String {
    let cross = report.rows.iter().any(|r| r.cross.is_some());
    let mut out = format!("{:<8} {:<12} {:>9} {:>9}", "Method", "Supervision", "Acc(↑)", "For(↓)");
    if cross {
        write!(out, " {:>10} {:>8}", "Cross Acc", "%Δ").unwrap();
    }
    out.push('\n');
    for r in &report.rows {
        let forgetting = r.forgetting.map_or("-".to_string(), |f| format!("{:.3}", 100.0 * f));
        write!(out, "{:<8} {:<12} {:>9.3} {:>9}", r.method, r.supervision, 100.0 * r.acc, forgetting).unwrap();
        if let Some(c) = &r.cross {
            write!(out, " {:>10.3} {:>8.2}", 100.0 * c.acc, c.rel_drop_pct).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn metrics_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("metrics serialize") + "\n"
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `metrics.json`, `heatmap_<method>-<supervision>.csv`,
/// `heatmap.svg`, `neighbors.txt` and `run_record.json` into `dir`.
pub fn emit_reports(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cell = format!("{}-{}", record.method.name(), record.supervision.name());
    let mut written = Vec::new();
    let report = MetricsReport { rows: vec![record.metrics.clone()] };
    write(dir.join("metrics.json"), &metrics_json(&report), &mut written)?;
    write(dir.join(format!("heatmap_{cell}.csv")), &heatmap_csv(&record.matrix), &mut written)?;
    let title = format!("{} ({}) on {}", record.metrics.method, record.metrics.supervision, record.dataset);
    write(dir.join("heatmap.svg"), &heatmap_svg(&record.matrix, &title), &mut written)?;
    write(dir.join("neighbors.txt"), &neighbors_txt(record), &mut written)?;
    let json = serde_json::to_string_pretty(record)? + "\n";
    write(dir.join("run_record.json"), &json, &mut written)?;
    Ok(written)
}
