//! Markdown tables and static SVG figures for a result bundle.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::embedding::{read_embedding, EmbeddedPoint};
use crate::error::{Error, Result};
use crate::experiments::{ExperimentMode, ReportSummary, BUNDLE_MEMBERS};
use crate::metrics::{AucMatrix, ConfusionMatrix, EMPTY_CELL};

/// Upper-triangle AUC table, three decimals, unused cells as `----`.
pub fn format_auc_table(auc: &AucMatrix) -> String {
    let k = auc.class_names.len();
    let mut out = String::new();
    let _ = writeln!(out, "| |{}|", auc.class_names.join("|"));
    let _ = writeln!(out, "|---|{}", "---|".repeat(k));
    for (i, name) in auc.class_names.iter().enumerate() {
        let cells: Vec<String> = (0..k)
            .map(|j| match auc.get(i, j) {
                Some(v) => format!("{v:.3}"),
                None => EMPTY_CELL.to_string(),
            })
            .collect();
        let _ = writeln!(out, "|{name}|{}|", cells.join("|"));
    }
    out
}

/// Parse a table produced by [`format_auc_table`] back into cells.
pub fn parse_auc_table(text: &str) -> Vec<Vec<Option<f64>>> {
    text.lines()
        .skip(2)
        .take_while(|l| l.starts_with('|'))
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .skip(1)
                .map(|c| c.trim().parse::<f64>().ok())
                .collect()
        })
        .collect()
}

pub fn format_confusion_table(c: &ConfusionMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| true \\ predicted |{}|", c.class_names.join("|"));
    let _ = writeln!(out, "|---|{}", "---|".repeat(c.class_names.len()));
    for (name, row) in c.class_names.iter().zip(&c.counts) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "|{name}|{}|", cells.join("|"));
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Row-normalized heatmap of a confusion matrix.
pub fn confusion_svg(c: &ConfusionMatrix) -> String {
    let k = c.class_names.len();
    let cell = 70.0;
    let left = 120.0;
    let top = 100.0;
    let w = left + cell * k as f64 + 20.0;
    let h = top + cell * k as f64 + 20.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<text x=\"{left}\" y=\"20\">predicted</text>");
    let sums = c.row_sums();
    for (i, row) in c.counts.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + cell / 2.0 + 4.0,
            esc(&c.class_names[i])
        );
        for (j, &n) in row.iter().enumerate() {
            let x = left + cell * j as f64;
            let frac = if sums[i] == 0 { 0.0 } else { n as f64 / sums[i] as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#444\"/>"
            );
            let color = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{color}\">{n}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    for (j, name) in c.class_names.iter().enumerate() {
        let x = left + cell * j as f64 + cell / 2.0;
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"start\" transform=\"rotate(-40 {x} {})\">{}</text>",
            top - 8.0,
            top - 8.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of embedded points colored by source corpus.
pub fn embedding_svg(points: &[EmbeddedPoint]) -> String {
    let size = 480.0;
    let pad = 20.0;
    let legend_w = 160.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let mut labels: Vec<&str> = Vec::new();
    for p in points {
        if !labels.contains(&p.dataset_label.as_str()) {
            labels.push(&p.dataset_label);
        }
    }
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        size + 2.0 * pad + legend_w,
        size + 2.0 * pad
    );
    let _ = writeln!(
        s,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#888\"/>"
    );
    for p in points {
        let li = labels.iter().position(|l| *l == p.dataset_label).unwrap_or(0);
        let cx = pad + (p.x - x0) / span * size;
        let cy = pad + size - (p.y - y0) / span * size;
        let _ = writeln!(
            s,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>",
            PALETTE[li % PALETTE.len()]
        );
    }
    for (i, l) in labels.iter().enumerate() {
        let y = pad + 20.0 * i as f64 + 10.0;
        let x = size + 2.0 * pad;
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{y}\" r=\"5\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            x + 5.0,
            PALETTE[i % PALETTE.len()],
            x + 15.0,
            y + 4.0,
            esc(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone)]
pub struct RenderedReport {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

fn read_member(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingBundleMember { path });
    }
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

/// Render `report.md`, `confusion.svg` and, when the bundle has an
/// embedding, `embedding.svg` into the bundle directory.
pub fn render_report(dir: &Path) -> Result<RenderedReport> {
    let mut raw = Vec::new();
    for m in BUNDLE_MEMBERS {
        raw.push(read_member(dir, m)?);
    }
    let summary: ReportSummary = serde_json::from_slice(&raw[4])?;
    let auc = AucMatrix::read_csv(raw[2].as_slice())?;
    let confusion = ConfusionMatrix::read_csv(raw[3].as_slice())?;
    let embedding = if dir.join("embedding.csv").is_file() {
        Some(read_embedding(read_member(dir, "embedding.csv")?.as_slice())?)
    } else {
        None
    };

    let mut md = String::new();
    let mut notes = Vec::new();
    let title = match summary.mode {
        ExperimentMode::DatasetRecognition => "ROC-AUC of the dataset recognition task".to_string(),
        ExperimentMode::TargetRecognition => format!(
            "ROC-AUC of the target recognition task, leave-out {}",
            summary.leave_out.as_deref().unwrap_or("?")
        ),
    };
    let _ = writeln!(md, "# {title}\n");
    let _ = writeln!(
        md,
        "Protocol: {} ({} folds, {} pooled predictions)\n",
        summary.protocol,
        summary.folds.len(),
        summary.n_records
    );
    if let Some(t) = summary.target_auc {
        let _ = writeln!(md, "Target AUC: **{t:.3}**\n");
    }
    let _ = writeln!(md, "## Pairwise AUC\n");
    md.push_str(&format_auc_table(&auc));
    let _ = writeln!(md, "\n## Confusion matrix\n");
    md.push_str(&format_confusion_table(&confusion));
    let _ = writeln!(md, "\n![confusion](confusion.svg)\n");

    let _ = writeln!(md, "## Folds\n");
    let _ = writeln!(md, "|fold|train|test|final loss|accuracy|");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for f in &summary.folds {
        let _ = writeln!(
            md,
            "|{}|{}|{}|{:.4}|{:.3}|",
            f.fold, f.n_train, f.n_test, f.final_loss, f.test_accuracy
        );
    }
    let warnings: Vec<&String> = summary
        .fold_notes
        .iter()
        .chain(summary.folds.iter().flat_map(|f| f.warnings.iter()))
        .collect();
    if !warnings.is_empty() {
        let _ = writeln!(md, "\nNotes:\n");
        for w in warnings {
            let _ = writeln!(md, "- {w}");
        }
    }

    let mut files = Vec::new();
    let conf_path = dir.join("confusion.svg");
    fs::write(&conf_path, confusion_svg(&confusion)).map_err(|e| Error::io(&conf_path, e))?;
    files.push(conf_path);

    let _ = writeln!(md, "\n## Embedding\n");
    match embedding {
        Some(points) => {
            let p = dir.join("embedding.svg");
            fs::write(&p, embedding_svg(&points)).map_err(|e| Error::io(&p, e))?;
            files.push(p);
            let _ = writeln!(md, "![embedding](embedding.svg)");
        }
        None => {
            let note = "no embedding in this bundle; scatter omitted".to_string();
            let _ = writeln!(md, "{note}.");
            notes.push(note);
        }
    }

    let md_path = dir.join("report.md");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    files.insert(0, md_path);
    Ok(RenderedReport { files, notes })
}
