//! Model-pair diagnostics report: one JSON document plus per-figure CSV and
//! SVG files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::alignment::AlignmentResult;
use crate::attention::{EntropyMode, LayerCorrelation, SigmoidFit};
use crate::behavior::{BinnedSeries, GapTrend};
use crate::geometry::DispersionReport;
use crate::tensor;

pub const SCHEMA: &str = "concreteness-probe/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no section completed; nothing to report")]
    NothingCompleted,
    #[error("could not serialize report: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("could not write CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "data", rename_all = "snake_case")]
pub enum Section<T> {
    Completed(T),
    Skipped { reason: String },
}

impl<T> Section<T> {
    pub fn skipped(reason: impl Into<String>) -> Self {
        Section::Skipped {
            reason: reason.into(),
        }
    }

    pub fn completed(&self) -> Option<&T> {
        match self {
            Section::Completed(t) => Some(t),
            Section::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelPair {
    pub baseline: String,
    pub vision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelAccuracy {
    pub series: BinnedSeries,
    pub total: usize,
    pub out_of_range: usize,
    pub overall_accuracy: Option<f64>,
    pub per_dataset: BTreeMap<String, BinnedSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BehaviorSection {
    pub bins: String,
    pub models: BTreeMap<String, ModelAccuracy>,
    /// Vision minus baseline accuracy per bin.
    pub gap: BinnedSeries,
    pub trend: Option<GapTrend>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryModel {
    pub n_types: usize,
    pub uncovered: usize,
    pub final_kl: f64,
    pub dispersion: DispersionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometrySection {
    pub models: BTreeMap<String, GeometryModel>,
    /// Bins present for both models.
    pub compared_bins: Vec<u8>,
    /// Bins where the vision model's dispersion is lower.
    pub vision_lower_bins: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionModel {
    pub sequences: usize,
    pub layers: Vec<LayerCorrelation>,
    pub mean_r: Option<f64>,
    pub sigmoid: Option<SigmoidFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionSection {
    pub entropy_mode: EntropyMode,
    pub models: BTreeMap<String, AttentionModel>,
    /// Vision mean r minus baseline mean r.
    pub mean_r_difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentSection {
    pub grid: String,
    pub epsilon: f64,
    pub min_contexts: usize,
    pub human_distribution: String,
    pub models: BTreeMap<String, AlignmentResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Formats {
    pub tensor_magic: String,
    pub tensor_version: u32,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            tensor_magic: String::from_utf8_lossy(tensor::MAGIC).into_owned(),
            tensor_version: tensor::FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub schema: String,
    pub formats: Formats,
    pub run_id: String,
    pub model_pair: ModelPair,
    pub behavior: Section<BehaviorSection>,
    pub geometry: Section<GeometrySection>,
    pub attention: Section<AttentionSection>,
    pub alignment: Section<AlignmentSection>,
    pub config_echo: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sections {
    pub behavior: Section<BehaviorSection>,
    pub geometry: Section<GeometrySection>,
    pub attention: Section<AttentionSection>,
    pub alignment: Section<AlignmentSection>,
}

pub fn build_report(
    run_id: &str,
    model_pair: ModelPair,
    sections: Sections,
    config_echo: BTreeMap<String, String>,
) -> Result<DiagnosticsReport, ReportError> {
    let any = sections.behavior.completed().is_some()
        || sections.geometry.completed().is_some()
        || sections.attention.completed().is_some()
        || sections.alignment.completed().is_some();
    if !any {
        return Err(ReportError::NothingCompleted);
    }
    Ok(DiagnosticsReport {
        schema: SCHEMA.into(),
        formats: Formats::default(),
        run_id: run_id.into(),
        model_pair,
        behavior: sections.behavior,
        geometry: sections.geometry,
        attention: sections.attention,
        alignment: sections.alignment,
        config_echo,
    })
}

/// Rounds to 6 significant digits; `-0` becomes `0`.
pub fn round6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { 0.0 } else { v };
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

fn round_floats(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with sorted keys and 6-significant-digit floats; identical
/// reports give identical bytes.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let mut v = serde_json::to_value(value)?;
    round_floats(&mut v);
    let mut out = serde_json::to_string_pretty(&v)?;
    out.push('\n');
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| round6(x).to_string()).unwrap_or_default()
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Chart<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
}

struct Line {
    name: String,
    points: Vec<(f64, f64)>,
    dashed: bool,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn frame(svg: &mut String, chart: &Chart, x: (f64, f64), y: (f64, f64)) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, chart.title);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for (val, px) in [(x.0, x0), (x.1, x1)] {
        let _ = writeln!(svg, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y0 + 16.0, round6(val));
    }
    for (val, py) in [(y.0, y0), (y.1, y1)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{py}" text-anchor="end">{}</text>"#, x0 - 6.0, round6(val));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 18.0, chart.x_label);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        chart.y_label
    );
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

fn legend(svg: &mut String, names: &[(String, &str)]) {
    for (i, (name, color)) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{y}" fill="{color}">{name}</text>"#,
            W - MARGIN - 140.0
        );
    }
}

fn line_chart(chart: Chart, lines: &[Line]) -> String {
    let x = extent(lines.iter().flat_map(|l| l.points.iter().map(|p| p.0)));
    let y = extent(lines.iter().flat_map(|l| l.points.iter().map(|p| p.1)));
    let mut svg = String::new();
    frame(&mut svg, &chart, x, y);
    let mut names = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = line
            .points
            .iter()
            .map(|&(px, py)| {
                format!(
                    "{:.2},{:.2}",
                    project(px, x, MARGIN, W - MARGIN),
                    project(py, y, H - MARGIN, MARGIN)
                )
            })
            .collect();
        if line.dashed {
            let d = pts
                .iter()
                .enumerate()
                .map(|(k, p)| format!("{}{p}", if k == 0 { "M" } else { "L" }))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="{color}" stroke-dasharray="5,4"/>"#);
        } else {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        names.push((line.name.clone(), color));
    }
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

fn bar_chart(chart: Chart, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let y = extent(series.iter().flat_map(|(_, v)| v.iter().flatten().copied()).chain([0.0]));
    let mut svg = String::new();
    frame(&mut svg, &chart, (0.0, categories.len() as f64), y);
    let slot = (W - 2.0 * MARGIN) / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    let base = project(0.0, y, H - MARGIN, MARGIN);
    let mut names = Vec::new();
    for (s, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        for (k, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let top = project(*v, y, H - MARGIN, MARGIN);
            let x = MARGIN + slot * k as f64 + slot * 0.1 + bar * s as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{:.2}" fill="{color}"/>"#,
                top.min(base),
                (top - base).abs()
            );
        }
        names.push((name.clone(), color));
    }
    for (k, c) in categories.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{c}</text>"#,
            MARGIN + slot * (k as f64 + 0.5),
            H - MARGIN + 30.0
        );
    }
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn occupied(series: &BinnedSeries) -> Vec<(f64, f64)> {
    series.occupied().collect()
}

/// Writes `figN_*.csv` and `figN_*.svg` for each completed section and returns
/// the paths in write order. The CSVs hold the exact plotted values.
pub fn emit_figures(report: &DiagnosticsReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let pair = [&report.model_pair.baseline, &report.model_pair.vision];
    let save = |written: &mut Vec<PathBuf>, name: &str, content: String| -> Result<(), ReportError> {
        let path = dir.join(name);
        fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };

    if let Some(b) = report.behavior.completed() {
        let mut header = vec!["bin_center".to_string()];
        for m in pair {
            header.push(format!("{m}_accuracy"));
            header.push(format!("{m}_n"));
        }
        header.push("gap".into());
        let rows: Vec<Vec<String>> = b
            .gap
            .bin_centers
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mut row = vec![round6(c).to_string()];
                for m in pair {
                    let s = b.models.get(m.as_str()).map(|a| &a.series);
                    row.push(cell(s.and_then(|s| s.values[k])));
                    row.push(s.map_or(String::new(), |s| s.counts[k].to_string()));
                }
                row.push(cell(b.gap.values[k]));
                row
            })
            .collect();
        let path = dir.join("accuracy_by_concreteness.csv");
        write_csv(&path, &header, &rows)?;
        written.push(path);
        let mut lines: Vec<Line> = pair
            .iter()
            .filter_map(|m| b.models.get(m.as_str()).map(|a| (m, a)))
            .map(|(m, a)| Line {
                name: m.to_string(),
                points: occupied(&a.series),
                dashed: false,
            })
            .collect();
        lines.push(Line {
            name: "gap".into(),
            points: occupied(&b.gap),
            dashed: false,
        });
        save(
            &mut written,
            "accuracy_by_concreteness.svg",
            line_chart(
                Chart {
                    title: "Accuracy by question concreteness",
                    x_label: "sentence concreteness (bin center)",
                    y_label: "accuracy",
                },
                &lines,
            ),
        )?;
    }

    if let Some(g) = report.geometry.completed() {
        let bins: Vec<u8> = g
            .models
            .values()
            .flat_map(|m| m.dispersion.per_bin.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let value = |m: &str, bin: u8| {
            g.models
                .get(m)
                .and_then(|gm| gm.dispersion.per_bin.get(&bin))
                .map(|d| d.value)
        };
        let mut header = vec!["concreteness_bin".to_string()];
        header.extend(pair.iter().map(|m| format!("{m}_dispersion")));
        let rows: Vec<Vec<String>> = bins
            .iter()
            .map(|&bin| {
                let mut row = vec![bin.to_string()];
                row.extend(pair.iter().map(|m| cell(value(m, bin))));
                row
            })
            .collect();
        let path = dir.join("dispersion_by_bin.csv");
        write_csv(&path, &header, &rows)?;
        written.push(path);
        let series: Vec<(String, Vec<Option<f64>>)> = pair
            .iter()
            .map(|m| (m.to_string(), bins.iter().map(|&b| value(m, b)).collect()))
            .collect();
        save(
            &mut written,
            "dispersion_by_bin.svg",
            bar_chart(
                Chart {
                    title: "Intra-bin dispersion of 2-D type embeddings",
                    x_label: "concreteness bin",
                    y_label: "mean cosine distance",
                },
                &bins.iter().map(u8::to_string).collect::<Vec<_>>(),
                &series,
            ),
        )?;
    }

    if let Some(a) = report.attention.completed() {
        let n_layers = a.models.values().map(|m| m.layers.len()).max().unwrap_or(0);
        let mut header = vec!["layer".to_string()];
        for m in pair {
            header.push(format!("{m}_r"));
            header.push(format!("{m}_fit"));
        }
        let rows: Vec<Vec<String>> = (0..n_layers)
            .map(|l| {
                let mut row = vec![l.to_string()];
                for m in pair {
                    let am = a.models.get(m.as_str());
                    row.push(cell(am.and_then(|x| x.layers.get(l)).and_then(|c| c.r)));
                    row.push(cell(am.and_then(|x| x.sigmoid).map(|f| f.eval(l as f64))));
                }
                row
            })
            .collect();
        let path = dir.join("layer_entropy_r.csv");
        write_csv(&path, &header, &rows)?;
        written.push(path);
        let mut lines = Vec::new();
        for m in pair {
            let Some(am) = a.models.get(m.as_str()) else { continue };
            lines.push(Line {
                name: m.to_string(),
                points: am
                    .layers
                    .iter()
                    .filter_map(|c| c.r.map(|r| (c.layer as f64, r)))
                    .collect(),
                dashed: false,
            });
            if let Some(fit) = am.sigmoid {
                lines.push(Line {
                    name: format!("{m} fit"),
                    points: (0..am.layers.len()).map(|l| (l as f64, fit.eval(l as f64))).collect(),
                    dashed: true,
                });
            }
        }
        save(
            &mut written,
            "layer_entropy_r.svg",
            line_chart(
                Chart {
                    title: "Layerwise Pearson r: concreteness vs attention entropy",
                    x_label: "layer",
                    y_label: "r",
                },
                &lines,
            ),
        )?;
    }

    if let Some(al) = report.alignment.completed() {
        let centers = al
            .models
            .values()
            .next()
            .map(|r| r.binned.bin_centers.clone())
            .unwrap_or_default();
        let mut header = vec!["bin_center".to_string()];
        for m in pair {
            header.push(format!("{m}_mean_divergence"));
            header.push(format!("{m}_n"));
            header.push(format!("{m}_fit"));
        }
        let rows: Vec<Vec<String>> = centers
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mut row = vec![round6(c).to_string()];
                for m in pair {
                    let r = al.models.get(m.as_str());
                    row.push(cell(r.and_then(|r| r.binned.values.get(k).copied().flatten())));
                    row.push(r.map_or(String::new(), |r| r.binned.counts[k].to_string()));
                    row.push(cell(r.map(|r| r.fit.intercept + r.fit.slope * c)));
                }
                row
            })
            .collect();
        let path = dir.join("rating_divergence.csv");
        write_csv(&path, &header, &rows)?;
        written.push(path);
        let mut lines = Vec::new();
        for m in pair {
            let Some(r) = al.models.get(m.as_str()) else { continue };
            lines.push(Line {
                name: m.to_string(),
                points: occupied(&r.binned),
                dashed: false,
            });
            let xs: Vec<f64> = r.binned.occupied().map(|p| p.0).collect();
            if let (Some(&lo), Some(&hi)) = (xs.first(), xs.last()) {
                lines.push(Line {
                    name: format!("{m} OLS"),
                    points: [lo, hi].iter().map(|&x| (x, r.fit.intercept + r.fit.slope * x)).collect(),
                    dashed: true,
                });
            }
        }
        save(
            &mut written,
            "rating_divergence.svg",
            line_chart(
                Chart {
                    title: "Human-model rating divergence by concreteness",
                    x_label: "human concreteness (bin center)",
                    y_label: "symmetric KL divergence",
                },
                &lines,
            ),
        )?;
    }
    Ok(written)
}
