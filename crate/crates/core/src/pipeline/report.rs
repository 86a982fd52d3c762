//! Report bundle: metrics and ranking CSVs plus static SVG bar charts.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrology::{rank_settings, write_metrics_csv, write_rankings_csv, Metric, MetricsReport, Plane, Ranking};

/// Best setting per printer for one metric (and plane, except porosity).
#[derive(Clone, Debug, PartialEq)]
pub struct RankingTable {
    pub metric: Metric,
    pub plane: Option<Plane>,
    pub rankings: Vec<Ranking>,
}

impl RankingTable {
    pub fn stem(&self) -> String {
        match self.plane {
            Some(p) => format!("{}_{}", self.metric.as_str(), p.as_str().to_ascii_lowercase()),
            None => self.metric.as_str().to_string(),
        }
    }
}

/// Ranking tables for cusp density and roughness in both planes and for
/// porosity; metrics absent from every report are skipped.
pub fn rank_all(reports: &[MetricsReport]) -> Result<Vec<RankingTable>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no metrics reports".into()));
    }
    let mut out = Vec::new();
    for metric in [Metric::CuspDensity, Metric::Roughness] {
        for plane in Plane::BOTH {
            if reports.iter().any(|r| r.value(metric, plane).is_some()) {
                out.push(RankingTable { metric, plane: Some(plane), rankings: rank_settings(reports, metric, plane)? });
            }
        }
    }
    out.push(RankingTable { metric: Metric::Porosity, plane: None, rankings: rank_settings(reports, Metric::Porosity, Plane::Xy)? });
    Ok(out)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    sample: &'a str,
    printer: &'a str,
    setting: &'a str,
    setting_index: usize,
    cusp_density_xy: f64,
    cusp_density_xz: f64,
    roughness_xy: Option<f64>,
    roughness_xz: Option<f64>,
    porosity_pct: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` (long format), `summary.csv` (one row per report),
/// one `rankings_<metric>[_<plane>].csv` per table and SVG charts under
/// `charts/`. Returns the written paths in a fixed order.
pub fn emit_report(reports: &[MetricsReport], rankings: &[RankingTable], outdir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("refusing to emit a report without metrics".into()));
    }
    let charts = outdir.join("charts");
    fs::create_dir_all(&charts).map_err(|e| Error::io(&charts, e))?;
    let mut files = Vec::new();

    let path = outdir.join("metrics.csv");
    write_metrics_csv(create(&path)?, reports)?;
    files.push(path);

    let path = outdir.join("summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in reports {
        w.serialize(SummaryRow {
            sample: &r.sample_id,
            printer: &r.printer_id,
            setting: &r.setting_id,
            setting_index: r.setting_index,
            cusp_density_xy: r.cusp_density_xy,
            cusp_density_xz: r.cusp_density_xz,
            roughness_xy: r.roughness_xy,
            roughness_xz: r.roughness_xz,
            porosity_pct: r.porosity_pct,
        })
        .map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    files.push(path);

    for t in rankings {
        let path = outdir.join(format!("rankings_{}.csv", t.stem()));
        write_rankings_csv(create(&path)?, t.metric, &t.rankings)?;
        files.push(path);
    }

    let label = |r: &MetricsReport| format!("{} | {} | {}", r.sample_id, r.printer_id, r.setting_id);
    let mut write_chart = |name: String, title: String, unit: &str, bars: Vec<(String, f64)>| -> Result<()> {
        let path = charts.join(name);
        fs::write(&path, bar_chart_svg(&title, unit, &bars)).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        Ok(())
    };
    write_chart("porosity.svg".into(), "Porosity".into(), "%", reports.iter().map(|r| (label(r), r.porosity_pct)).collect())?;
    for metric in [Metric::CuspDensity, Metric::Roughness] {
        for plane in Plane::BOTH {
            let bars: Vec<(String, f64)> = reports.iter().filter_map(|r| r.value(metric, plane).map(|v| (label(r), v))).collect();
            if bars.is_empty() {
                continue;
            }
            let unit = if metric == Metric::CuspDensity { "%" } else { "voxels" };
            let name = format!("{}_{}.svg", metric.as_str(), plane.as_str().to_ascii_lowercase());
            write_chart(name, format!("{} ({} surface)", metric.title(), plane.as_str()), unit, bars)?;
        }
    }
    Ok(files)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal bar chart, one bar per entry, as a standalone SVG document.
pub fn bar_chart_svg(title: &str, unit: &str, bars: &[(String, f64)]) -> String {
    const ROW: f64 = 18.0;
    const LABEL_W: f64 = 260.0;
    const PLOT_W: f64 = 420.0;
    const TOP: f64 = 40.0;
    let width = LABEL_W + PLOT_W + 90.0;
    let height = TOP + ROW * bars.len() as f64 + 30.0;
    let vmax = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let scale = if vmax > 0.0 { PLOT_W / vmax } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, width / 2.0, escape(title));
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = TOP + ROW * i as f64;
        let w = (v.max(0.0) * scale).max(0.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LABEL_W - 6.0, y + 12.0, escape(label));
        let _ = writeln!(s, r##"<rect x="{LABEL_W}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="#4a78b0"/>"##, y + 2.0, ROW - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.1}">{v:.4}</text>"#, LABEL_W + w + 4.0, y + 12.0);
    }
    let axis_y = TOP + ROW * bars.len() as f64 + 4.0;
    let _ = writeln!(s, r#"<line x1="{LABEL_W}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="black"/>"#, LABEL_W + PLOT_W);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{} (max {vmax:.4})</text>"#, LABEL_W + PLOT_W / 2.0, axis_y + 18.0, escape(unit));
    s.push_str("</svg>\n");
    s
}
