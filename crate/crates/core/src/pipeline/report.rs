//! Plain-text/CSV tables and SVG figures rendered from the association and
//! discrimination artifacts. Rendering only formats; it computes nothing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::roc::{BandPoint, RocPoint};
use crate::stats::{AssociationRow, DiscriminationReport};

pub const SIGNIFICANCE: f64 = 0.05;

/// A model that could not be fitted (separation, collinearity, one class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFailure {
    pub model: String,
    pub error: String,
}

fn failure_lines(failures: &[ModelFailure]) -> String {
    failures.iter().map(|f| format!("not fitted: {} ({})\n", f.model, f.error)).collect()
}

pub fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Three decimals, floored at `<0.001`.
pub fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

pub fn dagger(p: f64) -> &'static str {
    if p < SIGNIFICANCE {
        "†"
    } else {
        ""
    }
}

pub fn table_one_row(model: &str, or: f64, ci: [f64; 2], p: f64) -> String {
    format!("{model} | {} | [{}, {}] | {}{}", fmt2(or), fmt2(ci[0]), fmt2(ci[1]), fmt_p(p), dagger(p))
}

fn with_ci(v: f64, ci: [f64; 2]) -> String {
    format!("{} [{}–{}]", fmt2(v), fmt2(ci[0]), fmt2(ci[1]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reports {
    pub table1_txt: String,
    pub table1_csv: String,
    pub table2_txt: String,
    pub table2_csv: String,
    pub confusion_txt: String,
    pub roc_svg: String,
    pub confusion_svg: String,
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r)?;
    }
    let bytes = wr.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `footer` (e.g. config hash and seeds) is appended to every output;
/// failures are listed under the table they belong to.
pub fn render_reports(
    association: &[AssociationRow],
    association_failures: &[ModelFailure],
    discrimination: &[DiscriminationReport],
    discrimination_failures: &[ModelFailure],
    footer: &str,
) -> Result<Reports> {
    let mut t1 = String::from("Model | OR | 95% CI | p-value\n");
    for r in association {
        t1.push_str(&table_one_row(&r.model, r.dnpi.odds_ratio, r.dnpi.ci95, r.dnpi.p_value));
        t1.push('\n');
    }
    let units = association.first().map(|r| r.dnpi_units.as_str()).unwrap_or("raw");
    let _ = writeln!(t1, "OR per {} DNPI. † p < 0.05.", if units == "per_sd" { "SD of" } else { "one-unit increase in" });
    t1.push_str(&failure_lines(association_failures));
    let _ = writeln!(t1, "{footer}");
    let table1_csv = csv_string(
        &["model", "odds_ratio", "ci95_lo", "ci95_hi", "p_value", "significant", "n"],
        association
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    fmt2(r.dnpi.odds_ratio),
                    fmt2(r.dnpi.ci95[0]),
                    fmt2(r.dnpi.ci95[1]),
                    fmt_p(r.dnpi.p_value),
                    (r.dnpi.p_value < SIGNIFICANCE).to_string(),
                    r.fit.n.to_string(),
                ]
            })
            .collect(),
    )?;

    let mut t2 = String::from("Model | BA | AUC | F1\n");
    for d in discrimination {
        let _ = writeln!(
            t2,
            "{} | {} | {} | {}",
            d.model,
            with_ci(d.balanced_accuracy, d.balanced_accuracy_ci95),
            with_ci(d.auc, d.auc_ci95),
            with_ci(d.f1, d.f1_ci95)
        );
    }
    let _ = writeln!(t2, "Operating point at FPR ≤ {}; intervals from bootstrap percentiles.", fmt2(discrimination.first().map_or(0.2, |d| d.fpr_cap)));
    t2.push_str(&failure_lines(discrimination_failures));
    let _ = writeln!(t2, "{footer}");
    let table2_csv = csv_string(
        &["model", "ba", "ba_lo", "ba_hi", "auc", "auc_lo", "auc_hi", "f1", "f1_lo", "f1_hi", "sensitivity", "specificity", "n_eval"],
        discrimination
            .iter()
            .map(|d| {
                let mut row = vec![d.model.clone()];
                for (v, ci) in [(d.balanced_accuracy, d.balanced_accuracy_ci95), (d.auc, d.auc_ci95), (d.f1, d.f1_ci95)] {
                    row.extend([fmt2(v), fmt2(ci[0]), fmt2(ci[1])]);
                }
                row.extend([fmt2(d.sensitivity), fmt2(d.specificity), d.n_eval.to_string()]);
                row
            })
            .collect(),
    )?;

    let mut conf = String::new();
    for d in discrimination {
        let c = d.confusion;
        let _ = writeln!(conf, "{} (threshold {:.4}, FPR {})", d.model, d.threshold, fmt2(d.achieved_fpr));
        let _ = writeln!(conf, "                 pred converter | pred non-converter");
        let _ = writeln!(conf, "converter        {:>14} | {:>18}", c.tp, c.fn_);
        let _ = writeln!(conf, "non-converter    {:>14} | {:>18}", c.fp, c.tn);
        let _ = writeln!(conf, "sensitivity {} specificity {}\n", fmt2(d.sensitivity), fmt2(d.specificity));
    }
    conf.push_str(&failure_lines(discrimination_failures));
    let _ = writeln!(conf, "{footer}");

    Ok(Reports {
        table1_txt: t1,
        table1_csv,
        table2_txt: t2,
        table2_csv,
        confusion_txt: conf,
        roc_svg: roc_svg(discrimination, footer),
        confusion_svg: confusion_svg(discrimination, footer),
    })
}

impl Reports {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("table1.txt", &self.table1_txt),
            ("table1.csv", &self.table1_csv),
            ("table2.txt", &self.table2_txt),
            ("table2.csv", &self.table2_csv),
            ("confusion.txt", &self.confusion_txt),
            ("roc.svg", &self.roc_svg),
            ("confusion.svg", &self.confusion_svg),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const MARGIN: f64 = 50.0;
const SIDE: f64 = 400.0;

/// Plot coordinates of an (fpr, tpr) pair.
pub fn roc_xy(fpr: f64, tpr: f64) -> (f64, f64) {
    (MARGIN + fpr * SIDE, MARGIN + (1.0 - tpr) * SIDE)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn roc_path(points: &[RocPoint]) -> String {
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let (x, y) = roc_xy(p.fpr, p.tpr);
        let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
    }
    d.trim_end().to_string()
}

fn band_path(band: &[BandPoint]) -> String {
    let mut d = String::new();
    for (i, b) in band.iter().enumerate() {
        let (x, y) = roc_xy(b.fpr, b.tpr_hi);
        let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
    }
    for b in band.iter().rev() {
        let (x, y) = roc_xy(b.fpr, b.tpr_lo);
        let _ = write!(d, "L{x:.2},{y:.2} ");
    }
    d.push('Z');
    d
}

/// ROC curves with shaded bootstrap bands.
pub fn roc_svg(reports: &[DiscriminationReport], footer: &str) -> String {
    let w = SIDE + 2.0 * MARGIN + 260.0;
    let h = SIDE + 2.0 * MARGIN + 30.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<!-- {} -->", xml_escape(footer).replace("--", "- -"));
    let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIDE}" height="{SIDE}" fill="none" stroke="black"/>"#);
    let (x0, y0) = roc_xy(0.0, 0.0);
    let (x1, y1) = roc_xy(1.0, 1.0);
    let _ = writeln!(s, r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#999" stroke-dasharray="4 4"/>"##);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x, _) = roc_xy(v, 0.0);
        let (_, y) = roc_xy(0.0, v);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" font-size="11" text-anchor="middle">{v:.1}</text>"#, MARGIN + SIDE + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.1}</text>"#, MARGIN - 5.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">False positive rate</text>"#, MARGIN + SIDE / 2.0, MARGIN + SIDE + 35.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {})">True positive rate</text>"#, MARGIN + SIDE / 2.0, MARGIN + SIDE / 2.0);
    for (i, r) in reports.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        if !r.roc_band.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, band_path(&r.roc_band));
        }
        let _ = writeln!(s, r#"<path class="roc" d="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, roc_path(&r.roc_points));
        let ly = MARGIN + 20.0 * i as f64 + 10.0;
        let lx = MARGIN + SIDE + 20.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{c}"/>"#, ly - 10.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12">{} AUC {} [{}–{}]</text>"#,
            lx + 18.0,
            xml_escape(&r.model),
            fmt2(r.auc),
            fmt2(r.auc_ci95[0]),
            fmt2(r.auc_ci95[1])
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One 2×2 confusion matrix per model at the fixed-FPR operating point.
pub fn confusion_svg(reports: &[DiscriminationReport], footer: &str) -> String {
    let cell = 70.0;
    let panel = 2.0 * cell + 120.0;
    let w = (panel * reports.len().max(1) as f64).max(300.0);
    let h = 2.0 * cell + 110.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<!-- {} -->", xml_escape(footer).replace("--", "- -"));
    for (i, r) in reports.iter().enumerate() {
        let ox = i as f64 * panel + 90.0;
        let oy = 50.0;
        let _ = writeln!(s, r#"<text x="{}" y="20" font-size="12" text-anchor="middle">{}</text>"#, ox + cell, xml_escape(&r.model));
        let c = r.confusion;
        let total = (c.tp + c.fp + c.tn + c.fn_).max(1) as f64;
        let cells = [[c.tp, c.fn_], [c.fp, c.tn]];
        for (row, vals) in cells.iter().enumerate() {
            for (col, &v) in vals.iter().enumerate() {
                let x = ox + col as f64 * cell;
                let y = oy + row as f64 * cell;
                let shade = 0.15 + 0.75 * v as f64 / total;
                let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#1f77b4" fill-opacity="{shade:.3}" stroke="black"/>"##);
                let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="16" text-anchor="middle">{v}</text>"#, x + cell / 2.0, y + cell / 2.0 + 6.0);
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">converter</text>"#, ox - 5.0, oy + cell / 2.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">non-conv.</text>"#, ox - 5.0, oy + 1.5 * cell);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">pred +</text>"#, ox + cell / 2.0, oy + 2.0 * cell + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">pred −</text>"#, ox + 1.5 * cell, oy + 2.0 * cell + 15.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">FPR {} sens {}</text>"#,
            ox + cell,
            oy + 2.0 * cell + 32.0,
            fmt2(r.achieved_fpr),
            fmt2(r.sensitivity)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_row_layout() {
        assert_eq!(table_one_row("DNPI (Unadjusted)", 2.5, [1.4, 4.47], 0.002), "DNPI (Unadjusted) | 2.50 | [1.40, 4.47] | 0.002†");
    }

    #[test]
    fn p_formatting_and_strict_dagger() {
        assert_eq!(dagger(0.05), "");
        assert_eq!(dagger(0.049_999), "†");
        assert_eq!(fmt_p(0.0004), "<0.001");
        assert_eq!(fmt_p(0.001), "0.001");
        assert_eq!(fmt_p(0.05), "0.050");
    }
}
