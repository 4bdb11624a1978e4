//! Cross-run report: PSNR/SSIM curves, an SVG overlay and attack tables.
//! Every number is copied as text from a run's CSV or summary file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{write, Result};
use crate::training::ExperimentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub curves_csv: PathBuf,
    pub svg: PathBuf,
    pub markdown: PathBuf,
    /// Missing files or columns, one sentence each.
    pub gaps: Vec<String>,
}

struct Curve {
    run_id: String,
    label: String,
    /// `(snr text, psnr text, ssim text)`.
    points: Vec<(String, Option<String>, Option<String>)>,
}

fn read_curve(dir: &Path, gaps: &mut Vec<String>) -> Option<Curve> {
    let name = dir.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let label = std::fs::read_to_string(dir.join("config.toml"))
        .ok()
        .and_then(|t| ExperimentConfig::from_toml(&t).ok())
        .map(|c| {
            format!(
                "λe={} λd={} t={} R=1/{} enc={:?}",
                c.model.lambda_e,
                c.model.lambda_d,
                c.model.t,
                96 / c.model.t.max(1),
                c.model.encryption
            )
            .to_lowercase()
        })
        .unwrap_or_else(|| {
            gaps.push(format!("{name}: config.toml missing or unreadable; run labels unknown"));
            String::from("?")
        });
    let text = match std::fs::read_to_string(dir.join("summary.csv")) {
        Ok(t) => t,
        Err(_) => {
            gaps.push(format!("{name}: summary.csv missing; run not evaluated"));
            return None;
        }
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |c: &str| header.iter().position(|h| *h == c);
    let (Some(snr), Some(run)) = (col("snr_db"), col("run_id")) else {
        gaps.push(format!("{name}: summary.csv lacks snr_db or run_id; skipped"));
        return None;
    };
    let (psnr, ssim) = (col("psnr"), col("ssim"));
    for (c, missing) in [("psnr", psnr.is_none()), ("ssim", ssim.is_none())] {
        if missing {
            gaps.push(format!("{name}: summary.csv has no {c} column; {c} values not reported"));
        }
    }
    let mut run_id = name.clone();
    let mut points = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        run_id = f.get(run).unwrap_or(&"").to_string();
        let get = |i: Option<usize>| i.and_then(|i| f.get(i)).filter(|s| !s.is_empty()).map(|s| s.to_string());
        points.push((f.get(snr).unwrap_or(&"").to_string(), get(psnr), get(ssim)));
    }
    Some(Curve { run_id, label, points })
}

/// Non-decreasing PSNR across finite SNRs, allowing `tol` dB dips.
fn monotone(c: &Curve, tol: f64) -> Option<bool> {
    let mut pts: Vec<(f64, f64)> = c
        .points
        .iter()
        .filter_map(|(s, p, _)| Some((s.parse::<f64>().ok()?, p.as_ref()?.parse::<f64>().ok()?)))
        .filter(|(s, _)| s.is_finite())
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(pts.windows(2).all(|w| w[1].1 >= w[0].1 - tol))
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn svg(curves: &[Curve]) -> String {
    let pts: Vec<Vec<(f64, f64)>> = curves
        .iter()
        .map(|c| {
            c.points
                .iter()
                .filter_map(|(s, p, _)| Some((s.parse::<f64>().ok()?, p.as_ref()?.parse::<f64>().ok()?)))
                .filter(|(s, p)| s.is_finite() && p.is_finite())
                .collect()
        })
        .collect();
    let all: Vec<&(f64, f64)> = pts.iter().flatten().collect();
    let (w, h, m) = (640.0, 420.0, 50.0);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if all.is_empty() {
        out.push_str("<text x=\"20\" y=\"40\">no evaluated runs</text>\n</svg>\n");
        return out;
    }
    let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let (y0, y1) = ((y0 - 1.0).floor(), (y1 + 1.0).ceil());
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let _ = writeln!(
        out,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">SNR (dB)</text>", w / 2.0, h - 10.0);
    let _ = writeln!(out, "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">PSNR (dB)</text>", h / 2.0, h / 2.0);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" font-size=\"11\">{x0}</text><text x=\"{}\" y=\"{}\" font-size=\"11\">{x1}</text>", m, h - m + 15.0, w - m, h - m + 15.0);
    let _ = writeln!(out, "<text x=\"5\" y=\"{}\" font-size=\"11\">{y0}</text><text x=\"5\" y=\"{}\" font-size=\"11\">{y1}</text>", h - m, m);
    for (i, (c, p)) in curves.iter().zip(&pts).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", line.join(" "));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} ({})</text>",
            m + 10.0,
            m + 15.0 * i as f64,
            c.run_id,
            c.label
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Collect evaluated runs into `out_dir`: `curves.csv`, `psnr_vs_snr.svg`
/// and `report.md`. Runs that lack files or columns are listed as gaps.
pub fn emit_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let mut gaps = Vec::new();
    let curves: Vec<Curve> = run_dirs.iter().filter_map(|d| read_curve(d, &mut gaps)).collect();

    let mut csv = String::from("run_id,label,snr_db,psnr,ssim\n");
    for c in &curves {
        for (s, p, q) in &c.points {
            let _ = writeln!(
                csv,
                "{},{},{s},{},{}",
                c.run_id,
                c.label,
                p.as_deref().unwrap_or(""),
                q.as_deref().unwrap_or("")
            );
        }
    }

    let mut md = String::from("# Evaluation report\n\n## PSNR / SSIM versus SNR\n\n");
    md.push_str("| run | setting | SNR (dB) | PSNR (dB) | SSIM |\n|---|---|---|---|---|\n");
    for c in &curves {
        for (s, p, q) in &c.points {
            let _ = writeln!(
                md,
                "| {} | {} | {s} | {} | {} |",
                c.run_id,
                c.label,
                p.as_deref().unwrap_or("(missing)"),
                q.as_deref().unwrap_or("(missing)")
            );
        }
    }
    md.push_str("\n## Monotonicity in SNR (0.2 dB tolerance)\n\n");
    for c in &curves {
        let verdict = match monotone(c, 0.2) {
            Some(true) => "non-decreasing",
            Some(false) => "NOT non-decreasing",
            None => "no PSNR values",
        };
        let _ = writeln!(md, "- {}: {verdict}", c.run_id);
    }
    md.push_str("\n## Attacks\n\n");
    for d in run_dirs {
        match std::fs::read_to_string(d.join("attack_summary.txt")) {
            Ok(t) => {
                for l in t.lines() {
                    let _ = writeln!(md, "- {l}");
                }
            }
            Err(_) => gaps.push(format!(
                "{}: attack_summary.txt missing; attack not run",
                d.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
            )),
        }
    }
    md.push_str("\n## Gaps\n\n");
    if gaps.is_empty() {
        md.push_str("none\n");
    }
    for g in &gaps {
        let _ = writeln!(md, "- {g}");
    }

    let report = Report {
        curves_csv: out_dir.join("curves.csv"),
        svg: out_dir.join("psnr_vs_snr.svg"),
        markdown: out_dir.join("report.md"),
        gaps,
    };
    write(&report.curves_csv, &csv)?;
    write(&report.svg, &svg(&curves))?;
    write(&report.markdown, &md)?;
    Ok(report)
}
