use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{IterationRecord, RunManifest, Status};
use crate::error::Result;

const W: f64 = 480.0;
const H: f64 = 280.0;
const PAD: f64 = 44.0;

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let mut s = svg_open(title);
    let xs = series.iter().flat_map(|se| se.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|se| se.points.iter().map(|p| p.1));
    let x_max = xs.fold(1.0f64, f64::max);
    let y_max = ys.fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let px = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{:.2}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(x_label));
    for i in 0..=4 {
        let y = y_max * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3}</text>"#, PAD - 4.0, py(y) + 3.0, y);
    }
    for x in 0..=(x_max as usize) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{x}</text>"#, px(x as f64), H - PAD + 14.0);
    }
    for (i, se) in series.iter().enumerate() {
        let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, se.color, pts.join(" "));
        for &(x, y) in &se.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, px(x), py(y), se.color);
        }
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11" fill="{}" text-anchor="end">{}</text>"#, W - PAD, se.color, escape(se.name));
    }
    s.push_str("</svg>\n");
    s
}

fn bar_chart(title: &str, labels: &[String], groups: &[(&str, &str, Vec<f64>)]) -> String {
    let mut s = svg_open(title);
    let n = labels.len().max(1);
    let slot = (W - 2.0 * PAD) / n as f64;
    let bw = slot * 0.8 / groups.len().max(1) as f64;
    let y_max = groups.iter().flat_map(|g| g.2.iter().copied()).fold(0.0f64, f64::max).max(1e-9);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    for (gi, (name, color, values)) in groups.iter().enumerate() {
        for (i, v) in values.iter().enumerate() {
            let h = v / y_max * (H - 2.0 * PAD);
            let x = PAD + slot * i as f64 + slot * 0.1 + bw * gi as f64;
            let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="{color}"/>"#, H - PAD - h);
        }
        let ly = PAD + 14.0 * gi as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11" fill="{color}" text-anchor="end">{}</text>"#, W - PAD, escape(name));
    }
    for (i, l) in labels.iter().enumerate() {
        let x = PAD + slot * (i as f64 + 0.5);
        let y = H - PAD + 10.0;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="8" transform="rotate(45 {x:.2} {y:.2})">{}</text>"#, escape(l));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn ok(m: &RunManifest) -> Vec<&IterationRecord> {
    m.iterations.iter().filter(|r| r.status == Status::Ok).collect()
}

/// Renders `report.txt` plus SVG plots into the run directory and returns
/// the written paths. Output depends only on the manifest.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let m = RunManifest::load(run_dir)?;
    let iters = ok(&m);
    let mut t = String::new();
    let _ = writeln!(t, "run {}  (config {})", m.name, &m.config_digest[..m.config_digest.len().min(12)]);
    let _ = writeln!(t, "taxonomy: {}", m.taxonomy_labels.join(", "));
    let _ = writeln!(t);
    let _ = writeln!(t, "planning metrics on val");
    let _ = writeln!(t, "{:<5} {:<11} {:>8} {:>10} {:>9} {:>9}", "iter", "arm", "L2", "collision", "hit", "failures");
    for r in &iters {
        let mut arms = Vec::new();
        if let Some(mm) = &r.metrics {
            arms.push(("corrective", mm));
        }
        if let Some(a) = &r.aide {
            arms.push(("aide", &a.metrics));
        }
        for (arm, mm) in arms {
            let _ = writeln!(
                t,
                "{:<5} {:<11} {:>8.4} {:>10.4} {:>9.4} {:>9}",
                r.iteration, arm, mm.l2.average, mm.collision.average, mm.hit_rate.average, mm.failures
            );
        }
    }
    let _ = writeln!(t);
    let _ = writeln!(t, "{:<5} {:>8} {:>10} {:>10} {:>10} {:>6} {:>6} {:>6}", "iter", "D-D", "generated", "train_fail", "val_fail", "old", "new", "total");
    for r in &iters {
        let _ = writeln!(
            t,
            "{:<5} {:>8} {:>10} {:>10} {:>10} {:>6} {:>6} {:>6}",
            r.iteration,
            fmt_opt(r.dd),
            r.sizes.generated,
            r.train_failures,
            r.val_failures,
            r.ledger.old.len(),
            r.ledger.new.len(),
            r.ledger.total
        );
    }
    for r in &m.iterations {
        if let Status::Failed(e) = &r.status {
            let _ = writeln!(t, "iteration {} failed: {e}", r.iteration);
        }
        if let Some(reason) = &r.stop_reason {
            let _ = writeln!(t, "stopped after iteration {}: {reason}", r.iteration);
        }
    }

    let mut written = Vec::new();
    let path = run_dir.join("report.txt");
    fs::write(&path, &t)?;
    written.push(path);

    let pts = |f: &dyn Fn(&IterationRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        iters.iter().filter_map(|r| f(r).map(|y| (r.iteration as f64, y))).collect()
    };
    let mut series = vec![Series { name: "corrective", color: "#1f77b4", points: pts(&|r| r.metrics.as_ref().map(|m| m.collision.average)) }];
    let aide = pts(&|r| r.aide.as_ref().map(|a| a.metrics.collision.average));
    if !aide.is_empty() {
        series.push(Series { name: "aide", color: "#d62728", points: aide });
    }
    let path = run_dir.join("collision.svg");
    fs::write(&path, line_chart("val collision rate", "iteration", &series))?;
    written.push(path);

    let dd = vec![Series { name: "D-D", color: "#2ca02c", points: pts(&|r| r.dd) }];
    let path = run_dir.join("dd.svg");
    fs::write(&path, line_chart("Hellinger distance, generated vs val failures", "iteration", &dd))?;
    written.push(path);

    if let Some(d) = iters.iter().rev().find_map(|r| r.distributions.as_ref()) {
        let path = run_dir.join("keywords.svg");
        let svg = bar_chart(
            "keyword distribution (last iteration)",
            &d.generated.labels,
            &[("generated", "#1f77b4", d.generated.probs.clone()), ("val failures", "#ff7f0e", d.val_failures.probs.clone())],
        );
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}
