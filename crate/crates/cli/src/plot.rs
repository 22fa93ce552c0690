//! SVG rendering of training curves, bird's-eye plans and closed-loop scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Reads a CSV written by `train` or `eval` and writes SVGs into `out`.
pub fn plot(results: &Path, out: &Path) -> Result<()> {
    let mut rd = csv::Reader::from_path(results).with_context(|| format!("reading {}", results.display()))?;
    let headers: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    let rows: Vec<csv::StringRecord> = rd.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        eprintln!("warning: {} has no rows; nothing to plot", results.display());
        return Ok(());
    }
    fs::create_dir_all(out)?;
    let col = |name: &str| headers.iter().position(|h| h == name);
    let written = if let (Some(step), Some(_)) = (col("step"), col("total")) {
        curves(&headers, &rows, step, out)?
    } else if let (Some(scene), Some(series), Some(x), Some(y)) = (col("scene"), col("series"), col("x"), col("y")) {
        bev(&rows, [scene, series, x, y], out)?
    } else if let (Some(driver), Some(kind), Some(score)) = (col("driver"), col("kind"), col("score")) {
        scores(&rows, [driver, kind, score], out)?
    } else {
        bail!("unrecognised columns in {}: {}", results.display(), headers.join(","));
    };
    println!("wrote {written} plot(s) to {}", out.display());
    Ok(())
}

fn num(r: &csv::StringRecord, i: usize) -> Result<f64> {
    let s = r.get(i).unwrap_or("");
    s.parse().with_context(|| format!("not a number: `{s}`"))
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>, equal: bool) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 - x0 < 1e-9 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if y1 - y0 < 1e-9 {
            y0 -= 1.0;
            y1 += 1.0;
        }
        if equal {
            let sx = (x1 - x0) / (W - 2.0 * PAD);
            let sy = (y1 - y0) / (H - 2.0 * PAD);
            let s = sx.max(sy);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            x0 = cx - s * (W - 2.0 * PAD) / 2.0;
            x1 = cx + s * (W - 2.0 * PAD) / 2.0;
            y0 = cy - s * (H - 2.0 * PAD) / 2.0;
            y1 = cy + s * (H - 2.0 * PAD) / 2.0;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD),
            H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD),
        )
    }

    fn polyline(&self, pts: &[(f64, f64)], color: &str, dashed: bool) -> String {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (a, b) = self.px(x, y);
                format!("{a:.1},{b:.1}")
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{} points=\"{}\"/>\n",
            if dashed { " stroke-dasharray=\"6 4\"" } else { "" },
            coords.join(" ")
        )
    }
}

fn svg(title: &str, xlabel: &str, ylabel: &str, f: &Frame, body: &str, legend: &[(String, &str)]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        W / 2.0,
        esc(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 10.0, esc(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    for (v, anchor, x, y) in [
        (f.x0, "start", PAD, H - PAD + 14.0),
        (f.x1, "end", W - PAD, H - PAD + 14.0),
    ] {
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{v:.3}</text>");
    }
    for (v, y) in [(f.y0, H - PAD), (f.y1, PAD + 10.0)] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{v:.3}</text>", PAD - 4.0);
    }
    s.push_str(body);
    for (i, (name, color)) in legend.iter().enumerate() {
        let y = PAD + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"3\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - PAD - 110.0,
            W - PAD - 90.0,
            W - PAD - 84.0,
            y + 4.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn curves(headers: &[String], rows: &[csv::StringRecord], step: usize, out: &Path) -> Result<usize> {
    let groups: [(&str, &[&str]); 3] = [
        ("loss", &["total", "focal", "regression", "confidence"]),
        ("accuracy", &["accuracy"]),
        ("lr", &["lr"]),
    ];
    let mut n = 0;
    for (name, cols) in groups {
        let mut series = Vec::new();
        for c in cols.iter() {
            let Some(i) = headers.iter().position(|h| h == c) else { continue };
            let pts = rows
                .iter()
                .map(|r| Ok((num(r, step)?, num(r, i)?)))
                .collect::<Result<Vec<_>>>()?;
            series.push((c.to_string(), pts));
        }
        if series.is_empty() {
            continue;
        }
        let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()), false);
        let mut body = String::new();
        let mut legend = Vec::new();
        for (k, (label, pts)) in series.iter().enumerate() {
            body.push_str(&f.polyline(pts, COLORS[k % COLORS.len()], false));
            legend.push((label.clone(), COLORS[k % COLORS.len()]));
        }
        fs::write(out.join(format!("{name}.svg")), svg(name, "step", name, &f, &body, &legend))?;
        n += 1;
    }
    Ok(n)
}

/// One plot per scene: ground truth dashed, each scale solid. Forward is up.
fn bev(rows: &[csv::StringRecord], [scene, series, x, y]: [usize; 4], out: &Path) -> Result<usize> {
    let mut scenes: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        let pt = (-num(r, y)?, num(r, x)?);
        scenes
            .entry(r.get(scene).unwrap_or("").to_owned())
            .or_default()
            .entry(r.get(series).unwrap_or("").to_owned())
            .or_default()
            .push(pt);
    }
    for (id, series) in &scenes {
        let origin = [(0.0, 0.0)];
        let f = Frame::fit(series.values().flatten().chain(origin.iter()), true);
        let mut body = String::new();
        let mut legend = Vec::new();
        for (k, (label, pts)) in series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let mut path = vec![(0.0, 0.0)];
            path.extend(pts);
            body.push_str(&f.polyline(&path, color, label == "gt"));
            legend.push((label.clone(), color));
        }
        let (ox, oy) = f.px(0.0, 0.0);
        let _ = writeln!(body, "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"8\" height=\"14\" fill=\"#333\"/>", ox - 4.0, oy - 7.0);
        fs::write(
            out.join(format!("scene_{id}.svg")),
            svg(&format!("scene {id}"), "lateral (m, left negative)", "forward (m)", &f, &body, &legend),
        )?;
    }
    Ok(scenes.len())
}

/// Mean score per scenario kind and driver as grouped bars.
fn scores(rows: &[csv::StringRecord], [driver, kind, score]: [usize; 3], out: &Path) -> Result<usize> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((r.get(kind).unwrap_or("").to_owned(), r.get(driver).unwrap_or("").to_owned()))
            .or_default();
        e.0 += num(r, score)?;
        e.1 += 1;
    }
    let mut kinds: Vec<&String> = acc.keys().map(|(k, _)| k).collect();
    kinds.dedup();
    let mut drivers: Vec<&String> = acc.keys().map(|(_, d)| d).collect();
    drivers.sort();
    drivers.dedup();
    let top = acc.values().map(|(s, n)| s / *n as f64).fold(5.0, f64::max);
    let f = Frame {
        x0: 0.0,
        x1: kinds.len() as f64,
        y0: 0.0,
        y1: top,
    };
    let mut body = String::new();
    let bw = 0.8 / drivers.len() as f64;
    for (ki, k) in kinds.iter().enumerate() {
        let (lx, ly) = f.px(ki as f64 + 0.5, 0.0);
        let _ = writeln!(body, "<text x=\"{lx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", ly + 26.0, esc(k));
        for (di, d) in drivers.iter().enumerate() {
            let (sum, n) = acc[&((*k).clone(), (*d).clone())];
            let v = sum / n as f64;
            let (x, top) = f.px(ki as f64 + 0.1 + di as f64 * bw, v);
            let (x2, base) = f.px(ki as f64 + 0.1 + (di + 1) as f64 * bw, 0.0);
            let _ = writeln!(
                body,
                "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                x2 - x - 2.0,
                base - top,
                COLORS[di % COLORS.len()]
            );
        }
    }
    let legend: Vec<(String, &str)> = drivers
        .iter()
        .enumerate()
        .map(|(i, d)| ((*d).clone(), COLORS[i % COLORS.len()]))
        .collect();
    fs::write(out.join("closed_loop.svg"), svg("closed-loop score", "", "mean score", &f, &body, &legend))?;
    Ok(1)
}
