//! Result files: regret CSVs, SVG charts, manifests and embedding tables.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use hierts_core::AggregateCurve;
use nalgebra::DVector;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CSV_HEADER: &str = "round,agent,mean_cum_regret,stderr";

/// Regret curve as read back from a CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvCurve {
    pub agent: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

fn check_curves(curves: &[AggregateCurve]) -> Result<usize> {
    let first = curves
        .first()
        .ok_or_else(|| CliError::Input("no curves to write".into()))?;
    let n = first.horizon();
    if curves.iter().any(|c| c.horizon() != n) {
        return Err(CliError::Input("curves have different horizons".into()));
    }
    Ok(n)
}

/// One row per (round, agent), rounds outermost, agents in input order.
/// Numbers use the shortest representation that parses back exactly.
pub fn curves_to_csv(curves: &[AggregateCurve]) -> Result<String> {
    let n = check_curves(curves)?;
    let mut out = String::with_capacity(40 * n * curves.len());
    out.push_str(CSV_HEADER);
    out.push('\n');
    for t in 0..n {
        for c in curves {
            writeln!(out, "{},{},{},{}", t + 1, c.agent, c.mean[t], c.stderr[t]).expect("writing to a string");
        }
    }
    Ok(out)
}

/// Reads curves back, in order of first appearance.
pub fn parse_csv(text: &str) -> Result<Vec<CsvCurve>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(CliError::Io(format!("unexpected header `{}`", header.join(","))));
    }
    let mut curves: Vec<CsvCurve> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let bad = |what: &str| CliError::Io(format!("line {line}: bad {what}"));
        let round: usize = record[0].parse().map_err(|_| bad("round"))?;
        let agent = &record[1];
        let mean: f64 = record[2].parse().map_err(|_| bad("mean_cum_regret"))?;
        let stderr: f64 = record[3].parse().map_err(|_| bad("stderr"))?;
        let idx = match curves.iter().position(|c| c.agent == agent) {
            Some(i) => i,
            None => {
                curves.push(CsvCurve {
                    agent: agent.to_string(),
                    mean: Vec::new(),
                    stderr: Vec::new(),
                });
                curves.len() - 1
            }
        };
        let c = &mut curves[idx];
        if round != c.mean.len() + 1 {
            return Err(bad("round order"));
        }
        c.mean.push(mean);
        c.stderr.push(stderr);
    }
    Ok(curves)
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// `prefix` with `suffix` appended to its file name.
pub fn with_suffix(prefix: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}{suffix}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// A tick step of the form 1, 2 or 5 times a power of ten.
fn nice_step(range: f64, ticks: usize) -> f64 {
    let raw = range / ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Static line chart of mean regret with shaded ±1 standard error bands.
pub fn render_svg(curves: &[AggregateCurve], title: &str) -> Result<String> {
    let n = check_curves(curves)?;
    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let ymax = curves
        .iter()
        .flat_map(|c| c.mean.iter().zip(&c.stderr).map(|(m, s)| m + s))
        .fold(0.0f64, f64::max);
    let ystep = nice_step(if ymax > 0.0 { ymax } else { 1.0 }, 5);
    let ytop = (ymax / ystep).ceil().max(1.0) * ystep;
    let xstep = nice_step(n as f64, 5);
    let px = |t: f64| left + pw * t / n as f64;
    let py = |v: f64| top + ph * (1.0 - v / ytop);
    // at most about 400 vertices per curve
    let stride = n.div_ceil(400).max(1);
    let mut rounds: Vec<usize> = (0..n).step_by(stride).collect();
    if rounds.last() != Some(&(n - 1)) {
        rounds.push(n - 1);
    }

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let mut v = 0.0;
    while v <= ytop + 1e-9 * ytop {
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, v);
        v += ystep;
    }
    let mut t = 0.0;
    while t <= n as f64 + 1e-9 {
        let x = px(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000"/>"##, top + ph, top + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#, top + ph + 18.0);
        t += xstep;
    }
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>"##);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">cumulative regret</text>"#, top + ph / 2.0);

    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut band = String::new();
        for &r in &rounds {
            let _ = write!(band, "{:.2},{:.2} ", px((r + 1) as f64), py(c.mean[r] + c.stderr[r]));
        }
        for &r in rounds.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", px((r + 1) as f64), py((c.mean[r] - c.stderr[r]).max(0.0)));
        }
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, band.trim_end());
        let line: Vec<String> = rounds
            .iter()
            .map(|&r| format!("{:.2},{:.2}", px((r + 1) as f64), py(c.mean[r])))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 16.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#, left + 12.0, left + 36.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, left + 42.0, ly + 4.0, escape(&c.agent));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// User and item vectors with their original ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub user_ids: Vec<u64>,
    pub users: Vec<DVector<f64>>,
    pub item_ids: Vec<u64>,
    pub items: Vec<DVector<f64>>,
}

/// `kind,id,v1,…,vd` with `kind` either `user` or `item`.
pub fn embeddings_to_csv(e: &Embeddings) -> String {
    let d = e.items.first().or(e.users.first()).map_or(0, |v| v.len());
    let mut out = String::from("kind,id");
    for j in 1..=d {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    let rows = e
        .user_ids
        .iter()
        .zip(&e.users)
        .map(|r| ("user", r))
        .chain(e.item_ids.iter().zip(&e.items).map(|r| ("item", r)));
    for (kind, (id, v)) in rows {
        let _ = write!(out, "{kind},{id}");
        for x in v.iter() {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_embeddings(&text).map_err(|e| match e {
        CliError::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_embeddings(text: &str) -> Result<Embeddings> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "kind" || &header[1] != "id" {
        return Err(CliError::Io("embeddings header must start with kind,id and name at least one coordinate".into()));
    }
    let d = header.len() - 2;
    let mut e = Embeddings {
        user_ids: Vec::new(),
        users: Vec::new(),
        item_ids: Vec::new(),
        items: Vec::new(),
    };
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let bad = || CliError::Io(format!("line {line}: malformed embedding row"));
        if record.len() != d + 2 {
            return Err(bad());
        }
        let id: u64 = record[1].parse().map_err(|_| bad())?;
        let coords = (2..d + 2)
            .map(|j| record[j].parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(bad)?;
        let v = DVector::from_vec(coords);
        match &record[0] {
            "user" => {
                e.user_ids.push(id);
                e.users.push(v);
            }
            "item" => {
                e.item_ids.push(id);
                e.items.push(v);
            }
            _ => return Err(bad()),
        }
    }
    Ok(e)
}
