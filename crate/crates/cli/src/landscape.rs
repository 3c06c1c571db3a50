use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::CliError;

pub fn write_csv(path: &Path, curve: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::io)?;
    w.write_record(["coordinate", "normalized_loss"])
        .map_err(CliError::io)?;
    for (k, v) in curve.iter().enumerate() {
        w.write_record([k.to_string(), v.to_string()])
            .map_err(CliError::io)?;
    }
    w.flush().map_err(CliError::io)?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// One polyline over `[0, n) x [0, 1]` with plain axes and a title.
pub fn svg(title: &str, curve: &[f64]) -> String {
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let span = (curve.len().max(2) - 1) as f64;
    let x = |k: usize| MARGIN + pw * k as f64 / span;
    let y = |v: f64| HEIGHT - MARGIN - ph * v.clamp(0.0, 1.0);

    let mut points = String::new();
    for (k, &v) in curve.iter().enumerate() {
        let _ = write!(points, "{:.2},{:.2} ", x(k), y(v));
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{text}</text>"#
        );
    };
    label(&mut s, x0, y0 + 16.0, "middle", "0");
    label(
        &mut s,
        x1,
        y0 + 16.0,
        "middle",
        &(curve.len().saturating_sub(1)).to_string(),
    );
    label(&mut s, x0 - 6.0, y0 + 4.0, "end", "0");
    label(&mut s, x0 - 6.0, y1 + 4.0, "end", "1");
    label(
        &mut s,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        "middle",
        "predicted coordinate",
    );
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        points.trim_end()
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn write_svg(path: &Path, title: &str, curve: &[f64]) -> Result<(), CliError> {
    fs::write(path, svg(title, curve)).map_err(CliError::io)
}
