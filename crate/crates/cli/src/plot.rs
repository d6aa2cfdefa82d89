//! Hand-written SVG: line charts for reports, stage panels for `detect`.

use std::fmt::Write as _;
use std::io::Cursor;

use base64::Engine as _;
use omdet::data::Image;
use omdet::mdn::Detection;
use omdet::{Error, Result};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_x: bool,
    pub log_y: bool,
    /// Draw markers at each point as well as the line.
    pub markers: bool,
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() * step;
    (0..).map(|i| first + i as f64 * step).take_while(|v| *v <= hi + step * 1e-9).collect()
}

fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
    (a..=b).map(|e| 10f64.powi(e)).filter(|v| *v >= lo * (1.0 - 1e-9) && *v <= hi * (1.0 + 1e-9)).collect()
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart<'_> {
    /// Non-positive values are dropped on log axes.
    pub fn render(&self, series: &[Series]) -> String {
        let (w, h) = (640.0, 400.0);
        let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
        let keep = |&(x, y): &(f64, f64)| {
            x.is_finite() && y.is_finite() && (!self.log_x || x > 0.0) && (!self.log_y || y > 0.0)
        };
        let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied().filter(keep)).collect();
        let fx = |v: f64| if self.log_x { v.log10() } else { v };
        let fy = |v: f64| if self.log_y { v.log10() } else { v };
        let range = |vals: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in vals {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = range(&mut pts.iter().map(|p| fx(p.0)));
        let (y0, y1) = range(&mut pts.iter().map(|p| fy(p.1)));
        let pw = w - left - right;
        let ph = h - top - bottom;
        let sx = |v: f64| left + (fx(v) - x0) / (x1 - x0) * pw;
        let sy = |v: f64| top + ph - (fy(v) - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, esc(self.title));
        let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);

        let unlog = |v: f64, log: bool| if log { 10f64.powf(v) } else { v };
        let xt = if self.log_x { log_ticks(unlog(x0, true), unlog(x1, true)) } else { nice_ticks(x0, x1) };
        for t in xt {
            let x = sx(t);
            let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, top, top + ph);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, top + ph + 15.0, fmt_tick(t));
        }
        let yt = if self.log_y { log_ticks(unlog(y0, true), unlog(y1, true)) } else { nice_ticks(y0, y1) };
        for t in yt {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 5.0, y + 4.0, fmt_tick(t));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, esc(self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            top + ph / 2.0,
            esc(self.y_label)
        );

        for (i, ser) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let p: Vec<(f64, f64)> = ser.points.iter().copied().filter(keep).map(|(x, y)| (sx(x), sy(y))).collect();
            if p.len() > 1 {
                let d: Vec<String> = p.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, d.join(" "));
            }
            if self.markers || p.len() == 1 {
                for (x, y) in &p {
                    let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
                }
            }
            let ly = top + 10.0 + 16.0 * i as f64;
            let lx = left + pw + 10.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, esc(&ser.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn png_base64(image: &Image) -> Result<String> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (image.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot encode PNG: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

/// One panel per decoder stage: the image with every detection's box as
/// that stage predicted it, labelled with the stage score.
pub fn stage_trace(image: &Image, task: &[String], dets: &[Detection]) -> Result<String> {
    let stages = dets.first().map_or(0, |d| d.trace.len()).max(1);
    let scale = (256.0 / image.width.max(image.height) as f64).max(1.0);
    let (iw, ih) = (image.width as f64 * scale, image.height as f64 * scale);
    let (gap, head, foot) = (10.0, 22.0, 16.0 * task.len() as f64 + 8.0);
    let w = gap + stages as f64 * (iw + gap);
    let h = head + ih + foot;
    let png = png_base64(image)?;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for st in 0..stages {
        let ox = gap + st as f64 * (iw + gap);
        let _ = writeln!(s, r#"<text x="{}" y="15" text-anchor="middle" font-size="12">stage {}</text>"#, ox + iw / 2.0, st + 1);
        let _ = writeln!(
            s,
            r#"<image x="{ox}" y="{head}" width="{iw}" height="{ih}" preserveAspectRatio="none" style="image-rendering:pixelated" href="data:image/png;base64,{png}"/>"#
        );
        for d in dets {
            let Some(tp) = d.trace.get(st) else { continue };
            let color = PALETTE[d.class_index % PALETTE.len()];
            let [x0, y0, x1, y1] = tp.bbox.map(|v| v * scale);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                ox + x0,
                head + y0,
                (x1 - x0).max(0.0),
                (y1 - y0).max(0.0)
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{:.2}</text>"#, ox + x0 + 1.0, head + y0 + 9.0, tp.score);
        }
    }
    for (i, word) in task.iter().enumerate() {
        let y = head + ih + 16.0 * (i + 1) as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{gap}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, gap + 16.0, esc(word));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
