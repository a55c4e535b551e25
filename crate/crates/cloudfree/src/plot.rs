//! Report figures rendered straight to PNG: line charts (discard curves,
//! calibration diagrams, loss histories) and side-by-side sample panels.
//! Everything is drawn into an RGB buffer with a built-in 5x7 font, so the
//! output does not depend on system fonts or a plotting toolkit.

use crate::harness::Panel;
use crate::{Error, Result};
use image::{Rgb, RgbImage};
use ndarray::ArrayView2;
use std::path::Path;

const GLYPH_W: u32 = 5;
/// Horizontal advance per character (glyph plus 1px spacing).
const ADVANCE: u32 = GLYPH_W + 1;

/// 5x7 uppercase font; each row is a bitmask with bit 4 as the leftmost
/// column. Lowercase input is uppercased, unknown characters render as a
/// hollow box.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row >> (GLYPH_W - 1 - dx) & 1 == 1 {
                    put(img, x + (i as u32 * ADVANCE + dx) as i64, y + dy as i64, color);
                }
            }
        }
    }
}

fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * ADVANCE
}

/// Bresenham line.
fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Compact tick label: plain decimals in a sane range, otherwise scientific.
fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.01..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
];
const FG: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const BG: Rgb<u8> = Rgb([255, 255, 255]);

/// One named polyline of a chart.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

/// Render a line chart with axes, tick labels, and a legend.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> Result<()> {
    let finite =
        |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().filter(finite).copied())
        .collect();
    if all.is_empty() {
        return Err(Error::Input("nothing to plot: no finite points".into()));
    }
    let (mut x0, mut x1) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (mut y0, mut y1) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    // Degenerate ranges still need a visible axis span.
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    y0 -= pad;
    y1 += pad;

    let (w, h) = (640u32, 420u32);
    let (left, right, top, bottom) = (76i64, 20i64, 34i64, 46i64);
    let (pw, ph) = (w as i64 - left - right, h as i64 - top - bottom);
    let mut img = RgbImage::from_pixel(w, h, BG);

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x0) / (x1 - x0);
        let fy = (y - y0) / (y1 - y0);
        (left + (fx * pw as f64).round() as i64, top + ph - (fy * ph as f64).round() as i64)
    };

    // Grid and ticks, 5 intervals each way.
    for i in 0..=5 {
        let ty = y0 + (y1 - y0) * i as f64 / 5.0;
        let (_, py) = to_px(x0, ty);
        draw_line(&mut img, left, py, left + pw, py, GRID);
        let label = fmt_tick(ty);
        draw_text(&mut img, left - 6 - text_width(&label) as i64, py - 3, &label, FG);

        let tx = x0 + (x1 - x0) * i as f64 / 5.0;
        let (px, _) = to_px(tx, y0);
        draw_line(&mut img, px, top, px, top + ph, GRID);
        let label = fmt_tick(tx);
        draw_text(&mut img, px - text_width(&label) as i64 / 2, top + ph + 6, &label, FG);
    }
    draw_line(&mut img, left, top, left, top + ph, FG);
    draw_line(&mut img, left, top + ph, left + pw, top + ph, FG);

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(finite)
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, color);
        }
        for &(px, py) in &pts {
            // 3x3 marker so single points remain visible.
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut img, px + dx, py + dy, color);
                }
            }
        }
        // Legend entry, top-right inside the plot area.
        let ly = top + 6 + 12 * si as i64;
        let lx = left + pw - 120;
        draw_line(&mut img, lx, ly + 3, lx + 16, ly + 3, color);
        draw_text(&mut img, lx + 22, ly, s.label, FG);
    }

    draw_text(&mut img, (w as i64 - text_width(title) as i64) / 2, 12, title, FG);
    draw_text(
        &mut img,
        left + (pw - text_width(x_label) as i64) / 2,
        h as i64 - 16,
        x_label,
        FG,
    );
    draw_text(&mut img, 8, 12, y_label, FG);

    save(&img, path)
}

/// Viridis-like colormap from piecewise-linear anchors, `t` in `[0, 1]`.
fn colormap(t: f64) -> Rgb<u8> {
    const ANCHORS: [[f64; 3]; 11] = [
        [0.267, 0.005, 0.329],
        [0.283, 0.141, 0.458],
        [0.254, 0.265, 0.530],
        [0.207, 0.372, 0.553],
        [0.164, 0.471, 0.558],
        [0.128, 0.567, 0.551],
        [0.135, 0.659, 0.518],
        [0.267, 0.749, 0.441],
        [0.478, 0.821, 0.318],
        [0.741, 0.873, 0.150],
        [0.993, 0.906, 0.144],
    ];
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let v = ANCHORS[i][c] * (1.0 - f) + ANCHORS[i + 1][c] * f;
        rgb[c] = (v * 255.0).round() as u8;
    }
    Rgb(rgb)
}

/// Paint a `[H, W]` map into `img` at `(ox, oy)`, each cell as a
/// `scale`x`scale` block, colouring by `shade`.
fn blit<F: Fn(f32) -> Rgb<u8>>(
    img: &mut RgbImage,
    map: ArrayView2<'_, f32>,
    ox: i64,
    oy: i64,
    scale: i64,
    shade: F,
) {
    let (h, w) = map.dim();
    for y in 0..h {
        for x in 0..w {
            let color = shade(map[[y, x]]);
            for dy in 0..scale {
                for dx in 0..scale {
                    put(img, ox + x as i64 * scale + dx, oy + y as i64 * scale + dy, color);
                }
            }
        }
    }
}

/// Render one sample panel: least-cloudy input, prediction, target (first
/// three channels as RGB, or grey for fewer), the error map and, when
/// present, the predictive-σ map under the shared colormap.
pub fn render_panel(path: &Path, panel: &Panel) -> Result<()> {
    let (k, h, w) = panel.pred.dim();
    // Display normaliser: brightest value across the three image tiles.
    let peak = panel
        .input
        .iter()
        .chain(panel.pred.iter())
        .chain(panel.target.iter())
        .fold(0.0f32, |m, &v| m.max(v))
        .max(1e-6);

    let scale = (96 / h.max(1)).clamp(1, 12) as i64;
    let (th, tw) = (h as i64 * scale, w as i64 * scale);
    let gap = 6i64;
    let tiles = if panel.uncertainty.is_some() { 5 } else { 4 };
    let width = (tw + gap) * tiles + gap;
    let height = th + 30;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, BG);

    let rgb_tile = |img: &mut RgbImage, data: &ndarray::Array3<f32>, ox: i64| {
        for y in 0..h {
            for x in 0..w {
                let ch = |c: usize| {
                    ((data[[c.min(k - 1), y, x]] / peak).clamp(0.0, 1.0) * 255.0).round() as u8
                };
                let color = if k >= 3 {
                    Rgb([ch(0), ch(1), ch(2)])
                } else {
                    Rgb([ch(0), ch(0), ch(0)])
                };
                for dy in 0..scale {
                    for dx in 0..scale {
                        put(img, ox + x as i64 * scale + dx, 22 + y as i64 * scale + dy, color);
                    }
                }
            }
        }
    };

    let mut ox = gap;
    for (label, data) in [("INPUT", &panel.input), ("PRED", &panel.pred), ("TARGET", &panel.target)]
    {
        draw_text(&mut img, ox, 8, label, FG);
        rgb_tile(&mut img, data, ox);
        ox += tw + gap;
    }

    let err_max = panel.error.iter().fold(0.0f32, |m, &v| m.max(v)).max(1e-12);
    draw_text(&mut img, ox, 8, "ERROR", FG);
    blit(&mut img, panel.error.view(), ox, 22, scale, |v| colormap((v / err_max) as f64));
    ox += tw + gap;

    if let Some(sigma) = &panel.uncertainty {
        let s_max = sigma.iter().fold(0.0f32, |m, &v| m.max(v)).max(1e-12);
        draw_text(&mut img, ox, 8, "SIGMA", FG);
        blit(&mut img, sigma.view(), ox, 22, scale, |v| colormap((v / s_max) as f64));
    }

    save(&img, path)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| {
        Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
    })
}

/// Discard curve: RMSE over the kept fraction, pixel- and image-ranked.
pub fn discard_chart(path: &Path, pixel: &[(f64, f64)], image: &[(f64, f64)]) -> Result<()> {
    line_chart(
        path,
        "ERROR VS FRACTION KEPT",
        "FRACTION KEPT",
        "RMSE",
        &[
            Series { label: "PIXELS", points: pixel },
            Series { label: "IMAGES", points: image },
        ],
    )
}

/// Reliability diagram: per-bin RMSE against RMV, with the identity line a
/// perfectly calibrated model would sit on.
pub fn calibration_chart(path: &Path, pixel: &[(f64, f64)], image: &[(f64, f64)]) -> Result<()> {
    let hi = pixel.iter().chain(image).fold(0.0f64, |m, p| m.max(p.0).max(p.1));
    let ident = [(0.0, 0.0), (hi, hi)];
    line_chart(
        path,
        "CALIBRATION: RMSE VS RMV",
        "RMV",
        "RMSE",
        &[
            Series { label: "PIXELS", points: pixel },
            Series { label: "IMAGES", points: image },
            Series { label: "IDENTITY", points: &ident },
        ],
    )
}

/// Occupied `(rmv, rmse)` bin centres of a calibration table, the points a
/// reliability diagram plots.
pub fn calibration_points(r: &crate::uncertainty::CalibrationReport) -> Vec<(f64, f64)> {
    r.bin_rmv
        .iter()
        .zip(&r.bin_rmse)
        .zip(&r.bin_counts)
        .filter(|(_, &n)| n > 0)
        .map(|((&rmv, &rmse), _)| (rmv, rmse))
        .collect()
}

/// Render every figure an evaluation report supports into `dir`. Called
/// best-effort after the CSVs are written.
pub fn render_report(report: &crate::harness::EvalReport, dir: &Path) -> Result<()> {
    if let (Some(px), Some(im)) = (&report.discard_pixel, &report.discard_image) {
        discard_chart(&dir.join("discard.png"), px, im)?;
    }
    if let Some(c) = &report.calibration {
        calibration_chart(
            &dir.join("calibration.png"),
            &calibration_points(&c.pixel),
            &calibration_points(&c.image),
        )?;
    }
    for panel in &report.panels {
        render_panel(&dir.join(format!("panel_{}.png", panel.scene_id)), panel)?;
    }
    Ok(())
}
