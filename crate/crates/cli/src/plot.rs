//! Minimal SVG figures with CSV companions. Numbers are printed with fixed
//! precision so that identical inputs give identical files.

use std::fmt::Write;

use ctbuq_core::forward::Sinogram;
use ctbuq_core::pipeline::RadialBand;
use ctbuq_core::randfield::Field2D;
use ctbuq_core::Point2;

const SIZE: f64 = 400.0;
const PAD: f64 = 30.0;

fn header(title: &str) -> String {
    let full = SIZE + 2.0 * PAD;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{full}\" height=\"{full}\" viewBox=\"0 0 {full} {full}\">\n\
         <rect width=\"{full}\" height=\"{full}\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn gray(t: f64) -> String {
    let v = (255.0 * t.clamp(0.0, 1.0)).round() as u8;
    format!("#{v:02x}{v:02x}{v:02x}")
}

/// Heat map of a row-major matrix whose row 0 is drawn at the bottom.
/// Equal neighbouring cells in a row are merged into one rectangle.
fn heatmap(title: &str, rows: usize, cols: usize, value: impl Fn(usize, usize) -> f64) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..rows {
        for c in 0..cols {
            lo = lo.min(value(r, c));
            hi = hi.max(value(r, c));
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (SIZE / cols as f64, SIZE / rows as f64);
    let mut svg = header(title);
    for r in 0..rows {
        let y = PAD + (rows - 1 - r) as f64 * h;
        let mut c = 0;
        while c < cols {
            let color = gray((value(r, c) - lo) / span);
            let mut end = c + 1;
            while end < cols && gray((value(r, end) - lo) / span) == color {
                end += 1;
            }
            writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>",
                PAD + c as f64 * w,
                (end - c) as f64 * w
            )
            .unwrap();
            c = end;
        }
    }
    writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">range [{lo:.4}, {hi:.4}]</text>",
        SIZE + PAD + 18.0
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

pub fn field_svg(title: &str, field: &Field2D) -> String {
    let g = field.grid;
    heatmap(title, g.ny, g.nx, |r, c| field.get(c, r))
}

/// One line per grid row `iy`, values by increasing `ix`.
pub fn field_csv(field: &Field2D) -> String {
    let g = field.grid;
    let mut out = String::new();
    for iy in 0..g.ny {
        let row: Vec<String> = (0..g.nx).map(|ix| format!("{}", field.get(ix, iy))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Angles along the vertical axis, detector offsets along the horizontal.
pub fn sinogram_svg(title: &str, y: &Sinogram) -> String {
    heatmap(title, y.geometry.n_theta, y.geometry.n_s, |i, j| y.get(i, j))
}

fn to_px(p: Point2) -> (f64, f64) {
    (PAD + (p.x + 1.0) * SIZE / 2.0, PAD + (1.0 - p.y) * SIZE / 2.0)
}

fn closed_path(points: impl IntoIterator<Item = Point2>) -> String {
    let mut d = String::new();
    for (k, p) in points.into_iter().enumerate() {
        let (x, y) = to_px(p);
        write!(d, "{}{x:.2},{y:.2} ", if k == 0 { "M" } else { "L" }).unwrap();
    }
    d.push('Z');
    d
}

fn ring(band: &RadialBand, col: usize) -> String {
    closed_path(band.rows.iter().map(|r| band.center + Point2::from_polar(r[col], r[0])))
}

/// Band between the `lo` and `hi` radii, the mean boundary and, when given,
/// the true outline, drawn over the unit disk.
pub fn boundary_svg(title: &str, band: &RadialBand, truth: Option<&[Point2]>, stage1_center: Option<Point2>) -> String {
    let mut svg = header(title);
    let (cx, cy) = to_px(Point2::ORIGIN);
    writeln!(
        svg,
        "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"#999999\"/>",
        SIZE / 2.0
    )
    .unwrap();
    writeln!(
        svg,
        "<path d=\"{} {}\" fill=\"#9ecae1\" fill-opacity=\"0.7\" fill-rule=\"evenodd\" stroke=\"none\"/>",
        ring(band, 3),
        ring(band, 1)
    )
    .unwrap();
    writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"1.5\"/>", ring(band, 2)).unwrap();
    if let Some(t) = truth {
        writeln!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"#cb181d\" stroke-dasharray=\"4 3\"/>",
            closed_path(t.iter().copied())
        )
        .unwrap();
    }
    let (x, y) = to_px(band.center);
    writeln!(svg, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#08519c\"/>").unwrap();
    if let Some(c) = stage1_center {
        let (x, y) = to_px(c);
        writeln!(
            svg,
            "<path d=\"M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}\" stroke=\"#238b45\" stroke-width=\"2\"/>",
            x - 4.0,
            y - 4.0,
            x + 4.0,
            y + 4.0,
            x - 4.0,
            y + 4.0,
            x + 4.0,
            y - 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn band_csv(band: &RadialBand) -> String {
    let mut out = format!("# center {},{}\nangle,lo,mean,hi\n", band.center.x, band.center.y);
    for r in &band.rows {
        writeln!(out, "{},{},{},{}", r[0], r[1], r[2], r[3]).unwrap();
    }
    out
}

/// ACF against lag, on a fixed `[-1, 1]` vertical axis.
pub fn acf_svg(title: &str, acf: &[f64]) -> String {
    let mut svg = header(title);
    let n = acf.len().max(2) - 1;
    let px = |l: usize, v: f64| (PAD + l as f64 * SIZE / n as f64, PAD + (1.0 - v) * SIZE / 2.0);
    let (x0, y0) = px(0, 0.0);
    let (x1, _) = px(n, 0.0);
    writeln!(svg, "<path d=\"M{x0:.2},{y0:.2} L{x1:.2},{y0:.2}\" stroke=\"#999999\"/>").unwrap();
    let mut d = String::new();
    for (l, &v) in acf.iter().enumerate() {
        let (x, y) = px(l, v);
        write!(d, "{}{x:.2},{y:.2} ", if l == 0 { "M" } else { "L" }).unwrap();
    }
    writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"#08519c\"/>", d.trim_end()).unwrap();
    writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">lag 0 to {n}</text>",
        SIZE + PAD + 18.0
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

pub fn acf_csv(acf: &[f64]) -> String {
    let mut out = String::from("lag,acf\n");
    for (l, v) in acf.iter().enumerate() {
        writeln!(out, "{l},{v}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctbuq_core::randfield::Grid;

    #[test]
    fn heatmap_merges_equal_cells() {
        let f = Field2D::constant(Grid::square(8).unwrap(), 1.0);
        let svg = field_svg("flat", &f);
        assert_eq!(svg.matches("<rect ").count(), 1 + 8);
    }

    #[test]
    fn boundary_plot_is_deterministic() {
        let band = RadialBand {
            center: Point2::new(0.1, -0.2),
            rows: (0..16)
                .map(|k| [k as f64 * std::f64::consts::TAU / 16.0, 0.2, 0.25, 0.3])
                .collect(),
        };
        let a = boundary_svg("b", &band, None, Some(Point2::ORIGIN));
        assert_eq!(a, boundary_svg("b", &band, None, Some(Point2::ORIGIN)));
        assert!(a.contains("evenodd"));
        assert_eq!(band_csv(&band).lines().count(), 18);
    }

    #[test]
    fn acf_outputs() {
        let acf = [1.0, 0.5, 0.1, -0.05];
        assert!(acf_svg("acf", &acf).starts_with("<svg"));
        assert_eq!(acf_csv(&acf), "lag,acf\n0,1\n1,0.5\n2,0.1\n3,-0.05\n");
    }
}
