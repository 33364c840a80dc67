//! Minimal SVG scatter plots: fixed 600x600 canvas over [-3, 5]^2 with a
//! safety-contour heatmap background, blue reference points and green
//! generated points. Styling is fixed so image outputs stay stable.

use nalgebra::DVector;

use crate::error::Result;
use crate::safety::SafetyFn;

pub const CANVAS: f64 = 600.0;
pub const AXIS_MIN: f64 = -3.0;
pub const AXIS_MAX: f64 = 5.0;
const HEATMAP_CELLS: usize = 80;
const POINT_RADIUS: f64 = 1.5;

fn to_px(v: f64) -> f64 {
    (v - AXIS_MIN) / (AXIS_MAX - AXIS_MIN) * CANVAS
}

fn to_px_y(v: f64) -> f64 {
    CANVAS - to_px(v)
}

fn heatmap_color(g: f64) -> String {
    // White at g = 0 shading toward a warm tone at g = 1.
    let t = g.clamp(0.0, 1.0);
    let r = 255.0;
    let gb = 255.0 - 140.0 * t;
    let b = 255.0 - 200.0 * t;
    format!("rgb({},{},{})", r as u8, gb as u8, b as u8)
}

/// Renders one scatter panel. Reference points draw first (blue), then
/// generated points (green), both over the safety heatmap.
pub fn scatter_svg(
    generated: &[DVector<f64>],
    reference: &[DVector<f64>],
    safety: &dyn SafetyFn,
    title: &str,
) -> Result<String> {
    let mut svg = String::with_capacity(64 * 1024);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{c}\" height=\"{c}\" \
         viewBox=\"0 0 {c} {c}\">\n",
        c = CANVAS as usize
    ));

    let cell = CANVAS / HEATMAP_CELLS as f64;
    let span = (AXIS_MAX - AXIS_MIN) / HEATMAP_CELLS as f64;
    for i in 0..HEATMAP_CELLS {
        for j in 0..HEATMAP_CELLS {
            let x = AXIS_MIN + (i as f64 + 0.5) * span;
            let y = AXIS_MIN + (j as f64 + 0.5) * span;
            let g = safety.value(&DVector::from_vec(vec![x, y]))?;
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                i as f64 * cell,
                CANVAS - (j as f64 + 1.0) * cell,
                cell,
                cell,
                heatmap_color(g)
            ));
        }
    }

    let mut draw = |points: &[DVector<f64>], color: &str| {
        for p in points {
            let (px, py) = (to_px(p[0]), to_px_y(p[1]));
            if !(0.0..=CANVAS).contains(&px) || !(0.0..=CANVAS).contains(&py) {
                continue;
            }
            svg.push_str(&format!(
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"{POINT_RADIUS}\" \
                 fill=\"{color}\" fill-opacity=\"0.5\"/>\n"
            ));
        }
    };
    draw(reference, "#1f77b4");
    draw(generated, "#2ca02c");

    svg.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        xml_escape(title)
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
