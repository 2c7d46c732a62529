//! Deterministic SVG rendering of layouts and sampling trajectories.

use std::fmt::Write as _;

use crate::data::{CategorySet, Layout};

/// Category fill colors, cycled when the set is larger than the palette.
const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#1170aa", "#a3cce9",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    /// Canvas size in pixels; the unit square scales to fill it.
    pub width: f64,
    pub height: f64,
    pub show_labels: bool,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle { width: 512.0, height: 512.0, show_labels: true }
    }
}

pub fn category_color(category: usize) -> &'static str {
    PALETTE[category % PALETTE.len()]
}

fn escape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn svg_open(out: &mut String, style: &RenderStyle) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.2}\" height=\"{:.2}\" \
         viewBox=\"0 0 {:.2} {:.2}\">",
        style.width, style.height, style.width, style.height
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#ffffff\" \
         stroke=\"#cccccc\"/>",
        style.width, style.height
    );
}

fn write_elements(out: &mut String, layout: &Layout, categories: &CategorySet, style: &RenderStyle) {
    for e in &layout.elements {
        let (x0, y0, x1, y1) = e.bounds();
        let x = x0 * style.width;
        let y = y0 * style.height;
        let w = (x1 - x0).max(0.0) * style.width;
        let h = (y1 - y0).max(0.0) * style.height;
        let color = category_color(e.category);
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
             fill=\"{color}\" fill-opacity=\"0.55\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        );
        if style.show_labels {
            let label = categories
                .name(e.category)
                .map(escape_xml)
                .unwrap_or_else(|| format!("cat{}", e.category));
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" \
                 fill=\"#222222\">{label}</text>",
                x + 3.0,
                y + 12.0
            );
        }
    }
}

/// Renders one layout on a unit canvas scaled to the style's size. The
/// output depends only on the inputs; equal layouts give equal strings.
pub fn render_svg(layout: &Layout, categories: &CategorySet, style: &RenderStyle) -> String {
    let mut out = String::new();
    svg_open(&mut out, style);
    write_elements(&mut out, layout, categories, style);
    out.push_str("</svg>\n");
    out
}

/// Renders the final layout of a trajectory with the per-element center
/// paths overlaid, visualizing how elements moved during sampling.
/// `states` are decoded snapshots ordered in time; the last one is drawn
/// as boxes. Snapshots with differing element counts only contribute
/// path points for the elements they have.
pub fn render_trace_svg(
    states: &[Layout],
    categories: &CategorySet,
    style: &RenderStyle,
) -> String {
    let mut out = String::new();
    svg_open(&mut out, style);
    let last = match states.last() {
        Some(l) => l,
        None => {
            out.push_str("</svg>\n");
            return out;
        }
    };
    for (i, e) in last.elements.iter().enumerate() {
        let color = category_color(e.category);
        let mut points = String::new();
        for state in states {
            if let Some(se) = state.elements.get(i) {
                let _ = write!(
                    points,
                    "{:.2},{:.2} ",
                    se.cx * style.width,
                    se.cy * style.height
                );
            }
        }
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" \
             stroke-opacity=\"0.8\"/>",
            points.trim_end()
        );
    }
    write_elements(&mut out, last, categories, style);
    out.push_str("</svg>\n");
    out
}
