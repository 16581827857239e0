//! Server-side SVG rendering of a layout, one filled rectangle per object.

use std::fmt::Write;

use crate::layout::{CategoryVocabulary, Layout};

/// Rendered canvas width in pixels; height follows the canvas aspect.
pub const SVG_WIDTH: f64 = 240.0;

const PALETTE: [&str; 13] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#1f77b4", "#8c564b", "#17becf",
];

pub fn category_color(index: usize) -> &'static str {
    PALETTE[index % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(layout: &Layout, vocab: &CategoryVocabulary) -> String {
    let w = SVG_WIDTH;
    let h = (SVG_WIDTH / layout.canvas.aspect.max(1e-3)).round();
    let mut out = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}"><rect width="{w}" height="{h}" fill="#ffffff" stroke="#cccccc"/>"##
    );
    for (i, o) in layout.objects.iter().enumerate() {
        let name = vocab.name(o.category).unwrap_or("?");
        let _ = write!(
            out,
            r#"<rect data-index="{i}" data-category="{}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.6" stroke="{}"><title>{}</title></rect>"#,
            escape(name),
            o.x() * w,
            o.y() * h,
            o.w() * w,
            o.h() * h,
            category_color(o.category),
            category_color(o.category),
            escape(name),
        );
    }
    out.push_str("</svg>");
    out
}
