//! The SVG subset: `<path>` elements made of one `M` followed by `C`
//! commands, stroked, unfilled and untransformed. Anything else that would
//! draw is rejected with its location.
//!
//! Coordinates map from the viewBox to canvas units by the longer viewBox
//! side. Export writes a viewBox whose longer side is 100.

use std::fmt::Write as _;

use roxmltree::{Document, Node};
use svgtypes::{PathParser, PathSegment};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::sketch::{NewTrace, Origin, Rgb, Sketch, WHITE};

const EXPORT_SIDE: f64 = 100.0;

/// Elements that carry no geometry and are skipped on import.
const INERT: &[&str] = &["title", "desc", "metadata"];

/// Attributes that would change rendering in ways the subset cannot express.
const REJECTED_ATTRS: &[&str] = &["transform", "style", "opacity", "marker-start", "marker-mid", "marker-end", "filter", "clip-path", "mask"];

pub fn svg_import(text: &str) -> Result<Sketch> {
    let doc = Document::parse(text).map_err(|e| Error::Input(format!("malformed SVG: {e}")))?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(Error::Input(format!("root element is <{}>, expected <svg>", root.tag_name().name())));
    }
    let [min_x, min_y, w, h] = view_box(&root)?;
    let scale = w.max(h);
    let mut sketch = Sketch::new(match root.attribute("data-background") {
        Some(bg) => parse_rgb(bg).map_err(|d| unsupported(&root, &d))?.0,
        None => WHITE,
    });
    sketch.aspect = w / h;
    let map = |x: f64, y: f64| Point2::new((x - min_x) / scale, (y - min_y) / scale);

    let mut user = Vec::new();
    let mut agent = Vec::new();
    walk(&root, &mut |node| {
        let mut trace = parse_path(node, &map)?;
        trace.width /= scale;
        match trace.origin {
            Origin::User => user.push(trace),
            Origin::Agent => agent.push(trace),
        }
        Ok(())
    })?;
    for t in user.into_iter().chain(agent) {
        sketch.add(t)?;
    }
    Ok(sketch)
}

fn locator(node: &Node) -> String {
    let pos = node.document().text_pos_at(node.range().start);
    format!("<{}> at line {}, column {}", node.tag_name().name(), pos.row, pos.col)
}

fn unsupported(node: &Node, feature: &str) -> Error {
    Error::Unsupported { locator: locator(node), feature: feature.to_owned() }
}

fn view_box(root: &Node) -> Result<[f64; 4]> {
    let nums = |s: &str| -> Option<Vec<f64>> {
        s.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).map(|t| t.parse().ok()).collect()
    };
    let vb = match root.attribute("viewBox") {
        Some(v) => nums(v).filter(|v| v.len() == 4).ok_or_else(|| Error::Input(format!("bad viewBox `{v}`")))?,
        None => {
            let dim = |name| {
                root.attribute(name)
                    .and_then(|v: &str| v.trim_end_matches("px").parse::<f64>().ok())
                    .ok_or_else(|| Error::Input(format!("SVG has no viewBox and no numeric `{name}`")))
            };
            vec![0.0, 0.0, dim("width")?, dim("height")?]
        }
    };
    if !(vb[2] > 0.0 && vb[3] > 0.0) || vb.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("viewBox must have positive size, got {vb:?}")));
    }
    Ok([vb[0], vb[1], vb[2], vb[3]])
}

fn walk<'a>(node: &Node<'a, 'a>, visit: &mut impl FnMut(&Node<'a, 'a>) -> Result<()>) -> Result<()> {
    for child in node.children().filter(|c| c.is_element()) {
        let name = child.tag_name().name();
        if let Some(attr) = REJECTED_ATTRS.iter().find(|a| child.has_attribute(**a)) {
            return Err(unsupported(&child, &format!("attribute `{attr}`")));
        }
        match name {
            "path" => visit(&child)?,
            "g" => walk(&child, visit)?,
            n if INERT.contains(&n) => {}
            n => return Err(unsupported(&child, &format!("element <{n}>"))),
        }
    }
    Ok(())
}

fn parse_path(node: &Node, map: &impl Fn(f64, f64) -> Point2) -> Result<NewTrace> {
    if let Some(fill) = node.attribute("fill") {
        if fill.trim() != "none" {
            return Err(unsupported(node, &format!("fill `{fill}`")));
        }
    }
    let d = node.attribute("d").ok_or_else(|| unsupported(node, "path without `d`"))?;
    let mut raw: Vec<(f64, f64)> = Vec::new();
    for seg in PathParser::from(d) {
        let seg = seg.map_err(|e| unsupported(node, &format!("path data: {e}")))?;
        let cur = raw.last().copied();
        match (seg, cur) {
            (PathSegment::MoveTo { x, y, .. }, None) => raw.push((x, y)),
            (PathSegment::MoveTo { .. }, Some(_)) => return Err(unsupported(node, "multiple subpaths")),
            (_, None) => return Err(unsupported(node, "path must start with M")),
            (PathSegment::CurveTo { abs, x1, y1, x2, y2, x, y }, Some((cx, cy))) => {
                let (ox, oy) = if abs { (0.0, 0.0) } else { (cx, cy) };
                raw.extend([(x1 + ox, y1 + oy), (x2 + ox, y2 + oy), (x + ox, y + oy)]);
            }
            (other, _) => return Err(unsupported(node, &format!("path command {}", command_name(&other)))),
        }
    }
    if raw.len() < 4 {
        return Err(unsupported(node, "path needs at least one C segment"));
    }
    let (rgb, color_alpha) = match node.attribute("stroke") {
        Some(s) => parse_rgb(s).map_err(|d| unsupported(node, &d))?,
        None => ([0.0; 3], 1.0),
    };
    let opacity = match node.attribute("stroke-opacity") {
        Some(s) => s.trim().parse::<f64>().ok().filter(|v| (0.0..=1.0).contains(v)).ok_or_else(|| unsupported(node, &format!("stroke-opacity `{s}`")))?,
        None => 1.0,
    };
    let width = match node.attribute("stroke-width") {
        Some(s) => s.trim().trim_end_matches("px").parse::<f64>().ok().filter(|w| *w > 0.0).ok_or_else(|| unsupported(node, &format!("stroke-width `{s}`")))?,
        None => 1.0,
    };
    let origin = match node.attribute("data-origin") {
        None | Some("user") => Origin::User,
        Some("agent") => Origin::Agent,
        Some(o) => return Err(unsupported(node, &format!("data-origin `{o}`"))),
    };
    Ok(NewTrace {
        points: raw.into_iter().map(|(x, y)| map(x, y)).collect(),
        color: [rgb[0], rgb[1], rgb[2], color_alpha * opacity],
        width,
        origin,
        frozen: node.attribute("data-frozen") == Some("true"),
    })
}

fn command_name(seg: &PathSegment) -> &'static str {
    match seg {
        PathSegment::MoveTo { .. } => "M",
        PathSegment::LineTo { .. } => "L",
        PathSegment::HorizontalLineTo { .. } => "H",
        PathSegment::VerticalLineTo { .. } => "V",
        PathSegment::CurveTo { .. } => "C",
        PathSegment::SmoothCurveTo { .. } => "S (smooth cubic)",
        PathSegment::Quadratic { .. } => "Q (quadratic)",
        PathSegment::SmoothQuadratic { .. } => "T (quadratic)",
        PathSegment::EllipticalArc { .. } => "A (arc)",
        PathSegment::ClosePath { .. } => "Z",
    }
}

/// Parses a paint into RGB in [0,1] plus the color's own alpha. Accepts
/// `rgb()` with fractional components exactly; other forms go through
/// `svgtypes`.
fn parse_rgb(s: &str) -> std::result::Result<(Rgb, f64), String> {
    let t = s.trim();
    if let Some(inner) = t.strip_prefix("rgb(").and_then(|r| r.strip_suffix(')')) {
        let parts: Vec<f64> = inner
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("color `{s}`"))?;
        if parts.len() != 3 || parts.iter().any(|p| !(0.0..=255.0).contains(p)) {
            return Err(format!("color `{s}`"));
        }
        return Ok(([parts[0] / 255.0, parts[1] / 255.0, parts[2] / 255.0], 1.0));
    }
    if t == "none" {
        return Err("stroke `none`".into());
    }
    let c: svgtypes::Color = t.parse().map_err(|_| format!("color `{s}`"))?;
    Ok(([c.red as f64 / 255.0, c.green as f64 / 255.0, c.blue as f64 / 255.0], c.alpha as f64 / 255.0))
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn fmt_rgb(c: &Rgb) -> String {
    let bytes = c.map(|v| v * 255.0);
    if bytes.iter().all(|b| (b - b.round()).abs() < 1e-9) {
        format!("#{:02x}{:02x}{:02x}", bytes[0].round() as u8, bytes[1].round() as u8, bytes[2].round() as u8)
    } else {
        format!("rgb({},{},{})", fmt_num(bytes[0]), fmt_num(bytes[1]), fmt_num(bytes[2]))
    }
}

pub fn svg_export(sketch: &Sketch) -> String {
    let (w, h) = if sketch.aspect >= 1.0 {
        (EXPORT_SIDE, EXPORT_SIDE / sketch.aspect)
    } else {
        (EXPORT_SIDE * sketch.aspect, EXPORT_SIDE)
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {} {}" data-background="{}">"#,
        fmt_num(w),
        fmt_num(h),
        fmt_rgb(&sketch.background)
    );
    for t in sketch.traces() {
        let pts = t.chain.points();
        let xy = |p: &Point2| format!("{} {}", fmt_num(p.x * EXPORT_SIDE), fmt_num(p.y * EXPORT_SIDE));
        let mut d = format!("M {}", xy(&pts[0]));
        for seg in pts[1..].chunks(3) {
            let _ = write!(d, " C {} {} {}", xy(&seg[0]), xy(&seg[1]), xy(&seg[2]));
        }
        let origin = match t.origin {
            Origin::User => "user",
            Origin::Agent => "agent",
        };
        let _ = write!(
            out,
            r#"  <path d="{d}" fill="none" stroke="{}" stroke-opacity="{}" stroke-width="{}" stroke-linecap="round" data-origin="{origin}""#,
            fmt_rgb(&[t.color[0], t.color[1], t.color[2]]),
            fmt_num(t.color[3]),
            fmt_num(t.width * EXPORT_SIDE),
        );
        if t.frozen {
            out.push_str(r#" data-frozen="true""#);
        }
        out.push_str("/>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::Trace;

    const ONE: &str = r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 100 100">
  <path d="M 10 10 C 20 10 30 20 40 40" stroke="#000000" stroke-width="2" fill="none"/>
</svg>"##;

    #[test]
    fn single_path_maps_linearly() {
        let s = svg_import(ONE).unwrap();
        assert_eq!(s.len(), 1);
        let t = &s.traces()[0];
        assert!((t.width - 0.02).abs() < 1e-15);
        assert_eq!(t.color, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.chain.points()[3], Point2::new(0.4, 0.4));
        assert_eq!(t.origin, Origin::User);
    }

    #[test]
    fn empty_document() {
        let s = svg_import(r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 100 100"/>"#).unwrap();
        assert!(s.is_empty());
        let e = svg_export(&Sketch::default());
        assert_eq!(e, "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 100 100\" data-background=\"#ffffff\">\n</svg>\n");
    }

    #[test]
    fn relative_commands_and_aspect() {
        let s = svg_import(
            r##"<svg viewBox="0 0 200 100"><g><path d="m 20 20 c 10 0 20 0 30 0" stroke="red" stroke-opacity="0.5"/></g></svg>"##,
        )
        .unwrap();
        let t = &s.traces()[0];
        assert_eq!(s.aspect, 2.0);
        assert_eq!(t.chain.points()[3], Point2::new(0.25, 0.1));
        assert_eq!(t.color, [1.0, 0.0, 0.0, 0.5]);
        assert_eq!(t.width, 0.005);
    }

    fn err(doc: &str) -> String {
        svg_import(doc).unwrap_err().to_string()
    }

    #[test]
    fn unsupported_features_are_reported() {
        let e = err(r#"<svg viewBox="0 0 10 10"><path d="M 0 0 C 1 1 2 2 3 3" fill="black"/></svg>"#);
        assert!(e.contains("fill") && e.contains("line 1"), "{e}");
        assert!(err(r#"<svg viewBox="0 0 10 10"><path d="M 0 0 A 1 1 0 0 0 3 3"/></svg>"#).contains("arc"));
        assert!(err(r#"<svg viewBox="0 0 10 10"><path d="M 0 0 Q 1 1 3 3"/></svg>"#).contains("quadratic"));
        assert!(err(r#"<svg viewBox="0 0 10 10"><path d="M 0 0 C 1 1 2 2 3 3" transform="scale(2)"/></svg>"#)
            .contains("transform"));
        assert!(err(r#"<svg viewBox="0 0 10 10">
<circle r="3"/></svg>"#)
            .contains("<circle> at line 2"));
        assert!(err(r#"<svg viewBox="0 0 10 10"><path d="M 0 0 C 1 1 2 2 3 3 M 4 4 C 1 1 2 2 3 3"/></svg>"#)
            .contains("subpaths"));
    }

    #[test]
    fn agent_and_frozen_attributes_round_trip() {
        let mut s = Sketch::new([0.9, 0.95, 1.0]);
        s.aspect = 0.75;
        for (origin, frozen) in [(Origin::Agent, true), (Origin::User, false)] {
            s.add(NewTrace {
                points: vec![
                    Point2::new(0.1, 0.2),
                    Point2::new(0.123456, 0.3),
                    Point2::new(0.2, 0.7),
                    Point2::new(0.3, 0.1),
                    Point2::new(0.31, 0.2),
                    Point2::new(0.4, 0.2),
                    Point2::new(0.5, 0.6),
                ],
                color: [0.3, 0.1234, 1.0, 0.8],
                width: 0.0137,
                origin,
                frozen,
            })
            .unwrap();
        }
        let text = svg_export(&s);
        let back = svg_import(&text).unwrap();
        assert_eq!(back.aspect, 0.75);
        assert_eq!(back.user_count(), 1);
        assert!(back.traces()[1].frozen);
        for (a, b) in s.traces().iter().zip(back.traces()) {
            assert_close(a, b);
        }
        assert_eq!(svg_export(&back), text);
    }

    fn assert_close(a: &Trace, b: &Trace) {
        assert_eq!(a.origin, b.origin);
        assert_eq!(a.chain.points().len(), b.chain.points().len());
        for (p, q) in a.chain.points().iter().zip(b.chain.points()) {
            assert!((p.x - q.x).abs() < 1e-6 && (p.y - q.y).abs() < 1e-6);
        }
        for (c, d) in a.color.iter().zip(&b.color) {
            assert!((c - d).abs() < 1e-6);
        }
        assert!((a.width - b.width).abs() < 1e-6);
    }
}
