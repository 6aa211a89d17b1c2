//! CROHME-dialect InkML: `<trace>` elements hold comma-separated points
//! (`x y` with optional extra channels such as time), and a root-level
//! `<annotation type="truth">` carries the expression.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InkDocument {
    pub strokes: Vec<Vec<Point>>,
    pub annotation: Option<String>,
}

impl InkDocument {
    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// `(min_x, min_y, max_x, max_y)` over all points.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let mut it = self.strokes.iter().flatten();
        let first = it.next()?;
        Some(it.fold((first.x, first.y, first.x, first.y), |(a, b, c, d), p| {
            (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y))
        }))
    }
}

fn parse_trace(text: &str, name: &str) -> Result<Vec<Point>> {
    let bad = |message: String| Error::BadTrace { trace: name.to_string(), message };
    let mut points = Vec::new();
    for chunk in text.split(',') {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let mut fields = chunk.split_whitespace();
        let mut coord = |axis: &str| -> Result<f64> {
            let f = fields.next().ok_or_else(|| bad(format!("point {chunk:?} lacks {axis}")))?;
            let v: f64 = f.parse().map_err(|_| bad(format!("unparseable coordinate {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite coordinate {f:?}")));
            }
            Ok(v)
        };
        let x = coord("x")?;
        let y = coord("y")?;
        points.push(Point { x, y });
    }
    if points.is_empty() {
        return Err(bad("trace has no points".into()));
    }
    Ok(points)
}

/// Parses an InkML document; traces are returned in document order.
pub fn parse_inkml(text: &str) -> Result<InkDocument> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        Error::Xml { line: pos.row, column: pos.col, message: e.to_string() }
    })?;
    let root = doc.root_element();
    let mut strokes = Vec::new();
    for (i, node) in root.descendants().filter(|n| n.has_tag_name("trace")).enumerate() {
        let name = node
            .attribute(("http://www.w3.org/XML/1998/namespace", "id"))
            .or_else(|| node.attribute("id"))
            .map_or_else(|| format!("#{i}"), str::to_string);
        strokes.push(parse_trace(node.text().unwrap_or(""), &name)?);
    }
    let annotation = root
        .children()
        .find(|n| n.has_tag_name("annotation") && n.attribute("type") == Some("truth"))
        .map(|n| n.text().unwrap_or("").to_string());
    Ok(InkDocument { strokes, annotation })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes a document back out in the same dialect.
pub fn serialize_inkml(doc: &InkDocument) -> String {
    let mut out = String::from("<ink xmlns=\"http://www.w3.org/2003/InkML\">\n");
    if let Some(a) = &doc.annotation {
        let _ = writeln!(out, "<annotation type=\"truth\">{}</annotation>", escape(a));
    }
    for (i, stroke) in doc.strokes.iter().enumerate() {
        let pts: Vec<String> = stroke.iter().map(|p| format!("{} {}", p.x, p.y)).collect();
        let _ = writeln!(out, "<trace id=\"{i}\">{}</trace>", pts.join(", "));
    }
    out.push_str("</ink>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<ink xmlns="http://www.w3.org/2003/InkML">
  <annotation type="truth">x + y</annotation>
  <annotation type="writer">w12</annotation>
  <trace id="0">0 0, 10 10</trace>
  <trace id="1">
    20 5 0.1, 30 5 0.2, 25 0 0.3, 25 10 0.4
  </trace>
  <trace id="2">40 0, 50 10, 45 5, 40 10</trace>
  <traceGroup xml:id="g">
    <annotation type="truth">x</annotation>
    <traceView traceDataRef="0"/>
  </traceGroup>
</ink>"#;

    #[test]
    fn single_trace() {
        let d = parse_inkml("<ink><trace>0 0, 10 0</trace></ink>").unwrap();
        assert_eq!(d.strokes.len(), 1);
        assert_eq!(d.strokes[0], vec![Point { x: 0.0, y: 0.0 }, Point { x: 10.0, y: 0.0 }]);
        assert_eq!(d.annotation, None);
    }

    #[test]
    fn fixture_with_annotation_and_extra_channels() {
        let d = parse_inkml(FIXTURE).unwrap();
        assert_eq!(d.strokes.len(), 3);
        assert_eq!(d.strokes.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 4, 4]);
        assert_eq!(d.strokes[1][2], Point { x: 25.0, y: 0.0 });
        assert_eq!(d.annotation.as_deref(), Some("x + y"));
    }

    #[test]
    fn truncated_xml_reports_position() {
        let err = parse_inkml(&FIXTURE[..120]).unwrap_err();
        match err {
            Error::Xml { line, column, .. } => assert!(line >= 1 && column >= 1),
            other => panic!("expected xml error, got {other:?}"),
        }
    }

    #[test]
    fn bad_coordinate_names_the_trace() {
        let err = parse_inkml(r#"<ink><trace id="a">0 0</trace><trace id="t7">1 zz</trace></ink>"#).unwrap_err();
        match err {
            Error::BadTrace { trace, .. } => assert_eq!(trace, "t7"),
            other => panic!("expected trace error, got {other:?}"),
        }
        assert!(parse_inkml("<ink><trace>   </trace></ink>").is_err());
        assert!(parse_inkml("<ink><trace>1 NaN</trace></ink>").is_err());
    }

    #[test]
    fn serialize_round_trip_preserves_counts() {
        let d = parse_inkml(FIXTURE).unwrap();
        let again = parse_inkml(&serialize_inkml(&d)).unwrap();
        assert_eq!(again, d);
        let with_markup = InkDocument { strokes: vec![vec![Point { x: 1.5, y: -2.0 }]], annotation: Some("a < b & c".into()) };
        assert_eq!(parse_inkml(&serialize_inkml(&with_markup)).unwrap(), with_markup);
    }
}
