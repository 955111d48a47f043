//! Minimal SVG rendering of a scene in the ego frame.

use std::fmt::Write as _;

use anyhow::Result;

use drivegen::geom::{MapCategory, OrientedBox, Point};
use drivegen::model::Inference;
use drivegen::scene::{AgentClass, Scene};

const PX_PER_M: f64 = 10.0;
const X_RANGE: (f64, f64) = (-20.0, 40.0);
const Y_RANGE: (f64, f64) = (-30.0, 30.0);

fn px(p: Point) -> (f64, f64) {
    ((p[0] - X_RANGE.0) * PX_PER_M, (Y_RANGE.1 - p[1]) * PX_PER_M)
}

fn points_attr(pts: &[Point]) -> String {
    pts.iter()
        .map(|&p| {
            let (x, y) = px(p);
            format!("{x:.1},{y:.1}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn polyline(doc: &mut String, pts: &[Point], stroke: &str, width: f64, extra: &str) {
    let _ = writeln!(
        doc,
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" {extra}/>"#,
        points_attr(pts)
    );
}

fn polygon(doc: &mut String, b: &OrientedBox, fill: &str) {
    let _ = writeln!(
        doc,
        r#"<polygon points="{}" fill="{fill}" fill-opacity="0.6" stroke="black" stroke-width="1"/>"#,
        points_attr(&b.corners())
    );
}

fn with_origin(pts: &[Point]) -> Vec<Point> {
    std::iter::once([0.0, 0.0]).chain(pts.iter().copied()).collect()
}

/// Map polylines, agent boxes and ground-truth futures, the ego box and its
/// ground-truth future, and optionally a plan and agent predictions.
pub fn render_scene(scene: &Scene, inference: Option<&Inference>) -> Result<String> {
    let (w, h) = ((X_RANGE.1 - X_RANGE.0) * PX_PER_M, (Y_RANGE.1 - Y_RANGE.0) * PX_PER_M);
    let mut doc = String::new();
    let _ = writeln!(
        doc,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(doc, "<title>scene {}</title>", scene.id);
    let _ = writeln!(doc, r##"<rect width="100%" height="100%" fill="#f4f4f0"/>"##);
    for line in scene.map_in_ego() {
        let (stroke, extra) = match line.category() {
            MapCategory::RoadBoundary => ("#333333", ""),
            MapCategory::LaneDivider => ("#999999", r#"stroke-dasharray="8 6""#),
            MapCategory::PedestrianCrossing => ("#d08a2c", ""),
        };
        polyline(&mut doc, line.points(), stroke, 2.0, extra);
    }
    let to_ego = scene.to_ego();
    for a in &scene.agents {
        let b = a.box_at(0)?;
        let fill = match a.class {
            AgentClass::Car => "#7a8fb8",
            AgentClass::Pedestrian => "#b87a9f",
        };
        polygon(
            &mut doc,
            &OrientedBox::new(to_ego.compose(&b.center), b.length, b.width)?,
            fill,
        );
        let fut: Vec<Point> = std::iter::once(a.pose().position())
            .chain(a.future.points())
            .map(|p| to_ego.apply(p))
            .collect();
        polyline(&mut doc, &fut, "#777777", 1.5, "");
    }
    let ego = OrientedBox::new(
        drivegen::geom::Pose2::identity(),
        scene.ego.bbox.length,
        scene.ego.bbox.width,
    )?;
    polygon(&mut doc, &ego, "#3c9a4c");
    polyline(
        &mut doc,
        &with_origin(&scene.ego_future_local().points()),
        "#3c9a4c",
        3.0,
        "",
    );
    if let Some(inf) = inference {
        for a in &inf.agents {
            let start = a.detection.pose.position();
            let pts: Vec<Point> = std::iter::once(start).chain(a.future.iter().copied()).collect();
            polyline(&mut doc, &pts, "#d0452c", 1.5, r#"stroke-dasharray="4 3""#);
        }
        polyline(&mut doc, &with_origin(&inf.plan), "#2c5fd0", 3.0, "");
        for &p in &inf.plan {
            let (x, y) = px(p);
            let _ = writeln!(doc, r##"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="#2c5fd0"/>"##);
        }
    }
    doc.push_str("</svg>\n");
    Ok(doc)
}
