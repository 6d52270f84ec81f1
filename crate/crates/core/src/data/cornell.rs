//! Cornell `pcd####cpos.txt` rectangle files: four "x y" lines per grasp.

use std::fmt::Write;

use crate::geom::{rect_from_vertices, GraspRect, Point};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CornellParse {
    pub grasps: Vec<GraspRect>,
    /// Rectangles dropped for malformed or non-finite coordinates, including a
    /// trailing incomplete group.
    pub skipped: usize,
}

fn parse_point(line: &str) -> Option<Point> {
    let mut it = line.split_whitespace();
    let x: f64 = it.next()?.parse().ok()?;
    let y: f64 = it.next()?.parse().ok()?;
    if it.next().is_some() || !x.is_finite() || !y.is_finite() {
        return None;
    }
    Some(Point::new(x, y))
}

pub fn parse_cornell_rect_file(text: &str) -> CornellParse {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = CornellParse::default();
    for group in lines.chunks(4) {
        let pts: Option<Vec<Point>> = group.iter().map(|l| parse_point(l)).collect();
        let rect = match pts {
            Some(p) if p.len() == 4 => rect_from_vertices(&[p[0], p[1], p[2], p[3]]).ok(),
            _ => None,
        };
        match rect {
            Some(r) => out.grasps.push(r),
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} malformed grasp rectangle(s)", out.skipped);
    }
    out
}

/// Inverse of [`parse_cornell_rect_file`] (categories are not represented).
pub fn serialize_cornell(grasps: &[GraspRect]) -> String {
    let mut s = String::new();
    for g in grasps {
        for p in g.quad().vertices {
            writeln!(s, "{:.3} {:.3}", p.x, p.y).expect("write to string");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angle_diff;
    use proptest::prelude::*;

    #[test]
    fn axis_aligned_fixture() {
        let text = "40 45\n60 45\n60 55\n40 55\n";
        let p = parse_cornell_rect_file(text);
        assert_eq!(p.skipped, 0);
        let r = p.grasps[0];
        assert_eq!((r.x, r.y, r.w, r.h, r.theta), (50.0, 50.0, 20.0, 10.0, 0.0));
        assert_eq!(parse_cornell_rect_file(text), p);
    }

    #[test]
    fn empty_and_malformed() {
        assert_eq!(parse_cornell_rect_file(""), CornellParse::default());
        let text = "40 45\n60 45\n60 55\n40 55\nNaN NaN\n1 2\n3 4\n5 6\n1 2\n";
        let p = parse_cornell_rect_file(text);
        assert_eq!(p.grasps.len(), 1);
        assert_eq!(p.skipped, 2);
        let p = parse_cornell_rect_file("1 2\n3 x\n5 6\n7 8\n");
        assert_eq!((p.grasps.len(), p.skipped), (0, 1));
    }

    proptest! {
        #[test]
        fn format_round_trip(
            x in 20.0f64..600.0, y in 20.0f64..400.0, w in 5.0f64..80.0,
            h in 5.0f64..40.0, t in 0.0f64..180.0,
        ) {
            let g = GraspRect::new(x, y, w, h, t).unwrap();
            let p = parse_cornell_rect_file(&serialize_cornell(&[g]));
            let r = p.grasps[0];
            prop_assert!((r.x - g.x).abs() <= 0.5 && (r.y - g.y).abs() <= 0.5);
            prop_assert!((r.w - g.w).abs() <= 0.5 && (r.h - g.h).abs() <= 0.5);
            prop_assert!(angle_diff(r.theta, g.theta) <= 0.5);
            for (a, b) in r.quad().vertices.iter().zip(g.quad().vertices) {
                prop_assert!((a.x - b.x).abs() <= 0.5 && (a.y - b.y).abs() <= 0.5);
            }
        }
    }
}
