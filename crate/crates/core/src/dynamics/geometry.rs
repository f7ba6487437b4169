//! Planar collision for oriented rectangles and half-planes.
//!
//! Rectangle pairs use separating-axis selection of a reference face followed
//! by clipping of the incident face, giving at most two points per pair.

use super::{Pose, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { half_w: f64, half_h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    /// Outward unit normal.
    pub normal: Vec2,
    /// Plane is `normal · p = offset`.
    pub offset: f64,
}

/// One contact point. `normal` points from the first collider to the second;
/// `separation` is negative when penetrating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldPoint {
    pub point: Vec2,
    pub normal: Vec2,
    pub separation: f64,
    pub feature: u32,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Obb {
    pub center: Vec2,
    pub axes: [Vec2; 2],
    pub half: [f64; 2],
}

impl Obb {
    pub fn new(pose: &Pose, half_w: f64, half_h: f64) -> Self {
        let (s, c) = pose.theta.sin_cos();
        Self {
            center: Vec2::new(pose.x, pose.z),
            axes: [Vec2::new(c, s), Vec2::new(-s, c)],
            half: [half_w, half_h],
        }
    }

    /// Corners in counter-clockwise order.
    pub fn vertices(&self) -> [Vec2; 4] {
        let ax = self.axes[0] * self.half[0];
        let az = self.axes[1] * self.half[1];
        [
            self.center - ax - az,
            self.center + ax - az,
            self.center + ax + az,
            self.center - ax + az,
        ]
    }

    /// Outward normal of edge `i` (edge from vertex i to i+1).
    pub fn edge_normal(&self, i: usize) -> Vec2 {
        match i {
            0 => -self.axes[1],
            1 => self.axes[0],
            2 => self.axes[1],
            _ => -self.axes[0],
        }
    }
}

/// Box corners within `margin` of the plane.
pub(crate) fn collide_plane_rect(plane: &HalfPlane, rect: &Obb, margin: f64) -> Vec<ManifoldPoint> {
    rect.vertices()
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let sep = plane.normal.dot(*v) - plane.offset;
            (sep <= margin).then_some(ManifoldPoint {
                point: *v,
                normal: plane.normal,
                separation: sep,
                feature: i as u32,
            })
        })
        .collect()
}

fn max_separation(a: &Obb, b: &Obb) -> (f64, usize) {
    let va = a.vertices();
    let vb = b.vertices();
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..4 {
        let n = a.edge_normal(i);
        let s = vb
            .iter()
            .map(|v| n.dot(*v - va[i]))
            .fold(f64::INFINITY, f64::min);
        if s > best.0 {
            best = (s, i);
        }
    }
    best
}

pub(crate) fn collide_rects(a: &Obb, b: &Obb, margin: f64) -> Vec<ManifoldPoint> {
    let (sep_a, edge_a) = max_separation(a, b);
    if sep_a > margin {
        return Vec::new();
    }
    let (sep_b, edge_b) = max_separation(b, a);
    if sep_b > margin {
        return Vec::new();
    }
    // prefer `a` as reference unless `b` is clearly better
    let flip = sep_b > sep_a + 1e-9;
    let (reference, incident, ref_edge) = if flip { (b, a, edge_b) } else { (a, b, edge_a) };

    let n = reference.edge_normal(ref_edge);
    let rv = reference.vertices();
    let v1 = rv[ref_edge];
    let v2 = rv[(ref_edge + 1) % 4];

    // incident edge: most anti-parallel to the reference normal
    let inc_edge = (0..4)
        .min_by(|&i, &j| {
            n.dot(incident.edge_normal(i))
                .partial_cmp(&n.dot(incident.edge_normal(j)))
                .expect("finite normals")
        })
        .expect("four edges");
    let iv = incident.vertices();
    let mut seg = [(iv[inc_edge], 0u32), (iv[(inc_edge + 1) % 4], 1u32)];

    let tangent = (v2 - v1).normalized();
    // clip against the two side planes of the reference edge
    let clip = |seg: &mut [(Vec2, u32); 2], normal: Vec2, offset: f64| -> bool {
        let d0 = normal.dot(seg[0].0) - offset;
        let d1 = normal.dot(seg[1].0) - offset;
        match (d0 <= 0.0, d1 <= 0.0) {
            (true, true) => true,
            (false, false) => false,
            (inside0, _) => {
                let t = d0 / (d0 - d1);
                let p = seg[0].0 + (seg[1].0 - seg[0].0) * t;
                if inside0 {
                    seg[1] = (p, seg[1].1 | 2);
                } else {
                    seg[0] = (p, seg[0].1 | 2);
                }
                true
            }
        }
    };
    if !clip(&mut seg, -tangent, -tangent.dot(v1)) || !clip(&mut seg, tangent, tangent.dot(v2)) {
        return Vec::new();
    }

    let sign = if flip { -1.0 } else { 1.0 };
    seg.iter()
        .filter_map(|&(p, tag)| {
            let sep = n.dot(p - v1);
            (sep <= margin).then(|| ManifoldPoint {
                point: p,
                normal: n * sign,
                separation: sep,
                feature: ((flip as u32) << 12)
                    | ((ref_edge as u32) << 8)
                    | ((inc_edge as u32) << 4)
                    | tag,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x: f64, z: f64, theta: f64, hw: f64, hh: f64) -> Obb {
        Obb::new(&Pose { x, z, theta }, hw, hh)
    }

    #[test]
    fn resting_box_touches_table_at_two_corners() {
        let table = HalfPlane {
            normal: Vec2::new(0.0, 1.0),
            offset: 0.0,
        };
        let pts = collide_plane_rect(&table, &rect(0.0, 0.06, 0.0, 0.025, 0.06), 5e-4);
        assert_eq!(pts.len(), 2);
        for p in &pts {
            assert_eq!(p.normal, Vec2::new(0.0, 1.0));
            assert!(p.separation.abs() < 1e-15);
        }
    }

    #[test]
    fn box_hovering_beyond_margin_has_no_contact() {
        let table = HalfPlane {
            normal: Vec2::new(0.0, 1.0),
            offset: 0.0,
        };
        let pts = collide_plane_rect(&table, &rect(0.0, 0.061, 0.0, 0.025, 0.06), 5e-4);
        assert!(pts.is_empty());
    }

    #[test]
    fn pad_against_box_side_gives_two_points_on_pad_extent() {
        let pad = rect(-0.03, 0.035, 0.0, 0.005, 0.015);
        let bx = rect(0.0, 0.06, 0.0, 0.025, 0.06);
        let pts = collide_rects(&pad, &bx, 5e-4);
        assert_eq!(pts.len(), 2);
        for p in &pts {
            assert!((p.normal.x - 1.0).abs() < 1e-12);
            assert!(p.separation.abs() < 1e-12);
            assert!(p.point.z >= 0.02 - 1e-12 && p.point.z <= 0.05 + 1e-12);
        }
        // reverse order flips the normal
        let rev = collide_rects(&bx, &pad, 5e-4);
        assert_eq!(rev.len(), 2);
        for p in &rev {
            assert!((p.normal.x + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_rects_do_not_collide() {
        let a = rect(0.0, 0.0, 0.0, 0.01, 0.01);
        let b = rect(0.05, 0.0, 0.3, 0.01, 0.01);
        assert!(collide_rects(&a, &b, 1e-3).is_empty());
    }

    #[test]
    fn penetrating_rects_report_negative_separation() {
        let a = rect(0.0, 0.0, 0.0, 0.01, 0.01);
        let b = rect(0.019, 0.0, 0.0, 0.01, 0.05);
        let pts = collide_rects(&a, &b, 0.0);
        assert!(!pts.is_empty());
        for p in pts {
            assert!((p.separation + 0.001).abs() < 1e-12);
        }
    }
}
