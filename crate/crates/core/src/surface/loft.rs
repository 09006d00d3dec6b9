//! Proxy surface through a stack of contours.

use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::tracker::{IndexedContour, Termination, TrackedVessel};
use crate::Vec3;

/// Cyclic shift `s` minimizing `Σ_k |a_k − b_{(k+s) mod n}|²`.
pub fn align_shift(a: &[Vec3], b: &[Vec3]) -> usize {
    let n = a.len();
    (0..n)
        .map(|s| (s, (0..n).map(|k| (a[k] - b[(k + s) % n]).norm_squared()).sum::<f64>()))
        .fold((0, f64::INFINITY), |best, (s, d)| if d < best.1 { (s, d) } else { best })
        .0
}

fn centroid(ring: &[Vec3]) -> Vec3 {
    ring.iter().fold(Vec3::zeros(), |acc, &p| acc + p) * (1.0 / ring.len() as f64)
}

/// Newell normal of a closed polygon.
fn ring_normal(ring: &[Vec3]) -> Vec3 {
    let n = ring.len();
    (0..n).fold(Vec3::zeros(), |acc, k| {
        let (p, q) = (ring[k], ring[(k + 1) % n]);
        acc + Vec3::new((p.y - q.y) * (p.z + q.z), (p.z - q.z) * (p.x + q.x), (p.x - q.x) * (p.y + q.y))
    })
}

/// Consecutive rings must lie strictly on opposite sides of each other's planes.
fn check_crossing(rings: &[Vec<Vec3>], centers: &[Vec3]) -> Result<()> {
    let chain_normal = |i: usize| {
        let n = ring_normal(&rings[i]).normalize();
        let along = if i + 1 < rings.len() { centers[i + 1] - centers[i] } else { centers[i] - centers[i - 1] };
        if n.dot(along) < 0.0 {
            -n
        } else {
            n
        }
    };
    for i in 0..rings.len() - 1 {
        let (na, nb) = (chain_normal(i), chain_normal(i + 1));
        let ahead = rings[i + 1].iter().all(|&p| (p - centers[i]).dot(na) > 0.0);
        let behind = rings[i].iter().all(|&p| (p - centers[i + 1]).dot(nb) < 0.0);
        if !(ahead && behind) {
            return Err(Error::Loft(format!("rings {i} and {} intersect", i + 1)));
        }
    }
    Ok(())
}

/// Triangulated tube through `rings` (each closed, equal length, ordered along the chain)
/// with triangle-fan caps, oriented outward.
pub fn loft_rings(rings: &[Vec<Vec3>]) -> Result<Mesh> {
    if rings.len() < 2 {
        return Err(Error::Loft(format!("need at least 2 contours, got {}", rings.len())));
    }
    let n = rings[0].len();
    if n < 3 || rings.iter().any(|r| r.len() != n) {
        return Err(Error::Loft("contours must share one angular sampling of at least 3 bins".into()));
    }
    if rings.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::Loft("non-finite contour point".into()));
    }
    let mut aligned: Vec<Vec<Vec3>> = Vec::with_capacity(rings.len());
    aligned.push(rings[0].clone());
    for ring in &rings[1..] {
        let s = align_shift(aligned.last().expect("non-empty"), ring);
        aligned.push((0..n).map(|k| ring[(k + s) % n]).collect());
    }
    let centers: Vec<Vec3> = aligned.iter().map(|r| centroid(r)).collect();
    check_crossing(&aligned, &centers)?;

    let m = aligned.len();
    let mut vertices: Vec<Vec3> = aligned.concat();
    let (c0, c1) = ((m * n) as u32, (m * n + 1) as u32);
    vertices.push(centers[0]);
    vertices.push(centers[m - 1]);
    let at = |r: usize, k: usize| (r * n + k % n) as u32;
    let mut triangles = Vec::with_capacity(2 * n * m);
    for r in 0..m - 1 {
        for k in 0..n {
            let (a, b, d, c) = (at(r, k), at(r, k + 1), at(r + 1, k + 1), at(r + 1, k));
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    for k in 0..n {
        triangles.push([c0, at(0, k + 1), at(0, k)]);
        triangles.push([c1, at(m - 1, k), at(m - 1, k + 1)]);
    }
    let mut mesh = Mesh::new(vertices, triangles)?;
    if mesh.signed_volume() < 0.0 {
        mesh.flip();
    }
    Ok(mesh)
}

/// Loft through the tracked contours in centerline order.
pub fn loft_contours(v: &TrackedVessel) -> Result<Mesh> {
    // Stable sort: contours sharing an index keep their order.
    let mut contours: Vec<_> = v.contours.iter().collect();
    contours.sort_by_key(|c| c.index);
    let rings: Vec<Vec<Vec3>> = contours.iter().map(|c| c.contour.points()).collect();
    loft_rings(&rings).map_err(|e| match e {
        Error::Loft(msg) => Error::Loft(format!("vessel `{}`: {msg}", v.name)),
        other => other,
    })
}

/// Which centerline ends (start, end) stopped on entering one of `regions`.
pub fn ends_stopped_in(v: &TrackedVessel, regions: &[&str]) -> [bool; 2] {
    // termination = [forward leg (centerline end), backward leg (centerline start)]
    let hit = |t: &Termination| matches!(t, Termination::Region(r) if regions.contains(&r.as_str()));
    [hit(&v.termination[1]), hit(&v.termination[0])]
}

/// Copy of `v` with translated copies of its first and/or last contour pushed past the
/// centerline ends by `factor` contour radii, so the proxy surface reaches into a neighbour.
pub fn extend_ends(v: &TrackedVessel, ends: [bool; 2], factor: f64) -> TrackedVessel {
    let mut out = v.clone();
    out.contours.sort_by_key(|c| c.index);
    if out.contours.is_empty() {
        return out;
    }
    let shifted = |c: &IndexedContour, tip: Vec3, outward: Vec3| {
        let mean_r = c.contour.radii.iter().sum::<f64>() / c.contour.radii.len() as f64;
        let reach = (tip - c.contour.frame.center).dot(outward).max(0.0) + factor * mean_r;
        let mut moved = c.clone();
        moved.contour.frame = c.contour.frame.with_center(c.contour.frame.center + outward * reach);
        moved
    };
    if ends[0] {
        let c = out.contours[0].clone();
        out.contours.insert(0, shifted(&c, v.centerline[0], -c.contour.frame.normal));
    }
    if ends[1] {
        let c = out.contours[out.contours.len() - 1].clone();
        out.contours.push(shifted(&c, *v.centerline.last().expect("non-empty"), c.contour.frame.normal));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::mesh::mesh_watertight;
    use std::f64::consts::PI;

    pub(crate) fn circle(center: Vec3, r: f64, n: usize, phase: usize) -> Vec<Vec3> {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * ((k + phase) % n) as f64 / n as f64;
                center + Vec3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect()
    }

    #[test]
    fn two_circles_make_a_closed_cylinder() {
        let n = 64;
        let mesh = loft_rings(&[circle(Vec3::zeros(), 2.0, n, 0), circle(Vec3::new(0.0, 0.0, 3.0), 2.0, n, 0)]).unwrap();
        assert_eq!((mesh.vertices.len(), mesh.triangles.len()), (2 * n + 2, 4 * n));
        let r = mesh_watertight(&mesh);
        assert!(r.is_watertight, "{r:?}");
        assert_eq!(r.euler_characteristic, 2);
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn straight_tube_area() {
        let (n, r, len) = (64, 3.0, 40.0);
        let rings: Vec<_> = (0..=8).map(|i| circle(Vec3::new(0.0, 0.0, len * i as f64 / 8.0), r, n, 0)).collect();
        let area = loft_rings(&rings).unwrap().area();
        let exact = 2.0 * PI * r * len + 2.0 * PI * r * r;
        assert!((area - exact).abs() / exact < 0.02, "{area} vs {exact}");
    }

    #[test]
    fn rotated_ring_is_realigned() {
        let n = 32;
        let a = circle(Vec3::zeros(), 2.0, n, 0);
        let b = circle(Vec3::new(0.0, 0.0, 1.0), 2.0, n, 3);
        let brute = (0..n)
            .min_by(|&s, &t| {
                let d = |s: usize| (0..n).map(|k| (a[k] - b[(k + s) % n]).norm_squared()).sum::<f64>();
                d(s).partial_cmp(&d(t)).unwrap()
            })
            .unwrap();
        assert_eq!(align_shift(&a, &b), brute);
        assert_eq!(align_shift(&a, &b), n - 3);
    }

    fn straight_track(stops: [Termination; 2]) -> TrackedVessel {
        use crate::polar::{Contour, PlaneFrame};
        let centerline: Vec<Vec3> = (0..=20).map(|i| Vec3::new(0.0, 0.0, i as f64)).collect();
        let contours = (0..=3)
            .map(|k| {
                let frame = PlaneFrame::new(Vec3::new(0.0, 0.0, 1.0 + 5.0 * k as f64), Vec3::unit_z(), None);
                IndexedContour { index: 1 + 5 * k, contour: Contour::circle(frame, 2.0, 16) }
            })
            .collect();
        TrackedVessel { name: "t".into(), centerline, contours, seed_index: 10, termination: stops }
    }

    #[test]
    fn junction_ends_are_extended_past_the_tip() {
        let v = straight_track([Termination::Region("kidney".into()), Termination::Region("aorta".into())]);
        let ends = ends_stopped_in(&v, &["aorta", "iliac"]);
        assert_eq!(ends, [true, false]);
        let e = extend_ends(&v, ends, 2.0);
        assert_eq!(e.contours.len(), 5);
        // First contour at z = 1, tip at z = 0, plus two radii.
        assert!((e.contours[0].contour.frame.center.z + 4.0).abs() < 1e-12);
        let mesh = loft_contours(&e).unwrap();
        assert!(mesh_watertight(&mesh).is_watertight);
        let (lo, hi) = mesh.bounds().unwrap();
        assert!((lo.z + 4.0).abs() < 1e-12 && (hi.z - 16.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_stacks() {
        let c = circle(Vec3::zeros(), 1.0, 16, 0);
        assert!(matches!(loft_rings(&[c.clone()]), Err(Error::Loft(_))));
        assert!(loft_rings(&[c.clone(), circle(Vec3::new(0.0, 0.0, 1.0), 1.0, 12, 0)]).is_err());
        let tilted: Vec<Vec3> = c.iter().map(|p| Vec3::new(p.x, p.y, 0.2 + 2.0 * p.x)).collect();
        assert!(matches!(loft_rings(&[c, tilted]), Err(Error::Loft(_))));
    }
}
