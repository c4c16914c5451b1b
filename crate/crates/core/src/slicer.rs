//! Short-axis / long-axis slice synthesis with acquisition corruption.
//!
//! A plane keeps its true pose; its `displacement` is the in-plane offset
//! between where the anatomy is and where the acquisition reports it.
//! Contours are found on the true plane and reported in the displaced
//! frame, so every reported point stays on the (unchanged) plane.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::vec3::{self, Point};
use crate::geometry::AnalyticPart;
use crate::phantom::{PartId, PhantomSpec, NUM_PARTS};
use crate::rng;

pub const SAX_PLANES: usize = 10;
pub const DEFAULT_SAMPLES_PER_CONTOUR: usize = 64;
/// Largest per-sample displacement scale in mm; λ is drawn from `U(0, λ_max)`.
pub const LAMBDA_MAX_MM: f64 = 6.0;
pub const LAX_DROP_P: f64 = 0.5;
/// Clearance kept between the top SAX plane and the atria, mm.
const ATRIAL_CLEARANCE_MM: f64 = 1.0;
const ROOT_TOL_MM: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlaneKind {
    Sax,
    Lax2ch,
    Lax4ch,
}

impl PlaneKind {
    pub fn is_lax(self) -> bool {
        !matches!(self, PlaneKind::Sax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    SaxLax,
    SaxOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    pub kind: PlaneKind,
    pub origin: Point,
    pub normal: Point,
    pub u: Point,
    pub v: Point,
    /// In-plane offset `(along u, along v)`, mm.
    pub displacement: [f64; 2],
}

impl SlicePlane {
    pub fn new(kind: PlaneKind, origin: Point, normal: Point) -> Self {
        let n = vec3::normalize(normal);
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = vec3::normalize(vec3::cross(n, helper));
        let v = vec3::cross(n, u);
        Self {
            kind,
            origin,
            normal: n,
            u,
            v,
            displacement: [0.0; 2],
        }
    }

    pub fn frame_error(&self) -> f64 {
        let m = [self.u, self.v, self.normal];
        vec3::orthonormality_error(&m)
    }

    /// Signed distance of `p` from the plane.
    pub fn height(&self, p: Point) -> f64 {
        vec3::dot(vec3::sub(p, self.origin), self.normal)
    }

    fn offset(&self) -> Point {
        vec3::add(vec3::scale(self.u, self.displacement[0]), vec3::scale(self.v, self.displacement[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStack {
    pub planes: Vec<SlicePlane>,
    /// `points[plane][part]`, mm, already in the displaced frame.
    pub points: Vec<Vec<Vec<Point>>>,
    pub samples_per_contour: usize,
    pub lambda: f64,
}

impl SliceStack {
    pub fn num_sax(&self) -> usize {
        self.planes.iter().filter(|p| !p.kind.is_lax()).count()
    }

    pub fn num_lax(&self) -> usize {
        self.planes.len() - self.num_sax()
    }

    /// All contour points of one part over every plane.
    pub fn part_points(&self, part: usize) -> Vec<Point> {
        self.points.iter().flat_map(|pl| pl[part].iter().copied()).collect()
    }

    pub fn per_part(&self) -> Vec<Vec<Point>> {
        (0..NUM_PARTS).map(|p| self.part_points(p)).collect()
    }

    /// Planes on which `part` has a contour.
    pub fn planes_hitting(&self, part: usize) -> usize {
        self.points.iter().filter(|pl| !pl[part].is_empty()).count()
    }

    /// `part plane x y z` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, pl) in self.points.iter().enumerate() {
            for (p, pts) in pl.iter().enumerate() {
                for q in pts {
                    let _ = writeln!(s, "{p} {i} {} {} {}", q[0], q[1], q[2]);
                }
            }
        }
        s
    }
}

/// Crossings of `part` along the ray `c + t·dir`, `t ∈ (0, t_max]`.
fn ray_roots(part: &AnalyticPart, c: Point, dir: Point, t_max: f64, min_step: f64, out: &mut Vec<Point>) {
    let f = |t: f64| part.sdf(vec3::add(c, vec3::scale(dir, t)));
    let mut t = 0.0;
    let mut ft = f(t);
    while t < t_max {
        let step = (ft.abs() * 0.9).max(min_step);
        let t1 = (t + step).min(t_max);
        let f1 = f(t1);
        if (ft < 0.0) != (f1 < 0.0) {
            let (mut a, mut b, mut fa) = (t, t1, ft);
            while b - a > ROOT_TOL_MM {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if (fm < 0.0) == (fa < 0.0) {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            let r = 0.5 * (a + b);
            out.push(vec3::add(c, vec3::scale(dir, r)));
        }
        t = t1;
        ft = f1;
    }
}

/// Contour of one part on the true plane, `n` points, empty when the plane
/// misses the part.
fn part_contour(part: &AnalyticPart, plane: &SlicePlane, n: usize) -> Vec<Point> {
    let (lo, hi) = part.bounding_box();
    let reach = vec3::norm(vec3::sub(hi, lo)) * 0.5;
    let center = vec3::scale(vec3::add(lo, hi), 0.5);
    if plane.height(center).abs() > reach {
        return Vec::new();
    }
    let c = vec3::sub(center, vec3::scale(plane.normal, plane.height(center)));
    let rays = 2 * n;
    let min_step = reach * 2e-3;
    let mut roots = Vec::new();
    for i in 0..rays {
        let th = std::f64::consts::TAU * i as f64 / rays as f64;
        let dir = vec3::add(vec3::scale(plane.u, th.cos()), vec3::scale(plane.v, th.sin()));
        ray_roots(part, c, dir, 2.0 * reach, min_step, &mut roots);
    }
    if roots.is_empty() {
        return Vec::new();
    }
    // Evenly strided pick; short lists wrap around.
    (0..n).map(|k| roots[(k * roots.len()) / n % roots.len()]).collect()
}

/// Per-part contour points of `phantom` on `plane`, shifted by the plane's
/// displacement.
pub fn extract_slice_points(phantom: &PhantomSpec, plane: &SlicePlane, samples_per_contour: usize) -> Vec<Vec<Point>> {
    let off = plane.offset();
    phantom
        .parts
        .iter()
        .map(|part| {
            part_contour(part, plane, samples_per_contour)
                .into_iter()
                .map(|p| vec3::add(p, off))
                .collect()
        })
        .collect()
}

/// Long axis of the LV (unit, base-ward) and its center.
fn lv_axis(phantom: &PhantomSpec) -> (Point, Point) {
    let lv = phantom.part(PartId::Lv);
    let axis = [lv.rotation[0][2], lv.rotation[1][2], lv.rotation[2][2]];
    (lv.center, vec3::normalize(axis))
}

fn axial_range(part: &AnalyticPart, c: Point, axis: Point, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, "axial-range", 0);
    part.sample_surface(4000, &mut r)
        .iter()
        .map(|p| vec3::dot(vec3::sub(*p, c), axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), h| (a.min(h), b.max(h)))
}

/// Planes of a protocol on `phantom`, undisplaced.
pub fn protocol_planes(phantom: &PhantomSpec, protocol: Protocol) -> Vec<SlicePlane> {
    let (c, axis) = lv_axis(phantom);
    let (myo_lo, myo_hi) = axial_range(phantom.part(PartId::Myo), c, axis, phantom.seed);
    let (rv_lo, rv_hi) = axial_range(phantom.part(PartId::Rv), c, axis, phantom.seed);
    let atria_lo = [PartId::La, PartId::Ra]
        .iter()
        .map(|&p| axial_range(phantom.part(p), c, axis, phantom.seed).0)
        .fold(f64::INFINITY, f64::min);
    let lo = myo_lo.min(rv_lo);
    let hi = myo_hi.max(rv_hi).min(atria_lo - ATRIAL_CLEARANCE_MM);
    let span = hi - lo;
    // Slices sit at the centers of 10 equal bands over the ventricles.
    let mut planes: Vec<SlicePlane> = (0..SAX_PLANES)
        .map(|i| {
            let h = lo + span * (i as f64 + 0.5) / SAX_PLANES as f64;
            SlicePlane::new(PlaneKind::Sax, vec3::add(c, vec3::scale(axis, h)), axis)
        })
        .collect();
    if protocol == Protocol::SaxLax {
        let rv = phantom.part(PartId::Rv).center;
        let to_rv = vec3::sub(rv, c);
        let lateral = vec3::normalize(vec3::sub(to_rv, vec3::scale(axis, vec3::dot(to_rv, axis))));
        // 4CH contains the axis and the RV direction; 2CH is perpendicular.
        planes.push(SlicePlane::new(PlaneKind::Lax2ch, c, lateral));
        planes.push(SlicePlane::new(PlaneKind::Lax4ch, c, vec3::cross(axis, lateral)));
    }
    planes
}

pub fn build_stack(phantom: &PhantomSpec, planes: Vec<SlicePlane>, samples_per_contour: usize, lambda: f64) -> SliceStack {
    let points = planes
        .iter()
        .map(|pl| extract_slice_points(phantom, pl, samples_per_contour))
        .collect();
    SliceStack {
        planes,
        points,
        samples_per_contour,
        lambda,
    }
}

pub fn make_protocol(phantom: &PhantomSpec, protocol: Protocol, samples_per_contour: usize) -> SliceStack {
    build_stack(phantom, protocol_planes(phantom, protocol), samples_per_contour, 0.0)
}

/// Independent in-plane `N(0, λ²I)` displacement for every plane, then
/// re-extraction.
pub fn perturb_slices(phantom: &PhantomSpec, stack: &SliceStack, lambda: f64, seed: u64) -> SliceStack {
    if lambda == 0.0 {
        return stack.clone();
    }
    let mut r = rng::stream(seed, "perturb", 0);
    let planes = stack
        .planes
        .iter()
        .map(|pl| SlicePlane {
            displacement: draw_displacement(lambda, &mut r),
            ..*pl
        })
        .collect();
    build_stack(phantom, planes, stack.samples_per_contour, lambda)
}

/// One in-plane displacement with per-axis standard deviation `lambda`.
pub fn draw_displacement(lambda: f64, r: &mut impl Rng) -> [f64; 2] {
    let n = Normal::new(0.0, lambda.max(0.0)).expect("finite lambda");
    [n.sample(r), n.sample(r)]
}

/// Remove each long-axis plane independently with probability `p`.
pub fn drop_lax(stack: &SliceStack, p: f64, seed: u64) -> SliceStack {
    let mut r = rng::stream(seed, "drop-lax", 0);
    let mut out = SliceStack {
        planes: Vec::new(),
        points: Vec::new(),
        ..stack.clone()
    };
    for (pl, pts) in stack.planes.iter().zip(&stack.points) {
        let drop = pl.kind.is_lax() && r.gen::<f64>() < p;
        if !drop {
            out.planes.push(*pl);
            out.points.push(pts.clone());
        }
    }
    out
}

/// Training-time corruption: `λ ~ U(0, λ_max)`, displacement, LAX dropout.
pub fn corrupted_stack(phantom: &PhantomSpec, lambda_max: f64, drop_p: f64, samples: usize, seed: u64) -> SliceStack {
    let mut r = rng::stream(seed, "corrupt", 0);
    let lambda = if lambda_max > 0.0 { r.gen_range(0.0..lambda_max) } else { 0.0 };
    let planes = protocol_planes(phantom, Protocol::SaxLax);
    let mut planes: Vec<SlicePlane> = planes
        .into_iter()
        .filter(|pl| !(pl.kind.is_lax() && r.gen::<f64>() < drop_p))
        .collect();
    for pl in planes.iter_mut() {
        pl.displacement = draw_displacement(lambda, &mut r);
    }
    build_stack(phantom, planes, samples, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnalyticPart;
    use crate::phantom::{canonical_phantom, generate_phantom};

    fn sphere_phantom() -> PhantomSpec {
        let mut c = canonical_phantom(100.0).unwrap();
        c.parts[3] = AnalyticPart::sphere([0.0; 3], 1.0);
        c
    }

    #[test]
    fn circle_on_sphere() {
        let ph = sphere_phantom();
        let plane = SlicePlane::new(PlaneKind::Sax, [0.0; 3], [0.0, 0.0, 1.0]);
        let pts = &extract_slice_points(&ph, &plane, 32)[3];
        assert_eq!(pts.len(), 32);
        for p in pts {
            assert!(p[2].abs() < 1e-12);
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-5);
        }
        let above = SlicePlane::new(PlaneKind::Sax, [0.0, 0.0, 2.0], [0.0, 0.0, 1.0]);
        assert!(extract_slice_points(&ph, &above, 32)[3].is_empty());
    }

    #[test]
    fn canonical_protocols() {
        let c = canonical_phantom(100.0).unwrap();
        let full = make_protocol(&c, Protocol::SaxLax, 32);
        assert_eq!(full.planes.len(), 12);
        assert_eq!(full.num_lax(), 2);
        for pl in &full.planes {
            assert!(pl.frame_error() < 1e-6);
        }
        let sax = make_protocol(&c, Protocol::SaxOnly, 32);
        assert_eq!(sax.planes.len(), 10);
        assert_eq!(sax.planes_hitting(PartId::La.index()), 0);
        assert_eq!(sax.planes_hitting(PartId::Ra.index()), 0);
        assert!(sax.planes_hitting(PartId::Lv.index()) >= 8);
        assert!(full.planes_hitting(PartId::La.index()) >= 1);
        assert!(full.planes_hitting(PartId::Ra.index()) >= 1);
        let n0 = sax.planes[0].normal;
        assert!(sax.planes.iter().all(|p| p.normal == n0));
        for (pl, pts) in full.planes.iter().zip(&full.points) {
            for (part, ps) in pts.iter().enumerate() {
                assert!(ps.is_empty() || ps.len() == 32);
                for p in ps {
                    assert!(pl.height(*p).abs() < 1e-6);
                    assert!(c.parts[part].sdf(*p).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn sax_only_misses_atria_across_seeds() {
        for seed in 0..20 {
            let ph = generate_phantom(seed, 100.0).unwrap();
            let sax = make_protocol(&ph, Protocol::SaxOnly, 16);
            assert_eq!(sax.planes_hitting(PartId::La.index()), 0, "seed {seed}");
            assert_eq!(sax.planes_hitting(PartId::Ra.index()), 0, "seed {seed}");
        }
    }

    #[test]
    fn perturb_contracts() {
        let c = canonical_phantom(100.0).unwrap();
        let s = make_protocol(&c, Protocol::SaxLax, 16);
        assert_eq!(perturb_slices(&c, &s, 0.0, 3), s);
        let p = perturb_slices(&c, &s, 4.0, 3);
        assert_eq!(p, perturb_slices(&c, &s, 4.0, 3));
        for (a, b) in s.planes.iter().zip(&p.planes) {
            assert_eq!(a.normal, b.normal);
            assert_eq!(a.origin, b.origin);
        }
        for (pl, pts) in p.planes.iter().zip(&p.points) {
            for q in pts.iter().flatten() {
                assert!(pl.height(*q).abs() < 1e-6);
            }
        }
        let moved = s.points[4][1][0] != p.points[4][1][0];
        assert!(moved);
    }

    #[test]
    fn displacement_std() {
        let mut r = rng::stream(1, "d", 0);
        let n = 10_000;
        let d: Vec<[f64; 2]> = (0..n).map(|_| draw_displacement(3.0, &mut r)).collect();
        for a in 0..2 {
            let m = d.iter().map(|x| x[a]).sum::<f64>() / n as f64;
            let sd = (d.iter().map(|x| (x[a] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((sd - 3.0).abs() < 0.05 * 3.0, "{sd}");
        }
    }

    #[test]
    fn lax_dropout() {
        let c = canonical_phantom(100.0).unwrap();
        let s = make_protocol(&c, Protocol::SaxLax, 8);
        assert_eq!(drop_lax(&s, 0.0, 1), s);
        let none = drop_lax(&s, 1.0, 1);
        assert_eq!(none.num_lax(), 0);
        assert_eq!(none.planes, s.planes[..10].to_vec());
        assert!(s.to_text().lines().next().unwrap().split_whitespace().count() == 5);
    }
}
