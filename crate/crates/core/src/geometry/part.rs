//! Posed ellipsoids, ellipsoidal shells and plane-capped ellipsoids with
//! approximate signed distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vec3::{self, Mat3, Point};
use super::GeometryError;

/// Half-space `normal·p ≤ offset` kept by a capped ellipsoid (world frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapPlane {
    pub normal: Point,
    pub offset: f64,
}

impl CapPlane {
    #[inline]
    pub fn eval(&self, p: Point) -> f64 {
        vec3::dot(self.normal, p) - self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartKind {
    Ellipsoid,
    /// Outer ellipsoid minus an inner one sharing the rotation.
    Shell { inner_center: Point, inner_radii: Point },
    CappedEllipsoid { cap: CapPlane },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPart {
    pub kind: PartKind,
    pub center: Point,
    pub radii: Point,
    /// Columns are the local axes expressed in world coordinates.
    pub rotation: Mat3,
}

/// Signed distance to an axis-aligned ellipsoid at the origin, `q` local.
///
/// First-order estimate `k0(k0-1)/k1` with `k0 = |q/r|`, `k1 = |q/r²|`,
/// then one correction step taken from the point projected along the
/// estimated normal. Exact for spheres.
pub fn ellipsoid_sdf_local(q: Point, r: Point) -> f64 {
    let est = |q: Point| -> (f64, Point) {
        let a = [q[0] / r[0], q[1] / r[1], q[2] / r[2]];
        let b = [a[0] / r[0], a[1] / r[1], a[2] / r[2]];
        let k0 = vec3::norm(a);
        let k1 = vec3::norm(b);
        if k1 < 1e-300 {
            return (-r[0].min(r[1]).min(r[2]), [0.0; 3]);
        }
        (k0 * (k0 - 1.0) / k1, vec3::scale(b, 1.0 / k1))
    };
    let (d0, n) = est(q);
    if n == [0.0; 3] {
        return d0;
    }
    let (d1, _) = est(vec3::sub(q, vec3::scale(n, d0)));
    d0 + d1
}

impl AnalyticPart {
    pub fn ellipsoid(center: Point, radii: Point, rotation: Mat3) -> Self {
        Self {
            kind: PartKind::Ellipsoid,
            center,
            radii,
            rotation,
        }
    }

    pub fn sphere(center: Point, r: f64) -> Self {
        Self::ellipsoid(center, [r; 3], vec3::IDENTITY)
    }

    pub fn shell(center: Point, radii: Point, inner_center: Point, inner_radii: Point, rotation: Mat3) -> Self {
        Self {
            kind: PartKind::Shell {
                inner_center,
                inner_radii,
            },
            center,
            radii,
            rotation,
        }
    }

    pub fn capped(center: Point, radii: Point, rotation: Mat3, cap: CapPlane) -> Self {
        Self {
            kind: PartKind::CappedEllipsoid {
                cap: CapPlane {
                    normal: vec3::normalize(cap.normal),
                    offset: cap.offset,
                },
            },
            center,
            radii,
            rotation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = |p: &Point| p.iter().all(|v| v.is_finite());
        if !finite(&self.center) || !finite(&self.radii) || !self.rotation.iter().all(finite) {
            return Err(GeometryError::InvalidPart("non-finite field".into()));
        }
        if self.radii.iter().any(|&r| r <= 0.0) {
            return Err(GeometryError::InvalidPart(format!("radii {:?}", self.radii)));
        }
        let err = vec3::orthonormality_error(&self.rotation);
        if err > 1e-6 {
            return Err(GeometryError::InvalidPart(format!("rotation off by {err:e}")));
        }
        if let PartKind::Shell {
            inner_center,
            inner_radii,
        } = self.kind
        {
            if inner_radii.iter().zip(self.radii).any(|(i, o)| *i <= 0.0 || *i >= o) {
                return Err(GeometryError::InvalidPart(format!(
                    "shell inner radii {inner_radii:?} vs outer {:?}",
                    self.radii
                )));
            }
            if !finite(&inner_center) {
                return Err(GeometryError::InvalidPart("non-finite inner center".into()));
            }
        }
        if let PartKind::CappedEllipsoid { cap } = self.kind {
            if !finite(&cap.normal) || !cap.offset.is_finite() || vec3::norm(cap.normal) < 0.5 {
                return Err(GeometryError::InvalidPart("bad cap plane".into()));
            }
        }
        Ok(())
    }

    #[inline]
    fn to_local(&self, center: Point, p: Point) -> Point {
        vec3::mat_t_vec(&self.rotation, vec3::sub(p, center))
    }

    #[inline]
    fn to_world(&self, center: Point, q: Point) -> Point {
        vec3::add(center, vec3::mat_vec(&self.rotation, q))
    }

    /// Signed distance to the outer ellipsoid alone, ignoring cavity and cap.
    pub fn outer_sdf(&self, p: Point) -> f64 {
        ellipsoid_sdf_local(self.to_local(self.center, p), self.radii)
    }

    /// Signed distance (negative inside).
    pub fn sdf(&self, p: Point) -> f64 {
        let outer = self.outer_sdf(p);
        match self.kind {
            PartKind::Ellipsoid => outer,
            PartKind::Shell {
                inner_center,
                inner_radii,
            } => {
                let inner = ellipsoid_sdf_local(self.to_local(inner_center, p), inner_radii);
                outer.max(-inner)
            }
            PartKind::CappedEllipsoid { cap } => outer.max(cap.eval(p)),
        }
    }

    /// Axis-aligned box containing the part.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let ext: f64 = (0..3)
                .map(|j| (self.rotation[a][j] * self.radii[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            lo[a] = self.center[a] - ext;
            hi[a] = self.center[a] + ext;
        }
        (lo, hi)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.sdf(p) < 0.0
    }

    /// `n` points on the surface, uniform by area, deterministic in `rng`.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Point> {
        let mut out = Vec::with_capacity(n);
        match self.kind {
            PartKind::Ellipsoid => {
                while out.len() < n {
                    let q = sample_ellipsoid_local(self.radii, rng);
                    out.push(self.to_world(self.center, q));
                }
            }
            PartKind::Shell {
                inner_center,
                inner_radii,
            } => {
                let ao = ellipsoid_area(self.radii);
                let ai = ellipsoid_area(inner_radii);
                while out.len() < n {
                    if rng.gen::<f64>() * (ao + ai) < ao {
                        let q = sample_ellipsoid_local(self.radii, rng);
                        out.push(self.to_world(self.center, q));
                    } else {
                        let q = sample_ellipsoid_local(inner_radii, rng);
                        out.push(self.to_world(inner_center, q));
                    }
                }
            }
            PartKind::CappedEllipsoid { cap } => {
                let disk = self.cap_disk(cap);
                let shell_area = ellipsoid_area(self.radii) * self.kept_fraction(cap);
                let disk_area = disk.as_ref().map_or(0.0, |d| d.area);
                while out.len() < n {
                    let pick_disk = disk.is_some() && rng.gen::<f64>() * (shell_area + disk_area) >= shell_area;
                    if pick_disk {
                        let d = disk.as_ref().unwrap();
                        loop {
                            let (s, t) = (rng.gen_range(-d.half..d.half), rng.gen_range(-d.half..d.half));
                            let p = vec3::add(d.origin, vec3::add(vec3::scale(d.u, s), vec3::scale(d.v, t)));
                            if self.outer_sdf(p) <= 0.0 {
                                out.push(p);
                                break;
                            }
                        }
                    } else {
                        loop {
                            let p = self.to_world(self.center, sample_ellipsoid_local(self.radii, rng));
                            if cap.eval(p) <= 0.0 {
                                out.push(p);
                                break;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Fraction of the ellipsoid surface on the kept side of the cap,
    /// estimated on a fixed low-discrepancy set so the result is exact
    /// across calls.
    fn kept_fraction(&self, cap: CapPlane) -> f64 {
        const N: usize = 20_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let r = self.radii;
        let (mut total, mut kept) = (0.0, 0.0);
        for i in 0..N {
            // Fibonacci sphere mapped onto the ellipsoid, weighted by the
            // area Jacobian of that map.
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / N as f64;
            let rad = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            let u = [rad * th.cos(), rad * th.sin(), z];
            let w = vec3::norm([u[0] / r[0], u[1] / r[1], u[2] / r[2]]);
            total += w;
            let p = self.to_world(self.center, [u[0] * r[0], u[1] * r[1], u[2] * r[2]]);
            if cap.eval(p) <= 0.0 {
                kept += w;
            }
        }
        kept / total
    }

    fn cap_disk(&self, cap: CapPlane) -> Option<CapDisk> {
        let n = cap.normal;
        let origin = vec3::sub(self.center, vec3::scale(n, cap.eval(self.center)));
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = vec3::normalize(vec3::cross(n, helper));
        let v = vec3::cross(n, u);
        let half = self.radii.iter().cloned().fold(0.0, f64::max);
        // Area by a fixed lattice count over the bounding square.
        const G: usize = 400;
        let step = 2.0 * half / G as f64;
        let mut inside = 0usize;
        for i in 0..G {
            for j in 0..G {
                let s = -half + (i as f64 + 0.5) * step;
                let t = -half + (j as f64 + 0.5) * step;
                let p = vec3::add(origin, vec3::add(vec3::scale(u, s), vec3::scale(v, t)));
                if self.outer_sdf(p) <= 0.0 {
                    inside += 1;
                }
            }
        }
        if inside == 0 {
            return None;
        }
        Some(CapDisk {
            origin,
            u,
            v,
            half,
            area: inside as f64 * step * step,
        })
    }
}

struct CapDisk {
    origin: Point,
    u: Point,
    v: Point,
    half: f64,
    area: f64,
}

/// Uniform-by-area point on an axis-aligned ellipsoid: a uniform direction
/// `u` is mapped to `r⊙u` and accepted with probability proportional to
/// the area Jacobian `|u⊘r|`.
fn sample_ellipsoid_local(r: Point, rng: &mut impl Rng) -> Point {
    let rmin = r[0].min(r[1]).min(r[2]);
    loop {
        let u = unit_vector(rng);
        let w = vec3::norm([u[0] / r[0], u[1] / r[1], u[2] / r[2]]) * rmin;
        if rng.gen::<f64>() < w {
            return [u[0] * r[0], u[1] * r[1], u[2] * r[2]];
        }
    }
}

fn unit_vector(rng: &mut impl Rng) -> Point {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2 = vec3::dot(v, v);
        if n2 > 1e-12 && n2 <= 1.0 {
            return vec3::scale(v, 1.0 / n2.sqrt());
        }
    }
}

/// Knud Thomsen's approximation of the ellipsoid surface area (≈1% error).
pub fn ellipsoid_area(r: Point) -> f64 {
    const P: f64 = 1.6075;
    let [a, b, c] = [r[0].powf(P), r[1].powf(P), r[2].powf(P)];
    4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / P)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Distance to an axis-aligned ellipsoid by dense parametric search,
    /// refined locally.
    fn brute_distance(q: Point, r: Point) -> f64 {
        let surf = |th: f64, ph: f64| [r[0] * th.sin() * ph.cos(), r[1] * th.sin() * ph.sin(), r[2] * th.cos()];
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let n = 400;
        for i in 0..=n {
            for j in 0..(2 * n) {
                let th = std::f64::consts::PI * i as f64 / n as f64;
                let ph = std::f64::consts::PI * j as f64 / n as f64;
                let d = vec3::dist2(q, surf(th, ph));
                if d < best.0 {
                    best = (d, th, ph);
                }
            }
        }
        let mut h = std::f64::consts::PI / n as f64;
        for _ in 0..40 {
            let (_, th, ph) = best;
            for (dt, dp) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
                let d = vec3::dist2(q, surf(th + dt, ph + dp));
                if d < best.0 {
                    best = (d, th + dt, ph + dp);
                }
            }
            h *= 0.7;
        }
        best.0.sqrt()
    }

    #[test]
    fn sphere_values() {
        let s = AnalyticPart::sphere([0.0; 3], 1.0);
        assert_eq!(s.sdf([0.0; 3]), -1.0);
        assert!((s.sdf([2.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((s.sdf([0.3, -0.4, 0.0]) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn shell_value() {
        let s = AnalyticPart::shell([0.0; 3], [1.0; 3], [0.0; 3], [0.8; 3], vec3::IDENTITY);
        assert!((s.sdf([0.9, 0.0, 0.0]) + 0.1).abs() < 1e-12);
        assert!((s.sdf([0.0; 3]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ellipsoid_accuracy_near_surface() {
        let r = [0.42, 0.35, 0.6];
        let rmin = 0.35;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..60 {
            let u = unit_vector(&mut rng);
            let on = [u[0] * r[0], u[1] * r[1], u[2] * r[2]];
            let s = rng.gen_range(0.7..1.3);
            let q = vec3::scale(on, s);
            let truth = brute_distance(q, r) * if s < 1.0 { -1.0 } else { 1.0 };
            let got = ellipsoid_sdf_local(q, r);
            assert!((got - truth).abs() < 0.01 * rmin, "q={q:?} got {got} truth {truth}");
        }
    }

    #[test]
    fn validation() {
        assert!(AnalyticPart::sphere([0.0; 3], 1.0).validate().is_ok());
        assert!(AnalyticPart::sphere([0.0; 3], -1.0).validate().is_err());
        let bad = AnalyticPart::shell([0.0; 3], [1.0; 3], [0.0; 3], [1.2, 0.5, 0.5], vec3::IDENTITY);
        assert!(bad.validate().is_err());
        let mut rot = vec3::IDENTITY;
        rot[0][0] = 1.01;
        assert!(AnalyticPart::ellipsoid([0.0; 3], [1.0; 3], rot).validate().is_err());
    }

    #[test]
    fn sphere_samples_on_surface_and_centered() {
        let s = AnalyticPart::sphere([0.0; 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = s.sample_surface(100_000, &mut rng);
        assert!(pts.iter().all(|p| (vec3::norm(*p) - 1.0).abs() < 1e-5));
        let c = pts.iter().fold([0.0; 3], |a, p| vec3::add(a, *p));
        assert!(vec3::norm(vec3::scale(c, 1e-5)) < 0.02);
    }

    #[test]
    fn capped_and_shell_samples_have_zero_sdf() {
        let rot = vec3::axis_angle([0.3, 1.0, 0.2], 0.7);
        let parts = [
            AnalyticPart::shell([0.1, 0.0, 0.0], [0.5, 0.45, 0.7], [0.1, 0.0, 0.02], [0.3, 0.3, 0.5], rot),
            AnalyticPart::capped(
                [0.0, 0.2, 0.0],
                [0.3, 0.35, 0.5],
                rot,
                CapPlane {
                    normal: [-1.0, 0.0, 0.0],
                    offset: 0.1,
                },
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in parts {
            p.validate().unwrap();
            for q in p.sample_surface(2000, &mut rng) {
                assert!(p.sdf(q).abs() < 1e-5, "{q:?} -> {}", p.sdf(q));
            }
        }
    }

    #[test]
    fn area_of_sphere() {
        let a = ellipsoid_area([2.0; 3]);
        assert!((a - 16.0 * std::f64::consts::PI).abs() < 1e-9);
    }
}
