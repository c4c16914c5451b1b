use super::part::AnalyticPart;
use super::vec3::Point;
use super::GeometryError;

/// Sample points lying within `tau` of at least two parts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactSet {
    pub points: Vec<Point>,
    /// Indices of the parts near each point, ascending, at least two.
    pub parts: Vec<Vec<usize>>,
}

impl ContactSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points whose part set contains both `a` and `b`.
    pub fn between(&self, a: usize, b: usize) -> usize {
        self.parts.iter().filter(|s| s.contains(&a) && s.contains(&b)).count()
    }
}

pub fn contact_regions(parts: &[AnalyticPart], samples: &[Point], tau: f64) -> Result<ContactSet, GeometryError> {
    if parts.len() < 2 {
        return Err(GeometryError::InvalidPart(format!("{} parts, need at least 2", parts.len())));
    }
    let mut out = ContactSet::default();
    for &q in samples {
        let near: Vec<usize> = (0..parts.len()).filter(|&p| parts[p].sdf(q).abs() < tau).collect();
        if near.len() >= 2 {
            out.points.push(q);
            out.parts.push(near);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_and_tangent_spheres() {
        let far = [AnalyticPart::sphere([0.0; 3], 1.0), AnalyticPart::sphere([20.0, 0.0, 0.0], 1.0)];
        let pts = [[1.0, 0.0, 0.0], [19.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert!(contact_regions(&far, &pts, 1.0).unwrap().is_empty());

        let touching = [AnalyticPart::sphere([-1.0, 0.0, 0.0], 1.0), AnalyticPart::sphere([1.0, 0.0, 0.0], 1.0)];
        let c = contact_regions(&touching, &[[0.0; 3], [0.0, 0.5, 0.0]], 0.1).unwrap();
        assert_eq!(c.points, vec![[0.0; 3]]);
        assert_eq!(c.parts, vec![vec![0, 1]]);
        assert!(contact_regions(&touching[..1], &[[0.0; 3]], 0.1).is_err());
    }
}
