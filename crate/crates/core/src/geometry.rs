//! Planar point-set geometry: Hausdorff distances, formation templates, and
//! the point-to-point (fixed assignment) baseline metric.

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{N_MAX, N_MIN};

/// A position (or displacement) in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite(), "non-finite point ({x}, {y})");
        Self { x, y }
    }

    pub fn try_new(x: f64, y: f64) -> Result<Self> {
        for v in [x, y] {
            if !v.is_finite() {
                return Err(Error::InvalidValue {
                    what: "point coordinate",
                    value: v,
                });
            }
        }
        Ok(Self { x, y })
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

pub fn euclidean_distance(a: Point2, b: Point2) -> f64 {
    (a - b).norm()
}

/// A non-empty ordered list of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct PointSet(Vec<Point2>);

impl PointSet {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.0.len() as f64;
        let (sx, sy) = self.0.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point2::new(sx / n, sy / n)
    }

    pub fn translate(&self, by: Point2) -> PointSet {
        PointSet(self.0.iter().map(|&p| p + by).collect())
    }
}

impl TryFrom<Vec<Point2>> for PointSet {
    type Error = Error;
    fn try_from(v: Vec<Point2>) -> Result<Self> {
        PointSet::new(v)
    }
}

impl From<PointSet> for Vec<Point2> {
    fn from(s: PointSet) -> Self {
        s.0
    }
}

/// max over `a` of the distance to the closest point of `b`.
pub fn directed_hausdorff(a: &[Point2], b: &[Point2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut worst = 0.0f64;
    for &p in a {
        let mut best = f64::INFINITY;
        for &q in b {
            best = best.min(euclidean_distance(p, q));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Symmetric Hausdorff distance: the larger of the two directed distances.
pub fn hausdorff(a: &[Point2], b: &[Point2]) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Splits positions into their centroid and the centroid-relative offsets.
pub fn centroid_relative(positions: &[Point2]) -> Result<(Point2, PointSet)> {
    let set = PointSet::new(positions.to_vec())?;
    let c = set.centroid();
    let rel = PointSet(set.0.iter().map(|&p| p - c).collect());
    Ok((c, rel))
}

/// A centroid-centered target formation for `n` agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationTemplate {
    pub n: usize,
    pub points: PointSet,
}

impl FormationTemplate {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("template serializes")
    }
}

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Raw template coordinates, nearest-neighbor spacing 1.0 m.
///
/// | n | shape                                   |
/// |---|-----------------------------------------|
/// | 5 | wedge: apex plus two trailing arms      |
/// | 6 | two-row wedge: 2 in front, 4 behind     |
/// | 7 | hexagon around a center agent           |
/// | 8 | two diamonds side by side               |
fn raw_template(n: usize) -> Vec<[f64; 2]> {
    match n {
        5 => vec![
            [0.0, 0.0],
            [-SQRT_HALF, -SQRT_HALF],
            [SQRT_HALF, -SQRT_HALF],
            [-2.0 * SQRT_HALF, -2.0 * SQRT_HALF],
            [2.0 * SQRT_HALF, -2.0 * SQRT_HALF],
        ],
        6 => vec![
            [-0.5, 0.0],
            [0.5, 0.0],
            [-1.5, -1.0],
            [-0.5, -1.0],
            [0.5, -1.0],
            [1.5, -1.0],
        ],
        7 => {
            let mut pts = vec![[0.0, 0.0]];
            for k in 0..6 {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::FRAC_PI_3;
                pts.push([a.cos(), a.sin()]);
            }
            pts
        }
        8 => {
            // inner vertices of the two diamonds are 1 m apart
            let c = 0.5 + SQRT_HALF;
            let mut pts = Vec::with_capacity(8);
            for cx in [-c, c] {
                pts.push([cx - SQRT_HALF, 0.0]);
                pts.push([cx + SQRT_HALF, 0.0]);
                pts.push([cx, SQRT_HALF]);
                pts.push([cx, -SQRT_HALF]);
            }
            pts
        }
        _ => unreachable!("checked by caller"),
    }
}

pub fn formation_template(n: usize) -> Result<FormationTemplate> {
    if !(N_MIN..=N_MAX).contains(&n) {
        return Err(Error::AgentCountOutOfRange {
            n,
            min: N_MIN,
            max: N_MAX,
        });
    }
    let raw: Vec<Point2> = raw_template(n).into_iter().map(Point2::from).collect();
    let (_, points) = centroid_relative(&raw)?;
    Ok(FormationTemplate { n, points })
}

/// Point-to-point formation reward: agent `k` is scored against template
/// point `k`, with the same lag recursion as the Hausdorff formation reward.
pub fn ptp_reward(
    relative: &[Point2],
    template: &FormationTemplate,
    prev: f64,
    lag: f64,
) -> Result<f64> {
    if relative.len() != template.n {
        return Err(Error::SizeMismatch {
            what: "agents vs template points",
            expected: template.n,
            got: relative.len(),
        });
    }
    let total: f64 = relative
        .iter()
        .zip(template.points.points())
        .map(|(&p, &q)| euclidean_distance(p, q))
        .sum();
    Ok(-total / template.n as f64 - lag * prev)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Point2> {
        v.iter().copied().map(Point2::from).collect()
    }

    #[test]
    fn distances() {
        assert_eq!(euclidean_distance(Point2::ORIGIN, Point2::ORIGIN), 0.0);
        assert_eq!(euclidean_distance(Point2::ORIGIN, Point2::new(3.0, 4.0)), 5.0);
        assert_eq!(
            euclidean_distance(Point2::new(1.0, 1.0), Point2::new(-2.0, 5.0)),
            5.0
        );
    }

    #[test]
    fn directed_and_symmetric_hausdorff() {
        let same = pts(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(directed_hausdorff(&same, &same).unwrap(), 0.0);
        let a = pts(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = pts(&[[0.0, 0.0], [0.0, 2.0]]);
        assert_eq!(directed_hausdorff(&a, &b).unwrap(), 1.0);
        assert_eq!(directed_hausdorff(&b, &a).unwrap(), 2.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 2.0);
        assert_eq!(hausdorff(&same, &same).unwrap(), 0.0);
        assert_eq!(
            hausdorff(&pts(&[[0.0, 0.0]]), &pts(&[[3.0, 4.0]])).unwrap(),
            5.0
        );
    }

    #[test]
    fn empty_sets_are_rejected() {
        let a = pts(&[[0.0, 0.0]]);
        assert!(matches!(directed_hausdorff(&a, &[]), Err(Error::EmptyPointSet)));
        assert!(matches!(hausdorff(&[], &a), Err(Error::EmptyPointSet)));
        assert!(matches!(centroid_relative(&[]), Err(Error::EmptyPointSet)));
        assert!(PointSet::new(vec![]).is_err());
    }

    #[test]
    fn centroid_relative_examples() {
        let (c, rel) = centroid_relative(&pts(&[[1.0, 1.0]])).unwrap();
        assert_eq!(c, Point2::new(1.0, 1.0));
        assert_eq!(rel.points(), &pts(&[[0.0, 0.0]])[..]);

        let (c, rel) = centroid_relative(&pts(&[[0.0, 0.0], [2.0, 0.0]])).unwrap();
        assert_eq!(c, Point2::new(1.0, 0.0));
        assert_eq!(rel.points(), &pts(&[[-1.0, 0.0], [1.0, 0.0]])[..]);
    }

    #[test]
    fn templates_satisfy_postconditions() {
        for n in N_MIN..=N_MAX {
            let t = formation_template(n).unwrap();
            assert_eq!(t.n, n);
            assert_eq!(t.points.len(), n);
            let c = t.points.centroid();
            assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9, "n={n} centroid {c:?}");
            let p = t.points.points();
            let mut nearest = f64::INFINITY;
            for i in 0..n {
                for j in i + 1..n {
                    nearest = nearest.min(euclidean_distance(p[i], p[j]));
                }
            }
            assert!(nearest >= 2.0 * 0.15, "n={n} nearest {nearest}");
            assert!((nearest - 1.0).abs() < 1e-9, "n={n} spacing {nearest}");
        }
        assert!(matches!(
            formation_template(4),
            Err(Error::AgentCountOutOfRange { n: 4, .. })
        ));
        assert!(formation_template(9).is_err());
    }

    #[test]
    fn template_json_layout() {
        let t = formation_template(5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["n"], 5);
        assert_eq!(v["points"].as_array().unwrap().len(), 5);
        assert_eq!(v["points"][0].as_array().unwrap().len(), 2);
        let back: FormationTemplate = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ptp_examples() {
        let t = formation_template(5).unwrap();
        let exact = t.points.points().to_vec();
        assert_eq!(ptp_reward(&exact, &t, 0.0, 0.9).unwrap(), 0.0);

        let shifted: Vec<Point2> = exact.iter().map(|&p| p + Point2::new(1.0, 0.0)).collect();
        assert!((ptp_reward(&shifted, &t, 0.0, 0.9).unwrap() + 1.0).abs() < 1e-12);
        assert!((ptp_reward(&shifted, &t, -1.0, 0.9).unwrap() + 0.1).abs() < 1e-12);

        assert!(matches!(
            ptp_reward(&exact[..4], &t, 0.0, 0.9),
            Err(Error::SizeMismatch { .. })
        ));
    }
}
