//! Shared team reward: formation (Hausdorff or point-to-point), navigation,
//! and collision terms with lagged recursions on the first two.

use serde::{Deserialize, Serialize};

use super::WorldState;
use crate::error::{Error, Result};
use crate::geometry::{centroid_relative, euclidean_distance, hausdorff, ptp_reward, FormationTemplate, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// formation lag coefficient
    pub omega1: f64,
    /// navigation lag coefficient
    pub omega2: f64,
    pub omega_f: f64,
    pub omega_v: f64,
    pub omega_c: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            omega1: 0.9,
            omega2: 0.7,
            omega_f: 10.0,
            omega_v: 5.0,
            omega_c: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormationMetric {
    #[default]
    Hd,
    Ptp,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub r_f: f64,
    pub r_v: f64,
    pub r_c: f64,
}

pub fn total_reward(c: RewardComponents, w: &RewardWeights) -> f64 {
    w.omega_f * c.r_f + w.omega_v * c.r_v - w.omega_c * c.r_c
}

/// Hausdorff distance between the active agents' centroid-relative positions
/// and the template.
pub fn formation_distance(state: &WorldState, template: &FormationTemplate) -> Result<f64> {
    let pos = state.active_positions();
    let (_, rel) = centroid_relative(&pos)?;
    hausdorff(rel.points(), template.points.points())
}

/// `-d_HD(P, template) - omega1 * prev`, storing the result as the new lag.
pub fn formation_reward(state: &mut WorldState, template: &FormationTemplate, omega1: f64) -> Result<f64> {
    let r = -formation_distance(state, template)? - omega1 * state.prev_r_f;
    state.prev_r_f = r;
    Ok(r)
}

/// Point-to-point variant of [`formation_reward`]; active agent `k` (in index
/// order) is assigned template point `k`.
pub fn ptp_formation_reward(state: &mut WorldState, template: &FormationTemplate, omega1: f64) -> Result<f64> {
    let pos = state.active_positions();
    let (_, rel) = centroid_relative(&pos)?;
    let r = ptp_reward(rel.points(), template, state.prev_r_f, omega1)?;
    state.prev_r_f = r;
    Ok(r)
}

pub fn navigation_reward(state: &mut WorldState, destination: Point2, omega2: f64) -> Result<f64> {
    let pos = state.active_positions();
    if pos.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let (c, _) = centroid_relative(&pos)?;
    let r = -euclidean_distance(c, destination) - omega2 * state.prev_r_v;
    state.prev_r_v = r;
    Ok(r)
}

/// Number of ordered active pairs closer than `delta_safe`.
pub fn collision_penalty(state: &WorldState, delta_safe: f64) -> usize {
    let pos = state.active_positions();
    let mut count = 0;
    for (i, &a) in pos.iter().enumerate() {
        for (j, &b) in pos.iter().enumerate() {
            if i != j && euclidean_distance(a, b) < delta_safe {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::AgentState;
    use crate::geometry::formation_template;

    fn state_at(points: &[Point2]) -> WorldState {
        let mut agents = vec![AgentState::default(); 8];
        for (a, &p) in agents.iter_mut().zip(points) {
            a.position = p;
            a.active = true;
        }
        WorldState {
            agents,
            outbox: vec![Vec::new(); 8],
            t: 0,
            prev_r_f: 0.0,
            prev_r_v: 0.0,
        }
    }

    fn pair_template() -> FormationTemplate {
        FormationTemplate {
            n: 2,
            points: crate::geometry::PointSet::new(vec![Point2::new(-1.0, 0.0), Point2::new(1.0, 0.0)]).unwrap(),
        }
    }

    #[test]
    fn formation_reward_examples() {
        let t = formation_template(5).unwrap();
        let offset = Point2::new(3.0, -2.0);
        let exact: Vec<Point2> = t.points.points().iter().map(|&p| p + offset).collect();
        let mut s = state_at(&exact);
        assert!(formation_reward(&mut s, &t, 0.9).unwrap().abs() < 1e-12);

        // relative positions (-3,0),(3,0) against (-1,0),(1,0): HD = 2
        let pair = pair_template();
        let mut s = state_at(&[Point2::new(2.0, 5.0), Point2::new(8.0, 5.0)]);
        assert!((formation_distance(&s, &pair).unwrap() - 2.0).abs() < 1e-12);
        assert!((formation_reward(&mut s, &pair, 0.9).unwrap() + 2.0).abs() < 1e-12);
        assert!((formation_reward(&mut s, &pair, 0.9).unwrap() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn lag_recursion_converges() {
        let pair = pair_template();
        let mut s = state_at(&[Point2::new(2.0, 5.0), Point2::new(8.0, 5.0)]);
        let mut r = 0.0;
        for _ in 0..200 {
            r = formation_reward(&mut s, &pair, 0.9).unwrap();
        }
        assert!((r + 2.0 / 1.9).abs() < 1e-6);
    }

    #[test]
    fn formation_reward_with_known_distance() {
        // five agents collapsed on one point: HD = farthest template point
        let t = formation_template(5).unwrap();
        let far = t
            .points
            .points()
            .iter()
            .map(|p| p.norm())
            .fold(0.0, f64::max);
        let mut s = state_at(&[Point2::new(1.0, 1.0); 5]);
        let r = formation_reward(&mut s, &t, 0.9).unwrap();
        assert!((r + far).abs() < 1e-12);
        assert_eq!(s.prev_r_f, r);
        let r2 = formation_reward(&mut s, &t, 0.9).unwrap();
        assert!((r2 - (-far - 0.9 * r)).abs() < 1e-12);
    }

    #[test]
    fn navigation_reward_examples() {
        let dest = Point2::new(0.0, 10.0);
        let mut s = state_at(&[Point2::new(-1.0, 10.0), Point2::new(1.0, 10.0)]);
        assert!(navigation_reward(&mut s, dest, 0.7).unwrap().abs() < 1e-12);

        let mut s = state_at(&[Point2::new(-1.0, 9.0), Point2::new(1.0, 9.0)]);
        assert!((navigation_reward(&mut s, dest, 0.7).unwrap() + 1.0).abs() < 1e-12);
        assert!((navigation_reward(&mut s, dest, 0.7).unwrap() + 0.3).abs() < 1e-12);
    }

    #[test]
    fn collision_counts_ordered_pairs() {
        let far = state_at(&[Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)]);
        assert_eq!(collision_penalty(&far, 0.15), 0);
        let pair = state_at(&[Point2::new(0.0, 0.0), Point2::new(0.1, 0.0), Point2::new(0.0, 1.0)]);
        assert_eq!(collision_penalty(&pair, 0.15), 2);
        let triple = state_at(&[Point2::new(0.0, 0.0), Point2::new(0.05, 0.0), Point2::new(0.0, 0.05)]);
        assert_eq!(collision_penalty(&triple, 0.15), 6);
    }

    #[test]
    fn total_reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(total_reward(RewardComponents::default(), &w), 0.0);
        let c = RewardComponents {
            r_f: -1.0,
            r_v: -1.0,
            r_c: 2.0,
        };
        assert_eq!(total_reward(c, &w), -27.0);
        let worse = RewardComponents { r_c: 3.0, ..c };
        assert!(total_reward(worse, &w) < total_reward(c, &w));
    }
}
