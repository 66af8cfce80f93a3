use rand::RngExt;

use super::{clip_unit, EnvId, Environment};
use crate::seed::DecilRng;

/// A robot drives to a goal while a scripted agent crosses its path.
///
/// State `(robot_x, robot_y, goal_x, goal_y, agent_x, agent_y)`. The robot
/// moves left to right towards a goal near `(4, 0)` (both goal coordinates jittered so neither is constant in the data); the agent walks along
/// `+y` at constant speed across the robot's nominal path near `x = 2`.
/// Actions are robot velocities clipped to the unit disc.
#[derive(Debug, Clone)]
pub struct PointmassCrossingEnv {
    pub dt: f64,
    pub horizon: usize,
    pub agent_velocity: [f64; 2],
    pub attraction_gain: f64,
    pub repulsion_gain: f64,
    pub repulsion_radius: f64,
    pub collision_radius: f64,
    pub goal_tolerance: f64,
    pub collision_penalty: f64,
}

impl Default for PointmassCrossingEnv {
    fn default() -> Self {
        PointmassCrossingEnv {
            dt: 0.1,
            horizon: 80,
            agent_velocity: [0.0, 0.5],
            attraction_gain: 2.0,
            repulsion_gain: 1.5,
            repulsion_radius: 0.5,
            collision_radius: 0.2,
            goal_tolerance: 0.1,
            collision_penalty: 10.0,
        }
    }
}

impl PointmassCrossingEnv {
    pub fn goal_distance(x: &[f64]) -> f64 {
        (x[0] - x[2]).hypot(x[1] - x[3])
    }

    pub fn agent_distance(x: &[f64]) -> f64 {
        (x[0] - x[4]).hypot(x[1] - x[5])
    }

    pub fn in_collision(&self, x: &[f64]) -> bool {
        Self::agent_distance(x) < self.collision_radius
    }
}

impl Environment for PointmassCrossingEnv {
    fn id(&self) -> EnvId {
        EnvId::PointmassCrossing
    }

    fn state_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let a = clip_unit([a[0], a[1]]);
        vec![
            x[0] + self.dt * a[0],
            x[1] + self.dt * a[1],
            x[2],
            x[3],
            x[4] + self.dt * self.agent_velocity[0],
            x[5] + self.dt * self.agent_velocity[1],
        ]
    }

    fn initial_state(&self, rng: &mut DecilRng) -> Vec<f64> {
        vec![
            0.0,
            rng.random_range(-0.2..0.2),
            4.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            2.0 + rng.random_range(-0.3..0.3),
            -1.3 + rng.random_range(-0.6..0.6),
        ]
    }

    /// Saturated proportional pull towards the goal plus a push away from the
    /// agent of magnitude `gain * (radius / dist - 1)` inside the radius.
    fn expert_action(&self, x: &[f64]) -> Vec<f64> {
        let mut a = clip_unit([
            self.attraction_gain * (x[2] - x[0]),
            self.attraction_gain * (x[3] - x[1]),
        ]);
        let (dx, dy) = (x[0] - x[4], x[1] - x[5]);
        let dist = dx.hypot(dy);
        if dist < self.repulsion_radius && dist > 0.0 {
            let push = self.repulsion_gain * (self.repulsion_radius / dist - 1.0);
            a[0] += push * dx / dist;
            a[1] += push * dy / dist;
        }
        clip_unit(a).to_vec()
    }

    fn reward(&self, x: &[f64], _a: &[f64]) -> f64 {
        let penalty = if self.in_collision(x) {
            self.collision_penalty
        } else {
            0.0
        };
        -Self::goal_distance(x) - penalty
    }

    fn success(&self, states: &[Vec<f64>]) -> bool {
        let collided = states.iter().any(|x| self.in_collision(x));
        let reached = states
            .iter()
            .take(self.horizon + 1)
            .any(|x| Self::goal_distance(x) < self.goal_tolerance);
        reached && !collided
    }
}
