use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DemoError;
use crate::sim::{ActionCommand, Simulator, WorldState};

/// Stateless waypoint controller: the phase is read off the world state.
///
/// approach above the grasp region, descend, close, lift, carry over the
/// zone, open, return home. Each position command is the next reachable
/// point on the way to the current waypoint, so recorded actions form a
/// dense trajectory; the width command is the waypoint's own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedExpert {
    pub approach_z: f64,
    pub grasp_z: f64,
    pub carry_z: f64,
    /// Radius of the per-episode waypoint perturbation.
    pub waypoint_noise: f64,
    /// Commanded opening during a grasp is `g_width - close_margin`.
    pub close_margin: f64,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self {
            approach_z: 0.10,
            grasp_z: 0.01,
            carry_z: 0.10,
            waypoint_noise: 0.002,
            close_margin: 0.01,
        }
    }
}

const AT: f64 = 1e-9;

fn disc_offset(rng: &mut ChaCha8Rng, r: f64) -> [f64; 2] {
    let rad = r * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [rad * a.cos(), rad * a.sin()]
}

impl ScriptedExpert {
    /// Grasp and drop waypoint offsets for this episode.
    fn offsets(&self, seed: u64) -> ([f64; 2], [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE4_9E27);
        if self.waypoint_noise <= 0.0 {
            return ([0.0; 2], [0.0; 2]);
        }
        let g = disc_offset(&mut rng, self.waypoint_noise);
        let d = disc_offset(&mut rng, self.waypoint_noise);
        (g, d)
    }

    pub fn act(&self, sim: &Simulator, state: &WorldState) -> Result<ActionCommand, DemoError> {
        let w = self.waypoint(sim, state)?;
        let step = sim.catalog().tolerances.max_step;
        let [gx, gy, gz] = state.gripper.position;
        let toward = |p: f64, goal: f64| p + (goal - p).clamp(-step, step);
        Ok(ActionCommand {
            x: toward(gx, w.x),
            y: toward(gy, w.y),
            z: toward(gz, w.z),
            width: w.width,
        })
    }

    /// The current phase's goal pose and opening.
    pub fn waypoint(&self, sim: &Simulator, state: &WorldState) -> Result<ActionCommand, DemoError> {
        let tol = sim.catalog().tolerances;
        let g = &state.gripper;
        let [gx, gy, gz] = g.position;
        let target = state.target();
        let (grasp_off, drop_off) = self.offsets(state.rng_seed);
        let cmd = |x: f64, y: f64, z: f64, width: f64| ActionCommand { x, y, z, width };
        let near = |x: f64, y: f64| (gx - x).abs() <= AT && (gy - y).abs() <= AT;

        if sim.task_success(state) {
            let [hx, hy, hz] = tol.home;
            return Ok(cmd(hx, hy, hz, tol.width_max));
        }

        let closed = (target.spec.grasp_width() - self.close_margin).max(0.0);
        if g.holding == Some(target.spec.id) {
            let [zx, zy] = state.task.target_zone.center();
            // Drop so that the item centroid lands on the zone center.
            let [ox, oy] = g.hold_offset;
            let (dx, dy) = (zx - ox + drop_off[0], zy - oy + drop_off[1]);
            if near(dx, dy) {
                return Ok(cmd(dx, dy, gz, tol.width_max));
            }
            if gz < self.carry_z - AT {
                return Ok(cmd(gx, gy, self.carry_z, closed));
            }
            return Ok(cmd(dx, dy, self.carry_z, closed));
        }
        if g.holding.is_some() {
            // Wrong item: put it back down where it is.
            return Ok(cmd(gx, gy, gz, tol.width_max));
        }

        let ([cx, cy], _) = target.grasp_region_world();
        let (tx, ty) = (cx + grasp_off[0], cy + grasp_off[1]);
        let [x0, x1, y0, y1] = tol.workspace;
        if !(x0..=x1).contains(&tx) || !(y0..=y1).contains(&ty) {
            return Err(DemoError::ExpertFailure(format!(
                "grasp point ({tx:.3}, {ty:.3}) outside the workspace"
            )));
        }
        if !near(tx, ty) {
            if gz < self.approach_z - AT && g.width < tol.width_max {
                // Reopen and rise after a missed grasp before repositioning.
                return Ok(cmd(gx, gy, self.approach_z, tol.width_max));
            }
            return Ok(cmd(tx, ty, self.approach_z, tol.width_max));
        }
        if gz > self.grasp_z + AT {
            return Ok(cmd(tx, ty, self.grasp_z, tol.width_max));
        }
        Ok(cmd(tx, ty, self.grasp_z, closed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ItemId, TaskFamily};

    #[test]
    fn holding_target_over_zone_commands_open() {
        let sim = Simulator::default();
        let ex = ScriptedExpert {
            waypoint_noise: 0.0,
            ..Default::default()
        };
        let mut s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let [zx, zy] = s.task.target_zone.center();
        s.gripper.holding = Some(s.task.target_item);
        s.gripper.hold_offset = [0.0, 0.0];
        s.gripper.position = [zx, zy, 0.1];
        s.gripper.width = 0.0;
        s.items[0].pose = [zx, zy];
        let a = ex.act(&sim, &s).unwrap();
        assert_eq!(a.width, sim.catalog().tolerances.width_max);
        assert_eq!([a.x, a.y], [zx, zy]);
    }

    #[test]
    fn first_action_heads_toward_target() {
        let sim = Simulator::default();
        let ex = ScriptedExpert::default();
        let task = sim.task(TaskFamily::PickGoods, 0, Some(ItemId(11))).unwrap();
        let s = sim.reset(&task, 0).unwrap();
        let a = ex.act(&sim, &s).unwrap();
        let n = sim.step(&s, &a).unwrap();
        assert!(n.gripper.position[0] < s.gripper.position[0]);
    }
}
