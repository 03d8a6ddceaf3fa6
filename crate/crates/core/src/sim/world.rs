use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::render;
use super::{
    ActionCommand, CameraModel, Catalog, GripperState, Image, ItemId, PlacedItem, SimError, SimEvent, TaskFamily,
    TaskSpec, WorldState,
};
use crate::detect::GraspBox;

/// Stateless stepping engine over a fixed catalog.
#[derive(Debug, Clone)]
pub struct Simulator {
    catalog: Catalog,
    cameras: Vec<CameraModel>,
}

impl Default for Simulator {
    fn default() -> Self {
        Self::new(Catalog::default())
    }
}

impl Simulator {
    pub fn new(catalog: Catalog) -> Self {
        let cameras = CameraModel::views(&catalog.camera, catalog.tolerances.workspace);
        Self { catalog, cameras }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    /// Items that can be the target of `family`, in catalog order.
    pub fn candidate_targets(&self, family: TaskFamily) -> Vec<ItemId> {
        match family {
            TaskFamily::PickBig => vec![self.catalog.pick_big.items[0]],
            TaskFamily::PickCup => self.catalog.pick_cup.items.clone(),
            TaskFamily::PickGoods => self.catalog.pick_goods.items.clone(),
        }
    }

    /// Builds a validated task. `target` defaults to the first candidate.
    pub fn task(&self, family: TaskFamily, placement_id: u32, target: Option<ItemId>) -> Result<TaskSpec, SimError> {
        let candidates = self.candidate_targets(family);
        let target_item = target.unwrap_or(candidates[0]);
        let target_zone = match family {
            TaskFamily::PickBig => self.catalog.pick_big.zone,
            TaskFamily::PickCup => self.catalog.pick_cup.zone,
            TaskFamily::PickGoods => self.catalog.pick_goods.zone,
        };
        let task = TaskSpec {
            family,
            placement_id,
            target_item,
            target_zone,
            prompt_box: None,
        };
        self.validate_task(&task)?;
        Ok(task)
    }

    pub fn validate_task(&self, task: &TaskSpec) -> Result<(), SimError> {
        let n = task.family.placement_count();
        if task.placement_id >= n {
            return Err(SimError::InvalidTask(format!(
                "{} placement {} outside 0..{n}",
                task.family, task.placement_id
            )));
        }
        if !self.candidate_targets(task.family).contains(&task.target_item) {
            return Err(SimError::InvalidTask(format!(
                "{} is not a valid {} target",
                task.target_item, task.family
            )));
        }
        Ok(())
    }

    pub fn reset(&self, task: &TaskSpec, seed: u64) -> Result<WorldState, SimError> {
        self.validate_task(task)?;
        let cat = &self.catalog;
        let family_tag = task.family as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (family_tag << 40) ^ task.placement_id as u64,
        );
        let p = task.placement_id as usize;
        let (placed, jitter): (Vec<(ItemId, [f64; 2])>, f64) = match task.family {
            TaskFamily::PickBig => {
                let l = &cat.pick_big;
                (vec![(l.items[0], l.placements[p][0]), (l.items[1], l.placements[p][1])], l.jitter)
            }
            TaskFamily::PickCup => {
                let l = &cat.pick_cup;
                (vec![(task.target_item, l.placements[p])], l.jitter)
            }
            TaskFamily::PickGoods => {
                let l = &cat.pick_goods;
                (l.items.iter().copied().zip(l.positions.iter().copied()).collect(), l.jitter)
            }
        };
        let mut items = Vec::with_capacity(placed.len());
        for (id, [x, y]) in placed {
            let spec = cat
                .item(id)
                .ok_or_else(|| SimError::InvalidTask(format!("unknown {id}")))?
                .clone();
            let (dx, dy) = if jitter > 0.0 {
                // Uniform on the disc of radius `jitter`.
                let r = jitter * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (r * a.cos(), r * a.sin())
            } else {
                (0.0, 0.0)
            };
            let pose = self.clamp_xy([x + dx, y + dy]);
            items.push(PlacedItem { spec, pose });
        }
        let t = &cat.tolerances;
        Ok(WorldState {
            items,
            gripper: GripperState {
                position: t.home,
                width: t.width_max,
                commanded_width: t.width_max,
                holding: None,
                hold_offset: [0.0, 0.0],
            },
            task: task.clone(),
            step_count: 0,
            rng_seed: seed,
            events: Vec::new(),
        })
    }

    fn clamp_xy(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let [x0, x1, y0, y1] = self.catalog.tolerances.workspace;
        [x.clamp(x0, x1), y.clamp(y0, y1)]
    }

    /// Clamps an action to the workspace and actuator limits.
    pub fn clamp_action(&self, a: &ActionCommand) -> ActionCommand {
        let t = &self.catalog.tolerances;
        let [x, y] = self.clamp_xy([a.x, a.y]);
        ActionCommand {
            x,
            y,
            z: a.z.clamp(0.0, t.z_max),
            width: a.width.clamp(0.0, t.width_max),
        }
    }

    pub fn step(&self, state: &WorldState, action: &ActionCommand) -> Result<WorldState, SimError> {
        if !action.is_finite() {
            return Err(SimError::InvalidAction(format!("non-finite component in {action:?}")));
        }
        let t = self.catalog.tolerances;
        let target = self.clamp_action(action);
        let mut next = state.clone();
        let g = &mut next.gripper;
        let goal = [target.x, target.y, target.z];
        for (p, goal) in g.position.iter_mut().zip(goal) {
            *p += (goal - *p).clamp(-t.max_step, t.max_step);
        }
        let prev_width = g.width;
        g.width += (target.width - g.width).clamp(-t.width_rate, t.width_rate);
        g.commanded_width = target.width;
        next.step_count += 1;
        let step = next.step_count;

        if let Some(id) = next.gripper.holding {
            let [gx, gy, _] = next.gripper.position;
            let [ox, oy] = next.gripper.hold_offset;
            let pose = self.clamp_xy([gx + ox, gy + oy]);
            if let Some(item) = next.items.iter_mut().find(|i| i.spec.id == id) {
                item.pose = pose;
            }
        }

        let width = next.gripper.width;
        match next.gripper.holding {
            None if prev_width >= t.close_threshold && width < t.close_threshold => {
                let [gx, gy, _] = next.gripper.position;
                let grasped = next
                    .items
                    .iter()
                    .filter(|i| self.grasp_success_predicate(&next, i))
                    .map(|i| {
                        let ([cx, cy], _) = i.grasp_region_world();
                        ((cx - gx).powi(2) + (cy - gy).powi(2), i.spec.id, i.pose)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                if let Some((_, id, pose)) = grasped {
                    next.gripper.holding = Some(id);
                    next.gripper.hold_offset = [pose[0] - gx, pose[1] - gy];
                }
                next.events.push(SimEvent::Grasp {
                    step,
                    position: next.gripper.position,
                    commanded_width: next.gripper.commanded_width,
                    item: grasped.map(|g| g.1),
                });
            }
            Some(id) if prev_width <= t.release_threshold && width > t.release_threshold => {
                let pose = next.item(id).map(|i| i.pose).unwrap_or_default();
                next.gripper.holding = None;
                next.gripper.hold_offset = [0.0, 0.0];
                next.events.push(SimEvent::Release { step, item: id, pose });
            }
            _ => {}
        }
        Ok(next)
    }

    /// Whether closing now would grasp `item`: gripper xy inside the item's
    /// world grasp region, low enough, and commanded narrow enough.
    pub fn grasp_success_predicate(&self, state: &WorldState, item: &PlacedItem) -> bool {
        let t = &self.catalog.tolerances;
        let [gx, gy, gz] = state.gripper.position;
        let ([cx, cy], [hx, hy]) = item.grasp_region_world();
        (gx - cx).abs() <= hx
            && (gy - cy).abs() <= hy
            && gz <= t.z_grasp
            && state.gripper.commanded_width <= item.spec.grasp_width() + t.w_tol
    }

    pub fn task_success(&self, state: &WorldState) -> bool {
        let target = state.task.target_item;
        if state.gripper.holding == Some(target) || state.target_grasps() == 0 {
            return false;
        }
        state
            .item(target)
            .is_some_and(|i| state.task.target_zone.contains(i.pose[0], i.pose[1]))
    }

    pub fn render(&self, state: &WorldState, view: &CameraModel) -> Image {
        render(state, view, self.catalog.tolerances.z_max)
    }

    /// One image per configured view.
    pub fn render_views(&self, state: &WorldState) -> Vec<Image> {
        self.cameras.iter().map(|c| self.render(state, c)).collect()
    }

    pub fn groundtruth_boxes(&self, state: &WorldState, view: &CameraModel) -> Vec<GraspBox> {
        state
            .items
            .iter()
            .filter(|i| i.spec.graspable)
            .map(|i| {
                let ([cx, cy], [hx, hy]) = i.grasp_region_world();
                let [u, v] = view.project(cx, cy);
                let [w, h] = view.scale_extent(2.0 * hx, 2.0 * hy);
                GraspBox {
                    category: i.spec.category,
                    cx: u,
                    cy: v,
                    w,
                    h,
                    confidence: 1.0,
                }
            })
            .collect()
    }

    /// Ground-truth view-0 box of the target at reset, used as a prompt.
    pub fn prompt_box(&self, task: &TaskSpec, seed: u64) -> Result<GraspBox, SimError> {
        let state = self.reset(task, seed)?;
        let id = task.target_item;
        let single = WorldState {
            items: state.items.into_iter().filter(|i| i.spec.id == id).collect(),
            ..state
        };
        self.groundtruth_boxes(&single, &self.cameras[0])
            .into_iter()
            .next()
            .ok_or_else(|| SimError::InvalidTask(format!("{id} has no grasp box")))
    }
}

#[cfg(test)]
mod tests {
    use super::super::render::BACKGROUND;
    use super::super::{Rect2, Shape};
    use super::*;
    use proptest::prelude::*;

    fn sim() -> Simulator {
        Simulator::default()
    }

    fn hold(state: &WorldState) -> ActionCommand {
        let [x, y, z] = state.gripper.position;
        ActionCommand {
            x,
            y,
            z,
            width: state.gripper.width,
        }
    }

    /// Drives the gripper to `(x, y, z)` with the given width, up to `n` steps.
    fn drive(sim: &Simulator, mut s: WorldState, a: ActionCommand, n: usize) -> WorldState {
        for _ in 0..n {
            s = sim.step(&s, &a).unwrap();
        }
        s
    }

    #[test]
    fn reset_is_deterministic() {
        let sim = sim();
        let task = sim.task(TaskFamily::PickBig, 0, None).unwrap();
        let a = sim.reset(&task, 7).unwrap();
        let b = sim.reset(&task, 7).unwrap();
        assert_eq!(a, b);
        let c = sim.reset(&task, 8).unwrap();
        assert_ne!(a.items[0].pose, c.items[0].pose);
    }

    #[test]
    fn pick_big_has_two_scaled_blocks() {
        let sim = sim();
        for p in 0..8 {
            let s = sim.reset(&sim.task(TaskFamily::PickBig, p, None).unwrap(), 3).unwrap();
            assert_eq!(s.items.len(), 2);
            let (a, b) = (&s.items[0].spec, &s.items[1].spec);
            assert_eq!(a.category, b.category);
            assert_eq!(a.shape, b.shape);
            let r0 = a.extent[0] / b.extent[0];
            let r1 = a.extent[1] / b.extent[1];
            assert!((r0 - 1.4).abs() < 1e-9 && (r1 - 1.4).abs() < 1e-9);
            assert_eq!(s.task.target_item, a.id);
            for (item, nominal) in s.items.iter().zip(sim.catalog().pick_big.placements[p as usize]) {
                let d = ((item.pose[0] - nominal[0]).powi(2) + (item.pose[1] - nominal[1]).powi(2)).sqrt();
                assert!(d <= 0.01 + 1e-12);
            }
        }
    }

    #[test]
    fn pick_goods_fixed_row() {
        let sim = sim();
        let task = sim.task(TaskFamily::PickGoods, 0, Some(ItemId(9))).unwrap();
        let s1 = sim.reset(&task, 1).unwrap();
        let s2 = sim.reset(&task, 99).unwrap();
        assert_eq!(s1.items.len(), 4);
        assert_eq!(s1.items, s2.items);
        let y0 = s1.items[0].pose[1];
        assert!(s1.items.iter().all(|i| i.pose[1] == y0));
        assert!(s1.items.windows(2).all(|w| w[0].pose[0] < w[1].pose[0]));
    }

    #[test]
    fn invalid_tasks_rejected() {
        let sim = sim();
        assert!(matches!(sim.task(TaskFamily::PickBig, 8, None), Err(SimError::InvalidTask(_))));
        assert!(matches!(sim.task(TaskFamily::PickCup, 4, None), Err(SimError::InvalidTask(_))));
        assert!(matches!(sim.task(TaskFamily::PickGoods, 1, None), Err(SimError::InvalidTask(_))));
        assert!(sim.task(TaskFamily::PickBig, 0, Some(ItemId(2))).is_err());
    }

    #[test]
    fn non_finite_action_rejected() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let mut a = hold(&s);
        a.z = f64::NAN;
        assert!(matches!(sim.step(&s, &a), Err(SimError::InvalidAction(_))));
    }

    #[test]
    fn fixed_point_action() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickCup, 1, Some(ItemId(4))).unwrap(), 5).unwrap();
        let n = sim.step(&s, &hold(&s)).unwrap();
        assert_eq!(n.step_count, 1);
        assert_eq!(WorldState { step_count: 0, ..n }, s);
    }

    fn grasp_at(sim: &Simulator, s: WorldState, x: f64, y: f64, width: f64) -> WorldState {
        let s = drive(sim, s, ActionCommand { x, y, z: 0.01, width: 0.1 }, 30);
        drive(sim, s, ActionCommand { x, y, z: 0.01, width }, 5)
    }

    #[test]
    fn centered_close_grasps_target() {
        let sim = sim();
        for cup in [3, 4, 5, 6, 7] {
            let s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(cup))).unwrap(), 2).unwrap();
            let ([cx, cy], _) = s.target().grasp_region_world();
            let g = s.target().spec.grasp_width();
            let s = grasp_at(&sim, s, cx, cy, g);
            assert_eq!(s.gripper.holding, Some(ItemId(cup)));
            assert_eq!(s.grasp_attempts(), 1);
            assert_eq!(s.target_grasps(), 1);
        }
    }

    #[test]
    fn close_over_empty_table() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let s = grasp_at(&sim, s, 0.25, -0.25, 0.0);
        assert_eq!(s.gripper.holding, None);
        assert_eq!(s.grasp_attempts(), 1);
        assert!(matches!(s.events[0], SimEvent::Grasp { item: None, .. }));
    }

    #[test]
    fn wide_close_fails() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(3))).unwrap(), 0).unwrap();
        let ([cx, cy], _) = s.target().grasp_region_world();
        let s = grasp_at(&sim, s, cx, cy, 0.069);
        assert_eq!(s.gripper.holding, None);
        assert_eq!(s.grasp_attempts(), 1);
    }

    #[test]
    fn grasp_of_non_target_is_recorded_but_not_counted() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let small = s.items[1].clone();
        let ([cx, cy], _) = small.grasp_region_world();
        let s = grasp_at(&sim, s, cx, cy, 0.0);
        assert_eq!(s.gripper.holding, Some(small.spec.id));
        assert_eq!(s.first_grasped(), Some(small.spec.id));
        assert_eq!(s.target_grasps(), 0);
    }

    #[test]
    fn pick_and_place_succeeds_and_release_detaches() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickBig, 2, None).unwrap(), 4).unwrap();
        let ([cx, cy], _) = s.target().grasp_region_world();
        let s = grasp_at(&sim, s, cx, cy, 0.0);
        assert_eq!(s.gripper.holding, Some(s.task.target_item));
        let [zx, zy] = s.task.target_zone.center();
        let s = drive(&sim, s, ActionCommand { x: cx, y: cy, z: 0.1, width: 0.0 }, 10);
        let s = drive(&sim, s, ActionCommand { x: zx, y: zy, z: 0.1, width: 0.0 }, 40);
        assert!(!sim.task_success(&s), "held item does not count");
        let s = drive(&sim, s, ActionCommand { x: zx, y: zy, z: 0.1, width: 0.1 }, 10);
        assert_eq!(s.gripper.holding, None);
        assert!(sim.task_success(&s));
        let kinds: Vec<bool> = s.events.iter().map(|e| matches!(e, SimEvent::Grasp { .. })).collect();
        assert_eq!(kinds, vec![true, false]);
    }

    #[test]
    fn wrong_item_in_zone_fails() {
        let sim = sim();
        let mut s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let [zx, zy] = s.task.target_zone.center();
        s.items[1].pose = [zx, zy];
        s.events.push(SimEvent::Grasp {
            step: 1,
            position: [0.0; 3],
            commanded_width: 0.0,
            item: Some(s.items[1].spec.id),
        });
        assert!(!sim.task_success(&s));
        // Target in zone without ever being grasped also fails.
        s.items[0].pose = [zx, zy];
        assert!(!sim.task_success(&s));
    }

    #[test]
    fn target_dropped_outside_zone_fails() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let ([cx, cy], _) = s.target().grasp_region_world();
        let s = grasp_at(&sim, s, cx, cy, 0.0);
        let s = drive(&sim, s, ActionCommand { x: cx, y: cy, z: 0.01, width: 0.1 }, 5);
        assert_eq!(s.gripper.holding, None);
        assert!(!sim.task_success(&s));
    }

    #[test]
    fn predicate_centered_and_offset_examples() {
        let sim = sim();
        let mut s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(6))).unwrap(), 0).unwrap();
        let item = s.target().clone();
        let ([cx, cy], [hx, hy]) = item.grasp_region_world();
        s.gripper.position = [cx, cy, 0.0];
        s.gripper.commanded_width = item.spec.grasp_width();
        assert!(sim.grasp_success_predicate(&s, &item));
        s.gripper.position = [cx + 2.0 * hx, cy, 0.0];
        assert!(!sim.grasp_success_predicate(&s, &item));
        s.gripper.position = [cx, cy + 2.0 * hy, 0.0];
        assert!(!sim.grasp_success_predicate(&s, &item));
    }

    /// Independent oracle: point-in-rectangle on the corner representation.
    fn oracle(item: &PlacedItem, p: [f64; 3], w: f64, z_grasp: f64, w_tol: f64) -> bool {
        let [ox, oy, gw, gh] = item.spec.grasp_region;
        let x0 = item.pose[0] + ox - gw / 2.0;
        let y0 = item.pose[1] + oy - gh / 2.0;
        let inside_x = p[0] >= x0 && p[0] <= x0 + gw;
        let inside_y = p[1] >= y0 && p[1] <= y0 + gh;
        inside_x && inside_y && p[2] <= z_grasp && w <= gw + w_tol
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn predicate_matches_geometric_oracle(
            cup in 3u32..8,
            dx in -0.06f64..0.06,
            dy in -0.06f64..0.06,
            z in 0.0f64..0.05,
            w in 0.0f64..0.1,
        ) {
            let sim = sim();
            let mut s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(cup))).unwrap(), 0).unwrap();
            let item = s.target().clone();
            let ([cx, cy], _) = item.grasp_region_world();
            s.gripper.position = [cx + dx, cy + dy, z];
            s.gripper.commanded_width = w;
            let t = sim.catalog().tolerances;
            prop_assert_eq!(
                sim.grasp_success_predicate(&s, &item),
                oracle(&item, s.gripper.position, w, t.z_grasp, t.w_tol)
            );
        }

        #[test]
        fn workspace_closure(actions in proptest::collection::vec(
            (-1.0f64..1.0, -1.0f64..1.0, -0.5f64..0.8, -0.2f64..0.3), 1..80)
        ) {
            let sim = sim();
            let t = sim.catalog().tolerances;
            let [x0, x1, y0, y1] = t.workspace;
            let mut s = sim.reset(&sim.task(TaskFamily::PickBig, 6, None).unwrap(), 1).unwrap();
            for (x, y, z, w) in actions {
                s = sim.step(&s, &ActionCommand { x, y, z, width: w }).unwrap();
                let [gx, gy, gz] = s.gripper.position;
                prop_assert!(gx >= x0 && gx <= x1 && gy >= y0 && gy <= y1);
                prop_assert!((0.0..=t.z_max).contains(&gz));
                prop_assert!((0.0..=t.width_max).contains(&s.gripper.width));
                for i in &s.items {
                    prop_assert!(i.pose[0] >= x0 && i.pose[0] <= x1 && i.pose[1] >= y0 && i.pose[1] <= y1);
                }
            }
        }

        #[test]
        fn boxes_match_affine_oracle(px in -0.25f64..0.25, py in -0.25f64..0.25, view in 0usize..2) {
            let sim = sim();
            let mut s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(3))).unwrap(), 0).unwrap();
            s.items[0].pose = [px, py];
            let cam = sim.cameras()[view];
            let b = sim.groundtruth_boxes(&s, &cam)[0];
            // Direct computation from the camera definition.
            let cfg = sim.catalog().camera;
            let scale = cfg.width as f64 / 0.6;
            let tilt = if view == 0 { 0.0 } else { cfg.oblique_deg.to_radians() };
            let [ox, oy, gw, gh] = s.items[0].spec.grasp_region;
            let u = (px + ox + 0.3) * scale;
            let v = cfg.height as f64 / 2.0 - (py + oy) * scale * tilt.cos();
            prop_assert!((b.cx - u).abs() < 0.5 && (b.cy - v).abs() < 0.5);
            prop_assert!((b.w - gw * scale).abs() < 0.5);
            prop_assert!((b.h - gh * scale * tilt.cos()).abs() < 0.5);
            let back = cam.unproject(b.cx, b.cy);
            prop_assert!((back[0] - (px + ox)).abs() < 1e-9 && (back[1] - (py + oy)).abs() < 1e-9);
        }
    }

    #[test]
    fn box_width_scales_with_region() {
        let sim = sim();
        let mut s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(5))).unwrap(), 0).unwrap();
        let cam = sim.cameras()[0];
        let b1 = sim.groundtruth_boxes(&s, &cam)[0];
        s.items[0].spec.grasp_region[2] *= 2.0;
        let b2 = sim.groundtruth_boxes(&s, &cam)[0];
        assert!((b2.w - 2.0 * b1.w).abs() < 1e-9);
    }

    #[test]
    fn centered_region_maps_to_image_center() {
        let sim = sim();
        let mut s = sim.reset(&sim.task(TaskFamily::PickCup, 0, Some(ItemId(5))).unwrap(), 0).unwrap();
        s.items[0].pose = [0.0, 0.0];
        for cam in sim.cameras() {
            let b = sim.groundtruth_boxes(&s, cam)[0];
            assert!((b.cx - 48.0).abs() < 1e-9 && (b.cy - 48.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_graspable_items_have_no_box() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        let boxes = sim.groundtruth_boxes(&s, &sim.cameras()[0]);
        assert_eq!(boxes.len(), 1);
    }

    fn blob_centroid(img: &Image) -> (f64, f64, usize) {
        let bg = BACKGROUND.map(|c| c as u8);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..img.height {
            for x in 0..img.width {
                if img.pixel(x, y) != bg {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (sx / n as f64, sy / n as f64, n)
    }

    /// Scene with a single item and no zone or gripper in view.
    fn lone_item_state(sim: &Simulator, pose: [f64; 2]) -> WorldState {
        let mut s = sim.reset(&sim.task(TaskFamily::PickBig, 0, None).unwrap(), 0).unwrap();
        s.items.truncate(1);
        s.items[0].pose = pose;
        s.task.target_zone = Rect2::from([5.0, 5.0, 5.1, 5.1]);
        s.gripper.position = [5.0, 5.0, 0.3];
        s
    }

    #[test]
    fn render_is_deterministic_and_sized() {
        let sim = sim();
        let s = sim.reset(&sim.task(TaskFamily::PickGoods, 0, Some(ItemId(8))).unwrap(), 0).unwrap();
        for cam in sim.cameras() {
            let a = sim.render(&s, cam);
            let b = sim.render(&s, cam);
            assert_eq!(a, b);
            assert_eq!(a.data.len(), 96 * 96 * 3);
        }
    }

    #[test]
    fn item_at_center_renders_near_center() {
        let sim = sim();
        let s = lone_item_state(&sim, [0.0, 0.0]);
        let img = sim.render(&s, &sim.cameras()[0]);
        assert_ne!(img.pixel(48, 48), BACKGROUND.map(|c| c as u8));
    }

    #[test]
    fn centroid_follows_image_shift() {
        let sim = sim();
        let cam = sim.cameras()[0];
        let shift = 10.0 / cam.a[0][0];
        for (x, y, shape) in [(-0.1, 0.05, Shape::Rect), (0.02, -0.1, Shape::Disc)] {
            let mut a = lone_item_state(&sim, [x, y]);
            a.items[0].spec.shape = shape;
            let mut b = a.clone();
            b.items[0].pose[0] += shift;
            let (ua, va, _) = blob_centroid(&sim.render(&a, &cam));
            let (ub, vb, _) = blob_centroid(&sim.render(&b, &cam));
            assert!((ub - ua - 10.0).abs() <= 1.0, "shift {}", ub - ua);
            assert!((vb - va).abs() <= 1.0);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let sim = sim();
        let task = sim.task(TaskFamily::PickBig, 3, None).unwrap();
        let run = || {
            let mut s = sim.reset(&task, 11).unwrap();
            let mut frames = Vec::new();
            for k in 0..40 {
                let a = ActionCommand {
                    x: 0.1 * (k as f64 * 0.3).sin(),
                    y: 0.1 * (k as f64 * 0.2).cos(),
                    z: 0.05,
                    width: if k % 10 < 5 { 0.0 } else { 0.1 },
                };
                s = sim.step(&s, &a).unwrap();
                frames.push(sim.render_views(&s));
            }
            (s, frames)
        };
        assert_eq!(run(), run());
    }
}
