//! Unloadability of single packages.
//!
//! A pick applies a constant upward force for a fixed time to one package.
//! Everything resting on it, transitively, is lifted along; the traveled
//! distance follows from Newton's second law with zero initial velocity.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::container::ContainerState;

/// Maximum vertical gap (m) between faces that still counts as contact.
pub const CONTACT_TOLERANCE: f64 = 1e-3;
/// Minimum footprint overlap (m) in y and x for a support contact.
pub const MIN_FOOTPRINT_OVERLAP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("total mass must be positive, got {0}")]
    Domain(f64),
    #[error("unknown item {0}")]
    UnknownItem(u32),
    #[error("item {0} was already removed")]
    DeadItem(u32),
    #[error("removing item {removed} leaves item {floating} without support")]
    FloatingAfterRemoval { removed: u32, floating: u32 },
    #[error("invalid physics config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsConfig {
    /// Lifting force, newtons.
    pub force: f64,
    /// Duration of the lifting attempt, seconds.
    pub lift_time: f64,
    /// Minimum traveled distance for a successful pick, meters.
    pub distance_threshold: f64,
    /// Gravitational acceleration, m/s².
    pub gravity: f64,
    /// Mass of one package, kilograms.
    pub item_mass: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            force: 20.0,
            lift_time: 0.3,
            distance_threshold: 0.2,
            gravity: 9.81,
            item_mass: 1.0,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (name, v) in [
            ("force", self.force),
            ("lift_time", self.lift_time),
            ("distance_threshold", self.distance_threshold),
            ("gravity", self.gravity),
            ("item_mass", self.item_mass),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PhysicsError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Largest number of packages that can be lifted together past the threshold.
    pub fn max_liftable(&self) -> usize {
        let mut p = 0usize;
        while let Ok(d) = lift_distance(self.force, (p + 1) as f64 * self.item_mass, self) {
            if d < self.distance_threshold {
                break;
            }
            p += 1;
        }
        p
    }
}

/// Distance traveled by `total_mass` under force `force` during `cfg.lift_time`,
/// starting at rest. Zero when the force cannot overcome gravity.
pub fn lift_distance(
    force: f64,
    total_mass: f64,
    cfg: &PhysicsConfig,
) -> Result<f64, PhysicsError> {
    if total_mass.is_nan() || total_mass <= 0.0 {
        return Err(PhysicsError::Domain(total_mass));
    }
    let accel = force / total_mass;
    if accel > cfg.gravity {
        Ok(0.5 * (accel - cfg.gravity) * cfg.lift_time * cfg.lift_time)
    } else {
        Ok(0.0)
    }
}

/// Directed contact relation: an edge `a -> b` means `a`'s top face carries `b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupportGraph {
    /// `carries[a]`: items resting on `a`, ascending.
    carries: Vec<Vec<u32>>,
    /// `rests_on[b]`: items `b` rests on, ascending.
    rests_on: Vec<Vec<u32>>,
    present: Vec<bool>,
}

fn overlap(lo_a: f64, hi_a: f64, lo_b: f64, hi_b: f64) -> f64 {
    hi_a.min(hi_b) - lo_a.max(lo_b)
}

/// Builds the complete contact relation over live items.
pub fn build_support_graph(state: &ContainerState, contact_tolerance: f64) -> SupportGraph {
    let n = state.items.len();
    let mut graph = SupportGraph {
        carries: vec![Vec::new(); n],
        rests_on: vec![Vec::new(); n],
        present: state.items.iter().map(|i| i.alive).collect(),
    };
    let mut order: Vec<usize> = (0..n).filter(|&i| state.items[i].alive).collect();
    order.sort_by(|&a, &b| {
        state.items[a].center[0]
            .total_cmp(&state.items[b].center[0])
            .then(a.cmp(&b))
    });
    let bounds: Vec<_> = state.items.iter().map(|it| state.bounds(it)).collect();
    for (pos, &a) in order.iter().enumerate() {
        let (lo_a, hi_a) = bounds[a];
        for &b in &order[pos + 1..] {
            let (lo_b, hi_b) = bounds[b];
            if lo_b[0] >= hi_a[0] - MIN_FOOTPRINT_OVERLAP {
                break;
            }
            if overlap(lo_a[0], hi_a[0], lo_b[0], hi_b[0]) < MIN_FOOTPRINT_OVERLAP
                || overlap(lo_a[1], hi_a[1], lo_b[1], hi_b[1]) < MIN_FOOTPRINT_OVERLAP
            {
                continue;
            }
            if (hi_a[2] - lo_b[2]).abs() <= contact_tolerance {
                graph.add_edge(a as u32, b as u32);
            } else if (hi_b[2] - lo_a[2]).abs() <= contact_tolerance {
                graph.add_edge(b as u32, a as u32);
            }
        }
    }
    for list in graph.carries.iter_mut().chain(graph.rests_on.iter_mut()) {
        list.sort_unstable();
    }
    graph
}

impl SupportGraph {
    fn add_edge(&mut self, supporter: u32, supported: u32) {
        self.carries[supporter as usize].push(supported);
        self.rests_on[supported as usize].push(supporter);
    }

    pub fn contains(&self, item_id: u32) -> bool {
        self.present.get(item_id as usize).copied().unwrap_or(false)
    }

    /// All edges as (supporter, supported), ordered by supporter then supported.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        self.carries
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().map(move |&b| (a as u32, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.carries.iter().map(Vec::len).sum()
    }

    /// Items resting directly on `item_id`.
    pub fn carried_by(&self, item_id: u32) -> &[u32] {
        self.carries
            .get(item_id as usize)
            .map_or(&[], Vec::as_slice)
    }

    /// Items `item_id` rests on directly.
    pub fn supporters_of(&self, item_id: u32) -> &[u32] {
        self.rests_on
            .get(item_id as usize)
            .map_or(&[], Vec::as_slice)
    }

    /// Drops an item and all of its edges.
    pub fn remove_item(&mut self, item_id: u32) {
        let id = item_id as usize;
        if !self.contains(item_id) {
            return;
        }
        for b in std::mem::take(&mut self.carries[id]) {
            self.rests_on[b as usize].retain(|&x| x != item_id);
        }
        for a in std::mem::take(&mut self.rests_on[id]) {
            self.carries[a as usize].retain(|&x| x != item_id);
        }
        self.present[id] = false;
    }

    /// Number of items that would move when lifting `item_id`, stopping early
    /// once `cap` is exceeded.
    pub fn closure_size_capped(&self, item_id: u32, cap: usize) -> Result<usize, PhysicsError> {
        if !self.contains(item_id) {
            return Err(PhysicsError::UnknownItem(item_id));
        }
        if self.carries[item_id as usize].is_empty() {
            return Ok(1);
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![item_id];
        seen.insert(item_id);
        while let Some(a) = stack.pop() {
            for &b in &self.carries[a as usize] {
                if seen.insert(b) {
                    if seen.len() > cap {
                        return Ok(seen.len());
                    }
                    stack.push(b);
                }
            }
        }
        Ok(seen.len())
    }
}

/// The item plus everything resting on it, transitively.
pub fn lifted_closure(graph: &SupportGraph, item_id: u32) -> Result<BTreeSet<u32>, PhysicsError> {
    if !graph.contains(item_id) {
        return Err(PhysicsError::UnknownItem(item_id));
    }
    let mut seen = BTreeSet::from([item_id]);
    let mut stack = vec![item_id];
    while let Some(a) = stack.pop() {
        for &b in graph.carried_by(a) {
            if seen.insert(b) {
                stack.push(b);
            }
        }
    }
    Ok(seen)
}

/// Outcome of evaluating a pick against a support graph, without touching state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PickCheck {
    pub success: bool,
    pub traveled: f64,
    pub lifted_count: usize,
}

pub fn check_pick(
    graph: &SupportGraph,
    item_id: u32,
    cfg: &PhysicsConfig,
) -> Result<PickCheck, PhysicsError> {
    let lifted_count = lifted_closure(graph, item_id)?.len();
    let traveled = lift_distance(cfg.force, lifted_count as f64 * cfg.item_mass, cfg)?;
    Ok(PickCheck {
        success: traveled >= cfg.distance_threshold,
        traveled,
        lifted_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PickOutcome {
    pub success: bool,
    /// Distance the item moved during the attempt, meters.
    pub traveled: f64,
    /// Number of packages lifted together.
    pub lifted_count: usize,
    pub next_state: ContainerState,
}

fn lookup(state: &ContainerState, item_id: u32) -> Result<(), PhysicsError> {
    match state.item(item_id) {
        None => Err(PhysicsError::UnknownItem(item_id)),
        Some(it) if !it.alive => Err(PhysicsError::DeadItem(item_id)),
        Some(_) => Ok(()),
    }
}

/// Items left hanging once `removed` disappears from `graph`.
pub(crate) fn check_removal(
    state: &ContainerState,
    graph: &SupportGraph,
    removed: u32,
) -> Result<(), PhysicsError> {
    for &b in graph.carried_by(removed) {
        let others = graph.supporters_of(b).iter().any(|&a| a != removed);
        let (lo, _) = state.bounds(&state.items[b as usize]);
        if !others && lo[2] > CONTACT_TOLERANCE {
            return Err(PhysicsError::FloatingAfterRemoval {
                removed,
                floating: b,
            });
        }
    }
    Ok(())
}

/// Attempts to lift `item_id`; on success the item is removed from the returned state.
pub fn attempt_pick(
    state: &ContainerState,
    item_id: u32,
    cfg: &PhysicsConfig,
) -> Result<PickOutcome, PhysicsError> {
    lookup(state, item_id)?;
    let graph = build_support_graph(state, CONTACT_TOLERANCE);
    let check = check_pick(&graph, item_id, cfg)?;
    let mut next_state = state.clone();
    if check.success {
        check_removal(state, &graph, item_id)?;
        next_state.items[item_id as usize].alive = false;
    }
    Ok(PickOutcome {
        success: check.success,
        traveled: check.traveled,
        lifted_count: check.lifted_count,
        next_state,
    })
}

/// Items whose pick would succeed.
pub fn pickable_set(state: &ContainerState, cfg: &PhysicsConfig) -> BTreeSet<u32> {
    let graph = build_support_graph(state, CONTACT_TOLERANCE);
    pickable_in_graph(&graph, cfg)
}

pub fn pickable_in_graph(graph: &SupportGraph, cfg: &PhysicsConfig) -> BTreeSet<u32> {
    let cap = cfg.max_liftable();
    if cap == 0 {
        return BTreeSet::new();
    }
    (0..graph.present.len() as u32)
        .filter(|&id| graph.contains(id))
        .filter(|&id| matches!(graph.closure_size_capped(id, cap), Ok(s) if s <= cap))
        .collect()
}

/// Live items that neither touch the floor nor rest on another item.
pub fn unsupported_items(state: &ContainerState, graph: &SupportGraph) -> Vec<u32> {
    state
        .live_items()
        .filter(|it| {
            let (lo, _) = state.bounds(it);
            lo[2] > CONTACT_TOLERANCE && graph.supporters_of(it.item_id).is_empty()
        })
        .map(|it| it.item_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{build_substack_catalog, ContainerSpec, ItemInstance};

    /// Packages of sizing 12 (square) placed by (x, y, z) of their centers.
    fn fixture(centers: &[[f64; 3]], sizing: u8) -> ContainerState {
        let catalog = build_substack_catalog().unwrap();
        let items = centers
            .iter()
            .map(|&center| ItemInstance {
                item_id: 0,
                sizing_id: sizing,
                center,
                alive: true,
            })
            .collect();
        ContainerState::from_items(ContainerSpec::default(), catalog.sizings().clone(), items)
    }

    fn half_height(sizing: u8) -> f64 {
        build_substack_catalog().unwrap().sizings()[sizing as usize].height / 2.0
    }

    #[test]
    fn lift_distance_reference_values() {
        let cfg = PhysicsConfig::default();
        let one = lift_distance(20.0, 1.0, &cfg).unwrap();
        let two = lift_distance(20.0, 2.0, &cfg).unwrap();
        assert!((one - 0.45855).abs() < 1e-12);
        assert!((two - 0.00855).abs() < 1e-12);
        assert_eq!(lift_distance(9.81, 1.0, &cfg).unwrap(), 0.0);
        assert_eq!(lift_distance(5.0, 1.0, &cfg).unwrap(), 0.0);
        assert!(matches!(
            lift_distance(20.0, 0.0, &cfg),
            Err(PhysicsError::Domain(_))
        ));
        assert!(matches!(
            lift_distance(20.0, -1.0, &cfg),
            Err(PhysicsError::Domain(_))
        ));
    }

    #[test]
    fn max_liftable_default_is_one() {
        assert_eq!(PhysicsConfig::default().max_liftable(), 1);
        let strong = PhysicsConfig {
            force: 200.0,
            ..PhysicsConfig::default()
        };
        assert!(strong.max_liftable() > 1);
    }

    #[test]
    fn single_item_has_no_edges() {
        let h = half_height(12);
        let s = fixture(&[[1.0, 1.0, h]], 12);
        assert_eq!(build_support_graph(&s, CONTACT_TOLERANCE).edge_count(), 0);
    }

    #[test]
    fn tower_has_one_edge() {
        let h = half_height(12);
        let s = fixture(&[[1.0, 1.0, h], [1.0, 1.0, 3.0 * h]], 12);
        let g = build_support_graph(&s, CONTACT_TOLERANCE);
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert_eq!(lifted_closure(&g, 1).unwrap().len(), 1);
        assert_eq!(lifted_closure(&g, 0).unwrap().len(), 2);
    }

    #[test]
    fn bridge_on_two_pillars() {
        // two 12s side by side carrying a sizing-9 package (twice as wide)
        let h12 = half_height(12);
        let h9 = half_height(9);
        let sizings = build_substack_catalog().unwrap();
        let w12 = sizings.sizings()[12].width;
        let mut s = fixture(&[[1.0, 1.0, h12], [1.0, 1.0 + w12, h12]], 12);
        s.items.push(ItemInstance {
            item_id: 2,
            sizing_id: 9,
            center: [1.0, 1.0 + w12 / 2.0, 2.0 * h12 + h9],
            alive: true,
        });
        let g = build_support_graph(&s, CONTACT_TOLERANCE);
        assert_eq!(g.supporters_of(2), &[0, 1]);
        assert_eq!(g.edge_count(), 2);
        let closure = lifted_closure(&g, 0).unwrap();
        assert_eq!(closure, BTreeSet::from([0, 2]));
        let other = lifted_closure(&g, 1).unwrap();
        assert_eq!(other, BTreeSet::from([1, 2]));
        let picked = pickable_in_graph(&g, &PhysicsConfig::default());
        assert_eq!(picked, BTreeSet::from([2]));
    }

    #[test]
    fn different_slabs_do_not_touch() {
        let h = half_height(12);
        let depth = ContainerSpec::default().item_depth;
        let s = fixture(&[[1.0, 1.0, h], [1.0 + depth, 1.0, 3.0 * h]], 12);
        let g = build_support_graph(&s, CONTACT_TOLERANCE);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(unsupported_items(&s, &g), vec![1]);
    }

    #[test]
    fn disjoint_towers_have_disjoint_closures() {
        let h = half_height(12);
        let s = fixture(
            &[
                [1.0, 0.5, h],
                [1.0, 0.5, 3.0 * h],
                [1.0, 1.5, h],
                [1.0, 1.5, 3.0 * h],
            ],
            12,
        );
        let g = build_support_graph(&s, CONTACT_TOLERANCE);
        let a = lifted_closure(&g, 0).unwrap();
        let b = lifted_closure(&g, 2).unwrap();
        assert!(a.is_disjoint(&b));
        assert!(a.contains(&0) && b.contains(&2));
    }

    #[test]
    fn pick_free_top_item() {
        let h = half_height(12);
        let s = fixture(&[[1.0, 1.0, h], [1.0, 1.0, 3.0 * h]], 12);
        let cfg = PhysicsConfig::default();
        let out = attempt_pick(&s, 1, &cfg).unwrap();
        assert!(out.success);
        assert!((out.traveled - 0.45855).abs() < 1e-12);
        assert_eq!(out.lifted_count, 1);
        assert!(!out.next_state.items[1].alive);
        assert!(out.next_state.items[0].alive);
        assert_eq!(out.next_state.items[0], s.items[0]);
    }

    #[test]
    fn pick_blocked_item_fails_repeatably() {
        let h = half_height(12);
        let s = fixture(&[[1.0, 1.0, h], [1.0, 1.0, 3.0 * h]], 12);
        let cfg = PhysicsConfig::default();
        let first = attempt_pick(&s, 0, &cfg).unwrap();
        assert!(!first.success);
        assert!((first.traveled - 0.00855).abs() < 1e-12);
        assert_eq!(first.lifted_count, 2);
        assert_eq!(first.next_state, s);
        let second = attempt_pick(&first.next_state, 0, &cfg).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn pick_errors() {
        let h = half_height(12);
        let mut s = fixture(&[[1.0, 1.0, h]], 12);
        let cfg = PhysicsConfig::default();
        assert!(matches!(
            attempt_pick(&s, 7, &cfg),
            Err(PhysicsError::UnknownItem(7))
        ));
        s.items[0].alive = false;
        assert!(matches!(
            attempt_pick(&s, 0, &cfg),
            Err(PhysicsError::DeadItem(0))
        ));
        assert!(pickable_set(&s, &cfg).is_empty());
    }

    #[test]
    fn strong_lift_cannot_strand_items() {
        let h = half_height(12);
        let s = fixture(&[[1.0, 1.0, h], [1.0, 1.0, 3.0 * h]], 12);
        let strong = PhysicsConfig {
            force: 200.0,
            ..PhysicsConfig::default()
        };
        let err = attempt_pick(&s, 0, &strong).unwrap_err();
        assert_eq!(
            err,
            PhysicsError::FloatingAfterRemoval {
                removed: 0,
                floating: 1
            }
        );
    }

    #[test]
    fn remove_item_drops_edges() {
        let h = half_height(12);
        let s = fixture(&[[1.0, 1.0, h], [1.0, 1.0, 3.0 * h]], 12);
        let mut g = build_support_graph(&s, CONTACT_TOLERANCE);
        g.remove_item(1);
        assert_eq!(g.edge_count(), 0);
        assert!(!g.contains(1));
        assert!(matches!(
            lifted_closure(&g, 1),
            Err(PhysicsError::UnknownItem(1))
        ));
    }
}
