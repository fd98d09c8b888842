//! Agent observations: the nearest packages as seen from the container
//! entrance, scaled to [-1, 1] and optionally rank-equalized per axis.

use std::io::{self, Write};

use thiserror::Error;

use crate::container::{ContainerSpec, ContainerState};
use crate::fmt_f64;

/// Slack allowed outside the container envelope during normalization.
pub const BOUNDS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("only {live} live items, {needed} required")]
    TooFewItems { live: usize, needed: usize },
    #[error("position {position:?} lies outside the container")]
    OutOfBounds { position: [f64; 3] },
    #[error("invalid viewer config: {0}")]
    InvalidViewer(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewerConfig {
    /// Viewpoint at the top edge of the container entrance, meters.
    pub p_view: [f64; 3],
    /// Symmetric positive semi-definite distance weights.
    pub weights: [[f64; 3]; 3],
    pub visible_count: usize,
    /// Apply per-axis histogram equalization after scaling.
    pub equalize: bool,
}

impl Default for ViewerConfig {
    fn default() -> Self {
        Self {
            p_view: [7.0, 1.25, 2.5],
            weights: [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 4.0]],
            visible_count: 128,
            equalize: true,
        }
    }
}

impl ViewerConfig {
    pub fn validate(&self) -> Result<(), ObservationError> {
        let w = &self.weights;
        let bad = |m: &str| Err(ObservationError::InvalidViewer(m.to_string()));
        if self.visible_count == 0 {
            return bad("visible_count must be at least 1");
        }
        if w.iter().flatten().any(|v| !v.is_finite()) || self.p_view.iter().any(|v| !v.is_finite())
        {
            return bad("non-finite entries");
        }
        if (0..3).any(|i| (0..i).any(|j| w[i][j] != w[j][i])) {
            return bad("weight matrix is not symmetric");
        }
        // PSD iff every principal minor is non-negative
        let eps = 1e-12;
        let minor2 = |i: usize, j: usize| w[i][i] * w[j][j] - w[i][j] * w[j][i];
        let det = w[0][0] * (w[1][1] * w[2][2] - w[1][2] * w[2][1])
            - w[0][1] * (w[1][0] * w[2][2] - w[1][2] * w[2][0])
            + w[0][2] * (w[1][0] * w[2][1] - w[1][1] * w[2][0]);
        let minors = [
            w[0][0],
            w[1][1],
            w[2][2],
            minor2(0, 1),
            minor2(0, 2),
            minor2(1, 2),
            det,
        ];
        if minors.iter().any(|&m| m < -eps) {
            return bad("weight matrix is not positive semi-definite");
        }
        Ok(())
    }
}

/// sqrt((p_view - p)ᵀ W (p_view - p)).
pub fn weighted_distance(p_view: [f64; 3], p: [f64; 3], weights: &[[f64; 3]; 3]) -> f64 {
    let d = [p_view[0] - p[0], p_view[1] - p[1], p_view[2] - p[2]];
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += d[i] * weights[i][j] * d[j];
        }
    }
    acc.max(0.0).sqrt()
}

/// Every live item ordered by ascending weighted distance, ties by item id.
pub fn visibility_order(state: &ContainerState, viewer: &ViewerConfig) -> Vec<u32> {
    let mut keyed: Vec<(f64, u32)> = state
        .live_items()
        .map(|it| {
            (
                weighted_distance(viewer.p_view, it.center, &viewer.weights),
                it.item_id,
            )
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

/// The `visible_count` nearest live items, nearest first.
pub fn select_visible(
    state: &ContainerState,
    viewer: &ViewerConfig,
) -> Result<Vec<u32>, ObservationError> {
    let live = state.live_count();
    if live < viewer.visible_count {
        return Err(ObservationError::TooFewItems {
            live,
            needed: viewer.visible_count,
        });
    }
    let mut order = visibility_order(state, viewer);
    order.truncate(viewer.visible_count);
    Ok(order)
}

/// Maps a position inside the container to [-1, 1]³.
pub fn normalize_position(p: [f64; 3], spec: &ContainerSpec) -> Result<[f64; 3], ObservationError> {
    let dims = spec.dims();
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = 2.0 * p[k] / dims[k] - 1.0;
        if !(out[k] >= -1.0 - BOUNDS_TOLERANCE && out[k] <= 1.0 + BOUNDS_TOLERANCE) {
            return Err(ObservationError::OutOfBounds { position: p });
        }
    }
    Ok(out)
}

/// Value assigned to rank `r` of `n` by the equalization.
pub fn lattice_value(rank: usize, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    (2.0 * rank as f64 - m) / m
}

/// Position of each value in a stable ascending sort.
pub fn stable_ranks(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Rank-based histogram equalization onto the uniform lattice in [-1, 1].
pub fn equalize_axis(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    stable_ranks(values)
        .into_iter()
        .map(|r| lattice_value(r, n))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Row-major `visible_count × 3` feature matrix.
    pub features: Vec<f64>,
    /// Row index to item id.
    pub item_ids: Vec<u32>,
    pub step_k: u64,
}

impl Observation {
    pub fn rows(&self) -> usize {
        self.item_ids.len()
    }

    pub fn row(&self, i: usize) -> [f64; 3] {
        [
            self.features[3 * i],
            self.features[3 * i + 1],
            self.features[3 * i + 2],
        ]
    }

    pub fn column(&self, axis: usize) -> Vec<f64> {
        self.features
            .iter()
            .skip(axis)
            .step_by(3)
            .copied()
            .collect()
    }
}

/// Scaled (and optionally equalized) features for the given rows.
pub fn features_for(
    state: &ContainerState,
    item_ids: &[u32],
    equalize: bool,
) -> Result<Vec<f64>, ObservationError> {
    let mut features = Vec::with_capacity(3 * item_ids.len());
    for &id in item_ids {
        let it = &state.items[id as usize];
        features.extend_from_slice(&normalize_position(it.center, &state.spec)?);
    }
    if equalize {
        equalize_columns(&mut features);
    }
    Ok(features)
}

/// Equalizes each of the three columns of a row-major matrix in place.
pub fn equalize_columns(features: &mut [f64]) {
    let n = features.len() / 3;
    let mut column = vec![0.0; n];
    for axis in 0..3 {
        for (i, v) in column.iter_mut().enumerate() {
            *v = features[3 * i + axis];
        }
        for (i, v) in equalize_axis(&column).into_iter().enumerate() {
            features[3 * i + axis] = v;
        }
    }
}

pub fn make_observation(
    state: &ContainerState,
    viewer: &ViewerConfig,
    step_k: u64,
) -> Result<Observation, ObservationError> {
    let item_ids = select_visible(state, viewer)?;
    let features = features_for(state, &item_ids, viewer.equalize)?;
    Ok(Observation {
        features,
        item_ids,
        step_k,
    })
}

/// Writes `row,item_id,x,y,z,x_eq,y_eq,z_eq` for the observed rows, where
/// x, y, z are the scaled coordinates.
pub fn write_observation_csv<W: Write>(
    state: &ContainerState,
    obs: &Observation,
    mut out: W,
) -> io::Result<()> {
    let plain = features_for(state, &obs.item_ids, false)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut eq = plain.clone();
    equalize_columns(&mut eq);
    writeln!(out, "row,item_id,x,y,z,x_eq,y_eq,z_eq")?;
    for (row, id) in obs.item_ids.iter().enumerate() {
        write!(out, "{row},{id}")?;
        for v in &plain[3 * row..3 * row + 3] {
            write!(out, ",{}", fmt_f64(*v))?;
        }
        for v in &eq[3 * row..3 * row + 3] {
            write!(out, ",{}", fmt_f64(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{build_substack_catalog, generate_container, ItemInstance};
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        let v = ViewerConfig::default();
        assert_eq!(weighted_distance(v.p_view, v.p_view, &v.weights), 0.0);
        assert_eq!(
            weighted_distance(v.p_view, [7.0, 0.0, 2.5], &v.weights),
            0.0
        );
        let d = weighted_distance(v.p_view, [6.0, 1.25, 1.5], &v.weights);
        assert!((d - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn viewer_validation() {
        assert!(ViewerConfig::default().validate().is_ok());
        let mut v = ViewerConfig::default();
        v.weights[0][1] = 1.0;
        assert!(v.validate().is_err());
        let mut v = ViewerConfig::default();
        v.weights[2][2] = -1.0;
        assert!(v.validate().is_err());
        let v = ViewerConfig {
            weights: [[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            ..ViewerConfig::default()
        };
        assert!(v.validate().is_err());
        let v = ViewerConfig {
            visible_count: 0,
            ..ViewerConfig::default()
        };
        assert!(v.validate().is_err());
    }

    #[test]
    fn normalization_examples() {
        let spec = ContainerSpec::default();
        assert_eq!(
            normalize_position([0.0, 0.0, 0.0], &spec).unwrap(),
            [-1.0, -1.0, -1.0]
        );
        assert_eq!(
            normalize_position([7.0, 1.25, 2.5], &spec).unwrap(),
            [1.0, 0.0, 1.0]
        );
        assert_eq!(
            normalize_position([3.5, 1.25, 1.25], &spec).unwrap(),
            [0.0, 0.0, 0.0]
        );
        assert!(matches!(
            normalize_position([7.1, 1.0, 1.0], &spec),
            Err(ObservationError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn table_example_matches_thirds() {
        let out = equalize_axis(&[0.10, 0.12, 0.11, 0.20, 0.19, 0.18, 0.30]);
        let expected = [-1.0, -1.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
        // the two-decimal truncation used in print
        let truncated: Vec<f64> = out.iter().map(|v| (v * 100.0).trunc() / 100.0).collect();
        assert_eq!(truncated, vec![-1.0, -0.33, -0.66, 0.66, 0.33, 0.0, 1.0]);
    }

    #[test]
    fn equalize_edge_cases() {
        assert_eq!(equalize_axis(&[3.5]), vec![0.0]);
        let lattice: Vec<f64> = (0..9).map(|r| lattice_value(r, 9)).collect();
        assert_eq!(equalize_axis(&lattice), lattice);
        // ties keep the original order
        assert_eq!(equalize_axis(&[1.0, 1.0, 0.0]), vec![0.0, 1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn equalize_preserves_order(values in prop::collection::vec(-5i32..5, 1..40)) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64 * 0.25).collect();
            let out = equalize_axis(&v);
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(out[i] < out[j]);
                    }
                }
            }
            let mut sorted = out.clone();
            sorted.sort_by(f64::total_cmp);
            let n = v.len();
            let lattice: Vec<f64> = (0..n).map(|r| lattice_value(r, n)).collect();
            prop_assert_eq!(sorted, lattice);
        }

        #[test]
        fn equalize_idempotent_without_ties(values in prop::collection::hash_set(-1000i32..1000, 1..64)) {
            let v: Vec<f64> = values.into_iter().map(|x| x as f64 / 7.0).collect();
            let once = equalize_axis(&v);
            prop_assert_eq!(equalize_axis(&once), once);
        }
    }

    fn two_item_state(a: [f64; 3], b: [f64; 3]) -> ContainerState {
        let catalog = build_substack_catalog().unwrap();
        let items = [a, b]
            .into_iter()
            .map(|center| ItemInstance {
                item_id: 0,
                sizing_id: 12,
                center,
                alive: true,
            })
            .collect();
        ContainerState::from_items(ContainerSpec::default(), catalog.sizings().clone(), items)
    }

    #[test]
    fn top_front_item_seen_first() {
        // item 0 deep inside and low, item 1 at the front top
        let s = two_item_state([1.0, 1.0, 0.2], [6.7, 1.0, 2.0]);
        let v = ViewerConfig {
            visible_count: 1,
            ..ViewerConfig::default()
        };
        let far = weighted_distance(v.p_view, s.items[0].center, &v.weights);
        let near = weighted_distance(v.p_view, s.items[1].center, &v.weights);
        assert!(near < far);
        assert_eq!(select_visible(&s, &v).unwrap(), vec![1]);
    }

    #[test]
    fn equal_distances_break_by_id() {
        let s = two_item_state([6.0, 0.5, 2.0], [6.0, 2.0, 2.0]);
        let v = ViewerConfig {
            visible_count: 2,
            ..ViewerConfig::default()
        };
        assert_eq!(select_visible(&s, &v).unwrap(), vec![0, 1]);
        let v3 = ViewerConfig {
            visible_count: 3,
            ..ViewerConfig::default()
        };
        assert!(matches!(
            select_visible(&s, &v3),
            Err(ObservationError::TooFewItems { live: 2, needed: 3 })
        ));
    }

    #[test]
    fn observation_on_generated_container() {
        let catalog = build_substack_catalog().unwrap();
        let state = generate_container(&ContainerSpec::default(), &catalog, 4).unwrap();
        let plain_viewer = ViewerConfig {
            equalize: false,
            ..ViewerConfig::default()
        };
        let plain = make_observation(&state, &plain_viewer, 0).unwrap();
        let eq = make_observation(&state, &ViewerConfig::default(), 0).unwrap();
        assert_eq!(plain.rows(), 128);
        assert_eq!(plain.item_ids, eq.item_ids);
        assert_eq!(
            make_observation(&state, &ViewerConfig::default(), 0).unwrap(),
            eq
        );
        for (row, &id) in plain.item_ids.iter().enumerate() {
            let expected =
                normalize_position(state.items[id as usize].center, &state.spec).unwrap();
            assert_eq!(plain.row(row), expected);
        }
        let lattice: Vec<f64> = (0..128).map(|r| lattice_value(r, 128)).collect();
        for axis in 0..3 {
            let mut col = eq.column(axis);
            col.sort_by(f64::total_cmp);
            assert_eq!(col, lattice);
            let raw = plain.column(axis);
            let e = eq.column(axis);
            for i in 0..128 {
                for j in 0..128 {
                    if raw[i] < raw[j] {
                        assert!(e[i] < e[j]);
                    }
                }
            }
        }
        // distances ascend along the rows
        let v = ViewerConfig::default();
        let d: Vec<f64> = plain
            .item_ids
            .iter()
            .map(|&id| weighted_distance(v.p_view, state.items[id as usize].center, &v.weights))
            .collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn observation_csv_layout() {
        let catalog = build_substack_catalog().unwrap();
        let state = generate_container(&ContainerSpec::default(), &catalog, 4).unwrap();
        let obs = make_observation(&state, &ViewerConfig::default(), 0).unwrap();
        let mut buf = Vec::new();
        write_observation_csv(&state, &obs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("row,item_id,x,y,z,x_eq,y_eq,z_eq"));
        assert_eq!(lines.count(), 128);
    }
}
