//! Container geometry: package sizings, the substack catalog and randomized
//! wall generation.
//!
//! Substack geometry is kept in integer tenths of a figure unit so that
//! stacking and overlap checks are exact. A single calibration scale maps
//! figure units to meters such that one full row (left + two mid + right
//! slots) spans the container width.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fmt_f64;

/// Number of distinct package sizings.
pub const SIZING_COUNT: usize = 13;

/// Number of substack variants per column.
pub const VARIANT_COUNT: u8 = 3;

/// Rows stacked on top of each other to form one wall.
pub const ROWS_PER_WALL: usize = 3;

/// Slot sequence of a single row, left to right along y.
pub const ROW_SLOTS: [Column; 4] = [Column::Left, Column::Mid, Column::Mid, Column::Right];

/// Width (y) and height (z) of each sizing, in tenths of a figure unit.
const SIZING_DECI: [(i32, i32); SIZING_COUNT] = [
    (30, 18),
    (18, 12),
    (12, 12),
    (18, 18),
    (21, 18),
    (9, 15),
    (9, 9),
    (9, 6),
    (18, 6),
    (12, 6),
    (18, 9),
    (15, 6),
    (6, 6),
];

/// The catalog table shipped with the crate.
pub const DEFAULT_CATALOG_TABLE: &str = include_str!("../data/substacks.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("catalog line {line}: {reason}")]
    CatalogParse { line: usize, reason: String },
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("invalid container spec: {0}")]
    InvalidSpec(String),
    #[error("gravity snap produced overlapping packages {a} and {b} in one wall")]
    Overlap { a: usize, b: usize },
    #[error("package {index} leaves the container envelope after stacking")]
    OutOfContainer { index: usize },
    #[error("no container with {min}..={max} items after {attempts} draws (last count {last})")]
    ItemCountOutOfRange {
        min: usize,
        max: usize,
        attempts: usize,
        last: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Column {
    Left,
    Mid,
    Right,
}

impl Column {
    pub const ALL: [Column; 3] = [Column::Left, Column::Mid, Column::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Column::Left => "left",
            Column::Mid => "mid",
            Column::Right => "right",
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Column {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Column::Left),
            "mid" => Ok(Column::Mid),
            "right" => Ok(Column::Right),
            other => Err(format!("unknown column `{other}`")),
        }
    }
}

/// One of the 13 basic package sizings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackageSizing {
    pub sizing_id: u8,
    /// Extent along y, meters.
    pub width: f64,
    /// Extent along z, meters.
    pub height: f64,
    /// Extent along x, meters. Shared by all sizings.
    pub depth: f64,
    /// Kilograms. Shared by all sizings.
    pub mass: f64,
}

/// Width and height of a sizing in tenths of a figure unit.
pub fn sizing_dims_deci(sizing_id: u8) -> (i32, i32) {
    SIZING_DECI[sizing_id as usize]
}

/// A package inside a substack, positioned by its lower-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub sizing_id: u8,
    /// Offset from the slot origin along y, tenths of a figure unit.
    pub y_offset: i32,
    /// Offset from the row base along z, tenths of a figure unit.
    pub z_offset: i32,
}

impl Placement {
    pub fn width(&self) -> i32 {
        SIZING_DECI[self.sizing_id as usize].0
    }

    pub fn height(&self) -> i32 {
        SIZING_DECI[self.sizing_id as usize].1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubstackTemplate {
    pub column: Column,
    pub variant: u8,
    pub placements: Vec<Placement>,
    /// Width of the slot the substack occupies (its bottom footprint), tenths of a unit.
    pub bounding_width: i32,
    /// Height of the substack, tenths of a unit.
    pub bounding_height: i32,
}

/// Physical layout of a container and the parameters of its filling.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerSpec {
    pub depth_x: f64,
    pub width_y: f64,
    pub height_z: f64,
    pub wall_pitch_x: f64,
    pub wall_count: usize,
    /// Package depth along x, identical for every sizing.
    pub item_depth: f64,
    pub item_mass: f64,
    /// Accepted live item count after filling, inclusive.
    pub min_items: usize,
    pub max_items: usize,
    /// Full redraws tried before giving up on the item count range.
    pub max_attempts: usize,
}

impl Default for ContainerSpec {
    fn default() -> Self {
        Self {
            depth_x: 7.0,
            width_y: 2.5,
            height_z: 2.5,
            wall_pitch_x: 7.0 / 12.0,
            wall_count: 12,
            item_depth: 7.0 / 12.0,
            item_mass: 1.0,
            min_items: 800,
            max_items: 1000,
            max_attempts: 64,
        }
    }
}

impl ContainerSpec {
    pub fn dims(&self) -> [f64; 3] {
        [self.depth_x, self.width_y, self.height_z]
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |msg: String| Err(GenerationError::InvalidSpec(msg));
        for (name, v) in [
            ("depth_x", self.depth_x),
            ("width_y", self.width_y),
            ("height_z", self.height_z),
            ("wall_pitch_x", self.wall_pitch_x),
            ("item_depth", self.item_depth),
            ("item_mass", self.item_mass),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.wall_count == 0 {
            return bad("wall_count must be at least 1".into());
        }
        if self.wall_count as f64 * self.wall_pitch_x > self.depth_x + 1e-9 {
            return bad(format!(
                "{} walls of pitch {} exceed container depth {}",
                self.wall_count, self.wall_pitch_x, self.depth_x
            ));
        }
        if self.item_depth > self.wall_pitch_x + 1e-12 {
            return bad("item_depth larger than wall pitch".into());
        }
        if self.min_items > self.max_items {
            return bad("min_items > max_items".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        Ok(())
    }

    /// x coordinate of wall `k`'s center plane.
    pub fn wall_x(&self, k: usize) -> f64 {
        self.wall_pitch_x * (k as f64 + 0.5)
    }
}

/// The substack templates together with the figure-unit calibration.
#[derive(Clone, Debug)]
pub struct Catalog {
    templates: Vec<SubstackTemplate>,
    /// Meters per tenth of a figure unit.
    scale: f64,
    sizings: Arc<[PackageSizing]>,
    row_width: i32,
    row_height: i32,
}

impl Catalog {
    /// Parses a catalog table and calibrates it to `spec`.
    pub fn from_table(table: &str, spec: &ContainerSpec) -> Result<Self, GenerationError> {
        spec.validate()?;
        let templates = parse_table(table)?;
        let (row_width, row_height) = validate_templates(&templates)?;
        let scale = spec.width_y / row_width as f64;
        if row_height as f64 * scale * ROWS_PER_WALL as f64 > spec.height_z + 1e-9 {
            return Err(GenerationError::InvalidCatalog(format!(
                "{ROWS_PER_WALL} rows of height {} m exceed container height {}",
                row_height as f64 * scale,
                spec.height_z
            )));
        }
        let sizings = SIZING_DECI
            .iter()
            .enumerate()
            .map(|(id, &(w, h))| PackageSizing {
                sizing_id: id as u8,
                width: w as f64 * scale,
                height: h as f64 * scale,
                depth: spec.item_depth,
                mass: spec.item_mass,
            })
            .collect::<Vec<_>>()
            .into();
        Ok(Self {
            templates,
            scale,
            sizings,
            row_width,
            row_height,
        })
    }

    pub fn templates(&self) -> &[SubstackTemplate] {
        &self.templates
    }

    pub fn template(&self, column: Column, variant: u8) -> Option<&SubstackTemplate> {
        self.templates
            .iter()
            .find(|t| t.column == column && t.variant == variant)
    }

    /// Meters per figure unit.
    pub fn meters_per_unit(&self) -> f64 {
        self.scale * 10.0
    }

    pub fn sizings(&self) -> &Arc<[PackageSizing]> {
        &self.sizings
    }

    /// Row width in meters.
    pub fn row_width(&self) -> f64 {
        self.row_width as f64 * self.scale
    }

    /// Row height in meters.
    pub fn row_height(&self) -> f64 {
        self.row_height as f64 * self.scale
    }

    /// Slot widths of one row in meters, in [`ROW_SLOTS`] order.
    pub fn slot_widths(&self) -> [f64; 4] {
        ROW_SLOTS.map(|c| self.slot_width_deci(c) as f64 * self.scale)
    }

    fn slot_width_deci(&self, column: Column) -> i32 {
        self.templates
            .iter()
            .find(|t| t.column == column)
            .map(|t| t.bounding_width)
            .unwrap_or(0)
    }
}

/// Loads the shipped catalog calibrated to the default container.
pub fn build_substack_catalog() -> Result<Catalog, GenerationError> {
    Catalog::from_table(DEFAULT_CATALOG_TABLE, &ContainerSpec::default())
}

fn parse_units(field: &str, line: usize) -> Result<i32, GenerationError> {
    let v: f64 = field.parse().map_err(|_| GenerationError::CatalogParse {
        line,
        reason: format!("bad number `{field}`"),
    })?;
    let deci = (v * 10.0).round();
    if (v * 10.0 - deci).abs() > 1e-6 {
        return Err(GenerationError::CatalogParse {
            line,
            reason: format!("`{field}` is not a multiple of 0.1 units"),
        });
    }
    Ok(deci as i32)
}

fn parse_table(table: &str) -> Result<Vec<SubstackTemplate>, GenerationError> {
    let mut templates: Vec<SubstackTemplate> = Vec::new();
    for (idx, raw) in table.lines().enumerate() {
        let line = idx + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(GenerationError::CatalogParse {
                line,
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let column: Column = fields[0]
            .parse()
            .map_err(|reason| GenerationError::CatalogParse { line, reason })?;
        let parse_int = |s: &str| -> Result<u8, GenerationError> {
            s.parse().map_err(|_| GenerationError::CatalogParse {
                line,
                reason: format!("bad integer `{s}`"),
            })
        };
        let variant = parse_int(fields[1])?;
        let sizing_id = parse_int(fields[2])?;
        if variant >= VARIANT_COUNT {
            return Err(GenerationError::CatalogParse {
                line,
                reason: format!("variant {variant} out of range"),
            });
        }
        if sizing_id as usize >= SIZING_COUNT {
            return Err(GenerationError::CatalogParse {
                line,
                reason: format!("sizing {sizing_id} out of range"),
            });
        }
        let placement = Placement {
            sizing_id,
            y_offset: parse_units(fields[3], line)?,
            z_offset: parse_units(fields[4], line)?,
        };
        match templates
            .iter_mut()
            .find(|t| t.column == column && t.variant == variant)
        {
            Some(t) => t.placements.push(placement),
            None => templates.push(SubstackTemplate {
                column,
                variant,
                placements: vec![placement],
                bounding_width: 0,
                bounding_height: 0,
            }),
        }
    }
    templates.sort_by_key(|t| (t.column, t.variant));
    for t in &mut templates {
        let floor = t.placements.iter().filter(|p| p.z_offset == 0);
        let lo = floor.clone().map(|p| p.y_offset).min().unwrap_or(0);
        let hi = floor.map(|p| p.y_offset + p.width()).max().unwrap_or(0);
        t.bounding_width = hi - lo;
        t.bounding_height = t
            .placements
            .iter()
            .map(|p| p.z_offset + p.height())
            .max()
            .unwrap_or(0);
    }
    Ok(templates)
}

fn rects_overlap(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> bool {
    // (y0, z0, w, h)
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

/// Checks completeness and internal consistency; returns (row width, row height).
fn validate_templates(templates: &[SubstackTemplate]) -> Result<(i32, i32), GenerationError> {
    let invalid = |m: String| Err(GenerationError::InvalidCatalog(m));
    for column in Column::ALL {
        for variant in 0..VARIANT_COUNT {
            if !templates
                .iter()
                .any(|t| t.column == column && t.variant == variant)
            {
                return invalid(format!("missing {column} variant {variant}"));
            }
        }
    }
    if templates.len() != Column::ALL.len() * VARIANT_COUNT as usize {
        return invalid(format!("expected 9 templates, found {}", templates.len()));
    }
    let mut row_height = None;
    for t in templates {
        let rects: Vec<_> = t
            .placements
            .iter()
            .map(|p| (p.y_offset, p.z_offset, p.width(), p.height()))
            .collect();
        for i in 0..rects.len() {
            if rects[i].1 < 0 {
                return invalid(format!(
                    "{} variant {}: negative z offset",
                    t.column, t.variant
                ));
            }
            for j in i + 1..rects.len() {
                if rects_overlap(rects[i], rects[j]) {
                    return invalid(format!(
                        "{} variant {}: placements {i} and {j} overlap",
                        t.column, t.variant
                    ));
                }
            }
        }
        let floor_min = t
            .placements
            .iter()
            .filter(|p| p.z_offset == 0)
            .map(|p| p.y_offset)
            .min();
        if floor_min != Some(0) {
            return invalid(format!(
                "{} variant {}: bottom footprint must start at the slot origin",
                t.column, t.variant
            ));
        }
        let same_width = templates
            .iter()
            .filter(|o| o.column == t.column)
            .all(|o| o.bounding_width == t.bounding_width);
        if !same_width {
            return invalid(format!("{} templates disagree on slot width", t.column));
        }
        match row_height {
            None => row_height = Some(t.bounding_height),
            Some(h) if h != t.bounding_height => {
                return invalid(format!(
                    "{} variant {}: height {} differs from row height {h}",
                    t.column, t.variant, t.bounding_height
                ))
            }
            _ => {}
        }
    }
    let width_of = |c: Column| {
        templates
            .iter()
            .find(|t| t.column == c)
            .map(|t| t.bounding_width)
            .unwrap_or(0)
    };
    let row_width = ROW_SLOTS.iter().map(|&c| width_of(c)).sum();
    Ok((row_width, row_height.unwrap_or(0)))
}

/// A package placed in a container.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItemInstance {
    pub item_id: u32,
    pub sizing_id: u8,
    /// Center of mass, meters (x, y, z).
    pub center: [f64; 3],
    pub alive: bool,
}

/// Immutable snapshot of a filled container.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerState {
    pub spec: ContainerSpec,
    pub sizings: Arc<[PackageSizing]>,
    /// Indexed by `item_id`.
    pub items: Vec<ItemInstance>,
    pub seed: u64,
}

impl ContainerState {
    /// Builds a state from explicit items, renumbering ids to their index.
    pub fn from_items(
        spec: ContainerSpec,
        sizings: Arc<[PackageSizing]>,
        items: Vec<ItemInstance>,
    ) -> Self {
        let items = items
            .into_iter()
            .enumerate()
            .map(|(i, it)| ItemInstance {
                item_id: i as u32,
                ..it
            })
            .collect();
        Self {
            spec,
            sizings,
            items,
            seed: 0,
        }
    }

    pub fn live_count(&self) -> usize {
        self.items.iter().filter(|i| i.alive).count()
    }

    pub fn live_items(&self) -> impl Iterator<Item = &ItemInstance> {
        self.items.iter().filter(|i| i.alive)
    }

    pub fn item(&self, item_id: u32) -> Option<&ItemInstance> {
        self.items.get(item_id as usize)
    }

    pub fn sizing(&self, item: &ItemInstance) -> &PackageSizing {
        &self.sizings[item.sizing_id as usize]
    }

    /// Axis-aligned box of an item as (min corner, max corner).
    pub fn bounds(&self, item: &ItemInstance) -> ([f64; 3], [f64; 3]) {
        let s = self.sizing(item);
        let half = [s.depth / 2.0, s.width / 2.0, s.height / 2.0];
        let c = item.center;
        (
            [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
            [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
        )
    }

    /// Writes live items as `item_id,sizing_id,x,y,z`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "item_id,sizing_id,x,y,z")?;
        for it in self.live_items() {
            writeln!(
                out,
                "{},{},{},{},{}",
                it.item_id,
                it.sizing_id,
                fmt_f64(it.center[0]),
                fmt_f64(it.center[1]),
                fmt_f64(it.center[2])
            )?;
        }
        Ok(())
    }
}

/// A package in wall coordinates before conversion to meters.
#[derive(Clone, Copy, Debug)]
struct WallBox {
    sizing_id: u8,
    y0: i32,
    z0: i32,
    w: i32,
    h: i32,
}

/// Builds one wall at depth `wall_x`: three rows of left, mid, mid, right
/// substacks with uniformly drawn variants, gravity-snapped bottom-up.
///
/// Item ids are assigned from 0 in snap order.
pub fn generate_wall<R: Rng + ?Sized>(
    catalog: &Catalog,
    wall_x: f64,
    rng: &mut R,
) -> Result<Vec<ItemInstance>, GenerationError> {
    let mut nominal = Vec::with_capacity(96);
    for row in 0..ROWS_PER_WALL {
        let base_z = row as i32 * catalog.row_height;
        let mut origin = 0;
        for &column in &ROW_SLOTS {
            let variant = rng.gen_range(0..VARIANT_COUNT);
            let template = catalog.template(column, variant).ok_or_else(|| {
                GenerationError::InvalidCatalog(format!("missing {column} {variant}"))
            })?;
            for p in &template.placements {
                nominal.push(WallBox {
                    sizing_id: p.sizing_id,
                    y0: origin + p.y_offset,
                    z0: base_z + p.z_offset,
                    w: p.width(),
                    h: p.height(),
                });
            }
            origin += template.bounding_width;
        }
    }
    let snapped = gravity_snap(nominal)?;

    let max_z = (catalog.row_height * ROWS_PER_WALL as i32) as f64 * catalog.scale;
    let mut items = Vec::with_capacity(snapped.len());
    for (i, b) in snapped.iter().enumerate() {
        if b.y0 < 0
            || b.y0 + b.w > catalog.row_width
            || ((b.z0 + b.h) as f64 * catalog.scale) > max_z + 1e-9
        {
            return Err(GenerationError::OutOfContainer { index: i });
        }
        items.push(ItemInstance {
            item_id: i as u32,
            sizing_id: b.sizing_id,
            center: [
                wall_x,
                (b.y0 as f64 + b.w as f64 / 2.0) * catalog.scale,
                (b.z0 as f64 + b.h as f64 / 2.0) * catalog.scale,
            ],
            alive: true,
        });
    }
    Ok(items)
}

/// Drops boxes in ascending nominal z onto the floor or the highest top
/// surface beneath them.
fn gravity_snap(mut boxes: Vec<WallBox>) -> Result<Vec<WallBox>, GenerationError> {
    boxes.sort_by_key(|b| (b.z0, b.y0));
    let mut placed: Vec<WallBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        let rest = placed
            .iter()
            .filter(|p| p.y0 < b.y0 + b.w && b.y0 < p.y0 + p.w)
            .map(|p| p.z0 + p.h)
            .filter(|&top| top <= b.z0)
            .max()
            .unwrap_or(0);
        let dropped = WallBox { z0: rest, ..b };
        if let Some(j) = placed.iter().position(|p| {
            rects_overlap(
                (p.y0, p.z0, p.w, p.h),
                (dropped.y0, dropped.z0, dropped.w, dropped.h),
            )
        }) {
            return Err(GenerationError::Overlap {
                a: j,
                b: placed.len(),
            });
        }
        placed.push(dropped);
    }
    Ok(placed)
}

/// Fills a container with `spec.wall_count` walls.
///
/// All walls are redrawn from the continuing random stream whenever the total
/// falls outside `[min_items, max_items]`; after `max_attempts` draws the
/// generation fails.
pub fn generate_container(
    spec: &ContainerSpec,
    catalog: &Catalog,
    seed: u64,
) -> Result<ContainerState, GenerationError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = 0;
    for _ in 0..spec.max_attempts {
        let mut items = Vec::with_capacity(spec.max_items);
        for k in 0..spec.wall_count {
            let wall = generate_wall(catalog, spec.wall_x(k), &mut rng)?;
            let offset = items.len() as u32;
            items.extend(wall.into_iter().map(|it| ItemInstance {
                item_id: it.item_id + offset,
                ..it
            }));
        }
        last = items.len();
        if (spec.min_items..=spec.max_items).contains(&last) {
            return Ok(ContainerState {
                spec: spec.clone(),
                sizings: catalog.sizings().clone(),
                items,
                seed,
            });
        }
    }
    Err(GenerationError::ItemCountOutOfRange {
        min: spec.min_items,
        max: spec.max_items,
        attempts: spec.max_attempts,
        last,
    })
}
