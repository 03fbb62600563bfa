//! Sensor layouts: the three 16-sensor benchmark arrays and file I/O.
//!
//! All benchmark layouts share a 4x4 grid over a 100 x 100 mm aperture. They
//! differ only in sensor height. "Outer" and "inner" columns are taken along
//! the x axis by default; [`ColumnAxis`] selects the alternatives.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dipole::Vec3;
use crate::error::{Error, Result};

/// Half-width of the square sensing aperture (m).
pub const APERTURE_HALF: f64 = 0.050;
/// Height of the bottom plate (m).
pub const Z_BOTTOM: f64 = 0.020;
/// Height of the top plate (m).
pub const Z_TOP: f64 = 0.180;
/// Height of the lowered inner columns of the single-split array (m).
pub const Z_SINGLE_SPLIT_INNER: f64 = 0.000;

const MIN_SEPARATION: f64 = 1e-6;

/// Ordered triaxial sensor positions in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutFile", into = "LayoutFile")]
pub struct SensorLayout {
    name: String,
    positions: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    name: String,
    positions_m: Vec<[f64; 3]>,
}

impl TryFrom<LayoutFile> for SensorLayout {
    type Error = Error;
    fn try_from(f: LayoutFile) -> Result<Self> {
        SensorLayout::new(f.name, f.positions_m.into_iter().map(Vec3::from).collect())
    }
}

impl From<SensorLayout> for LayoutFile {
    fn from(l: SensorLayout) -> Self {
        LayoutFile {
            name: l.name,
            positions_m: l.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

impl SensorLayout {
    pub fn new(name: impl Into<String>, positions: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvariantViolation("layout has no sensors".into()));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvariantViolation(format!(
                    "sensor {i} has a non-finite coordinate"
                )));
            }
        }
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if (positions[i] - positions[j]).norm() < MIN_SEPARATION {
                    return Err(Error::InvariantViolation(format!(
                        "sensors {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            positions,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Distinct sensor heights in ascending order.
    pub fn z_levels(&self) -> Vec<f64> {
        let mut zs: Vec<f64> = self.positions.iter().map(|p| p.z).collect();
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        zs
    }
}

/// Which grid columns count as "outer" when splitting heights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnAxis {
    /// Columns indexed along x: outer means |x| = 50 mm.
    #[default]
    X,
    /// Columns indexed along y: outer means |y| = 50 mm.
    Y,
    /// The 12-sensor perimeter ring is outer, the central 2x2 is inner.
    Ring,
}

impl FromStr for ColumnAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Self::X),
            "y" => Ok(Self::Y),
            "ring" => Ok(Self::Ring),
            _ => Err(Error::InvalidArgument(format!(
                "unknown column axis '{s}' (expected x, y or ring)"
            ))),
        }
    }
}

/// The four grid coordinates spanning the aperture.
pub fn grid_coordinates() -> [f64; 4] {
    let a = APERTURE_HALF;
    [-a, -a / 3.0, a / 3.0, a]
}

fn is_edge(c: f64) -> bool {
    c.abs() == APERTURE_HALF
}

fn grid_layout(name: &str, z_of: impl Fn(f64, f64) -> f64) -> SensorLayout {
    let g = grid_coordinates();
    let mut positions = Vec::with_capacity(16);
    for &x in &g {
        for &y in &g {
            positions.push(Vec3::new(x, y, z_of(x, y)));
        }
    }
    SensorLayout::new(name, positions).expect("benchmark grid is valid")
}

fn split_layout(name: &str, inner_z: f64, axis: ColumnAxis) -> SensorLayout {
    grid_layout(name, |x, y| {
        let outer = match axis {
            ColumnAxis::X => is_edge(x),
            ColumnAxis::Y => is_edge(y),
            ColumnAxis::Ring => is_edge(x) || is_edge(y),
        };
        if outer {
            Z_BOTTOM
        } else {
            inner_z
        }
    })
}

/// 4x4 grid, every sensor on the bottom plate.
pub fn build_planar() -> SensorLayout {
    grid_layout("planar", |_, _| Z_BOTTOM)
}

/// Outer columns on the bottom plate, inner columns lowered to z = 0.
pub fn build_single_split() -> SensorLayout {
    build_single_split_with(ColumnAxis::X)
}

pub fn build_single_split_with(axis: ColumnAxis) -> SensorLayout {
    split_layout("single-split", Z_SINGLE_SPLIT_INNER, axis)
}

/// Outer columns on the bottom plate, inner columns on the top plate.
pub fn build_staggered_split() -> SensorLayout {
    build_staggered_split_with(ColumnAxis::X)
}

pub fn build_staggered_split_with(axis: ColumnAxis) -> SensorLayout {
    split_layout("staggered", Z_TOP, axis)
}

pub const BUILTIN_NAMES: [&str; 3] = ["planar", "single-split", "staggered"];

/// Looks up a benchmark layout by name.
pub fn builtin(name: &str, axis: ColumnAxis) -> Option<SensorLayout> {
    match name {
        "planar" => Some(build_planar()),
        "single-split" => Some(build_single_split_with(axis)),
        "staggered" | "staggered-split" => Some(build_staggered_split_with(axis)),
        _ => None,
    }
}

pub fn layout_from_json(text: &str) -> Result<SensorLayout> {
    // Invariant violations surface as custom serde errors; re-validate the raw
    // file to report them with their own error kind.
    let raw: LayoutFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    SensorLayout::try_from(raw)
}

pub fn layout_to_json(layout: &SensorLayout) -> Result<String> {
    Ok(serde_json::to_string_pretty(layout)?)
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<SensorLayout> {
    layout_from_json(&fs::read_to_string(path)?)
}

pub fn save_layout(layout: &SensorLayout, path: impl AsRef<Path>) -> Result<()> {
    let mut text = layout_to_json(layout)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn xy_set(l: &SensorLayout) -> Vec<(f64, f64)> {
        let mut v: Vec<_> = l.positions().iter().map(|p| (p.x, p.y)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn planar_grid() {
        let l = build_planar();
        assert_eq!(l.len(), 16);
        assert!(l.positions().iter().all(|p| p.z == 0.020));
        assert!(l.positions().contains(&Vec3::new(-0.050, -0.050, 0.020)));
        let g = grid_coordinates();
        for w in g.windows(2) {
            assert!((w[1] - w[0] - 0.100 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn split_heights() {
        let single = build_single_split();
        assert_eq!(single.z_levels(), vec![0.0, 0.020]);
        let n_low = single.positions().iter().filter(|p| p.z == 0.0).count();
        assert_eq!(n_low, 8);
        for p in single.positions() {
            if p.x.abs() == 0.050 {
                assert_eq!(p.z, 0.020);
            } else {
                assert_eq!(p.z, 0.0);
            }
        }

        let stag = build_staggered_split();
        assert_eq!(stag.len(), 16);
        assert_eq!(stag.z_levels(), vec![0.020, 0.180]);
        assert_eq!(stag.positions().iter().filter(|p| p.z == 0.180).count(), 8);
        let outer: Vec<_> = stag.positions().iter().filter(|p| p.z == 0.020).collect();
        assert!(outer.iter().all(|p| p.x.abs() == 0.050));
    }

    #[test]
    fn shared_footprint_and_levels() {
        let a = xy_set(&build_planar());
        assert_eq!(a, xy_set(&build_single_split()));
        assert_eq!(a, xy_set(&build_staggered_split()));
        let mut all: Vec<f64> = [
            build_planar(),
            build_single_split(),
            build_staggered_split(),
        ]
        .iter()
        .flat_map(|l| l.z_levels())
        .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        assert_eq!(all, vec![0.0, 0.020, 0.180]);
    }

    #[test]
    fn alternative_axes() {
        let y = build_staggered_split_with(ColumnAxis::Y);
        assert!(y
            .positions()
            .iter()
            .all(|p| (p.y.abs() == 0.050) == (p.z == 0.020)));
        let ring = build_staggered_split_with(ColumnAxis::Ring);
        assert_eq!(ring.positions().iter().filter(|p| p.z == 0.180).count(), 4);
    }

    #[test]
    fn invalid_layouts() {
        assert!(matches!(
            SensorLayout::new("e", vec![]),
            Err(Error::InvariantViolation(_))
        ));
        assert!(matches!(
            layout_from_json(r#"{"name":"d","positions_m":[[0,0,0],[0,0,0]]}"#),
            Err(Error::InvariantViolation(_))
        ));
        assert!(matches!(
            layout_from_json(r#"{"name":"e","positions_m":[]}"#),
            Err(Error::InvariantViolation(_))
        ));
        match layout_from_json("{\"name\":\"x\",\n \"positions_m\": [[0,0]]}") {
            Err(Error::Parse { location, .. }) => assert!(location.starts_with("line 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("planar.json");
        let l = build_planar();
        save_layout(&l, &path).unwrap();
        assert_eq!(load_layout(&path).unwrap(), l);
        assert!(matches!(
            load_layout(dir.path().join("missing.json")),
            Err(Error::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(
            pts in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..20)
        ) {
            let positions: Vec<Vec3> = pts.iter().map(|p| Vec3::from(*p)).collect();
            if let Ok(l) = SensorLayout::new("rand", positions) {
                let back = layout_from_json(&layout_to_json(&l).unwrap()).unwrap();
                for (a, b) in l.positions().iter().zip(back.positions()) {
                    for k in 0..3 {
                        prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                    }
                }
            }
        }
    }
}
