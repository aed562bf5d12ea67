//! Configuration matrices, the grid codec used by the diffusion model, and
//! the bottleneck capacity oracle that labels configurations.
//!
//! A configuration counts the assets of type `i` placed at station `j`.
//! Asset type `i` performs operation `i`, so the line's throughput is limited
//! by the operation with the lowest aggregate rate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ASSET_TYPES: usize = 9;
pub const DEFAULT_STATIONS: usize = 7;
/// Largest number of assets of one type at one station.
pub const DEFAULT_MAX_COUNT: u32 = 5;
/// Side of the square grid the codec pads into.
pub const DEFAULT_GRID_SIZE: usize = 16;

pub const MAX_CAPACITY: u32 = 300;
pub const CLASS_STEP: u32 = 30;
/// Per-unit rate of machine-type assets, parts/hour.
pub const MACHINE_RATE: u32 = 30;
/// High / moderate / low human skill rates, parts/hour.
pub const SKILL_RATES: [u32; 3] = [120, 60, 0];

/// Shape and per-cell ceiling of the configuration space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub asset_types: usize,
    pub stations: usize,
    pub max_count: u32,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            asset_types: DEFAULT_ASSET_TYPES,
            stations: DEFAULT_STATIONS,
            max_count: DEFAULT_MAX_COUNT,
        }
    }
}

/// Asset counts, row-major over (asset type, station).
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ConfigurationRepr", into = "ConfigurationRepr")]
pub struct Configuration {
    asset_types: usize,
    stations: usize,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ConfigurationRepr {
    i: usize,
    j: usize,
    counts: Vec<u32>,
}

impl TryFrom<ConfigurationRepr> for Configuration {
    type Error = Error;

    fn try_from(r: ConfigurationRepr) -> Result<Self> {
        Configuration::from_counts(r.i, r.j, r.counts)
    }
}

impl From<Configuration> for ConfigurationRepr {
    fn from(c: Configuration) -> Self {
        ConfigurationRepr {
            i: c.asset_types,
            j: c.stations,
            counts: c.counts,
        }
    }
}

impl Configuration {
    pub fn zeros(asset_types: usize, stations: usize) -> Self {
        Configuration {
            asset_types,
            stations,
            counts: vec![0; asset_types * stations],
        }
    }

    pub fn from_counts(asset_types: usize, stations: usize, counts: Vec<u32>) -> Result<Self> {
        if asset_types == 0 || stations == 0 {
            return Err(Error::invalid("configuration dimensions must be positive"));
        }
        if counts.len() != asset_types * stations {
            return Err(Error::invalid(format!(
                "expected {}x{} = {} counts, got {}",
                asset_types,
                stations,
                asset_types * stations,
                counts.len()
            )));
        }
        Ok(Configuration {
            asset_types,
            stations,
            counts,
        })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let stations = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != stations) {
            return Err(Error::invalid("ragged configuration rows"));
        }
        Self::from_counts(rows.len(), stations, rows.concat())
    }

    pub fn asset_types(&self) -> usize {
        self.asset_types
    }

    pub fn stations(&self) -> usize {
        self.stations
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, asset_type: usize, station: usize) -> u32 {
        self.counts[asset_type * self.stations + station]
    }

    pub fn set(&mut self, asset_type: usize, station: usize, count: u32) {
        self.counts[asset_type * self.stations + station] = count;
    }

    pub fn row(&self, asset_type: usize) -> &[u32] {
        let start = asset_type * self.stations;
        &self.counts[start..start + self.stations]
    }

    /// Units of `asset_type` summed over all stations.
    pub fn type_total(&self, asset_type: usize) -> u32 {
        self.row(asset_type).iter().sum()
    }

    pub fn total_assets(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, max_count: u32) -> Result<()> {
        match self.counts.iter().position(|&c| c > max_count) {
            Some(idx) => Err(Error::invalid(format!(
                "count {} at ({}, {}) exceeds the per-cell maximum {}",
                self.counts[idx],
                idx / self.stations,
                idx % self.stations,
                max_count
            ))),
            None => Ok(()),
        }
    }

    /// Copy with station columns reordered; `order[k]` names the source column of column `k`.
    pub fn permute_stations(&self, order: &[usize]) -> Configuration {
        let mut out = Configuration::zeros(self.asset_types, self.stations);
        for i in 0..self.asset_types {
            for (k, &src) in order.iter().enumerate() {
                out.set(i, k, self.get(i, src));
            }
        }
        out
    }
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Configuration {}x{} [", self.asset_types, self.stations)?;
        for i in 0..self.asset_types {
            if i > 0 {
                f.write_str(" | ")?;
            }
            for (j, c) in self.row(i).iter().enumerate() {
                if j > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{c}")?;
            }
        }
        f.write_str("]")
    }
}

/// Processing rate of one unit of each asset type, parts/hour.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillProfile {
    pub rates: Vec<u32>,
}

impl SkillProfile {
    pub fn new(rates: Vec<u32>) -> Self {
        SkillProfile { rates }
    }

    pub fn uniform(asset_types: usize, rate: u32) -> Self {
        SkillProfile {
            rates: vec![rate; asset_types],
        }
    }

    /// Machines at [`MACHINE_RATE`] with the last `human_types` asset types at
    /// the moderate human rate. Used wherever a fixed profile is needed
    /// (evaluation, benchmarks, the service).
    pub fn reference(asset_types: usize, human_types: usize) -> Self {
        let mut rates = vec![MACHINE_RATE; asset_types];
        for r in rates.iter_mut().rev().take(human_types) {
            *r = SKILL_RATES[1];
        }
        SkillProfile { rates }
    }
}

/// Capacity label: parts/hour binned down to a multiple of [`CLASS_STEP`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct CapacityClass(u32);

impl CapacityClass {
    pub const COUNT: usize = (MAX_CAPACITY / CLASS_STEP) as usize + 1;

    pub fn new(value: u32) -> Result<Self> {
        if value > MAX_CAPACITY || value % CLASS_STEP != 0 {
            return Err(Error::invalid(format!(
                "capacity class must be a multiple of {CLASS_STEP} in [0, {MAX_CAPACITY}], got {value}"
            )));
        }
        Ok(CapacityClass(value))
    }

    /// Clip to [0, 300] and round down to the class grid.
    pub fn from_throughput(parts_per_hour: u32) -> Self {
        let clipped = parts_per_hour.min(MAX_CAPACITY);
        CapacityClass(clipped - clipped % CLASS_STEP)
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// Position in [`CapacityClass::all`].
    pub fn index(self) -> usize {
        (self.0 / CLASS_STEP) as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then(|| CapacityClass(index as u32 * CLASS_STEP))
    }

    pub fn all() -> impl Iterator<Item = CapacityClass> {
        (0..Self::COUNT).map(|k| CapacityClass(k as u32 * CLASS_STEP))
    }

    /// The ten capacities evaluated in the published comparison (210 is absent there).
    pub fn evaluation_set() -> Vec<CapacityClass> {
        [0, 30, 60, 90, 120, 150, 180, 240, 270, 300]
            .into_iter()
            .map(CapacityClass)
            .collect()
    }
}

impl TryFrom<u32> for CapacityClass {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        CapacityClass::new(v)
    }
}

impl From<CapacityClass> for u32 {
    fn from(c: CapacityClass) -> u32 {
        c.0
    }
}

impl fmt::Display for CapacityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raw bottleneck rate: the smallest per-operation aggregate rate.
pub fn throughput(config: &Configuration, skills: &SkillProfile) -> u32 {
    assert_eq!(
        skills.rates.len(),
        config.asset_types(),
        "skill profile does not match the configuration's asset types"
    );
    (0..config.asset_types())
        .map(|i| config.type_total(i) * skills.rates[i])
        .min()
        .unwrap_or(0)
}

/// Throughput clipped to [0, 300] and binned down to a multiple of 30.
pub fn capacity(config: &Configuration, skills: &SkillProfile) -> u32 {
    CapacityClass::from_throughput(throughput(config, skills)).value()
}

pub fn capacity_class(config: &Configuration, skills: &SkillProfile) -> CapacityClass {
    CapacityClass::from_throughput(throughput(config, skills))
}

/// A configuration embedded in a square grid of reals in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddedGrid {
    pub size: usize,
    pub asset_types: usize,
    pub stations: usize,
    pub values: Vec<f32>,
}

impl PaddedGrid {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.size + col] = v;
    }

    pub fn in_origin(&self, row: usize, col: usize) -> bool {
        row < self.asset_types && col < self.stations
    }
}

/// Affine map between integer counts and the diffusion model's value range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    pub grid_size: usize,
    pub max_count: u32,
}

impl Default for Codec {
    fn default() -> Self {
        Codec {
            grid_size: DEFAULT_GRID_SIZE,
            max_count: DEFAULT_MAX_COUNT,
        }
    }
}

impl Codec {
    pub fn new(grid_size: usize, max_count: u32) -> Result<Self> {
        if grid_size == 0 || max_count == 0 {
            return Err(Error::invalid("grid size and per-cell maximum must be positive"));
        }
        Ok(Codec { grid_size, max_count })
    }

    pub fn encode_count(&self, count: u32) -> f32 {
        2.0 * count as f32 / self.max_count as f32 - 1.0
    }

    pub fn decode_value(&self, v: f32) -> u32 {
        let k = ((v + 1.0) * self.max_count as f32 / 2.0).round();
        if k.is_nan() || k <= 0.0 {
            0
        } else {
            (k as u32).min(self.max_count)
        }
    }

    /// Encoding of an empty cell; the padding value.
    pub fn pad_value(&self) -> f32 {
        -1.0
    }

    pub fn encode(&self, config: &Configuration) -> Result<PaddedGrid> {
        if config.asset_types() > self.grid_size || config.stations() > self.grid_size {
            return Err(Error::invalid(format!(
                "{}x{} configuration does not fit a {} grid",
                config.asset_types(),
                config.stations(),
                self.grid_size
            )));
        }
        config.validate(self.max_count)?;
        let mut grid = self.empty_grid(config.asset_types(), config.stations());
        for i in 0..config.asset_types() {
            for j in 0..config.stations() {
                grid.set(i, j, self.encode_count(config.get(i, j)));
            }
        }
        Ok(grid)
    }

    pub fn decode(&self, grid: &PaddedGrid) -> Configuration {
        let mut config = Configuration::zeros(grid.asset_types, grid.stations);
        for i in 0..grid.asset_types {
            for j in 0..grid.stations {
                config.set(i, j, self.decode_value(grid.get(i, j)));
            }
        }
        config
    }

    pub fn empty_grid(&self, asset_types: usize, stations: usize) -> PaddedGrid {
        PaddedGrid {
            size: self.grid_size,
            asset_types,
            stations,
            values: vec![self.pad_value(); self.grid_size * self.grid_size],
        }
    }

    /// Overwrite everything outside the top-left block with the pad value.
    pub fn clamp_padding(&self, values: &mut [f32], asset_types: usize, stations: usize) {
        let n = self.grid_size;
        for r in 0..n {
            for c in 0..n {
                if r >= asset_types || c >= stations {
                    values[r * n + c] = self.pad_value();
                }
            }
        }
    }
}
