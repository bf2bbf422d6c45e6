//! Georeferenced grids, gauge geometry and station graphs.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Units of a dataset's coordinates. Distances are always planar Euclidean
/// in these units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoordUnits {
    #[default]
    Kilometers,
    Degrees,
}

impl CoordUnits {
    pub fn as_str(self) -> &'static str {
        match self {
            CoordUnits::Kilometers => "km",
            CoordUnits::Degrees => "deg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "km" => Some(CoordUnits::Kilometers),
            "deg" | "degrees" => Some(CoordUnits::Degrees),
            _ => None,
        }
    }
}

/// Axis-aligned regular grid. Row `r` spans `y_min + r*dy .. y_min + (r+1)*dy`,
/// column `c` spans `x_min + c*dx .. x_min + (c+1)*dx`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeoref {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub height: usize,
    pub width: usize,
    pub units: CoordUnits,
}

impl GridGeoref {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, height: usize, width: usize) -> Result<Self> {
        let g = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            height,
            width,
            units: CoordUnits::Kilometers,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_units(mut self, units: CoordUnits) -> Self {
        self.units = units;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.y_min.is_finite() && self.y_max.is_finite()) {
            return Err(Error::Domain("grid bounds must be finite".into()));
        }
        if self.x_max <= self.x_min {
            return Err(Error::Domain(format!("x_max {} must exceed x_min {}", self.x_max, self.x_min)));
        }
        if self.y_max <= self.y_min {
            return Err(Error::Domain(format!("y_max {} must exceed y_min {}", self.y_max, self.y_min)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Domain(format!("grid must have at least one cell, got {}x{}", self.height, self.width)));
        }
        Ok(())
    }

    pub fn cell_dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.width as f64
    }

    pub fn cell_dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.height as f64
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Cell `(row, col)` containing `(x, y)` under the floor rule; the closing
    /// edges `x_max` / `y_max` belong to the last column / row.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let col = axis_index(x, self.x_min, self.x_max, self.width).ok_or_else(|| {
            Error::Domain(format!("x = {x} outside [{}, {}]", self.x_min, self.x_max))
        })?;
        let row = axis_index(y, self.y_min, self.y_max, self.height).ok_or_else(|| {
            Error::Domain(format!("y = {y} outside [{}, {}]", self.y_min, self.y_max))
        })?;
        Ok((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_dx(),
            self.y_min + (row as f64 + 0.5) * self.cell_dy(),
        )
    }

    /// Coordinates mapped onto `[0, 1]^2`.
    pub fn normalized(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / (self.x_max - self.x_min), (y - self.y_min) / (self.y_max - self.y_min))
    }

    /// Continuous cell-index coordinates: cell centers sit at integers.
    pub fn fractional_index(&self, x: f64, y: f64) -> (f64, f64) {
        ((y - self.y_min) / self.cell_dy() - 0.5, (x - self.x_min) / self.cell_dx() - 0.5)
    }
}

fn axis_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let idx = ((v - lo) / (hi - lo) * n as f64).floor() as usize;
    Some(idx.min(n - 1))
}

/// Free-function form of [`GridGeoref::cell_of`].
pub fn grid_cell_of(georef: &GridGeoref, x: f64, y: f64) -> Result<(usize, usize)> {
    georef.cell_of(x, y)
}

/// Dense `T x H x W` reflectivity sequence in dBZ.
///
/// Values are stored at 32-bit precision, which is also the on-disk precision,
/// so round-trips through files are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarSequence {
    pub values: Vec<f32>,
    pub georef: GridGeoref,
    /// Minutes since the start of the record, strictly increasing.
    pub timestamps: Vec<f64>,
}

impl RadarSequence {
    pub fn new(values: Vec<f32>, georef: GridGeoref, timestamps: Vec<f64>) -> Result<Self> {
        let r = Self { values, georef, timestamps };
        r.validate()?;
        Ok(r)
    }

    /// Builds a sequence from raw values in which missing cells are NaN or
    /// equal to `missing_sentinel`; both are imputed to 0 dBZ.
    pub fn ingest(mut values: Vec<f32>, georef: GridGeoref, timestamps: Vec<f64>, missing_sentinel: Option<f32>) -> Result<Self> {
        for v in &mut values {
            if v.is_nan() || Some(*v) == missing_sentinel {
                *v = 0.0;
            }
        }
        Self::new(values, georef, timestamps)
    }

    pub fn validate(&self) -> Result<()> {
        self.georef.validate()?;
        if self.timestamps.is_empty() {
            return Err(Error::Domain("radar sequence needs at least one step".into()));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("radar timestamps must be strictly increasing".into()));
        }
        let expected = self.timestamps.len() * self.georef.cells();
        if self.values.len() != expected {
            return Err(Error::Shape(format!("radar holds {} values, expected {expected}", self.values.len())));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("radar values must be finite".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let m = self.georef.cells();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn at(&self, t: usize, row: usize, col: usize) -> f32 {
        self.values[(t * self.georef.height + row) * self.georef.width + col]
    }

    /// Steps `range` as a new sequence.
    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> RadarSequence {
        let m = self.georef.cells();
        RadarSequence {
            values: self.values[range.start * m..range.end * m].to_vec(),
            georef: self.georef,
            timestamps: self.timestamps[range].to_vec(),
        }
    }
}

/// Reconstructed `H x W` rainfall field in mm/h (row-major, row 0 at `y_min`).
#[derive(Clone, Debug, PartialEq)]
pub struct RainField {
    pub values: Vec<f64>,
    pub georef: GridGeoref,
}

impl RainField {
    pub fn new(values: Vec<f64>, georef: GridGeoref) -> Result<Self> {
        if values.len() != georef.cells() {
            return Err(Error::Shape(format!("field holds {} values, grid has {} cells", values.len(), georef.cells())));
        }
        Ok(Self { values, georef })
    }

    /// Evaluates `f(x, y)` at every cell center.
    pub fn from_fn(georef: GridGeoref, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(georef.cells());
        for r in 0..georef.height {
            for c in 0..georef.width {
                let (x, y) = georef.cell_center(r, c);
                values.push(f(x, y));
            }
        }
        Self { values, georef }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.georef.width + col]
    }

    /// Value of the cell containing `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        let (r, c) = self.georef.cell_of(x, y)?;
        Ok(self.at(r, c))
    }
}

/// Gauge (or virtual-node) locations.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StationSet {
    pub ids: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    pub is_virtual: Vec<bool>,
}

impl StationSet {
    pub fn new(ids: Vec<String>, coords: Vec<(f64, f64)>, is_virtual: Vec<bool>, georef: &GridGeoref) -> Result<Self> {
        let s = Self { ids, coords, is_virtual };
        s.validate(georef)?;
        Ok(s)
    }

    pub fn validate(&self, georef: &GridGeoref) -> Result<()> {
        if self.ids.len() != self.coords.len() || self.ids.len() != self.is_virtual.len() {
            return Err(Error::Shape("station ids, coords and flags differ in length".into()));
        }
        let mut seen = HashSet::new();
        for (id, &(x, y)) in self.ids.iter().zip(&self.coords) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Domain(format!("duplicate station id {id}")));
            }
            if !georef.contains(x, y) {
                return Err(Error::Domain(format!("station {id} at ({x}, {y}) lies outside the grid")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> StationSet {
        StationSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            is_virtual: idx.iter().map(|&i| self.is_virtual[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &StationSet) {
        self.ids.extend(other.ids.iter().cloned());
        self.coords.extend(&other.coords);
        self.is_virtual.extend(&other.is_virtual);
    }
}

/// Rainfall series per station, `N x T` row-major in mm/h.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StationSeries {
    pub stations: StationSet,
    pub steps: usize,
    pub rain: Vec<f64>,
    /// `true` where the reading is observed, `false` for missing / withheld.
    pub mask: Vec<bool>,
}

impl StationSeries {
    pub fn new(stations: StationSet, steps: usize, rain: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let s = Self { stations, steps, rain, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(steps: usize) -> Self {
        Self {
            steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stations.len() * self.steps;
        if self.rain.len() != n || self.mask.len() != n {
            return Err(Error::Shape(format!(
                "station series expects {n} entries, has {} rain / {} mask",
                self.rain.len(),
                self.mask.len()
            )));
        }
        for (i, (&r, &m)) in self.rain.iter().zip(&self.mask).enumerate() {
            if m && r < 0.0 {
                return Err(Error::Domain(format!(
                    "negative rain {r} at station {} step {}",
                    self.stations.ids[i / self.steps],
                    i % self.steps
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn value(&self, station: usize, t: usize) -> f64 {
        self.rain[station * self.steps + t]
    }

    pub fn observed(&self, station: usize, t: usize) -> bool {
        self.mask[station * self.steps + t]
    }

    pub fn select(&self, idx: &[usize]) -> StationSeries {
        let mut rain = Vec::with_capacity(idx.len() * self.steps);
        let mut mask = Vec::with_capacity(idx.len() * self.steps);
        for &i in idx {
            rain.extend_from_slice(&self.rain[i * self.steps..(i + 1) * self.steps]);
            mask.extend_from_slice(&self.mask[i * self.steps..(i + 1) * self.steps]);
        }
        StationSeries {
            stations: self.stations.select(idx),
            steps: self.steps,
            rain,
            mask,
        }
    }

    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> StationSeries {
        let mut rain = Vec::new();
        let mut mask = Vec::new();
        for i in 0..self.len() {
            rain.extend_from_slice(&self.rain[i * self.steps + range.start..i * self.steps + range.end]);
            mask.extend_from_slice(&self.mask[i * self.steps + range.start..i * self.steps + range.end]);
        }
        StationSeries {
            stations: self.stations.clone(),
            steps: range.len(),
            rain,
            mask,
        }
    }

    /// Appends the stations of `other`, which must span the same steps.
    pub fn extend(&mut self, other: &StationSeries) {
        assert_eq!(self.steps, other.steps, "cannot merge series of different lengths");
        self.stations.extend(&other.stations);
        self.rain.extend_from_slice(&other.rain);
        self.mask.extend_from_slice(&other.mask);
    }

    /// Observed `(x, y, rain)` triples at step `t`.
    pub fn observations_at(&self, t: usize) -> Vec<(f64, f64, f64)> {
        (0..self.len())
            .filter(|&i| self.observed(i, t))
            .map(|i| {
                let (x, y) = self.stations.coords[i];
                (x, y, self.value(i, t))
            })
            .collect()
    }
}

/// Undirected neighbour lists; every list is sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

impl Adjacency {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, ns)| ns.iter().all(|&j| self.neighbors[j].binary_search(&i).is_ok()))
    }

    /// Graph with no edges; every node aggregates only itself.
    pub fn isolated(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
            k: 0,
        }
    }
}

/// k-nearest-neighbour graph over planar positions, closed under symmetry.
/// Ties in distance go to the lower index.
pub fn knn_adjacency(coords: &[(f64, f64)], k: usize) -> Result<Adjacency> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::Domain(format!("kNN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Domain(format!("k = {k} must satisfy 1 <= k < N = {n}")));
    }
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &(xi, yi)) in coords.iter().enumerate() {
        let mut cand: Vec<(f64, usize)> = coords
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, &(xj, yj))| ((xi - xj).powi(2) + (yi - yj).powi(2), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
    }
    for ns in &mut neighbors {
        ns.sort_unstable();
        ns.dedup();
    }
    Ok(Adjacency { neighbors, k })
}
