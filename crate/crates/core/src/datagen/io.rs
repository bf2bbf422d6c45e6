use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::geo::{CoordUnits, GridGeoref, RadarSequence, StationSeries, StationSet};

const META: &str = "meta.txt";
const RADAR: &str = "radar.f32";
const GAUGES: &str = "gauges.csv";
const TRUTH: &str = "truth.f32";
const GAUGE_HEADER: [&str; 6] = ["station_id", "x", "y", "t_index", "rain_mm_h", "observed"];

/// How gauge intensities are combined when several source steps are merged
/// into one coarser step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Accumulated depth over the merged steps.
    Sum,
    #[default]
    Mean,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!("unknown aggregation '{other}' (sum | mean)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LoadOptions {
    /// Radar value that marks a missing cell (imputed to 0 dBZ, as is NaN).
    pub missing_sentinel: Option<f32>,
    /// Merge every `factor` consecutive steps into one.
    pub resample: Option<(usize, Aggregation)>,
}

/// Writes `ds` into directory `dir` (created if absent).
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &ds.radar.georef;
    let step = if ds.steps() > 1 {
        ds.radar.timestamps[1] - ds.radar.timestamps[0]
    } else {
        1.0
    };
    let meta = format!(
        "H={}\nW={}\nT={}\nx_min={}\nx_max={}\ny_min={}\ny_max={}\ntimestep_minutes={}\nunits={}\nt0_minutes={}\n",
        g.height,
        g.width,
        ds.steps(),
        g.x_min,
        g.x_max,
        g.y_min,
        g.y_max,
        step,
        g.units.as_str(),
        ds.radar.timestamps[0],
    );
    write_file(&dir.join(META), meta.as_bytes())?;
    write_file(&dir.join(RADAR), &f32_bytes(&ds.radar.values))?;
    if let Some(t) = &ds.truth {
        write_file(&dir.join(TRUTH), &f32_bytes(t))?;
    }

    let path = dir.join(GAUGES);
    let mut wtr = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    wtr.write_record(GAUGE_HEADER).map_err(|e| csv_error(&path, e))?;
    let gs = &ds.gauges;
    for i in 0..gs.len() {
        let (x, y) = gs.stations.coords[i];
        for t in 0..gs.steps {
            let rec = [
                gs.stations.ids[i].clone(),
                x.to_string(),
                y.to_string(),
                t.to_string(),
                gs.value(i, t).to_string(),
                u8::from(gs.observed(i, t)).to_string(),
            ];
            wtr.write_record(&rec).map_err(|e| csv_error(&path, e))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset_with(dir, LoadOptions::default())
}

/// Reads a dataset directory. Gauge rows absent from the table are treated
/// as missing readings.
pub fn load_dataset_with(dir: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&meta_path, format!("line {}", n + 1), format!("expected key=value, got '{line}'")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::format(&meta_path, key, "missing key"))
    };
    let num = |key: &str| -> Result<f64> {
        let v = get(key)?;
        v.parse::<f64>()
            .map_err(|_| Error::format(&meta_path, key, format!("not a number: '{v}'")))
    };
    let count = |key: &str| -> Result<usize> {
        let v = get(key)?;
        v.parse::<usize>()
            .map_err(|_| Error::format(&meta_path, key, format!("not a nonnegative integer: '{v}'")))
    };
    let (h, w, steps) = (count("H")?, count("W")?, count("T")?);
    let units_s = get("units")?;
    let units = CoordUnits::parse(units_s)
        .ok_or_else(|| Error::format(&meta_path, "units", format!("unknown units '{units_s}' (km | deg)")))?;
    let georef = GridGeoref::new(num("x_min")?, num("y_min")?, num("x_max")?, num("y_max")?, h, w)
        .map_err(|e| Error::format(&meta_path, "grid", e.to_string()))?
        .with_units(units);
    let step = num("timestep_minutes")?;
    let t0 = if meta.contains_key("t0_minutes") { num("t0_minutes")? } else { 0.0 };
    let timestamps: Vec<f64> = (0..steps).map(|t| t0 + t as f64 * step).collect();

    let expected = steps * h * w;
    let radar_path = dir.join(RADAR);
    let values = read_f32(&radar_path, expected, "radar")?;
    let radar = RadarSequence::ingest(values, georef, timestamps, opts.missing_sentinel)
        .map_err(|e| Error::format(&radar_path, "radar", e.to_string()))?;

    let truth_path = dir.join(TRUTH);
    let truth = if truth_path.exists() {
        Some(read_f32(&truth_path, expected, "truth")?)
    } else {
        None
    };

    let gauges = read_gauges(&dir.join(GAUGES), &georef, steps)?;
    let ds = Dataset::new(radar, gauges, truth)?;
    match opts.resample {
        Some((factor, agg)) => resample(&ds, factor, agg),
        None => Ok(ds),
    }
}

fn read_gauges(path: &Path, georef: &GridGeoref, steps: usize) -> Result<StationSeries> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().map(str::trim).ne(GAUGE_HEADER) {
        return Err(Error::format(
            path,
            "header",
            format!("expected columns {}, got {}", GAUGE_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut rows: Vec<(usize, usize, f64, bool)> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = n + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse_f = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::format(path, GAUGE_HEADER[i], format!("line {line}: not a number: '{}'", field(i))))
        };
        let id = field(0).to_string();
        let (x, y) = (parse_f(1)?, parse_f(2)?);
        if !(x >= georef.x_min && x <= georef.x_max) {
            return Err(Error::format(path, "x", format!("line {line}: station {id} at x = {x} outside [{}, {}]", georef.x_min, georef.x_max)));
        }
        if !(y >= georef.y_min && y <= georef.y_max) {
            return Err(Error::format(path, "y", format!("line {line}: station {id} at y = {y} outside [{}, {}]", georef.y_min, georef.y_max)));
        }
        let t: usize = field(3)
            .parse()
            .map_err(|_| Error::format(path, "t_index", format!("line {line}: bad step '{}'", field(3))))?;
        if t >= steps {
            return Err(Error::format(path, "t_index", format!("line {line}: step {t} beyond T = {steps}")));
        }
        let rain = parse_f(4)?;
        let observed = match field(5) {
            "1" => true,
            "0" => false,
            other => return Err(Error::format(path, "observed", format!("line {line}: expected 0 or 1, got '{other}'"))),
        };
        if observed && !(rain >= 0.0) {
            return Err(Error::format(path, "rain_mm_h", format!("line {line}: observed rain must be nonnegative, got {rain}")));
        }
        let s = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id.clone());
            coords.push((x, y));
            ids.len() - 1
        });
        if coords[s] != (x, y) {
            return Err(Error::format(path, "x", format!("line {line}: station {id} changes position")));
        }
        rows.push((s, t, rain, observed));
    }
    let n = ids.len();
    let mut rain = vec![0.0; n * steps];
    let mut mask = vec![false; n * steps];
    for (s, t, r, o) in rows {
        rain[s * steps + t] = r;
        mask[s * steps + t] = o;
    }
    let stations = StationSet::new(ids, coords, vec![false; n], georef).map_err(|e| Error::format(path, "station_id", e.to_string()))?;
    StationSeries::new(stations, steps, rain, mask).map_err(|e| Error::format(path, "rain_mm_h", e.to_string()))
}

/// Merges every `factor` consecutive steps. Gauges combine by `agg` over
/// their observed readings (a merged step is observed when any source step
/// is); radar and truth frames are averaged.
pub fn resample(ds: &Dataset, factor: usize, agg: Aggregation) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::Config("resampling factor must be positive".into()));
    }
    let steps = ds.steps() / factor;
    if steps == 0 {
        return Err(Error::Domain(format!("{} steps cannot be merged by {factor}", ds.steps())));
    }
    let m = ds.radar.georef.cells();
    let avg_frames = |v: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; steps * m];
        for t in 0..steps {
            for c in 0..m {
                let s: f64 = (0..factor).map(|k| v[(t * factor + k) * m + c] as f64).sum();
                out[t * m + c] = (s / factor as f64) as f32;
            }
        }
        out
    };
    let radar_vals = avg_frames(&ds.radar.values);
    let truth = ds.truth.as_ref().map(|t| avg_frames(t));
    let timestamps = (0..steps).map(|t| ds.radar.timestamps[t * factor]).collect();
    let gs = &ds.gauges;
    let mut rain = Vec::with_capacity(gs.len() * steps);
    let mut mask = Vec::with_capacity(gs.len() * steps);
    for i in 0..gs.len() {
        for t in 0..steps {
            let obs: Vec<f64> = (0..factor)
                .map(|k| t * factor + k)
                .filter(|&s| gs.observed(i, s))
                .map(|s| gs.value(i, s))
                .collect();
            let v = match agg {
                Aggregation::Sum => obs.iter().sum(),
                Aggregation::Mean if obs.is_empty() => 0.0,
                Aggregation::Mean => obs.iter().sum::<f64>() / obs.len() as f64,
            };
            rain.push(v);
            mask.push(!obs.is_empty());
        }
    }
    let radar = RadarSequence::new(radar_vals, ds.radar.georef, timestamps)?;
    let gauges = StationSeries::new(gs.stations.clone(), steps, rain, mask)?;
    Dataset::new(radar, gauges, truth)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f32(path: &Path, expected: usize, field: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::format(
            path,
            field,
            format!("expected {expected} float32 values, found {} bytes ({} values)", bytes.len(), bytes.len() / 4),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, "csv", e.to_string())
}
