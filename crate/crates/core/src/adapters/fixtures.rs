//! Fixture-backed urban data.
//!
//! A fixture directory has this layout (all files JSON):
//!
//! ```text
//! gazetteer.json          [{"name", "category", "lat", "lon"}]
//! series/<domain>.json    {"domain", "unit", "step_secs",
//!                          "stations": [{"name", "lat", "lon", "category"?,
//!                                        "start", "values": [number|null]}]}
//! taxis.json              {"timestamp", "taxis": [{"id", "lat", "lon"}]}
//! bus_timetable.json      {"stops": {"<code>": {"name", "lat", "lon",
//!                          "services": {"<no>": [{"time": "HH:MM", "load"}]}}}}
//! events/<domain>.json    {"domain", "start", "end", "events": [{"time", "lat", "lon"}]}
//! trajectories/<name>.json {"name", "domain", "fixes": [{"time", "lat"?, "lon"?}]}
//! ```
//!
//! Timestamps are RFC 3339. In file names, spaces in a domain become `_`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::NaiveTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::Timestamp;

use super::geo::haversine_m;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Format { path: String, source: serde_json::Error },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazetteerEntry {
    pub name: String,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
}

impl GazetteerEntry {
    pub fn pos(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

/// Folds case and runs of whitespace so lookups ignore both.
pub fn fold_name(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gazetteer {
    entries: Vec<GazetteerEntry>,
    by_name: BTreeMap<String, usize>,
}

impl Gazetteer {
    pub fn new(entries: Vec<GazetteerEntry>) -> Result<Self, String> {
        let mut by_name = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if !(-90.0..=90.0).contains(&e.lat) || !(-180.0..=180.0).contains(&e.lon) {
                return Err(format!("'{}' has coordinates out of range", e.name));
            }
            if by_name.insert(fold_name(&e.name), i).is_some() {
                return Err(format!("duplicate place name '{}'", e.name));
            }
        }
        Ok(Gazetteer { entries, by_name })
    }

    pub fn entries(&self) -> &[GazetteerEntry] {
        &self.entries
    }

    /// Case-insensitive exact lookup.
    pub fn lookup(&self, name: &str) -> Option<&GazetteerEntry> {
        self.by_name.get(&fold_name(name)).map(|&i| &self.entries[i])
    }

    /// Entry nearest to `pos`; ties keep the earlier entry.
    pub fn nearest(&self, pos: (f64, f64)) -> Option<&GazetteerEntry> {
        super::geo::nearest_index(self.entries.iter().map(GazetteerEntry::pos), pos).map(|i| &self.entries[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub category: Option<String>,
    pub start: Timestamp,
    pub values: Vec<Option<f64>>,
}

impl Station {
    pub fn pos(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesFixture {
    pub domain: String,
    pub unit: String,
    pub step_secs: i64,
    pub stations: Vec<Station>,
}

impl SeriesFixture {
    pub fn nearest_station(&self, pos: (f64, f64)) -> Option<&Station> {
        super::geo::nearest_index(self.stations.iter().map(Station::pos), pos).map(|i| &self.stations[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxi {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiSnapshot {
    pub timestamp: Timestamp,
    pub taxis: Vec<Taxi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusCall {
    /// Daily time of arrival, `HH:MM`.
    pub time: String,
    /// Load level: SEA (seats available), SDA (standing available) or LSD
    /// (limited standing).
    pub load: String,
}

impl BusCall {
    pub fn time_of_day(&self) -> Option<NaiveTime> {
        NaiveTime::parse_from_str(&self.time, "%H:%M").ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusStop {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub services: BTreeMap<String, Vec<BusCall>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusTimetable {
    pub stops: BTreeMap<String, BusStop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: Timestamp,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventHistory {
    pub domain: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub events: Vec<Event>,
}

impl EventHistory {
    /// Events within `radius_m` of `center`, or all of them.
    pub fn count_near(&self, center: Option<(f64, f64)>, radius_m: f64) -> usize {
        match center {
            None => self.events.len(),
            Some(c) => self.events.iter().filter(|e| haversine_m((e.lat, e.lon), c) <= radius_m).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFix {
    pub time: Timestamp,
    #[serde(default)]
    pub lat: Option<f64>,
    #[serde(default)]
    pub lon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub name: String,
    #[serde(default)]
    pub domain: Option<String>,
    pub fixes: Vec<TrajectoryFix>,
}

/// Normalized file key for a domain: lower case, spaces to `_`.
pub fn domain_key(domain: &str) -> String {
    fold_name(domain).replace(' ', "_")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fixtures {
    pub gazetteer: Gazetteer,
    pub series: BTreeMap<String, SeriesFixture>,
    pub taxis: Option<TaxiSnapshot>,
    pub bus: Option<BusTimetable>,
    pub events: BTreeMap<String, EventHistory>,
    pub trajectories: BTreeMap<String, Trajectory>,
}

macro_rules! builtin_file {
    ($p:literal) => {
        ($p, include_str!(concat!("../../assets/fixtures/", $p)))
    };
}

const BUILTIN_FILES: &[(&str, &str)] = &[
    builtin_file!("gazetteer.json"),
    builtin_file!("taxis.json"),
    builtin_file!("bus_timetable.json"),
    builtin_file!("series/parking.json"),
    builtin_file!("series/traffic_speed.json"),
    builtin_file!("series/precipitation.json"),
    builtin_file!("series/air.json"),
    builtin_file!("events/traffic_accident.json"),
    builtin_file!("trajectories/trajectory_records.json"),
];

fn parse<T: for<'de> Deserialize<'de>>(path: &str, text: &str) -> Result<T, FixtureError> {
    serde_json::from_str(text).map_err(|source| FixtureError::Format { path: path.to_string(), source })
}

impl Fixtures {
    /// The fixtures shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_files(BUILTIN_FILES.iter().map(|(p, t)| (p.to_string(), t.to_string()))).expect("shipped fixtures are valid")
    }

    /// Reads a fixture directory. Missing optional files are left empty.
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let mut files = Vec::new();
        for name in ["gazetteer.json", "taxis.json", "bus_timetable.json"] {
            let p = dir.join(name);
            if p.exists() {
                files.push((name.to_string(), read(&p)?));
            }
        }
        for sub in ["series", "events", "trajectories"] {
            let d = dir.join(sub);
            let Ok(listing) = fs::read_dir(&d) else { continue };
            let mut names: Vec<String> = listing
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".json"))
                .collect();
            names.sort();
            for n in names {
                files.push((format!("{sub}/{n}"), read(&d.join(&n))?));
            }
        }
        Self::from_files(files)
    }

    fn from_files(files: impl IntoIterator<Item = (String, String)>) -> Result<Self, FixtureError> {
        let mut fx = Fixtures::default();
        for (path, text) in files {
            let invalid = |reason: String| FixtureError::Invalid { path: path.clone(), reason };
            match path.split_once('/') {
                None if path == "gazetteer.json" => {
                    fx.gazetteer = Gazetteer::new(parse(&path, &text)?).map_err(invalid)?;
                }
                None if path == "taxis.json" => fx.taxis = Some(parse(&path, &text)?),
                None if path == "bus_timetable.json" => fx.bus = Some(parse(&path, &text)?),
                Some(("series", _)) => {
                    let s: SeriesFixture = parse(&path, &text)?;
                    if s.step_secs <= 0 {
                        return Err(invalid("step_secs must be positive".into()));
                    }
                    fx.series.insert(domain_key(&s.domain), s);
                }
                Some(("events", _)) => {
                    let e: EventHistory = parse(&path, &text)?;
                    fx.events.insert(domain_key(&e.domain), e);
                }
                Some(("trajectories", file)) => {
                    let t: Trajectory = parse(&path, &text)?;
                    fx.trajectories.insert(file.trim_end_matches(".json").to_string(), t);
                }
                _ => {}
            }
        }
        Ok(fx)
    }
}

fn read(path: &Path) -> Result<String, FixtureError> {
    fs::read_to_string(path).map_err(|source| FixtureError::Io { path: path.display().to_string(), source })
}
