//! Deterministic adapters for every task type, backed by [`fixtures`].
//!
//! [`StubAdapters`] answers from local fixture data with baseline
//! algorithms (seasonal-naive forecasting, linear interpolation, rolling
//! z-scores, great-circle travel time). It is registered under both the
//! `stub` and `builtin` binding schemes.

pub mod fixtures;
pub mod geo;
pub mod series;

use std::sync::Arc;

use chrono::{Duration, TimeZone};
use serde_json::{json, Value};

use crate::executor::{
    fmt_time, Adapter, AdapterCall, AdapterError, AdapterSet, GeoPoint, OutputValue, Record, ResolvedArg, Series,
    Timestamp,
};
use crate::plan::TaskType;

pub use fixtures::{Fixtures, FixtureError};

use fixtures::{domain_key, SeriesFixture, Station};
use geo::haversine_m;

/// Tunables for the stub adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    /// Seasonal period of hourly series, in steps.
    pub period: usize,
    /// Trailing window for anomaly z-scores.
    pub window: usize,
    pub z_threshold: f64,
    /// Horizon when a forecast has no `time` argument.
    pub default_steps: usize,
    pub max_short_steps: usize,
    pub max_long_steps: usize,
    pub max_trajectory_steps: usize,
    pub speed_kmh: f64,
    /// Two points closer than this are reported as the same place.
    pub same_place_m: f64,
    pub top_k: usize,
    pub event_radius_m: f64,
    pub taxi_radius_m: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            period: 24,
            window: 24,
            z_threshold: 3.0,
            default_steps: 24,
            max_short_steps: 48,
            max_long_steps: 56 * 24,
            max_trajectory_steps: 1000,
            speed_kmh: 40.0,
            same_place_m: 150.0,
            top_k: 5,
            event_radius_m: 5000.0,
            taxi_radius_m: 1000.0,
        }
    }
}

/// Fixture-backed implementation of all thirteen task types.
#[derive(Debug, Clone)]
pub struct StubAdapters {
    fixtures: Arc<Fixtures>,
    config: StubConfig,
}

impl StubAdapters {
    pub fn new(fixtures: Fixtures, config: StubConfig) -> Self {
        StubAdapters { fixtures: Arc::new(fixtures), config }
    }

    /// Built-in fixtures with default settings.
    pub fn builtin() -> Self {
        Self::new(Fixtures::builtin(), StubConfig::default())
    }

    pub fn fixtures(&self) -> &Fixtures {
        &self.fixtures
    }

    /// An adapter set with this adapter under `stub` and `builtin`.
    pub fn into_set(self) -> AdapterSet {
        let shared: Arc<dyn Adapter> = Arc::new(self);
        let mut set = AdapterSet::new();
        set.register_shared("stub", shared.clone()).register_shared("builtin", shared);
        set
    }
}

impl AdapterSet {
    /// [`StubAdapters::builtin`] under both schemes.
    pub fn stubs() -> Self {
        StubAdapters::builtin().into_set()
    }
}

impl Adapter for StubAdapters {
    fn invoke(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        match call.task {
            TaskType::TimeSeriesPrediction => self.forecast(call, self.config.max_short_steps),
            TaskType::LongTimeSeriesPrediction => self.forecast(call, self.config.max_long_steps),
            TaskType::TimeSeriesAnomalyDetection => self.anomalies(call),
            TaskType::TimeSeriesImputation => self.imputation(call),
            TaskType::EventPrediction => self.events(call),
            TaskType::TrajectoryCompletion => self.trajectory_completion(call),
            TaskType::TrajectoryPrediction => self.trajectory_prediction(call),
            TaskType::ArrivalTimeEstimation => self.arrival(call),
            TaskType::TaxiAvailability => self.taxis(call),
            TaskType::SpatialRelationshipInfer => self.spatial(call),
            TaskType::Recommendation => self.recommend(call),
            TaskType::BusArrival => self.bus(call),
            TaskType::MapMapping => self.map_mapping(call),
        }
    }
}

// ---- argument helpers ----

fn parse_latlon(text: &str) -> Option<GeoPoint> {
    let (a, b) = text.trim().trim_start_matches('(').trim_end_matches(')').split_once(',')?;
    let (lat, lon) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
    ((-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)).then(|| GeoPoint::new(lat, lon))
}

/// Points from `location_gps_list`: upstream outputs or literal `lat,lon` text.
fn gps_points(call: &AdapterCall<'_>) -> Vec<GeoPoint> {
    let Some(arg) = call.arg("location_gps_list") else { return Vec::new() };
    let mut pts = arg.points();
    if pts.is_empty() {
        pts = arg.texts().iter().filter_map(|t| parse_latlon(t)).collect();
    }
    pts
}

fn first_text(call: &AdapterCall<'_>, name: &str) -> Option<String> {
    call.arg(name).and_then(|a| a.texts().into_iter().next()).map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

fn target(call: &AdapterCall<'_>) -> Result<Option<Timestamp>, AdapterError> {
    call.arg("time").map(|a| series::target_time(a, call.clock)).transpose()
}

fn record(pairs: Vec<(&str, Value)>) -> Record {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn z_value(z: f64) -> Value {
    if z.is_finite() {
        json!(round3(z))
    } else if z > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

/// Series fixture for a domain, accepting a few everyday synonyms.
fn series_for<'a>(fx: &'a Fixtures, domain: Option<&str>) -> Result<&'a SeriesFixture, AdapterError> {
    let domain = domain.ok_or_else(|| AdapterError::MissingArgument("domain".into()))?;
    let key = domain_key(domain);
    let key = match key.as_str() {
        "air_quality" | "pm2.5" | "pm25" => "air",
        "traffic" | "speed" | "traffic_speeds" => "traffic_speed",
        "rain" | "rainfall" | "weather" => "precipitation",
        "carpark" | "car_park" | "parking_lots" => "parking",
        k => k,
    };
    fx.series.get(key).ok_or_else(|| AdapterError::FixtureMissing(format!("series for domain '{domain}'")))
}

fn station_label(s: &SeriesFixture, st: &Station) -> String {
    format!("{} {}", st.name, s.domain)
}

impl StubAdapters {
    fn forecast(&self, call: &AdapterCall<'_>, max_steps: usize) -> Result<OutputValue, AdapterError> {
        let fx = series_for(&self.fixtures, first_text(call, "domain").as_deref())?;
        let at = gps_points(call).into_iter().next().ok_or_else(|| AdapterError::MissingArgument("location_gps_list".into()))?;
        let st = fx.nearest_station((at.lat, at.lon)).ok_or(AdapterError::EmptyHistory)?;
        if st.values.is_empty() {
            return Err(AdapterError::EmptyHistory);
        }
        let history = series::impute(&st.values)?;
        let last = st.start + Duration::seconds(fx.step_secs * (history.len() as i64 - 1));
        let steps = match target(call)? {
            Some(t) => series::steps_until(last, fx.step_secs, t),
            None => self.config.default_steps,
        };
        let values = series::seasonal_naive(&history, self.config.period, steps, max_steps)?;
        Ok(OutputValue::Series(Series {
            label: format!("{} forecast", station_label(fx, st)),
            unit: fx.unit.clone(),
            start: last + Duration::seconds(fx.step_secs),
            step_secs: fx.step_secs,
            values,
        }))
    }

    fn stations<'a>(&self, call: &AdapterCall<'_>, fx: &'a SeriesFixture) -> Vec<&'a Station> {
        match gps_points(call).first() {
            Some(p) => fx.nearest_station((p.lat, p.lon)).into_iter().collect(),
            None => fx.stations.iter().collect(),
        }
    }

    fn anomalies(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let fx = series_for(&self.fixtures, first_text(call, "domain").as_deref())?;
        let mut records = Vec::new();
        for st in self.stations(call, fx) {
            let values = series::impute(&st.values)?;
            for (i, z) in series::zscore_anomalies(&values, self.config.window, self.config.z_threshold)? {
                let t = st.start + Duration::seconds(fx.step_secs * i as i64);
                records.push(record(vec![
                    ("station", json!(st.name)),
                    ("time", json!(fmt_time(&t))),
                    ("value", json!(values[i])),
                    ("z", z_value(z)),
                ]));
            }
        }
        Ok(OutputValue::Records { records })
    }

    fn imputation(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let fx = series_for(&self.fixtures, first_text(call, "domain").as_deref())?;
        let located = !gps_points(call).is_empty();
        let mut records = Vec::new();
        for st in self.stations(call, fx) {
            let filled = series::impute(&st.values)?;
            if located {
                return Ok(OutputValue::Series(Series {
                    label: format!("{} (imputed)", station_label(fx, st)),
                    unit: fx.unit.clone(),
                    start: st.start,
                    step_secs: fx.step_secs,
                    values: filled,
                }));
            }
            for (i, v) in st.values.iter().enumerate() {
                if v.is_none() {
                    let t = st.start + Duration::seconds(fx.step_secs * i as i64);
                    records.push(record(vec![
                        ("station", json!(st.name)),
                        ("time", json!(fmt_time(&t))),
                        ("value", json!(round3(filled[i]))),
                    ]));
                }
            }
        }
        Ok(OutputValue::Records { records })
    }

    fn events(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let domain = first_text(call, "domain").ok_or_else(|| AdapterError::MissingArgument("domain".into()))?;
        let hist = self
            .fixtures
            .events
            .get(&domain_key(&domain))
            .ok_or_else(|| AdapterError::FixtureMissing(format!("event history for '{domain}'")))?;
        let days = (hist.end - hist.start).num_seconds() as f64 / 86_400.0;
        if days <= 0.0 {
            return Err(AdapterError::EmptyHistory);
        }
        let center = gps_points(call).first().map(|p| (p.lat, p.lon));
        let count = hist.count_near(center, self.config.event_radius_m);
        let horizon_days = match target(call)? {
            Some(t) => ((t - call.clock).num_seconds() as f64 / 86_400.0).max(1.0 / 24.0),
            None => 1.0,
        };
        let rate = count as f64 / days;
        let expected = rate * horizon_days;
        let mut r = record(vec![
            ("domain", json!(hist.domain)),
            ("history_days", json!(round3(days))),
            ("events_in_history", json!(count)),
            ("rate_per_day", json!(round3(rate))),
            ("horizon_days", json!(round3(horizon_days))),
            ("expected_events", json!(round3(expected))),
            ("p_at_least_one", json!(round3(1.0 - (-expected).exp()))),
        ]);
        if center.is_some() {
            r.insert("radius_m".into(), json!(self.config.event_radius_m));
        }
        Ok(OutputValue::Records { records: vec![r] })
    }

    /// Fixes from the `input` argument: a named trajectory fixture or
    /// upstream points.
    fn fixes(&self, call: &AdapterCall<'_>) -> Result<Vec<series::Fix>, AdapterError> {
        let arg = call.arg("input").ok_or_else(|| AdapterError::MissingArgument("input".into()))?;
        let pts = arg.points();
        if !pts.is_empty() {
            return Ok(pts.iter().filter_map(|p| p.time.map(|time| series::Fix { time, pos: Some((p.lat, p.lon)) })).collect());
        }
        let name = arg.texts().into_iter().next().unwrap_or_default();
        let traj = self
            .fixtures
            .trajectories
            .get(name.trim())
            .ok_or_else(|| AdapterError::FixtureMissing(format!("trajectory '{name}'")))?;
        Ok(traj
            .fixes
            .iter()
            .map(|f| series::Fix { time: f.time, pos: f.lat.zip(f.lon) })
            .collect())
    }

    fn trajectory_completion(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        Ok(OutputValue::Points { points: series::complete_trajectory(&self.fixes(call)?)? })
    }

    fn trajectory_prediction(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let known: Vec<GeoPoint> = self
            .fixes(call)?
            .into_iter()
            .filter_map(|f| f.pos.map(|(lat, lon)| GeoPoint::new(lat, lon).at(f.time)))
            .collect();
        let points = series::predict_trajectory(&known, target(call)?, self.config.max_trajectory_steps)?;
        Ok(OutputValue::Points { points })
    }

    fn arrival(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let pts = gps_points(call);
        if pts.len() < 2 {
            return Err(AdapterError::MissingDeparture);
        }
        let (dest, origin) = (&pts[0], &pts[pts.len() - 1]);
        let depart = target(call)?.unwrap_or(call.clock);
        let metres = haversine_m((origin.lat, origin.lon), (dest.lat, dest.lon));
        let secs = (metres / (self.config.speed_kmh * 1000.0 / 3600.0)).round() as i64;
        let arrive = depart + Duration::seconds(secs);
        Ok(OutputValue::Points { points: vec![dest.clone().at(arrive), origin.clone().at(depart)] })
    }

    fn taxis(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let snap = self.fixtures.taxis.as_ref().ok_or_else(|| AdapterError::FixtureMissing("taxi snapshot".into()))?;
        let at = gps_points(call).into_iter().next().ok_or_else(|| AdapterError::MissingArgument("location_gps_list".into()))?;
        let radius = match first_text(call, "task_specific") {
            Some(t) => geo::parse_radius_m(&t)
                .ok_or_else(|| AdapterError::BadArgument { name: "task_specific".into(), reason: format!("'{t}' is not a radius") })?,
            None => self.config.taxi_radius_m,
        };
        let mut near: Vec<(f64, GeoPoint)> = snap
            .taxis
            .iter()
            .map(|t| (haversine_m((t.lat, t.lon), (at.lat, at.lon)), GeoPoint::named(&t.id, t.lat, t.lon).at(snap.timestamp)))
            .filter(|(d, _)| *d <= radius)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.name.cmp(&b.1.name)));
        Ok(OutputValue::Points { points: near.into_iter().map(|(_, p)| p).collect() })
    }

    fn spatial(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let pts = gps_points(call);
        if pts.len() < 2 {
            return Err(AdapterError::FewerThanTwoPoints);
        }
        let label = |p: &GeoPoint, i: usize| p.name.clone().unwrap_or_else(|| format!("point {i}"));
        let mut records = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = haversine_m((pts[i].lat, pts[i].lon), (pts[j].lat, pts[j].lon));
                records.push(record(vec![
                    ("a", json!(label(&pts[i], i))),
                    ("b", json!(label(&pts[j], j))),
                    ("distance_m", json!(d.round())),
                    ("same_place", json!(d < self.config.same_place_m)),
                ]));
            }
        }
        Ok(OutputValue::Records { records })
    }

    fn recommend(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let wanted = first_text(call, "task_specific").ok_or_else(|| AdapterError::MissingArgument("task_specific".into()))?;
        let cat = normalize_category(&wanted);
        let origin = gps_points(call).into_iter().next();
        let mut hits: Vec<(f64, &fixtures::GazetteerEntry)> = self
            .fixtures
            .gazetteer
            .entries()
            .iter()
            .filter(|e| normalize_category(&e.category) == cat)
            .map(|e| (origin.as_ref().map_or(0.0, |o| haversine_m(e.pos(), (o.lat, o.lon))), e))
            .collect();
        if hits.is_empty() {
            return Err(AdapterError::NoMatch(wanted));
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.name.cmp(&b.1.name)));
        Ok(OutputValue::Points {
            points: hits.into_iter().take(self.config.top_k).map(|(_, e)| GeoPoint::named(&e.name, e.lat, e.lon)).collect(),
        })
    }

    fn bus(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let table = self.fixtures.bus.as_ref().ok_or_else(|| AdapterError::FixtureMissing("bus timetable".into()))?;
        let stop_code = first_text(call, "bus_stop").ok_or_else(|| AdapterError::MissingArgument("bus_stop".into()))?;
        let service = first_text(call, "service_no").ok_or_else(|| AdapterError::MissingArgument("service_no".into()))?;
        let stop = table.stops.get(&stop_code).ok_or_else(|| AdapterError::UnknownStop(stop_code.clone()))?;
        let calls = stop
            .services
            .get(&service)
            .ok_or_else(|| AdapterError::UnknownService { stop: stop_code.clone(), service: service.clone() })?;
        let window = match first_text(call, "task_specific") {
            None => None,
            Some(t) => parse_window(&t)
                .ok_or_else(|| AdapterError::BadArgument { name: "task_specific".into(), reason: format!("'{t}' is not 'next' or 'next N mins'") })?,
        };
        let tz = *call.clock.offset();
        let mut arrivals: Vec<(Timestamp, &fixtures::BusCall)> = Vec::new();
        for day in 0..2 {
            let date = call.clock.date_naive() + Duration::days(day);
            for c in calls {
                let tod = c.time_of_day().ok_or_else(|| AdapterError::Other(format!("bad timetable entry '{}'", c.time)))?;
                if let Some(t) = tz.from_local_datetime(&date.and_time(tod)).single() {
                    if t > call.clock {
                        arrivals.push((t, c));
                    }
                }
            }
        }
        arrivals.sort_by_key(|(t, _)| *t);
        let selected: Vec<_> = match window {
            None => arrivals.into_iter().take(1).collect(),
            Some(mins) => arrivals.into_iter().take_while(|(t, _)| *t <= call.clock + Duration::minutes(mins)).collect(),
        };
        let records = selected
            .into_iter()
            .map(|(t, c)| {
                record(vec![
                    ("service_no", json!(service)),
                    ("bus_stop", json!(stop_code)),
                    ("arrival", json!(fmt_time(&t))),
                    ("minutes_away", json!((t - call.clock).num_minutes())),
                    ("load", json!(c.load)),
                ])
            })
            .collect();
        Ok(OutputValue::Records { records })
    }

    fn map_mapping(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let gaz = &self.fixtures.gazetteer;
        let names = call.arg("location_name_list").map(ResolvedArg::texts).unwrap_or_default();
        if !names.is_empty() {
            let points = names
                .iter()
                .map(|n| gaz.lookup(n).map(|e| GeoPoint::named(n.trim(), e.lat, e.lon)).ok_or_else(|| AdapterError::NameNotFound(n.clone())))
                .collect::<Result<_, _>>()?;
            return Ok(OutputValue::Points { points });
        }
        let pts = gps_points(call);
        if pts.is_empty() {
            return Err(AdapterError::MissingArgument("location_name_list".into()));
        }
        let points = pts
            .iter()
            .map(|p| {
                gaz.nearest((p.lat, p.lon))
                    .map(|e| GeoPoint::named(&e.name, p.lat, p.lon))
                    .ok_or_else(|| AdapterError::FixtureMissing("gazetteer".into()))
            })
            .collect::<Result<_, _>>()?;
        Ok(OutputValue::Points { points })
    }
}

/// `next` gives `None`; `next N min(s)` gives `Some(N)`.
fn parse_window(text: &str) -> Option<Option<i64>> {
    let t = text.trim().to_ascii_lowercase();
    let rest = t.strip_prefix("next")?.trim();
    if rest.is_empty() {
        return Some(None);
    }
    let num: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let unit = rest[num.len()..].trim();
    let n: i64 = num.parse().ok()?;
    let scale = match unit {
        "" | "m" | "min" | "mins" | "minute" | "minutes" => 1,
        "h" | "hr" | "hrs" | "hour" | "hours" => 60,
        _ => return None,
    };
    Some(Some(n * scale))
}

/// Lower case, `_` as space, collapsed whitespace and a naive singular
/// of the last word.
pub fn normalize_category(text: &str) -> String {
    let spaced = text.to_lowercase().replace('_', " ");
    let mut words: Vec<String> = spaced.split_whitespace().map(str::to_string).collect();
    if let Some(last) = words.last_mut() {
        if last.len() > 3 && last.ends_with('s') && !last.ends_with("ss") {
            last.pop();
        }
    }
    for w in &mut words {
        if w == "bycycle" {
            *w = "bicycle".into();
        }
    }
    words.join(" ")
}
