//! Baseline series and trajectory algorithms used by the stub adapters.

use chrono::{Duration, NaiveTime, TimeZone};

use crate::executor::{AdapterError, GeoPoint, ResolvedArg, Timestamp};
use crate::plan::{Meridiem, TimeSpec};

/// Absolute time for a `time` argument relative to `clock`. Clock times
/// resolve to their next occurrence at or after `clock`.
pub fn target_time(arg: &ResolvedArg, clock: Timestamp) -> Result<Timestamp, AdapterError> {
    match arg {
        ResolvedArg::Timestamp(t) => Ok(*t),
        ResolvedArg::Time(spec) => Ok(resolve_spec(spec, clock)),
        ResolvedArg::Number(n) if *n == 0.0 => Ok(clock),
        other => Err(AdapterError::BadArgument { name: "time".into(), reason: format!("not a time expression: {other:?}") }),
    }
}

fn resolve_spec(spec: &TimeSpec, clock: Timestamp) -> Timestamp {
    match spec {
        TimeSpec::Now | TimeSpec::Resource(_) => clock,
        TimeSpec::Relative { .. } => clock + Duration::minutes(spec.relative_minutes().unwrap_or(0)),
        TimeSpec::Clock { hour, minute, meridiem } => {
            let h24 = match (meridiem, *hour) {
                (Meridiem::AM, 12) => 0,
                (Meridiem::AM, h) => u32::from(h),
                (Meridiem::PM, 12) => 12,
                (Meridiem::PM, h) => u32::from(h) + 12,
            };
            let time = NaiveTime::from_hms_opt(h24 % 24, u32::from(*minute), 0).unwrap_or_default();
            let tz = *clock.offset();
            let today = tz.from_local_datetime(&clock.date_naive().and_time(time)).single().unwrap_or(clock);
            if today >= clock { today } else { today + Duration::days(1) }
        }
    }
}

/// Number of forecast steps after `last` needed to reach `target`; at
/// least one.
pub fn steps_until(last: Timestamp, step_secs: i64, target: Timestamp) -> usize {
    let secs = (target - last).num_seconds();
    if secs <= 0 || step_secs <= 0 {
        return 1;
    }
    ((secs + step_secs - 1) / step_secs).max(1) as usize
}

/// Seasonal-naive forecast: `y[n + k] = y[n + k - period]`, iterated.
pub fn seasonal_naive(history: &[f64], period: usize, steps: usize, max_steps: usize) -> Result<Vec<f64>, AdapterError> {
    if period == 0 || history.len() < period {
        return Err(AdapterError::SeriesTooShort { len: history.len(), need: period.max(1) });
    }
    if steps > max_steps {
        return Err(AdapterError::HorizonExceedsGuard { steps, max: max_steps });
    }
    let mut ext = history.to_vec();
    for _ in 0..steps {
        ext.push(ext[ext.len() - period]);
    }
    Ok(ext.split_off(history.len()))
}

/// Linear interpolation across gaps; leading and trailing gaps copy the
/// nearest known value.
pub fn impute(values: &[Option<f64>]) -> Result<Vec<f64>, AdapterError> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(AdapterError::AllMissing);
    };
    let mut out = vec![0.0; values.len()];
    for i in 0..values.len() {
        out[i] = match values[i] {
            Some(v) => v,
            None if i < first => values[first].unwrap(),
            None if i > last => values[last].unwrap(),
            None => {
                let k = known.partition_point(|&j| j < i);
                let (l, r) = (known[k - 1], known[k]);
                let (vl, vr) = (values[l].unwrap(), values[r].unwrap());
                vl + (vr - vl) * (i - l) as f64 / (r - l) as f64
            }
        };
    }
    Ok(out)
}

/// Points whose z-score against the trailing `window` values exceeds
/// `threshold`. A window with no spread flags any deviation with an
/// infinite score.
pub fn zscore_anomalies(values: &[f64], window: usize, threshold: f64) -> Result<Vec<(usize, f64)>, AdapterError> {
    if window == 0 || values.len() < window {
        return Err(AdapterError::SeriesTooShort { len: values.len(), need: window.max(1) });
    }
    let mut out = Vec::new();
    for t in window..values.len() {
        let w = &values[t - window..t];
        let x = values[t];
        if w.iter().all(|v| *v == w[0]) {
            if x != w[0] {
                out.push((t, if x > w[0] { f64::INFINITY } else { f64::NEG_INFINITY }));
            }
            continue;
        }
        let mean = w.iter().sum::<f64>() / window as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64).sqrt();
        let z = (x - mean) / std;
        if z.abs() > threshold {
            out.push((t, z));
        }
    }
    Ok(out)
}

/// One trajectory fix; coordinates may be missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    pub time: Timestamp,
    pub pos: Option<(f64, f64)>,
}

/// Fills missing positions by interpolating linearly in time between the
/// bracketing known fixes; fixes outside the known span copy the nearest.
pub fn complete_trajectory(fixes: &[Fix]) -> Result<Vec<GeoPoint>, AdapterError> {
    let known: Vec<usize> = (0..fixes.len()).filter(|&i| fixes[i].pos.is_some()).collect();
    if known.len() < 2 {
        return Err(AdapterError::FewerThanTwoFixes);
    }
    let (first, last) = (known[0], known[known.len() - 1]);
    Ok(fixes
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (lat, lon) = match f.pos {
                Some(p) => p,
                None if i < first => fixes[first].pos.unwrap(),
                None if i > last => fixes[last].pos.unwrap(),
                None => {
                    let k = known.partition_point(|&j| j < i);
                    let (a, b) = (&fixes[known[k - 1]], &fixes[known[k]]);
                    let span = (b.time - a.time).num_milliseconds() as f64;
                    let w = if span > 0.0 { (f.time - a.time).num_milliseconds() as f64 / span } else { 0.0 };
                    let (pa, pb) = (a.pos.unwrap(), b.pos.unwrap());
                    (pa.0 + (pb.0 - pa.0) * w, pa.1 + (pb.1 - pa.1) * w)
                }
            };
            GeoPoint::new(lat, lon).at(f.time)
        })
        .collect())
}

/// Constant-velocity extrapolation from the last two fixes, continuing at
/// their spacing until `until` is reached (at least one step).
pub fn predict_trajectory(fixes: &[GeoPoint], until: Option<Timestamp>, max_steps: usize) -> Result<Vec<GeoPoint>, AdapterError> {
    let timed: Vec<&GeoPoint> = fixes.iter().filter(|p| p.time.is_some()).collect();
    if timed.len() < 2 {
        return Err(AdapterError::FewerThanTwoFixes);
    }
    let (a, b) = (timed[timed.len() - 2], timed[timed.len() - 1]);
    let (ta, tb) = (a.time.unwrap(), b.time.unwrap());
    let dt = tb - ta;
    if dt <= Duration::zero() {
        return Err(AdapterError::Other("last two fixes are not in time order".into()));
    }
    let steps = until.map_or(1, |u| steps_until(tb, dt.num_seconds().max(1), u));
    if steps > max_steps {
        return Err(AdapterError::HorizonExceedsGuard { steps, max: max_steps });
    }
    let (dlat, dlon) = (b.lat - a.lat, b.lon - a.lon);
    Ok((1..=steps)
        .map(|k| {
            let k32 = k as i32;
            GeoPoint::new(b.lat + dlat * f64::from(k32), b.lon + dlon * f64::from(k32)).at(tb + dt * k32)
        })
        .collect())
}
