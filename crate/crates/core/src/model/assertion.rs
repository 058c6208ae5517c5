use thiserror::Error;

use super::{AssertionKind, Curve, FreqResponse, FunctionalAssertion, ResultBundle};
use crate::util::interp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssertionError {
    #[error("missing measurement for signal '{0}'")]
    MissingMeasurement(String),
    #[error("unsupported assertion kind '{0}'")]
    UnsupportedKind(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionResult {
    pub holds: bool,
    /// The measured quantity compared against the assertion parameters; NaN
    /// when it could not be extracted from an otherwise present signal.
    pub observed: f64,
    pub reason: String,
}

impl AssertionResult {
    fn new(holds: bool, observed: f64, reason: impl Into<String>) -> Self {
        AssertionResult {
            holds,
            observed,
            reason: reason.into(),
        }
    }
}

const HALF_POWER_DB: f64 = 3.010_299_956_639_812;

/// Strip a `V(...)` wrapper; `I(...)` is kept so device currents stay distinct.
fn node_key(signal: &str) -> &str {
    let s = signal.trim();
    if (s.starts_with("V(") || s.starts_with("v(")) && s.ends_with(')') {
        &s[2..s.len() - 1]
    } else {
        s
    }
}

fn lookup<'a, T>(map: &'a std::collections::BTreeMap<String, T>, key: &str) -> Option<&'a T> {
    map.get(key).or_else(|| {
        map.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    })
}

fn near(observed: f64, target: f64, tol: f64) -> bool {
    if target == 0.0 {
        observed.abs() <= tol
    } else {
        (observed - target).abs() <= tol * target.abs()
    }
}

fn sweep<'a>(a: &FunctionalAssertion, z: &'a ResultBundle) -> Result<&'a Curve, AssertionError> {
    lookup(&z.sweeps, node_key(&a.target_signal))
        .filter(|c| !c.grid.is_empty())
        .ok_or_else(|| AssertionError::MissingMeasurement(a.target_signal.clone()))
}

fn ac<'a>(
    a: &FunctionalAssertion,
    z: &'a ResultBundle,
) -> Result<&'a FreqResponse, AssertionError> {
    lookup(&z.ac_responses, node_key(&a.target_signal))
        .filter(|r| !r.freqs.is_empty())
        .ok_or_else(|| AssertionError::MissingMeasurement(a.target_signal.clone()))
}

fn mag_db_at(resp: &FreqResponse, f: f64) -> Option<f64> {
    let logf: Vec<f64> = resp.freqs.iter().map(|f| f.log10()).collect();
    interp(&logf, &resp.mag_db, f.log10())
}

/// First frequency where the magnitude crosses `level` dB, interpolated in
/// (log f, dB).
fn first_crossing_freq(resp: &FreqResponse, level: f64) -> Option<f64> {
    for i in 1..resp.freqs.len() {
        let (m0, m1) = (resp.mag_db[i - 1] - level, resp.mag_db[i] - level);
        if m0 == 0.0 {
            return Some(resp.freqs[i - 1]);
        }
        if m0.signum() != m1.signum() {
            let (l0, l1) = (resp.freqs[i - 1].log10(), resp.freqs[i].log10());
            let t = m0 / (m0 - m1);
            return Some(10f64.powf(l0 + t * (l1 - l0)));
        }
    }
    None
}

/// Crossing statistics of a waveform around its mid level, with hysteresis at
/// 10% of the peak-to-peak swing.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossingStats {
    pub crossings: usize,
    /// Mean spacing of consecutive rising crossings; NaN if fewer than two.
    pub period: f64,
    pub peak_to_peak: f64,
}

/// Count level crossings of a time series. Amplitudes below `min_amplitude`
/// count as zero crossings.
pub fn count_crossings(curve: &Curve, min_amplitude: f64) -> CrossingStats {
    let n = curve.samples.len();
    if n < 2 {
        return CrossingStats {
            crossings: 0,
            period: f64::NAN,
            peak_to_peak: 0.0,
        };
    }
    // Level and swing from the later half, past start-up.
    let tail = &curve.samples[n / 2..];
    let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let p2p = hi - lo;
    if !p2p.is_finite() || p2p < min_amplitude {
        return CrossingStats {
            crossings: 0,
            period: f64::NAN,
            peak_to_peak: if p2p.is_finite() { p2p } else { 0.0 },
        };
    }
    let mid = 0.5 * (hi + lo);
    let band = 0.1 * p2p;
    let mut state: Option<bool> = None;
    let mut crossings = 0;
    let mut rising = Vec::new();
    for i in 0..n {
        let v = curve.samples[i];
        match state {
            None => {
                if v > mid + band {
                    state = Some(true);
                } else if v < mid - band {
                    state = Some(false);
                }
            }
            Some(false) if v > mid + band => {
                state = Some(true);
                crossings += 1;
                rising.push(crossing_time(curve, i, mid));
            }
            Some(true) if v < mid - band => {
                state = Some(false);
                crossings += 1;
            }
            _ => {}
        }
    }
    let t_half = curve.grid[n / 2];
    let late: Vec<f64> = rising.iter().copied().filter(|t| *t >= t_half).collect();
    let events = if late.len() >= 2 { &late } else { &rising };
    let period = if events.len() >= 2 {
        (events[events.len() - 1] - events[0]) / (events.len() - 1) as f64
    } else {
        f64::NAN
    };
    CrossingStats {
        crossings,
        period,
        peak_to_peak: p2p,
    }
}

/// Walk back from sample `i` to the mid-level crossing and interpolate.
fn crossing_time(curve: &Curve, i: usize, mid: f64) -> f64 {
    let mut j = i;
    while j > 0 && curve.samples[j - 1] > mid {
        j -= 1;
    }
    if j == 0 {
        return curve.grid[0];
    }
    let (v0, v1) = (curve.samples[j - 1], curve.samples[j]);
    let (t0, t1) = (curve.grid[j - 1], curve.grid[j]);
    if v1 == v0 {
        t1
    } else {
        t0 + (mid - v0) / (v1 - v0) * (t1 - t0)
    }
}

/// Evaluate φ_k(z). Deterministic; `observed` is the measured quantity.
pub fn evaluate_assertion(
    a: &FunctionalAssertion,
    z: &ResultBundle,
) -> Result<AssertionResult, AssertionError> {
    let tol = a.tolerance;
    let p = |k: &str| a.param(k).unwrap_or(f64::NAN);
    match a.kind {
        AssertionKind::GainAtLeast => {
            let resp = ac(a, z)?;
            let f = a.param("freq").unwrap_or(resp.freqs[0]);
            let db = mag_db_at(resp, f).unwrap_or(f64::NAN);
            let gain = 10f64.powf(db / 20.0);
            let min_gain = p("min_gain");
            let holds = gain >= min_gain * (1.0 - tol);
            Ok(AssertionResult::new(
                holds,
                gain,
                format!("gain {gain:.4} V/V at {f} Hz vs required {min_gain}"),
            ))
        }
        AssertionKind::OutputSwitchesAt => {
            let c = sweep(a, z)?;
            let hi = c.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = c.samples.iter().cloned().fold(f64::INFINITY, f64::min);
            let swing = hi - lo;
            let min_swing = a.param("min_swing").unwrap_or(0.0);
            if !(swing > 0.0) || swing < min_swing {
                return Ok(AssertionResult::new(
                    false,
                    f64::NAN,
                    format!("output swing {swing:.4} V below required {min_swing} V"),
                ));
            }
            let level = 0.5 * (hi + lo);
            let mut at = f64::NAN;
            for i in 1..c.grid.len() {
                let (d0, d1) = (c.samples[i - 1] - level, c.samples[i] - level);
                if d0 == 0.0 || d0.signum() != d1.signum() {
                    at = c.grid[i - 1] + d0 / (d0 - d1) * (c.grid[i] - c.grid[i - 1]);
                    if d0 == 0.0 {
                        at = c.grid[i - 1];
                    }
                    break;
                }
            }
            let thr = p("threshold");
            let holds = at.is_finite() && near(at, thr, tol);
            Ok(AssertionResult::new(
                holds,
                at,
                format!("output crosses mid level at input {at:.4} vs expected {thr}"),
            ))
        }
        AssertionKind::MonotoneTransfer => {
            let c = sweep(a, z)?;
            let dir = if p("direction") < 0.0 { -1.0 } else { 1.0 };
            let hi = c.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = c.samples.iter().cloned().fold(f64::INFINITY, f64::min);
            let range = hi - lo;
            let net = dir * (c.samples[c.samples.len() - 1] - c.samples[0]);
            let worst = c
                .samples
                .windows(2)
                .map(|w| (-dir * (w[1] - w[0])).max(0.0))
                .fold(0.0, f64::max);
            let violation = if range > 0.0 { worst / range } else { 0.0 };
            let min_span = a.param("min_span").unwrap_or(0.0);
            let holds = net > 0.0 && net >= min_span && violation <= tol;
            Ok(AssertionResult::new(
                holds,
                violation,
                format!("net change {net:.4} V in requested direction, worst reversal {violation:.4} of range"),
            ))
        }
        AssertionKind::CornerFrequencyNear => {
            let resp = ac(a, z)?;
            let peak = resp.mag_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let fc = first_crossing_freq(resp, peak - HALF_POWER_DB).unwrap_or(f64::NAN);
            let target = p("freq");
            let holds = fc.is_finite() && near(fc, target, tol);
            let reason = if fc.is_finite() {
                format!("-3 dB corner at {fc:.4} Hz vs expected {target} Hz")
            } else {
                "no -3 dB crossing inside the swept band".to_string()
            };
            Ok(AssertionResult::new(holds, fc, reason))
        }
        AssertionKind::OscillatesWithPeriodNear => {
            let c = lookup(&z.transients, node_key(&a.target_signal))
                .filter(|c| !c.grid.is_empty())
                .ok_or_else(|| AssertionError::MissingMeasurement(a.target_signal.clone()))?;
            let min_crossings = a.param("min_crossings").unwrap_or(4.0) as usize;
            let stats = count_crossings(c, a.param("min_amplitude").unwrap_or(1e-6));
            if stats.crossings < min_crossings {
                return Ok(AssertionResult::new(
                    false,
                    stats.period,
                    format!(
                        "zero crossings below threshold ({} < {min_crossings})",
                        stats.crossings
                    ),
                ));
            }
            let target = p("period");
            let holds = stats.period.is_finite() && near(stats.period, target, tol);
            Ok(AssertionResult::new(
                holds,
                stats.period,
                format!("period {:.6e} s vs expected {target:e} s", stats.period),
            ))
        }
        AssertionKind::DCValueNear => {
            let key = a.target_signal.trim();
            let value = if (key.starts_with("I(") || key.starts_with("i(")) && key.ends_with(')') {
                lookup(&z.operating_point.device_currents, &key[2..key.len() - 1])
            } else {
                lookup(&z.operating_point.node_voltages, node_key(key))
            }
            .copied()
            .ok_or_else(|| AssertionError::MissingMeasurement(a.target_signal.clone()))?;
            let target = p("value");
            Ok(AssertionResult::new(
                near(value, target, tol),
                value,
                format!("{} = {value:.6} vs expected {target}", a.target_signal),
            ))
        }
        AssertionKind::AttenuationInBand => {
            let resp = ac(a, z)?;
            let (f_lo, f_hi) = (p("f_lo"), p("f_hi"));
            let peak = resp.mag_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut band_max = [f_lo, f_hi]
                .iter()
                .filter_map(|f| mag_db_at(resp, *f))
                .fold(f64::NEG_INFINITY, f64::max);
            for (f, m) in resp.freqs.iter().zip(&resp.mag_db) {
                if *f >= f_lo && *f <= f_hi {
                    band_max = band_max.max(*m);
                }
            }
            let atten = peak - band_max;
            let min_atten = p("min_atten_db");
            Ok(AssertionResult::new(
                atten >= min_atten * (1.0 - tol),
                atten,
                format!("attenuation {atten:.3} dB in [{f_lo}, {f_hi}] Hz vs required {min_atten} dB"),
            ))
        }
    }
}

/// Scalar loss for parameter search: relative error for Near kinds, relative
/// hinge for AtLeast kinds, the reversal fraction for monotonicity. `None`
/// when the measurement is unusable.
pub fn assertion_loss(a: &FunctionalAssertion, r: &AssertionResult) -> Option<f64> {
    if !r.observed.is_finite() {
        return None;
    }
    let obs = r.observed;
    let rel = |target: f64| {
        if target == 0.0 {
            obs.abs()
        } else {
            (obs - target).abs() / target.abs()
        }
    };
    let hinge = |target: f64| (target - obs).max(0.0) / target.abs();
    Some(match a.kind {
        AssertionKind::GainAtLeast => hinge(a.param("min_gain")?),
        AssertionKind::AttenuationInBand => hinge(a.param("min_atten_db")?),
        AssertionKind::OutputSwitchesAt => rel(a.param("threshold")?),
        AssertionKind::CornerFrequencyNear => rel(a.param("freq")?),
        AssertionKind::OscillatesWithPeriodNear => rel(a.param("period")?),
        AssertionKind::DCValueNear => rel(a.param("value")?),
        AssertionKind::MonotoneTransfer => obs,
    })
}
