//! Resampling, windowing and record-level splits.

use std::collections::BTreeMap;

use crate::data::{AgentWindow, Record, Sample, Track, TrackPoint, RATE_HZ, STEP_S};
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

/// Keeps, per track, the sample nearest each 0.5 s tick (within half a
/// native period); kept points get timestamps on the tick grid and keep their
/// original frame index. Native 2 Hz data is returned unchanged.
pub fn resample_2hz(record: &Record, native_rate_hz: f64) -> Result<Record> {
    if !(native_rate_hz >= RATE_HZ) {
        return Err(Error::InvalidArgument(format!(
            "resample: native rate {native_rate_hz} Hz is below {RATE_HZ} Hz"
        )));
    }
    if native_rate_hz == RATE_HZ {
        return Ok(Record {
            rate_hz: RATE_HZ,
            ..record.clone()
        });
    }
    let tol = 0.5 / native_rate_hz + 1e-9;
    let tracks = record
        .tracks
        .iter()
        .map(|track| {
            let pts = &track.points;
            let mut out = Vec::new();
            if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
                let k0 = (first.time_s / STEP_S - 1e-9).ceil() as i64;
                let k1 = (last.time_s / STEP_S + 1e-9).floor() as i64;
                for k in k0..=k1 {
                    let tick = k as f64 * STEP_S;
                    let i = pts.partition_point(|p| p.time_s < tick);
                    let best = [i.checked_sub(1), Some(i)]
                        .into_iter()
                        .flatten()
                        .filter(|&j| j < pts.len())
                        .min_by(|&a, &b| {
                            let da = (pts[a].time_s - tick).abs();
                            let db = (pts[b].time_s - tick).abs();
                            da.total_cmp(&db)
                        });
                    if let Some(j) = best {
                        if (pts[j].time_s - tick).abs() <= tol {
                            out.push(TrackPoint { time_s: tick, ..pts[j] });
                        }
                    }
                }
            }
            Track {
                points: out,
                ..track.clone()
            }
        })
        .collect();
    Ok(Record {
        record_id: record.record_id.clone(),
        rate_hz: RATE_HZ,
        tracks,
    })
}

fn tick(p: &TrackPoint) -> i64 {
    (p.time_s / STEP_S).round() as i64
}

/// Slides a `t_h + t_f` window over a 2 Hz record. Only agents present at
/// every tick of a window enter its sample; empty samples are dropped.
/// `Sample::start_frame` is the 2 Hz tick index of the first history point.
pub fn window_samples(record: &Record, t_h: usize, t_f: usize, stride: usize) -> Vec<Sample> {
    let span = (t_h + t_f) as i64;
    if t_h == 0 || stride == 0 {
        return Vec::new();
    }
    let indexed: Vec<(&Track, BTreeMap<i64, [f64; 2]>)> = record
        .tracks
        .iter()
        .map(|t| (t, t.points.iter().map(|p| (tick(p), [p.x, p.y])).collect()))
        .collect();
    let lo = indexed.iter().filter_map(|(_, m)| m.keys().next().copied()).min();
    let hi = indexed.iter().filter_map(|(_, m)| m.keys().next_back().copied()).max();
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Vec::new();
    };
    let mut samples = Vec::new();
    let mut start = lo;
    while start + span - 1 <= hi {
        let mut agents = Vec::new();
        for (track, m) in &indexed {
            let window: Vec<[f64; 2]> = m.range(start..start + span).map(|(_, p)| *p).collect();
            if window.len() as i64 == span {
                agents.push(AgentWindow {
                    track_id: track.track_id,
                    agent_type: track.agent_type,
                    history: window[..t_h].to_vec(),
                    future: window[t_h..].to_vec(),
                });
            }
        }
        if !agents.is_empty() {
            samples.push(Sample {
                record_id: record.record_id.clone(),
                start_frame: start,
                agents,
            });
        }
        start += stride as i64;
    }
    samples
}

pub fn window_samples_all(records: &[Record], t_h: usize, t_f: usize, stride: usize) -> Vec<Sample> {
    records
        .iter()
        .flat_map(|r| window_samples(r, t_h, t_f, stride))
        .collect()
}

/// Seeded record-level split; the train share is `round(fraction * N)`
/// clamped to `[1, N - 1]`. Both halves keep the input order.
pub fn split_by_record(records: &[Record], train_fraction: f64, seed: u64) -> Result<(Vec<Record>, Vec<Record>)> {
    let n = records.len();
    if n < 2 {
        return Err(Error::Data(format!("split needs at least 2 records, got {n}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} outside [0, 1]"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(is_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Moves a seeded `fraction` of samples (at least one when there are two or
/// more) into a validation set. Returns `(train, validation)`.
pub fn carve_validation(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let mut k = (fraction * n as f64).round() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut is_val = vec![false; n];
    for &i in &order[..k] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}
