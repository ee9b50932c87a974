//! CSV trajectory logs: `record_id,track_id,frame,timestamp_ms,agent_type,x,y`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{AgentType, Record, Track, TrackPoint};
use crate::error::{Error, Result};

const COLUMNS: [&str; 7] = ["record_id", "track_id", "frame", "timestamp_ms", "agent_type", "x", "y"];

/// Reads and validates a trajectory log. `rate_hz` is the native sampling
/// rate recorded on every returned [`Record`].
pub fn load_csv(path: impl AsRef<Path>, rate_hz: f64) -> Result<Vec<Record>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    read_csv(&text, &path.display().to_string(), rate_hz)
}

/// Parses CSV text; `source` names the input in error messages.
pub fn read_csv(text: &str, source: &str, rate_hz: f64) -> Result<Vec<Record>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))?;
    }

    // record -> track -> (type, points with their source line)
    type Rows = Vec<(TrackPoint, usize)>;
    let mut grouped: BTreeMap<String, BTreeMap<u64, (AgentType, Rows)>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |k: usize| row.get(index[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            let v: f64 = field(k)
                .parse()
                .map_err(|_| parse_err(line, format!("cannot parse {} `{}`", COLUMNS[k], field(k))))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {}", COLUMNS[k])));
            }
            Ok(v)
        };
        let record_id = field(0).to_string();
        if record_id.is_empty() {
            return Err(parse_err(line, "empty record_id".into()));
        }
        let track_id: u64 = field(1)
            .parse()
            .map_err(|_| parse_err(line, format!("cannot parse track_id `{}`", field(1))))?;
        let frame: i64 = field(2)
            .parse()
            .map_err(|_| parse_err(line, format!("cannot parse frame `{}`", field(2))))?;
        let time_s = num(3)? / 1000.0;
        let agent_type: AgentType = field(4).parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        let point = TrackPoint {
            frame,
            time_s,
            x: num(5)?,
            y: num(6)?,
        };
        let entry = grouped
            .entry(record_id)
            .or_default()
            .entry(track_id)
            .or_insert_with(|| (agent_type, Vec::new()));
        if entry.0 != agent_type {
            return Err(parse_err(
                line,
                format!("track {track_id} changes agent_type from {} to {agent_type}", entry.0),
            ));
        }
        entry.1.push((point, line));
    }

    let mut records = Vec::with_capacity(grouped.len());
    for (record_id, tracks) in grouped {
        let mut out = Vec::with_capacity(tracks.len());
        for (track_id, (agent_type, mut rows)) in tracks {
            rows.sort_by_key(|(p, _)| p.frame);
            for pair in rows.windows(2) {
                if pair[1].0.frame <= pair[0].0.frame {
                    let line = pair[0].1.max(pair[1].1);
                    return Err(parse_err(
                        line,
                        format!(
                            "track {track_id} repeats frame {} (frames must be strictly increasing)",
                            pair[1].0.frame
                        ),
                    ));
                }
                if pair[1].0.time_s <= pair[0].0.time_s {
                    return Err(parse_err(
                        pair[1].1,
                        format!("track {track_id} timestamps are not increasing with frame"),
                    ));
                }
            }
            out.push(Track {
                track_id,
                agent_type,
                points: rows.into_iter().map(|(p, _)| p).collect(),
            });
        }
        records.push(Record {
            record_id,
            rate_hz,
            tracks: out,
        });
    }
    Ok(records)
}

/// Writes records in the CSV schema; values use shortest round-trip
/// formatting so reloading is exact.
pub fn write_csv(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    text.push_str(&COLUMNS.join(","));
    text.push('\n');
    for r in records {
        for t in &r.tracks {
            for p in &t.points {
                let ms = (p.time_s * 1000.0).round() as i64;
                text.push_str(&format!(
                    "{},{},{},{},{},{:?},{:?}\n",
                    r.record_id, t.track_id, p.frame, ms, t.agent_type, p.x, p.y
                ));
            }
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
