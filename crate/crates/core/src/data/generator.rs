//! Synthetic four-arm signalized intersection.
//!
//! Arms point east, north, west and south of the origin. Traffic drives on
//! the right. East/west and north/south approaches alternate green phases.
//! Agents are simulated at `native_rate_hz` and resampled to 2 Hz.

use serde::{Deserialize, Serialize};

use crate::data::{resample_2hz, AgentType, Record, Track, TrackPoint};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypeMix {
    pub small_vehicle: f64,
    pub big_vehicle: f64,
    pub pedestrian: f64,
    pub two_wheeler: f64,
}

impl Default for TypeMix {
    fn default() -> Self {
        TypeMix {
            small_vehicle: 0.45,
            big_vehicle: 0.1,
            pedestrian: 0.25,
            two_wheeler: 0.2,
        }
    }
}

impl TypeMix {
    fn weights(&self) -> [f64; 4] {
        [self.small_vehicle, self.big_vehicle, self.pedestrian, self.two_wheeler]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Set by the caller from the run's master seed; not part of config files.
    #[serde(skip)]
    pub seed: u64,
    pub records: usize,
    pub duration_s: f64,
    pub agents_per_record: usize,
    pub type_mix: TypeMix,
    pub hard_fraction: f64,
    pub noise_sigma_m: f64,
    pub arm_length_m: f64,
    pub lane_offset_m: f64,
    pub stop_line_m: f64,
    pub signal_cycle_s: f64,
    pub native_rate_hz: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            records: 14,
            duration_s: 60.0,
            agents_per_record: 40,
            type_mix: TypeMix::default(),
            hard_fraction: 0.3,
            noise_sigma_m: 0.05,
            arm_length_m: 45.0,
            lane_offset_m: 2.0,
            stop_line_m: 14.0,
            signal_cycle_s: 40.0,
            native_rate_hz: 10.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("generator: {m}")));
        if self.records == 0 || self.agents_per_record == 0 {
            return bad("zero agents");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction must lie in [0, 1]");
        }
        if !(self.noise_sigma_m >= 0.0) {
            return bad("noise_sigma_m must be non-negative");
        }
        let w = self.type_mix.weights();
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return bad("type_mix weights must be non-negative with a positive sum");
        }
        if !(self.native_rate_hz >= 2.0) {
            return bad("native_rate_hz must be at least 2");
        }
        if !(self.arm_length_m > self.stop_line_m
            && self.stop_line_m > 4.0 * self.lane_offset_m
            && self.lane_offset_m > 0.0)
        {
            return bad("geometry needs arm_length_m > stop_line_m > 4 * lane_offset_m > 0");
        }
        if !(self.signal_cycle_s > 8.0) {
            return bad("signal_cycle_s must exceed 8");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Straight,
    Left,
    Right,
    Crossing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardEvent {
    SuddenTurn,
    RedLightRun,
    SuddenStop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentMeta {
    pub record_id: String,
    pub track_id: u64,
    pub agent_type: AgentType,
    pub route: Route,
    pub hard: bool,
    pub event: Option<HardEvent>,
}

/// Generates the corpus at 2 Hz.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<Record>> {
    generate_with_metadata(config).map(|(r, _)| r)
}

/// Generates the corpus together with per-agent ground-truth metadata.
pub fn generate_with_metadata(config: &GeneratorConfig) -> Result<(Vec<Record>, Vec<AgentMeta>)> {
    config.validate()?;
    let total = config.records * config.agents_per_record;
    let n_hard = ((config.hard_fraction * total as f64).round() as usize).min(total);
    let mut pick = Rng::new(derive_seed(config.seed, "hard-agents"));
    let mut order: Vec<usize> = (0..total).collect();
    pick.shuffle(&mut order);
    let mut hard = vec![false; total];
    for &i in &order[..n_hard] {
        hard[i] = true;
    }

    let width = config.records.to_string().len().max(2);
    let mut records = Vec::with_capacity(config.records);
    let mut meta = Vec::with_capacity(total);
    for r in 0..config.records {
        let record_id = format!("rec{r:0width$}");
        let flags = &hard[r * config.agents_per_record..(r + 1) * config.agents_per_record];
        let mut rng = Rng::new(derive_seed(config.seed, &record_id));
        let (native, m) = simulate_record(config, &record_id, flags, &mut rng);
        records.push(resample_2hz(&native, config.native_rate_hz)?);
        meta.extend(m);
    }
    Ok((records, meta))
}

type P = [f64; 2];

fn add(a: P, b: P) -> P {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: P, s: f64) -> P {
    [a[0] * s, a[1] * s]
}

/// Right-hand normal of a heading.
fn right_of(h: P) -> P {
    [h[1], -h[0]]
}

fn left_of(h: P) -> P {
    [-h[1], h[0]]
}

const ARMS: [P; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];

/// A piecewise-linear path parametrized by arc length.
struct Path {
    pts: Vec<P>,
    cum: Vec<f64>,
}

impl Path {
    fn new(pts: Vec<P>) -> Path {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        Path { pts, cum }
    }

    fn len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let i = self.cum.partition_point(|&c| c <= s);
        i.clamp(1, self.pts.len() - 1) - 1
    }

    fn at(&self, s: f64) -> P {
        let i = self.segment(s);
        let seg = self.cum[i + 1] - self.cum[i];
        let u = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    fn heading(&self, s: f64) -> f64 {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }
}

fn bezier(a: P, c: P, b: P, steps: usize) -> Vec<P> {
    (1..steps)
        .map(|k| {
            let u = k as f64 / steps as f64;
            let v = 1.0 - u;
            [
                v * v * a[0] + 2.0 * u * v * c[0] + u * u * b[0],
                v * v * a[1] + 2.0 * u * v * c[1] + u * u * b[1],
            ]
        })
        .collect()
}

struct VehiclePlan {
    path: Path,
    arm: usize,
    /// Arc length of the stop line.
    s_stop: f64,
    /// Turn section, if any, with its speed limit.
    curve: Option<(f64, f64, f64)>,
}

fn vehicle_plan(cfg: &GeneratorConfig, arm: usize, route: Route, lane: f64) -> VehiclePlan {
    let d_in = ARMS[arm];
    let h = scale(d_in, -1.0);
    let inbound = |r: f64| add(scale(d_in, r), scale(right_of(h), lane));
    let d_out = match route {
        Route::Left => left_of(h),
        Route::Right => right_of(h),
        _ => h,
    };
    let outbound = |r: f64| add(scale(d_out, r), scale(right_of(d_out), lane));
    let l = cfg.arm_length_m;
    let s_stop = l - cfg.stop_line_m;
    if route == Route::Straight {
        return VehiclePlan {
            path: Path::new(vec![inbound(l), outbound(l)]),
            arm,
            s_stop,
            curve: None,
        };
    }
    let rb = 2.0 * cfg.lane_offset_m + 1.0;
    let a = inbound(rb);
    let b = outbound(rb);
    // control point where the inbound and outbound lane lines cross
    let c = if h[1] == 0.0 { [b[0], a[1]] } else { [a[0], b[1]] };
    let mut pts = vec![inbound(l), a];
    pts.extend(bezier(a, c, b, 16));
    pts.push(b);
    pts.push(outbound(l));
    let path = Path::new(pts);
    let start = l - rb;
    let end = path.len() - (l - rb);
    let limit = if route == Route::Left { 7.0 } else { 5.0 };
    VehiclePlan {
        path,
        arm,
        s_stop,
        curve: Some((start, end, limit)),
    }
}

fn pedestrian_path(cfg: &GeneratorConfig, arm: usize, rng: &mut Rng) -> Path {
    let d = ARMS[arm];
    let n = left_of(d);
    let rc = cfg.stop_line_m - 3.0;
    let w = 2.0 * cfg.lane_offset_m + 2.5;
    let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let a = add(scale(d, rc), scale(n, -w * side));
    let b = add(scale(d, rc), scale(n, w * side));
    let pre = rng.uniform_range(2.0, 8.0);
    let post = rng.uniform_range(2.0, 8.0);
    Path::new(vec![add(a, scale(n, -pre * side)), add(b, scale(n, post * side))])
}

fn green(cfg: &GeneratorConfig, arm: usize, t: f64, offset: f64) -> bool {
    let c = cfg.signal_cycle_s;
    let phase = (t + offset).rem_euclid(c);
    let half = c / 2.0;
    let clearance = 3.0;
    if arm % 2 == 0 {
        phase < half - clearance
    } else {
        phase >= half && phase < c - clearance
    }
}

enum Motion {
    OnPath {
        s: f64,
    },
    Free {
        pos: P,
        heading: f64,
        turn_left_s: f64,
        omega: f64,
    },
}

struct Agent {
    kind: AgentType,
    route: Route,
    spawn: f64,
    v0: f64,
    plan: Option<VehiclePlan>,
    ped_path: Option<Path>,
    event: Option<HardEvent>,
    event_t: f64,
    // per-event parameters
    omega: f64,
    turn_s: f64,
    hold_s: f64,
    boost: f64,
}

fn make_agent(cfg: &GeneratorConfig, kind: AgentType, hard: bool, rng: &mut Rng) -> Agent {
    let spawn = rng.uniform_range(-8.0, cfg.duration_s - 4.0);
    let arm = rng.below(4);
    let v0 = match kind {
        AgentType::SmallVehicle => rng.uniform_range(9.0, 13.0),
        AgentType::BigVehicle => rng.uniform_range(7.0, 10.0),
        AgentType::MotorcyclistBicyclist => rng.uniform_range(4.0, 7.0),
        AgentType::Pedestrian => rng.uniform_range(1.0, 1.6),
    };
    let (route, plan, ped_path) = if kind == AgentType::Pedestrian {
        (Route::Crossing, None, Some(pedestrian_path(cfg, arm, rng)))
    } else {
        let route = match rng.weighted_index(&[0.6, 0.2, 0.2]) {
            0 => Route::Straight,
            1 => Route::Left,
            _ => Route::Right,
        };
        let lane = if kind == AgentType::MotorcyclistBicyclist {
            cfg.lane_offset_m + 1.2
        } else {
            cfg.lane_offset_m
        };
        (route, Some(vehicle_plan(cfg, arm, route, lane)), None)
    };
    let event = if !hard {
        None
    } else if kind == AgentType::Pedestrian {
        Some(if rng.bernoulli(0.5) {
            HardEvent::SuddenTurn
        } else {
            HardEvent::SuddenStop
        })
    } else {
        Some(match rng.below(3) {
            0 => HardEvent::SuddenTurn,
            1 => HardEvent::RedLightRun,
            _ => HardEvent::SuddenStop,
        })
    };
    let length = plan
        .as_ref()
        .map_or_else(|| ped_path.as_ref().unwrap().len(), |p| p.path.len());
    let traverse = length / v0;
    let event_t = spawn + rng.uniform_range(0.2, 0.7) * traverse;
    let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let turn_s = if kind == AgentType::Pedestrian {
        rng.uniform_range(0.4, 0.8)
    } else {
        rng.uniform_range(2.0, 3.0)
    };
    // pedestrians turn by this angle in total, vehicles at this rate per second
    let mut omega = sign * rng.uniform_range(60.0, 100.0).to_radians();
    if kind == AgentType::Pedestrian {
        omega /= turn_s;
    }
    Agent {
        kind,
        route,
        spawn,
        v0,
        plan,
        ped_path,
        event,
        event_t,
        omega,
        turn_s,
        hold_s: rng.uniform_range(1.5, 3.0),
        boost: if kind == AgentType::Pedestrian {
            rng.uniform_range(1.5, 2.5)
        } else {
            rng.uniform_range(5.0, 8.0)
        },
    }
}

fn simulate_record(cfg: &GeneratorConfig, record_id: &str, hard: &[bool], rng: &mut Rng) -> (Record, Vec<AgentMeta>) {
    let dt = 1.0 / cfg.native_rate_hz;
    let frames = (cfg.duration_s * cfg.native_rate_hz).round() as i64;
    let offset = rng.uniform_range(0.0, cfg.signal_cycle_s);
    let weights = cfg.type_mix.weights();
    let mut tracks = Vec::with_capacity(hard.len());
    let mut meta = Vec::with_capacity(hard.len());
    for (i, &is_hard) in hard.iter().enumerate() {
        let kind = AgentType::ALL[rng.weighted_index(&weights)];
        let agent = make_agent(cfg, kind, is_hard, rng);
        let mut noise = Rng::new(rng.next_u64());
        let points = run_agent(cfg, &agent, offset, dt, frames, &mut noise);
        let track_id = i as u64 + 1;
        meta.push(AgentMeta {
            record_id: record_id.to_string(),
            track_id,
            agent_type: kind,
            route: agent.route,
            hard: is_hard,
            event: agent.event,
        });
        if !points.is_empty() {
            tracks.push(Track {
                track_id,
                agent_type: kind,
                points,
            });
        }
    }
    let record = Record {
        record_id: record_id.to_string(),
        rate_hz: cfg.native_rate_hz,
        tracks,
    };
    (record, meta)
}

/// Integrates one agent; returns its visible points with position noise.
fn run_agent(cfg: &GeneratorConfig, a: &Agent, offset: f64, dt: f64, frames: i64, rng: &mut Rng) -> Vec<TrackPoint> {
    let path = a
        .plan
        .as_ref()
        .map_or_else(|| a.ped_path.as_ref().unwrap(), |p| &p.path);
    let limit = cfg.arm_length_m + 5.0;
    let mut motion = Motion::OnPath { s: 0.0 };
    let mut v = a.v0;
    let mut t = a.spawn;
    let mut fired = false;
    let mut braking = false;
    let mut hold_until = f64::NEG_INFINITY;
    let mut ignore_signal = false;
    let mut target_boost = 0.0;
    // pedestrian gait wobble: lateral offset following a mean-reverting walk
    let mut wobble = 0.0;
    let mut points = Vec::new();
    let first = (a.spawn * cfg.native_rate_hz).ceil() as i64;
    t = t.max(first as f64 * dt);
    let mut frame = first;
    let max_life = 120.0;
    while t < a.spawn + max_life {
        let pos = match &motion {
            Motion::OnPath { s } => {
                if *s >= path.len() {
                    break;
                }
                let mut p = path.at(*s);
                if a.kind == AgentType::Pedestrian {
                    let h = path.heading(*s);
                    p = add(p, scale([-h.sin(), h.cos()], wobble));
                }
                p
            }
            Motion::Free { pos, .. } => *pos,
        };
        if pos[0].abs() > limit || pos[1].abs() > limit {
            break;
        }
        if frame >= 0 && frame < frames {
            let (nx, ny) = if cfg.noise_sigma_m > 0.0 {
                (rng.normal() * cfg.noise_sigma_m, rng.normal() * cfg.noise_sigma_m)
            } else {
                (0.0, 0.0)
            };
            points.push(TrackPoint {
                frame,
                time_s: frame as f64 * dt,
                x: pos[0] + nx,
                y: pos[1] + ny,
            });
        }
        if frame >= frames {
            break;
        }

        if !fired && t >= a.event_t {
            if let Some(event) = a.event {
                fired = true;
                match event {
                    HardEvent::SuddenTurn => {
                        if a.kind == AgentType::Pedestrian {
                            target_boost = a.boost;
                        }
                        if let Motion::OnPath { s } = motion {
                            let heading = path.heading(s);
                            motion = Motion::Free {
                                pos,
                                heading,
                                turn_left_s: a.turn_s,
                                omega: a.omega,
                            };
                        }
                    }
                    HardEvent::SuddenStop => {
                        braking = true;
                        target_boost = 0.5 * a.boost;
                    }
                    HardEvent::RedLightRun => {
                        ignore_signal = true;
                        target_boost = a.boost;
                    }
                }
            }
        }

        // speed update
        let mut accel;
        if braking {
            let decel = if a.kind == AgentType::Pedestrian { 3.0 } else { 8.0 };
            accel = -decel;
            if v + accel * dt <= 0.0 {
                accel = -v / dt;
                braking = false;
                hold_until = t + a.hold_s;
            }
        } else if t < hold_until {
            accel = -v / dt;
        } else {
            let mut target = a.v0 + target_boost;
            if let (Some(plan), Motion::OnPath { s }) = (&a.plan, &motion) {
                if let Some((start, end, vmax)) = plan.curve {
                    if *s < end {
                        let d = (start - *s).max(0.0);
                        target = target.min((vmax * vmax + 2.0 * 2.0 * d).sqrt());
                    }
                }
                if !ignore_signal && *s < plan.s_stop && !green(cfg, plan.arm, t, offset) {
                    let d = plan.s_stop - *s;
                    // too close to stop comfortably: clear the junction
                    if v * v / (2.0 * 4.5) < d {
                        target = target.min((2.0 * 2.5 * (d - 0.5).max(0.0)).sqrt());
                    }
                }
            }
            let a_max = if target_boost > 0.0 { 3.5 } else { 2.0 };
            accel = ((target - v) / dt).clamp(-5.0, a_max);
        }
        v = (v + accel * dt).max(0.0);

        match &mut motion {
            Motion::OnPath { s } => *s += v * dt,
            Motion::Free {
                pos,
                heading,
                turn_left_s,
                omega,
            } => {
                if *turn_left_s > 0.0 {
                    *heading += *omega * dt;
                    *turn_left_s -= dt;
                }
                *pos = add(*pos, [v * heading.cos() * dt, v * heading.sin() * dt]);
            }
        }
        if a.kind == AgentType::Pedestrian {
            wobble += -0.5 * wobble * dt + 0.08 * dt.sqrt() * rng.normal();
        }
        frame += 1;
        t = frame as f64 * dt;
    }
    points
}
