//! Trajectory records, their ingestion and the sliding-window samples fed to
//! the models.

mod csv_io;
pub mod generator;
mod prep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use csv_io::{load_csv, read_csv, write_csv};
pub use generator::{generate, generate_with_metadata, AgentMeta, GeneratorConfig, HardEvent, Route, TypeMix};
pub use prep::{carve_validation, resample_2hz, split_by_record, window_samples, window_samples_all};

/// Sampling rate every model works at.
pub const RATE_HZ: f64 = 2.0;
pub const STEP_S: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    SmallVehicle,
    BigVehicle,
    Pedestrian,
    #[serde(rename = "two_wheeler")]
    MotorcyclistBicyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 4] = [
        AgentType::SmallVehicle,
        AgentType::BigVehicle,
        AgentType::Pedestrian,
        AgentType::MotorcyclistBicyclist,
    ];

    pub fn index(self) -> usize {
        match self {
            AgentType::SmallVehicle => 0,
            AgentType::BigVehicle => 1,
            AgentType::Pedestrian => 2,
            AgentType::MotorcyclistBicyclist => 3,
        }
    }

    /// Name used in CSV files and reports.
    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::SmallVehicle => "small_vehicle",
            AgentType::BigVehicle => "big_vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::MotorcyclistBicyclist => "two_wheeler",
        }
    }

    pub fn is_vehicle(self) -> bool {
        !matches!(self, AgentType::Pedestrian)
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        AgentType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown agent_type `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: i64,
    pub time_s: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub agent_type: AgentType,
    /// Strictly increasing in `frame`.
    pub points: Vec<TrackPoint>,
}

/// One continuous recording session.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub record_id: String,
    pub rate_hz: f64,
    pub tracks: Vec<Track>,
}

impl Record {
    pub fn agent_count(&self) -> usize {
        self.tracks.len()
    }
}

/// One agent inside a [`Sample`]: present at every frame of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentWindow {
    pub track_id: u64,
    pub agent_type: AgentType,
    /// `t_h` positions, the last one is the current moment `t = 0`.
    pub history: Vec<[f64; 2]>,
    /// `t_f` positions for `t = 1..=t_f`.
    pub future: Vec<[f64; 2]>,
}

impl AgentWindow {
    pub fn current(&self) -> [f64; 2] {
        *self.history.last().expect("history is never empty")
    }
}

/// One prediction task: every eligible agent of a record at one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record_id: String,
    /// Frame index of the first history position.
    pub start_frame: i64,
    pub agents: Vec<AgentWindow>,
}

impl Sample {
    pub fn t_h(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    pub fn t_f(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }
}
