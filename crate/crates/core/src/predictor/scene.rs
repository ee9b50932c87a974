//! Scene tensors, proximity graphs and batching.

use crate::data::{AgentType, Sample};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Offset channels, agent-type one-hot, presence.
pub const INPUT_CHANNELS: usize = 2 + 4 + 1;

/// Per-agent inputs of one sample, agent slots sorted by distance to the
/// scene centroid and padded to `n_max`.
///
/// `values` is stored agent-major as `[n, t_h, c]`;
/// [`SceneTensor::channel_major`] gives the `(c, t_h, n)` arrangement.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTensor {
    pub record_id: String,
    pub start_frame: i64,
    pub values: Tensor,
    pub valid: Vec<bool>,
    pub agent_ids: Vec<Option<u64>>,
    pub agent_types: Vec<Option<AgentType>>,
    /// Position at `t = 0` in meters; zero for padded slots.
    pub anchor: Vec<[f64; 2]>,
    /// Ground-truth future `[n, t_f, 2]` in meters; zero for padded slots.
    pub truth: Tensor,
}

impl SceneTensor {
    pub fn n(&self) -> usize {
        self.valid.len()
    }

    pub fn t_h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn t_f(&self) -> usize {
        self.truth.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Presence as `[t_h][n]`.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        (0..self.t_h()).map(|_| self.valid.clone()).collect()
    }

    pub fn channel_major(&self) -> Tensor {
        to_channel_major(&self.values)
    }
}

/// `[n, t, c]` -> `[c, t, n]`.
pub fn to_channel_major(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, t, c) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, t, n]);
    for i in 0..n {
        for k in 0..t {
            for ch in 0..c {
                out.set(&[ch, k, i], x.at(&[i, k, ch]));
            }
        }
    }
    out
}

/// Degree-normalized proximity adjacency `[n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedGraph {
    pub adjacency: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub input: SceneTensor,
    pub graph: FixedGraph,
}

/// Builds the scene tensor and proximity graph of a sample.
pub fn build_scene(sample: &Sample, n_max: usize, d_close_m: f64) -> Result<Scene> {
    if sample.agents.is_empty() {
        return Err(Error::Data(format!(
            "sample {}@{} has no agents",
            sample.record_id, sample.start_frame
        )));
    }
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be positive".into()));
    }
    let t_h = sample.t_h();
    let t_f = sample.t_f();
    if t_h < 2 {
        return Err(Error::InvalidArgument("history needs at least two steps".into()));
    }
    let count = sample.agents.len() as f64;
    let centroid = sample.agents.iter().fold([0.0, 0.0], |acc, a| {
        let p = a.current();
        [acc[0] + p[0] / count, acc[1] + p[1] / count]
    });
    let dist = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let mut order: Vec<usize> = (0..sample.agents.len()).collect();
    order.sort_by(|&a, &b| {
        let da = dist(sample.agents[a].current(), centroid);
        let db = dist(sample.agents[b].current(), centroid);
        da.total_cmp(&db)
    });
    order.truncate(n_max);

    let n = n_max;
    let mut values = Tensor::zeros(&[n, t_h, INPUT_CHANNELS]);
    let mut truth = Tensor::zeros(&[n, t_f, 2]);
    let mut valid = vec![false; n];
    let mut agent_ids = vec![None; n];
    let mut agent_types = vec![None; n];
    let mut anchor = vec![[0.0; 2]; n];
    for (slot, &i) in order.iter().enumerate() {
        let a = &sample.agents[i];
        if a.history.len() != t_h || a.future.len() != t_f {
            return Err(Error::Data(format!("agent {} has ragged horizons", a.track_id)));
        }
        let p0 = a.current();
        valid[slot] = true;
        agent_ids[slot] = Some(a.track_id);
        agent_types[slot] = Some(a.agent_type);
        anchor[slot] = p0;
        for (k, p) in a.history.iter().enumerate() {
            values.set(&[slot, k, 0], p[0] - p0[0]);
            values.set(&[slot, k, 1], p[1] - p0[1]);
            values.set(&[slot, k, 2 + a.agent_type.index()], 1.0);
            values.set(&[slot, k, INPUT_CHANNELS - 1], 1.0);
        }
        for (k, p) in a.future.iter().enumerate() {
            truth.set(&[slot, k, 0], p[0]);
            truth.set(&[slot, k, 1], p[1]);
        }
    }

    let mut adjacency = Tensor::zeros(&[n, n]);
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let row: Vec<usize> = (0..n)
            .filter(|&j| valid[j] && (i == j || dist(anchor[i], anchor[j]) < d_close_m))
            .collect();
        let w = 1.0 / row.len() as f64;
        for j in row {
            adjacency.set(&[i, j], w);
        }
    }
    Ok(Scene {
        input: SceneTensor {
            record_id: sample.record_id.clone(),
            start_frame: sample.start_frame,
            values,
            valid,
            agent_ids,
            agent_types,
            anchor,
            truth,
        },
        graph: FixedGraph { adjacency },
    })
}

/// Several scenes stacked for one forward pass. Agent slots are trimmed to
/// the largest valid count in the batch; valid agents always occupy the
/// leading slots, so trimming only drops padding.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub batch: usize,
    pub n: usize,
    pub t_h: usize,
    pub t_f: usize,
    /// `[B, n, t_h, c]`
    pub values: Tensor,
    /// `[B, n, n]`
    pub adjacency: Tensor,
    /// `[B * n]`
    pub valid: Vec<bool>,
    pub agent_types: Vec<Option<AgentType>>,
    /// `[B * n]`, meters.
    pub anchor: Vec<[f64; 2]>,
    /// `[B, n, t_f, 2]`, meters.
    pub truth: Tensor,
}

impl SceneBatch {
    pub fn new(scenes: &[&Scene]) -> Result<SceneBatch> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty scene batch".into()))?;
        let (t_h, t_f) = (first.input.t_h(), first.input.t_f());
        let n = scenes.iter().map(|s| s.input.valid_count()).max().unwrap_or(0).max(1);
        let b = scenes.len();
        let c = INPUT_CHANNELS;
        let mut values = Vec::with_capacity(b * n * t_h * c);
        let mut adjacency = Vec::with_capacity(b * n * n);
        let mut truth = Vec::with_capacity(b * n * t_f * 2);
        let mut valid = Vec::with_capacity(b * n);
        let mut agent_types = Vec::with_capacity(b * n);
        let mut anchor = Vec::with_capacity(b * n);
        for s in scenes {
            let inp = &s.input;
            if inp.t_h() != t_h || inp.t_f() != t_f || inp.n() < n {
                return Err(Error::shape(
                    "scene_batch",
                    inp.values.shape(),
                    first.input.values.shape(),
                ));
            }
            let full = inp.n();
            values.extend_from_slice(&inp.values.data()[..n * t_h * c]);
            truth.extend_from_slice(&inp.truth.data()[..n * t_f * 2]);
            for i in 0..n {
                adjacency.extend_from_slice(&s.graph.adjacency.data()[i * full..i * full + n]);
            }
            valid.extend_from_slice(&inp.valid[..n]);
            agent_types.extend_from_slice(&inp.agent_types[..n]);
            anchor.extend_from_slice(&inp.anchor[..n]);
        }
        Ok(SceneBatch {
            batch: b,
            n,
            t_h,
            t_f,
            values: Tensor::new(vec![b, n, t_h, c], values)?,
            adjacency: Tensor::new(vec![b, n, n], adjacency)?,
            valid,
            agent_types,
            anchor,
            truth: Tensor::new(vec![b, n, t_f, 2], truth)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.n
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Last observed displacement `p(0) - p(-1)` per agent row, meters.
    pub fn last_increment(&self) -> Vec<[f64; 2]> {
        let c = INPUT_CHANNELS;
        let t_h = self.t_h;
        let d = self.values.data();
        (0..self.rows())
            .map(|r| {
                let prev = (r * t_h + t_h - 2) * c;
                let cur = (r * t_h + t_h - 1) * c;
                [d[cur] - d[prev], d[cur + 1] - d[prev + 1]]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AgentWindow;

    fn agent(id: u64, at: [f64; 2], kind: AgentType) -> AgentWindow {
        AgentWindow {
            track_id: id,
            agent_type: kind,
            history: vec![at; 6],
            future: vec![at; 6],
        }
    }

    fn sample(agents: Vec<AgentWindow>) -> Sample {
        Sample {
            record_id: "r".into(),
            start_frame: 0,
            agents,
        }
    }

    #[test]
    fn single_agent_graph() {
        let s = build_scene(&sample(vec![agent(1, [3.0, 4.0], AgentType::Pedestrian)]), 4, 10.0).unwrap();
        let a = s.graph.adjacency.data();
        assert_eq!(&a[0..4], &[1.0, 0.0, 0.0, 0.0]);
        assert!(a[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_close_agents_share_weights() {
        let s = build_scene(
            &sample(vec![
                agent(1, [0.0, 0.0], AgentType::SmallVehicle),
                agent(2, [5.0, 0.0], AgentType::SmallVehicle),
            ]),
            2,
            10.0,
        )
        .unwrap();
        assert!(s.graph.adjacency.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn far_agents_are_isolated() {
        let s = build_scene(
            &sample(vec![
                agent(1, [0.0, 0.0], AgentType::SmallVehicle),
                agent(2, [50.0, 0.0], AgentType::SmallVehicle),
            ]),
            2,
            10.0,
        )
        .unwrap();
        assert_eq!(s.graph.adjacency.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn stationary_agent_has_zero_offsets() {
        let s = build_scene(&sample(vec![agent(1, [0.0, 0.0], AgentType::BigVehicle)]), 2, 10.0).unwrap();
        let v = &s.input.values;
        for k in 0..6 {
            assert_eq!(v.at(&[0, k, 0]), 0.0);
            assert_eq!(v.at(&[0, k, 1]), 0.0);
            assert_eq!(v.at(&[0, k, 2 + AgentType::BigVehicle.index()]), 1.0);
            assert_eq!(v.at(&[0, k, INPUT_CHANNELS - 1]), 1.0);
        }
        assert!(v.data()[6 * INPUT_CHANNELS..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn overflow_drops_farthest_from_centroid() {
        let agents = vec![
            agent(1, [100.0, 0.0], AgentType::SmallVehicle),
            agent(2, [1.0, 0.0], AgentType::SmallVehicle),
            agent(3, [0.0, 0.0], AgentType::SmallVehicle),
            agent(4, [2.0, 0.0], AgentType::SmallVehicle),
        ];
        let s = build_scene(&sample(agents), 3, 10.0).unwrap();
        assert!(!s.input.agent_ids.contains(&Some(1)));
        assert_eq!(s.input.valid_count(), 3);
    }

    #[test]
    fn channel_major_shape() {
        let s = build_scene(&sample(vec![agent(1, [0.0, 0.0], AgentType::Pedestrian)]), 4, 10.0).unwrap();
        assert_eq!(s.input.channel_major().shape(), &[INPUT_CHANNELS, 6, 4]);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(build_scene(&sample(vec![]), 4, 10.0).is_err());
    }

    #[test]
    fn batch_trims_padding() {
        let a = build_scene(&sample(vec![agent(1, [0.0, 0.0], AgentType::Pedestrian)]), 8, 10.0).unwrap();
        let b = build_scene(
            &sample(vec![
                agent(1, [0.0, 0.0], AgentType::Pedestrian),
                agent(2, [1.0, 0.0], AgentType::Pedestrian),
            ]),
            8,
            10.0,
        )
        .unwrap();
        let batch = SceneBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.n, 2);
        assert_eq!(batch.valid, [true, false, true, true]);
        assert_eq!(batch.adjacency.shape(), &[2, 2, 2]);
    }
}
