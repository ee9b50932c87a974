//! Trajectory predictor: scene construction, graph feature extractor and
//! sequence decoder.

mod model;
mod scene;

pub use model::{bind_constants, step_errors, tp_loss, Predictor, PredictorConfig, PredictorOutput, PREFIX};
pub use scene::{build_scene, to_channel_major, FixedGraph, Scene, SceneBatch, SceneTensor, INPUT_CHANNELS};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgentType, AgentWindow, Sample};
    use crate::numerics::{Mode, Tape, Tensor};

    fn cfg() -> PredictorConfig {
        PredictorConfig {
            n_max: 4,
            c_feat: 16,
            hidden: 16,
            ..PredictorConfig::default()
        }
    }

    fn moving(id: u64, start: [f64; 2], v: [f64; 2]) -> AgentWindow {
        let at = |k: i64| [start[0] + v[0] * k as f64, start[1] + v[1] * k as f64];
        AgentWindow {
            track_id: id,
            agent_type: AgentType::SmallVehicle,
            history: (-5..=0).map(at).collect(),
            future: (1..=6).map(at).collect(),
        }
    }

    fn scene(agents: Vec<AgentWindow>, n_max: usize) -> Scene {
        let s = Sample {
            record_id: "r".into(),
            start_frame: 0,
            agents,
        };
        build_scene(&s, n_max, 10.0).unwrap()
    }

    #[test]
    fn output_shapes() {
        let model = Predictor::new(PredictorConfig {
            c_feat: 16,
            hidden: 16,
            n_max: 4,
            ..PredictorConfig::default()
        });
        let (ps, buf) = model.init(1).unwrap();
        let sc = scene(
            vec![
                moving(1, [0.0, 0.0], [1.0, 0.0]),
                moving(2, [3.0, 0.0], [0.0, 1.0]),
                moving(3, [30.0, 0.0], [0.0, 1.0]),
                moving(4, [6.0, 2.0], [0.5, 0.5]),
            ],
            4,
        );
        let batch = SceneBatch::new(&[&sc]).unwrap();
        let (gf, pos) = model.predict(&ps, &buf, &batch).unwrap();
        assert_eq!(gf.shape(), &[1, 4, 6, 16]);
        let gf_agent_major = gf.clone().reshape(&[4, 6, 16]).unwrap();
        assert_eq!(to_channel_major(&gf_agent_major).shape(), &[16, 6, 4]);
        assert_eq!(pos.shape(), &[1, 4, 6, 2]);
        assert!(gf.all_finite() && pos.all_finite());
    }

    #[test]
    fn zero_head_predicts_the_anchor() {
        let model = Predictor::new(cfg());
        let (mut ps, buf) = model.init(2).unwrap();
        for name in model.head_names() {
            ps.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let sc = scene(
            vec![moving(1, [5.0, -2.0], [1.0, 0.5]), moving(2, [8.0, 1.0], [0.0, 1.0])],
            4,
        );
        let batch = SceneBatch::new(&[&sc]).unwrap();
        let (_, pos) = model.predict(&ps, &buf, &batch).unwrap();
        for r in 0..2 {
            for k in 0..6 {
                assert_eq!(pos.at(&[0, r, k, 0]), batch.anchor[r][0]);
                assert_eq!(pos.at(&[0, r, k, 1]), batch.anchor[r][1]);
            }
        }
    }

    #[test]
    fn padded_slots_are_zero() {
        let model = Predictor::new(cfg());
        let (ps, buf) = model.init(3).unwrap();
        let a = scene(vec![moving(1, [0.0, 0.0], [1.0, 0.0])], 4);
        let b = scene(
            vec![moving(1, [0.0, 0.0], [1.0, 0.0]), moving(2, [2.0, 0.0], [1.0, 0.0])],
            4,
        );
        let batch = SceneBatch::new(&[&a, &b]).unwrap();
        let (gf, pos) = model.predict(&ps, &buf, &batch).unwrap();
        assert!(gf.data()[6 * 16..2 * 6 * 16].iter().all(|v| *v == 0.0));
        assert!(pos.data()[12..24].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn isolated_agents_do_not_interact() {
        let model = Predictor::new(cfg());
        let (ps, buf) = model.init(4).unwrap();
        let base = vec![moving(1, [0.0, 0.0], [1.0, 0.0]), moving(2, [40.0, 0.0], [0.0, 1.0])];
        let mut other = base.clone();
        other[1] = moving(2, [40.0, 0.0], [-1.5, 0.3]);
        let pa = model
            .predict(&ps, &buf, &SceneBatch::new(&[&scene(base, 2)]).unwrap())
            .unwrap()
            .1;
        let pb = model
            .predict(&ps, &buf, &SceneBatch::new(&[&scene(other, 2)]).unwrap())
            .unwrap()
            .1;
        assert_eq!(&pa.data()[..12], &pb.data()[..12]);
        assert_ne!(&pa.data()[12..], &pb.data()[12..]);
    }

    #[test]
    fn train_mode_updates_running_statistics() {
        let model = Predictor::new(cfg());
        let (ps, mut buf) = model.init(5).unwrap();
        let before = buf.digest();
        let sc = scene(
            vec![moving(1, [0.0, 0.0], [1.0, 0.0]), moving(2, [2.0, 0.0], [1.0, 0.0])],
            4,
        );
        let batch = SceneBatch::new(&[&sc]).unwrap();
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape).unwrap();
        model
            .forward(&mut tape, &p, &batch, &mut Mode::Train(&mut buf), None)
            .unwrap();
        assert_ne!(before, buf.digest());
    }

    fn loss_of(pos: Vec<f64>, truth: Vec<f64>, valid: &[bool], tf: usize) -> f64 {
        let n = valid.len();
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![n, tf, 2], pos).unwrap()).unwrap();
        let t = tape.constant(&Tensor::new(vec![n, tf, 2], truth).unwrap()).unwrap();
        let l = tp_loss(&mut tape, p, t, valid).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn tp_loss_examples() {
        let truth = vec![1.0; 12];
        assert_eq!(loss_of(truth.clone(), truth.clone(), &[true], 6), 0.0);
        let shifted: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 4.0 } else { 5.0 }).collect();
        assert_eq!(loss_of(shifted, truth, &[true], 6), 5.0);
        let pos = vec![0.0; 24];
        let mut truth = vec![0.0; 24];
        for k in 0..6 {
            truth[k * 2] = 1.0;
            truth[12 + k * 2] = 3.0;
        }
        assert!((loss_of(pos, truth, &[true, true], 6) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tp_loss_ignores_invalid_rows_and_needs_one_valid() {
        let pos = vec![0.0; 4];
        let truth = vec![0.0, 0.0, 100.0, 100.0];
        assert_eq!(loss_of(pos.clone(), truth.clone(), &[true, false], 1), 0.0);
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![2, 1, 2], pos).unwrap()).unwrap();
        let t = tape.constant(&Tensor::new(vec![2, 1, 2], truth).unwrap()).unwrap();
        assert!(tp_loss(&mut tape, p, t, &[false, false]).is_err());
    }
}
