use satp_core::baselines::{maneuver_labels, ManeuverModel, STRAIGHT};
use satp_core::data::{AgentType, Record, Track, TrackPoint};
use satp_core::numerics::{Mode, Tape};
use satp_core::pipeline::*;
use satp_core::predictor::{bind_constants, tp_loss, Predictor, PredictorConfig, Scene, SceneBatch};
use satp_core::selfaware::{SaConfig, SelfAware};

fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        predictor: PredictorConfig {
            n_max: 8,
            c_feat: 16,
            hidden: 16,
            blocks: 1,
            ..PredictorConfig::default()
        },
        selfaware: SaConfig {
            hidden: 8,
            layers: 1,
            ..SaConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.batch_size = 8;
    cfg.train.stage1.epochs = 2;
    cfg.train.stage2.epochs = 2;
    cfg.baselines.train.epochs = 1;
    cfg.baselines.ensemble_members = 2;
    cfg.data.generator.records = 4;
    cfg.data.generator.duration_s = 20.0;
    cfg.data.generator.agents_per_record = 10;
    cfg.data.stride = 2;
    cfg
}

/// Records of agents moving at constant velocity (zero velocity when
/// `still`), sampled at 2 Hz without noise.
fn line_records(count: usize, ticks: i64, still: bool) -> Vec<Record> {
    (0..count)
        .map(|r| {
            let tracks = (0..3u64)
                .map(|a| {
                    let k = (r as f64) * 0.37 + a as f64;
                    let v = if still {
                        [0.0, 0.0]
                    } else {
                        [0.8 * k.cos(), 0.8 * k.sin() + 0.3]
                    };
                    let start = [6.0 * a as f64 - 6.0, 2.0 * r as f64];
                    Track {
                        track_id: a + 1,
                        agent_type: AgentType::ALL[a as usize],
                        points: (0..ticks)
                            .map(|t| TrackPoint {
                                frame: t,
                                time_s: t as f64 * 0.5,
                                x: start[0] + v[0] * t as f64,
                                y: start[1] + v[1] * t as f64,
                            })
                            .collect(),
                    }
                })
                .collect();
            Record {
                record_id: format!("line{r:02}"),
                rate_hz: 2.0,
                tracks,
            }
        })
        .collect()
}

fn test_loss(cfg: &RunConfig, ck: &Checkpoint, scenes: &[Scene]) -> f64 {
    let model = Predictor::new(cfg.predictor.clone());
    let refs: Vec<&Scene> = scenes.iter().collect();
    let batch = SceneBatch::new(&refs).unwrap();
    let mut tape = Tape::new();
    let p = bind_constants(&ck.params, &mut tape).unwrap();
    let out = model
        .forward(&mut tape, &p, &batch, &mut Mode::Eval(&ck.buffers), None)
        .unwrap();
    let truth = tape.constant(&batch.truth).unwrap();
    let l = tp_loss(&mut tape, out.positions, truth, &batch.valid).unwrap();
    tape.value(l)[0]
}

#[test]
fn zero_epochs_return_the_initialization() {
    let mut cfg = tiny_config(1);
    cfg.train.stage1.epochs = 0;
    let data = Dataset::load(&cfg).unwrap();
    let out = train_stage1(&cfg, &data).unwrap();
    let (init, buffers) = Predictor::new(cfg.predictor.clone())
        .init(satp_core::numerics::rng::derive_seed(
            satp_core::numerics::rng::derive_seed(1, "stage1"),
            "init",
        ))
        .unwrap();
    assert_eq!(out.checkpoint.params.digest(), init.digest());
    assert_eq!(out.checkpoint.buffers.digest(), buffers.digest());
    assert_eq!(out.checkpoint.meta.epoch, 0);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config(2);
    let data = Dataset::load(&cfg).unwrap();
    let a = train_stage1(&cfg, &data).unwrap().checkpoint;
    let b = train_stage1(&cfg, &data).unwrap().checkpoint;
    assert_eq!(a.to_bytes(), b.to_bytes());
    let sa = train_stage2(&cfg, &data, &a).unwrap().checkpoint;
    let sb = train_stage2(&cfg, &data, &b).unwrap().checkpoint;
    assert_eq!(sa.to_bytes(), sb.to_bytes());
}

#[test]
fn constant_velocity_corpus_is_learnable() {
    let mut cfg = tiny_config(3);
    cfg.data.stride = 1;
    cfg.train.stage1.epochs = 50;
    cfg.train.stage1.lr = 5e-3;
    cfg.train.stage1.step_size = 20;
    cfg.train.grad_clip = 0.0;
    let data = Dataset::from_records(&line_records(32, 24, false), &cfg).unwrap();
    let out = train_stage1(&cfg, &data).unwrap();
    let best = out.log.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "best validation loss {best}");
}

#[test]
fn zero_error_labels_teach_zero_estimates() {
    let mut cfg = tiny_config(4);
    cfg.data.stride = 1;
    cfg.train.stage2.epochs = 10;
    cfg.train.stage2.lr = 3e-3;
    let data = Dataset::from_records(&line_records(6, 20, true), &cfg).unwrap();
    let model = Predictor::new(cfg.predictor.clone());
    let (mut params, buffers) = model.init(9).unwrap();
    for name in model.head_names() {
        params.get_mut(&name).unwrap().data_mut().fill(0.0);
    }
    let predictor = Checkpoint {
        meta: CheckpointMeta {
            config_digest: cfg.predictor_digest(),
            stage: "stage1".into(),
            seed: 0,
            epoch: 0,
        },
        params,
        buffers,
    };
    let sa = train_stage2(&cfg, &data, &predictor).unwrap().checkpoint;
    let eval = eval_selfaware(
        &cfg,
        "zero",
        &data.test,
        (&predictor.params, &predictor.buffers),
        &sa.params,
    )
    .unwrap();
    assert!(eval.samples.iter().all(|s| s.ade() == 0.0));
    let mean = eval.samples.iter().map(|s| s.diag_ade).sum::<f64>() / eval.samples.len() as f64;
    assert!(mean < 0.05, "mean estimate {mean}");
}

#[test]
fn stage_two_leaves_the_predictor_untouched_and_accepts_any_predictor() {
    let cfg = tiny_config(5);
    let data = Dataset::load(&cfg).unwrap();
    let p1 = train_stage1(&cfg, &data).unwrap().checkpoint;
    let before = (
        p1.params.digest(),
        p1.buffers.digest(),
        test_loss(&cfg, &p1, &data.test),
    );
    train_stage2(&cfg, &data, &p1).unwrap();
    let after = (
        p1.params.digest(),
        p1.buffers.digest(),
        test_loss(&cfg, &p1, &data.test),
    );
    assert_eq!(before, after);
    let other = train_stage1(&tiny_config(6), &data).unwrap().checkpoint;
    assert_ne!(other.params.digest(), p1.params.digest());
    assert!(train_stage2(&cfg, &data, &other).is_ok());
    let ae_before = other.params.digest();
    train_autoencoder(&cfg, &data, &other).unwrap();
    assert_eq!(other.params.digest(), ae_before);
}

#[test]
fn ensemble_members_differ() {
    let cfg = tiny_config(7);
    let data = Dataset::load(&cfg).unwrap();
    let members = train_ensemble(&cfg, &data).unwrap();
    assert_eq!(members.len(), 2);
    assert_ne!(members[0].checkpoint.to_bytes(), members[1].checkpoint.to_bytes());
    let eval = eval_ensemble(
        &cfg,
        &data.test,
        &[members[0].checkpoint.clone(), members[1].checkpoint.clone()],
    )
    .unwrap();
    assert_eq!(eval.total_parameters, 2 * members[0].checkpoint.params.count());
    assert!(eval_ensemble(&cfg, &data.test, &[members[0].checkpoint.clone()]).is_err());
}

#[test]
fn straight_corpus_maneuvers_are_classified() {
    let mut cfg = tiny_config(8);
    cfg.data.stride = 1;
    cfg.baselines.train.epochs = 15;
    cfg.baselines.train.lr = 3e-3;
    let data = Dataset::from_records(&line_records(6, 20, false), &cfg).unwrap();
    let ck = train_maneuver(&cfg, &data).unwrap().checkpoint;
    let model = ManeuverModel::new(cfg.predictor.clone());
    let (mut right, mut total) = (0, 0);
    for s in &data.train {
        let batch = SceneBatch::new(&[s]).unwrap();
        let labels = maneuver_labels(&batch);
        let out = model.predict(&ck.params, &ck.buffers, &batch).unwrap();
        for (r, p) in out.probs.chunks(3).enumerate() {
            if batch.valid[r] {
                assert_eq!(labels[r], STRAIGHT);
                let arg = (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                right += usize::from(arg == labels[r]);
                total += 1;
            }
        }
    }
    assert!(right as f64 >= 0.99 * total as f64, "{right}/{total}");
}

#[test]
fn reloaded_checkpoint_reproduces_validation_loss() {
    let cfg = tiny_config(9);
    let data = Dataset::load(&cfg).unwrap();
    let out = train_stage1(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(&cfg.predictor_digest())).unwrap();
    let a = test_loss(&cfg, &out.checkpoint, &data.val);
    let b = test_loss(&cfg, &back, &data.val);
    assert!((a - b).abs() <= 1e-12);
    let best = out.log.iter().find(|l| l.epoch == out.checkpoint.meta.epoch).unwrap();
    assert!(best.val_loss.is_finite());
}

#[test]
fn joint_training_produces_both_modules() {
    let cfg = tiny_config(10);
    let data = Dataset::load(&cfg).unwrap();
    let out = train_joint(&cfg, &data).unwrap().checkpoint;
    let pred = out.params.subset("predictor");
    let sa = out.params.subset("sa");
    assert_eq!(pred.len() + sa.len(), out.params.len());
    let expected = SelfAware::new(cfg.selfaware.clone(), &cfg.predictor)
        .unwrap()
        .init(0)
        .unwrap();
    assert_eq!(sa.count(), expected.count());
    let eval = eval_selfaware(&cfg, "joint", &data.test, (&pred, &out.buffers), &sa).unwrap();
    assert!(!eval.samples.is_empty());
}
