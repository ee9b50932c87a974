//! Test-split inference for every diagnostic method, producing scored
//! samples, parameter counts and optional per-frame timings.

use crate::baselines::{
    ensemble_predict, history_offsets, mc_dropout_predict, nmap, recon_error, Autoencoder, ManeuverModel, SampleBundle,
    MANEUVERS,
};
use crate::error::{Error, Result};
use crate::eval::{count_parameters, time_per_frame, ScoredSample};
use crate::numerics::rng::derive_seed;
use crate::numerics::{BufferSet, Mode, ParameterSet, Rng, Tape};
use crate::pipeline::batch_of;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::predictor::{bind_constants, step_errors, Predictor, Scene, SceneBatch};
use crate::selfaware::{integrate_diagnostics, SelfAware};

/// Report names of the methods, in table order.
pub const METHODS: [&str; 6] = [
    "selfaware",
    "mu_nmap",
    "mu_entropy",
    "mc_dropout",
    "ensemble",
    "autoencoder",
];

/// Scored test samples of one method.
#[derive(Clone, Debug)]
pub struct MethodEval {
    pub method: String,
    pub samples: Vec<ScoredSample>,
    pub total_parameters: usize,
    pub ms_per_frame: Option<f64>,
}

/// Diagnostics of one agent row.
#[derive(Clone, Debug)]
struct RowDiag {
    steps: Option<Vec<f64>>,
    ade: f64,
    fde: f64,
}

/// Point prediction `[B, n, t_f, 2]` (flattened) and, per diagnostic
/// variant, one entry per agent row.
struct Inference {
    positions: Vec<f64>,
    variants: Vec<Vec<RowDiag>>,
}

fn run_method(
    cfg: &RunConfig,
    names: &[&str],
    scenes: &[Scene],
    total_parameters: usize,
    infer: &mut dyn FnMut(&SceneBatch) -> Result<Inference>,
) -> Result<Vec<MethodEval>> {
    if scenes.is_empty() {
        return Err(Error::Data("evaluation: test split is empty".into()));
    }
    let mut samples: Vec<Vec<ScoredSample>> = vec![Vec::new(); names.len()];
    let idx: Vec<usize> = (0..scenes.len()).collect();
    for chunk in idx.chunks(cfg.train.batch_size) {
        let batch = batch_of(scenes, chunk)?;
        let out = infer(&batch)?;
        if out.variants.len() != names.len() {
            return Err(Error::InvalidArgument("diagnostic variant count mismatch".into()));
        }
        for (row, errors) in step_errors(&out.positions, batch.truth.data(), &batch.valid, batch.t_f) {
            let scene = &scenes[chunk[row / batch.n]].input;
            let slot = row % batch.n;
            let (Some(track_id), Some(agent_type)) = (scene.agent_ids[slot], scene.agent_types[slot]) else {
                return Err(Error::Data("valid agent slot without identity".into()));
            };
            for (v, diags) in out.variants.iter().enumerate() {
                let d = &diags[row];
                samples[v].push(ScoredSample {
                    record_id: scene.record_id.clone(),
                    start_frame: scene.start_frame,
                    track_id,
                    agent_type,
                    errors: errors.clone(),
                    step_diagnostics: d.steps.clone(),
                    diag_ade: d.ade,
                    diag_fde: d.fde,
                });
            }
        }
    }
    let ms = if cfg.eval.timing {
        let mut frame = |i: usize| -> Result<()> {
            let batch = batch_of(scenes, &[i % scenes.len()])?;
            infer(&batch).map(|_| ())
        };
        Some(time_per_frame(
            &mut frame,
            cfg.eval.timing_frames,
            cfg.eval.timing_warmup,
        )?)
    } else {
        None
    };
    Ok(names
        .iter()
        .zip(samples)
        .map(|(name, samples)| MethodEval {
            method: name.to_string(),
            samples,
            total_parameters,
            ms_per_frame: ms,
        })
        .collect())
}

fn single(mut evals: Vec<MethodEval>) -> MethodEval {
    evals.pop().expect("one method requested")
}

fn sequence_diags(z: &[f64], t_f: usize, d: usize) -> Vec<RowDiag> {
    let whole = integrate_diagnostics(z, t_f, d);
    z.chunks(t_f * d)
        .zip(whole)
        .map(|(row, (ade, fde))| RowDiag {
            steps: Some(
                row.chunks(d)
                    .map(|v| {
                        if d == 1 {
                            v[0]
                        } else {
                            v.iter().map(|x| x * x).sum::<f64>().sqrt()
                        }
                    })
                    .collect(),
            ),
            ade,
            fde,
        })
        .collect()
}

fn entropy_diags(bundle: &SampleBundle) -> Vec<RowDiag> {
    (0..bundle.rows())
        .map(|r| {
            let steps: Vec<f64> = (0..bundle.t_f()).map(|t| bundle.entropy(r, t)).collect();
            let (ade, fde) = crate::baselines::ape_fpe(&steps);
            RowDiag {
                steps: Some(steps),
                ade,
                fde,
            }
        })
        .collect()
}

/// Predictor plus self-awareness module; diagnostics are the estimated
/// per-step errors.
pub fn eval_selfaware(
    cfg: &RunConfig,
    method: &str,
    scenes: &[Scene],
    predictor: (&ParameterSet, &BufferSet),
    sa_params: &ParameterSet,
) -> Result<MethodEval> {
    let model = Predictor::new(cfg.predictor.clone());
    let sa = SelfAware::new(cfg.selfaware.clone(), &cfg.predictor)?;
    let d = cfg.selfaware.label_form.width();
    let mut infer = |batch: &SceneBatch| -> Result<Inference> {
        let mut tape = Tape::new();
        let pp = bind_constants(predictor.0, &mut tape)?;
        let sp = bind_constants(sa_params, &mut tape)?;
        let out = model.forward(&mut tape, &pp, batch, &mut Mode::Eval(predictor.1), None)?;
        let z = sa.forward(&mut tape, &sp, out.gf, out.positions, &batch.anchor)?;
        Ok(Inference {
            positions: tape.value(out.positions).to_vec(),
            variants: vec![sequence_diags(tape.value(z), batch.t_f, d)],
        })
    };
    let total = count_parameters(&[predictor.0, sa_params]);
    run_method(cfg, &[method], scenes, total, &mut infer).map(single)
}

/// Maneuver-uncertainty baseline: the most probable maneuver's trajectory,
/// scored by negative max probability and by predictive entropy over the
/// maneuver trajectories.
pub fn eval_maneuver(cfg: &RunConfig, scenes: &[Scene], ckpt: &Checkpoint) -> Result<Vec<MethodEval>> {
    let model = ManeuverModel::new(cfg.predictor.clone());
    let mut infer = |batch: &SceneBatch| -> Result<Inference> {
        let out = model.predict(&ckpt.params, &ckpt.buffers, batch)?;
        let point = out.bundle.most_likely();
        let nmap_rows = out
            .probs
            .chunks(MANEUVERS)
            .map(|p| {
                let v = nmap(p);
                RowDiag {
                    steps: None,
                    ade: v,
                    fde: v,
                }
            })
            .collect();
        Ok(Inference {
            positions: point.into_data(),
            variants: vec![nmap_rows, entropy_diags(&out.bundle)],
        })
    };
    run_method(cfg, &["mu_nmap", "mu_entropy"], scenes, ckpt.params.count(), &mut infer)
}

/// MC dropout: average of stochastic forwards, scored by predictive entropy.
pub fn eval_mc_dropout(cfg: &RunConfig, scenes: &[Scene], ckpt: &Checkpoint) -> Result<MethodEval> {
    let model = Predictor::new(cfg.predictor.clone());
    let mut rng = Rng::new(derive_seed(cfg.seed, "mc-dropout-eval"));
    let (rate, samples) = (cfg.baselines.mc_rate, cfg.baselines.mc_samples);
    let mut infer = |batch: &SceneBatch| -> Result<Inference> {
        let bundle = mc_dropout_predict(&model, &ckpt.params, &ckpt.buffers, batch, rate, samples, &mut rng)?;
        Ok(Inference {
            positions: bundle.average().into_data(),
            variants: vec![entropy_diags(&bundle)],
        })
    };
    run_method(cfg, &["mc_dropout"], scenes, ckpt.params.count(), &mut infer).map(single)
}

/// Deep ensemble: average of member predictions, scored by predictive
/// entropy.
pub fn eval_ensemble(cfg: &RunConfig, scenes: &[Scene], members: &[Checkpoint]) -> Result<MethodEval> {
    let model = Predictor::new(cfg.predictor.clone());
    let sets: Vec<(ParameterSet, BufferSet)> = members.iter().map(|c| (c.params.clone(), c.buffers.clone())).collect();
    let expected = cfg.baselines.ensemble_members;
    let mut infer = |batch: &SceneBatch| -> Result<Inference> {
        let bundle = ensemble_predict(&model, &sets, expected, batch)?;
        Ok(Inference {
            positions: bundle.average().into_data(),
            variants: vec![entropy_diags(&bundle)],
        })
    };
    let refs: Vec<&ParameterSet> = members.iter().map(|c| &c.params).collect();
    run_method(cfg, &["ensemble"], scenes, count_parameters(&refs), &mut infer).map(single)
}

/// Predictor plus history-reconstruction decoder; the reconstruction error
/// is the diagnostic for both metrics.
pub fn eval_autoencoder(
    cfg: &RunConfig,
    scenes: &[Scene],
    predictor: &Checkpoint,
    ae_params: &ParameterSet,
) -> Result<MethodEval> {
    let model = Predictor::new(cfg.predictor.clone());
    let ae = Autoencoder::new(&cfg.predictor);
    let mut infer = |batch: &SceneBatch| -> Result<Inference> {
        let mut tape = Tape::new();
        let pp = bind_constants(&predictor.params, &mut tape)?;
        let ap = bind_constants(ae_params, &mut tape)?;
        let out = model.forward(&mut tape, &pp, batch, &mut Mode::Eval(&predictor.buffers), None)?;
        let recon = ae.reconstruct(&mut tape, &ap, out.gf)?;
        let errs = recon_error(tape.value(recon), history_offsets(batch).data(), batch.t_h);
        Ok(Inference {
            positions: tape.value(out.positions).to_vec(),
            variants: vec![errs
                .into_iter()
                .map(|e| RowDiag {
                    steps: None,
                    ade: e,
                    fde: e,
                })
                .collect()],
        })
    };
    let total = count_parameters(&[&predictor.params, ae_params]);
    run_method(cfg, &["autoencoder"], scenes, total, &mut infer).map(single)
}
