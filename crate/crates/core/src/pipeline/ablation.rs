//! Ablation matrix: fusion x estimator, error-label form, and two-stage
//! versus weighted single-stage training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::AgentType;
use crate::error::{Error, Result};
use crate::eval::{evaluate, per_moment_report, per_type_report, SasReport, TypeRow};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::pipeline::evaluate::{eval_selfaware, MethodEval};
use crate::pipeline::report::{format_float, per_moment_csv, per_type_csv, write_file, JsonValue};
use crate::pipeline::train::{train_joint, train_stage2};
use crate::pipeline::{thread_pool, Dataset};
use crate::predictor::PREFIX as PREDICTOR_PREFIX;
use crate::selfaware::{Estimator, Fusion, LabelForm, PREFIX as SA_PREFIX};

pub const TWO_STAGE: &str = "two_stage";
pub const WEIGHTING: &str = "weighting";

/// Fusion/estimator pairs of the architecture table; the bare readout only
/// appears with the graph feature alone.
pub const ARCHITECTURES: [(Fusion, Estimator); 10] = [
    (Fusion::Gf, Estimator::None),
    (Fusion::Gf, Estimator::Mlp),
    (Fusion::Gf, Estimator::Conv),
    (Fusion::Gf, Estimator::Lstm),
    (Fusion::Add, Estimator::Mlp),
    (Fusion::Add, Estimator::Conv),
    (Fusion::Add, Estimator::Lstm),
    (Fusion::Concat, Estimator::Mlp),
    (Fusion::Concat, Estimator::Conv),
    (Fusion::Concat, Estimator::Lstm),
];

pub const LABEL_FORMS: [LabelForm; 3] = [LabelForm::Velocity, LabelForm::PositionXy, LabelForm::Distance];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct CellKey {
    fusion: Fusion,
    estimator: Estimator,
    label_form: LabelForm,
    training: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub fusion: Fusion,
    pub estimator: Estimator,
    pub label_form: LabelForm,
    pub training: String,
    pub aucoc_ade: Option<f64>,
    pub aucoc_fde: Option<f64>,
    pub sas_ade: Option<f64>,
    pub sas_fde: Option<f64>,
    /// Failure message when the cell could not be trained or evaluated.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub architecture: Vec<AblationRow>,
    pub labels: Vec<AblationRow>,
    pub training: Vec<AblationRow>,
    /// Per-step rows of the configured model.
    pub per_moment: Vec<SasReport>,
    /// Per-type rows of the configured model.
    pub per_type: BTreeMap<AgentType, TypeRow>,
}

fn cell_config(cfg: &RunConfig, key: &CellKey) -> RunConfig {
    let mut c = cfg.clone();
    c.selfaware.fusion = key.fusion;
    c.selfaware.estimator = key.estimator;
    c.selfaware.label_form = key.label_form;
    c.eval.timing = false;
    c
}

fn run_cell(cfg: &RunConfig, data: &Dataset, predictor: &Checkpoint, key: &CellKey) -> Result<MethodEval> {
    let c = cell_config(cfg, key);
    let name = format!(
        "{}_{}_{}_{}",
        key.fusion.name(),
        key.estimator.name(),
        key.label_form.name(),
        key.training
    );
    if key.training == WEIGHTING {
        let joint = train_joint(&c, data)?.checkpoint;
        let pred = joint.params.subset(PREDICTOR_PREFIX);
        let sa = joint.params.subset(SA_PREFIX);
        eval_selfaware(&c, &name, &data.test, (&pred, &joint.buffers), &sa)
    } else {
        let sa = train_stage2(&c, data, predictor)?.checkpoint;
        eval_selfaware(
            &c,
            &name,
            &data.test,
            (&predictor.params, &predictor.buffers),
            &sa.params,
        )
    }
}

fn row(key: &CellKey, result: &std::result::Result<MethodEval, String>, grid: &[f64]) -> AblationRow {
    let mut r = AblationRow {
        fusion: key.fusion,
        estimator: key.estimator,
        label_form: key.label_form,
        training: key.training.to_string(),
        aucoc_ade: None,
        aucoc_fde: None,
        sas_ade: None,
        sas_fde: None,
        error: None,
    };
    match result.as_ref().map(|e| evaluate(&e.samples, grid)) {
        Ok(Ok(m)) => {
            r.aucoc_ade = Some(m.ade.aucoc);
            r.aucoc_fde = Some(m.fde.aucoc);
            r.sas_ade = m.ade.sas;
            r.sas_fde = m.fde.sas;
        }
        Ok(Err(e)) => r.error = Some(e.to_string()),
        Err(e) => r.error = Some(e.clone()),
    }
    r
}

/// Trains and evaluates every ablation cell against the frozen stage-1
/// predictor (the weighted cells train their own). Cells run concurrently
/// on the `SATP_THREADS` pool; a failing cell is reported in its row and
/// the others continue.
pub fn run_ablations(cfg: &RunConfig, data: &Dataset, predictor: &Checkpoint) -> Result<AblationReport> {
    let base = &cfg.selfaware;
    let arch_keys: Vec<CellKey> = ARCHITECTURES
        .iter()
        .map(|&(fusion, estimator)| CellKey {
            fusion,
            estimator,
            label_form: base.label_form,
            training: TWO_STAGE,
        })
        .collect();
    let label_keys: Vec<CellKey> = LABEL_FORMS
        .iter()
        .map(|&label_form| CellKey {
            fusion: base.fusion,
            estimator: base.estimator,
            label_form,
            training: TWO_STAGE,
        })
        .collect();
    let configured = CellKey {
        fusion: base.fusion,
        estimator: base.estimator,
        label_form: base.label_form,
        training: TWO_STAGE,
    };
    let training_keys = vec![
        CellKey {
            training: WEIGHTING,
            ..configured.clone()
        },
        configured.clone(),
    ];
    let mut unique: Vec<CellKey> = arch_keys
        .iter()
        .chain(&label_keys)
        .chain(&training_keys)
        .cloned()
        .collect();
    unique.sort();
    unique.dedup();
    let pool = thread_pool()?;
    let results: Vec<std::result::Result<MethodEval, String>> = pool.install(|| {
        unique
            .par_iter()
            .map(|k| run_cell(cfg, data, predictor, k).map_err(|e| e.to_string()))
            .collect()
    });
    let by_key: BTreeMap<&CellKey, &std::result::Result<MethodEval, String>> = unique.iter().zip(&results).collect();
    let grid = &cfg.eval.grid;
    let rows = |keys: &[CellKey]| keys.iter().map(|k| row(k, by_key[k], grid)).collect::<Vec<_>>();
    let main = by_key[&configured]
        .as_ref()
        .map_err(|e| Error::InvalidArgument(format!("configured ablation cell failed: {e}")))?;
    Ok(AblationReport {
        architecture: rows(&arch_keys),
        labels: rows(&label_keys),
        training: rows(&training_keys),
        per_moment: per_moment_report(&main.samples, grid)?,
        per_type: per_type_report(&main.samples, grid)?,
    })
}

fn rows_json(rows: &[AblationRow]) -> JsonValue {
    JsonValue::Arr(
        rows.iter()
            .map(|r| {
                JsonValue::obj([
                    ("fusion", JsonValue::Str(r.fusion.name().into())),
                    ("estimator", JsonValue::Str(r.estimator.name().into())),
                    ("label_form", JsonValue::Str(r.label_form.name().into())),
                    ("training", JsonValue::Str(r.training.clone())),
                    ("aucoc_ade", JsonValue::opt(r.aucoc_ade)),
                    ("aucoc_fde", JsonValue::opt(r.aucoc_fde)),
                    ("sas_ade", JsonValue::opt(r.sas_ade)),
                    ("sas_fde", JsonValue::opt(r.sas_fde)),
                    ("error", r.error.clone().map_or(JsonValue::Null, JsonValue::Str)),
                ])
            })
            .collect(),
    )
}

fn rows_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    let mut out = String::from("fusion,estimator,label_form,training,aucoc_ade,aucoc_fde,sas_ade,sas_fde,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.fusion.name(),
            r.estimator.name(),
            r.label_form.name(),
            r.training,
            f(r.aucoc_ade),
            f(r.aucoc_fde),
            f(r.sas_ade),
            f(r.sas_fde),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    out
}

impl AblationReport {
    pub fn to_json(&self, cfg: &RunConfig) -> JsonValue {
        let per_moment = self
            .per_moment
            .iter()
            .enumerate()
            .map(|(t, r)| {
                JsonValue::obj([
                    ("moment", JsonValue::Int(t as i64 + 1)),
                    ("aucoc_random", JsonValue::Num(r.aucoc_random)),
                    ("aucoc", JsonValue::Num(r.aucoc)),
                    ("aucoc_optimal", JsonValue::Num(r.aucoc_optimal)),
                    ("sas", JsonValue::opt(r.sas)),
                ])
            })
            .collect();
        let per_type = self
            .per_type
            .iter()
            .map(|(k, r)| {
                (
                    k.as_str().to_string(),
                    JsonValue::obj([
                        ("count", JsonValue::Int(r.count as i64)),
                        ("sas_ade", JsonValue::opt(r.sas_ade)),
                        ("sas_fde", JsonValue::opt(r.sas_fde)),
                    ]),
                )
            })
            .collect();
        JsonValue::obj([
            ("architecture", rows_json(&self.architecture)),
            ("labels", rows_json(&self.labels)),
            ("training", rows_json(&self.training)),
            ("per_moment", JsonValue::Arr(per_moment)),
            ("per_type", JsonValue::Obj(per_type)),
            ("seed", JsonValue::Int(cfg.seed as i64)),
            ("config_digest", JsonValue::Str(cfg.digest())),
        ])
    }

    /// Writes `ablation.json` and one CSV per table into `dir`.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("ablation.json", self.to_json(cfg).render()),
            ("ablation_architecture.csv", rows_csv(&self.architecture)),
            ("ablation_labels.csv", rows_csv(&self.labels)),
            ("ablation_training.csv", rows_csv(&self.training)),
            ("ablation_per_moment.csv", per_moment_csv(&self.per_moment)),
            ("ablation_per_type.csv", per_type_csv(&self.per_type)),
        ];
        files
            .into_iter()
            .map(|(name, text)| {
                let p = dir.join(name);
                write_file(&p, &text).map(|_| p)
            })
            .collect()
    }
}
