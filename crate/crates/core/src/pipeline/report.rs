//! Report files: per-method metrics JSON, cutoff-curve CSVs and the merged
//! comparison table.
//!
//! JSON is written by hand so key order is fixed and floats carry 17
//! significant digits; parsing back goes through `serde_json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::AgentType;
use crate::error::{Error, Result};
use crate::eval::{evaluate, per_moment_report, per_type_report, SasReport};
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset_name;
use crate::pipeline::evaluate::{MethodEval, METHODS};

/// Ordered JSON tree.
#[derive(Clone, Debug, PartialEq)]
pub enum JsonValue {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<JsonValue>),
    Obj(Vec<(String, JsonValue)>),
}

impl JsonValue {
    pub fn obj<const N: usize>(items: [(&str, JsonValue); N]) -> JsonValue {
        JsonValue::Obj(items.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn opt(v: Option<f64>) -> JsonValue {
        v.map_or(JsonValue::Null, JsonValue::Num)
    }

    /// Pretty-printed with two-space indentation and a trailing newline.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.write(&mut s, 0);
        s.push('\n');
        s
    }

    fn write(&self, out: &mut String, depth: usize) {
        let pad = |out: &mut String, d: usize| out.push_str(&"  ".repeat(d));
        match self {
            JsonValue::Null => out.push_str("null"),
            JsonValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JsonValue::Int(i) => {
                let _ = write!(out, "{i}");
            }
            JsonValue::Num(x) => out.push_str(&format_float(*x)),
            JsonValue::Str(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
            JsonValue::Arr(items) if items.is_empty() => out.push_str("[]"),
            JsonValue::Obj(items) if items.is_empty() => out.push_str("{}"),
            JsonValue::Arr(items) => {
                out.push_str("[\n");
                for (i, v) in items.iter().enumerate() {
                    pad(out, depth + 1);
                    v.write(out, depth + 1);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                pad(out, depth);
                out.push(']');
            }
            JsonValue::Obj(items) => {
                out.push_str("{\n");
                for (i, (k, v)) in items.iter().enumerate() {
                    pad(out, depth + 1);
                    out.push_str(&serde_json::to_string(k).expect("strings serialize"));
                    out.push_str(": ");
                    v.write(out, depth + 1);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                pad(out, depth);
                out.push('}');
            }
        }
    }
}

/// 17 significant digits in scientific notation; non-finite values become
/// `null`.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

fn sas_block(r: &SasReport) -> JsonValue {
    JsonValue::obj([
        ("aucoc_random", JsonValue::Num(r.aucoc_random)),
        ("aucoc", JsonValue::Num(r.aucoc)),
        ("aucoc_optimal", JsonValue::Num(r.aucoc_optimal)),
        ("sas", JsonValue::opt(r.sas)),
    ])
}

/// Metrics document of one method.
pub fn method_report_json(cfg: &RunConfig, eval: &MethodEval) -> Result<JsonValue> {
    let grid = &cfg.eval.grid;
    let m = evaluate(&eval.samples, grid)?;
    let has_steps = eval.samples.iter().all(|s| s.step_diagnostics.is_some());
    let per_moment = if has_steps && !eval.samples.is_empty() {
        per_moment_report(&eval.samples, grid)?
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let mut row = vec![("moment".to_string(), JsonValue::Int(t as i64 + 1))];
                if let JsonValue::Obj(items) = sas_block(r) {
                    row.extend(items);
                }
                JsonValue::Obj(row)
            })
            .collect()
    } else {
        Vec::new()
    };
    let per_type = per_type_report(&eval.samples, grid)?
        .into_iter()
        .map(|(k, row)| {
            (
                k.as_str().to_string(),
                JsonValue::obj([
                    ("count", JsonValue::Int(row.count as i64)),
                    ("sas_ade", JsonValue::opt(row.sas_ade)),
                    ("sas_fde", JsonValue::opt(row.sas_fde)),
                ]),
            )
        })
        .collect();
    let n = eval.samples.len() as f64;
    let mean_ade = eval.samples.iter().map(|s| s.ade()).sum::<f64>() / n;
    let mean_fde = eval.samples.iter().map(|s| s.fde()).sum::<f64>() / n;
    Ok(JsonValue::obj([
        ("method", JsonValue::Str(eval.method.clone())),
        ("dataset", JsonValue::Str(dataset_name(cfg))),
        ("samples", JsonValue::Int(eval.samples.len() as i64)),
        ("ade_m", JsonValue::Num(mean_ade)),
        ("fde_m", JsonValue::Num(mean_fde)),
        (
            "aucoc",
            JsonValue::obj([
                ("ade", JsonValue::Num(m.ade.aucoc)),
                ("fde", JsonValue::Num(m.fde.aucoc)),
            ]),
        ),
        (
            "aucoc_random",
            JsonValue::obj([
                ("ade", JsonValue::Num(m.ade.aucoc_random)),
                ("fde", JsonValue::Num(m.fde.aucoc_random)),
            ]),
        ),
        (
            "aucoc_optimal",
            JsonValue::obj([
                ("ade", JsonValue::Num(m.ade.aucoc_optimal)),
                ("fde", JsonValue::Num(m.fde.aucoc_optimal)),
            ]),
        ),
        (
            "sas",
            JsonValue::obj([("ade", JsonValue::opt(m.ade.sas)), ("fde", JsonValue::opt(m.fde.sas))]),
        ),
        ("per_moment", JsonValue::Arr(per_moment)),
        ("per_type", JsonValue::Obj(per_type)),
        ("total_parameters", JsonValue::Int(eval.total_parameters as i64)),
        ("avg_ms_per_frame", JsonValue::opt(eval.ms_per_frame)),
        ("seed", JsonValue::Int(cfg.seed as i64)),
        ("config_digest", JsonValue::Str(cfg.digest())),
    ]))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics_<method>.json` and `cutoff_<method>_{ade,fde}.csv` into
/// `dir`; returns the paths written.
pub fn write_method_outputs(cfg: &RunConfig, eval: &MethodEval, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = evaluate(&eval.samples, &cfg.eval.grid)?;
    let json = dir.join(format!("metrics_{}.json", eval.method));
    write_file(&json, &method_report_json(cfg, eval)?.render())?;
    let ade = dir.join(format!("cutoff_{}_ade.csv", eval.method));
    write_file(&ade, &m.ade_curve.to_csv())?;
    let fde = dir.join(format!("cutoff_{}_fde.csv", eval.method));
    write_file(&fde, &m.fde_curve.to_csv())?;
    Ok(vec![json, ade, fde])
}

fn cell(v: Option<&serde_json::Value>, digits: usize) -> String {
    match v.and_then(serde_json::Value::as_f64) {
        Some(x) => format!("{x:.digits$}"),
        None => "-".to_string(),
    }
}

/// Merges every `metrics_*.json` in `dir` into one markdown table (rows =
/// methods, columns = AUCOC and SAS per metric, parameters, ms/frame).
pub fn comparison_table(dir: &Path) -> Result<String> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut docs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !(name.starts_with("metrics_") && name.ends_with(".json")) {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::Data(format!(
            "report: no metrics_*.json files in {}",
            dir.display()
        )));
    }
    let rank = |m: &str| METHODS.iter().position(|x| *x == m).unwrap_or(METHODS.len());
    docs.sort_by(|a, b| {
        let (ma, mb) = (a["method"].as_str().unwrap_or(""), b["method"].as_str().unwrap_or(""));
        (rank(ma), ma).cmp(&(rank(mb), mb))
    });
    let mut out = String::from(
        "| method | AUCOC ADE (m) | SAS ADE | AUCOC FDE (m) | SAS FDE | parameters | ms/frame |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for d in &docs {
        let params = d["total_parameters"]
            .as_u64()
            .map_or("-".to_string(), |p| p.to_string());
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            d["method"].as_str().unwrap_or("?"),
            cell(d.pointer("/aucoc/ade"), 4),
            cell(d.pointer("/sas/ade"), 3),
            cell(d.pointer("/aucoc/fde"), 4),
            cell(d.pointer("/sas/fde"), 3),
            params,
            cell(d.get("avg_ms_per_frame"), 2),
        );
    }
    Ok(out)
}

/// CSV rows of a per-type table in fixed type order.
pub(crate) fn per_type_csv(rows: &std::collections::BTreeMap<AgentType, crate::eval::TypeRow>) -> String {
    let mut out = String::from("agent_type,count,sas_ade,sas_fde\n");
    let f = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    for (k, r) in rows {
        let _ = writeln!(out, "{},{},{},{}", k.as_str(), r.count, f(r.sas_ade), f(r.sas_fde));
    }
    out
}

/// CSV of per-moment rows.
pub(crate) fn per_moment_csv(rows: &[SasReport]) -> String {
    let mut out = String::from("moment,aucoc_random,aucoc,aucoc_optimal,sas\n");
    for (t, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            t + 1,
            format_float(r.aucoc_random),
            format_float(r.aucoc),
            format_float(r.aucoc_optimal),
            r.sas.map(format_float).unwrap_or_default()
        );
    }
    out
}
