//! Bundle directory: `qmodel.json`, `qweights.bin` and `report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QuantReport, QuantizedModel};
use crate::calibrators::{ActivationQuant, CalibMethod, LayerWeight, LowRankBranch, QuantizedLayer};
use crate::error::{Error, Result};
use crate::graphir::{read_container, write_container, Stored};
use crate::numerics::Tensor;
use crate::quantcore::{BlockLayout, Payload, QParams, QuantizedTensor, Scheme, SchemeKind, Segments};
use crate::seginfer::QuantPlan;

pub const BUNDLE_FILES: [&str; 3] = ["qmodel.json", "qweights.bin", "report.json"];
const FORMAT: &str = "segquant-qmodel";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "storage", rename_all = "snake_case", deny_unknown_fields)]
enum WeightRecord {
    Full,
    Coded {
        scheme: Scheme,
        segments: Segments,
        layout: BlockLayout,
        params: Vec<QParams>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    id: String,
    rows: usize,
    cols: usize,
    method: CalibMethod,
    fallback: Option<String>,
    weight: WeightRecord,
    activation: ActivationQuant,
    smoothing: Option<Vec<f32>>,
    low_rank: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    format: String,
    version: u32,
    plan: QuantPlan,
    layers: Vec<LayerRecord>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_report(path: &Path, report: &QuantReport) -> Result<()> {
    write_text(path, &report.to_json())
}

/// Write the three bundle files into `dir`, creating it if needed.
pub fn save_bundle(dir: &Path, model: &QuantizedModel, report: &QuantReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs = BTreeMap::new();
    let mut records = Vec::with_capacity(model.layers.len());
    for (id, layer) in &model.layers {
        let (rows, cols, weight) = match &layer.weight {
            LayerWeight::Full(t) => {
                blobs.insert(format!("{id}/weight"), Stored::F32(t.clone()));
                (t.rows(), t.cols(), WeightRecord::Full)
            }
            LayerWeight::Coded(q) => {
                match &q.payload {
                    Payload::Int(c) => blobs.insert(format!("{id}/codes"), Stored::I32(c.clone())),
                    Payload::Float(v) => blobs.insert(format!("{id}/values"), Stored::F32(v.clone())),
                    Payload::Dual { .. } => {
                        return Err(Error::SchemeMismatch(format!("layer `{id}` has dual-scale weights")))
                    }
                };
                (
                    q.rows,
                    q.cols,
                    WeightRecord::Coded {
                        scheme: q.scheme,
                        segments: q.segments.clone(),
                        layout: q.layout.clone(),
                        params: q.params.clone(),
                    },
                )
            }
        };
        if let Some(lr) = &layer.low_rank {
            blobs.insert(format!("{id}/lowrank_down"), Stored::F32(lr.down.clone()));
            blobs.insert(format!("{id}/lowrank_up"), Stored::F32(lr.up.clone()));
        }
        records.push(LayerRecord {
            id: id.clone(),
            rows,
            cols,
            method: layer.method,
            fallback: layer.fallback.clone(),
            weight,
            activation: layer.activation.clone(),
            smoothing: layer.smoothing.clone(),
            low_rank: layer.low_rank.as_ref().map(|lr| lr.down.cols()),
        });
    }
    let record = ModelRecord {
        format: FORMAT.into(),
        version: VERSION,
        plan: model.plan.clone(),
        layers: records,
    };
    let mut json = serde_json::to_string_pretty(&record).expect("model serializes");
    json.push('\n');
    write_text(&dir.join(BUNDLE_FILES[0]), &json)?;
    write_container(&dir.join(BUNDLE_FILES[1]), &blobs)?;
    write_report(&dir.join(BUNDLE_FILES[2]), report)
}

fn take_f32(blobs: &mut BTreeMap<String, Stored>, name: &str) -> Result<Tensor> {
    match blobs.remove(name) {
        Some(Stored::F32(t)) => Ok(t),
        Some(Stored::I32(_)) => Err(Error::parse("qweights.bin", format!("`{name}` should be f32"))),
        None => Err(Error::parse("qweights.bin", format!("missing `{name}`"))),
    }
}

/// Read `qmodel.json` and `qweights.bin` from `dir`.
pub fn load_bundle(dir: &Path) -> Result<QuantizedModel> {
    let path = dir.join(BUNDLE_FILES[0]);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: ModelRecord = serde_json::from_str(&text).map_err(|e| Error::parse("qmodel.json", e))?;
    if record.format != FORMAT || record.version != VERSION {
        return Err(Error::parse(
            "qmodel.json",
            format!("unsupported format {} v{}", record.format, record.version),
        ));
    }
    let mut blobs = read_container(&dir.join(BUNDLE_FILES[1]))?;
    let mut layers = BTreeMap::new();
    for r in record.layers {
        let id = r.id.clone();
        let weight = match r.weight {
            WeightRecord::Full => LayerWeight::Full(take_f32(&mut blobs, &format!("{id}/weight"))?),
            WeightRecord::Coded {
                scheme,
                segments,
                layout,
                params,
            } => {
                let payload = if scheme.kind == SchemeKind::Fp8E4m3Sim {
                    Payload::Float(take_f32(&mut blobs, &format!("{id}/values"))?)
                } else {
                    match blobs.remove(&format!("{id}/codes")) {
                        Some(Stored::I32(c)) => Payload::Int(c),
                        _ => return Err(Error::parse("qweights.bin", format!("missing integer codes for `{id}`"))),
                    }
                };
                if layout.group_count() != params.len() {
                    return Err(Error::parse("qmodel.json", format!("`{id}` parameter count does not match layout")));
                }
                let q = QuantizedTensor {
                    rows: r.rows,
                    cols: r.cols,
                    scheme,
                    segments,
                    layout,
                    params,
                    payload,
                };
                if !q.codes_in_range() {
                    return Err(Error::parse("qweights.bin", format!("codes of `{id}` are out of range")));
                }
                LayerWeight::Coded(q)
            }
        };
        let low_rank = match r.low_rank {
            Some(_) => Some(LowRankBranch {
                down: take_f32(&mut blobs, &format!("{id}/lowrank_down"))?,
                up: take_f32(&mut blobs, &format!("{id}/lowrank_up"))?,
            }),
            None => None,
        };
        layers.insert(
            id.clone(),
            QuantizedLayer {
                layer_id: id,
                weight,
                activation: r.activation,
                smoothing: r.smoothing,
                low_rank,
                method: r.method,
                fallback: r.fallback,
            },
        );
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::parse("qweights.bin", format!("unexpected entry `{extra}`")));
    }
    Ok(QuantizedModel {
        plan: record.plan,
        layers,
    })
}
