//! Checkpoints: a JSON manifest plus a little-endian `f64` blob next to it
//! (`model.json` + `model.bin`). Tensors are keyed by name and shape.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoisingModel};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::numeric::Tensor;
use crate::training::OptimizerState;

const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_n: f64,
    pub fingerprint: String,
}

impl ScheduleInfo {
    pub fn of(schedule: &NoiseSchedule) -> Self {
        let b = schedule.betas();
        Self {
            steps: schedule.steps(),
            beta_1: b[0],
            beta_n: b[b.len() - 1],
            fingerprint: schedule.fingerprint(),
        }
    }

    /// Rebuilds the schedule and checks it against the stored fingerprint.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::linear(self.steps, self.beta_1, self.beta_n)?;
        if s.fingerprint() != self.fingerprint {
            return Err(Error::Validation("checkpoint schedule fingerprint mismatch".into()));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub lr0: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleInfo,
    /// Epochs completed when the parameters were captured.
    pub epoch: usize,
    pub metrics: Option<MetricsReport>,
    /// Free-form echo of the run configuration.
    pub run: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: DenoisingModel,
    pub optimizer: Option<OptimizerState>,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Everything needed to write a checkpoint.
pub struct SaveRequest<'a> {
    pub model: &'a DenoisingModel,
    pub schedule: &'a NoiseSchedule,
    pub epoch: usize,
    pub metrics: Option<&'a MetricsReport>,
    pub optimizer: Option<&'a OptimizerState>,
    pub run: serde_json::Value,
}

pub fn save(path: &Path, req: SaveRequest<'_>) -> Result<()> {
    let store = &req.model.store;
    let mut data: Vec<f64> = Vec::with_capacity(store.num_scalars() * 3);
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: &[usize], values: &[f64]| {
        tensors.push(TensorRecord {
            name,
            shape: shape.to_vec(),
            offset: data.len(),
        });
        data.extend_from_slice(values);
    };
    for e in store.entries() {
        push(e.name.clone(), e.value.shape(), e.value.data());
    }
    let optimizer = if let Some(opt) = req.optimizer {
        opt.check_shapes(store)?;
        for (i, e) in store.entries().iter().enumerate() {
            push(format!("adam.m/{}", e.name), e.value.shape(), &opt.first[i]);
            push(format!("adam.v/{}", e.name), e.value.shape(), &opt.second[i]);
        }
        Some(OptimizerRecord {
            lr0: opt.lr0,
            gamma: opt.gamma,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
        })
    } else {
        None
    };
    let manifest = Manifest {
        format: FORMAT,
        config: req.model.config().clone(),
        schedule: ScheduleInfo::of(req.schedule),
        epoch: req.epoch,
        metrics: req.metrics.cloned(),
        run: req.run,
        tensors,
        optimizer,
    };
    let mut blob = std::io::BufWriter::new(std::fs::File::create(blob_path(path))?);
    for v in &data {
        blob.write_all(&v.to_le_bytes())?;
    }
    blob.flush()?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Validation(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(blob_path(path))?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation(
            "checkpoint blob length is not a multiple of 8".into(),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let fetch = |rec: &TensorRecord| -> Result<Tensor> {
        let n: usize = rec.shape.iter().product();
        let values = data
            .get(rec.offset..rec.offset + n)
            .ok_or_else(|| Error::Validation(format!("tensor {} runs past the blob end", rec.name)))?;
        Tensor::new(rec.shape.clone(), values.to_vec())
    };
    let mut model = DenoisingModel::new(manifest.config.clone(), 0)?;
    let find = |name: &str| manifest.tensors.iter().find(|t| t.name == name);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let name = model.store.name(id).to_string();
        let rec = find(&name).ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
        if rec.shape != model.store.value(id).shape() {
            return Err(Error::dim(
                "checkpoint",
                format!(
                    "parameter {name}: stored {:?}, model expects {:?}",
                    rec.shape,
                    model.store.value(id).shape()
                ),
            ));
        }
        model.store.set_value(id, fetch(rec)?)?;
    }
    let params = manifest.tensors.iter().filter(|t| !t.name.starts_with("adam.")).count();
    if params != ids.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {params} parameters, model has {}",
            ids.len()
        )));
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut first = Vec::with_capacity(ids.len());
            let mut second = Vec::with_capacity(ids.len());
            for &id in &ids {
                let name = model.store.name(id);
                for (prefix, out) in [("adam.m/", &mut first), ("adam.v/", &mut second)] {
                    let rec = find(&format!("{prefix}{name}"))
                        .ok_or_else(|| Error::Validation(format!("checkpoint lacks moments of {name}")))?;
                    out.push(fetch(rec)?.into_data());
                }
            }
            let opt = OptimizerState {
                lr0: o.lr0,
                gamma: o.gamma,
                weight_decay: o.weight_decay,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                first,
                second,
            };
            opt.check_shapes(&model.store)?;
            Some(opt)
        }
    };
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}
