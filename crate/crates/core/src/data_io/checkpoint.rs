use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MustError, Result};
use crate::losses::RunningMeanState;
use crate::model::{ModelConfig, Vit};
use crate::params::{Params, Tensor};
use crate::teacher::{EmaSchedule, TeacherState};
use crate::trainer::{AdamW, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MUST0001";

/// Optimization state saved alongside the student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub teacher: TeacherState,
    pub optim: AdamW,
    pub running_mean: RunningMeanState,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub clamp_warnings: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub params: Params,
    /// Absent for a model that has not been adapted yet.
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, class_names: &[String]) -> Self {
        Self {
            model: trainer.vit().config().clone(),
            class_names: class_names.to_vec(),
            params: trainer.params.clone(),
            training: Some(TrainingState {
                config: trainer.config().clone(),
                teacher: trainer.teacher.clone(),
                optim: trainer.optim.clone(),
                running_mean: trainer.running_mean.clone(),
                step: trainer.step,
                steps_per_epoch: trainer.steps_per_epoch,
                clamp_warnings: trainer.clamp_warnings,
            }),
        }
    }

    /// Rebuilds a trainer that continues exactly where the saved one stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let state = self
            .training
            .ok_or_else(|| MustError::InvalidState("checkpoint holds no training state".into()))?;
        let vit = Vit::new(self.model)?;
        vit.zero_params().check_same_structure(&self.params)?;
        state.teacher.delta.check_same_structure(&self.params)?;
        state.optim.m.check_same_structure(&self.params)?;
        state.optim.v.check_same_structure(&self.params)?;
        Ok(Trainer {
            vit,
            params: self.params,
            teacher: state.teacher,
            optim: state.optim,
            running_mean: state.running_mean,
            config: state.config,
            step: state.step,
            steps_per_epoch: state.steps_per_epoch,
            clamp_warnings: state.clamp_warnings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    teacher_step: u64,
    schedule: EmaSchedule,
    optim_step: u64,
    running_mean: RunningMeanState,
    step: u64,
    steps_per_epoch: u64,
    clamp_warnings: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    class_names: Vec<String>,
    training: Option<TrainingHeader>,
    tensors: Vec<TensorEntry>,
    payload_values: usize,
}

fn append_group(group: &str, params: &Params, index: &mut Vec<TensorEntry>, payload: &mut Vec<f64>) {
    for t in params.tensors() {
        index.push(TensorEntry { group: group.into(), name: t.name.clone(), shape: t.shape.clone(), offset: payload.len() });
        payload.extend_from_slice(&t.data);
    }
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut index = Vec::new();
    let mut payload = Vec::new();
    append_group("params", &ckpt.params, &mut index, &mut payload);
    let training = ckpt.training.as_ref().map(|s| {
        append_group("teacher", &s.teacher.delta, &mut index, &mut payload);
        append_group("adam_m", &s.optim.m, &mut index, &mut payload);
        append_group("adam_v", &s.optim.v, &mut index, &mut payload);
        TrainingHeader {
            config: s.config.clone(),
            teacher_step: s.teacher.step,
            schedule: s.teacher.schedule,
            optim_step: s.optim.t,
            running_mean: s.running_mean.clone(),
            step: s.step,
            steps_per_epoch: s.steps_per_epoch,
            clamp_warnings: s.clamp_warnings,
        }
    });
    let header = Header {
        model: ckpt.model.clone(),
        class_names: ckpt.class_names.clone(),
        training,
        tensors: index,
        payload_values: payload.len(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() * 8 + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn take_group(group: &str, header: &Header, payload: &[f64]) -> Result<Params> {
    let mut tensors = Vec::new();
    for e in header.tensors.iter().filter(|e| e.group == group) {
        let n: usize = e.shape.iter().product();
        let data = payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| MustError::Truncated(format!("tensor {group}/{} exceeds payload", e.name)))?;
        tensors.push(Tensor { name: e.name.clone(), shape: e.shape.clone(), data: data.to_vec() });
    }
    Ok(Params::from_tensors(tensors))
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(MustError::Truncated("file shorter than the magic header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(MustError::VersionMismatch {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(&bytes[..8]).into(),
        });
    }
    if bytes.len() < 16 + 4 {
        return Err(MustError::Truncated("missing header length".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body).to_le_bytes() != crc {
        return Err(MustError::Truncated("checksum mismatch".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| MustError::Truncated("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    let raw = &body[header_end..];
    if raw.len() != header.payload_values * 8 {
        return Err(MustError::Truncated(format!(
            "payload has {} bytes, header declares {} values",
            raw.len(),
            header.payload_values
        )));
    }
    let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let params = take_group("params", &header, &payload)?;
    let training = match &header.training {
        None => None,
        Some(h) => Some(TrainingState {
            config: h.config.clone(),
            teacher: TeacherState { delta: take_group("teacher", &header, &payload)?, step: h.teacher_step, schedule: h.schedule },
            optim: AdamW { m: take_group("adam_m", &header, &payload)?, v: take_group("adam_v", &header, &payload)?, t: h.optim_step },
            running_mean: h.running_mean.clone(),
            step: h.step,
            steps_per_epoch: h.steps_per_epoch,
            clamp_warnings: h.clamp_warnings,
        }),
    };
    Ok(Checkpoint { model: header.model, class_names: header.class_names, params, training })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| MustError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { image_size: 16, patch_size: 8, embed_dim: 8, depth: 1, num_heads: 2, proj_dim: 4, num_classes: 3, ..ModelConfig::default() };
        let vit = Vit::new(cfg.clone()).unwrap();
        let params = vit.init_params(&mut rng_from(3));
        let mut teacher = TeacherState::init(&params, EmaSchedule::new(0.9, 10).unwrap());
        teacher.step = 4;
        let mut optim = AdamW::new(&params);
        optim.t = 4;
        optim.m.tensors_mut()[0].data[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        Checkpoint {
            model: cfg,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            params,
            training: Some(TrainingState {
                config: TrainConfig::default(),
                teacher,
                optim,
                running_mean: RunningMeanState { mean_probs: vec![0.1, 0.2, 0.7], momentum: 0.99, initialized: true },
                step: 4,
                steps_per_epoch: 2,
                clamp_warnings: 1,
            }),
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let back = decode(&encode(&ck).unwrap()).unwrap();
        assert!(back.params.bitwise_eq(&ck.params));
        let (a, b) = (back.training.as_ref().unwrap(), ck.training.as_ref().unwrap());
        assert!(a.optim.m.bitwise_eq(&b.optim.m));
        assert_eq!(back, ck);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 7, 8, 15, 16, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(MustError::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn corrupted_tail_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xff;
        assert!(matches!(decode(&bytes), Err(MustError::Truncated(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[7] = b'2';
        assert!(matches!(decode(&bytes), Err(MustError::VersionMismatch { .. })));
    }
}
