//! `TRCG` tensor archives.
//!
//! Layout (little endian): magic `TRCG`, version u32, tensor count u32, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and f32
//! values. An optional optimizer block follows: its own u32 count and
//! tensors named `opt.m.<param>`, `opt.v.<param>` and `opt.step`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::nn::{Direction, ModelConfig, ParamStore, StageSpec, TRecgModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TRCG";
pub const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<Vec<(String, Tensor<f32>)>>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("{name}: rank {} too large", t.rank())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: dim {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = self.take(1, "rank")?[0] as usize;
        let shape = (0..rank).map(|_| self.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(self.path, format!("{name}: shape {shape:?} overflows")))?;
        let data = self
            .take(n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(self.path, e.to_string()))?;
        Ok((name, t))
    }

    fn block(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32("tensor count")?;
        (0..count).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let blocks = std::iter::once(&self.tensors).chain(self.optimizer.as_ref());
        for block in blocks {
            let count = u32::try_from(block.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
            out.extend_from_slice(&count.to_le_bytes());
            for (name, t) in block {
                put_tensor(&mut out, name, t)?;
            }
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(path, "not a TRCG checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let tensors = r.block()?;
        let optimizer = if r.pos < bytes.len() { Some(r.block()?) } else { None };
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn map(&self) -> HashMap<String, Tensor<f32>> {
        self.tensors.iter().cloned().collect()
    }

    fn meta(&self, name: &str) -> Result<Vec<usize>> {
        let key = format!("meta.{name}");
        let t = self.get(&key).ok_or(Error::MissingTensor(key))?;
        Ok(t.data().iter().map(|&v| v as usize).collect())
    }

    fn meta_scalar(&self, name: &str) -> Result<usize> {
        Ok(self.meta(name)?.first().copied().unwrap_or(0))
    }

    pub fn kind(&self) -> Result<CheckpointKind> {
        match self.meta_scalar("kind")? {
            0 => Ok(CheckpointKind::Model),
            1 => Ok(CheckpointKind::Fusion),
            k => Err(Error::InvalidArgument(format!("unknown checkpoint kind {k}"))),
        }
    }

    /// Completed training epochs.
    pub fn epoch(&self) -> Result<usize> {
        self.meta_scalar("epoch")
    }

    pub fn n_classes(&self) -> Result<usize> {
        self.meta_scalar("n_classes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let direction = match self.meta_scalar("direction")? {
            0 => Direction::AToB,
            1 => Direction::BToA,
            d => return Err(Error::InvalidArgument(format!("unknown direction code {d}"))),
        };
        let channels: [usize; 4] = self
            .meta("stage_channels")?
            .try_into()
            .map_err(|_| Error::InvalidArgument("meta.stage_channels needs four values".into()))?;
        let strides: [usize; 4] = self
            .meta("stage_strides")?
            .try_into()
            .map_err(|_| Error::InvalidArgument("meta.stage_strides needs four values".into()))?;
        Ok(ModelConfig {
            direction,
            stages: StageSpec {
                channels,
                strides,
                blocks: self.meta_scalar("stage_blocks")?,
            },
            noise_dim: self.meta_scalar("noise_dim")?,
            n_classes: self.n_classes()?,
        })
    }
}

fn meta(name: &str, values: &[usize]) -> (String, Tensor<f32>) {
    let data = values.iter().map(|&v| v as f32).collect::<Vec<_>>();
    (format!("meta.{name}"), Tensor::new([values.len()], data).expect("meta shape"))
}

pub(crate) fn meta_tensors(kind: CheckpointKind, config: &ModelConfig, epoch: usize) -> Vec<(String, Tensor<f32>)> {
    let direction = match config.direction {
        Direction::AToB => 0,
        Direction::BToA => 1,
    };
    vec![
        meta("kind", &[kind as usize]),
        meta("direction", &[direction]),
        meta("stage_channels", &config.stages.channels),
        meta("stage_strides", &config.stages.strides),
        meta("stage_blocks", &[config.stages.blocks]),
        meta("noise_dim", &[config.noise_dim]),
        meta("n_classes", &[config.n_classes]),
        meta("epoch", &[epoch]),
    ]
}

/// Optimizer tensors for every parameter that has moments.
pub(crate) fn optimizer_tensors(store: &ParamStore<f32>, state: &OptimState<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for ((_, p), slot) in store.params().zip(&state.moments) {
        if let Some((m, v)) = slot {
            out.push((format!("opt.m.{}", p.name), m.clone()));
            out.push((format!("opt.v.{}", p.name), v.clone()));
        }
    }
    // exact while the step count stays below 2^24
    out.push(("opt.step".into(), Tensor::scalar(state.step as f32)));
    out
}

pub(crate) fn optimizer_from_tensors(store: &ParamStore<f32>, tensors: &[(String, Tensor<f32>)]) -> Result<OptimState<f32>> {
    let map: HashMap<&str, &Tensor<f32>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let step = map.get("opt.step").ok_or_else(|| Error::MissingTensor("opt.step".into()))?.item() as u64;
    let mut state = OptimState::new(store.len());
    for ((_, p), slot) in store.params().zip(state.moments.iter_mut()) {
        let (m_key, v_key) = (format!("opt.m.{}", p.name), format!("opt.v.{}", p.name));
        match (map.get(m_key.as_str()), map.get(v_key.as_str())) {
            (Some(m), Some(v)) => {
                for (key, t) in [(&m_key, m), (&v_key, v)] {
                    if t.shape() != p.value.shape() {
                        return Err(Error::TensorShape {
                            name: key.clone(),
                            expected: p.value.shape().to_vec(),
                            found: t.shape().to_vec(),
                        });
                    }
                }
                *slot = Some(((*m).clone(), (*v).clone()));
            }
            (None, None) => {}
            _ => return Err(Error::MissingTensor(format!("{m_key} / {v_key}"))),
        }
    }
    state.step = step;
    Ok(state)
}

/// Archive of a full model (all four networks and batch-norm buffers).
pub fn model_checkpoint(model: &TRecgModel<f32>, epoch: usize, optim: Option<&OptimState<f32>>) -> Checkpoint {
    let mut tensors = meta_tensors(CheckpointKind::Model, &model.config, epoch);
    tensors.extend(model.store.named_tensors());
    Checkpoint {
        tensors,
        optimizer: optim.map(|o| optimizer_tensors(&model.store, o)),
    }
}

/// Rebuilds the model stored in `ckpt`, with its optimizer state if saved.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(TRecgModel<f32>, Option<OptimState<f32>>)> {
    if ckpt.kind()? != CheckpointKind::Model {
        return Err(Error::InvalidArgument("expected a translate-to-recognize model checkpoint, got a fusion checkpoint".into()));
    }
    let mut model = TRecgModel::new(ckpt.model_config()?, 0)?;
    model.store.load_named(&ckpt.map(), "", "")?;
    let optim = ckpt
        .optimizer
        .as_deref()
        .map(|o| optimizer_from_tensors(&model.store, o))
        .transpose()?;
    Ok((model, optim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Direction, ModelConfig};

    fn small_model(direction: Direction, seed: u64) -> TRecgModel<f32> {
        let mut cfg = ModelConfig::new(direction, 3);
        cfg.stages.channels = [4, 4, 8, 8];
        cfg.stages.blocks = 1;
        TRecgModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn byte_identical_round_trip() {
        let model = small_model(Direction::BToA, 3);
        let mut optim = OptimState::new(model.store.len());
        optim.step = 7;
        optim.moments[2] = Some((Tensor::full(model.store.params().nth(2).unwrap().1.value.shape().to_vec(), 0.5), Tensor::full(model.store.params().nth(2).unwrap().1.value.shape().to_vec(), 0.25)));
        for ck in [model_checkpoint(&model, 4, None), model_checkpoint(&model, 4, Some(&optim))] {
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
        let ck = model_checkpoint(&model, 4, Some(&optim));
        let (m2, o2) = model_from_checkpoint(&ck).unwrap();
        assert_eq!(o2.unwrap(), optim);
        assert_eq!(m2.config, model.config);
        assert_eq!(m2.store.named_tensors(), model.store.named_tensors());
        assert_eq!(ck.epoch().unwrap(), 4);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            tensors: vec![("ab".into(), Tensor::from_f64([2], &[1.0, -2.0]).unwrap())],
            optimizer: None,
        };
        let b = ck.to_bytes().unwrap();
        let mut expect = b"TRCG".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 2, 0, 0, 0]);
        expect.extend(1f32.to_le_bytes());
        expect.extend((-2f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = model_checkpoint(&small_model(Direction::AToB, 1), 0, None);
        let bytes = ck.to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        for b in [&bad_magic[..], &bad_version, &bytes[..bytes.len() - 3], &bytes[..10]] {
            assert!(matches!(Checkpoint::from_bytes(b, Path::new("c.trcg")), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn mismatched_stage_spec_names_the_tensor() {
        let small = small_model(Direction::AToB, 1);
        let ck = model_checkpoint(&small, 0, None);
        let mut bigger = TRecgModel::<f32>::new(ModelConfig::new(Direction::AToB, 3), 0).unwrap();
        let err = bigger.store.load_named(&ck.map(), "encoder.", "encoder.").unwrap_err();
        assert!(matches!(err, Error::TensorShape { ref name, .. } if name == "encoder.stem.conv.weight"), "{err}");
    }
}
