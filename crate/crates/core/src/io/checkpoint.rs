//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "DCSFN1"  version:u16
//! depth block_scales groups channels scales image_channels : u32 each
//! alpha:f64  skip:u8 dense:u8 inner:u8
//! epoch:u64
//! params:    count:u32, then per tensor
//!            name_len:u32 name shape:4×u32 data:numel×f32
//! adam step: u64
//! adam m:    same encoding as params
//! adam v:    same encoding as params
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DcsfnParams, NetConfig};
use crate::tensor::{Shape, Tensor};
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 6] = b"DCSFN1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DcsfnParams<Tensor<f32>>,
    pub optimizer: AdamState<f32>,
    pub epoch: u64,
}

impl Checkpoint {
    /// A fresh checkpoint with zeroed optimizer moments.
    pub fn new(params: DcsfnParams<Tensor<f32>>) -> Self {
        Checkpoint {
            optimizer: AdamState::for_model(&params),
            params,
            epoch: 0,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.params.config
    }

    pub fn into_train_state(self) -> TrainState<f32> {
        TrainState {
            params: self.params,
            optimizer: self.optimizer,
            epoch: self.epoch as usize,
        }
    }

    pub fn from_train_state(state: TrainState<f32>) -> Self {
        Checkpoint {
            params: state.params,
            optimizer: state.optimizer,
            epoch: state.epoch as u64,
        }
    }
}

const CONFIG_BYTES: usize = 6 * 4 + 8 + 3;

/// Exact encoded size of a checkpoint for `cfg`.
pub fn checkpoint_size(cfg: &NetConfig) -> Result<usize> {
    let layout = DcsfnParams::layout(cfg)?;
    let section: usize = 4 + layout
        .convs()
        .iter()
        .flat_map(|(name, spec)| {
            let g = spec.geometry;
            [
                (format!("{name}.weight"), g.weight_shape()),
                (format!("{name}.bias"), g.bias_shape()),
            ]
        })
        .map(|(name, shape)| 4 + name.len() + 16 + 4 * shape.numel())
        .sum::<usize>();
    Ok(MAGIC.len() + 2 + CONFIG_BYTES + 8 + section + 8 + 2 * section)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let names: Vec<String> = ckpt.params.named().into_iter().map(|(n, _)| n).collect();
    let params: Vec<&Tensor<f32>> = ckpt.params.named().into_iter().map(|(_, t)| t).collect();
    if ckpt.optimizer.m.len() != names.len() || ckpt.optimizer.v.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer holds {} moments for {} parameters",
            ckpt.optimizer.m.len(),
            names.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_config(&mut out, ckpt.config())?;
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    write_section(&mut out, &names, params)?;
    out.extend_from_slice(&ckpt.optimizer.t.to_le_bytes());
    write_section(&mut out, &names, ckpt.optimizer.m.iter())?;
    write_section(&mut out, &names, ckpt.optimizer.v.iter())?;
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

fn write_config(out: &mut Vec<u8>, cfg: &NetConfig) -> Result<()> {
    for (v, what) in [
        (cfg.depth, "depth"),
        (cfg.block_scales, "block_scales"),
        (cfg.groups, "groups"),
        (cfg.channels, "channels"),
        (cfg.scales, "scales"),
        (cfg.image_channels, "image_channels"),
    ] {
        out.extend_from_slice(&u32_of(v, what)?);
    }
    out.extend_from_slice(&cfg.alpha.to_le_bytes());
    out.extend([cfg.skip as u8, cfg.dense as u8, cfg.inner_connection as u8]);
    Ok(())
}

fn write_section<'a>(
    out: &mut Vec<u8>,
    names: &[String],
    tensors: impl IntoIterator<Item = &'a Tensor<f32>>,
) -> Result<()> {
    out.extend_from_slice(&u32_of(names.len(), "tensor count")?);
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&u32_of(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&u32_of(d, "dimension")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("file ends inside {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.array::<1>(what)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("{what} flag has value {b}"))),
        }
    }

    fn config(&mut self) -> Result<NetConfig> {
        let cfg = NetConfig {
            depth: self.u32("depth")?,
            block_scales: self.u32("block_scales")?,
            groups: self.u32("groups")?,
            channels: self.u32("channels")?,
            scales: self.u32("scales")?,
            image_channels: self.u32("image_channels")?,
            alpha: f64::from_le_bytes(self.array("alpha")?),
            skip: self.flag("skip")?,
            dense: self.flag("dense")?,
            inner_connection: self.flag("inner")?,
        };
        cfg.validate()
            .map_err(|e| Error::Checkpoint(format!("stored configuration rejected: {e}")))?;
        Ok(cfg)
    }

    /// Reads a tensor section that must match `expected` name by name.
    fn section(&mut self, expected: &[(String, Shape)], what: &str) -> Result<Vec<Tensor<f32>>> {
        let count = self.u32(what)?;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{what} holds {count} tensors, configuration needs {}",
                expected.len()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for (want_name, want_shape) in expected {
            let len = self.u32("name length")?;
            let name = String::from_utf8_lossy(self.take(len, "tensor name")?).into_owned();
            if &name != want_name {
                return Err(Error::Checkpoint(format!(
                    "{what}: found tensor `{name}` where `{want_name}` was expected"
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = self.u32("shape")?;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            if shape != *want_shape {
                return Err(Error::Checkpoint(format!(
                    "{what}: `{name}` has shape {shape}, configuration needs {want_shape}"
                )));
            }
            let raw = self.take(4 * shape.numel(), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            out.push(Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let cfg = r.config()?;
    let epoch = r.u64("epoch")?;
    let mut params = DcsfnParams::<Tensor<f32>>::zeros(&cfg)?;
    let expected: Vec<(String, Shape)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let values = r.section(&expected, "parameters")?;
    for (slot, v) in params.tensors_mut().into_iter().zip(values) {
        *slot = v;
    }
    let t = r.u64("optimizer step")?;
    let m = r.section(&expected, "first moments")?;
    let v = r.section(&expected, "second moments")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected bytes after the optimizer state",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        optimizer: AdamState { m, v, t },
        epoch,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
