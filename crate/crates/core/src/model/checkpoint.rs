//! Binary network checkpoints. The layout is described in
//! `docs/checkpoint-format.md`; every integer and float is little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Head, HeadSpec, Layer, Network, TaskId};
use crate::autodiff::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LWFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_LOWER: u8 = 0;
const TAG_UPPER: u8 = 1;
const TAG_HEAD: u8 = 2;

const LAYER_DENSE: u8 = 0;
const LAYER_CONV: u8 = 1;
const LAYER_RELU: u8 = 2;
const LAYER_DROPOUT: u8 = 3;
const LAYER_MAXPOOL: u8 = 4;
const LAYER_FLATTEN: u8 = 5;

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub network: Network<S>,
    pub rng: Option<ChaCha8Rng>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn mask(&mut self, m: Option<&[bool]>) {
        match m {
            None => self.u8(0),
            Some(m) => {
                self.u8(1);
                self.u32(m.len());
                self.0.extend(m.iter().map(|&b| b as u8));
            }
        }
    }
    fn param<S: Scalar>(&mut self, p: &Parameter<S>) {
        self.u64(p.id().0);
        self.u8(p.trainable() as u8);
        self.u32(p.value().shape().len());
        for &d in p.value().shape() {
            self.u32(d);
        }
        for &v in p.value().data() {
            self.f64(v.as_f64());
        }
        self.mask(p.update_mask());
    }
    fn layer<S: Scalar>(&mut self, l: &Layer<S>) {
        match l {
            Layer::Dense { weight, bias } => {
                self.u8(LAYER_DENSE);
                self.param(weight);
                self.param(bias);
            }
            Layer::Conv2d { kernel, bias } => {
                self.u8(LAYER_CONV);
                self.param(kernel);
                self.param(bias);
            }
            Layer::Relu => self.u8(LAYER_RELU),
            Layer::Dropout(p) => {
                self.u8(LAYER_DROPOUT);
                self.f64(*p);
            }
            Layer::MaxPool2x2 => self.u8(LAYER_MAXPOOL),
            Layer::Flatten => self.u8(LAYER_FLATTEN),
        }
    }
    fn layers<S: Scalar>(&mut self, ls: &[Layer<S>]) {
        self.u32(ls.len());
        for l in ls {
            self.layer(l);
        }
    }
}

/// Encodes `net` and, optionally, the state of an rng stream.
pub fn write_checkpoint<S: Scalar>(net: &Network<S>, rng: Option<&ChaCha8Rng>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.u32(net.input_shape.len());
    for &d in &net.input_shape {
        w.u32(d);
    }
    w.u32(net.branch_depth);
    w.u64(net.next_id);
    match rng {
        None => w.u8(0),
        Some(r) => {
            w.u8(1);
            w.0.extend_from_slice(&r.get_seed());
            w.u64(r.get_stream());
            w.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
    }
    w.u32(2 + net.heads.len());
    w.u8(TAG_LOWER);
    w.layers(&net.trunk_lower);
    w.u8(TAG_UPPER);
    w.layers(&net.trunk_upper);
    for h in &net.heads {
        w.u8(TAG_HEAD);
        w.str(h.task.as_str());
        w.u32(h.spec.labels);
        w.u8(h.spec.multi_label as u8);
        w.u32(h.spec.hidden.len());
        for &x in &h.spec.hidden {
            w.u32(x);
        }
        w.f64(h.spec.hidden_dropout);
        w.layers(&h.layers);
    }
    w.u32(net.expansion_masks.len());
    for (id, m) in &net.expansion_masks {
        w.u64(id.0);
        w.mask(Some(m));
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(corrupt(format!("invalid flag byte {b}"))),
        }
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("task id is not utf-8"))
    }
    fn mask(&mut self) -> Result<Option<Vec<bool>>> {
        if !self.bool()? {
            return Ok(None);
        }
        let n = self.u32()?;
        let bytes = self.take(n)?;
        bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(corrupt("invalid mask byte")),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
    fn param<S: Scalar>(&mut self) -> Result<Parameter<S>> {
        let id = ParamId(self.u64()?);
        let trainable = self.bool()?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| corrupt("parameter shape overflows"))?;
        if numel > (self.buf.len() - self.pos) / 8 {
            return Err(corrupt(format!("truncated values for parameter {id}")));
        }
        let data = (0..numel)
            .map(|_| self.f64().map(S::lit))
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        let mut p = Parameter::new(id, value);
        p.set_trainable(trainable);
        p.set_update_mask(self.mask()?)
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(p)
    }
    fn layers<S: Scalar>(&mut self) -> Result<Vec<Layer<S>>> {
        let n = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..n {
            out.push(match self.u8()? {
                LAYER_DENSE => Layer::Dense {
                    weight: self.param()?,
                    bias: self.param()?,
                },
                LAYER_CONV => Layer::Conv2d {
                    kernel: self.param()?,
                    bias: self.param()?,
                },
                LAYER_RELU => Layer::Relu,
                LAYER_DROPOUT => Layer::Dropout(self.f64()?),
                LAYER_MAXPOOL => Layer::MaxPool2x2,
                LAYER_FLATTEN => Layer::Flatten,
                k => return Err(corrupt(format!("unknown layer kind {k}"))),
            });
        }
        Ok(out)
    }
}

/// Decodes a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let branch_depth = r.u32()?;
    let next_id = r.u64()?;
    let rng = if r.bool()? {
        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Some(rng)
    } else {
        None
    };
    let segments = r.u32()?;
    let (mut lower, mut upper, mut heads) = (None, None, Vec::new());
    for _ in 0..segments {
        match r.u8()? {
            TAG_LOWER => lower = Some(r.layers()?),
            TAG_UPPER => upper = Some(r.layers()?),
            TAG_HEAD => {
                let task = TaskId::new(r.str()?);
                let labels = r.u32()?;
                let multi_label = r.bool()?;
                let nh = r.u32()?;
                let hidden = (0..nh).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let hidden_dropout = r.f64()?;
                let layers = r.layers()?;
                heads.push(Head {
                    task,
                    spec: HeadSpec {
                        labels,
                        multi_label,
                        hidden,
                        hidden_dropout,
                    },
                    layers,
                });
            }
            t => return Err(corrupt(format!("unknown segment tag {t}"))),
        }
    }
    let nm = r.u32()?;
    let mut expansion_masks = BTreeMap::new();
    for _ in 0..nm {
        let id = ParamId(r.u64()?);
        let m = r.mask()?.ok_or_else(|| corrupt("missing expansion mask"))?;
        expansion_masks.insert(id, m);
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let network = Network {
        input_shape,
        branch_depth,
        trunk_lower: lower.ok_or_else(|| corrupt("missing lower trunk"))?,
        trunk_upper: upper.ok_or_else(|| corrupt("missing upper trunk"))?,
        heads,
        next_id,
        expansion_masks,
    };
    Ok(Checkpoint { network, rng })
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    net: &Network<S>,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    std::fs::write(path, write_checkpoint(net, rng)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
