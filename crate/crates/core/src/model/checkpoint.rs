//! Binary checkpoint: `"SEXP"`, version, layer count, then per layer a kind
//! tag, shape rank, `u32` extents and raw `f32` parameters (all little-endian),
//! followed by a length-prefixed block of UTF-8 `key=value` lines.
//!
//! | tag | layer   | rank | extents           | data                  |
//! |-----|---------|------|-------------------|-----------------------|
//! | 1   | conv2d  | 4    | `(Cout, Cin, k, k)` | weights, then `Cout` biases |
//! | 2   | relu    | 0    |                   |                       |
//! | 3   | maxpool | 0    |                   |                       |
//! | 4   | SE      | 2    | `(B, C)`          | `W1 (B, C)`, then `W2 (C, B)` |
//! | 5   | GAP     | 0    |                   |                       |
//! | 6   | dense   | 2    | `(out, in)`       | weights, then `out` biases |
//!
//! Convolutions are stored as stride 1 with padding `k / 2`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelGraph, ModelLayer};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::se::SeBlockParams;
use crate::tensor::{Conv2d, Dense, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SEXP";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_SE: u8 = 4;
const TAG_GAP: u8 = 5;
const TAG_DENSE: u8 = 6;

// keys owned by the model struct rather than the free-form metadata map
const KEY_CLASSES: &str = "num_classes";
const KEY_INPUT: &str = "input_shape";
const KEY_REDUCTION: &str = "se_reduction";
const KEY_MEAN: &str = "norm_mean";
const KEY_STD: &str = "norm_std";
const RESERVED: [&str; 5] = [KEY_CLASSES, KEY_INPUT, KEY_REDUCTION, KEY_MEAN, KEY_STD];

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("save_checkpoint", format!("{v} does not fit in u32")))?;
    out.extend(v.to_le_bytes());
    Ok(())
}

fn push_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn join<T: ToString>(values: &[T], sep: &str) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// Serializes `model` to bytes.
pub fn write_checkpoint(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    push_u32(&mut out, model.layers.len())?;
    for layer in &model.layers {
        match layer {
            ModelLayer::Conv(conv) => {
                if conv.stride != 1 || conv.padding != conv.kernel() / 2 {
                    return Err(Error::invalid(
                        "save_checkpoint",
                        "only stride-1 convolutions with padding k/2 can be stored",
                    ));
                }
                out.extend([TAG_CONV, 4]);
                for &e in conv.weights.shape() {
                    push_u32(&mut out, e)?;
                }
                push_floats(&mut out, &conv.weights);
                push_floats(&mut out, &conv.bias);
            }
            ModelLayer::Relu => out.extend([TAG_RELU, 0]),
            ModelLayer::MaxPool => out.extend([TAG_MAXPOOL, 0]),
            ModelLayer::Gap => out.extend([TAG_GAP, 0]),
            ModelLayer::Se(se) => {
                out.extend([TAG_SE, 2]);
                push_u32(&mut out, se.bottleneck())?;
                push_u32(&mut out, se.channels())?;
                push_floats(&mut out, &se.w1);
                push_floats(&mut out, &se.w2);
            }
            ModelLayer::Dense(d) => {
                out.extend([TAG_DENSE, 2]);
                push_u32(&mut out, d.out_features())?;
                push_u32(&mut out, d.in_features())?;
                push_floats(&mut out, &d.weights);
                push_floats(&mut out, &d.bias);
            }
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert(KEY_CLASSES.to_string(), model.num_classes.to_string());
    meta.insert(KEY_INPUT.to_string(), join(&model.input_shape, "x"));
    if let Some(se) = model.se_params() {
        meta.insert(KEY_REDUCTION.to_string(), se.reduction.to_string());
    }
    if let Some(norm) = &model.normalization {
        meta.insert(KEY_MEAN.to_string(), join(&norm.mean, ","));
        meta.insert(KEY_STD.to_string(), join(&norm.std, ","));
    }
    for (k, v) in &model.metadata {
        if RESERVED.contains(&k.as_str()) {
            continue;
        }
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid("save_checkpoint", format!("metadata entry {k:?} cannot be stored")));
        }
        meta.insert(k.clone(), v.clone());
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    push_u32(&mut out, text.len())?;
    out.extend(text.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    read_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                section: section(),
                offset: self.bytes.len() as u64,
            }),
        }
    }

    fn u8(&mut self, section: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u32(&mut self, section: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, shape: &[usize], section: &dyn Fn() -> String) -> Result<Tensor<f32>> {
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("{}: parameter count overflows", section())))?;
        let data = self
            .take(count, section)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("{}: {e}", section())))
    }
}

fn tag_name(tag: u8) -> &'static str {
    match tag {
        TAG_CONV => "conv2d",
        TAG_RELU => "relu",
        TAG_MAXPOOL => "maxpool2",
        TAG_SE => "squeeze_excitation",
        TAG_GAP => "global_avg_pool",
        TAG_DENSE => "dense",
        _ => "unknown",
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, sep: char, key: &str) -> Result<Vec<T>> {
    value
        .split(sep)
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|_| Error::Corrupt(format!("metadata {key}: cannot parse {value:?}")))
}

/// Parses checkpoint bytes and validates the resulting layer graph.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, &|| "magic".into())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = r.u32(&|| "version".into())?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32(&|| "layer count".into())? as usize;

    struct Pending {
        tag: u8,
        shape: Vec<usize>,
        tensors: Vec<Tensor<f32>>,
    }
    let mut raw = Vec::new();
    for i in 0..count {
        let header = || format!("layer {i} header");
        let tag = r.u8(&header)?;
        let name = tag_name(tag);
        let section = || format!("layer {i} ({name})");
        let rank = r.u8(&section)? as usize;
        let expected_rank = match tag {
            TAG_CONV => 4,
            TAG_SE | TAG_DENSE => 2,
            TAG_RELU | TAG_MAXPOOL | TAG_GAP => 0,
            other => return Err(Error::Corrupt(format!("layer {i}: unknown kind tag {other}"))),
        };
        if rank != expected_rank {
            return Err(Error::Corrupt(format!("layer {i} ({name}): rank {rank}, expected {expected_rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32(&section).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::Corrupt(format!("layer {i} ({name}): zero extent in {shape:?}")));
        }
        let tensors = match tag {
            TAG_CONV => {
                if shape[2] != shape[3] || shape[2] % 2 == 0 {
                    return Err(Error::Corrupt(format!("layer {i} (conv2d): kernel must be square and odd")));
                }
                vec![r.floats(&shape, &section)?, r.floats(&shape[..1], &section)?]
            }
            TAG_SE => vec![r.floats(&shape, &section)?, r.floats(&[shape[1], shape[0]], &section)?],
            TAG_DENSE => vec![r.floats(&shape, &section)?, r.floats(&shape[..1], &section)?],
            _ => Vec::new(),
        };
        raw.push(Pending { tag, shape, tensors });
    }

    let meta_len = r.u32(&|| "metadata length".into())? as usize;
    let text = r.take(meta_len, &|| "metadata".into())?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
    }
    let text = std::str::from_utf8(text).map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corrupt(format!("metadata line {line:?} lacks '='")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let mut take_meta = |key: &str| meta.remove(key);

    let num_classes = take_meta(KEY_CLASSES)
        .ok_or_else(|| Error::Corrupt(format!("metadata lacks {KEY_CLASSES}")))?
        .parse::<usize>()
        .map_err(|_| Error::Corrupt(format!("metadata {KEY_CLASSES} is not an integer")))?;
    let input: Vec<usize> = parse_list(
        &take_meta(KEY_INPUT).ok_or_else(|| Error::Corrupt(format!("metadata lacks {KEY_INPUT}")))?,
        'x',
        KEY_INPUT,
    )?;
    let input_shape: [usize; 3] = input
        .try_into()
        .map_err(|_| Error::Corrupt(format!("metadata {KEY_INPUT} needs three extents")))?;
    let reduction = match take_meta(KEY_REDUCTION) {
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Error::Corrupt(format!("metadata {KEY_REDUCTION} is not an integer")))?,
        ),
        None => None,
    };
    let normalization = match (take_meta(KEY_MEAN), take_meta(KEY_STD)) {
        (Some(m), Some(s)) => Some(Normalization {
            mean: parse_list(&m, ',', KEY_MEAN)?,
            std: parse_list(&s, ',', KEY_STD)?,
        }),
        (None, None) => None,
        _ => return Err(Error::Corrupt("normalization needs both mean and std".into())),
    };

    let mut layers = Vec::with_capacity(raw.len());
    for Pending { tag, shape, tensors } in raw {
        let mut t = tensors.into_iter();
        layers.push(match tag {
            TAG_CONV => ModelLayer::Conv(Conv2d {
                weights: t.next().expect("weights"),
                bias: t.next().expect("bias"),
                stride: 1,
                padding: shape[2] / 2,
            }),
            TAG_RELU => ModelLayer::Relu,
            TAG_MAXPOOL => ModelLayer::MaxPool,
            TAG_GAP => ModelLayer::Gap,
            TAG_SE => {
                let reduction = reduction.unwrap_or(shape[1] / shape[0]).max(1);
                ModelLayer::Se(SeBlockParams::from_weights(reduction, t.next().expect("w1"), t.next().expect("w2"))?)
            }
            _ => ModelLayer::Dense(Dense {
                weights: t.next().expect("weights"),
                bias: t.next().expect("bias"),
            }),
        });
    }
    let mut model = ModelGraph::new(layers, num_classes, input_shape)
        .map_err(|e| Error::Corrupt(format!("inconsistent architecture: {e}")))?;
    if let Some(norm) = &normalization {
        if norm.mean.len() != input_shape[0] || norm.std.len() != input_shape[0] || norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Corrupt("normalization does not match the input channels".into()));
        }
    }
    model.normalization = normalization;
    model.metadata = meta;
    Ok(model)
}
