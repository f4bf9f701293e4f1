//! Model files.
//!
//! Layout: `LEXNETMD`, format version (u32 LE), header length (u64 LE), JSON
//! header, little-endian f32 payload in header order, SHA-256 of everything
//! before it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::lproto::{LastLayer, Prototype, PrototypeSet, Provenance};
use crate::model::{LexNetModel, ModelConfig};
use crate::tensor::{ParamGroup, Parameter, Tensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LEXNETMD";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProtoEntry {
    id: usize,
    class_id: usize,
    provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    labels: Vec<String>,
    /// Backbone parameters, then the head.
    tensors: Vec<TensorEntry>,
    /// Per batch norm: initialized flag (mean and variance follow the tensors).
    batch_norms: Vec<bool>,
    prototypes: Vec<ProtoEntry>,
    train_config: Option<TrainConfig>,
}

impl Header {
    fn payload_values(&self, bn_channels: &[usize], proto_len: usize) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>()
            + bn_channels.iter().map(|c| 2 * c).sum::<usize>()
            + self.prototypes.len() * proto_len
    }
}

fn put(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized model, with an optional training-config snapshot.
pub fn to_bytes(model: &LexNetModel, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut tensors: Vec<TensorEntry> = model
        .backbone
        .params()
        .iter()
        .map(|p| TensorEntry { name: p.name().to_string(), group: p.group(), shape: p.tensor.shape().to_vec() })
        .collect();
    tensors.push(TensorEntry { name: "last".into(), group: ParamGroup::LastLayer, shape: model.last.weight.tensor.shape().to_vec() });
    let header = Header {
        config: model.config.clone(),
        labels: model.labels.clone(),
        tensors,
        batch_norms: model.backbone.batch_norms().iter().map(|b| b.initialized).collect(),
        prototypes: model.prototypes.iter().map(|p| ProtoEntry { id: p.id, class_id: p.class_id, provenance: p.provenance }).collect(),
        train_config: train_config.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + 4 * model.param_count() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.backbone.params() {
        put(&mut out, p.values());
    }
    put(&mut out, model.last.weight.values());
    for bn in model.backbone.batch_norms() {
        put(&mut out, &bn.running_mean);
        put(&mut out, &bn.running_var);
    }
    for p in model.prototypes.iter() {
        put(&mut out, p.vector());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Vec<f32> {
        let s = &self.buf[self.pos..self.pos + 4 * n];
        self.pos += 4 * n;
        s.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
    }
}

fn checksum_ok(bytes: &[u8]) -> bool {
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    Sha256::digest(body).as_slice() == digest
}

pub fn from_bytes(bytes: &[u8]) -> Result<(LexNetModel, Option<TrainConfig>)> {
    if bytes.len() < PREFIX {
        return Err(if MAGIC.starts_with(&bytes[..bytes.len().min(8)]) { Error::Truncated } else { Error::BadModelFile("not a model file".into()) });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadModelFile("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() < PREFIX + hlen.min(usize::MAX - PREFIX - DIGEST) + DIGEST {
        return Err(Error::Truncated);
    }
    let header: Header = match serde_json::from_slice(&bytes[PREFIX..PREFIX + hlen]) {
        Ok(h) => h,
        Err(e) if checksum_ok(bytes) => return Err(Error::BadModelFile(e.to_string())),
        Err(_) => return Err(Error::Checksum),
    };

    let mut backbone = Backbone::<f32>::new(header.config.backbone.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let bn_channels: Vec<usize> = backbone.batch_norms().iter().map(|b| b.running_mean.len()).collect();
    let depth = backbone.output_channels();
    let (ph, pw) = header.config.proto_patch;
    let proto_len = depth * ph * pw;
    let expected = PREFIX + hlen + 4 * header.payload_values(&bn_channels, proto_len) + DIGEST;
    if bytes.len() < expected {
        return Err(Error::Truncated);
    }
    if !checksum_ok(bytes) {
        return Err(Error::Checksum);
    }
    if bytes.len() > expected {
        return Err(Error::BadModelFile(format!("{} trailing bytes", bytes.len() - expected)));
    }

    let mut r = Reader { buf: &bytes[..bytes.len() - DIGEST], pos: PREFIX + hlen };
    let params = backbone.params_mut();
    if params.len() + 1 != header.tensors.len() {
        return Err(Error::BadModelFile(format!("{} tensors for a backbone with {} parameters", header.tensors.len(), params.len())));
    }
    for (p, t) in params.into_iter().zip(&header.tensors) {
        if p.name() != t.name || p.tensor.shape() != t.shape.as_slice() {
            return Err(Error::BadModelFile(format!("tensor `{}` {:?} does not match `{}` {:?}", t.name, t.shape, p.name(), p.tensor.shape())));
        }
        let n = p.len();
        p.values_mut().copy_from_slice(&r.take(n));
    }
    let head = header.tensors.last().expect("checked length");
    let k = header.labels.len();
    if head.shape != [k, header.prototypes.len()] {
        return Err(Error::BadModelFile(format!("head shape {:?} for {k} classes and {} prototypes", head.shape, header.prototypes.len())));
    }
    let last_vals = r.take(k * header.prototypes.len());
    if header.batch_norms.len() != bn_channels.len() {
        return Err(Error::BadModelFile("batch norm count mismatch".into()));
    }
    for (bn, &init) in backbone.batch_norms_mut().into_iter().zip(&header.batch_norms) {
        let c = bn.running_mean.len();
        bn.running_mean = r.take(c);
        bn.running_var = r.take(c);
        bn.initialized = init;
    }
    let protos = header
        .prototypes
        .iter()
        .map(|e| {
            let t = Tensor::from_vec(&[depth, ph, pw], r.take(proto_len))?;
            Ok(Prototype { id: e.id, class_id: e.class_id, param: Parameter::new(format!("proto{}", e.id), ParamGroup::Prototype, t), provenance: e.provenance })
        })
        .collect::<Result<Vec<_>>>()?;
    if protos.iter().any(|p| p.class_id >= k) {
        return Err(Error::BadModelFile("prototype class out of range".into()));
    }
    let set = PrototypeSet::restore(k, depth, (ph, pw), header.config.proto_cap_per_class, protos)?;
    let mut last = LastLayer::init_for(&set.class_ids(), k);
    last.weight.values_mut().copy_from_slice(&last_vals);
    let model = LexNetModel::from_parts(header.config, backbone, set, last, header.labels)?;
    Ok((model, header.train_config))
}

pub fn save_model(path: &Path, model: &LexNetModel, train_config: Option<&TrainConfig>) -> Result<()> {
    fs::write(path, to_bytes(model, train_config)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LexNetModel> {
    load_model_with_config(path).map(|m| m.0)
}

pub fn load_model_with_config(path: &Path) -> Result<(LexNetModel, Option<TrainConfig>)> {
    from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the serialized model (without training config).
pub fn model_checksum(model: &LexNetModel) -> Result<String> {
    let bytes = to_bytes(model, None)?;
    Ok(bytes[bytes.len() - DIGEST..].iter().map(|b| format!("{b:02x}")).collect())
}
