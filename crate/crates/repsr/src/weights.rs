//! Weight-file persistence.
//!
//! The format is deliberately boring and strict:
//!
//! ```text
//! magic    4 bytes          "RPSR"
//! version  u32 LE           1
//! hlen     u32 LE           byte length of the JSON header
//! header   hlen bytes       UTF-8 JSON (see [`WeightHeader`])
//! records  until EOF        named tensors, in the canonical order
//! ```
//!
//! Each record is `name_len: u32 LE`, the UTF-8 name, four `u32 LE`
//! dimensions, then the scalars in little-endian order. The header's
//! [`ModelSpec`] fully determines which tensors must follow and with what
//! shapes ([`tensor_layout`]), so the loader verifies each record against
//! the expected layout *before* touching its data and every corruption
//! mode gets its own error: wrong magic, unreadable version, short reads,
//! misnamed or misshapen tensors, missing or surplus records.
//!
//! Round-tripping is bit-exact: scalars are stored verbatim, never
//! reencoded through text.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::block::{BnPlacement, BranchParams, ResidualKind};
use crate::error::{Error, Result};
use crate::model::{Body, Model, ModelForm, ModelSpec};
use crate::ops::activation::PreluParams;
use crate::ops::batchnorm::{BnMode, BnParams, BN_EPS, BN_MOMENTUM};
use crate::ops::conv::ConvParams;
use crate::reparam::PlainConv;
use crate::tensor::{Dims, Dtype, Scalar, RNG_ALGORITHM};

/// Leading magic bytes of every weight file.
pub const WEIGHT_MAGIC: [u8; 4] = *b"RPSR";

/// The format version this build reads and writes.
pub const WEIGHT_VERSION: u32 = 1;

/// Upper bound on the JSON header, to keep a corrupt length field from
/// allocating wildly.
const MAX_HEADER_BYTES: u32 = 1 << 20;

/// Upper bound on a stored tensor name.
const MAX_NAME_BYTES: u32 = 4096;

/// Where a set of weights came from: enough to reproduce the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainProvenance {
    /// Sampling seed of the run.
    pub seed: u64,
    /// Total optimizer iterations.
    pub total_iters: u64,
    /// Iteration at which batch-norm statistics froze.
    pub freeze_iter: u64,
}

/// The JSON header: everything needed to rebuild the architecture and
/// interpret the payload, without reading the payload.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightHeader {
    /// Architecture; determines the exact tensor layout.
    pub spec: ModelSpec,
    /// Training (multi-branch) or plain (collapsed) body.
    pub form: ModelForm,
    /// Scalar type of the payload.
    pub precision: Dtype,
    /// Batch-norm epsilon shared by every layer.
    pub bn_eps: f64,
    /// Batch-norm EMA momentum shared by every layer.
    pub bn_momentum: f64,
    /// Mode shared by every batch-norm layer; `None` for plain form.
    #[serde(default)]
    pub bn_mode: Option<BnMode>,
    /// Identifier of the RNG family used for initialization and sampling.
    pub rng_algorithm: String,
    /// Present when the file was written at the end of a training run.
    #[serde(default)]
    pub provenance: Option<TrainProvenance>,
}

/// Dims encoding for a length-`n` parameter vector.
fn vec_dims(n: usize) -> Dims {
    [n, 1, 1, 1]
}

/// The canonical record sequence for a model of the given spec and form:
/// `(name, dims)` pairs in file order. Save writes exactly this sequence;
/// load accepts nothing else.
pub fn tensor_layout(spec: &ModelSpec, form: ModelForm) -> Vec<(String, Dims)> {
    let c = spec.channels;
    let m = spec.block.mid_channels();
    let mut out = Vec::new();
    out.push(("head.weight".to_string(), [c, spec.colors, 3, 3]));
    out.push(("head.bias".to_string(), vec_dims(c)));
    out.push(("act.0.slope".to_string(), vec_dims(c)));
    for i in 0..spec.blocks {
        match form {
            ModelForm::Training => {
                for j in 0..spec.block.num_branches {
                    let base = format!("body.{i}.branch.{j}");
                    out.push((format!("{base}.conv3.weight"), [m, c, 3, 3]));
                    out.push((format!("{base}.conv3.bias"), vec_dims(m)));
                    for field in ["gamma", "beta", "run_mean", "run_var"] {
                        out.push((format!("{base}.bn.{field}"), vec_dims(m)));
                    }
                    out.push((format!("{base}.conv1.weight"), [c, m, 1, 1]));
                    out.push((format!("{base}.conv1.bias"), vec_dims(c)));
                    if spec.block.bn_placement == BnPlacement::AfterEach {
                        for field in ["gamma", "beta", "run_mean", "run_var"] {
                            out.push((format!("{base}.bn2.{field}"), vec_dims(c)));
                        }
                    }
                }
                if spec.block.residual == ResidualKind::WithBn {
                    for field in ["gamma", "beta", "run_mean", "run_var"] {
                        out.push((format!("body.{i}.res_bn.{field}"), vec_dims(c)));
                    }
                }
            }
            ModelForm::Plain => {
                out.push((format!("body.{i}.conv.weight"), [c, c, 3, 3]));
                out.push((format!("body.{i}.conv.bias"), vec_dims(c)));
            }
        }
        out.push((format!("act.{}.slope", i + 1), vec_dims(c)));
    }
    let tail_out = spec.colors * spec.scale * spec.scale;
    out.push(("tail.weight".to_string(), [tail_out, c, 3, 3]));
    out.push(("tail.bias".to_string(), vec_dims(tail_out)));
    out
}

fn bn_storage<T>(bn: &BnParams<T>) -> [&[T]; 4] {
    [&bn.gamma, &bn.beta, &bn.run_mean, &bn.run_var]
}

fn bn_storage_mut<T>(bn: &mut BnParams<T>) -> [&mut Vec<T>; 4] {
    [
        &mut bn.gamma,
        &mut bn.beta,
        &mut bn.run_mean,
        &mut bn.run_var,
    ]
}

/// Read-only views of every stored slice, in [`tensor_layout`] order.
/// Unlike the optimizer's parameter slices this includes the running
/// statistics, which are state to persist but not parameters to train.
fn storage_slices<T: Scalar>(m: &Model<T>) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    out.push(m.head.weight.data());
    out.push(&m.head.bias);
    out.push(&m.acts[0].slope);
    match &m.body {
        Body::Training(blocks) => {
            for (i, block) in blocks.iter().enumerate() {
                for br in &block.branches {
                    out.push(br.conv3.weight.data());
                    out.push(&br.conv3.bias);
                    out.extend(bn_storage(&br.bn));
                    out.push(br.conv1.weight.data());
                    out.push(&br.conv1.bias);
                    if let Some(bn2) = &br.bn_after {
                        out.extend(bn_storage(bn2));
                    }
                }
                if let Some(rbn) = &block.residual_bn {
                    out.extend(bn_storage(rbn));
                }
                out.push(&m.acts[i + 1].slope);
            }
        }
        Body::Plain(convs) => {
            for (i, pc) in convs.iter().enumerate() {
                out.push(pc.conv().weight.data());
                out.push(&pc.conv().bias);
                out.push(&m.acts[i + 1].slope);
            }
        }
    }
    out.push(m.tail.weight.data());
    out.push(&m.tail.bias);
    out
}

/// Mutable counterpart of [`storage_slices`], same order.
fn storage_slices_mut<T: Scalar>(m: &mut Model<T>) -> Vec<&mut [T]> {
    let mut out: Vec<&mut [T]> = Vec::new();
    out.push(m.head.weight.data_mut());
    out.push(&mut m.head.bias);
    let (first_act, rest_acts) = m.acts.split_first_mut().expect("model has activations");
    out.push(&mut first_act.slope);
    match &mut m.body {
        Body::Training(blocks) => {
            for (block, act) in blocks.iter_mut().zip(rest_acts) {
                for br in &mut block.branches {
                    out.push(br.conv3.weight.data_mut());
                    out.push(&mut br.conv3.bias);
                    for v in bn_storage_mut(&mut br.bn) {
                        out.push(v);
                    }
                    out.push(br.conv1.weight.data_mut());
                    out.push(&mut br.conv1.bias);
                    if let Some(bn2) = &mut br.bn_after {
                        for v in bn_storage_mut(bn2) {
                            out.push(v);
                        }
                    }
                }
                if let Some(rbn) = &mut block.residual_bn {
                    for v in bn_storage_mut(rbn) {
                        out.push(v);
                    }
                }
                out.push(&mut act.slope);
            }
        }
        Body::Plain(convs) => {
            for (pc, act) in convs.iter_mut().zip(rest_acts) {
                let conv = pc.conv_mut();
                out.push(conv.weight.data_mut());
                out.push(&mut conv.bias);
                out.push(&mut act.slope);
            }
        }
    }
    out.push(m.tail.weight.data_mut());
    out.push(&mut m.tail.bias);
    out
}

/// Build the header for a model, checking that the batch-norm layers are
/// uniform enough to describe with shared constants.
fn header_for<T: Scalar>(
    m: &Model<T>,
    provenance: Option<TrainProvenance>,
) -> Result<WeightHeader> {
    let bns = m.bn_layers();
    let (bn_eps, bn_momentum, bn_mode) = match bns.first() {
        None => (BN_EPS, BN_MOMENTUM, None),
        Some(first) => {
            let eps = first.eps.to_f64();
            let momentum = first.momentum.to_f64();
            let mode = first.mode;
            for bn in &bns {
                if bn.eps.to_f64() != eps || bn.momentum.to_f64() != momentum {
                    return Err(Error::invalid(
                        "save_model",
                        "batch-norm layers disagree on eps/momentum; unify before saving",
                    ));
                }
                if bn.mode != mode {
                    return Err(Error::invalid(
                        "save_model",
                        "batch-norm layers disagree on mode; freeze or unify before saving",
                    ));
                }
            }
            (eps, momentum, Some(mode))
        }
    };
    Ok(WeightHeader {
        spec: m.spec.clone(),
        form: m.form(),
        precision: T::DTYPE,
        bn_eps,
        bn_momentum,
        bn_mode,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        provenance,
    })
}

fn write_weights<T: Scalar>(
    m: &Model<T>,
    provenance: Option<TrainProvenance>,
    w: &mut impl Write,
) -> Result<()> {
    let header = header_for(m, provenance)?;
    let json = serde_json::to_vec(&header)?;
    if json.len() as u32 > MAX_HEADER_BYTES {
        return Err(Error::invalid("save_model", "header too large"));
    }
    w.write_all(&WEIGHT_MAGIC)?;
    w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;

    let layout = tensor_layout(&m.spec, m.form());
    let slices = storage_slices(m);
    debug_assert_eq!(layout.len(), slices.len());
    for ((name, dims), slice) in layout.iter().zip(slices) {
        debug_assert_eq!(dims.iter().product::<usize>(), slice.len());
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(slice.len() * T::DTYPE.size());
        for &v in slice {
            v.write_le_bytes(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Save a model with no training provenance.
pub fn save_model<T: Scalar>(m: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(m, None, &mut w)
}

/// Save a model stamped with the run that produced it.
pub fn save_model_with_provenance<T: Scalar>(
    m: &Model<T>,
    provenance: TrainProvenance,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(m, Some(provenance), &mut w)
}

/// `read_exact` that reports EOF as a truncation naming what was being
/// read, while passing other I/O failures through.
fn exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::TruncatedPayload {
                tensor: what.to_string(),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Read magic, version, and the JSON header.
fn read_preamble(r: &mut impl Read) -> Result<WeightHeader> {
    let mut magic = [0u8; 4];
    exact(r, &mut magic, "<magic>")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = read_u32(r, "<version>")?;
    if version != WEIGHT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: WEIGHT_VERSION,
        });
    }
    let hlen = read_u32(r, "<header length>")?;
    if hlen > MAX_HEADER_BYTES {
        return Err(Error::invalid(
            "load_model",
            format!("header length {hlen} exceeds the {MAX_HEADER_BYTES}-byte limit"),
        ));
    }
    let mut json = vec![0u8; hlen as usize];
    exact(r, &mut json, "<json header>")?;
    let header: WeightHeader = serde_json::from_slice(&json)?;
    header.spec.validate()?;
    Ok(header)
}

/// Zeroed model matching the header, ready to be filled record by record.
fn skeleton<T: Scalar>(header: &WeightHeader) -> Result<Model<T>> {
    let spec = &header.spec;
    let c = spec.channels;
    let m = spec.block.mid_channels();
    let head = ConvParams::zeros(c, spec.colors, 3)?;
    let tail = ConvParams::zeros(spec.colors * spec.scale * spec.scale, c, 3)?;
    let acts = (0..=spec.blocks).map(|_| PreluParams::new(c)).collect();
    let body = match header.form {
        ModelForm::Training => {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for _ in 0..spec.blocks {
                let mut branches = Vec::with_capacity(spec.block.num_branches);
                for _ in 0..spec.block.num_branches {
                    branches.push(BranchParams {
                        conv3: ConvParams::zeros(m, c, 3)?,
                        bn: BnParams::new(m),
                        conv1: ConvParams::zeros(c, m, 1)?,
                        bn_after: (spec.block.bn_placement == BnPlacement::AfterEach)
                            .then(|| BnParams::new(c)),
                    });
                }
                blocks.push(crate::block::BlockParams {
                    branches,
                    residual_bn: (spec.block.residual == ResidualKind::WithBn)
                        .then(|| BnParams::new(c)),
                });
            }
            Body::Training(blocks)
        }
        ModelForm::Plain => {
            let mut convs = Vec::with_capacity(spec.blocks);
            for _ in 0..spec.blocks {
                convs.push(PlainConv::new(ConvParams::zeros(c, c, 3)?)?);
            }
            Body::Plain(convs)
        }
    };
    Ok(Model {
        spec: spec.clone(),
        head,
        acts,
        body,
        tail,
    })
}

/// Read one record and verify it is exactly the expected one.
fn read_record<T: Scalar>(
    r: &mut impl Read,
    expected_name: &str,
    expected_dims: Dims,
    dst: &mut [T],
) -> Result<()> {
    // A clean EOF where a record should start means the tensor is missing;
    // a partial length prefix means the file was cut mid-record.
    let mut len4 = [0u8; 4];
    let first = r.read(&mut len4)?;
    if first == 0 {
        return Err(Error::MissingTensor {
            tensor: expected_name.to_string(),
        });
    }
    if first < 4 {
        exact(r, &mut len4[first..], expected_name)?;
    }
    let name_len = u32::from_le_bytes(len4);
    if name_len > MAX_NAME_BYTES {
        return Err(Error::invalid(
            "load_model",
            format!("tensor name length {name_len} exceeds the {MAX_NAME_BYTES}-byte limit"),
        ));
    }
    let mut name_buf = vec![0u8; name_len as usize];
    exact(r, &mut name_buf, expected_name)?;
    let name = String::from_utf8(name_buf).map_err(|_| Error::UnexpectedTensor {
        tensor: "<non-utf8 name>".to_string(),
    })?;
    if name != expected_name {
        return Err(Error::UnexpectedTensor { tensor: name });
    }
    let mut got = [0usize; 4];
    for slot in &mut got {
        *slot = read_u32(r, &name)? as usize;
    }
    if got != expected_dims {
        return Err(Error::TensorDimMismatch {
            tensor: name,
            expected: expected_dims,
            got,
        });
    }
    debug_assert_eq!(dst.len(), expected_dims.iter().product::<usize>());
    let mut buf = vec![0u8; dst.len() * T::DTYPE.size()];
    exact(r, &mut buf, &name)?;
    for (v, chunk) in dst.iter_mut().zip(buf.chunks_exact(T::DTYPE.size())) {
        *v = T::from_le_bytes(chunk);
    }
    Ok(())
}

fn read_weights<T: Scalar>(r: &mut impl Read) -> Result<Model<T>> {
    let header = read_preamble(r)?;
    if header.precision != T::DTYPE {
        return Err(Error::PrecisionMismatch {
            stored: header.precision.name(),
            requested: T::DTYPE.name(),
        });
    }
    if header.form == ModelForm::Training && header.bn_mode.is_none() {
        return Err(Error::invalid(
            "load_model",
            "training-form header is missing bn_mode",
        ));
    }
    let mut model = skeleton::<T>(&header)?;
    let layout = tensor_layout(&header.spec, header.form);
    {
        let mut slices = storage_slices_mut(&mut model);
        debug_assert_eq!(layout.len(), slices.len());
        for ((name, dims), slice) in layout.iter().zip(slices.iter_mut()) {
            read_record(r, name, *dims, slice)?;
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? > 0 {
        return Err(Error::UnexpectedTensor {
            tensor: "<trailing bytes after final tensor>".to_string(),
        });
    }
    for bn in model.bn_layers_mut() {
        bn.eps = T::from_f64(header.bn_eps);
        bn.momentum = T::from_f64(header.bn_momentum);
        bn.mode = header.bn_mode.expect("checked above for training form");
    }
    Ok(model)
}

/// Load a model whose payload precision must match `T`.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_weights(&mut r)
}

/// Read only the header — cheap architecture/precision inspection.
pub fn load_header(path: impl AsRef<Path>) -> Result<WeightHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_preamble(&mut r)
}

/// A model of whichever precision the file stored.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    /// The spec, independent of precision.
    pub fn spec(&self) -> &ModelSpec {
        match self {
            AnyModel::F32(m) => &m.spec,
            AnyModel::F64(m) => &m.spec,
        }
    }

    /// The form, independent of precision.
    pub fn form(&self) -> ModelForm {
        match self {
            AnyModel::F32(m) => m.form(),
            AnyModel::F64(m) => m.form(),
        }
    }
}

/// Load a model at whatever precision the header declares.
pub fn load_any(path: impl AsRef<Path>) -> Result<AnyModel> {
    let header = load_header(&path)?;
    match header.precision {
        Dtype::F32 => Ok(AnyModel::F32(load_model(path)?)),
        Dtype::F64 => Ok(AnyModel::F64(load_model(path)?)),
    }
}
