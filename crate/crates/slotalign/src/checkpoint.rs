//! Versioned binary checkpoints: model configuration (with an embedded hash),
//! every parameter by name, optional optimizer state, and the epoch to resume
//! from. Values are stored as f64 so both scalar widths round-trip exactly.

use std::fs;
use std::path::Path;

use crate::adam::{Adam, AdamSlot};
use crate::aligner::{AlignerConfig, AlignerModel};
use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SACK";
const VERSION: u32 = 1;

/// Everything reconstructed from a checkpoint file.
pub struct Loaded<S> {
    pub model: AlignerModel<S>,
    /// Present when the checkpoint was saved with optimizer state; fully
    /// restored (hyperparameters, moments, and step count).
    pub opt: Option<Adam<S>>,
    /// Absolute epoch index the next training call should start at.
    pub next_epoch: usize,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(buf: &mut Vec<u8>, t: &Tensor<S>) {
    for &v in t.data() {
        put_f64(buf, v.to_f64_c());
    }
}

/// Write model (and optionally optimizer) state. The file is written to a
/// sibling temp path first and renamed into place, so an interrupted save
/// never leaves a half-written checkpoint under the final name.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &AlignerModel<S>,
    opt: Option<&Adam<S>>,
    next_epoch: usize,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let cfg_json = serde_json::to_vec(&model.cfg)
        .map_err(|e| Error::invalid(format!("config does not serialize: {}", e)))?;
    put_u64(&mut buf, cfg_json.len() as u64);
    buf.extend_from_slice(&cfg_json);
    put_u64(&mut buf, fnv1a64(&cfg_json));
    put_u64(&mut buf, next_epoch as u64);

    put_u64(&mut buf, model.store().len() as u64);
    for p in model.store().iter() {
        put_u64(&mut buf, p.name.len() as u64);
        buf.extend_from_slice(p.name.as_bytes());
        put_u64(&mut buf, p.value.shape().len() as u64);
        for &d in p.value.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_tensor(&mut buf, &p.value);
    }

    match opt {
        None => buf.push(0),
        Some(opt) => {
            if opt.slots().len() != model.store().len() {
                return Err(Error::invalid(format!(
                    "optimizer tracks {} parameters, model has {}",
                    opt.slots().len(),
                    model.store().len()
                )));
            }
            buf.push(1);
            put_f64(&mut buf, opt.lr);
            put_f64(&mut buf, opt.beta1);
            put_f64(&mut buf, opt.beta2);
            put_f64(&mut buf, opt.eps);
            put_u64(&mut buf, opt.step_count());
            for slot in opt.slots() {
                put_tensor(&mut buf, &slot.m);
                put_tensor(&mut buf, &slot.v);
            }
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cursor over the checkpoint bytes; every read is bounds-checked and failures
/// report the byte offset.
struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, format!("at byte {}: {}", self.off, msg.into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.off < n {
            return Err(self.fail(format!(
                "need {} bytes but only {} remain",
                n,
                self.buf.len() - self.off
            )));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("length {} does not fit", v)))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<S: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(self.fail("non-finite value"));
            }
            data.push(S::from_f64_c(v));
        }
        Tensor::from_vec(shape, data)
    }
}

/// Read a checkpoint back. The model is rebuilt from the embedded config and
/// every parameter overwritten by name; the file must cover the full
/// parameter set exactly once each, with matching shapes.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Loaded<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, off: 0, path };

    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic; not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {} (expected {})", version, VERSION),
        ));
    }
    let cfg_len = r.usize()?;
    let cfg_json = r.take(cfg_len)?.to_vec();
    let stored_hash = r.u64()?;
    if fnv1a64(&cfg_json) != stored_hash {
        return Err(Error::format(path, "config hash mismatch; file is corrupt"));
    }
    let cfg: AlignerConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| Error::format(path, format!("bad embedded config: {}", e)))?;
    let next_epoch = r.usize()?;

    // The init seed is irrelevant: every parameter is overwritten below, and
    // coverage is enforced.
    let mut model = AlignerModel::<S>::init(cfg, 0)?;
    let n_params = r.usize()?;
    if n_params != model.store().len() {
        return Err(Error::format(
            path,
            format!("{} parameters in file, model has {}", n_params, model.store().len()),
        ));
    }
    let mut covered = vec![false; n_params];
    for _ in 0..n_params {
        let name_len = r.usize()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not utf-8"))?
            .to_string();
        let n_dims = r.usize()?;
        let mut shape = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            shape.push(r.usize()?);
        }
        let value: Tensor<S> = r.tensor(&shape)?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {:?}", name)))?;
        let param = model.store.get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {:?} has shape {:?} in file but {:?} in model",
                    name,
                    shape,
                    param.value.shape()
                ),
            ));
        }
        let idx = model.store.iter().position(|p| p.name == name).unwrap();
        if covered[idx] {
            return Err(Error::format(path, format!("parameter {:?} appears twice", name)));
        }
        covered[idx] = true;
        model.store.get_mut(id).value = value;
    }

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let lr = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let step_count = r.u64()?;
            let mut slots = Vec::with_capacity(n_params);
            for p in model.store().iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>() {
                slots.push(AdamSlot { m: r.tensor(&p)?, v: r.tensor(&p)? });
            }
            let mut opt = Adam::new(model.store(), lr);
            opt.beta1 = beta1;
            opt.beta2 = beta2;
            opt.eps = eps;
            opt.restore(slots, step_count)?;
            Some(opt)
        }
        other => {
            return Err(Error::format(path, format!("bad optimizer flag {}", other)));
        }
    };

    if r.off != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after checkpoint data", bytes.len() - r.off),
        ));
    }
    Ok(Loaded { model, opt, next_epoch })
}
