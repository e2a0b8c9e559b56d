//! Self-describing binary checkpoints: magic bytes, a version, the
//! model configuration, then every parameter tensor with its name,
//! shape, and raw little-endian values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::model::{Model, ModelConfig};
use crate::pattern::PatternSpec;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CSAT";
pub const VERSION: u32 = 1;

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &model.cfg;
    for v in [
        cfg.vocab,
        cfg.layers,
        cfg.model_dim,
        cfg.heads,
        cfg.head_dim,
        cfg.train_context,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.rope_base.to_le_bytes());
    buf.extend_from_slice(&cfg.pi_scale.to_le_bytes());
    buf.extend_from_slice(&(cfg.patterns.len() as u32).to_le_bytes());
    for pattern in &cfg.patterns {
        write_str(&mut buf, &pattern.to_tag());
    }
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        write_str(&mut buf, &p.name);
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &dim in p.value.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let vocab = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let model_dim = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let head_dim = r.u32()? as usize;
    let train_context = r.u32()? as usize;
    let rope_base = r.f64()?;
    let pi_scale = r.f64()?;
    let n_patterns = r.u32()? as usize;
    let mut patterns = Vec::with_capacity(n_patterns);
    for _ in 0..n_patterns {
        patterns.push(PatternSpec::from_tag(&r.string()?)?);
    }
    let cfg = ModelConfig {
        vocab,
        layers,
        model_dim,
        heads,
        head_dim,
        train_context,
        patterns,
        rope_base,
        pi_scale,
    };
    let mut model = Model::new(cfg, 0)?;
    let n_params = r.u32()? as usize;
    if n_params != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {n_params} parameters, model wants {}",
            model.params().len()
        )));
    }
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        model.set_param_value(&name, Tensor::from_vec(&shape, data)?)?;
    }
    r.expect_end()?;
    Ok(model)
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("invalid utf-8 in checkpoint".into()))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
