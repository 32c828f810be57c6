//! Checkpoint format: magic `TFCK`, format version, config block, named
//! parameter tensors as little-endian f32, trailing CRC32.

use std::path::Path;

use super::tensor::Tensor;
use super::{param_layout, BackboneConfig, BackboneModel, ModelError};

const MAGIC: &[u8; 4] = b"TFCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &BackboneModel, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);

    let cfg = model.config();
    put_u32(&mut buf, cfg.input_resolution as u32);
    put_u32(&mut buf, cfg.stage_channels.len() as u32);
    for &c in &cfg.stage_channels {
        put_u32(&mut buf, c as u32);
    }
    for &b in &cfg.blocks_per_stage {
        put_u32(&mut buf, b as u32);
    }
    put_u32(&mut buf, cfg.embedding_dim as u32);
    put_u32(&mut buf, cfg.num_classes.unwrap_or(0) as u32);

    let layout = param_layout(cfg);
    put_u32(&mut buf, layout.len() as u32);
    for ((name, _), tensor) in layout.iter().zip(model.params()) {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    std::fs::write(path, &buf).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<BackboneModel, ModelError> {
    let buf = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(ModelError::Truncated);
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Err(ModelError::ChecksumMismatch);
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }

    let input_resolution = r.u32()? as usize;
    let n_stages = r.u32()? as usize;
    if n_stages > 64 {
        return Err(ModelError::ConfigMismatch(format!(
            "implausible stage count {n_stages}"
        )));
    }
    let mut stage_channels = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stage_channels.push(r.u32()? as usize);
    }
    let mut blocks_per_stage = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        blocks_per_stage.push(r.u32()? as usize);
    }
    let embedding_dim = r.u32()? as usize;
    let num_classes = match r.u32()? as usize {
        0 => None,
        n => Some(n),
    };
    let config = BackboneConfig {
        input_resolution,
        stage_channels,
        blocks_per_stage,
        embedding_dim,
        num_classes,
    };
    config
        .validate()
        .map_err(|e| ModelError::ConfigMismatch(e.to_string()))?;

    let tensor_count = r.u32()? as usize;
    let layout = param_layout(&config);
    if tensor_count != layout.len() {
        return Err(ModelError::ConfigMismatch(format!(
            "file holds {tensor_count} tensors, config implies {}",
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.len());
    for (expected_name, expected_shape) in &layout {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::ConfigMismatch("non-utf8 tensor name".into()))?
            .to_string();
        if &name != expected_name {
            return Err(ModelError::ConfigMismatch(format!(
                "tensor {name} where config implies {expected_name}"
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if &shape != expected_shape {
            return Err(ModelError::ConfigMismatch(format!(
                "tensor {name} has shape {shape:?}, config implies {expected_shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let bytes: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            data.push(f32::from_le_bytes(bytes) as f64);
        }
        params.push(Tensor::from_data(&shape, data));
    }
    if r.pos != body.len() {
        return Err(ModelError::ConfigMismatch(format!(
            "{} trailing bytes after last tensor",
            body.len() - r.pos
        )));
    }
    Ok(BackboneModel::from_parts(config, params))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
