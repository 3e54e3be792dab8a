//! Binary checkpoint and gallery files.
//!
//! Everything is little-endian. Checkpoint (`LGN1`):
//!
//! ```text
//! magic "LGN1" | u32 version | u32 len, config text | u32 records
//! per record: u32 len, name | u32 ndim | ndim × u32 dims | f32 values
//! ```
//!
//! Gallery (`LGG1`):
//!
//! ```text
//! magic "LGG1" | u32 version | u32 len, fingerprint | u32 G | u32 D
//! G × (u32 len, instance id) | G·D f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LogoNetConfig, LogoNetModel, Param};
use crate::retrieval::Gallery;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGN1";
pub const GALLERY_MAGIC: &[u8; 4] = b"LGG1";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::invalid("serialize", format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn f32s(&mut self, v: &[f32]) {
        self.0.reserve(v.len() * 4);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: {what} needs {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let start = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            kind: self.kind,
            offset: start,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what}: element count overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            self.pos = 0;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let at = self.pos;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION as usize {
            self.pos = at;
            return Err(self.err(format!(
                "unsupported version {v}, expected {FORMAT_VERSION}"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn checkpoint_to_bytes(model: &LogoNetModel) -> Result<Vec<u8>> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.u32(FORMAT_VERSION as usize)?;
    w.str(&model.config().to_canonical_text())?;
    w.u32(model.params().len())?;
    for p in model.params() {
        w.str(&p.name)?;
        w.u32(p.tensor.shape().len())?;
        for &d in p.tensor.shape() {
            w.u32(d)?;
        }
        w.f32s(p.tensor.data());
    }
    Ok(w.0)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<LogoNetModel> {
    let mut r = Reader {
        kind: "checkpoint",
        buf: bytes,
        pos: 0,
    };
    r.header(CHECKPOINT_MAGIC)?;
    let config_at = r.pos;
    let text = r.str("config")?;
    let config = LogoNetConfig::from_canonical_text(&text).map_err(|e| Error::Format {
        kind: "checkpoint",
        offset: config_at,
        msg: e.to_string(),
    })?;
    let count = r.u32("record count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str("record name")?;
        let ndim = r.u32("ndim")?;
        if ndim == 0 || ndim > 8 {
            return Err(r.err(format!("record {name}: implausible ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| r.err(format!("record {name}: bad shape {shape:?}")))?;
        let data = r.f32s(numel, &format!("values of {name}"))?;
        params.push(Param {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    r.finish()?;
    LogoNetModel::from_params(config, params)
}

pub fn gallery_to_bytes(gallery: &Gallery) -> Result<Vec<u8>> {
    if gallery.is_empty() {
        return Err(Error::invalid("save_gallery", "gallery is empty"));
    }
    let mut w = Writer(GALLERY_MAGIC.to_vec());
    w.u32(FORMAT_VERSION as usize)?;
    w.str(gallery.fingerprint())?;
    w.u32(gallery.len())?;
    w.u32(gallery.dim())?;
    for id in gallery.instance_ids() {
        w.str(id)?;
    }
    w.f32s(gallery.embeddings().data());
    Ok(w.0)
}

pub fn gallery_from_bytes(bytes: &[u8]) -> Result<Gallery> {
    let mut r = Reader {
        kind: "gallery",
        buf: bytes,
        pos: 0,
    };
    r.header(GALLERY_MAGIC)?;
    let fingerprint = r.str("fingerprint")?;
    let at = r.pos;
    let g = r.u32("G")?;
    let d = r.u32("D")?;
    if g == 0 || d == 0 {
        r.pos = at;
        return Err(r.err(format!("empty gallery ({g}×{d})")));
    }
    let mut ids = Vec::with_capacity(g.min(1 << 20));
    for _ in 0..g {
        ids.push(r.str("instance id")?);
    }
    let values = r.f32s(g * d, "embeddings")?;
    r.finish()?;
    Gallery::new(ids, Tensor::new(vec![g, d], values)?, fingerprint)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &LogoNetModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_to_bytes(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LogoNetModel> {
    checkpoint_from_bytes(&read(path.as_ref())?)
}

pub fn save_gallery(gallery: &Gallery, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &gallery_to_bytes(gallery)?)
}

pub fn load_gallery(path: impl AsRef<Path>) -> Result<Gallery> {
    gallery_from_bytes(&read(path.as_ref())?)
}
