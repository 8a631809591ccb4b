//! Little-endian binary helpers and the `.neumat` material format.
//!
//! Layout: `"NMAT"`, version, k, c, c2, flags (bit 0: offset module present),
//! all `u32`. Then the decoder as `u32` layer count, `u32` widths and its
//! `f32` parameters (per layer: row-major weights, then biases); the offset
//! MLP in the same form when present; the offset texture; the pyramid levels
//! coarse to fine; and a provenance trailer of `u64` training iterations
//! followed by the 32-byte dataset hash.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::material::{MbtfMaterial, Provenance};
use crate::mlp::Mlp;
use crate::offset::OffsetModule;
use crate::pyramid::NeuralPyramid;
use crate::scalar::Real;
use crate::texture::FeatureTexture;

pub const MATERIAL_MAGIC: [u8; 4] = *b"NMAT";
pub const MATERIAL_VERSION: u32 = 1;
const FLAG_OFFSET: u32 = 1;

#[derive(Default)]
pub(crate) struct LeWriter {
    pub buf: Vec<u8>,
}

impl LeWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn reals<T: Real>(&mut self, vals: &[T], what: &'static str) -> Result<(), FormatError> {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            let f = v.as_f32();
            if !f.is_finite() {
                return Err(FormatError::NonFinite(what));
            }
            self.f32(f);
        }
        Ok(())
    }
}

pub(crate) struct LeReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn reals<T: Real>(&mut self, n: usize, what: &'static str) -> Result<Vec<T>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        bytes
            .chunks_exact(4)
            .map(|c| {
                let f = f32::from_le_bytes(c.try_into().unwrap());
                if f.is_finite() {
                    Ok(T::cst(f as f64))
                } else {
                    Err(FormatError::NonFinite(what))
                }
            })
            .collect()
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.data.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_mlp<T: Real>(w: &mut LeWriter, m: &Mlp<T>, what: &'static str) -> Result<(), FormatError> {
    w.u32(m.dims().len() as u32);
    for &d in m.dims() {
        w.u32(d as u32);
    }
    w.reals(m.params(), what)
}

fn read_mlp<T: Real>(
    r: &mut LeReader<'_>,
    final_relu: bool,
    what: &'static str,
) -> Result<Mlp<T>, FormatError> {
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(FormatError::Malformed(format!("{what}: {n} layer widths")));
    }
    let dims = (0..n)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.iter().any(|&d| d == 0 || d > 1 << 16) {
        return Err(FormatError::Malformed(format!("{what}: layer widths {dims:?}")));
    }
    let count = crate::mlp::param_count_for(&dims);
    let params = r.reals(count, what)?;
    Mlp::from_params(&dims, final_relu, params).map_err(|e| FormatError::Malformed(e.to_string()))
}

fn read_texture<T: Real>(
    r: &mut LeReader<'_>,
    res: usize,
    c: usize,
    what: &'static str,
) -> Result<FeatureTexture<T>, FormatError> {
    let data = r.reals(res * res * c, what)?;
    FeatureTexture::from_data(res, c, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn encode_material<T: Real>(m: &MbtfMaterial<T>) -> Result<Vec<u8>, FormatError> {
    let shape = m.shape();
    let mut w = LeWriter::default();
    w.bytes(&MATERIAL_MAGIC);
    w.u32(MATERIAL_VERSION);
    w.u32(shape.k as u32);
    w.u32(shape.channels as u32);
    w.u32(shape.offset_channels as u32);
    w.u32(if shape.with_offset { FLAG_OFFSET } else { 0 });
    write_mlp(&mut w, m.decoder(), "decoder")?;
    if let Some(o) = m.offset() {
        write_mlp(&mut w, o.mlp(), "offset MLP")?;
        w.reals(o.texture().data(), "offset texture")?;
    }
    for level in m.pyramid().levels() {
        w.reals(level.data(), "pyramid")?;
    }
    w.u64(m.provenance.iterations);
    w.bytes(&m.provenance.dataset_hash);
    Ok(w.buf)
}

pub fn decode_material<T: Real>(bytes: &[u8]) -> Result<MbtfMaterial<T>, FormatError> {
    let mut r = LeReader::new(bytes);
    r.magic(MATERIAL_MAGIC)?;
    r.version(MATERIAL_VERSION)?;
    let k = r.u32()? as usize;
    let c = r.u32()? as usize;
    let c2 = r.u32()? as usize;
    let flags = r.u32()?;
    if k > 15 || c == 0 || c > 256 || c2 > 256 || flags & !FLAG_OFFSET != 0 {
        return Err(FormatError::Malformed(format!(
            "header k={k} c={c} c2={c2} flags={flags:#x}"
        )));
    }
    let malformed = |e: Error| FormatError::Malformed(e.to_string());
    let decoder = read_mlp(&mut r, true, "decoder")?;
    let offset = if flags & FLAG_OFFSET != 0 {
        if c2 == 0 {
            return Err(FormatError::Malformed("offset module with zero channels".into()));
        }
        let mlp = read_mlp(&mut r, false, "offset MLP")?;
        let tex = read_texture(&mut r, 1 << k, c2, "offset texture")?;
        Some(OffsetModule::new(tex, mlp).map_err(malformed)?)
    } else {
        None
    };
    let levels = (0..=k)
        .map(|s| read_texture(&mut r, 1 << s, c, "pyramid"))
        .collect::<Result<Vec<_>, _>>()?;
    let pyramid = NeuralPyramid::from_levels(levels).map_err(malformed)?;
    let iterations = r.u64()?;
    let dataset_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    r.finish()?;
    MbtfMaterial::from_parts(
        pyramid,
        offset,
        decoder,
        Provenance {
            iterations,
            dataset_hash,
        },
    )
    .map_err(malformed)
}

pub fn save_material<T: Real>(m: &MbtfMaterial<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_material(m)?)
}

pub fn load_material<T: Real>(path: impl AsRef<Path>) -> Result<MbtfMaterial<T>> {
    Ok(decode_material(&read_file(path.as_ref())?)?)
}
