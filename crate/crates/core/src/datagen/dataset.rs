//! `.mbtfq` query datasets.
//!
//! Little-endian. Header: `"MBTQ"`, version `u32`, k `u32`, record count
//! `u64`, flags `u32`. Records follow back to back, ten `f32` each:
//! `u, v, sigma, wi.x, wi.y, wo.x, wo.y, r, g, b`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::material::Query;
use crate::offset::Direction;
use crate::scalar::Real;
use crate::texture::Uv;

pub const DATASET_MAGIC: [u8; 4] = *b"MBTQ";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;
pub const RECORD_BYTES: usize = 40;

/// Targets include one interreflection bounce.
pub const FLAG_INDIRECT: u32 = 1;
/// Targets were rendered with a smoothed (cone) light.
pub const FLAG_LIGHT_CONE: u32 = 2;

/// One training sample: a query and its RGB reflectance.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct QueryRecord {
    pub uv: [f32; 2],
    pub sigma: f32,
    pub wi: [f32; 2],
    pub wo: [f32; 2],
    pub rgb: [f32; 3],
}

impl QueryRecord {
    fn fields(&self) -> [f32; 10] {
        [
            self.uv[0], self.uv[1], self.sigma, self.wi[0], self.wi[1], self.wo[0], self.wo[1], self.rgb[0],
            self.rgb[1], self.rgb[2],
        ]
    }

    fn from_fields(f: [f32; 10]) -> Self {
        Self {
            uv: [f[0], f[1]],
            sigma: f[2],
            wi: [f[3], f[4]],
            wo: [f[5], f[6]],
            rgb: [f[7], f[8], f[9]],
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.fields().iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite("query record"));
        }
        if self.rgb.iter().any(|&c| c < 0.0) {
            return Err(FormatError::Malformed("negative reflectance target".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(FormatError::Malformed(format!("kernel size {} is not positive", self.sigma)));
        }
        for d in [self.wi, self.wo] {
            Direction::new(d[0], d[1]).map_err(|e| FormatError::Malformed(e.to_string()))?;
        }
        Ok(())
    }

    pub fn query<T: Real>(&self) -> Query<T> {
        let dir = |d: [f32; 2]| {
            Direction::new(T::cst(d[0] as f64), T::cst(d[1] as f64)).expect("validated record direction")
        };
        Query {
            p: Uv::new(T::cst(self.uv[0] as f64), T::cst(self.uv[1] as f64)),
            sigma: T::cst(self.sigma as f64),
            wi: dir(self.wi),
            wo: dir(self.wo),
        }
    }

    pub fn target<T: Real>(&self) -> [T; 3] {
        self.rgb.map(|c| T::cst(c as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct QueryDataset {
    /// Finest pyramid level the dataset was generated for.
    pub k: u32,
    pub flags: u32,
    pub records: Vec<QueryRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub k: u32,
    pub count: u64,
    pub flags: u32,
}

fn encode_header(h: &DatasetHeader) -> [u8; HEADER_BYTES] {
    let mut b = [0u8; HEADER_BYTES];
    b[0..4].copy_from_slice(&DATASET_MAGIC);
    b[4..8].copy_from_slice(&DATASET_VERSION.to_le_bytes());
    b[8..12].copy_from_slice(&h.k.to_le_bytes());
    b[12..20].copy_from_slice(&h.count.to_le_bytes());
    b[20..24].copy_from_slice(&h.flags.to_le_bytes());
    b
}

fn decode_header(b: &[u8]) -> Result<DatasetHeader, FormatError> {
    let mut r = crate::io::LeReader::new(b);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let k = r.u32()?;
    let count = r.u64()?;
    let flags = r.u32()?;
    if k > 15 {
        return Err(FormatError::Malformed(format!("k = {k}")));
    }
    Ok(DatasetHeader { k, count, flags })
}

fn encode_record(r: &QueryRecord, out: &mut [u8]) {
    for (chunk, v) in out.chunks_exact_mut(4).zip(r.fields()) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
}

fn decode_record(b: &[u8]) -> Result<QueryRecord, FormatError> {
    let mut f = [0f32; 10];
    for (v, chunk) in f.iter_mut().zip(b.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    let r = QueryRecord::from_fields(f);
    r.validate()?;
    Ok(r)
}

impl QueryDataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            k: self.k,
            count: self.records.len() as u64,
            flags: self.flags,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = vec![0u8; HEADER_BYTES + RECORD_BYTES * self.records.len()];
        out[..HEADER_BYTES].copy_from_slice(&encode_header(&self.header()));
        for (r, chunk) in self.records.iter().zip(out[HEADER_BYTES..].chunks_exact_mut(RECORD_BYTES)) {
            r.validate()?;
            encode_record(r, chunk);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let header = decode_header(bytes.get(..HEADER_BYTES).ok_or(FormatError::Truncated)?)?;
        let body = &bytes[HEADER_BYTES..];
        let expected = usize::try_from(header.count)
            .ok()
            .and_then(|c| c.checked_mul(RECORD_BYTES))
            .ok_or(FormatError::Truncated)?;
        if body.len() < expected {
            return Err(FormatError::Truncated);
        }
        if body.len() > expected {
            return Err(FormatError::Malformed(format!("{} trailing bytes", body.len() - expected)));
        }
        let records = body
            .chunks_exact(RECORD_BYTES)
            .map(decode_record)
            .collect::<Result<_, _>>()?;
        Ok(Self {
            k: header.k,
            flags: header.flags,
            records,
        })
    }

    /// SHA-256 of the encoded file.
    pub fn content_hash(&self) -> Result<[u8; 32], FormatError> {
        Ok(Sha256::digest(self.encode()?).into())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        crate::io::write_file(path, &bytes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self::decode(&crate::io::read_file(path)?)?)
    }
}

/// Record-at-a-time reader with bounded memory.
pub struct DatasetReader<R> {
    inner: R,
    header: DatasetHeader,
    remaining: u64,
    failed: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f))
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(FormatError::Truncated),
        _ => Error::Io {
            path: "<dataset stream>".into(),
            source: e,
        },
    })
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut h = [0u8; HEADER_BYTES];
        read_exact_or_truncated(&mut inner, &mut h)?;
        let header = decode_header(&h)?;
        Ok(Self {
            inner,
            header,
            remaining: header.count,
            failed: false,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        self.header
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<QueryRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        let mut buf = [0u8; RECORD_BYTES];
        let res = read_exact_or_truncated(&mut self.inner, &mut buf)
            .and_then(|_| decode_record(&buf).map_err(Error::from));
        self.remaining -= 1;
        self.failed = res.is_err();
        Some(res)
    }
}

/// Streams records to a file; the header count is patched on `finish`.
pub struct DatasetWriter<W: Write + std::io::Seek> {
    inner: BufWriter<W>,
    header: DatasetHeader,
}

impl<W: Write + std::io::Seek> DatasetWriter<W> {
    pub fn new(inner: W, k: u32, flags: u32) -> Result<Self> {
        let header = DatasetHeader { k, count: 0, flags };
        let mut inner = BufWriter::new(inner);
        inner
            .write_all(&encode_header(&header))
            .map_err(|e| Error::io("<dataset stream>", e))?;
        Ok(Self { inner, header })
    }

    pub fn push(&mut self, r: &QueryRecord) -> Result<()> {
        r.validate()?;
        let mut buf = [0u8; RECORD_BYTES];
        encode_record(r, &mut buf);
        self.inner.write_all(&buf).map_err(|e| Error::io("<dataset stream>", e))?;
        self.header.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetHeader> {
        use std::io::{Seek, SeekFrom};
        let io = |e| Error::io("<dataset stream>", e);
        self.inner.seek(SeekFrom::Start(0)).map_err(io)?;
        self.inner.write_all(&encode_header(&self.header)).map_err(io)?;
        self.inner.flush().map_err(io)?;
        Ok(self.header)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize) -> QueryDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records = (0..n)
            .map(|_| {
                let (wi, _) = crate::sample_outgoing::<f32, _>(&mut rng);
                let (wo, _) = crate::sample_outgoing::<f32, _>(&mut rng);
                QueryRecord {
                    uv: [rng.random(), rng.random()],
                    sigma: rng.random_range(0.001..0.5),
                    wi: [wi.x(), wi.y()],
                    wo: [wo.x(), wo.y()],
                    rgb: [rng.random(), rng.random(), rng.random()],
                }
            })
            .collect();
        QueryDataset { k: 6, flags: FLAG_LIGHT_CONE, records }
    }

    #[test]
    fn round_trip_and_streaming() {
        let ds = random_dataset(10_000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mbtfq");
        ds.write(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, HEADER_BYTES + 10_000 * RECORD_BYTES);
        assert_eq!(QueryDataset::read(&path).unwrap(), ds);
        let reader = DatasetReader::open(&path).unwrap();
        assert_eq!(reader.header(), ds.header());
        let streamed: Vec<_> = reader.collect::<Result<_>>().unwrap();
        assert_eq!(streamed, ds.records);
        // streaming writer produces the same bytes
        let mut cur = std::io::Cursor::new(Vec::new());
        let mut w = DatasetWriter::new(&mut cur, ds.k, ds.flags).unwrap();
        for r in &ds.records {
            w.push(r).unwrap();
        }
        w.finish().unwrap();
        assert_eq!(cur.into_inner(), ds.encode().unwrap());
    }

    #[test]
    fn rejects_nan_target_at_write() {
        let mut ds = random_dataset(3);
        ds.records[1].rgb[2] = f32::NAN;
        assert_eq!(ds.encode(), Err(FormatError::NonFinite("query record")));
        let mut cur = std::io::Cursor::new(Vec::new());
        let mut w = DatasetWriter::new(&mut cur, 6, 0).unwrap();
        assert!(w.push(&ds.records[1]).is_err());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = random_dataset(4).encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(QueryDataset::decode(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(QueryDataset::decode(&bad), Err(FormatError::Version { .. })));
        assert_eq!(QueryDataset::decode(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated));
        assert_eq!(QueryDataset::decode(&bytes[..10]), Err(FormatError::Truncated));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(QueryDataset::decode(&bad), Err(FormatError::NonFinite("query record")));
        // streaming reader reports truncation as an error item
        let items: Vec<_> = DatasetReader::new(&bytes[..bytes.len() - 3]).unwrap().collect();
        assert_eq!(items.len(), 4);
        assert!(matches!(items[3], Err(Error::Format(FormatError::Truncated))));
    }

    #[test]
    fn external_layout_contract() {
        // A file assembled by hand following the documented layout.
        let mut b = Vec::new();
        b.extend_from_slice(b"MBTQ");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&1u64.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        for v in [0.25f32, 0.5, 0.125, 0.1, 0.2, -0.3, 0.0, 0.15, 0.16, 0.17] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let ds = QueryDataset::decode(&b).unwrap();
        assert_eq!(ds.k, 4);
        assert_eq!(
            ds.records[0],
            QueryRecord { uv: [0.25, 0.5], sigma: 0.125, wi: [0.1, 0.2], wo: [-0.3, 0.0], rgb: [0.15, 0.16, 0.17] }
        );
        assert_eq!(ds.encode().unwrap(), b);
    }
}
