//! Flat parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic      8 bytes  "BOXPCKPT"
//! version    u32      = 1
//! dtype      u32      1 = f32, 2 = f64
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of entries
//! entry * count:
//!   name_len u32      followed by name_len bytes of UTF-8 name
//!   dims     4 x u32  batch/out, channel/in, height, width
//!   payload  product(dims) little-endian floats of the declared dtype
//! ```
//!
//! No trailing bytes are allowed. Entry order is the model's parameter order.

use std::fs;
use std::path::Path;

use super::{ParamStore, Result, Shape, Tensor, TensorError};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BOXPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    /// Free-form text; the pipeline stores the model configuration here.
    pub metadata: String,
    pub params: ParamStore<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<T: Scalar>(metadata: &str, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, T::DTYPE.code());
    put_u32(&mut out, metadata.len() as u32);
    out.extend_from_slice(metadata.as_bytes());
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.values() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TensorError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| TensorError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let code = r.u32("dtype")?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype code {code}")))?;
    let metadata = r.string("metadata")?;
    let count = r.u32("entry count")? as usize;
    let mut params = ParamStore::new();
    for i in 0..count {
        let name = r.string(&format!("entry {i} name"))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32(&format!("`{name}` dims"))? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = r.take(shape.len() * dtype.size(), &format!("`{name}` payload"))?;
        let values: Vec<T> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
        };
        if params.index_of(&name).is_some() {
            return Err(TensorError::Checkpoint(format!("duplicate entry `{name}`")));
        }
        params.insert(name, Tensor::from_vec(shape, values)?);
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { metadata, params })
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    metadata: &str,
    params: &ParamStore<T>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, encode(metadata, params))
        .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.init("backbone.conv.weight", Shape::new(4, 3, 3, 3), Init::HeNormal, &mut rng);
        s.init("backbone.conv.bias", Shape::new(1, 4, 1, 1), Init::Zeros, &mut rng);
        s
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = encode("meta", &store(0));
        assert_eq!(&bytes[..8], b"BOXPCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(&bytes[20..24], b"meta");
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
    }

    #[test]
    fn truncated_or_padded_files_fail() {
        let bytes = encode("", &store(1));
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode::<f32>(&longer).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_values(seed in 0u64..1000, meta in "[a-z =\n]{0,40}") {
            let s = store(seed);
            let back = decode::<f32>(&encode(&meta, &s)).unwrap();
            prop_assert_eq!(back.metadata, meta);
            for ((na, a), (nb, b)) in s.iter().zip(back.params.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert_eq!(a.values(), b.values());
            }
        }
    }
}
