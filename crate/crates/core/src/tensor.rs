//! Dense tensor container and the UMDT on-disk format.
//!
//! UMDT layout: magic `UMDT`, version `u32` (=1), dtype code `u8`
//! (1 = f32, 2 = f64), ndim `u8`, shape as ndim x `u32`, then the
//! row-major little-endian payload. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, UmdrError};

const MAGIC: [u8; 4] = *b"UMDT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Row-major dense tensor holding either f32 or f64 data.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::F64(data),
        })
    }

    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        let expect: usize = shape.iter().product();
        if expect != len {
            return Err(UmdrError::shape(
                shape.to_vec(),
                vec![len],
                "data length must equal product of shape",
            ));
        }
        Ok(())
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// All values finite (no NaN/inf).
    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// View the payload as f64, converting f32 values losslessly.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn as_f32_slice(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::F64(_) => None,
        }
    }

    pub fn from_array_f32(arr: &ArrayD<f32>) -> Self {
        let shape = arr.shape().to_vec();
        let data = arr
            .as_standard_layout()
            .as_slice()
            .expect("standard layout")
            .to_vec();
        Tensor {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn from_array_f64(arr: &ArrayD<f64>) -> Self {
        let shape = arr.shape().to_vec();
        let data = arr
            .as_standard_layout()
            .as_slice()
            .expect("standard layout")
            .to_vec();
        Tensor {
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn to_array_f32(&self) -> Result<ArrayD<f32>> {
        let data: Vec<f32> = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), data)
            .map_err(|e| UmdrError::InvalidArgument(e.to_string()))
    }

    pub fn to_array_f64(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.to_f64_vec())
            .map_err(|e| UmdrError::InvalidArgument(e.to_string()))
    }
}

/// Serialize a tensor in the UMDT layout.
pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::with_capacity(16 + t.len() * t.dtype().size());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(t.dtype().code());
    buf.push(t.shape.len() as u8);
    for &dim in &t.shape {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| UmdrError::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| UmdrError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Deserialize a tensor from the UMDT layout.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| UmdrError::io(display.clone(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| UmdrError::io(display.clone(), e))?;

    if bytes.len() < 4 {
        return Err(UmdrError::TruncatedPayload {
            path: display,
            expected: 4,
            found: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != MAGIC {
        return Err(UmdrError::BadMagic {
            path: display,
            found: magic,
        });
    }
    if bytes.len() < 10 {
        return Err(UmdrError::TruncatedPayload {
            path: display,
            expected: 10,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(UmdrError::BadVersion {
            path: display,
            version,
        });
    }
    let dtype = match bytes[8] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        code => {
            return Err(UmdrError::UnknownDtype {
                path: display,
                code,
            })
        }
    };
    let ndim = bytes[9] as usize;
    let header_len = 10 + ndim * 4;
    if bytes.len() < header_len {
        return Err(UmdrError::TruncatedPayload {
            path: display,
            expected: header_len,
            found: bytes.len(),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 10 + i * 4;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    let expected = header_len + count * dtype.size();
    if bytes.len() < expected {
        return Err(UmdrError::TruncatedPayload {
            path: display,
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header_len..expected];
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_zeros_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.umdt");
        let t = Tensor::from_f32(vec![2, 3], vec![0.0; 6]).unwrap();
        write_tensor(&t, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn roundtrip_random_f64_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.umdt");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<f64> = (0..16 * 3 * 32 * 32).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t = Tensor::from_f64(vec![16, 3, 32, 32], data).unwrap();
        write_tensor(&t, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[16, 3, 32, 32]);
        match (t.data(), back.data()) {
            (TensorData::F64(a), TensorData::F64(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            _ => panic!("dtype changed in round-trip"),
        }
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.umdt");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x01\x01\x00\x00\x00").unwrap();
        match read_tensor(&p) {
            Err(UmdrError::BadMagic { found, .. }) => assert_eq!(&found, b"XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_code() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.umdt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"UMDT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(9); // no such dtype
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        match read_tensor(&p) {
            Err(UmdrError::UnknownDtype { code, .. }) => assert_eq!(code, 9),
            other => panic!("expected UnknownDtype, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.umdt");
        let t = Tensor::from_f32(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match read_tensor(&p) {
            Err(UmdrError::TruncatedPayload { .. }) => {}
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
    }

    #[test]
    fn many_random_shapes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..100 {
            let ndim = rng.gen_range(1..=4);
            let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=6)).collect();
            let n: usize = shape.iter().product();
            let p = dir.path().join(format!("t{i}.umdt"));
            if i % 2 == 0 {
                let data: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect();
                let t = Tensor::from_f32(shape, data).unwrap();
                write_tensor(&t, &p).unwrap();
                assert_eq!(read_tensor(&p).unwrap(), t);
            } else {
                let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
                let t = Tensor::from_f64(shape, data).unwrap();
                write_tensor(&t, &p).unwrap();
                assert_eq!(read_tensor(&p).unwrap(), t);
            }
        }
    }
}
