use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSED";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Serializes a tensor. `F32` rounds every value to single precision.
pub fn encode_msed(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::InvalidArgument(format!("rank {} exceeds 255", t.ndim())))?;
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + t.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses MSED bytes; `origin` names the source in errors.
pub fn decode_msed(bytes: &[u8], origin: &Path) -> Result<(Tensor, Dtype)> {
    let bad = |detail: String| Error::BadMagic {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing MSED magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| bad(format!("unknown dtype {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(bad("rank 0".into()));
    }
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated dimension list".into()));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(bad(format!("zero dimension in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != count.checked_mul(dtype.size()) {
        return Err(bad(format!(
            "payload has {} bytes, dims {dims:?} need {}",
            payload.len(),
            count.saturating_mul(dtype.size())
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((Tensor::new(dims, data)?, dtype))
}

pub fn write_msed(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let bytes = encode_msed(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_msed(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(decode_msed(&bytes, path)?.0)
}

/// Reads a tensor and checks its shape against `expected`, where `None`
/// entries match any size.
pub fn read_msed_expect(path: &Path, expected: &[Option<usize>]) -> Result<Tensor> {
    let t = read_msed(path)?;
    let ok = t.ndim() == expected.len() && t.shape().iter().zip(expected).all(|(&d, e)| e.map_or(true, |e| e == d));
    if !ok {
        return Err(Error::DimMismatch {
            path: path.to_path_buf(),
            expected: expected.iter().map(|e| e.unwrap_or(0)).collect(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode_msed(&t, Dtype::F32).unwrap();
        assert_eq!(&b[..7], &[b'M', b'S', b'E', b'D', 1, 1, 2]);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 15 + 24);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let good = encode_msed(&t, Dtype::F64).unwrap();
        let cases: Vec<Vec<u8>> = vec![
            good[..good.len() - 1].to_vec(),
            [good.clone(), vec![0]].concat(),
            {
                let mut b = good.clone();
                b[0] = b'X';
                b
            },
            {
                let mut b = good.clone();
                b[4] = 2;
                b
            },
            {
                let mut b = good.clone();
                b[5] = 3;
                b
            },
            {
                let mut b = good.clone();
                b[6] = 0;
                b
            },
            good[..9].to_vec(),
        ];
        for c in cases {
            assert!(matches!(decode_msed(&c, p()), Err(Error::BadMagic { .. })));
        }
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            let b = encode_msed(&t, Dtype::F64).unwrap();
            let (back, dt) = decode_msed(&b, p()).unwrap();
            prop_assert_eq!(dt, Dtype::F64);
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn f32_round_trip_is_stable(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng).map(|v| v as f32 as f64);
            let b = encode_msed(&t, Dtype::F32).unwrap();
            let (back, _) = decode_msed(&b, p()).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_msed(&back, Dtype::F32).unwrap(), b);
        }
    }
}
