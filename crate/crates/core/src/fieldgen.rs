//! Field generation from a trained model, and the field file format.

use crate::binio::{put_f64s, put_u32, put_u64, Cursor};
use crate::diffcore::Tensor3;
use crate::error::{Error, Result};
use crate::unet::{model_digest, UNetModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::path::Path;

/// Extra noise samples drawn beyond the field length; half is trimmed
/// from each side of the network output.
pub const GENERATION_PAD: usize = 8192;

pub const FIELD_MAGIC: [u8; 4] = *b"NNTF";
pub const FIELD_VERSION: u32 = 1;
/// dtype flag: little-endian f64.
pub const DTYPE_F64_LE: u8 = 1;
/// Set in the dtype flag when values are big-endian.
pub const DTYPE_BIG_ENDIAN: u8 = 0x80;

/// Realizations of a generated field with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEnsemble {
    pub n: usize,
    pub sampling_distance: f64,
    pub data: Vec<Vec<f64>>,
    pub base_seed: u64,
    /// Digest of the generating model (see [`model_digest`]).
    pub checkpoint_hash: [u8; 32],
}

impl FieldEnsemble {
    pub fn realizations(&self) -> usize {
        self.data.len()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of realization `index`: a pure function of `(base, index)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// One field of length `n`: `n + 8192` noise samples through the model in
/// eval mode, 4096 output samples dropped at each end, then integrated.
pub fn generate_field(model: &UNetModel, seed: u64, n: usize) -> Result<Vec<f64>> {
    let len = n + GENERATION_PAD;
    let m = model.spec.length_multiple();
    if !len.is_multiple_of(m) {
        return Err(Error::Shape(format!("n + {GENERATION_PAD} = {len} is not divisible by {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let out = model.infer(&Tensor3::new(1, 1, len, noise)?)?;
    let trim = GENERATION_PAD / 2;
    let mut acc = 0.0;
    Ok(out.data()[trim..trim + n]
        .iter()
        .map(|d| {
            acc += d;
            acc
        })
        .collect())
}

/// `r` independent realizations, realization `i` seeded by
/// `derive_seed(base_seed, i)`.
pub fn generate_ensemble(model: &UNetModel, base_seed: u64, r: usize, n: usize) -> Result<FieldEnsemble> {
    if !model.stats_initialized() {
        return Err(Error::UninitializedStats("generation needs a trained model".into()));
    }
    let data = (0..r as u64)
        .into_par_iter()
        .map(|i| generate_field(model, derive_seed(base_seed, i), n))
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldEnsemble { n, sampling_distance: 1.0, data, base_seed, checkpoint_hash: model_digest(model) })
}

pub fn encode_fields(e: &FieldEnsemble) -> Vec<u8> {
    let mut out = Vec::with_capacity(69 + e.data.len() * e.n * 8);
    out.extend_from_slice(&FIELD_MAGIC);
    put_u32(&mut out, FIELD_VERSION);
    put_u64(&mut out, e.data.len() as u64);
    put_u64(&mut out, e.n as u64);
    out.push(DTYPE_F64_LE);
    put_u64(&mut out, e.base_seed);
    out.extend_from_slice(&e.checkpoint_hash);
    for row in &e.data {
        put_f64s(&mut out, row);
    }
    out
}

pub fn decode_fields(buf: &[u8]) -> Result<FieldEnsemble> {
    let mut c = Cursor::new(buf, "field file");
    let magic: [u8; 4] = c.array()?;
    if magic != FIELD_MAGIC {
        return Err(Error::BadMagic { expected: FIELD_MAGIC, found: magic });
    }
    let version = c.u32()?;
    if version != FIELD_VERSION {
        return Err(Error::Version { expected: FIELD_VERSION, found: version });
    }
    let r = c.u64()? as usize;
    let n = c.u64()? as usize;
    let dtype = c.u8()?;
    if dtype != DTYPE_F64_LE {
        let order = if dtype & DTYPE_BIG_ENDIAN != 0 { "big-endian" } else { "unknown" };
        return Err(Error::UnsupportedFormat(format!("{order} dtype flag {dtype:#04x}")));
    }
    let base_seed = c.u64()?;
    let checkpoint_hash: [u8; 32] = c.array()?;
    let data = (0..r).map(|_| c.f64s(n)).collect::<Result<Vec<_>>>()?;
    if !c.is_empty() {
        return Err(Error::Truncated(format!("payload longer than the {r}×{n} values in the header")));
    }
    Ok(FieldEnsemble { n, sampling_distance: 1.0, data, base_seed, checkpoint_hash })
}

pub fn write_fields(e: &FieldEnsemble, path: &Path) -> Result<()> {
    std::fs::write(path, encode_fields(e))?;
    Ok(())
}

pub fn read_fields(path: &Path) -> Result<FieldEnsemble> {
    decode_fields(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ensemble() -> FieldEnsemble {
        FieldEnsemble {
            n: 3,
            sampling_distance: 1.0,
            data: vec![vec![1.0, -2.5, f64::MIN_POSITIVE], vec![0.0, 1e300, -0.0]],
            base_seed: 42,
            checkpoint_hash: [7; 32],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let e = ensemble();
        let back = decode_fields(&encode_fields(&e)).unwrap();
        assert_eq!(back.checkpoint_hash, e.checkpoint_hash);
        for (a, b) in back.data.iter().flatten().zip(e.data.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn count_mismatch_is_truncation() {
        let mut bytes = encode_fields(&ensemble());
        bytes[8] = 3; // claim three realizations
        assert!(matches!(decode_fields(&bytes), Err(Error::Truncated(_))));
        let mut bytes = encode_fields(&ensemble());
        bytes.pop();
        assert!(matches!(decode_fields(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_fields(&ensemble());
        bytes[24] |= DTYPE_BIG_ENDIAN;
        assert!(matches!(decode_fields(&bytes), Err(Error::UnsupportedFormat(_))));
        let mut bytes = encode_fields(&ensemble());
        bytes[0] = b'X';
        assert!(matches!(decode_fields(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_fields(&ensemble());
        bytes[4] = 9;
        assert!(matches!(decode_fields(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn seeds_are_distinct_and_pure() {
        let s: Vec<u64> = (0..1000).map(|i| derive_seed(5, i)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
        assert_eq!(derive_seed(5, 7), s[7]);
        assert_ne!(derive_seed(6, 7), s[7]);
    }
}
