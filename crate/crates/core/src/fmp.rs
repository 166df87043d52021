//! `FMP1` feature-map container: magic `FMP1`, little-endian `u32` D, H, W,
//! then `D·H·W` little-endian `f64` values in channel, row, column order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 4] = b"FMP1";

pub fn encode(map: &FeatureMap) -> Vec<u8> {
    let (d, h, w) = map.shape();
    let mut out = Vec::with_capacity(16 + 8 * map.data().len());
    out.extend_from_slice(MAGIC);
    for dim in [d, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("FMP1 header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (d, h, w) = (dim(0), dim(1), dim(2));
    let n = d
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("FMP1 dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != n * 8 {
        return Err(Error::Format(format!(
            "FMP1 payload has {} bytes, expected {} for {d}x{h}x{w}",
            payload.len(),
            n * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    FeatureMap::new(d, h, w, data)
}

pub fn write(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(map))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// FNV-1a over the encoded bytes; printed by the CLI to compare outputs.
pub fn checksum(map: &FeatureMap) -> u64 {
    encode(map)
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = FeatureMap::new(1, 1, 2, vec![1.0, -2.0]).unwrap();
        let b = encode(&m);
        assert_eq!(&b[..4], b"FMP1");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = FeatureMap::filled(2, 2, 2, 0.5);
        let mut b = encode(&m);
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let b = encode(&m);
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(&b[..10]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(d in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let m = FeatureMap::from_fn(d, h, w, |c, i, j| {
                let x = seed.wrapping_add((c * 97 + i * 13 + j) as u64);
                f64::from_bits(x % 0x7fe0_0000_0000_0000)
            });
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
