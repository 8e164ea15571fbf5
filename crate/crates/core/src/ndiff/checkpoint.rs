//! Named-tensor checkpoint files.
//!
//! Layout, all integers unsigned 64-bit little-endian:
//!
//! ```text
//! "VGF1" | count | { name_len | name (UTF-8) | rank | dims[rank] | data[prod(dims)] as f64 LE }*
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VGF1";

// Guards against allocating absurd buffers from a corrupt header.
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 8;

pub fn write_tensors<'a, W, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

/// Reads tensors in file order.
pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(*MAGIC),
            found: u32::from_be_bytes(magic),
        });
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| Error::Format(format!("tensor {name} has dims {dims:?}")))?;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let tensors = read_tensors(BufReader::new(File::open(path)?))?;
    let mut map = BTreeMap::new();
    for (name, t) in tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("ab", &t)]).unwrap();
        let mut expected = b"VGF1".to_vec();
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(2u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-0.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors(&b"VGF2\0\0\0\0\0\0\0\0"[..]), Err(Error::BadMagic { .. })));
        let t = Tensor::zeros(&[3]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            name in "[a-z.0-9]{1,12}",
        ) {
            let len: usize = shape.iter().product();
            let mut x = seed;
            let data: Vec<f64> = (0..len).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x >> 2)
            }).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensors(&mut buf, [(name.as_str(), &t)]).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), t.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&t));
        }
    }
}
