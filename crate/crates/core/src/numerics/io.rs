//! `BAPT` binary tensor container.
//!
//! Layout per tensor: magic `b"BAPT"`, version `u8`, rank `u8`, `rank`
//! little-endian `u32` extents, then the row-major `f32` payload in
//! little-endian order. A file may hold several tensors back to back.

use std::io::{self, Read, Write};

use crate::error::{BapError, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BAPT";
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(BapError::Format(format!("rank {} too large", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| BapError::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor; `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if &magic != MAGIC {
        return Err(BapError::Format(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(BapError::Format(format!("unsupported version {}", head[0])));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        r.read_exact(&mut e)?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map(Some)
}

pub fn write_all<W: Write>(w: &mut W, tensors: &[&Tensor]) -> Result<()> {
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_all<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"BAPT".to_vec();
        expect.extend_from_slice(&[1, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bad: &[u8] = b"NOPE\x01\x01\x01\x00\x00\x00";
        assert!(read_tensor(&mut bad).is_err());
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn stream_round_trips(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..4)) {
            let tensors: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    Tensor::new(s.clone(), (0..n).map(|j| (i * 31 + j) as f32 * 0.37 - 2.0).collect()).unwrap()
                })
                .collect();
            let mut buf = Vec::new();
            write_all(&mut buf, &tensors.iter().collect::<Vec<_>>()).unwrap();
            let back = read_all(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
