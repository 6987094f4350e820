//! Binary file layout shared by symbol streams and retrieval outputs.
//!
//! ```text
//! "ROSA" | version: u16 | B: u32 | T: u32 | R: u32 | M: u32 | payload
//! ```
//!
//! All integers are little-endian. Symbol files carry `B·T·R` u16 symbols in
//! `(b, t, r)` order. Retrieval files carry i32 values in row-major order of
//! their tensor shape: `B·T·R` for `tau`/`mask`, `B·T·R·M·2` for the
//! counterfactual tables.

use std::io::{Read, Write};

use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{Result, RosaError};
use crate::symbolizer::SymbolStream;

pub const MAGIC: &[u8; 4] = b"ROSA";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub batch: u32,
    pub time: u32,
    pub routes: u32,
    pub route_bits: u32,
}

impl Header {
    pub fn new(batch: usize, time: usize, routes: usize, route_bits: u32) -> Self {
        Self {
            version: VERSION,
            batch: batch as u32,
            time: time as u32,
            routes: routes as u32,
            route_bits,
        }
    }

    pub fn cells(&self) -> usize {
        self.batch as usize * self.time as usize * self.routes as usize
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        for v in [self.batch, self.time, self.routes, self.route_bits] {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = [0u8; HEADER_LEN];
        r.read_exact(&mut buf)?;
        if &buf[..4] != MAGIC {
            return Err(RosaError::Format("bad magic, expected \"ROSA\"".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(RosaError::Format(format!("unsupported version {version}")));
        }
        let word = |i: usize| u32::from_le_bytes(buf[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        Ok(Self {
            version,
            batch: word(0),
            time: word(1),
            routes: word(2),
            route_bits: word(3),
        })
    }
}

pub fn write_symbol_stream<W: Write>(w: &mut W, stream: &SymbolStream) -> Result<()> {
    let (b, t, r) = stream.dim();
    Header::new(b, t, r, stream.route_bits()).write_to(w)?;
    let mut bytes = Vec::with_capacity(b * t * r * 2);
    for s in stream.symbols().iter() {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_symbol_stream<R: Read>(r: &mut R) -> Result<SymbolStream> {
    let h = Header::read_from(r)?;
    let mut bytes = vec![0u8; h.cells() * 2];
    r.read_exact(&mut bytes)
        .map_err(|e| RosaError::Format(format!("truncated symbol payload: {e}")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(RosaError::Format(format!(
            "{} trailing bytes after payload",
            rest.len()
        )));
    }
    let syms: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let arr = Array3::from_shape_vec((h.batch as usize, h.time as usize, h.routes as usize), syms)
        .expect("payload length checked");
    SymbolStream::new(arr, h.route_bits)
}

/// Writes an i32 tensor whose leading dims are `(B, T, R)`.
pub fn write_i32_tensor<W: Write>(w: &mut W, header: Header, values: &ArrayD<i32>) -> Result<()> {
    header.write_to(w)?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads an i32 tensor; `trailing` gives the dims after `(B, T, R)`.
pub fn read_i32_tensor<R: Read>(r: &mut R, trailing: &[usize]) -> Result<(Header, ArrayD<i32>)> {
    let h = Header::read_from(r)?;
    let mut shape = vec![h.batch as usize, h.time as usize, h.routes as usize];
    shape.extend_from_slice(trailing);
    let count: usize = shape.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(RosaError::Format(format!(
            "expected {count} i32 values, found {} bytes",
            bytes.len()
        )));
    }
    let vals: Vec<i32> = bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        h,
        ArrayD::from_shape_vec(IxDyn(&shape), vals).expect("count checked"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let mut buf = Vec::new();
        Header::new(2, 3, 4, 5).write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_LEN);
        assert_eq!(&buf[..4], b"ROSA");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[2, 0, 0, 0]);
        assert_eq!(&buf[18..22], &[5, 0, 0, 0]);
    }

    #[test]
    fn symbol_stream_round_trip() {
        let arr = Array3::from_shape_fn((2, 5, 3), |(b, t, r)| ((b * 7 + t * 3 + r) % 16) as u16);
        let s = SymbolStream::new(arr, 4).unwrap();
        let mut buf = Vec::new();
        write_symbol_stream(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 2 * 30);
        let back = read_symbol_stream(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut buf = Vec::new();
        Header::new(1, 1, 1, 2).write_to(&mut buf).unwrap();
        buf.extend_from_slice(&9u16.to_le_bytes());
        // symbol 9 does not fit in M = 2
        assert!(read_symbol_stream(&mut buf.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_symbol_stream(&mut bad.as_slice()),
            Err(RosaError::Format(_))
        ));
        let truncated = &buf[..buf.len() - 1];
        assert!(read_symbol_stream(&mut &truncated[..]).is_err());
    }
}
