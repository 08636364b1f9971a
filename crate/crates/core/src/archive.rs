//! Binary archive of named `f64` arrays plus a JSON header.
//!
//! Layout (little-endian):
//! `magic[8] | version u32 | header_len u64 | header JSON | count u64 |
//!  { name_len u32 | name | ndim u32 | dims u64* | data f64* }*`

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Param;

pub struct Archive<H> {
    pub header: H,
    pub arrays: Vec<Param>,
}

pub fn write_archive<W: Write, H: Serialize>(
    mut w: W,
    magic: &[u8; 8],
    version: u32,
    header: &H,
    arrays: &[Param],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for p in arrays {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_HEADER: u64 = 1 << 26;
const MAX_ELEMENTS: u64 = 1 << 30;

pub fn read_archive<R: Read, H: DeserializeOwned>(mut r: R, magic: &[u8; 8], version: u32) -> Result<Archive<H>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Archive(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(&mut r)?;
    if v != version {
        return Err(Error::Archive(format!("unsupported version {v}, expected {version}")));
    }
    let hlen = read_u64(&mut r)?;
    if hlen > MAX_HEADER {
        return Err(Error::Archive(format!("header length {hlen} too large")));
    }
    let mut json = vec![0u8; hlen as usize];
    r.read_exact(&mut json)?;
    let header = serde_json::from_slice(&json)?;
    let count = read_u64(&mut r)?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Archive(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)?);
        }
        let n: u64 = shape.iter().product();
        if n > MAX_ELEMENTS {
            return Err(Error::Archive(format!("array {name} too large")));
        }
        let mut data = Vec::with_capacity(n as usize);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        arrays.push(Param { name, shape: shape.into_iter().map(|d| d as usize).collect(), data });
    }
    Ok(Archive { header, arrays })
}
