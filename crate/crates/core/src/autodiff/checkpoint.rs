//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PICT" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | dims: rank x u64 | data: numel x f64
//! ```

use std::io::{self, Read, Write};

use super::{numel, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PICT";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a>(
    mut w: impl Write,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_store(w: impl Write, store: &ParamStore) -> io::Result<()> {
    write_tensors(w, store.iter().map(|(_, n, t)| (n, t)))
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors(mut r: impl Read) -> io::Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n = numel(&shape);
        if cur.len() < n * 8 {
            return Err(bad(format!("truncated payload for `{name}`")));
        }
        let data = cur[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cur = &cur[n * 8..];
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Overwrites every parameter in `store` with the same-named checkpoint tensor.
/// Names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> io::Result<()> {
    if tensors.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
        let dst = store.get_mut(id);
        if dst.shape != t.shape {
            return Err(bad(format!("`{name}`: shape {:?} vs {:?}", t.shape, dst.shape)));
        }
        dst.data = t.data;
        dst.grad = None;
    }
    Ok(())
}
