//! Binary state snapshots: `LPF1`, then the two array extents as `u32`, then
//! u, v and eta row-major as `f64`, all little-endian. Ghost cells included so
//! a round trip is bit-exact.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::StaggeredState;

const MAGIC: &[u8; 4] = b"LPF1";

pub fn write_snapshot<W: Write>(mut w: W, s: &StaggeredState) -> Result<()> {
    let (nx, ny) = s.eta.dim();
    w.write_all(MAGIC)?;
    for n in [nx, ny] {
        let n = u32::try_from(n).map_err(|_| Error::Snapshot(format!("extent {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    for a in [&s.u, &s.v, &s.eta] {
        for x in a.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<StaggeredState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Snapshot(format!("bad magic {magic:?}")));
    }
    let (nx, ny) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
    if nx != ny || nx < 4 {
        return Err(Error::Snapshot(format!("unsupported extents {nx}x{ny}")));
    }
    let mut field = || -> Result<Array2<f64>> {
        let mut buf = vec![0u8; nx * ny * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Array2::from_shape_vec((nx, ny), data).expect("shape matches length"))
    };
    let (u, v, eta) = (field()?, field()?, field()?);
    Ok(StaggeredState { u, v, eta })
}

pub fn save(path: &std::path::Path, s: &StaggeredState) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_snapshot(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<StaggeredState> {
    read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))
}
