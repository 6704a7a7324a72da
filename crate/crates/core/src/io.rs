//! Binary snapshots of path measures.
//!
//! Format (little-endian):
//!
//! ```text
//! magic   4 bytes  b"MFPM"
//! version u32      1
//! d       u32
//! n       u64
//! steps   u64
//! horizon f64
//! values  n * (steps + 1) * d * f64, particle-major
//! ```
//!
//! Loading validates the header, the exact payload length, and that every
//! value is finite; save/load round-trips are bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::grid::TimeGrid;
use crate::measure::PathMeasure;
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"MFPM";
const VERSION: u32 = 1;

pub fn save_measure(path: &Path, m: &PathMeasure) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    w.write_all(&(m.len() as u64).to_le_bytes())?;
    w.write_all(&(m.grid().steps() as u64).to_le_bytes())?;
    w.write_all(&m.grid().horizon().to_le_bytes())?;
    for v in m.raw() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_measure(path: &Path) -> Result<PathMeasure> {
    let mut r = BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic; not a path-measure snapshot".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let d = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let steps = read_u64(&mut r)? as usize;
    let horizon = read_f64(&mut r)?;

    let grid = TimeGrid::new(horizon, steps)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if d == 0 || n == 0 {
        return Err(Error::Format("snapshot with zero dimension or particles".into()));
    }
    let count = n
        .checked_mul(grid.points())
        .and_then(|c| c.checked_mul(d))
        .ok_or_else(|| Error::Format("snapshot size overflows".into()))?;

    let mut m = PathMeasure::zeros(grid, d, n).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0u8; 8 * 1024];
    let mut written = 0usize;
    let out = m.raw_mut();
    while written < count {
        let want = (count - written).min(buf.len() / 8) * 8;
        r.read_exact(&mut buf[..want]).map_err(|_| {
            Error::Format(format!("truncated payload: expected {count} values"))
        })?;
        for chunk in buf[..want].chunks_exact(8) {
            out[written] = f64::from_le_bytes(chunk.try_into().unwrap());
            written += 1;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    m.validate_finite()
        .map_err(|e| Error::Format(format!("snapshot holds non-finite values: {e}")))?;
    Ok(m)
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

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Rng, StreamKey};

    #[test]
    fn round_trip_is_bit_exact() {
        let grid = TimeGrid::new(2.0, 5).unwrap();
        let mut m = PathMeasure::zeros(grid, 2, 7).unwrap();
        let mut rng = Rng::from_key(StreamKey::root(11).purpose(Purpose::Init));
        for v in m.raw_mut() {
            *v = rng.normal();
        }
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cloud.mfpm");
        save_measure(&file, &m).unwrap();
        let back = load_measure(&file).unwrap();
        assert_eq!(back.dim(), 2);
        assert_eq!(back.len(), 7);
        assert_eq!(back.grid().steps(), 5);
        assert_eq!(back.grid().horizon(), 2.0);
        assert_eq!(back.raw(), m.raw());
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.mfpm");
        std::fs::write(&file, b"NOPE").unwrap();
        assert!(matches!(load_measure(&file), Err(Error::Format(_)) | Err(Error::Io(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let m = PathMeasure::from_initial_states(grid, 1, &[1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("trunc.mfpm");
        save_measure(&file, &m).unwrap();
        let bytes = std::fs::read(&file).unwrap();
        std::fs::write(&file, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_measure(&file), Err(Error::Format(_))));
    }
}
