//! Binary persistence for lookup tables.
//!
//! Layout (little-endian): 8-byte magic `NNGPLUT1`, one nonlinearity tag byte, `n_g`,
//! `n_v`, `n_c` as `u64`, `u_max`, `s_max` as `f64`, then `n_v` values of the diagonal
//! table followed by the `n_v x n_c` correlation table in row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::grid::{build_grid, GridSpec};
use super::table::{populate, LookupTable};
use crate::error::{Error, Result};
use crate::nonlinearity::Nonlinearity;

pub const MAGIC: &[u8; 8] = b"NNGPLUT1";
pub const CACHE_DIR_ENV: &str = "NNGP_CACHE_DIR";
const HEADER_LEN: u64 = 8 + 1 + 3 * 8 + 2 * 8;

pub fn write_table<W: Write>(table: &LookupTable, mut out: W) -> Result<()> {
    let spec = table.grid().spec();
    out.write_all(MAGIC)?;
    out.write_all(&[table.nonlinearity().tag()])?;
    for n in [spec.n_g, spec.n_v, spec.n_c] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    for v in [spec.u_max, spec.s_max] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in table.f1d().iter().chain(table.f2d()) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Format {
            kind: "lookup table",
            offset: self.offset,
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take::<8>(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take::<8>(what)?))
    }
}

pub fn read_table<R: Read>(input: R) -> Result<LookupTable> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let bad = |offset, msg: String| Error::Format {
        kind: "lookup table",
        offset,
        msg,
    };

    if &cur.take::<8>("magic")? != MAGIC {
        return Err(bad(0, "bad magic bytes".into()));
    }
    let [tag] = cur.take::<1>("nonlinearity tag")?;
    let phi = Nonlinearity::from_tag(tag)
        .ok_or_else(|| bad(8, format!("unknown nonlinearity tag {tag}")))?;
    let n_g = cur.u64("n_g")? as usize;
    let n_v = cur.u64("n_v")? as usize;
    let n_c = cur.u64("n_c")? as usize;
    let u_max = cur.f64("u_max")?;
    let s_max = cur.f64("s_max")?;
    let grid = build_grid(n_g, n_v, n_c, u_max, s_max)
        .map_err(|e| bad(HEADER_LEN, format!("invalid grid header: {e}")))?;

    let n_cells = n_v
        .checked_mul(n_c)
        .ok_or_else(|| bad(HEADER_LEN, "table size overflows".into()))?;
    let mut f1d = Vec::with_capacity(n_v);
    for _ in 0..n_v {
        f1d.push(cur.f64("diagonal table")?);
    }
    let mut f2d = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        f2d.push(cur.f64("correlation table")?);
    }
    let mut probe = [0u8; 1];
    if cur.inner.read(&mut probe)? != 0 {
        return Err(bad(cur.offset, "trailing bytes after table payload".into()));
    }
    LookupTable::from_parts(grid, phi, f1d, f2d)
}

pub fn save(table: &LookupTable, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    // Write-then-rename so concurrent readers never see a partial file.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    write_table(table, BufWriter::new(File::create(&tmp)?))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LookupTable> {
    read_table(BufReader::new(File::open(path)?))
}

/// `$NNGP_CACHE_DIR`, falling back to `<tmp>/nngp-cache`.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("nngp-cache"))
}

/// File name keyed by the nonlinearity and all five grid parameters. Floats are keyed by
/// their bit patterns so distinct grids never collide.
pub fn cache_file_name(phi: Nonlinearity, spec: &GridSpec) -> String {
    format!(
        "{phi}-g{}-v{}-c{}-u{:016x}-s{:016x}.lut",
        spec.n_g,
        spec.n_v,
        spec.n_c,
        spec.u_max.to_bits(),
        spec.s_max.to_bits()
    )
}

/// Loads the table from `dir` if a matching file exists, otherwise populates and stores it.
pub fn load_or_build_in(dir: &Path, phi: Nonlinearity, spec: &GridSpec) -> Result<LookupTable> {
    let path = dir.join(cache_file_name(phi, spec));
    if path.exists() {
        match load(&path) {
            Ok(table) if table.nonlinearity() == phi && table.grid().spec() == *spec => {
                log::debug!("loaded lookup table from {}", path.display());
                return Ok(table);
            }
            Ok(_) => log::warn!("{} does not match its key; rebuilding", path.display()),
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    log::info!(
        "building {phi} lookup table (n_g={}, n_v={}, n_c={})",
        spec.n_g,
        spec.n_v,
        spec.n_c
    );
    let table = populate(&spec.build()?, phi)?;
    save(&table, &path)?;
    Ok(table)
}

pub fn load_or_build(phi: Nonlinearity, spec: &GridSpec) -> Result<LookupTable> {
    load_or_build_in(&cache_dir(), phi, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_table() -> LookupTable {
        let grid = build_grid(21, 5, 6, 4.0, 3.0).unwrap();
        populate(&grid, Nonlinearity::Tanh).unwrap()
    }

    #[test]
    fn header_layout() {
        let table = small_table();
        let mut buf = Vec::new();
        write_table(&table, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"NNGPLUT1");
        assert_eq!(buf[8], Nonlinearity::Tanh.tag());
        assert_eq!(u64::from_le_bytes(buf[9..17].try_into().unwrap()), 21);
        assert_eq!(u64::from_le_bytes(buf[17..25].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(buf[25..33].try_into().unwrap()), 6);
        assert_eq!(f64::from_le_bytes(buf[33..41].try_into().unwrap()), 4.0);
        assert_eq!(f64::from_le_bytes(buf[41..49].try_into().unwrap()), 3.0);
        assert_eq!(buf.len(), 49 + 8 * (5 + 30));
        assert_eq!(
            f64::from_le_bytes(buf[49 + 8..49 + 16].try_into().unwrap()),
            table.f1d()[1]
        );
        assert_eq!(read_table(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_table(&small_table(), &mut buf).unwrap();

        let err = read_table(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_table(bad_magic.as_slice()).is_err());

        let mut bad_tag = buf.clone();
        bad_tag[8] = 99;
        assert!(read_table(bad_tag.as_slice()).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_table(trailing.as_slice()).is_err());
    }

    #[test]
    fn cache_round_trip_and_keying() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec {
            n_g: 21,
            n_v: 5,
            n_c: 6,
            u_max: 4.0,
            s_max: 3.0,
        };
        let built = load_or_build_in(dir.path(), Nonlinearity::Relu, &spec).unwrap();
        let path = dir.path().join(cache_file_name(Nonlinearity::Relu, &spec));
        assert!(path.exists());
        let again = load_or_build_in(dir.path(), Nonlinearity::Relu, &spec).unwrap();
        assert_eq!(built, again);

        let other = cache_file_name(Nonlinearity::Tanh, &spec);
        assert_ne!(other, cache_file_name(Nonlinearity::Relu, &spec));
        let wider = spec.with_u_max(4.5);
        assert_ne!(
            cache_file_name(Nonlinearity::Relu, &wider),
            cache_file_name(Nonlinearity::Relu, &spec)
        );
    }
}
