//! `KSEMB001` embedding files.
//!
//! Layout: 8-byte magic, little-endian `u32` row count, `u32` dimension, then
//! row-major little-endian `f64` values. A sidecar `<file>.names` holds one
//! `index<TAB>name` line per row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KSEMB001";

pub fn names_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".names");
    PathBuf::from(s)
}

pub fn write_matrix<T: Scalar>(path: &Path, table: &Tensor<T>) -> Result<()> {
    let (rows, dim) = table.dims2();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(rows).map_err(|_| Error::Format("too many rows".into()))?.to_le_bytes())?;
    w.write_all(&u32::try_from(dim).map_err(|_| Error::Format("dimension too large".into()))?.to_le_bytes())?;
    for v in table.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path).map_err(|_| Error::Source { file: path.to_path_buf() })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(rows * dim);
    let mut b8 = [0u8; 8];
    for _ in 0..rows * dim {
        r.read_exact(&mut b8)
            .map_err(|_| Error::Format(format!("{}: truncated data", path.display())))?;
        data.push(T::from_f64_lossy(f64::from_le_bytes(b8)));
    }
    if r.read(&mut b8)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Tensor::matrix(rows, dim, data)
}

/// Writes the table and its `.names` sidecar.
pub fn save_embeddings<T: Scalar>(path: &Path, table: &Tensor<T>, names: &[String]) -> Result<()> {
    if names.len() != table.rows() {
        return Err(Error::Contract(format!(
            "{} names for {} rows",
            names.len(),
            table.rows()
        )));
    }
    write_matrix(path, table)?;
    let mut w = BufWriter::new(File::create(names_path(path))?);
    for (i, n) in names.iter().enumerate() {
        writeln!(w, "{i}\t{n}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings<T: Scalar>(path: &Path) -> Result<(Tensor<T>, Vec<String>)> {
    let table = read_matrix(path)?;
    let np = names_path(path);
    let f = File::open(&np).map_err(|_| Error::Source { file: np.clone() })?;
    let mut names = Vec::with_capacity(table.rows());
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let (idx, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
            file: np.clone(),
            line: ln + 1,
            msg: "expected index<TAB>name".into(),
        })?;
        if idx.parse::<usize>().ok() != Some(names.len()) {
            return Err(Error::Parse { file: np.clone(), line: ln + 1, msg: "indices must be 0..n".into() });
        }
        names.push(name.to_string());
    }
    if names.len() != table.rows() {
        return Err(Error::Format(format!("{}: {} names for {} rows", np.display(), names.len(), table.rows())));
    }
    Ok((table, names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ksemb");
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        save_embeddings(&p, &t, &["a".into(), "b".into()]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"KSEMB001");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(&bytes[16 + 5 * 8..], &6.5f64.to_le_bytes());
        let (back, names) = load_embeddings::<f64>(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"NOTMAGIC\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_matrix::<f64>(&p), Err(Error::Format(_))));
    }
}
