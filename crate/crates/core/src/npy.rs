//! Minimal NPY v1.0 reader/writer for 2-D float matrices.
//!
//! Supports exactly what the embedding store needs: little-endian `<f4` and
//! `<f8` payloads, C order, 2-D shape. Anything else is rejected up front.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Element type of an NPY payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    fn item_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded 2-D array together with its on-disk element type.
#[derive(Debug, Clone)]
pub struct NpyMatrix {
    pub data: Array2<f64>,
    pub dtype: Dtype,
}

/// Reads a 2-D float NPY v1.0 file.
pub fn read_matrix(path: &Path) -> Result<NpyMatrix> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|_| truncated(path))?;
    if &magic[..6] != MAGIC {
        return Err(Error::Format(format!(
            "{}: not an NPY file (bad magic)",
            path.display()
        )));
    }
    if magic[6] != 1 || magic[7] != 0 {
        return Err(Error::Format(format!(
            "{}: unsupported NPY version {}.{} (expected 1.0)",
            path.display(),
            magic[6],
            magic[7]
        )));
    }

    let mut len_bytes = [0u8; 2];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| truncated(path))?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;

    let mut header = vec![0u8; header_len];
    reader.read_exact(&mut header).map_err(|_| truncated(path))?;
    let header = String::from_utf8_lossy(&header);
    let (dtype, fortran, shape) = parse_header(&header, path)?;

    if fortran {
        return Err(Error::Format(format!(
            "{}: Fortran-order arrays are not supported",
            path.display()
        )));
    }
    let (rows, cols) = shape;
    if cols == 0 {
        return Err(Error::Format(format!(
            "{}: array must have at least one column",
            path.display()
        )));
    }

    let n_items = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{}: shape overflow", path.display())))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let expected = n_items * dtype.item_size();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, expected {} for shape ({}, {})",
            path.display(),
            payload.len(),
            expected,
            rows,
            cols
        )));
    }

    let mut values = Vec::with_capacity(n_items);
    match dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                values.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }

    let data = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    Ok(NpyMatrix { data, dtype })
}

/// Writes a matrix as `<f4`, narrowing from the in-memory f64 representation.
///
/// Values that are not finite after the cast are rejected so that a written
/// file always loads back cleanly.
pub fn write_matrix_f32(path: &Path, data: &Array2<f64>) -> Result<()> {
    for ((r, c), &v) in data.indexed_iter() {
        if !(v as f32).is_finite() {
            return Err(Error::Data(format!(
                "value at row {r}, column {c} is not representable as a finite 32-bit float"
            )));
        }
    }
    let mut writer = open_writer(path)?;
    write_header(&mut writer, Dtype::F32, data.nrows(), data.ncols())?;
    for &v in data.iter() {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a matrix as `<f8` without narrowing.
pub fn write_matrix_f64(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut writer = open_writer(path)?;
    write_header(&mut writer, Dtype::F64, data.nrows(), data.ncols())?;
    for &v in data.iter() {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_header<W: Write>(writer: &mut W, dtype: Dtype, rows: usize, cols: usize) -> Result<()> {
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}), }}",
        dtype.descr(),
        rows,
        cols
    );
    // Total header size (magic + version + length field + dict + padding + \n)
    // is padded to a multiple of 64 bytes, as numpy does.
    let unpadded = 10 + dict.len() + 1;
    let padded = unpadded.div_ceil(64) * 64;
    let header_len = padded - 10;
    if header_len > u16::MAX as usize {
        return Err(Error::Format("header too large for NPY v1.0".into()));
    }

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header_len as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    for _ in 0..(header_len - dict.len() - 1) {
        writer.write_all(b" ")?;
    }
    writer.write_all(b"\n")?;
    Ok(())
}

fn truncated(path: &Path) -> Error {
    Error::Format(format!("{}: truncated NPY file", path.display()))
}

fn parse_header(header: &str, path: &Path) -> Result<(Dtype, bool, (usize, usize))> {
    let descr = extract_str_value(header, "descr")
        .ok_or_else(|| bad_header(path, "missing 'descr'"))?;
    let dtype = match descr.as_str() {
        "<f4" => Dtype::F32,
        "<f8" => Dtype::F64,
        other => {
            return Err(bad_header(
                path,
                &format!("unsupported dtype '{other}' (expected '<f4' or '<f8')"),
            ))
        }
    };

    let fortran_text = extract_raw_value(header, "fortran_order")
        .ok_or_else(|| bad_header(path, "missing 'fortran_order'"))?;
    let fortran = match fortran_text.trim() {
        "False" => false,
        "True" => true,
        other => return Err(bad_header(path, &format!("bad fortran_order '{other}'"))),
    };

    let shape_text = extract_raw_value(header, "shape")
        .ok_or_else(|| bad_header(path, "missing 'shape'"))?;
    let inner = shape_text
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| bad_header(path, "shape is not a tuple"))?;
    let dims: Vec<usize> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| bad_header(path, &format!("bad shape entry '{s}'")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad_header(
            path,
            &format!("expected a 2-D array, got {} dimension(s)", dims.len()),
        ));
    }
    Ok((dtype, fortran, (dims[0], dims[1])))
}

fn bad_header(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: malformed NPY header: {}", path.display(), what))
}

/// Extracts the quoted string value for `key` from the header dict.
fn extract_str_value(header: &str, key: &str) -> Option<String> {
    let raw = extract_raw_value(header, key)?;
    let raw = raw.trim();
    let inner = raw
        .strip_prefix('\'')
        .and_then(|s| s.strip_suffix('\''))
        .or_else(|| raw.strip_prefix('"').and_then(|s| s.strip_suffix('"')))?;
    Some(inner.to_string())
}

/// Extracts the raw text of the value for `key`, up to the next top-level comma.
fn extract_raw_value(header: &str, key: &str) -> Option<String> {
    let quoted = format!("'{key}'");
    let start = header.find(&quoted)?;
    let after_key = &header[start + quoted.len()..];
    let colon = after_key.find(':')?;
    let value = &after_key[colon + 1..];

    let mut depth = 0usize;
    let mut end = value.len();
    for (i, ch) in value.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' if depth > 0 => depth -= 1,
            ',' if depth == 0 => {
                end = i;
                break;
            }
            '}' if depth == 0 => {
                end = i;
                break;
            }
            _ => {}
        }
    }
    Some(value[..end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn f32_round_trip_preserves_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let data = array![[1.0f64, 2.5, -3.25], [0.0, f64::from(1e-3f32), 4.0]];
        write_matrix_f32(&path, &data).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.dtype, Dtype::F32);
        assert_eq!(back.data, data);
    }

    #[test]
    fn f64_payloads_are_read_untouched() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let data = array![[std::f64::consts::PI, 1.0 / 3.0]];
        write_matrix_f64(&path, &data).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.dtype, Dtype::F64);
        assert_eq!(back.data, data);
    }

    #[test]
    fn header_is_well_formed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write_matrix_f32(&path, &array![[1.0f64, 2.0]]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        assert_eq!(&bytes[6..8], &[1, 0]);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let header = String::from_utf8_lossy(&bytes[10..10 + header_len]).into_owned();
        assert!(header.contains("'descr': '<f4'"));
        assert!(header.contains("'fortran_order': False"));
        assert!(header.contains("'shape': (1, 2)"));
        assert!(header.ends_with('\n'));
    }

    #[test]
    fn empty_matrix_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let data = Array2::<f64>::zeros((0, 3));
        write_matrix_f32(&path, &data).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.data.dim(), (0, 3));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        std::fs::write(&path, b"not an npy file at all").unwrap();
        match read_matrix(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn fortran_order_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let dict = "{'descr': '<f4', 'fortran_order': True, 'shape': (0, 1), }";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        let header_len = 64 - 10;
        bytes.extend_from_slice(&(header_len as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.resize(10 + header_len - 1, b' ');
        bytes.push(b'\n');
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn one_dimensional_shape_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (3,), }";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        let header_len = 64 - 10;
        bytes.extend_from_slice(&(header_len as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.resize(10 + header_len - 1, b' ');
        bytes.push(b'\n');
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write_matrix_f32(&path, &array![[1.0f64, 2.0], [3.0, 4.0]]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn values_overflowing_f32_are_rejected_on_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let data = array![[1e300f64, 0.0]];
        assert!(matches!(
            write_matrix_f32(&path, &data),
            Err(Error::Data(_))
        ));
    }
}
