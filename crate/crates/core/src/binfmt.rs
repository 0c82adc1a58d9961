//! Little-endian binary layouts shared by network, adapter and cache files.
//!
//! Vector: `u32 len` then `len` × `f64`.
//! Matrix: `u32 rows`, `u32 cols`, then `rows × cols` × `f64` in row-major order.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;

pub fn write_vector<W: Write>(mut w: W, values: &[f64]) -> io::Result<()> {
    let len = u32::try_from(values.len()).map_err(|_| io::Error::other("vector too long"))?;
    w.write_all(&len.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a vector and requires the input to end exactly after it.
pub fn read_vector(bytes: &[u8]) -> io::Result<Vec<f64>> {
    if bytes.len() < 4 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "missing dimension header"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if body.len() != len * 8 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("expected {} payload bytes, found {}", len * 8, body.len())));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> io::Result<()> {
    let rows = u32::try_from(m.nrows()).map_err(|_| io::Error::other("too many rows"))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| io::Error::other("too many columns"))?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.nrows() * m.ncols() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn matrix_to_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + m.len() * 8);
    write_matrix(&mut out, m).expect("writing to a Vec cannot fail");
    out
}

pub fn read_matrix<R: Read>(mut r: R) -> io::Result<DMatrix<f64>> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)?;
    let rows = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != rows * cols * 8 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{rows}x{cols} matrix needs {} bytes, found {}", rows * cols * 8, body.len()),
        ));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_layout_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = matrix_to_bytes(&m);
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2.0);
        assert_eq!(read_matrix(bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn truncated_inputs_fail() {
        let m = DMatrix::from_element(3, 3, 0.5);
        let bytes = matrix_to_bytes(&m);
        assert!(read_matrix(&bytes[..bytes.len() - 3]).is_err());

        let mut v = Vec::new();
        write_vector(&mut v, &[1.0, -2.5]).unwrap();
        assert_eq!(read_vector(&v).unwrap(), vec![1.0, -2.5]);
        assert!(read_vector(&v[..v.len() - 1]).is_err());
        assert!(read_vector(&v[..2]).is_err());
    }
}
