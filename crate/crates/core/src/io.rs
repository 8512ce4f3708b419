//! File formats. Complex matrices are stored one matrix row per CSV line
//! with paired `cJ_re`, `cJ_im` columns; binary activity maps use one `cJ`
//! column per time index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::ResultExt;
use crate::scenario::ActivationMatrix;
use crate::{CMatrix, Error, Result, C64};

fn annotate<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.context_with(|| path.display().to_string())
}

pub fn write_complex_csv(path: &Path, m: &CMatrix) -> Result<()> {
    annotate(write_complex_inner(path, m), path)
}

fn write_complex_inner(path: &Path, m: &CMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..m.ncols())
        .flat_map(|j| [format!("c{j}_re"), format!("c{j}_im")])
        .collect();
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let rec: Vec<String> = (0..m.ncols())
            .flat_map(|j| [m[(i, j)].re.to_string(), m[(i, j)].im.to_string()])
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_complex_csv(path: &Path) -> Result<CMatrix> {
    annotate(read_complex_inner(path), path)
}

fn read_complex_inner(path: &Path) -> Result<CMatrix> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width % 2 != 0 {
        return Err(Error::Format(format!("{width} columns cannot hold re/im pairs")));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            values.push(parse_f64(field)?);
        }
        rows += 1;
    }
    let cols = width / 2;
    Ok(CMatrix::from_fn(rows, cols, |i, j| {
        let base = i * width + 2 * j;
        C64::new(values[base], values[base + 1])
    }))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("'{s}' is not a number")))
}

pub fn write_states_csv(path: &Path, s: &ActivationMatrix) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record((0..s.horizon()).map(|t| format!("c{t}")))?;
        for row in s.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    };
    annotate(run(), path)
}

pub fn read_states_csv(path: &Path) -> Result<ActivationMatrix> {
    let run = || -> Result<ActivationMatrix> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let row = rec?
                .iter()
                .map(|f| match f.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(Error::Format(format!("state '{other}' is not 0 or 1"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            rows.push(row);
        }
        ActivationMatrix::from_rows(rows)
    };
    annotate(run(), path)
}

/// Writes serializable records with a header derived from the field names.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    };
    annotate(run(), path)
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let run = || -> Result<Vec<T>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
    };
    annotate(run(), path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    };
    annotate(run(), path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let run = || -> Result<T> { Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?) };
    annotate(run(), path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let run = || -> Result<String> {
        let mut hasher = Sha256::new();
        let mut f = File::open(path)?;
        let mut buf = [0u8; 1 << 16];
        loop {
            let k = f.read(&mut buf)?;
            if k == 0 {
                break;
            }
            hasher.update(&buf[..k]);
        }
        Ok(hex::encode(hasher.finalize()))
    };
    annotate(run(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_complex_matrix;
    use crate::rng_from_seed;

    #[test]
    fn complex_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rng = rng_from_seed(1);
        let m = random_complex_matrix(3, 5, &mut rng) * C64::from(1e-7);
        write_complex_csv(&path, &m).unwrap();
        assert_eq!(read_complex_csv(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("c0_re,c0_im,c1_re"));
    }

    #[test]
    fn states_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = ActivationMatrix::from_rows(vec![vec![0, 1, 1], vec![1, 0, 0]]).unwrap();
        write_states_csv(&path, &s).unwrap();
        assert_eq!(read_states_csv(&path).unwrap(), s);
    }

    #[test]
    fn bad_cells_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "c0_re,c0_im\n1.0,x\n").unwrap();
        let err = read_complex_csv(&path).unwrap_err();
        assert!(matches!(err.root(), Error::Format(_)));
        assert!(err.to_string().contains("bad.csv"));
        std::fs::write(&path, "c0,c1\n0,2\n").unwrap();
        assert!(matches!(read_states_csv(&path).unwrap_err().root(), Error::Format(_)));
    }

    #[test]
    fn digest_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(sha256_file(&path).unwrap(), sha256_hex(b"abc"));
    }
}
