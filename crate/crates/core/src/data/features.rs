//! Binary feature file: little-endian, magic `XMRF`, version 1.
//!
//! Layout: `b"XMRF"`, u32 version, u32 n, u32 k, u32 d_raw, then
//! `n * k * d_raw` f32 values in row-major record order. The file stores
//! no ids; the reader labels records by decimal index and callers join
//! against a manifest when real ids matter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::data::RegionSet;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"XMRF";
pub const FEATURE_VERSION: u32 = 1;

/// Streaming reader over the records of a feature file.
pub struct FeatureReader {
    reader: BufReader<File>,
    n: u32,
    k: u32,
    d_raw: u32,
    next: u32,
}

impl FeatureReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact_or_format(&mut reader, &mut magic, path, "magic")?;
        if magic != FEATURE_MAGIC {
            return Err(Error::format(format!(
                "{}: bad magic {:?}, not a feature file",
                path.display(),
                magic
            )));
        }
        let version = read_u32(&mut reader, path, "version")?;
        if version != FEATURE_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported feature file version {version}",
                path.display()
            )));
        }
        let n = read_u32(&mut reader, path, "record count")?;
        let k = read_u32(&mut reader, path, "regions per record")?;
        let d_raw = read_u32(&mut reader, path, "feature dimension")?;
        if k == 0 || d_raw == 0 {
            return Err(Error::format(format!(
                "{}: degenerate header (k={k}, d_raw={d_raw})",
                path.display()
            )));
        }
        Ok(FeatureReader {
            reader,
            n,
            k,
            d_raw,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw as usize
    }

    fn read_record(&mut self) -> Result<RegionSet> {
        let idx = self.next;
        let count = self.k as usize * self.d_raw as usize;
        let mut buf = vec![0u8; count * 4];
        self.reader.read_exact(&mut buf).map_err(|_| {
            Error::format(format!(
                "feature file truncated in record {idx} of {}",
                self.n
            ))
        })?;
        let mut values = Vec::with_capacity(count);
        for chunk in buf.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "feature file record {idx}: non-finite value at flat offset {pos}"
            )));
        }
        let matrix = Array2::from_shape_vec((self.k as usize, self.d_raw as usize), values)
            .expect("buffer length matches header dims");
        self.next += 1;
        RegionSet::new(idx.to_string(), matrix)
    }
}

impl Iterator for FeatureReader {
    type Item = Result<RegionSet>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.n {
            return None;
        }
        Some(self.read_record())
    }
}

/// Load every record of a feature file into memory.
pub fn load_features(path: &Path) -> Result<Vec<RegionSet>> {
    FeatureReader::open(path)?.collect()
}

/// Write region sets as one feature file. All sets must agree on k and
/// d_raw; record order follows the slice. Values round-trip bit for bit.
pub fn write_features(path: &Path, sets: &[RegionSet]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::config("refusing to write an empty feature file"));
    }
    let k = sets[0].k();
    let d_raw = sets[0].d_raw();
    for set in sets {
        if set.k() != k || set.d_raw() != d_raw {
            return Err(Error::config(format!(
                "region set {} has shape {}x{}, expected {}x{}",
                set.image_id(),
                set.k(),
                set.d_raw(),
                k,
                d_raw
            )));
        }
    }
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&FEATURE_MAGIC)?;
    writer.write_all(&FEATURE_VERSION.to_le_bytes())?;
    writer.write_all(&(sets.len() as u32).to_le_bytes())?;
    writer.write_all(&(k as u32).to_le_bytes())?;
    writer.write_all(&(d_raw as u32).to_le_bytes())?;
    for set in sets {
        for value in set.features().iter() {
            writer.write_all(&value.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_u32(reader: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or_format(reader, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_or_format(
    reader: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<()> {
    reader.read_exact(buf).map_err(|_| {
        Error::format(format!(
            "{}: file ends before {what} is complete",
            path.display()
        ))
    })
}
