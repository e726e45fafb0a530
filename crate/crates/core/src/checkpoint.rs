//! Named-tensor checkpoint archive, shared by every module that
//! persists parameters.
//!
//! Layout, all integers little-endian: magic `XMCK`, u32 version=1,
//! u32 meta count then (key, value) UTF-8 strings, u8 RNG-state flag
//! with seed/stream/word-position when set, u32 tensor count then per
//! tensor name, u32 rank, dims, and f32 data in row-major order.
//! Strings are u32 length + bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a counter-based RNG, enough to resume its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory checkpoint: ordered metadata, optional RNG state, ordered
/// tensors. Order is preserved on disk, so equal checkpoints serialize
/// to identical bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub rng: Option<RngState>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.meta.push((key, value));
        }
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        let entry = TensorEntry {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(entry.len(), entry.data.len());
        self.tensors.push(entry);
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.push_tensor(
            name,
            vec![m.nrows(), m.ncols()],
            m.iter().map(|v| *v as f32).collect(),
        );
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.push_tensor(name, vec![v.len()], v.iter().map(|x| *x as f32).collect());
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.tensor(name)?;
        if t.dims.len() != 2 {
            return Err(Error::format(format!(
                "tensor {name:?} has rank {}, expected 2",
                t.dims.len()
            )));
        }
        let data: Vec<f64> = t.data.iter().map(|v| *v as f64).collect();
        Array2::from_shape_vec((t.dims[0], t.dims[1]), data)
            .map_err(|_| Error::format(format!("tensor {name:?} data does not fill its shape")))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.tensor(name)?;
        if t.dims.len() != 1 {
            return Err(Error::format(format!(
                "tensor {name:?} has rank {}, expected 1",
                t.dims.len()
            )));
        }
        Ok(Array1::from_vec(t.data.iter().map(|v| *v as f64).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (key, value) in &self.meta {
            write_string(&mut w, key)?;
            write_string(&mut w, value)?;
        }
        match &self.rng {
            Some(state) => {
                w.write_all(&[1u8])?;
                w.write_all(&state.seed.to_le_bytes())?;
                w.write_all(&state.stream.to_le_bytes())?;
                w.write_all(&state.word_pos.to_le_bytes())?;
            }
            None => w.write_all(&[0u8])?,
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for tensor in &self.tensors {
            write_string(&mut w, &tensor.name)?;
            w.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
            for dim in &tensor.dims {
                w.write_all(&(*dim as u32).to_le_bytes())?;
            }
            for value in &tensor.data {
                w.write_all(&value.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let version = read_u32(&mut r, path, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let meta_count = read_u32(&mut r, path, "meta count")?;
        let mut meta = Vec::with_capacity(meta_count as usize);
        for _ in 0..meta_count {
            let key = read_string(&mut r, path)?;
            let value = read_string(&mut r, path)?;
            meta.push((key, value));
        }
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag, path, "rng flag")?;
        let rng = match flag[0] {
            0 => None,
            1 => {
                let mut seed = [0u8; 8];
                read_exact(&mut r, &mut seed, path, "rng seed")?;
                let mut stream = [0u8; 8];
                read_exact(&mut r, &mut stream, path, "rng stream")?;
                let mut pos = [0u8; 16];
                read_exact(&mut r, &mut pos, path, "rng position")?;
                Some(RngState {
                    seed: u64::from_le_bytes(seed),
                    stream: u64::from_le_bytes(stream),
                    word_pos: u128::from_le_bytes(pos),
                })
            }
            other => {
                return Err(Error::format(format!(
                    "{}: bad rng flag {other}",
                    path.display()
                )))
            }
        };
        let tensor_count = read_u32(&mut r, path, "tensor count")?;
        let mut tensors = Vec::with_capacity(tensor_count as usize);
        for _ in 0..tensor_count {
            let name = read_string(&mut r, path)?;
            let rank = read_u32(&mut r, path, "tensor rank")?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(read_u32(&mut r, path, "tensor dim")? as usize);
            }
            let count: usize = dims.iter().product();
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(|_| {
                Error::format(format!("{}: tensor {name:?} truncated", path.display()))
            })?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorEntry { name, dims, data });
        }
        Ok(Checkpoint { meta, rng, tensors })
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = read_u32(r, path, "string length")?;
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, path, "string")?;
    String::from_utf8(buf)
        .map_err(|_| Error::format(format!("{}: non-UTF-8 string", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        Error::format(format!(
            "{}: file ends before {what} is complete",
            path.display()
        ))
    })
}
