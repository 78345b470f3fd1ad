//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! | field        | encoding                                          |
//! |--------------|---------------------------------------------------|
//! | magic        | `TUTORCKP`                                        |
//! | version      | u32                                               |
//! | config hash  | 32 bytes, SHA-256 of the config text              |
//! | config       | u64 length + UTF-8 TOML                           |
//! | vocabulary   | u64 length + UTF-8, one token per line            |
//! | iteration    | u64                                               |
//! | shape table  | u32 count, then per tensor: name, trainable, dims |
//! | data         | f64 per element, tensors in table order           |

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use tutor_core::agent::Agent;
use tutor_core::autodiff::{ParamStore, Shape, Tensor};
use tutor_core::grammar::Vocabulary;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"TUTORCKP";
pub const VERSION: u32 = 1;

/// Upper bound on any length field, to fail fast on corrupt files.
const MAX_LEN: u64 = 1 << 34;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub iteration: u64,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Binds the stored parameters to a fresh agent, checking every name and shape.
    pub fn agent(&self) -> Result<Agent> {
        Agent::bind(self.config.agent.clone(), self.vocab.len(), &self.store)
            .map_err(|e| CliError::Checkpoint(format!("parameters do not fit the agent config: {e}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let config = self.config.to_toml();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&Sha256::digest(config.as_bytes()))?;
        write_bytes(w, config.as_bytes())?;
        write_bytes(w, self.vocab.to_text().as_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (id, name, t) in self.store.iter() {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&[self.store.is_trainable(id) as u8])?;
            let dims = t.shape();
            w.write_all(&(dims.rank() as u32).to_le_bytes())?;
            for &d in dims.dims() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for (_, _, t) in self.store.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 32];
        read_exact(r, &mut hash)?;
        let config = read_string(r)?;
        if Sha256::digest(config.as_bytes()).as_slice() != hash {
            return Err(bad("config hash mismatch"));
        }
        let config = RunConfig::from_toml(&config).map_err(|e| bad(&format!("stored config: {e}")))?;
        let vocab = Vocabulary::from_text(&read_string(r)?).map_err(|e| bad(&format!("stored vocabulary: {e}")))?;
        let iteration = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_string(r)?;
            let mut flag = [0u8; 1];
            read_exact(r, &mut flag)?;
            let rank = read_u32(r)? as usize;
            if rank > 4 {
                return Err(bad(&format!("tensor `{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, flag[0] != 0, dims));
        }
        let mut store = ParamStore::new();
        for (name, trainable, dims) in table {
            let shape = if dims.is_empty() { Shape::scalar() } else { Shape::new(&dims) };
            let n = shape.numel();
            if n as u64 > MAX_LEN {
                return Err(bad(&format!("tensor `{name}` is too large")));
            }
            let mut buf = vec![0u8; n * 8];
            read_exact(r, &mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Tensor::new(shape, data), trainable);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        let ckpt = Checkpoint {
            config,
            vocab,
            iteration,
            store,
        };
        ckpt.agent()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(file))
            .map_err(|e| match e {
                CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
                other => other,
            })
    }
}

fn bad(msg: &str) -> CliError {
    CliError::Checkpoint(msg.to_string())
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("file is truncated"),
        _ => CliError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(bad("length field out of range"));
    }
    let mut buf = vec![0u8; n as usize];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("text section is not UTF-8"))
}
