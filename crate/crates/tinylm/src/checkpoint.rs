//! Checkpoint store.
//!
//! File layout: the magic line `TINYLM1`, one JSON header line carrying the
//! config, step, rng state, parameter count and digest, then the parameters as
//! raw little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &str = "TINYLM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: Vec<f64>,
    pub config: ModelConfig,
    pub rng_state: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    rng_state: u64,
    num_params: usize,
    digest: String,
}

impl Checkpoint {
    /// Fresh initialisation at step 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(config.clone())?;
        Ok(Self { step: 0, params: model.init_params(seed), config, rng_state: seed })
    }

    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.config.clone())?;
        if model.num_params() != self.params.len() {
            return Err(Error::ParamLength { got: self.params.len(), expected: model.num_params() });
        }
        Ok(model)
    }

    /// SHA-256 over the step index and the parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.step as u64).to_le_bytes());
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            rng_state: self.rng_state,
            num_params: self.params.len(),
            digest: self.digest(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Format(format!("bad magic in {}", path.display())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != header.num_params * 8 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                header.num_params * 8,
                bytes.len()
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let ckpt = Self { step: header.step, params, config: header.config, rng_state: header.rng_state };
        if ckpt.digest() != header.digest {
            return Err(Error::Format(format!("digest mismatch in {}", path.display())));
        }
        ckpt.model()?;
        Ok(ckpt)
    }
}
