//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `MITCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every array as raw little-endian `f64`. The header
//! holds the run config and its hash, the training position, and for each
//! array its name, shape and offset (in values) into the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Mitnet;
use crate::optim::Adam;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"MITCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    /// Epochs completed.
    epoch: usize,
    iteration: usize,
    seed: u64,
    best_psnr: f64,
    adam_step: u64,
    params: Vec<ArrayEntry>,
    /// Adam moments, named `<param>#m` and `<param>#v`.
    moments: Vec<ArrayEntry>,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub iteration: usize,
    pub best_psnr: f64,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, net: &Mitnet, adam: &Adam, epoch: usize, iteration: usize, best_psnr: f64) -> Self {
        let params = net
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), (*p.value).clone()))
            .collect();
        let moments = net
            .store
            .iter()
            .filter_map(|(id, p)| {
                let (m, v) = adam.moments[id.index()].as_ref()?;
                Some((p.name.clone(), m.clone(), v.clone()))
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            epoch,
            iteration,
            best_psnr,
            params,
            adam_step: adam.step,
            moments,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data: Vec<f64> = Vec::new();
        let mut entry = |name: String, t: &Tensor| {
            let s = t.shape();
            let e = ArrayEntry {
                name,
                shape: [s.n, s.c, s.h, s.w],
                offset: data.len(),
            };
            data.extend_from_slice(t.data());
            e
        };
        let params = self.params.iter().map(|(n, t)| entry(n.clone(), t)).collect();
        let mut moments = Vec::new();
        for (n, m, v) in &self.moments {
            moments.push(entry(format!("{n}#m"), m));
            moments.push(entry(format!("{n}#v"), v));
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            iteration: self.iteration,
            seed: self.config.train.seed,
            best_psnr: self.best_psnr,
            adam_step: self.adam_step,
            params,
            moments,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(16 + json.len() + 8 * data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }
        let raw = &bytes[16 + hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let read = |e: &ArrayEntry| -> Result<Tensor> {
            let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
            let slice = values
                .get(e.offset..e.offset + shape.numel())
                .ok_or_else(|| bad(&format!("array {} runs past the data section", e.name)))?;
            Tensor::from_vec(shape, slice.to_vec())
        };
        let params = header
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), read(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut moments = Vec::new();
        for pair in header.moments.chunks(2) {
            let [m, v] = pair else {
                return Err(bad("unpaired optimizer moment"));
            };
            let name = m.name.strip_suffix("#m").ok_or_else(|| bad("malformed moment name"))?;
            moments.push((name.to_string(), read(m)?, read(v)?));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            iteration: header.iteration,
            best_psnr: header.best_psnr,
            params,
            adam_step: header.adam_step,
            moments,
        })
    }

    /// Build the network this checkpoint describes and load its weights.
    pub fn restore_model(&self) -> Result<Mitnet> {
        let mut net = Mitnet::new(self.config.model.clone(), self.config.train.seed)?;
        self.load_weights_into(&mut net)?;
        Ok(net)
    }

    /// Check that `net` was built from the same model config, then copy the
    /// weights. Training-only parameters missing from the checkpoint are
    /// left at their initial values.
    pub fn load_weights_into(&self, net: &mut Mitnet) -> Result<()> {
        if net.cfg != self.config.model {
            return Err(Error::Checkpoint(format!(
                "model config differs from the checkpoint's: checkpoint has {:?}, requested {:?}",
                self.config.model, net.cfg
            )));
        }
        for (name, t) in &self.params {
            net.store.set(name, t.clone())?;
        }
        let missing: Vec<&str> = net
            .store
            .iter()
            .filter(|(_, p)| !p.training_only && !self.params.iter().any(|(n, _)| *n == p.name))
            .map(|(_, p)| p.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameters: {}", missing.join(", "))));
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, net: &Mitnet) -> Result<Adam> {
        let mut adam = Adam::new(self.config.optim.clone(), &net.store);
        adam.step = self.adam_step;
        for (name, m, v) in &self.moments {
            let id = net
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            adam.moments[id.index()] = Some((m.clone(), v.clone()));
        }
        Ok(adam)
    }
}
