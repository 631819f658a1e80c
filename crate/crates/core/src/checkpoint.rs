//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `ICEGCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then the raw
//! little-endian values of every entry listed in the header.

use std::io::{Read, Write};
use std::path::Path;

use iceg_tensor::{AdamState, NamedValues, ParamStore};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{IcegError, Result};
use crate::generator::Generator;
use crate::model::Detector;

pub const MAGIC: &[u8; 8] = b"ICEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adversarial,
}

/// Parameters and buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreSnapshot {
    pub params: Vec<NamedValues<f32>>,
    pub buffers: Vec<NamedValues<f32>>,
}

impl StoreSnapshot {
    pub fn of(store: &ParamStore<f32>) -> Self {
        StoreSnapshot {
            params: store.snapshot_params(),
            buffers: store.snapshot_buffers(),
        }
    }

    pub fn restore(&self, store: &ParamStore<f32>) -> Result<()> {
        store.load(&self.params, &self.buffers)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub seed: u64,
    pub detector: StoreSnapshot,
    pub generator: Option<StoreSnapshot>,
    /// Named optimizer states (e.g. `detector`, `generator`).
    pub optimizers: Vec<(String, AdamState)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    section: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    config: String,
    epoch: usize,
    step: usize,
    phase: Phase,
    seed: u64,
    optimizer_steps: Vec<(String, u64)>,
    entries: Vec<Entry>,
}

struct Writer {
    entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl Writer {
    fn f32s(&mut self, section: &str, nv: &NamedValues<f32>) {
        self.entries.push(Entry {
            section: section.into(),
            name: nv.name.clone(),
            shape: nv.shape.clone(),
            dtype: "f32".into(),
            offset: self.payload.len(),
            len: nv.values.len(),
        });
        self.payload.extend(nv.values.iter().flat_map(|v| v.to_le_bytes()));
    }

    fn f64s(&mut self, section: &str, name: String, values: &[f64]) {
        self.entries.push(Entry {
            section: section.into(),
            name,
            shape: vec![values.len()],
            dtype: "f64".into(),
            offset: self.payload.len(),
            len: values.len(),
        });
        self.payload.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    }
}

fn bad(msg: impl Into<String>) -> IcegError {
    IcegError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            entries: Vec::new(),
            payload: Vec::new(),
        };
        let stores = [("detector", Some(&self.detector)), ("generator", self.generator.as_ref())];
        for (label, snap) in stores {
            let Some(snap) = snap else { continue };
            for p in &snap.params {
                w.f32s(&format!("{label}.param"), p);
            }
            for b in &snap.buffers {
                w.f32s(&format!("{label}.buffer"), b);
            }
        }
        for (name, st) in &self.optimizers {
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                w.f64s(&format!("adam.{name}.m"), i.to_string(), m);
                w.f64s(&format!("adam.{name}.v"), i.to_string(), v);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.to_text(),
            epoch: self.epoch,
            step: self.step,
            phase: self.phase,
            seed: self.seed,
            optimizer_steps: self.optimizers.iter().map(|(n, s)| (n.clone(), s.step)).collect(),
            entries: w.entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut config = Config::default();
        config.apply_text(&header.config)?;
        if config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }

        let mut stores: [StoreSnapshot; 2] = std::array::from_fn(|_| StoreSnapshot {
            params: Vec::new(),
            buffers: Vec::new(),
        });
        let mut has_generator = false;
        let mut moments: Vec<(String, Vec<Vec<f64>>, Vec<Vec<f64>>)> = header
            .optimizer_steps
            .iter()
            .map(|(n, _)| (n.clone(), Vec::new(), Vec::new()))
            .collect();
        for e in &header.entries {
            let width = if e.dtype == "f64" { 8 } else { 4 };
            let raw = payload
                .get(e.offset..e.offset + e.len * width)
                .ok_or_else(|| bad(format!("entry {} points past the payload", e.name)))?;
            if let Some(rest) = e.section.strip_prefix("adam.") {
                let (name, which) = rest.rsplit_once('.').ok_or_else(|| bad("bad optimizer section"))?;
                let slot = moments
                    .iter_mut()
                    .find(|(n, _, _)| n == name)
                    .ok_or_else(|| bad(format!("unknown optimizer {name}")))?;
                let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                match which {
                    "m" => slot.1.push(vals),
                    "v" => slot.2.push(vals),
                    _ => return Err(bad("bad optimizer moment")),
                }
                continue;
            }
            if e.dtype != "f32" {
                return Err(bad(format!("entry {} has dtype {}", e.name, e.dtype)));
            }
            let (label, kind) = e.section.split_once('.').ok_or_else(|| bad("bad section"))?;
            let idx = match label {
                "detector" => 0,
                "generator" => {
                    has_generator = true;
                    1
                }
                _ => return Err(bad(format!("unknown section {}", e.section))),
            };
            let nv = NamedValues {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            };
            match kind {
                "param" => stores[idx].params.push(nv),
                "buffer" => stores[idx].buffers.push(nv),
                _ => return Err(bad(format!("unknown section {}", e.section))),
            }
        }
        let [detector, generator] = stores;
        let optimizers = moments
            .into_iter()
            .zip(&header.optimizer_steps)
            .map(|((n, m, v), (_, step))| (n, AdamState { step: *step, m, v }))
            .collect();
        Ok(Checkpoint {
            config,
            epoch: header.epoch,
            step: header.step,
            phase: header.phase,
            seed: header.seed,
            detector,
            generator: has_generator.then_some(generator),
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| IcegError::io(format!("creating {}", path.display()), e))?;
        f.write_all(&bytes)
            .map_err(|e| IcegError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| IcegError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the detector described by the stored config.
    pub fn detector(&self) -> Result<Detector<f32>> {
        let d = Detector::new(&self.config.model, self.seed);
        self.detector.restore(d.store())?;
        Ok(d)
    }

    pub fn generator(&self) -> Result<Option<Generator<f32>>> {
        self.generator
            .as_ref()
            .map(|snap| {
                let g = Generator::new(&self.config.generator, self.seed);
                snap.restore(g.store())?;
                Ok(g)
            })
            .transpose()
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamState> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}
