//! Checkpoint container.
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `SBDMCKPT`                          |
//! | 4     | u32 version                               |
//! | 8     | u64 length `n` of the JSON metadata block |
//! | n     | UTF-8 JSON metadata                       |
//! | rest  | little-endian f64 tensor payloads         |
//!
//! The metadata carries the training configuration, mask, counters,
//! scheduler and RNG state, the epoch log, and a tensor directory of
//! `{name, shape, offset}` entries. Tensor names are prefixed with their
//! section: `param/`, `ema/`, `best/`, `adam_m/`, `adam_v/`.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{EpochRecord, Plateau, TrainConfig, Trainer};
use crate::bridge::BridgeSchedule;
use crate::cosunet::CoSUNet;
use crate::diffcore::{AdamW, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sampler::Model;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SBDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&str; 5] = ["param", "ema", "best", "adam_m", "adam_v"];

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = |msg: &str| Error::Checkpoint {
            name: "rng".into(),
            msg: msg.into(),
        };
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse()
                .map_err(|_| bad("word position is not an integer"))?,
        );
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    /// Validity mask as a string of `0`/`1`.
    mask: String,
    epoch: usize,
    step: u64,
    lr: f64,
    plateau: Plateau,
    best_val: Option<f64>,
    best_epoch: usize,
    rng: RngState,
    log: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub mask: Vec<bool>,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub plateau: Plateau,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub rng: RngState,
    pub log: Vec<EpochRecord>,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub best: ParamSet,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

/// Checks `got` against the expected tensor set and reports the first
/// offending tensor by name.
pub fn check_layout(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    for (_, name, t) in expected.iter() {
        match got.by_name(name) {
            None => {
                return Err(Error::Checkpoint {
                    name: name.into(),
                    msg: "missing from checkpoint".into(),
                })
            }
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::Checkpoint {
                    name: name.into(),
                    msg: format!("shape {:?} does not match expected {:?}", g.shape(), t.shape()),
                })
            }
            _ => {}
        }
    }
    if let Some(extra) = got.names().find(|n| expected.id(n).is_none()) {
        return Err(Error::Checkpoint {
            name: extra.into(),
            msg: "not part of the configured model".into(),
        });
    }
    for (a, b) in expected.names().zip(got.names()) {
        if a != b {
            return Err(Error::Checkpoint {
                name: b.into(),
                msg: format!("out of order, expected `{a}`"),
            });
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            mask: t.mask.clone(),
            epoch: t.epoch,
            step: t.optim.step,
            lr: t.lr,
            plateau: t.plateau.clone(),
            best_val: t.best_val,
            best_epoch: t.best_epoch,
            rng: RngState::capture(&t.rng),
            log: t.log.clone(),
            params: t.params.clone(),
            ema: t.ema.clone(),
            best: t.best.clone(),
            adam_m: t.optim.m.clone(),
            adam_v: t.optim.v.clone(),
        }
    }

    pub fn network(&self) -> Result<CoSUNet> {
        CoSUNet::new(self.config.model.clone(), &self.mask, self.config.horizon)
    }

    /// Verifies every tensor section against the configured network.
    pub fn check(&self) -> Result<()> {
        let expected = self.network()?.init_params(0);
        self.check_against(&expected)
    }

    pub fn check_against(&self, expected: &ParamSet) -> Result<()> {
        for p in [&self.params, &self.ema, &self.best] {
            check_layout(expected, p)?;
        }
        for moments in [&self.adam_m, &self.adam_v] {
            if moments.len() != expected.len() {
                return Err(Error::Checkpoint {
                    name: "adam".into(),
                    msg: format!("{} moment tensors for {} parameters", moments.len(), expected.len()),
                });
            }
            for (i, m) in moments.iter().enumerate() {
                if m.len() != expected.get(ParamId(i)).len() {
                    return Err(Error::Checkpoint {
                        name: expected.name(ParamId(i)).into(),
                        msg: "optimizer moment size mismatch".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Rebuilds the full training state for resumption.
    pub fn resume(&self) -> Result<Trainer> {
        self.config.validate()?;
        self.check()?;
        let net = self.network()?;
        let mut optim = AdamW::new(self.config.adamw(self.lr), &self.params);
        optim.step = self.step;
        optim.m = self.adam_m.clone();
        optim.v = self.adam_v.clone();
        Ok(Trainer {
            config: self.config.clone(),
            net,
            mask: self.mask.clone(),
            sched: BridgeSchedule::new(self.config.horizon)?,
            params: self.params.clone(),
            ema: self.ema.clone(),
            best: self.best.clone(),
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            optim,
            lr: self.lr,
            plateau: self.plateau.clone(),
            rng: self.rng.restore()?,
            epoch: self.epoch,
            log: self.log.clone(),
            workers: 1,
        })
    }

    /// The served model (EMA weights of the best validation epoch).
    pub fn model(&self) -> Result<Model> {
        self.check()?;
        Ok(Model {
            net: self.network()?,
            params: self.best.clone(),
            with_dxt: self.config.with_dxt,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len() as u64,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (section, set) in [("param", &self.params), ("ema", &self.ema), ("best", &self.best)] {
            for (_, name, t) in set.iter() {
                push(format!("{section}/{name}"), t.shape().to_vec(), t.data());
            }
        }
        for (section, moments) in [("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (i, m) in moments.iter().enumerate() {
                let shape = self.params.get(ParamId(i)).shape().to_vec();
                push(format!("{section}/{}", self.params.name(ParamId(i))), shape, m);
            }
        }
        let meta = Meta {
            config: self.config.clone(),
            mask: self.mask.iter().map(|&m| if m { '1' } else { '0' }).collect(),
            epoch: self.epoch,
            step: self.step,
            lr: self.lr,
            plateau: self.plateau.clone(),
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            rng: self.rng.clone(),
            log: self.log.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint {
            name: "metadata".into(),
            msg: e.to_string(),
        })?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "not a checkpoint (bad magic or truncated header)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(8, format!("unsupported checkpoint version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes
            .get(20..20usize.saturating_add(n))
            .ok_or_else(|| fmt(12, format!("metadata length {n} exceeds file size")))?;
        let meta: Meta = serde_json::from_slice(json).map_err(|e| Error::Schema {
            field: "checkpoint metadata".into(),
            msg: e.to_string(),
        })?;
        let payload = &bytes[20 + n..];
        let base = 20 + n;

        let mut sections: Vec<ParamSet> = (0..SECTIONS.len()).map(|_| ParamSet::new()).collect();
        let mut expected_offset = 0u64;
        for e in &meta.tensors {
            let (section, name) = e.name.split_once('/').ok_or_else(|| Error::Checkpoint {
                name: e.name.clone(),
                msg: "tensor name lacks a section prefix".into(),
            })?;
            let k = SECTIONS
                .iter()
                .position(|s| *s == section)
                .ok_or_else(|| Error::Checkpoint {
                    name: e.name.clone(),
                    msg: "unknown section".into(),
                })?;
            if e.offset != expected_offset {
                return Err(fmt(
                    base + e.offset as usize,
                    format!("tensor `{}` is not contiguous", e.name),
                ));
            }
            let len: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * len;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| fmt(bytes.len(), format!("payload truncated inside `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if sections[k].id(name).is_some() {
                return Err(Error::Checkpoint {
                    name: e.name.clone(),
                    msg: "duplicate tensor".into(),
                });
            }
            sections[k].insert(name, Tensor::new(e.shape.clone(), data)?);
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(fmt(
                base + expected_offset as usize,
                "trailing bytes after the last tensor".into(),
            ));
        }
        let mut it = sections.into_iter();
        let (params, ema, best) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let moments = |set: ParamSet| -> Vec<Vec<f64>> { set.iter().map(|(_, _, t)| t.data().to_vec()).collect() };
        let (adam_m, adam_v) = (moments(it.next().unwrap()), moments(it.next().unwrap()));
        let mask: Vec<bool> = meta
            .mask
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Schema {
                    field: "mask".into(),
                    msg: "must consist of 0 and 1".into(),
                }),
            })
            .collect::<Result<_>>()?;
        let ck = Checkpoint {
            config: meta.config,
            mask,
            epoch: meta.epoch,
            step: meta.step,
            lr: meta.lr,
            plateau: meta.plateau,
            best_val: meta.best_val,
            best_epoch: meta.best_epoch,
            rng: meta.rng,
            log: meta.log,
            params,
            ema,
            best,
            adam_m,
            adam_v,
        };
        ck.check()?;
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, split_cohort, SyntheticConfig};
    use crate::cosunet::CoSUNetConfig;

    fn setup() -> (crate::cohort::Splits, TrainConfig) {
        let c = generate_synthetic_cohort(&SyntheticConfig {
            level: 1,
            n_subjects: 10,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 5,
            horizon: 10,
            with_dxt: true,
            model: CoSUNetConfig {
                base_channels: 4,
                level_top: 1,
                depth: 1,
                channel_mults: vec![1, 2],
                embed_dim: 8,
                heads: 2,
                positional_embedding: true,
            },
            ..Default::default()
        };
        (split_cohort(&c, [0.6, 0.2, 0.2], 1).unwrap(), cfg)
    }

    #[test]
    fn bytes_round_trip_and_resume_matches_uninterrupted_run() {
        let (s, cfg) = setup();
        let mut full = Trainer::new(cfg.clone(), &s.train.mask).unwrap();
        full.train(&s.train, &s.val, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(cfg, &s.train.mask).unwrap();
        first.run_epoch(&s.train, &s.val).unwrap();
        first.run_epoch(&s.train, &s.val).unwrap();
        let ck = Checkpoint::from_trainer(&first);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_ne!(back.ema, back.params);

        let mut resumed = back.resume().unwrap();
        resumed.train(&s.train, &s.val, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.log, full.log);
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let (s, cfg) = setup();
        let t = Trainer::new(cfg.clone(), &s.train.mask).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let wider = CoSUNetConfig {
            base_channels: 8,
            ..cfg.model.clone()
        };
        let other = CoSUNet::new(wider, &s.train.mask, 10).unwrap().init_params(0);
        match ck.check_against(&other) {
            Err(Error::Checkpoint { name, .. }) => assert_eq!(name, "in.conv.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (s, cfg) = setup();
        let bytes = Checkpoint::from_trainer(&Trainer::new(cfg, &s.train.mask).unwrap())
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut extra = bytes;
        extra.push(1);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng as _;
        let mut r = crate::rng::stream(4, "x");
        let _: [u64; 3] = r.random();
        let s = RngState::capture(&r);
        let mut back = s.restore().unwrap();
        assert_eq!(r.random::<u64>(), back.random::<u64>());
    }
}
