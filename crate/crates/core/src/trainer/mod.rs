//! Training loop: uniform bridge-step sampling, squared-error regression onto
//! `x_β − Δτ`, AdamW, EMA weights, plateau learning-rate decay and
//! best-on-validation selection.

mod checkpoint;

pub use checkpoint::{check_layout, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeSchedule;
use crate::cohort::{Cohort, TrainingTuple};
use crate::cosunet::{CoSUNet, CoSUNetConfig};
use crate::diffcore::{ema_update, AdamW, AdamWConfig, Gradients, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::sampler::{Denoiser, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Bridge horizon `B`.
    pub horizon: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Condition on the follow-up diagnosis of each visit.
    pub with_dxt: bool,
    pub model: CoSUNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            horizon: 100,
            lr: 1e-3,
            weight_decay: 1e-2,
            plateau_patience: 20,
            plateau_factor: 0.5,
            ema_decay: 0.995,
            seed: 0,
            with_dxt: false,
            model: CoSUNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::range("batch_size", 0, ">= 1"));
        }
        if self.horizon < 2 {
            return Err(Error::range("horizon", self.horizon, ">= 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::range("lr", self.lr, "> 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::range("weight_decay", self.weight_decay, ">= 0"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::range("plateau_patience", 0, ">= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::range("plateau_factor", self.plateau_factor, "(0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::range("ema_decay", self.ema_decay, "[0, 1)"));
        }
        self.model.validate()
    }

    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// A training tuple with its bridge step and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub tuple: TrainingTuple,
    pub beta: usize,
    pub eps: Vec<f64>,
}

/// Draws `β ~ U{0, …, B}` and standard-normal noise for each tuple.
pub fn draw_noise(tuples: Vec<TrainingTuple>, horizon: usize, rng: &mut Rng) -> Vec<Draw> {
    tuples
        .into_iter()
        .map(|tuple| {
            let beta = rng.random_range(0..=horizon);
            let eps = (0..tuple.tau0.len()).map(|_| StandardNormal.sample(rng)).collect();
            Draw { tuple, beta, eps }
        })
        .collect()
}

fn bridge_pair(sched: &BridgeSchedule, d: &Draw, mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = &d.tuple;
    let x = sched.forward_sample(&t.tau0, &t.delta, d.beta, &d.eps, mask)?;
    let target = sched.training_target(&t.tau0, &t.delta, d.beta, &d.eps, mask)?;
    Ok((x, target))
}

fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    pred.iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, t), _)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Mean masked squared error of any denoiser on a set of draws, without
/// gradients.
pub fn batch_loss(den: &dyn Denoiser, sched: &BridgeSchedule, draws: &[Draw], mask: &[bool]) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for d in draws {
        let (x, target) = bridge_pair(sched, d, mask)?;
        let f = den.denoise(&x, d.beta, d.tuple.t_months, &d.tuple.cond)?;
        total += masked_mse(&f, &target, mask);
    }
    Ok(total / draws.len() as f64)
}

fn sample_grad(
    net: &CoSUNet,
    params: &ParamSet,
    sched: &BridgeSchedule,
    d: &Draw,
    mask: &[bool],
) -> Result<(f64, Gradients)> {
    let (x, target) = bridge_pair(sched, d, mask)?;
    let v = x.len();
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_rows(v, 1, x)?);
    let y = net.forward(&mut g, params, xv, d.beta, d.tuple.t_months, &d.tuple.cond)?;
    let t = g.constant(Tensor::from_rows(v, 1, target)?);
    let w = g.constant(Tensor::from_rows(v, 1, weights)?);
    let r = g.sub(y, t)?;
    let sq = g.mul(r, r)?;
    let wsq = g.mul(sq, w)?;
    let loss = g.sum(wsq);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at step {} for subject {} visit {}",
            d.beta, d.tuple.subject, d.tuple.visit
        )));
    }
    Ok((value, g.backward(loss)?))
}

/// Computes the batch loss and leaves its gradient in `params`' accumulators.
/// Samples may be spread over `workers` threads; gradients are reduced in
/// sample order, so the result does not depend on the worker count.
pub fn train_step(
    net: &CoSUNet,
    params: &mut ParamSet,
    sched: &BridgeSchedule,
    draws: &[Draw],
    mask: &[bool],
    workers: usize,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Config("train_step needs a non-empty batch".into()));
    }
    params.zero_grads();
    let results: Vec<Result<(f64, Gradients)>> = {
        let shared: &ParamSet = params;
        if workers <= 1 || draws.len() == 1 {
            draws.iter().map(|d| sample_grad(net, shared, sched, d, mask)).collect()
        } else {
            let chunk = draws.len().div_ceil(workers);
            std::thread::scope(|s| {
                let handles: Vec<_> = draws
                    .chunks(chunk)
                    .map(|part| {
                        s.spawn(move || {
                            part.iter()
                                .map(|d| sample_grad(net, shared, sched, d, mask))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("training worker panicked"))
                    .collect()
            })
        }
    };
    let w = 1.0 / draws.len() as f64;
    let mut loss = 0.0;
    for r in results {
        let (l, grads) = r?;
        loss += w * l;
        params.accumulate(&grads, w);
    }
    Ok(loss)
}

/// Reduce-on-plateau schedule on the validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    /// Returns the learning rate to use after observing `val`.
    pub fn observe(&mut self, val: f64, lr: f64, patience: usize, factor: f64) -> f64 {
        if self.best.is_none_or(|b| val < b) {
            self.best = Some(val);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > patience {
            self.bad_epochs = 0;
            lr * factor
        } else {
            lr
        }
    }
}

/// Full training state; [`Checkpoint`] is its serialised form.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: CoSUNet,
    pub mask: Vec<bool>,
    pub sched: BridgeSchedule,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub best: ParamSet,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub optim: AdamW,
    pub lr: f64,
    pub plateau: Plateau,
    pub rng: Rng,
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
    pub workers: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, mask: &[bool]) -> Result<Self> {
        config.validate()?;
        let net = CoSUNet::new(config.model.clone(), mask, config.horizon)?;
        let params = net.init_params(config.seed);
        let optim = AdamW::new(config.adamw(config.lr), &params);
        Ok(Trainer {
            sched: BridgeSchedule::new(config.horizon)?,
            ema: params.clone(),
            best: params.clone(),
            params,
            best_val: None,
            best_epoch: 0,
            optim,
            lr: config.lr,
            plateau: Plateau {
                best: None,
                bad_epochs: 0,
            },
            rng: stream(config.seed, "train"),
            epoch: 0,
            log: Vec::new(),
            workers: 1,
            mask: mask.to_vec(),
            net,
            config,
        })
    }

    fn check_cohort(&self, c: &Cohort, what: &str) -> Result<()> {
        if c.mask != self.mask {
            return Err(Error::Config(format!("{what} cohort mask differs from the model mask")));
        }
        if c.num_scans() == 0 {
            return Err(Error::Config(format!("{what} cohort has no follow-up scans")));
        }
        Ok(())
    }

    /// Validation loss of the EMA weights with a fixed noise stream.
    pub fn validation_loss(&self, val: &Cohort) -> Result<f64> {
        let mut rng = stream(self.config.seed, "validation");
        let tuples = val
            .pairs()
            .into_iter()
            .map(|(i, j)| val.tuple(i, j, self.config.with_dxt))
            .collect();
        let draws = draw_noise(tuples, self.config.horizon, &mut rng);
        let model = ModelRef {
            net: &self.net,
            params: &self.ema,
        };
        batch_loss(&model, &self.sched, &draws, &self.mask)
    }

    /// One shuffled pass over the training scans followed by validation.
    pub fn run_epoch(&mut self, train: &Cohort, val: &Cohort) -> Result<EpochRecord> {
        self.check_cohort(train, "training")?;
        self.check_cohort(val, "validation")?;
        let mut pairs = train.pairs();
        pairs.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in pairs.chunks(self.config.batch_size) {
            let tuples = chunk
                .iter()
                .map(|&(i, j)| train.tuple(i, j, self.config.with_dxt))
                .collect();
            let draws = draw_noise(tuples, self.config.horizon, &mut self.rng);
            let loss = train_step(
                &self.net,
                &mut self.params,
                &self.sched,
                &draws,
                &self.mask,
                self.workers,
            )?;
            self.optim.config.lr = self.lr;
            self.optim.step(&mut self.params)?;
            ema_update(&mut self.ema, &self.params, self.config.ema_decay)?;
            total += loss * chunk.len() as f64;
        }
        self.epoch += 1;
        let val_loss = self.validation_loss(val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {}", self.epoch)));
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: total / pairs.len() as f64,
            val_loss,
            lr: self.lr,
        };
        if self.best_val.is_none_or(|b| val_loss < b) {
            self.best_val = Some(val_loss);
            self.best_epoch = self.epoch;
            self.best = self.ema.clone();
        }
        self.lr = self.plateau.observe(
            val_loss,
            self.lr,
            self.config.plateau_patience,
            self.config.plateau_factor,
        );
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs until `config.epochs`, calling `on_epoch` after each epoch.
    pub fn train(
        &mut self,
        train: &Cohort,
        val: &Cohort,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(train, val)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    /// The served model: EMA weights of the best validation epoch.
    pub fn model(&self) -> Model {
        Model {
            net: self.net.clone(),
            params: self.best.clone(),
            with_dxt: self.config.with_dxt,
        }
    }
}

/// Borrowed network and weights usable as a [`Denoiser`].
pub struct ModelRef<'a> {
    pub net: &'a CoSUNet,
    pub params: &'a ParamSet,
}

impl Denoiser for ModelRef<'_> {
    fn num_vertices(&self) -> usize {
        self.net.num_vertices()
    }

    fn conditions_on_dxt(&self) -> bool {
        true
    }

    fn denoise(&self, x: &[f64], beta: usize, t: f64, cond: &crate::cohort::Condition) -> Result<Vec<f64>> {
        self.net.predict(self.params, x, beta, t, cond)
    }
}

/// Trains from scratch; `0` epochs returns the initial weights.
pub fn train(train_set: &Cohort, val: &Cohort, config: &TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(config.clone(), &train_set.mask)?;
    t.train(train_set, val, |_, _| Ok(()))?;
    Ok(Checkpoint::from_trainer(&t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, split_cohort, SyntheticConfig};
    use crate::sampler::OracleNet;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            horizon: 10,
            model: CoSUNetConfig {
                base_channels: 4,
                level_top: 1,
                depth: 1,
                channel_mults: vec![1, 1],
                embed_dim: 8,
                heads: 2,
                positional_embedding: true,
            },
            ..Default::default()
        }
    }

    fn cohort() -> Cohort {
        generate_synthetic_cohort(&SyntheticConfig {
            level: 1,
            n_subjects: 12,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_loss_is_zero_and_zero_net_loss_is_target_power() {
        let c = cohort();
        let sched = BridgeSchedule::new(10).unwrap();
        let mut rng = stream(0, "t");
        let tuple = c.tuple(0, 0, false);
        let draws = draw_noise(vec![tuple.clone()], 10, &mut rng);
        let oracle = OracleNet::new(tuple.delta.clone());
        assert!(batch_loss(&oracle, &sched, &draws, &c.mask).unwrap() < 1e-28);

        // β = B: the target vanishes, so the oracle loss is exactly zero.
        let at_end = Draw {
            beta: 10,
            ..draws[0].clone()
        };
        assert_eq!(batch_loss(&oracle, &sched, &[at_end], &c.mask).unwrap(), 0.0);

        let t = Trainer::new(tiny_config(), &c.mask).unwrap();
        let model = ModelRef {
            net: &t.net,
            params: &t.params,
        };
        let mid = Draw {
            beta: 5,
            ..draws[0].clone()
        };
        let loss = batch_loss(&model, &sched, std::slice::from_ref(&mid), &c.mask).unwrap();
        let target = sched
            .training_target(&tuple.tau0, &tuple.delta, 5, &mid.eps, &c.mask)
            .unwrap();
        let power = masked_mse(&vec![0.0; target.len()], &target, &c.mask);
        assert!(power > 0.0);
        assert!((loss - power).abs() < 1e-12);
    }

    #[test]
    fn masked_content_does_not_change_the_loss() {
        let c = cohort();
        let mut t = Trainer::new(tiny_config(), &c.mask).unwrap();
        let mut rng = stream(1, "t");
        let draws = draw_noise(vec![c.tuple(1, 0, false), c.tuple(2, 1, false)], 10, &mut rng);
        let a = train_step(&t.net, &mut t.params, &t.sched, &draws, &c.mask, 1).unwrap();
        let mut poked = draws.clone();
        for d in &mut poked {
            for (i, &m) in c.mask.iter().enumerate() {
                if !m {
                    d.tuple.tau0[i] = 9.0;
                    d.tuple.delta[i] = -3.0;
                    d.eps[i] = 5.0;
                }
            }
        }
        let b = train_step(&t.net, &mut t.params, &t.sched, &poked, &c.mask, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert!(t
            .params
            .iter()
            .all(|(id, _, _)| t.params.grad(id).iter().all(|g| g.is_finite())));
    }

    #[test]
    fn workers_do_not_change_the_result() {
        let c = cohort();
        let mut t = Trainer::new(tiny_config(), &c.mask).unwrap();
        let mut rng = stream(2, "t");
        let tuples = (0..5).map(|i| c.tuple(i, 0, true)).collect();
        let draws = draw_noise(tuples, 10, &mut rng);
        let a = train_step(&t.net, &mut t.params, &t.sched, &draws, &c.mask, 1).unwrap();
        let ga: Vec<Vec<f64>> = t.params.iter().map(|(id, _, _)| t.params.grad(id).to_vec()).collect();
        let b = train_step(&t.net, &mut t.params, &t.sched, &draws, &c.mask, 3).unwrap();
        let gb: Vec<Vec<f64>> = t.params.iter().map(|(id, _, _)| t.params.grad(id).to_vec()).collect();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn plateau_never_increases_lr() {
        let mut p = Plateau {
            best: None,
            bad_epochs: 0,
        };
        let mut lr = 1.0;
        let mut seen = vec![];
        for v in [5.0, 4.0, 4.5, 4.5, 4.5, 3.0, 3.5, 3.5, 3.5, 3.5] {
            let next = p.observe(v, lr, 2, 0.5);
            assert!(next <= lr);
            lr = next;
            seen.push(lr);
        }
        assert_eq!(seen, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn zero_epochs_keeps_initial_weights_and_runs_are_reproducible() {
        let c = cohort();
        let s = split_cohort(&c, [0.5, 0.25, 0.25], 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let ck = train(&s.train, &s.val, &cfg).unwrap();
        assert_eq!(ck.params, Trainer::new(cfg, &c.mask).unwrap().params);

        let a = train(&s.train, &s.val, &tiny_config()).unwrap();
        let b = train(&s.train, &s.val, &tiny_config()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_ne!(a.ema, a.params);
        assert_eq!(a.log.len(), 2);
    }

    #[test]
    fn config_validation() {
        let ok = tiny_config();
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                horizon: 1,
                ..ok.clone()
            },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig {
                plateau_factor: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                ema_decay: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                plateau_patience: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(ok.validate().is_ok());
    }
}
