use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::augment::{AugmentConfig, AugmentParams};
use super::loss::triplet_loss;
use super::sampler::{Triplet, TripletSampler};
use crate::dataset::{DatasetManifest, ImageStore, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::LogoNetModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub margin: f64,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Test-split acc@1 every this many epochs; 0 disables.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            margin: 0.2,
            batch_size: 16,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            augment: AugmentConfig::default(),
            validate_every: 0,
        }
    }
}

const TRAIN_KEYS: [&str; 10] = [
    "learning_rate",
    "margin",
    "batch_size",
    "epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "crop_fraction",
    "hflip_prob",
    "validate_every",
];

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        &TRAIN_KEYS
    }

    /// A zero learning rate is accepted: it turns training into a no-op on
    /// the parameters, which is useful for checking the loop itself.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.margin >= 0.0) {
            errs.push(format!("margin must be >= 0, got {}", self.margin));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if let Err(e) = self.augment.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Applies the training keys in `pairs`, returning the rest.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<Vec<(String, String)>> {
        let mut rest = Vec::new();
        for (k, v) in pairs {
            let bad = || Error::InvalidConfig(vec![format!("bad value {v:?} for {k}")]);
            let real = || v.trim().parse::<f64>().map_err(|_| bad());
            let int = || v.trim().parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "learning_rate" => self.learning_rate = real()?,
                "margin" => self.margin = real()?,
                "batch_size" => self.batch_size = int()?,
                "epochs" => self.epochs = int()?,
                "adam_beta1" => self.adam_beta1 = real()?,
                "adam_beta2" => self.adam_beta2 = real()?,
                "adam_eps" => self.adam_eps = real()?,
                "crop_fraction" => self.augment.crop_fraction = real()?,
                "hflip_prob" => self.augment.hflip_prob = real()?,
                "validate_every" => self.validate_every = int()?,
                _ => rest.push((k.clone(), v.clone())),
            }
        }
        Ok(rest)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_acc1: Option<f64>,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,mean_loss,val_acc1,wall_seconds";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{},{:.3}",
            self.epoch,
            self.mean_loss,
            self.val_acc1.map(|a| format!("{a:.4}")).unwrap_or_default(),
            self.wall_seconds
        )
    }
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(out, "{}", l.csv_line());
    }
    out
}

/// Stateful training loop over the train split; one call to
/// [`Trainer::run_epoch`] performs `ceil(train sketches / batch_size)`
/// optimizer steps.
pub struct Trainer<'a> {
    model: LogoNetModel,
    manifest: &'a DatasetManifest,
    store: &'a ImageStore,
    cfg: TrainConfig,
    sampler: TripletSampler,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: LogoNetModel,
        manifest: &'a DatasetManifest,
        store: &'a ImageStore,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if store.channels() != mc.input_channels || store.size() != mc.input_size {
            return Err(Error::invalid(
                "train",
                format!(
                    "images decoded as {}x{}px, model expects {}x{}px",
                    store.channels(),
                    store.size(),
                    mc.input_channels,
                    mc.input_size
                ),
            ));
        }
        let sampler = TripletSampler::new(manifest, Split::Train)?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            manifest,
            store,
            cfg: cfg.clone(),
            sampler,
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &LogoNetModel {
        &self.model
    }

    pub fn into_model(self) -> LogoNetModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.anchor_count().div_ceil(self.cfg.batch_size)
    }

    fn load(&mut self, t: &Triplet) -> Result<[Tensor; 3]> {
        let missing = |id: &str| Error::invalid("train", format!("image {id} was not loaded"));
        let a = self
            .store
            .sketch(&t.anchor_sketch_id)
            .ok_or_else(|| missing(&t.anchor_sketch_id))?;
        let p = self
            .store
            .logo(&t.positive_logo_id)
            .ok_or_else(|| missing(&t.positive_logo_id))?;
        let n = self
            .store
            .logo(&t.negative_logo_id)
            .ok_or_else(|| missing(&t.negative_logo_id))?;
        let size = self.store.size();
        // every member gets its own crop and flip
        let mut out = Vec::with_capacity(3);
        for img in [a, p, n] {
            out.push(AugmentParams::draw(size, &self.cfg.augment, &mut self.rng).apply(img)?);
        }
        Ok(out.try_into().expect("three members"))
    }

    /// One optimizer step on a freshly sampled batch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch: Vec<Triplet> = (0..self.cfg.batch_size)
            .map(|_| self.sampler.sample(&mut self.rng))
            .collect();
        let mut members: [Vec<Tensor>; 3] = Default::default();
        for t in &batch {
            for (slot, img) in members.iter_mut().zip(self.load(t)?) {
                slot.push(img);
            }
        }
        let stack = |v: &Vec<Tensor>| Tensor::stack(&v.iter().collect::<Vec<_>>());
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let a = tape.constant(stack(&members[0])?);
        let p = tape.constant(stack(&members[1])?);
        let n = tape.constant(stack(&members[2])?);
        let (ea, ep, en) = self.model.embed_triplet(&mut tape, &bound, a, p, n)?;
        let loss = triplet_loss(&mut tape, ea, ep, en, self.cfg.margin as f32)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()? as f64;
        let grads = bound.gradients(&tape);
        let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        adam_step(
            self.model.params_mut(),
            &grad_refs,
            &mut self.adam,
            &self.cfg.adam(),
        )?;
        Ok(value)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let batches = self.batches_per_epoch();
        let mut total = 0.0;
        for _ in 0..batches {
            total += self.step()?;
        }
        self.epoch += 1;
        let val_acc1 = if self.cfg.validate_every > 0
            && self.epoch % self.cfg.validate_every == 0
            && self.manifest.sketches_in(Split::Test).next().is_some()
        {
            evaluate(&self.model, self.manifest, self.store, Split::Test)?
                .overall
                .acc1
        } else {
            None
        };
        let log = EpochLog {
            epoch: self.epoch,
            mean_loss: total / batches as f64,
            val_acc1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", log.csv_line());
        Ok(log)
    }
}

/// Runs `cfg.epochs` epochs and returns the trained model with its log.
pub fn train(
    model: LogoNetModel,
    manifest: &DatasetManifest,
    store: &ImageStore,
    cfg: &TrainConfig,
) -> Result<(LogoNetModel, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, manifest, store, cfg)?;
    let logs = (0..cfg.epochs)
        .map(|_| trainer.run_epoch())
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.into_model(), logs))
}
