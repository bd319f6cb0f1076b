//! The alternating update step, the epoch loop, checkpoints and resume.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::adam::Adam;
use super::checkpoint::{read_rgck, write_rgck, Entries};
use super::config::{lr_schedule, TrainConfig};
use crate::autodiff::{ParamStore, RetentionPolicy, Tape};
use crate::data::{Dataset, SampleBatch};
use crate::discriminator::PatchDiscriminator;
use crate::error::{Error, Result};
use crate::losses::{
    fill_generator_terms, record_critic_objective, record_generator_objective, record_generators, GanMode, LossReport,
};
use crate::model::{Regime, RevGan};
use crate::scalar::{DType, Scalar};
use crate::tensor::{AnyTensor, Tensor};

/// One optimizer per network group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T: Scalar> {
    pub g: Adam<T>,
    pub d_x: Adam<T>,
    pub d_y: Adam<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(model: &RevGan, store: &ParamStore<T>) -> Self {
        Self {
            g: Adam::new(store, model.generator_ids()),
            d_x: Adam::new(store, model.d_x.param_ids()),
            d_y: Adam::new(store, model.d_y.param_ids()),
        }
    }

    fn groups(&self) -> [(&'static str, &Adam<T>); 3] {
        [("g", &self.g), ("d_x", &self.d_x), ("d_y", &self.d_y)]
    }

    fn groups_mut(&mut self) -> [(&'static str, &mut Adam<T>); 3] {
        [("g", &mut self.g), ("d_x", &mut self.d_x), ("d_y", &mut self.d_y)]
    }
}

/// Scalars that parameterize a single step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub lambda: f64,
    pub lr: f64,
    pub gan_mode: GanMode,
}

fn non_finite(what: &str, report: &LossReport) -> Error {
    let json = serde_json::to_string(report).unwrap_or_default();
    Error::NonFinite(format!("{what} is not finite; last report {json}"))
}

/// Updates `critic` on `real` versus a detached `fake`; returns its loss.
#[allow(clippy::too_many_arguments)]
fn critic_update<T: Scalar>(
    store: &mut ParamStore<T>,
    critic: &PatchDiscriminator,
    opt: &mut Adam<T>,
    regime: Regime,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    condition: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
    let loss = record_critic_objective(&mut tape, store, critic, regime, real, fake, condition)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss, store)?;
    opt.step(store, lr)?;
    Ok(value)
}

/// One iteration: forward both generators, update `d_y` then `d_x` on the
/// detached fakes, then update the generators (encoders, decoders and the
/// shared core) against the freshly updated critics.
pub fn train_step<T: Scalar>(
    model: &RevGan,
    store: &mut ParamStore<T>,
    opt: &mut Optimizers<T>,
    batch: &SampleBatch<T>,
    hp: &StepParams,
) -> Result<LossReport> {
    let mut report = LossReport::default();
    let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
    tape.freeze(model.critic_ids());
    let pass = record_generators(&mut tape, store, model, batch)?;
    let fake_y = tape.value(pass.fake_y).clone();
    let fake_x = tape.value(pass.fake_x).clone();

    report.adv_d_y = critic_update(
        store,
        &model.d_y,
        &mut opt.d_y,
        model.regime,
        &batch.y,
        &fake_y,
        &batch.x,
        hp.lr,
    )?;
    report.total_d_y = report.adv_d_y;
    if !report.adv_d_y.is_finite() {
        return Err(non_finite("d_y loss", &report));
    }
    report.adv_d_x = critic_update(
        store,
        &model.d_x,
        &mut opt.d_x,
        model.regime,
        &batch.x,
        &fake_x,
        &batch.y,
        hp.lr,
    )?;
    report.total_d_x = report.adv_d_x;
    if !report.adv_d_x.is_finite() {
        return Err(non_finite("d_x loss", &report));
    }

    let terms = record_generator_objective(&mut tape, store, model, &pass, hp.lambda, hp.gan_mode)?;
    fill_generator_terms(&mut report, &tape, &terms, model.regime, hp.lambda)?;
    if !report.all_finite() {
        return Err(non_finite("generator loss", &report));
    }
    tape.backward(terms.total, store)?;
    opt.g.step(store, hp.lr)?;
    Ok(report)
}

/// Model, parameters, optimizer state and position of a training run.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: RevGan,
    pub store: ParamStore<T>,
    pub opt: Optimizers<T>,
    pub dataset: Dataset,
    /// Completed iterations.
    pub iter: usize,
    pub last_report: Option<LossReport>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    iter: usize,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    losses: &'a LossReport,
    timestamp: f64,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a TrainConfig,
    start_iter: usize,
    iters_per_epoch: usize,
    timestamp: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Result of [`Trainer::run`] and [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitOutcome {
    pub iterations: usize,
    pub finished: bool,
    pub last_checkpoint: Option<PathBuf>,
    pub last_report: Option<LossReport>,
}

impl<T: Scalar> Trainer<T> {
    /// Builds and initializes the model for `dataset`. The precision in the
    /// config must match `T`.
    pub fn new(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        config.check_dataset(&dataset)?;
        if config.precision != T::DTYPE {
            return Err(Error::invalid(format!(
                "config precision {:?} does not match the trainer's element type {:?}",
                config.precision,
                T::DTYPE
            )));
        }
        let gen = config.generator_config(dataset.image_size()?);
        let mut store = ParamStore::new();
        let model = RevGan::build(&mut store, &gen, config.regime, config.disc_width, config.seed)?;
        let opt = Optimizers::new(&model, &store);
        Ok(Self {
            config,
            model,
            store,
            opt,
            dataset,
            iter: 0,
            last_report: None,
        })
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.dataset.len()
    }

    pub fn total_iters(&self) -> usize {
        self.config.total_epochs() * self.iters_per_epoch()
    }

    pub fn epoch(&self) -> usize {
        self.iter / self.iters_per_epoch()
    }

    fn paired(&self) -> bool {
        self.model.regime == Regime::Paired
    }

    /// Batch visited at iteration `iter`.
    pub fn batch_at(&self, iter: usize) -> Result<SampleBatch<T>> {
        let n = self.iters_per_epoch();
        let order = self.dataset.epoch_order(self.config.seed, iter / n, self.paired());
        let (a, b) = order[iter % n];
        self.dataset.sample(a, b, self.paired())
    }

    /// Runs the next iteration of the schedule.
    pub fn step(&mut self) -> Result<LossReport> {
        let lr = lr_schedule(self.epoch(), &self.config)?;
        self.step_with_lr(lr)
    }

    /// Runs the next iteration at a fixed learning rate, ignoring the schedule.
    pub fn step_with_lr(&mut self, lr: f64) -> Result<LossReport> {
        let batch = self.batch_at(self.iter)?;
        let hp = StepParams {
            lambda: self.config.lambda,
            lr,
            gan_mode: self.config.gan_mode,
        };
        let report = train_step(&self.model, &mut self.store, &mut self.opt, &batch, &hp)?;
        self.iter += 1;
        self.last_report = Some(report);
        Ok(report)
    }

    /// Parameters, optimizer moments and step counts, and the position.
    pub fn checkpoint_entries(&self) -> Entries {
        let mut out: Entries = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), AnyTensor::from(p.value.clone())))
            .collect();
        for (group, adam) in self.opt.groups() {
            for (k, &id) in adam.ids.iter().enumerate() {
                let name = &self.store.get(id).name;
                out.push((format!("adam.{group}.m.{name}"), adam.m[k].clone().into()));
                out.push((format!("adam.{group}.v.{name}"), adam.v[k].clone().into()));
            }
            out.push((format!("adam.{group}.t"), Tensor::<f64>::scalar(adam.t as f64).into()));
        }
        let meta = [
            ("meta.iter", self.iter),
            ("meta.epoch", self.epoch()),
            ("meta.image_size", self.model.pair.config.image_size),
        ];
        out.extend(meta.map(|(k, v)| (k.to_string(), Tensor::<f64>::scalar(v as f64).into())));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_rgck(path, &self.checkpoint_entries())
    }

    /// Loads state written by [`Trainer::checkpoint_entries`] for the same
    /// architecture and precision.
    pub fn restore(&mut self, entries: &Entries) -> Result<()> {
        let mut map: HashMap<&str, &AnyTensor> = entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
            if t.dtype() != T::DTYPE && !name.starts_with("meta.") && !name.ends_with(".t") {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} is {:?}, expected {:?}",
                    t.dtype(),
                    T::DTYPE
                )));
            }
            if t.shape() != shape {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.to())
        };
        let ids: Vec<_> = self.store.iter().map(|(id, _)| id).collect();
        let mut values = Vec::with_capacity(ids.len());
        for &id in &ids {
            let p = self.store.get(id);
            values.push(take(&p.name, p.value.shape())?);
        }
        let mut opt = self.opt.clone();
        for (group, adam) in opt.groups_mut() {
            for k in 0..adam.ids.len() {
                let p = self.store.get(adam.ids[k]);
                adam.m[k] = take(&format!("adam.{group}.m.{}", p.name), p.value.shape())?;
                adam.v[k] = take(&format!("adam.{group}.v.{}", p.name), p.value.shape())?;
            }
            adam.t = counter(take(&format!("adam.{group}.t"), &[1])?.item().as_f64(), "adam step")? as u64;
        }
        let iter = counter(take("meta.iter", &[1])?.item().as_f64(), "meta.iter")?;
        for name in ["meta.epoch", "meta.image_size"] {
            take(name, &[1])?;
        }
        if let Some(extra) = map.keys().min() {
            return Err(Error::invalid(format!("checkpoint has unexpected tensor {extra}")));
        }
        for (id, v) in ids.into_iter().zip(values) {
            self.store.set_value(id, v)?;
        }
        self.store.zero_all_grads();
        self.opt = opt;
        self.iter = iter;
        Ok(())
    }

    pub fn resume_from(&mut self, path: &Path) -> Result<()> {
        self.restore(&read_rgck(path)?)
    }

    /// Trains until the schedule ends or this call has run `stop_after`
    /// iterations. Writes `init.rgck` when starting fresh, `iter_NNNNNN.rgck`
    /// at the configured cadence and on early stop, and `final.rgck` at the
    /// end of the schedule.
    pub fn run(&mut self, stop_after: Option<usize>) -> Result<FitOutcome> {
        let total = self.total_iters();
        let stop = stop_after.map_or(total, |s| self.iter.saturating_add(s).min(total));
        let mut log = match &self.config.log_path {
            Some(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some((BufWriter::new(f), path.clone()))
            }
            None => None,
        };
        let write_line = |log: &mut Option<(BufWriter<std::fs::File>, PathBuf)>, line: String| -> Result<()> {
            if let Some((w, path)) = log {
                writeln!(w, "{line}")
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            Ok(())
        };
        let header = LogHeader {
            config: &self.config,
            start_iter: self.iter,
            iters_per_epoch: self.iters_per_epoch(),
            timestamp: now(),
        };
        write_line(&mut log, json_line(&serde_json::json!({ "header": header }))?)?;

        let dir = self.config.checkpoint_dir.clone();
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut last_checkpoint = None;
        let mut save = |t: &Self, name: String| -> Result<()> {
            if let Some(d) = &dir {
                let path = d.join(name);
                t.save_checkpoint(&path)?;
                last_checkpoint = Some(path);
            }
            Ok(())
        };
        if self.iter == 0 {
            save(self, "init.rgck".into())?;
        }
        while self.iter < stop {
            let epoch = self.epoch();
            let lr = lr_schedule(epoch, &self.config)?;
            let report = self.step_with_lr(lr)?;
            let line = LogLine {
                iter: self.iter - 1,
                epoch,
                lr,
                losses: &report,
                timestamp: now(),
            };
            write_line(&mut log, json_line(&line)?)?;
            let every = self.config.checkpoint_every;
            let periodic = every > 0 && self.iter.is_multiple_of(every);
            if self.iter < total && (periodic || self.iter == stop) {
                save(self, format!("iter_{:06}.rgck", self.iter))?;
            }
        }
        let finished = self.iter >= total;
        if finished && total > 0 {
            save(self, "final.rgck".into())?;
        }
        Ok(FitOutcome {
            iterations: self.iter,
            finished,
            last_checkpoint,
            last_report: self.last_report,
        })
    }
}

fn json_line(v: &impl Serialize) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Internal(format!("log serialization: {e}")))
}

fn counter(v: f64, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::invalid(format!("{what} {v} is not a count")))
    }
}

/// Loads the dataset, builds the model at the configured precision,
/// optionally resumes, and trains.
pub fn fit(config: &TrainConfig, resume: Option<&Path>, stop_after: Option<usize>) -> Result<FitOutcome> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    match config.precision {
        DType::F32 => fit_as::<f32>(config, dataset, resume, stop_after),
        DType::F64 => fit_as::<f64>(config, dataset, resume, stop_after),
    }
}

fn fit_as<T: Scalar>(
    config: &TrainConfig,
    dataset: Dataset,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::<T>::new(config.clone(), dataset)?;
    if let Some(path) = resume {
        trainer.resume_from(path)?;
    }
    trainer.run(stop_after)
}
