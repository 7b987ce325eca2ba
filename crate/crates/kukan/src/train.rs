//! Batch-size-1 training with Adam, plateau halving and early stopping.
//!
//! Writes `train_log.csv`, `initial.ckpt`, `best.ckpt`, `last.ckpt` and
//! `summary.txt` into the output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kukan_core::loss::{total_loss, total_loss_grad, LossWeights, PercExtractor};
use kukan_core::model::Pipeline;
use kukan_core::nn::Module;
use kukan_core::optim::OptimizerState;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{new_pipeline, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{self, HarnessError, Result};

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,best_val_loss,lr";

/// Independent seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.best_val_loss, self.lr)
    }
}

/// Counts epochs since the last strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: f64,
    pub stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, stale: 0 }
    }

    /// Records a validation loss and reports whether it improved.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
}

impl TrainSummary {
    pub fn to_text(&self) -> String {
        format!(
            "initial_train_loss = {}\nfinal_train_loss = {}\nbest_val_loss = {}\nbest_epoch = {}\nepochs_run = {}\nstopped_early = {}\n",
            self.initial_train_loss,
            self.final_train_loss,
            self.best_val_loss,
            self.best_epoch,
            self.epochs_run,
            self.stopped_early
        )
    }
}

/// Total loss of the pipeline on one sample, without gradients.
pub fn sample_loss(p: &Pipeline, s: &Sample, w: &LossWeights, ext: &PercExtractor) -> Result<f64> {
    let (out, _) = p.forward(&s.px)?;
    Ok(total_loss(&out.volume, &s.volume, w, ext)?.total)
}

pub fn mean_loss(p: &Pipeline, samples: &[Sample], w: &LossWeights, ext: &PercExtractor) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += sample_loss(p, s, w, ext)?;
    }
    Ok(acc / samples.len() as f64)
}

/// `name,norm,grad_norm,max_abs` for every parameter tensor.
pub fn param_norms_csv(p: &dyn Module) -> String {
    let mut s = String::from("name,norm,grad_norm,max_abs\n");
    p.visit_params("", &mut |name, param| {
        s.push_str(&format!("{name},{},{},{}\n", param.value.norm(), param.grad.norm(), param.value.max_abs()));
    });
    s
}

fn numerical_failure(p: &Pipeline, out: &Path, what: String) -> HarnessError {
    let norms = param_norms_csv(p);
    eprint!("{norms}");
    let dump = out.join("param_norms.csv");
    match error::write(&dump, norms) {
        Ok(()) => HarnessError::Numerical(format!("{what}; parameter norms in {}", dump.display())),
        Err(_) => HarnessError::Numerical(what),
    }
}

fn all_finite(p: &dyn Module) -> bool {
    let mut ok = true;
    p.visit_params("", &mut |_, q| ok &= q.value.is_finite() && q.grad.is_finite());
    ok
}

/// One optimizer step on one sample; returns the loss before the step.
pub fn train_step(
    p: &mut Pipeline,
    opt: &mut OptimizerState,
    s: &Sample,
    w: &LossWeights,
    ext: &PercExtractor,
) -> Result<f64> {
    let (out, cache) = p.forward(&s.px)?;
    let (terms, grad) = total_loss_grad(&out.volume, &s.volume, w, ext)?;
    if !terms.total.is_finite() {
        return Err(HarnessError::Numerical(format!("{}: loss {}", s.id, terms.total)));
    }
    p.zero_grad();
    p.backward(&cache, &grad)?;
    if !all_finite(p) {
        return Err(HarnessError::Numerical(format!("{}: non-finite gradient", s.id)));
    }
    opt.step(p)?;
    Ok(terms.total)
}

/// Trains on `data` into `out`, calling `progress` after every epoch.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    error::create_dir(out)?;
    let train_set = data.load_split(Split::Train)?;
    let val_set = data.load_split(Split::Val)?;
    if train_set.is_empty() {
        return Err(HarnessError::Config("dataset has no training samples".into()));
    }
    let ext = PercExtractor::default();
    let w = cfg.weights;
    let mut p = new_pipeline(data.scale, &data.geometry, derive_seed(cfg.seed, INIT_STREAM))?;
    let snapshot = |p: &Pipeline, epoch: usize| Checkpoint::capture(p, data.scale, &data.geometry, epoch);
    snapshot(&p, 0).save(&out.join("initial.ckpt"))?;

    let guard = |p: &Pipeline, r: Result<f64>| -> Result<f64> {
        match r {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(numerical_failure(p, out, format!("loss {v}"))),
            Err(HarnessError::Numerical(m)) => Err(numerical_failure(p, out, m)),
            Err(e) => Err(e),
        }
    };
    let initial_train_loss = guard(&p, mean_loss(&p, &train_set, &w, &ext))?;

    let log_path = out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?);
    let mut write_line = |line: &str| -> Result<()> {
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| HarnessError::io(&log_path, e))
    };
    write_line(LOG_HEADER)?;

    let mut opt = OptimizerState::new(cfg.adam);
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop = EarlyStop::new(cfg.patience);
    let mut records = Vec::new();
    let mut best_epoch = 0;
    for epoch in 1..=cfg.epochs {
        let lr = opt.lr();
        order.shuffle(&mut shuffle);
        let mut acc = 0.0;
        for &i in &order {
            let step = train_step(&mut p, &mut opt, &train_set[i], &w, &ext);
            acc += guard(&p, step)?;
        }
        let train_loss = acc / order.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            guard(&p, mean_loss(&p, &val_set, &w, &ext))?
        };
        if stop.observe(val_loss) {
            best_epoch = epoch;
            snapshot(&p, epoch).save(&out.join("best.ckpt"))?;
        }
        opt.end_epoch(val_loss);
        let record = EpochRecord { epoch, train_loss, val_loss, best_val_loss: stop.best, lr };
        write_line(&record.csv_row())?;
        progress(&record);
        records.push(record);
        if stop.should_stop() {
            break;
        }
    }

    let epochs_run = records.len();
    snapshot(&p, epochs_run).save(&out.join("last.ckpt"))?;
    let final_train_loss = guard(&p, mean_loss(&p, &train_set, &w, &ext))?;
    let summary = TrainSummary {
        initial_train_loss,
        final_train_loss,
        best_val_loss: stop.best,
        best_epoch,
        epochs_run,
        stopped_early: epochs_run < cfg.epochs,
        log: records,
    };
    error::write(&out.join("summary.txt"), summary.to_text())?;
    Ok(summary)
}

/// Parses a training log back into records.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = error::read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(HarnessError::format(path, "unexpected log header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| HarnessError::format(path, format!("bad log row {line:?}")))
            };
            Ok(EpochRecord {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                val_loss: num(2)?,
                best_val_loss: num(3)?,
                lr: num(4)?,
            })
        })
        .collect()
}
