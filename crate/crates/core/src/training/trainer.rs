use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::kfold::{random_kfold, stratified_kfold, FoldSplit};
use super::loss::rdrop_loss;
use crate::data_io::TrialSet;
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::metrics::{accuracy, confusion, kappa, ConfusionMatrix};
use crate::model::{
    argmax, forward_bands, logits_from_bands, prepare_eeg, Denoiser, ModelConfig, ModelParams,
};
use crate::tensor::{RngState, Tape, Tensor};

const INIT_STREAM: u64 = 1 << 40;
const DROPOUT_STREAM: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rdrop_alpha: f64,
    pub folds: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            epochs: 500,
            batch_size: 100,
            rdrop_alpha: 0.5,
            folds: 5,
            seed: 0,
            stratified: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds {} must be at least 2",
                self.folds
            )));
        }
        if !(self.rdrop_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "rdrop_alpha {} must be non-negative",
                self.rdrop_alpha
            )));
        }
        Ok(())
    }

    pub fn split(&self, labels: &[usize]) -> Result<FoldSplit> {
        if self.stratified {
            stratified_kfold(labels, self.folds, self.seed)
        } else {
            random_kfold(labels.len(), self.folds, self.seed)
        }
    }
}

/// Trials with the EEG already band-split, so the fixed filter bank runs once
/// per trial rather than once per epoch.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub bands: Vec<Tensor>,
    pub emg: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl PreparedSet {
    pub fn new(set: &TrialSet, bank: &FilterBank, denoiser: &dyn Denoiser) -> Result<Self> {
        set.validate()?;
        let bands = set
            .eeg
            .iter()
            .enumerate()
            .map(|(i, eeg)| {
                prepare_eeg(eeg, bank, denoiser).map_err(|e| e.context(format!("trial {i}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            bands,
            emg: set.emg.clone(),
            labels: set.labels.clone(),
            n_classes: set.n_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_model(&self, c: &ModelConfig) -> Result<()> {
        let Some(x) = self.bands.first() else {
            return Err(Error::Data("dataset has no trials".into()));
        };
        let want = [c.n_bands, c.eeg_channels, c.time_points];
        if x.shape() != want {
            return Err(Error::Config(format!(
                "band-split trials are {:?} (bands, EEG channels, samples), model expects {want:?}",
                x.shape()
            )));
        }
        if self.emg[0].shape()[0] != c.emg_channels {
            return Err(Error::Config(format!(
                "trials have {} EMG channels, model expects {}",
                self.emg[0].shape()[0],
                c.emg_channels
            )));
        }
        if self.n_classes > c.n_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {} outputs",
                self.n_classes, c.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `epoch,train_loss,val_acc`, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_acc);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub kappa: f64,
}

/// Evaluation-mode predictions for `indices`.
pub fn predict(
    data: &PreparedSet,
    indices: &[usize],
    c: &ModelConfig,
    params: &ModelParams,
) -> Result<Vec<usize>> {
    let mut rng = RngState::new(0);
    indices
        .iter()
        .map(|&i| {
            let logits =
                logits_from_bands(c, params, &data.bands[i], &data.emg[i], &mut rng, false)
                    .map_err(|e| e.context(format!("trial {i}")))?;
            Ok(argmax(logits.data()))
        })
        .collect()
}

pub fn evaluate(
    data: &PreparedSet,
    indices: &[usize],
    c: &ModelConfig,
    params: &ModelParams,
) -> Result<Evaluation> {
    let predictions = predict(data, indices, c, params)?;
    score(indices.to_vec(), predictions, data, c.n_classes)
}

fn score(
    indices: Vec<usize>,
    predictions: Vec<usize>,
    data: &PreparedSet,
    n_classes: usize,
) -> Result<Evaluation> {
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    let cm = confusion(&predictions, &labels, n_classes)?;
    Ok(Evaluation {
        accuracy: accuracy(&cm)?,
        kappa: kappa(&cm)?,
        confusion: cm,
        indices,
        predictions,
        labels,
    })
}

/// Trains a fresh model on `train` and tracks accuracy on `val` after every
/// epoch. `stream` separates the random streams of independent runs.
pub fn train_fold(
    data: &PreparedSet,
    train: &[usize],
    val: &[usize],
    mc: &ModelConfig,
    tc: &TrainConfig,
    stream: u64,
) -> Result<(ModelParams, History)> {
    tc.validate()?;
    mc.validate()?;
    data.check_model(mc)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut params = ModelParams::init(mc, &mut RngState::derive(tc.seed, INIT_STREAM + stream))?;
    let mut drop_rng = RngState::derive(tc.seed, DROPOUT_STREAM + stream);
    let mut state = AdamState::new(&params);
    let adam = AdamConfig::new(tc.learning_rate);
    let mut history = History::default();

    for epoch in 0..tc.epochs {
        let mut order = train.to_vec();
        RngState::derive(tc.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let ctx = || format!("epoch {}, batch {}", epoch + 1, b + 1);
            params.zero_grad();
            for &i in batch {
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let bound = params.bind(&mut tape);
                    let x = tape.constant(&data.bands[i]);
                    let e = tape.constant(&data.emg[i]);
                    let run = |tape: &mut Tape, rng: &mut RngState| {
                        forward_bands(tape, mc, &bound, x, e, rng, true).map(|o| o.logits)
                    };
                    let l1 = run(&mut tape, &mut drop_rng).map_err(|e| e.context(ctx()))?;
                    let l2 = run(&mut tape, &mut drop_rng).map_err(|e| e.context(ctx()))?;
                    let loss = rdrop_loss(&mut tape, l1, l2, data.labels[i], tc.rdrop_alpha)?;
                    let value = tape.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::Numeric(format!(
                            "{}: non-finite loss {value} on trial {i}",
                            ctx()
                        )));
                    }
                    let scaled = tape.scale(loss, 1.0 / batch.len() as f64)?;
                    tape.backward(scaled)?;
                    (value, bound.grads(&tape))
                };
                params.accumulate_grads(&grads)?;
                loss_sum += loss;
            }
            adam_step(&mut params, &mut state, &adam).map_err(|e| e.context(ctx()))?;
        }
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            let preds = predict(data, val, mc, &params)?;
            preds
                .iter()
                .zip(val)
                .filter(|(p, &i)| **p == data.labels[i])
                .count() as f64
                / val.len() as f64
        };
        let train_loss = loss_sum / train.len() as f64;
        log::debug!(
            "stream {stream} epoch {}: loss {train_loss:.6} val_acc {val_acc:.4}",
            epoch + 1
        );
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_acc,
        });
    }
    Ok((params, history))
}

#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub eval: Evaluation,
    pub params: ModelParams,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvSummary {
    pub fold_accuracy: Vec<f64>,
    pub fold_kappa: Vec<f64>,
    pub mean_acc: f64,
    pub mean_kappa: f64,
}

impl CvSummary {
    fn new(fold_accuracy: Vec<f64>, fold_kappa: Vec<f64>) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            mean_acc: mean(&fold_accuracy),
            mean_kappa: mean(&fold_kappa),
            fold_accuracy,
            fold_kappa,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "mean_acc={:.6} mean_kappa={:.6}",
            self.mean_acc, self.mean_kappa
        )
    }
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
}

/// Runs `f(0..n)` on up to `jobs` worker threads; results keep index order.
fn parallel_map<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

/// K-fold cross-validation with independently trained models.
pub fn cross_validate(
    data: &PreparedSet,
    mc: &ModelConfig,
    tc: &TrainConfig,
    jobs: usize,
) -> Result<CvReport> {
    tc.validate()?;
    let split = tc.split(&data.labels)?;
    let folds = parallel_map(split.k, jobs, |fold| {
        let train = split.train_indices(fold);
        let test = split.test_indices(fold);
        let (params, history) = train_fold(data, &train, &test, mc, tc, fold as u64)
            .map_err(|e| e.context(format!("fold {fold}")))?;
        let eval = evaluate(data, &test, mc, &params)?;
        log::info!(
            "fold {fold}: acc {:.4} kappa {:.4}",
            eval.accuracy,
            eval.kappa
        );
        Ok(FoldReport {
            fold,
            train_indices: train,
            eval,
            params,
            history,
        })
    })?;
    let summary = CvSummary::new(
        folds.iter().map(|f| f.eval.accuracy).collect(),
        folds.iter().map(|f| f.eval.kappa).collect(),
    );
    Ok(CvReport { folds, summary })
}

/// Label-only reference predictors for leakage checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Constant(usize),
    /// Most frequent training label; ties go to the lowest class.
    Majority,
}

/// Cross-validates a [`Baseline`] over the same split the model would use.
pub fn cross_validate_baseline(
    labels: &[usize],
    n_classes: usize,
    tc: &TrainConfig,
    baseline: Baseline,
) -> Result<CvSummary> {
    let split = tc.split(labels)?;
    let (mut accs, mut kappas) = (Vec::new(), Vec::new());
    for fold in 0..split.k {
        let pred = match baseline {
            Baseline::Constant(c) => c,
            Baseline::Majority => {
                let mut counts = vec![0usize; n_classes];
                for i in split.train_indices(fold) {
                    counts[labels[i]] += 1;
                }
                argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
            }
        };
        let test = split.test_indices(fold);
        let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let cm = confusion(&vec![pred; test.len()], &truth, n_classes)?;
        accs.push(accuracy(&cm)?);
        kappas.push(kappa(&cm)?);
    }
    Ok(CvSummary::new(accs, kappas))
}
