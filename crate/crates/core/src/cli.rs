//! The `faconf` command line: `synth`, `train`, `eval`, `ablate`,
//! `filter-probe` and `import`.
//!
//! Run settings come from a TOML file with `[model]`, `[train]`, `[bank]` and
//! `[data]` tables. `--set table.key=value` overrides a file entry and dedicated
//! flags such as `--seed` override both.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data_io::{decimate, import_csv, read_container, write_container, TrialSet};
use crate::error::{Error, Result};
use crate::filterbank::{frequency_response, BandSpec, FilterBank};
use crate::model::{ablate, param_count, variant_name, Ablation, ModelConfig, PassThrough};
use crate::training::{
    cross_validate, evaluate, make_synthetic, read_checkpoint, write_checkpoint, PreparedSet,
    SynthConfig, TrainConfig,
};

/// Contiguous band layout; the band count is `model.n_bands`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub start_hz: f64,
    pub width_hz: f64,
    pub order: usize,
    pub stop_atten_db: f64,
    pub trans_hz: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        let b = BandSpec::new(4.0, 8.0);
        Self {
            start_hz: 4.0,
            width_hz: 4.0,
            order: b.order,
            stop_atten_db: b.stop_atten_db,
            trans_hz: b.trans_hz,
        }
    }
}

impl BankConfig {
    pub fn build(&self, n_bands: usize, fs: f64) -> Result<FilterBank> {
        let template = BandSpec {
            low_hz: self.start_hz,
            high_hz: self.start_hz + self.width_hz,
            order: self.order,
            stop_atten_db: self.stop_atten_db,
            trans_hz: self.trans_hz,
        };
        FilterBank::contiguous(self.start_hz, self.width_hz, n_bands, template, fs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Integer decimation applied after loading; 1 keeps the file rate.
    pub decimate: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { decimate: 1 }
    }
}

/// Everything a run needs besides file paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bank: BankConfig,
    pub data: DataConfig,
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// File contents (if any), then `table.key=value` overrides, validated
    /// against the schema.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io(e).context(p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            let (table, field) = key.trim().split_once('.').ok_or_else(|| {
                Error::Usage(format!("override key {key:?} must look like table.field"))
            })?;
            let entry = root
                .entry(table.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("{table} is not a table")));
            };
            t.insert(field.to_string(), parse_scalar(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.decimate == 0 {
            return Err(Error::Config("data.decimate must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "faconf",
    version,
    about = "EEG-EMG motor decoding: synthesis, training, evaluation and ablation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic labelled dataset container.
    Synth(SynthArgs),
    /// Cross-validate the model and save per-fold histories and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cross-validate the full model and ablated variants.
    Ablate(AblateArgs),
    /// Tabulate the magnitude response of every filter-bank band.
    FilterProbe(ProbeArgs),
    /// Convert per-trial CSV exports into a dataset container.
    Import(ImportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub eeg_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub emg_channels: usize,
    #[arg(long, default_value_t = 500)]
    pub time_points: usize,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 250.0)]
    pub fs: f64,
    /// Linear signal-to-noise power ratio ("inf" for noiseless).
    #[arg(long, default_value_t = 10.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// CSV layout: one row per (trial, channel), trial-major, columns are time
/// samples; labels hold one class id per line.
#[derive(Args, Debug)]
pub struct ImportArgs {
    #[arg(long)]
    pub eeg: PathBuf,
    #[arg(long)]
    pub emg: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Sampling rate of the CSV samples in Hz.
    #[arg(long)]
    pub fs: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML run configuration with [model], [train], [bank] and [data] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration entry, e.g. `--set model.fuse_filters=64`.
    #[arg(long = "set", value_name = "TABLE.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialisation, shuffling, dropout and fold assignment [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for parallel folds [default: available cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Adam learning rate [default: 1e-6].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 500].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 100].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cross-validation folds [default: 5].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Weight of the symmetric-KL consistency term [default: 0.5].
    #[arg(long)]
    pub rdrop_alpha: Option<f64>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.folds {
            t.folds = v;
        }
        if let Some(v) = self.rdrop_alpha {
            t.rdrop_alpha = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset container.
    pub data: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory.
    #[arg(short, long, default_value = "run")]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trials to score, relative to the cross-validation split of `--fold`.
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(short, long, default_value = "eval")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    pub data: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated blocks to remove for one variant; repeat for more
    /// rows. Names: band_attention, multiscale, emg, icscm. Without this
    /// flag the full model and each single removal are run.
    #[arg(long)]
    pub disable: Vec<String>,
    /// Run all 16 combinations.
    #[arg(long)]
    pub all_combinations: bool,
    /// CSV table path; printed to stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 250.0)]
    pub fs: f64,
    /// Frequency step in Hz.
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// CSV path; printed to stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<TrialSet> {
    let set = read_container(path).map_err(|e| e.context(path.display()))?;
    if cfg.data.decimate > 1 {
        decimate(&set, cfg.data.decimate)
    } else {
        Ok(set)
    }
}

fn prepare(set: &TrialSet, cfg: &RunConfig) -> Result<PreparedSet> {
    let bank = cfg.bank.build(cfg.model.n_bands, set.fs_hz)?;
    PreparedSet::new(set, &bank, &PassThrough)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(e).context(p.display())),
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io(e)),
            _ => Ok(()),
        },
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.classes < 2 {
        return Err(Error::Usage(format!(
            "--classes {} must be at least 2",
            a.classes
        )));
    }
    if a.trials == 0 || a.eeg_channels == 0 || a.emg_channels == 0 || a.time_points == 0 {
        return Err(Error::Usage(
            "--trials, channel counts and --time-points must be positive".into(),
        ));
    }
    let set = make_synthetic(&SynthConfig {
        n_trials: a.trials,
        n_classes: a.classes,
        eeg_channels: a.eeg_channels,
        emg_channels: a.emg_channels,
        time_points: a.time_points,
        fs_hz: a.fs,
        seed: a.seed,
        snr: a.snr,
    })?;
    write_container(&set, &a.output)?;
    println!("{}", describe(&a.output, &set));
    Ok(())
}

fn describe(path: &Path, set: &TrialSet) -> String {
    format!(
        "wrote {}: trials={} classes={} eeg_channels={} emg_channels={} time_points={} fs_hz={} counts={:?}",
        path.display(),
        set.len(),
        set.n_classes(),
        set.eeg_channels,
        set.emg_channels,
        set.time_points,
        set.fs_hz,
        set.class_counts()
    )
}

pub fn cmd_import(a: &ImportArgs) -> Result<()> {
    if !(a.fs > 0.0) {
        return Err(Error::Usage(format!("--fs {} must be positive", a.fs)));
    }
    let set = import_csv(&a.eeg, &a.emg, &a.labels, a.fs)?;
    write_container(&set, &a.output)?;
    println!("{}", describe(&a.output, &set));
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let set = load_dataset(&a.data, &cfg)?;
    let data = prepare(&set, &cfg)?;
    let report = cross_validate(&data, &cfg.model, &cfg.train, a.common.jobs())?;
    fs::create_dir_all(&a.output)?;
    let out = |name: String| a.output.join(name);
    fs::write(out("config.toml".into()), cfg.to_toml())?;
    let mut folds = String::from("fold,n_test,accuracy,kappa\n");
    for f in &report.folds {
        fs::write(
            out(format!("fold{}_history.csv", f.fold)),
            f.history.to_csv(),
        )?;
        write_checkpoint(&f.params, &out(format!("fold{}.ckpt", f.fold)))?;
        let _ = writeln!(
            folds,
            "{},{},{},{}",
            f.fold,
            f.eval.indices.len(),
            f.eval.accuracy,
            f.eval.kappa
        );
    }
    fs::write(out("folds.csv".into()), folds)?;
    let line = report.summary.summary_line();
    fs::write(out("summary.txt".into()), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let params = read_checkpoint(&a.checkpoint)?;
    params
        .check_against(&cfg.model)
        .map_err(|e| e.context(a.checkpoint.display()))?;
    let set = load_dataset(&a.data, &cfg)?;
    let data = prepare(&set, &cfg)?;
    let indices: Vec<usize> = match a.subset {
        Subset::All => (0..data.len()).collect(),
        sub => {
            let split = cfg.train.split(&data.labels)?;
            if a.fold >= split.k {
                return Err(Error::Usage(format!(
                    "--fold {} outside 0..{}",
                    a.fold, split.k
                )));
            }
            if sub == Subset::Train {
                split.train_indices(a.fold)
            } else {
                split.test_indices(a.fold)
            }
        }
    };
    let ev = evaluate(&data, &indices, &cfg.model, &params)?;
    fs::create_dir_all(&a.output)?;
    fs::write(a.output.join("confusion.csv"), ev.confusion.to_csv())?;
    let mut preds = String::from("trial,label,predicted\n");
    for ((i, y), p) in ev.indices.iter().zip(&ev.labels).zip(&ev.predictions) {
        let _ = writeln!(preds, "{i},{y},{p}");
    }
    fs::write(a.output.join("predictions.csv"), preds)?;
    println!(
        "accuracy={:.6} kappa={:.6} n={}",
        ev.accuracy,
        ev.kappa,
        indices.len()
    );
    Ok(())
}

fn parse_disable(spec: &str) -> Result<BTreeSet<Ablation>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(str::parse)
        .collect()
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let variants: Vec<BTreeSet<Ablation>> = if a.all_combinations {
        Ablation::all_combinations()
    } else if a.disable.is_empty() {
        std::iter::once(BTreeSet::new())
            .chain(Ablation::ALL.iter().map(|&x| BTreeSet::from([x])))
            .collect()
    } else {
        let mut v = vec![BTreeSet::new()];
        for spec in &a.disable {
            let set = parse_disable(spec)?;
            if !v.contains(&set) {
                v.push(set);
            }
        }
        v
    };
    let set = load_dataset(&a.data, &cfg)?;
    let data = prepare(&set, &cfg)?;
    let mut table = String::from("variant,param_count,mean_acc,mean_kappa\n");
    for disabled in &variants {
        let mc = ablate(&cfg.model, disabled);
        let name = variant_name(disabled);
        let report = cross_validate(&data, &mc, &cfg.train, a.common.jobs())
            .map_err(|e| e.context(&name))?;
        log::info!("{name}: {}", report.summary.summary_line());
        let _ = writeln!(
            table,
            "{name},{},{:.6},{:.6}",
            param_count(&mc),
            report.summary.mean_acc,
            report.summary.mean_kappa
        );
    }
    emit(a.output.as_deref(), &table)
}

/// `# band i: low-high Hz` followed by `freq_hz,magnitude_db` rows from 0 to
/// Nyquist, one block per band, blocks separated by a blank line.
pub fn probe_table(bank: &FilterBank, step: f64) -> Result<String> {
    if !(step > 0.0) {
        return Err(Error::Usage(format!("--step {step} must be positive")));
    }
    let nyq = bank.fs / 2.0;
    let n = (nyq / step + 1e-9).floor() as usize;
    let freqs: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(nyq)).collect();
    let mut s = String::new();
    for (bi, (spec, cascade)) in bank.bands.iter().enumerate() {
        if bi > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "# band {bi}: {}-{} Hz", spec.low_hz, spec.high_hz);
        s.push_str("freq_hz,magnitude_db\n");
        for (f, db) in freqs.iter().zip(frequency_response(cascade, &freqs)?) {
            let _ = writeln!(s, "{f:.1},{db:.4}");
        }
    }
    Ok(s)
}

pub fn cmd_filter_probe(a: &ProbeArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let bank = cfg.bank.build(cfg.model.n_bands, a.fs)?;
    emit(a.output.as_deref(), &probe_table(&bank, a.step)?)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::FilterProbe(a) => cmd_filter_probe(a),
        Command::Import(a) => cmd_import(a),
    }
}

/// Exit status for an error: 2 for usage mistakes, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nfuse_filters = 32\n[train]\nepochs = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.epochs=9".into()]).unwrap();
        assert_eq!(cfg.model.fuse_filters, 32);
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.learning_rate, 1e-6);

        fs::write(&path, "[model]\nfuse_filterz = 32\n").unwrap();
        let msg = RunConfig::load(Some(&path), &[]).unwrap_err().to_string();
        assert!(msg.contains("fuse_filterz"), "{msg}");
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
        assert!(RunConfig::load(None, &["train.colour=3".into()]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn probe_has_one_block_per_band() {
        let bank = BankConfig::default().build(9, 250.0).unwrap();
        let table = probe_table(&bank, 0.1).unwrap();
        assert_eq!(table.matches("freq_hz,magnitude_db").count(), 9);
        let band2: Vec<&str> = table.split("\n\n").nth(1).unwrap().lines().collect();
        let row = band2.iter().find(|l| l.starts_with("9.8,")).unwrap();
        let db: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(db.abs() < 1.0, "{row}");
        let dc: f64 = band2[2].split(',').nth(1).unwrap().parse().unwrap();
        assert!(dc <= -30.0);
        assert_eq!(band2.last().unwrap().split(',').next().unwrap(), "125.0");
    }

    #[test]
    fn disable_lists_parse() {
        assert_eq!(parse_disable("emg, icscm").unwrap().len(), 2);
        assert!(parse_disable("none").unwrap().is_empty());
        assert!(matches!(parse_disable("se"), Err(Error::Usage(_))));
    }
}
