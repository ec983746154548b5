//! The commands behind the CLI, as library functions.
//!
//! A dataset root holds `pretrain/`, `train/` and `test/`, each with its own
//! `manifest.csv` (the layout [`crate::data_io::synth_generate`] writes).
//! Output directories receive the resolved `config.json` plus the command's
//! artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::checkpoint::{self, export_student, load_state, load_student, save_state, write_atomic};
use crate::config::{AugmentVariant, RunConfig};
use crate::data_io::{load_dataset, synth_generate};
use crate::encoder::{init_params, EncoderConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::eval::{fine_tune, linear_probe, EvalReport, LabeledSet};
use crate::trainer::{train, Control, MixupMode, StepMetrics, TrainConfig, TrainObserver, TrainState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const STUDENT_EXPORT: &str = "student.c2l";

/// Runs `f` over `items` on up to `threads` workers. Results keep the input
/// order; the first error wins.
pub fn par_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let n = items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<Result<R>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = slots[i].lock().expect("poisoned").take().expect("taken once");
                *results[i].lock().expect("poisoned") = Some(f(item));
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().expect("poisoned").expect("every slot ran"))
        .collect()
}

fn manifest_in(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}

/// The pretraining images: `data/pretrain/manifest.csv`, or `data` itself
/// when it directly holds a manifest.
pub fn load_pretrain_images(data: &Path, encoder: &EncoderConfig) -> Result<ImageBatch> {
    let direct = manifest_in(data);
    let path = if direct.exists() { direct } else { manifest_in(&data.join("pretrain")) };
    Ok(load_dataset(&path, Some(encoder.input_size))?.images)
}

/// Labeled `train` and `test` splits under `data`.
pub fn load_labeled(data: &Path, size: [usize; 2]) -> Result<(LabeledSet, LabeledSet)> {
    let train = load_dataset(&manifest_in(&data.join("train")), Some(size))?.labeled()?;
    let test = load_dataset(&manifest_in(&data.join("test")), Some(size))?.labeled()?;
    Ok((train, test))
}

pub fn cmd_synth(run: &RunConfig, out: &Path) -> Result<()> {
    synth_generate(&run.synth, out)?;
    run.echo(out)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Full checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainState,
    /// Set once every configured epoch has run.
    pub export: Option<PathBuf>,
}

/// Appends one JSON line per step and maintains checkpoints.
struct RunObserver {
    metrics: BufWriter<File>,
    out: PathBuf,
    every: usize,
    stop_after: Option<usize>,
    epochs_run: usize,
    epochs_total: usize,
    started: Instant,
    last: Option<StepMetrics>,
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        let path = self.out.join(METRICS_FILE);
        let mut line = serde_json::to_string(m)?;
        line.push('\n');
        self.metrics
            .write_all(line.as_bytes())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))?;
        self.last = Some(m.clone());
        Ok(())
    }

    fn on_epoch_end(&mut self, state: &TrainState) -> Result<Control> {
        save_state(&self.out.join(LAST_CHECKPOINT), state)?;
        if self.every > 0 && state.epoch % self.every == 0 {
            let p = self.out.join("checkpoints").join(format!("epoch_{:04}.ckpt", state.epoch));
            save_state(&p, state)?;
        }
        if let Some(m) = &self.last {
            log::info!(
                "epoch {}/{} step {} lr {:.2e} loss_A {} loss_M {} top1 {:.3} ({:.0}s)",
                state.epoch,
                self.epochs_total,
                m.step,
                m.lr,
                fmt_opt(m.loss_a),
                fmt_opt(m.loss_m),
                m.top1,
                self.started.elapsed().as_secs_f64()
            );
        }
        self.epochs_run += 1;
        Ok(match self.stop_after {
            Some(n) if self.epochs_run >= n => Control::Stop,
            _ => Control::Continue,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Keeps only metric records of steps before `iteration`, so a resumed run
/// does not duplicate the steps it is about to replay.
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        // a torn final line from a crash is dropped along with later steps
        match serde_json::from_str::<StepMetrics>(&line) {
            Ok(m) if m.step < iteration => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// C2L pretraining with a metrics log, periodic full checkpoints and a
/// final student export.
pub fn cmd_pretrain(run: &RunConfig, data: &Path, out: &Path, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    let cfg = &run.train;
    let images = load_pretrain_images(data, &cfg.encoder)?;
    run.echo(out)?;
    let state = match &opts.resume {
        Some(p) => {
            let s = load_state(p)?;
            log::info!("resuming from {} at epoch {} (step {})", p.display(), s.epoch, s.iteration);
            Some(s)
        }
        None => None,
    };
    let metrics_path = out.join(METRICS_FILE);
    match &state {
        Some(s) => truncate_metrics(&metrics_path, s.iteration)?,
        None => {
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            }
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut obs = RunObserver {
        metrics: BufWriter::new(file),
        out: out.to_path_buf(),
        every: run.checkpoint_every,
        stop_after: opts.stop_after,
        epochs_run: 0,
        epochs_total: cfg.epochs,
        started: Instant::now(),
        last: None,
    };
    let state = train(cfg, &images, state, &mut obs)?;
    let export = if state.epoch >= cfg.epochs {
        let p = out.join(STUDENT_EXPORT);
        export_student(&p, &state.student)?;
        Some(p)
    } else {
        None
    };
    Ok(PretrainOutcome { state, export })
}

/// Where an evaluated encoder comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderSource {
    Checkpoint(PathBuf),
    /// Fresh initialization seeded by the evaluation seed.
    Random,
}

impl EncoderSource {
    pub fn load(&self, encoder: &EncoderConfig, seed: u64) -> Result<NetworkParams> {
        match self {
            EncoderSource::Checkpoint(p) => load_student(p, None),
            EncoderSource::Random => init_params(encoder, seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Probe,
    Finetune,
}

impl EvalKind {
    pub fn name(self) -> &'static str {
        match self {
            EvalKind::Probe => "probe",
            EvalKind::Finetune => "finetune",
        }
    }
}

/// Mean over the reports' defined means.
pub fn mean_of(reports: &[EvalReport]) -> Option<f64> {
    let v: Vec<f64> = reports.iter().filter_map(|r| r.mean).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Linear probe or fine-tune for each seed. Writes `<kind>.csv` (one row
/// per class and seed) and `<kind>_summary.json`.
pub fn cmd_eval(
    run: &RunConfig,
    kind: EvalKind,
    data: &Path,
    out: &Path,
    source: &EncoderSource,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    if seeds.is_empty() {
        return Err(Error::config("at least one evaluation seed is required"));
    }
    let size = match source {
        EncoderSource::Checkpoint(p) => checkpoint::read_manifest(p)?.encoder.input_size,
        EncoderSource::Random => run.train.encoder.input_size,
    };
    let (train_set, test_set) = load_labeled(data, size)?;
    run.echo(out)?;
    let reports = par_map(seeds.to_vec(), run.worker_threads(), |seed| {
        let params = source.load(&run.train.encoder, seed)?;
        match kind {
            EvalKind::Probe => {
                let cfg = crate::eval::ProbeConfig { seed, ..run.probe.clone() };
                linear_probe(&params, &train_set, &test_set, &cfg)
            }
            EvalKind::Finetune => {
                let cfg = crate::eval::FinetuneConfig { seed, ..run.finetune.clone() };
                fine_tune(&params, &train_set, &test_set, &cfg).map(|(r, _)| r)
            }
        }
    })?;
    let mut csv = String::from(EvalReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    write_atomic(&out.join(format!("{}.csv", kind.name())), csv.as_bytes())?;
    let summary = serde_json::json!({
        "kind": kind.name(),
        "source": match source {
            EncoderSource::Checkpoint(p) => p.display().to_string(),
            EncoderSource::Random => "random".to_string(),
        },
        "seeds": seeds,
        "mean_auroc": mean_of(&reports),
        "reports": reports,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    write_atomic(&out.join(format!("{}_summary.json", kind.name())), text.as_bytes())?;
    Ok(reports)
}

/// Copies the student out of any checkpoint into a student-only export.
pub fn cmd_export(checkpoint: &Path, out: &Path) -> Result<()> {
    let student = load_student(checkpoint, None)?;
    export_student(out, &student)
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: MixupMode,
    pub queue_len: usize,
    pub augment: AugmentVariant,
    pub seed: u64,
    pub mean_auroc: Option<f64>,
    /// Mean top-1 over the last pretraining epoch.
    pub final_top1: f64,
    pub seconds: f64,
}

/// Cells sharing a `(mode, queue_len, augment)` setting, across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: MixupMode,
    pub queue_len: usize,
    pub augment: AugmentVariant,
    pub seeds: usize,
    pub mean_auroc: Option<f64>,
    pub median_auroc: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Groups cells by setting and sorts by mean AUROC, best first. Settings
/// without any defined AUROC go last; ties keep grid order.
pub fn summarize(cells: &[AblationCell]) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for c in cells {
        if rows
            .iter()
            .any(|r| (r.mode, r.queue_len, r.augment) == (c.mode, c.queue_len, c.augment))
        {
            continue;
        }
        let vals: Vec<f64> = cells
            .iter()
            .filter(|d| (d.mode, d.queue_len, d.augment) == (c.mode, c.queue_len, c.augment))
            .filter_map(|d| d.mean_auroc)
            .collect();
        rows.push(AblationRow {
            mode: c.mode,
            queue_len: c.queue_len,
            augment: c.augment,
            seeds: vals.len(),
            mean_auroc: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            median_auroc: median(&vals),
        });
    }
    rows.sort_by(|a, b| match (a.mean_auroc, b.mean_auroc) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    rows
}

struct LastEpochTop1 {
    epoch: usize,
    sum: f64,
    count: usize,
    metrics: Option<BufWriter<File>>,
}

impl TrainObserver for LastEpochTop1 {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        if m.epoch != self.epoch {
            (self.epoch, self.sum, self.count) = (m.epoch, 0.0, 0);
        }
        self.sum += m.top1;
        self.count += 1;
        if let Some(w) = &mut self.metrics {
            let line = serde_json::to_string(m)? + "\n";
            w.write_all(line.as_bytes()).map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }
}

/// Pretrains and probes one grid cell. With `cell_dir`, its metrics log and
/// student export are written there.
pub fn run_cell(
    run: &RunConfig,
    cell: (MixupMode, usize, AugmentVariant, u64),
    images: &ImageBatch,
    train_set: &LabeledSet,
    test_set: &LabeledSet,
    cell_dir: Option<&Path>,
) -> Result<AblationCell> {
    let (mode, queue_len, augment, seed) = cell;
    let started = Instant::now();
    let cfg = TrainConfig {
        mixup: mode,
        queue_len,
        augment: augment.apply(&run.train.augment),
        seed,
        epochs: run.ablate.epochs.unwrap_or(run.train.epochs),
        ..run.train.clone()
    };
    let metrics = match cell_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(METRICS_FILE);
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };
    let mut obs = LastEpochTop1 {
        epoch: 0,
        sum: 0.0,
        count: 0,
        metrics,
    };
    let state = train(&cfg, images, None, &mut obs)?;
    if let Some(mut w) = obs.metrics.take() {
        w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
    }
    if let Some(d) = cell_dir {
        export_student(&d.join(STUDENT_EXPORT), &state.student)?;
    }
    let probe_cfg = crate::eval::ProbeConfig { seed, ..run.probe.clone() };
    let report = linear_probe(&state.student, train_set, test_set, &probe_cfg)?;
    let cell = AblationCell {
        mode,
        queue_len,
        augment,
        seed,
        mean_auroc: report.mean,
        final_top1: obs.sum / obs.count.max(1) as f64,
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "cell {} q={} aug={} seed={}: probe {} top1 {:.3} ({:.0}s)",
        mode,
        queue_len,
        augment.name(),
        seed,
        fmt_opt(cell.mean_auroc),
        cell.final_top1,
        cell.seconds
    );
    Ok(cell)
}

/// Every `(mode, queue_len, augment, seed)` combination, in grid order.
pub fn grid(run: &RunConfig) -> Vec<(MixupMode, usize, AugmentVariant, u64)> {
    let a = &run.ablate;
    let mut cells = Vec::new();
    for &m in &a.modes {
        for &q in &a.queue_lens {
            for &g in &a.augment {
                for &s in &a.seeds {
                    cells.push((m, q, g, s));
                }
            }
        }
    }
    cells
}

fn cell_name(c: &(MixupMode, usize, AugmentVariant, u64)) -> String {
    let mode = c.0.name().replace('+', "-");
    format!("{mode}_q{}_{}_s{}", c.1, c.2.name(), c.3)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode,queue_len,augment,seeds,mean_auroc,median_auroc\n");
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode,
            r.queue_len,
            r.augment.name(),
            r.seeds,
            f(r.mean_auroc),
            f(r.median_auroc)
        ));
    }
    s
}

/// The ablation grid. Cells run in parallel up to the worker limit, each
/// in its own directory under `out/cells/`.
pub fn cmd_ablate(run: &RunConfig, data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let enc = &run.train.encoder;
    let images = load_pretrain_images(data, enc)?;
    let (train_set, test_set) = load_labeled(data, enc.input_size)?;
    run.echo(out)?;
    let cells = grid(run);
    let results = par_map(cells, run.worker_threads(), |c| {
        let dir = out.join("cells").join(cell_name(&c));
        run_cell(run, c, &images, &train_set, &test_set, Some(&dir))
    })?;
    let mut cells_csv = String::from("mode,queue_len,augment,seed,mean_auroc,final_top1,seconds\n");
    for c in &results {
        cells_csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.1}\n",
            c.mode,
            c.queue_len,
            c.augment.name(),
            c.seed,
            c.mean_auroc.map(|x| format!("{x:.6}")).unwrap_or_default(),
            c.final_top1,
            c.seconds
        ));
    }
    write_atomic(&out.join("ablation_cells.csv"), cells_csv.as_bytes())?;
    let rows = summarize(&results);
    write_atomic(&out.join("ablation_summary.csv"), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}
