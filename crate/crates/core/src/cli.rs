//! Command-line surface of the pipeline.
//!
//! Every subcommand reads its inputs, runs one library operation and writes
//! one output file. Failures are reported as a single line
//! `error[<category>]: <message>` with exit code 1 (I/O), 2 (config or
//! validation) or 3 (numerical).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::csd::csd_solve;
use crate::error::{Error, Result};
use crate::esd::{train, EsdModel};
use crate::harmonics::{default_fit_degree, ShBasis};
use crate::io::{
    read_checkpoint, read_dataset, read_fodf, read_fsl, read_peaks, write_checkpoint, write_dataset, write_fodf,
    write_fsl, write_log, write_peaks, DatasetFile, PeaksFile, RunConfig,
};
use crate::peaks::{aggregate_scores, score_peaks, select_threshold, volume_fraction_kl, PeakDetector, PeakSet, VoxelScore};
use crate::signal_model::{
    estimate_isotropic_responses, estimate_response, make_dataset, FodfField, ResponseSet, Tissue, VoxelBatch,
    VoxelTruth,
};
use crate::sphere_grid::SphericalGrid;

#[derive(Debug, Parser)]
#[command(name = "sphdeconv", version, about = "Spherical deconvolution of diffusion signals into fiber orientation distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test datasets from the `[simulate]` section.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `train.sdv`, `val.sdv` and `test.sdv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate tissue responses from a dataset with ground truth.
    Response {
        #[arg(long)]
        dataset: PathBuf,
        /// Responses as JSON.
        #[arg(long)]
        out: PathBuf,
        /// WM response degree; defaults to the largest even degree the
        /// smallest shell supports.
        #[arg(long)]
        degree: Option<usize>,
    },
    /// Constrained spherical deconvolution baseline.
    Csd {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        response: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the spherical network without labels.
    EsdTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        response: PathBuf,
        /// Checkpoint of the best-validation epoch.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Predict fODFs with a trained checkpoint.
    EsdInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Extract peaks from an fODF file.
    Peaks {
        #[arg(long)]
        fodf: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relative threshold; overrides selection and the config value.
        #[arg(long)]
        threshold: Option<f64>,
        /// fODFs of a validation split used to select the threshold.
        #[arg(long, requires = "select_dataset")]
        select_fodf: Option<PathBuf>,
        /// Validation dataset with ground truth matching `--select-fodf`.
        #[arg(long, requires = "select_fodf")]
        select_dataset: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score peaks (or fODFs) against ground truth.
    Evaluate {
        /// Dataset holding the ground truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, conflicts_with = "fodf", required_unless_present = "fodf")]
        peaks: Option<PathBuf>,
        #[arg(long)]
        fodf: Option<PathBuf>,
        /// Responses, needed for volume-fraction KL from multi-tissue fODFs.
        #[arg(long)]
        response: Option<PathBuf>,
        /// Summary record as JSON.
        #[arg(long)]
        out: PathBuf,
        /// Per-voxel score table as CSV.
        #[arg(long)]
        per_voxel: Option<PathBuf>,
        /// Directory for one `<score>.csv` table per score, keyed by gradient count.
        #[arg(long)]
        emit_plots: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Write a dataset's gradient table as an FSL bvals/bvecs pair.
    ExportGradients {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        bvals: PathBuf,
        #[arg(long)]
        bvecs: PathBuf,
    },
    /// Build a dataset from an FSL bvals/bvecs pair and a text signal
    /// matrix (one voxel per line, columns in acquisition order).
    ImportSignals {
        #[arg(long)]
        bvals: PathBuf,
        #[arg(long)]
        bvecs: PathBuf,
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), single_line(&e.to_string()));
            e.exit_code()
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(0) => Err(Error::Config("workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_responses(path: &Path) -> Result<ResponseSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: ResponseSet = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    ResponseSet::new(set.responses).map_err(|e| Error::format(path, e.to_string()))
}

fn write_responses(path: &Path, set: &ResponseSet) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(set).expect("responses serialize") + "\n"))
}

fn require_truth<'a>(batch: &'a VoxelBatch, path: &Path) -> Result<&'a [VoxelTruth]> {
    batch
        .truth()
        .ok_or_else(|| Error::invalid(format!("{} has no ground-truth block", path.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Response { dataset, out, degree } => response(&dataset, &out, degree),
        Command::Csd {
            dataset,
            response,
            out,
            config,
        } => {
            let cfg = config.load()?;
            with_workers(cfg.workers, || {
                let batch = read_dataset(&dataset)?.batch;
                let rfs = read_responses(&response)?;
                let result = csd_solve(&batch, &rfs, &rfs.tissues(), &cfg.csd)?;
                write_fodf(&out, &result.field)?;
                print_json(&serde_json::json!({
                    "voxels": batch.n_voxels(),
                    "tissues": rfs.tissues(),
                    "unconverged": result.n_unconverged(),
                    "out": out,
                }));
                Ok(())
            })
        }
        Command::EsdTrain {
            train: train_path,
            val,
            response,
            out,
            log,
            config,
        } => {
            let cfg = config.load()?;
            with_workers(cfg.workers, || {
                let tr = read_dataset(&train_path)?.batch;
                let va = read_dataset(&val)?.batch;
                let rfs = read_responses(&response)?;
                let mut model = EsdModel::new(cfg.esd.clone(), &tr.table().bvals(), &rfs, cfg.csd.clone())?;
                let report = train(&mut model, &tr, &va)?;
                write_checkpoint(&out, &model.checkpoint(report.best_epoch, report.best_val_loss, report.adam.clone()))?;
                if let Some(log) = &log {
                    write_log(log, &report.log)?;
                }
                print_json(&serde_json::json!({
                    "epochs": report.log.len(),
                    "best_epoch": report.best_epoch,
                    "best_val_loss": report.best_val_loss,
                    "out": out,
                }));
                Ok(())
            })
        }
        Command::EsdInfer {
            checkpoint,
            dataset,
            out,
            workers,
        } => with_workers(workers, || {
            let model = EsdModel::from_checkpoint(&read_checkpoint(&checkpoint)?)?;
            let batch = read_dataset(&dataset)?.batch;
            let field = model.infer(&batch)?;
            write_fodf(&out, &field)?;
            print_json(&serde_json::json!({ "voxels": field.n_voxels(), "out": out }));
            Ok(())
        }),
        Command::Peaks {
            fodf,
            out,
            threshold,
            select_fodf,
            select_dataset,
            config,
        } => {
            let cfg = config.load()?;
            with_workers(cfg.workers, || {
                let field = read_fodf(&fodf)?;
                let det = detector(&cfg, &field)?;
                let thr = match (threshold, select_fodf, select_dataset) {
                    (Some(t), _, _) => t,
                    (None, Some(vf), Some(vd)) => {
                        let vfield = read_fodf(&vf)?;
                        let vbatch = read_dataset(&vd)?.batch;
                        let truth = require_truth(&vbatch, &vd)?;
                        let e = &cfg.evaluate;
                        select_threshold(&det, &vfield, truth, &e.threshold_candidates, e.min_separation_deg)?.0
                    }
                    _ => cfg.evaluate.rel_threshold,
                };
                let sets = det.detect_field(&field, thr, cfg.evaluate.min_separation_deg)?;
                write_peaks(
                    &out,
                    &PeaksFile {
                        rel_threshold: thr,
                        min_separation_deg: cfg.evaluate.min_separation_deg,
                        voxels: sets,
                    },
                )?;
                print_json(&serde_json::json!({ "voxels": field.n_voxels(), "rel_threshold": thr, "out": out }));
                Ok(())
            })
        }
        Command::Evaluate {
            truth,
            peaks,
            fodf,
            response,
            out,
            per_voxel,
            emit_plots,
            threshold,
            config,
        } => {
            let cfg = config.load()?;
            with_workers(cfg.workers, || {
                evaluate(
                    &cfg,
                    &truth,
                    peaks.as_deref(),
                    fodf.as_deref(),
                    response.as_deref(),
                    &out,
                    per_voxel.as_deref(),
                    emit_plots.as_deref(),
                    threshold,
                )
            })
        }
        Command::ExportGradients { dataset, bvals, bvecs } => {
            let batch = read_dataset(&dataset)?.batch;
            write_fsl(batch.table(), &bvals, &bvecs)
        }
        Command::ImportSignals {
            bvals,
            bvecs,
            signals,
            out,
        } => import_signals(&bvals, &bvecs, &signals, &out),
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    split: &'static str,
    path: PathBuf,
    voxels: usize,
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let sim = cfg.simulation()?.clone();
    with_workers(cfg.workers, || {
        let ds = make_dataset(&sim)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut files = Vec::new();
        for (split, batch) in [("train", ds.train), ("val", ds.val), ("test", ds.test)] {
            let path = out.join(format!("{split}.sdv"));
            let voxels = batch.n_voxels();
            write_dataset(&path, &DatasetFile { batch, seed: sim.seed })?;
            files.push(ManifestEntry { split, path, voxels });
        }
        print_json(&serde_json::json!({ "seed": sim.seed, "files": files }));
        Ok(())
    })
}

/// Tissues present in the ground truth, in canonical order.
fn tissues_in(truth: &[VoxelTruth]) -> Vec<Tissue> {
    let last = (0..3)
        .rev()
        .find(|&t| truth.iter().any(|r| r.tissue_fractions[t] > 0.0))
        .unwrap_or(0);
    Tissue::ALL[..=last].to_vec()
}

/// Minimum WM fraction of voxels used for the WM response when the data
/// also contain isotropic tissue.
const MIN_WM_FRACTION: f64 = 0.5;

fn response(dataset: &Path, out: &Path, degree: Option<usize>) -> Result<()> {
    let batch = read_dataset(dataset)?.batch;
    let truth = require_truth(&batch, dataset)?;
    let tissues = tissues_in(truth);
    let min_shell = batch.table().shells().iter().map(|s| s.directions.len()).min().unwrap_or(0);
    let basis = ShBasis::new(degree.unwrap_or_else(|| default_fit_degree(min_shell)))?;
    let iso = if tissues.len() > 1 {
        estimate_isotropic_responses(&batch, &tissues)?
    } else {
        Vec::new()
    };
    let single: Vec<usize> = (0..batch.n_voxels())
        .filter(|&v| truth[v].n_fibers() == 1 && (tissues.len() == 1 || truth[v].tissue_fractions[0] >= MIN_WM_FRACTION))
        .collect();
    let wm_batch = if iso.is_empty() {
        batch.select(&single)
    } else {
        isolate_wm(&batch, &single, &iso)?
    };
    let mut all = vec![estimate_response(&wm_batch, basis)?];
    all.extend(iso);
    let set = ResponseSet::new(all)?;
    write_responses(out, &set)?;
    print_json(&serde_json::json!({
        "tissues": set.tissues(),
        "wm_voxels": single.len(),
        "wm_degree": basis.l_max(),
        "out": out,
    }));
    Ok(())
}

/// Removes the isotropic contributions from the selected voxels and
/// rescales them to a pure WM signal.
fn isolate_wm(batch: &VoxelBatch, voxels: &[usize], iso: &[crate::signal_model::ResponseFunction]) -> Result<VoxelBatch> {
    let table = batch.table();
    let truth = batch.truth().expect("checked by caller");
    let mut iso_cols = vec![vec![0.0; table.n_samples()]; 3];
    for rf in iso {
        let col = &mut iso_cols[rf.tissue.index()];
        col[..table.b0_count()].fill(rf.b0_signal);
        for (k, s) in table.shells().iter().enumerate() {
            let value = rf.signal_at(s.bval, 1.0)?;
            col[table.shell_columns(k)].fill(value);
        }
    }
    let mut signals = Vec::with_capacity(voxels.len() * table.n_samples());
    let mut kept = Vec::with_capacity(voxels.len());
    for &v in voxels {
        let f = truth[v].tissue_fractions;
        signals.extend(batch.row(v).iter().enumerate().map(|(j, s)| {
            let isotropic = f[1] * iso_cols[1][j] + f[2] * iso_cols[2][j];
            (s - isotropic) / f[0]
        }));
        kept.push(VoxelTruth {
            tissue_fractions: [1.0, 0.0, 0.0],
            ..truth[v].clone()
        });
    }
    VoxelBatch::new(table.clone(), signals, Some(kept))
}

fn detector(cfg: &RunConfig, field: &FodfField) -> Result<PeakDetector> {
    PeakDetector::new(SphericalGrid::new(cfg.evaluate.peak_grid_nside)?, field.wm().basis)
}

#[derive(Serialize)]
struct Summary {
    n_voxels: usize,
    success_rate: f64,
    mean_angular_error_deg: Option<f64>,
    over: f64,
    under: f64,
    kl: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &RunConfig,
    truth_path: &Path,
    peaks: Option<&Path>,
    fodf: Option<&Path>,
    response: Option<&Path>,
    out: &Path,
    per_voxel: Option<&Path>,
    emit_plots: Option<&Path>,
    threshold: Option<f64>,
) -> Result<()> {
    let batch = read_dataset(truth_path)?.batch;
    let truth = require_truth(&batch, truth_path)?;
    let field = fodf.map(read_fodf).transpose()?;
    let sets: Vec<PeakSet> = match (peaks, &field) {
        (Some(p), _) => read_peaks(p)?.voxels,
        (None, Some(f)) => detector(cfg, f)?.detect_field(
            f,
            threshold.unwrap_or(cfg.evaluate.rel_threshold),
            cfg.evaluate.min_separation_deg,
        )?,
        (None, None) => return Err(Error::invalid("evaluate needs --peaks or --fodf")),
    };
    let scores = score_peaks(&sets, truth)?;
    let s = aggregate_scores(&scores)?;
    let kl = match (&field, response) {
        (Some(f), Some(r)) if f.parts().len() > 1 => {
            let gt: Vec<[f64; 3]> = truth.iter().map(|t| t.tissue_fractions).collect();
            Some(volume_fraction_kl(&gt, f, &read_responses(r)?, cfg.evaluate.fraction_convention)?)
        }
        _ => None,
    };
    let summary = Summary {
        n_voxels: s.n_voxels,
        success_rate: s.success_rate,
        mean_angular_error_deg: s.mean_angular_error_deg.is_finite().then_some(s.mean_angular_error_deg),
        over: s.over,
        under: s.under,
        kl,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(out, &(json + "\n"))?;
    if let Some(path) = per_voxel {
        write_text(path, &per_voxel_table(&scores, truth, &sets))?;
    }
    if let Some(dir) = emit_plots {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let grads = batch.table().shells().iter().map(|s| s.directions.len()).min().unwrap_or(0);
        let mut rows = vec![
            ("success_rate", summary.success_rate),
            ("mean_angular_error_deg", s.mean_angular_error_deg),
            ("over", summary.over),
            ("under", summary.under),
        ];
        if let Some(kl) = kl {
            rows.push(("kl", kl));
        }
        for (name, value) in rows {
            write_text(&dir.join(format!("{name}.csv")), &format!("gradients,{name}\n{grads},{value}\n"))?;
        }
    }
    print_json(&summary);
    Ok(())
}

fn per_voxel_table(scores: &[VoxelScore], truth: &[VoxelTruth], sets: &[PeakSet]) -> String {
    let mut t = String::from("voxel,n_true,n_pred,n_matched,n_over,n_under,success,mean_angle_deg\n");
    for (v, ((s, tr), p)) in scores.iter().zip(truth).zip(sets).enumerate() {
        let mean = if s.matched.is_empty() {
            f64::NAN
        } else {
            s.matched.iter().map(|m| m.angle_deg).sum::<f64>() / s.matched.len() as f64
        };
        t.push_str(&format!(
            "{v},{},{},{},{},{},{},{mean}\n",
            tr.n_fibers(),
            p.len(),
            s.matched.len(),
            s.n_over,
            s.n_under,
            s.success as u8
        ));
    }
    t
}

fn import_signals(bvals: &Path, bvecs: &Path, signals: &Path, out: &Path) -> Result<()> {
    let fsl = read_fsl(bvals, bvecs)?;
    let text = std::fs::read_to_string(signals).map_err(|e| Error::io(signals, e))?;
    let mut data = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::format(signals, format!("line {}: cannot parse {s:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != fsl.order.len() {
            return Err(Error::format(
                signals,
                format!("line {}: {} values for {} gradient columns", i + 1, row.len(), fsl.order.len()),
            ));
        }
        data.extend(fsl.order.iter().map(|&j| row[j]));
    }
    let batch = VoxelBatch::new(fsl.table, data, None)?;
    let voxels = batch.n_voxels();
    write_dataset(out, &DatasetFile { batch, seed: 0 })?;
    print_json(&serde_json::json!({ "voxels": voxels, "out": out }));
    Ok(())
}
