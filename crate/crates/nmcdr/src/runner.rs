//! Experiment orchestration: prepare/run/synth/stability/sweep with
//! content-addressed, atomically written artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{sha256_hex, ConfigError, ExperimentConfig};
use crate::data::{
    apply_density, build_cross, ingest, split, CrossDomainDataset, DataError, DomainStats,
    SplitSpec,
};
use crate::eval::stability::{CompressedModel, StabilityDiagnostic, StabilityError};
use crate::eval::{evaluate, DomainReport, EvalError, EvalTarget};
use crate::model::{save_checkpoint, ModelError};
use crate::synth::{generate, write_tsv, SynthError};
use crate::training::{train, EpochRecord, TrainError};

#[derive(Error, Debug)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Artifact { path: String, msg: String },
    #[error("missing input: {0}")]
    MissingInput(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.display().to_string(), source }
}

/// Write via a temp name in the same directory, then rename into place, so
/// partially written artifacts are never visible under their final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| RunnerError::Artifact { path: path.display().to_string(), msg: e.to_string() })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunnerError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| RunnerError::Artifact { path: path.display().to_string(), msg: e.to_string() })
}

/// Prepared dataset archive written by `prepare`.
#[derive(Serialize, Deserialize)]
pub struct PreparedArchive {
    pub config_hash: String,
    pub data_hash: String,
    pub dataset: CrossDomainDataset,
    pub split: SplitSpec,
}

/// Statistics record for one prepared experiment.
#[derive(Serialize, Deserialize)]
pub struct StatsRecord {
    pub domain_z: DomainStats,
    pub domain_zbar: DomainStats,
    pub overlap: usize,
    pub full_intersection: usize,
    pub k_u: f64,
    pub d_s: f64,
    pub config_hash: String,
    pub data_hash: String,
}

/// Ingest both domains, apply the overlap/density settings, split, and write
/// `dataset.json` + `stats.json` into `out_dir`.
pub fn prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PreparedArchive, RunnerError> {
    cfg.validate()?;
    let path_z = cfg
        .data
        .domain_z
        .as_ref()
        .ok_or_else(|| RunnerError::MissingInput("data.domain_z path".into()))?;
    let path_zbar = cfg
        .data
        .domain_zbar
        .as_ref()
        .ok_or_else(|| RunnerError::MissingInput("data.domain_zbar path".into()))?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut hasher_input = Vec::new();
    for p in [path_z, path_zbar] {
        hasher_input.extend_from_slice(&std::fs::read(p).map_err(io_err(p))?);
    }
    let data_hash = sha256_hex(&hasher_input);

    let (index_z, _) = ingest(path_z, cfg.data.format, cfg.data.min_interactions)?;
    let (index_zbar, _) = ingest(path_zbar, cfg.data.format, cfg.data.min_interactions)?;
    let mut dataset = build_cross(index_z, index_zbar, cfg.data.k_u, cfg.seed)?;
    if cfg.data.d_s < 1.0 {
        dataset = apply_density(&dataset, cfg.data.d_s, cfg.seed)?;
    }
    let split = split(&dataset, cfg.data.split_mode, cfg.data.validation, cfg.seed);

    let stats = StatsRecord {
        domain_z: dataset.domain_z.stats(),
        domain_zbar: dataset.domain_zbar.stats(),
        overlap: dataset.overlap.len(),
        full_intersection: dataset.full_intersection,
        k_u: dataset.k_u,
        d_s: dataset.density_factor,
        config_hash: cfg.hash(),
        data_hash: data_hash.clone(),
    };
    write_json(&out_dir.join("stats.json"), &stats)?;
    let archive = PreparedArchive { config_hash: cfg.hash(), data_hash, dataset, split };
    let bytes = serde_json::to_vec(&archive).map_err(|e| RunnerError::Artifact {
        path: out_dir.join("dataset.json").display().to_string(),
        msg: e.to_string(),
    })?;
    atomic_write(&out_dir.join("dataset.json"), &bytes)?;
    Ok(archive)
}

pub fn load_prepared(dir: &Path) -> Result<PreparedArchive, RunnerError> {
    read_json(&dir.join("dataset.json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub k_u: f64,
    pub d_s: f64,
    pub flags: crate::model::AblationFlags,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub checkpoint_hash: String,
    pub skipped_users: usize,
    pub epochs_run: usize,
}

/// Final report written by `run` as `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub metadata: RunMetadata,
    pub z: DomainReport,
    pub zbar: DomainReport,
}

impl RunReport {
    pub fn mean_ndcg(&self) -> f64 {
        (self.z.ndcg10 + self.zbar.ndcg10) / 2.0
    }

    pub fn mean_hr(&self) -> f64 {
        (self.z.hr10 + self.zbar.hr10) / 2.0
    }
}

/// Train and evaluate on prepared artifacts (preparing them on the fly when
/// `out_dir` has none), writing `history.jsonl`, `checkpoint.nmck`,
/// `report.json` and optionally `peruser.csv`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport, RunnerError> {
    let archive = if out_dir.join("dataset.json").exists() {
        load_prepared(out_dir)?
    } else {
        prepare(cfg, out_dir)?
    };
    run_with(cfg, archive, out_dir)
}

/// As [`run`], but with an already-loaded prepared archive.
pub fn run_with(
    cfg: &ExperimentConfig,
    archive: PreparedArchive,
    out_dir: &Path,
) -> Result<RunReport, RunnerError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let PreparedArchive { data_hash, dataset, split, .. } = archive;

    let outcome =
        train(&dataset, &split, &cfg.model, &cfg.train, &cfg.loss, &cfg.ablation, cfg.seed)?;

    let mut history_bytes = Vec::new();
    for record in &outcome.history {
        serde_json::to_writer(&mut history_bytes, record).map_err(|e| RunnerError::Artifact {
            path: out_dir.join("history.jsonl").display().to_string(),
            msg: e.to_string(),
        })?;
        history_bytes.push(b'\n');
    }
    atomic_write(&out_dir.join("history.jsonl"), &history_bytes)?;

    let ck_path = out_dir.join("checkpoint.nmck");
    save_checkpoint(&outcome.params.set, &cfg.hash(), &ck_path)?;
    let checkpoint_hash = sha256_hex(&std::fs::read(&ck_path).map_err(io_err(&ck_path))?);

    let eval_report = evaluate(
        &outcome.params,
        &dataset,
        &split,
        &cfg.model,
        &cfg.ablation,
        &cfg.eval,
        cfg.seed,
        EvalTarget::Test,
    )?;
    if let Some(rows) = &eval_report.per_user {
        let mut csv = String::from("domain,user,rank,hit,ndcg\n");
        for r in rows {
            csv.push_str(&format!("{},{},{},{},{}\n", r.domain, r.user, r.rank, r.hit, r.ndcg));
        }
        atomic_write(&out_dir.join("peruser.csv"), csv.as_bytes())?;
    }

    let report = RunReport {
        metadata: RunMetadata {
            k_u: dataset.k_u,
            d_s: dataset.density_factor,
            flags: cfg.ablation,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            data_hash,
            checkpoint_hash,
            skipped_users: eval_report.skipped_users,
            epochs_run: outcome.epochs_run,
        },
        z: eval_report.z,
        zbar: eval_report.zbar,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Generate the synthetic domains and ground truth into `out_dir`; returns
/// the two tsv paths.
pub fn synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), RunnerError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let data = generate(&cfg.synth)?;
    let path_z = out_dir.join("domain_z.tsv");
    let path_zbar = out_dir.join("domain_zbar.tsv");
    write_tsv(&data.rows_z, &path_z)?;
    write_tsv(&data.rows_zbar, &path_zbar)?;
    write_json(&out_dir.join("ground_truth.json"), &data.truth)?;
    Ok((path_z, path_zbar))
}

#[derive(Serialize, Deserialize)]
pub struct StabilityArtifact {
    pub config_hash: String,
    pub diagnostic: StabilityDiagnostic,
}

/// Run the compressed-model stability diagnostic and write `stability.json`.
pub fn stability(cfg: &ExperimentConfig, out_dir: &Path) -> Result<StabilityDiagnostic, RunnerError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let model = CompressedModel::random(&cfg.stability)?;
    let diagnostic =
        model.diagnose(cfg.stability.trials, cfg.stability.perturb_scale, cfg.stability.seed)?;
    write_json(
        &out_dir.join("stability.json"),
        &StabilityArtifact { config_hash: cfg.hash(), diagnostic: diagnostic.clone() },
    )?;
    Ok(diagnostic)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub hr_mean: f64,
    pub hr_std: f64,
    pub seeds: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run `param=value` x `seeds` experiments under `out_dir/runs/...` and write
/// `plotdata/<param>.csv` with per-value means and standard deviations.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SweepPoint>, RunnerError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    struct Cell {
        value: String,
        seed: u64,
        dir: PathBuf,
        cfg: ExperimentConfig,
    }
    let mut cells = Vec::new();
    for value in values {
        for &seed in seeds {
            let dir = out_dir
                .join("runs")
                .join(format!("{}={}", param.replace('.', "_"), value))
                .join(format!("seed{seed}"));
            let mut cell_cfg = cfg.with_override(&format!("{param}={value}"))?;
            cell_cfg.seed = seed;
            cells.push(Cell { value: value.clone(), seed, dir, cfg: cell_cfg });
        }
    }

    let results: Vec<Result<(String, u64, RunReport), RunnerError>> = if jobs > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cells
                .chunks((cells.len() + jobs - 1) / jobs.max(1))
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|c| run(&c.cfg, &c.dir).map(|r| (c.value.clone(), c.seed, r)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("sweep worker")).collect()
        })
    } else {
        cells
            .iter()
            .map(|c| run(&c.cfg, &c.dir).map(|r| (c.value.clone(), c.seed, r)))
            .collect()
    };

    let mut by_value: std::collections::BTreeMap<String, Vec<RunReport>> = Default::default();
    let mut ordered = Vec::new();
    for r in results {
        let (value, _seed, report) = r?;
        if !ordered.contains(&value) {
            ordered.push(value.clone());
        }
        by_value.entry(value).or_default().push(report);
    }
    // Keep the caller's value order, not the map's.
    let mut points = Vec::new();
    for value in values {
        let reports = &by_value[value];
        let ndcgs: Vec<f64> = reports.iter().map(RunReport::mean_ndcg).collect();
        let hrs: Vec<f64> = reports.iter().map(RunReport::mean_hr).collect();
        let (ndcg_mean, ndcg_std) = mean_std(&ndcgs);
        let (hr_mean, hr_std) = mean_std(&hrs);
        points.push(SweepPoint {
            value: value.clone(),
            ndcg_mean,
            ndcg_std,
            hr_mean,
            hr_std,
            seeds: reports.len(),
        });
    }

    let plot_dir = out_dir.join("plotdata");
    std::fs::create_dir_all(&plot_dir).map_err(io_err(&plot_dir))?;
    let leaf = param.rsplit('.').next().unwrap_or(param);
    let mut csv = String::from("value,ndcg_mean,ndcg_std,hr_mean,hr_std,seeds\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.value, p.ndcg_mean, p.ndcg_std, p.hr_mean, p.hr_std, p.seeds
        ));
    }
    atomic_write(&plot_dir.join(format!("{leaf}.csv")), csv.as_bytes())?;
    Ok(points)
}

/// Aggregate across run directories: per-domain mean, standard deviation and
/// best, for multi-seed reporting.
#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub ndcg_z_mean: f64,
    pub ndcg_z_std: f64,
    pub ndcg_z_best: f64,
    pub hr_z_mean: f64,
    pub hr_z_std: f64,
    pub hr_z_best: f64,
    pub ndcg_zbar_mean: f64,
    pub ndcg_zbar_std: f64,
    pub ndcg_zbar_best: f64,
    pub hr_zbar_mean: f64,
    pub hr_zbar_std: f64,
    pub hr_zbar_best: f64,
}

pub fn aggregate_reports(dirs: &[PathBuf]) -> Result<(Vec<RunReport>, Aggregate), RunnerError> {
    let mut reports = Vec::new();
    for d in dirs {
        let path = if d.is_dir() { d.join("report.json") } else { d.clone() };
        reports.push(read_json::<RunReport>(&path)?);
    }
    let col = |f: fn(&RunReport) -> f64| -> (f64, f64, f64) {
        let vals: Vec<f64> = reports.iter().map(f).collect();
        let (m, s) = mean_std(&vals);
        let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (m, s, best)
    };
    let (nz_m, nz_s, nz_b) = col(|r| r.z.ndcg10);
    let (hz_m, hz_s, hz_b) = col(|r| r.z.hr10);
    let (nb_m, nb_s, nb_b) = col(|r| r.zbar.ndcg10);
    let (hb_m, hb_s, hb_b) = col(|r| r.zbar.hr10);
    let agg = Aggregate {
        runs: reports.len(),
        ndcg_z_mean: nz_m,
        ndcg_z_std: nz_s,
        ndcg_z_best: nz_b,
        hr_z_mean: hz_m,
        hr_z_std: hz_s,
        hr_z_best: hz_b,
        ndcg_zbar_mean: nb_m,
        ndcg_zbar_std: nb_s,
        ndcg_zbar_best: nb_b,
        hr_zbar_mean: hb_m,
        hr_zbar_std: hb_s,
        hr_zbar_best: hb_b,
    };
    Ok((reports, agg))
}

/// Read back a run's history lines.
pub fn load_history(dir: &Path) -> Result<Vec<EpochRecord>, RunnerError> {
    let path = dir.join("history.jsonl");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| RunnerError::Artifact {
                path: path.display().to_string(),
                msg: e.to_string(),
            })
        })
        .collect()
}
