//! The CLI verbs as library functions.
//!
//! Run directory layout:
//!
//! ```text
//! out/data/                dataset (see DatasetStore) + dataset.json
//! out/oracle/oracle.json   oracle mIoU per step and domain
//! out/oracle/oracle.segc
//! out/<variant>/step{t}.segc, bank.styb, trace.csv, audit.json, report.{csv,json}
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Variant};
use crate::continual::{run_protocol, write_trace, ProtocolRun};
use crate::data::{
    build_step_dataset, decode_ppm, encode_ppm, external_seed, generate_eval_samples, AccessRecord,
    DatasetStore, LabeledSample,
};
use crate::eval::{
    evaluate_run, load_eval_sets, miou, oracle_report, read_report, report_csv, train_oracle,
    write_report, MetricsReport, OracleReport,
};
use crate::model::Checkpoint;
use crate::style::StyleBank;
use crate::{Error, Result};

const DATASET_META: &str = "dataset.json";

/// Generation parameters recorded next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    fingerprint: String,
    content_hash: String,
}

fn fingerprint(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn dataset_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    Ok(fingerprint(&serde_json::json!({
        "schedule": cfg.schedule,
        "domains": cfg.domains()?,
        "external": cfg.external()?,
        "h": cfg.h, "w": cfg.w, "n_train": cfg.n_train, "n_eval": cfg.n_eval, "seed": cfg.seed,
    })))
}

fn oracle_fingerprint(cfg: &ExperimentConfig, dataset_hash: &str) -> String {
    fingerprint(&serde_json::json!({
        "dataset": dataset_hash, "epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed, "schedule": cfg.schedule,
    }))
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

pub fn variant_dir(cfg: &ExperimentConfig, variant: &Variant) -> PathBuf {
    cfg.output_dir
        .join(variant.name().replace([':', '+', '/'], "_"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// A generated dataset ready for training.
pub struct Dataset {
    pub store: DatasetStore,
    pub content_hash: String,
}

/// Generates the dataset for `cfg`. An existing dataset with the same
/// generation parameters is reused; a different one needs `overwrite`.
pub fn cmd_generate(cfg: &ExperimentConfig, overwrite: bool) -> Result<Dataset> {
    cfg.validate()?;
    let root = data_dir(cfg);
    let meta_path = root.join(DATASET_META);
    let fp = dataset_fingerprint(cfg)?;
    if root.exists() {
        let existing: Option<DatasetMeta> = fs::read(&meta_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        match existing {
            Some(m) if m.fingerprint == fp && !overwrite => {
                return Ok(Dataset {
                    store: DatasetStore::new(&root),
                    content_hash: m.content_hash,
                });
            }
            _ if !overwrite => {
                return Err(Error::Refused(format!(
                    "{} holds a different dataset; pass --overwrite to replace it",
                    root.display()
                )))
            }
            _ => remove_dir(&root)?,
        }
    }
    let store = DatasetStore::new(&root);
    let domains = cfg.domains()?;
    for t in 0..cfg.schedule.num_steps() {
        let ds = build_step_dataset(
            &cfg.schedule,
            &domains,
            t,
            cfg.n_train,
            cfg.n_eval,
            cfg.seed,
            (cfg.h, cfg.w),
        )?;
        store.write_step(&ds)?;
    }
    let ext = cfg.external()?;
    let seeds: Vec<u64> = (0..cfg.n_eval)
        .map(|j| external_seed(cfg.seed, j))
        .collect();
    DatasetStore::write_samples(
        &store.external_dir(&ext.name),
        &generate_eval_samples(&ext, &seeds, cfg.h, cfg.w)?,
    )?;
    let content_hash = store.content_hash()?;
    let meta = DatasetMeta {
        fingerprint: fp,
        content_hash: content_hash.clone(),
    };
    write_file(
        &meta_path,
        serde_json::to_string_pretty(&meta).unwrap().as_bytes(),
    )?;
    Ok(Dataset {
        store,
        content_hash,
    })
}

/// Trains (or reloads) the joint oracle and its per-domain mIoU.
pub fn ensure_oracle(
    cfg: &ExperimentConfig,
    data: &Dataset,
    eval_sets: &[Vec<LabeledSample>],
    overwrite: bool,
) -> Result<OracleReport> {
    let dir = cfg.output_dir.join("oracle");
    let report_path = dir.join("oracle.json");
    let stamp_path = dir.join("fingerprint");
    let fp = oracle_fingerprint(cfg, &data.content_hash);
    if !overwrite && fs::read_to_string(&stamp_path).is_ok_and(|s| s == fp) {
        if let Ok(r) = OracleReport::load(&report_path) {
            return Ok(r);
        }
    }
    let model = train_oracle(cfg, &data.store)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let report = oracle_report(cfg, &model, eval_sets, &data.content_hash)?;
    let last = cfg.schedule.num_steps() - 1;
    Checkpoint {
        step: last as u32,
        schedule_hash: cfg.schedule.hash(),
        model,
    }
    .save(&dir.join("oracle.segc"))?;
    report.save(&report_path)?;
    write_file(&stamp_path, fp.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Audit {
    pub train_reads: usize,
    pub violations: Vec<String>,
}

/// Everything one protocol run produced.
pub struct RunOutcome {
    pub run: ProtocolRun,
    pub report: MetricsReport,
    pub dir: PathBuf,
    pub train_reads: usize,
}

fn audit(store: &DatasetStore, violations: &[AccessRecord]) -> Audit {
    let train_reads = store
        .log()
        .records()
        .iter()
        .filter(|r| {
            r.during_step.is_some() && r.path.components().any(|c| c.as_os_str() == "train")
        })
        .count();
    Audit {
        train_reads,
        violations: violations
            .iter()
            .map(|v| format!("step {:?}: {}", v.during_step, v.path.display()))
            .collect(),
    }
}

/// Protocol run of one variant plus evaluation against the oracle.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: &Variant,
    eval_sets: &[Vec<LabeledSample>],
    external: &[LabeledSample],
    oracle: &OracleReport,
    overwrite: bool,
) -> Result<RunOutcome> {
    let dir = variant_dir(cfg, variant);
    if dir.join("report.json").exists() && !overwrite {
        return Err(Error::Refused(format!(
            "{} already holds results; pass --overwrite",
            dir.display()
        )));
    }
    remove_dir(&dir)?;
    let store = DatasetStore::new(data.store.root());
    let run = run_protocol(cfg, &store, Some(variant))?;
    let audit = audit(&store, &run.violations);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for ck in &run.checkpoints {
        ck.save(&dir.join(format!("step{}.segc", ck.step)))?;
    }
    run.bank.save(&dir.join("bank.styb"))?;
    write_trace(&run.trace, &dir.join("trace.csv"))?;
    write_file(
        &dir.join("audit.json"),
        serde_json::to_string_pretty(&audit).unwrap().as_bytes(),
    )?;
    let mut report = evaluate_run(cfg, &run, eval_sets, external, &data.content_hash)?;
    report.attach_oracle(oracle)?;
    write_report(&report, &dir)?;
    if !run.violations.is_empty() {
        return Err(Error::Invariant(format!(
            "{} reads of earlier-step training files",
            run.violations.len()
        )));
    }
    Ok(RunOutcome {
        run,
        report,
        dir,
        train_reads: audit.train_reads,
    })
}

/// Shared inputs for one or more variant runs.
pub struct Bench {
    pub data: Dataset,
    pub eval_sets: Vec<Vec<LabeledSample>>,
    pub external: Vec<LabeledSample>,
    pub oracle: OracleReport,
}

pub fn prepare_bench(cfg: &ExperimentConfig, overwrite: bool) -> Result<Bench> {
    let data = cmd_generate(cfg, overwrite)?;
    let eval_sets = load_eval_sets(cfg, &data.store)?;
    let external = data
        .store
        .read_dir_samples(&data.store.external_dir(&cfg.external()?.name))?;
    let oracle = ensure_oracle(cfg, &data, &eval_sets, overwrite)?;
    Ok(Bench {
        data,
        eval_sets,
        external,
        oracle,
    })
}

pub fn cmd_run(
    cfg: &ExperimentConfig,
    variant: Option<&str>,
    overwrite: bool,
) -> Result<RunOutcome> {
    let variant = match variant {
        Some(v) => Variant::parse(v)?,
        None => cfg.variant()?,
    };
    let bench = prepare_bench(cfg, overwrite)?;
    run_variant(
        cfg,
        &bench.data,
        &variant,
        &bench.eval_sets,
        &bench.external,
        &bench.oracle,
        overwrite,
    )
}

/// Renders every `.ppm` in `image_dir` in style `step` of the bank.
pub fn cmd_stylize(image_dir: &Path, bank_path: &Path, step: u32, out_dir: &Path) -> Result<usize> {
    let bank = StyleBank::load(bank_path)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for p in &paths {
        let img = decode_ppm(&fs::read(p).map_err(|e| Error::io(p, e))?)?;
        let styled = bank.apply(&img, step)?;
        write_file(&out_dir.join(p.file_name().unwrap()), &encode_ppm(&styled)?)?;
    }
    Ok(paths.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub dir: String,
    pub miou: f64,
    pub delta: Option<f64>,
}

/// mIoU of a checkpoint on sample directories. With an oracle report, a
/// directory named `{k}_{domain}` also gets its gap.
pub fn cmd_eval(
    checkpoint: &Path,
    eval_dirs: &[PathBuf],
    oracle: Option<&Path>,
) -> Result<Vec<EvalLine>> {
    let ck = Checkpoint::load(checkpoint)?;
    let oracle = oracle.map(OracleReport::load).transpose()?;
    let classes: Vec<_> = ck.model.layout()[1..].to_vec();
    let store = DatasetStore::new(".");
    eval_dirs
        .iter()
        .map(|dir| {
            let samples = store.read_dir_samples(dir)?;
            let m = miou(&ck.model, &samples, &classes)?;
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let domain = name.split_once('_').map_or(name.as_str(), |(_, d)| d);
            let delta = match &oracle {
                Some(o) => {
                    let k = o.domains.iter().position(|d| d == domain);
                    match k.and_then(|k| o.miou.get(ck.step as usize).and_then(|r| r.get(k))) {
                        Some(&ov) => Some(crate::eval::delta(m, ov)?),
                        None => None,
                    }
                }
                None => None,
            };
            Ok(EvalLine {
                dir: dir.display().to_string(),
                miou: m,
                delta,
            })
        })
        .collect()
}

/// Reports found under `run_dir` (itself or its immediate subdirectories).
pub fn cmd_report(run_dir: &Path) -> Result<Vec<(PathBuf, MetricsReport)>> {
    let mut found = Vec::new();
    if run_dir.join("report.json").exists() {
        found.push((run_dir.to_path_buf(), read_report(run_dir)?));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").exists())
        .collect();
    subdirs.sort();
    for d in subdirs {
        let r = read_report(&d)?;
        found.push((d, r));
    }
    if found.is_empty() {
        return Err(Error::io(
            run_dir.join("report.json"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no report found"),
        ));
    }
    Ok(found)
}

pub fn format_report(report: &MetricsReport) -> Result<String> {
    let mut out = format!(
        "variant {} (dataset {})\n",
        report.variant,
        &report.dataset_hash[..report.dataset_hash.len().min(12)]
    );
    out.push_str(&report_csv(report)?);
    for w in &report.warnings {
        writeln!(out, "warning: {w}").unwrap();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub beta: f64,
    pub variant: String,
    pub final_delta_bar: f64,
    pub final_gamma_gen: f64,
    pub dataset_hash: String,
}

/// Runs each variant (for each beta) on the same data and oracle.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    variants: &[String],
    betas: &[f64],
    overwrite: bool,
) -> Result<Vec<AblationRow>> {
    let variants: Vec<Variant> = variants
        .iter()
        .map(|v| Variant::parse(v))
        .collect::<Result<_>>()?;
    let betas = if betas.is_empty() {
        vec![cfg.beta]
    } else {
        betas.to_vec()
    };
    let bench = prepare_bench(cfg, overwrite)?;
    let mut rows = Vec::new();
    for &beta in &betas {
        let mut c = cfg.clone();
        c.beta = beta;
        c.validate()?;
        if betas.len() > 1 {
            c.output_dir = cfg.output_dir.join(format!("beta_{beta}"));
        }
        for v in &variants {
            let out = run_variant(
                &c,
                &bench.data,
                v,
                &bench.eval_sets,
                &bench.external,
                &bench.oracle,
                overwrite,
            )?;
            rows.push(AblationRow {
                beta,
                variant: v.name().to_string(),
                final_delta_bar: out.report.final_delta_bar().expect("oracle attached"),
                final_gamma_gen: out.report.steps.last().unwrap().gamma_gen,
                dataset_hash: out.report.dataset_hash.clone(),
            });
        }
    }
    let mut csv = String::from("beta,variant,final_delta_bar,final_gamma_gen,dataset_hash\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:.2},{:.2},{}",
            r.beta,
            r.variant,
            r.final_delta_bar,
            r.final_gamma_gen * 100.0,
            r.dataset_hash
        )
        .unwrap();
    }
    write_file(&cfg.output_dir.join("ablation.csv"), csv.as_bytes())?;
    Ok(rows)
}

/// Caps rayon's worker count from `STYLECL_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STYLECL_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
            Error::config(
                "STYLECL_THREADS",
                format!("`{v}` is not a positive integer"),
            )
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("STYLECL_THREADS", e.to_string()))?;
    }
    Ok(())
}
