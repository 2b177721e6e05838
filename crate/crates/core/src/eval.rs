//! mIoU, gaps to the oracle, generalization score and reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::continual::protocol::{derive_seed, INIT_TAG};
use crate::continual::{ce_loss, clip_grad_norm, group_by, GroupMode, ProtocolRun, MAX_GRAD_NORM};
use crate::data::{DatasetStore, DomainSpec, LabeledSample};
use crate::model::{predict, softmax, SegModel};
use crate::numerics::Tensor3;
use crate::{ClassId, Error, Result, IGNORE, UNKNOWN};

/// Rows are ground-truth classes, columns predictions. The extra last
/// column collects predictions outside the class list (including `u`).
/// Pixels whose ground truth is `u`, ignore, or outside the list are not
/// counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_set: &[ClassId]) -> Self {
        let classes: Vec<ClassId> = class_set
            .iter()
            .copied()
            .filter(|&c| c != UNKNOWN && c != IGNORE)
            .collect();
        let n = classes.len();
        Self {
            classes,
            counts: vec![0; n * (n + 1)],
        }
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.classes.len() + 1) + pred]
    }

    pub fn add(&mut self, gt: &[ClassId], pred: &[ClassId]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let n = self.classes.len();
        let mut lookup = [n; 256];
        for (i, &c) in self.classes.iter().enumerate() {
            lookup[c as usize] = i;
        }
        for (&g, &p) in gt.iter().zip(pred) {
            let row = lookup[g as usize];
            if row == n {
                continue;
            }
            self.counts[row * (n + 1) + lookup[p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(mut self, other: &ConfusionMatrix) -> Result<Self> {
        if self.classes != other.classes {
            return Err(Error::Shape(
                "confusion matrices over different classes".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(self)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in
    /// either ground truth or prediction.
    pub fn iou(&self, i: usize) -> Option<f64> {
        let n = self.classes.len();
        let tp = self.count(i, i);
        let row: u64 = (0..=n).map(|j| self.count(i, j)).sum();
        let col: u64 = (0..n).map(|r| self.count(r, i)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over the classes that occur.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.classes.len())
            .filter_map(|i| self.iou(i))
            .collect();
        if ious.is_empty() {
            return Err(Error::EmptyDataset("no evaluated pixels".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Confusion matrix of `model` over `samples`, against their full labels.
pub fn confusion(
    model: &SegModel<f32>,
    samples: &[LabeledSample],
    class_set: &[ClassId],
) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    samples
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(class_set);
            cm.add(&s.full_labels.data, &predict(model, &s.image)?)?;
            Ok(cm)
        })
        .try_reduce(|| ConfusionMatrix::new(class_set), |a, b| a.merge(&b))
}

/// Fraction in `[0, 1]`.
pub fn miou(
    model: &SegModel<f32>,
    samples: &[LabeledSample],
    class_set: &[ClassId],
) -> Result<f64> {
    confusion(model, samples, class_set)?.miou()
}

/// Relative gap to the oracle in percent; positive means worse.
pub fn delta(miou: f64, oracle_miou: f64) -> Result<f64> {
    if !(oracle_miou > 0.0) {
        return Err(Error::Division(format!(
            "oracle mIoU {oracle_miou} must be positive"
        )));
    }
    Ok((oracle_miou - miou) / oracle_miou * 100.0)
}

pub fn delta_bar(deltas: &[f64]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::EmptyDataset("no per-domain gaps to average".into()));
    }
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenScore {
    pub value: f64,
    pub warning: Option<String>,
}

/// mIoU on a domain outside the training sequence over every class seen so
/// far. Warns when the "external" domain is one of the training domains.
pub fn gamma_gen(
    model: &SegModel<f32>,
    external: &[LabeledSample],
    classes_so_far: &[ClassId],
    external_domain: &DomainSpec,
    training_domains: &[DomainSpec],
) -> Result<GenScore> {
    let value = miou(model, external, classes_so_far)?;
    let warning = training_domains
        .iter()
        .find(|d| {
            d.name == external_domain.name
                || (d.palette == external_domain.palette
                    && d.layout_seed_offset == external_domain.layout_seed_offset)
        })
        .map(|d| {
            format!(
                "external domain `{}` duplicates training domain `{}`",
                external_domain.name, d.name
            )
        });
    Ok(GenScore { value, warning })
}

/// Per-step, per-domain oracle mIoU. `miou[t][k]` is over the classes seen
/// at step `t`, on domain `k <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub domains: Vec<String>,
    pub miou: Vec<Vec<f64>>,
    pub dataset_hash: String,
}

impl OracleReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(
            path,
            serde_json::to_string_pretty(self)
                .expect("report serializes")
                .as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(e.column() as u64, format!("{}: {e}", path.display())))
    }
}

pub const ORACLE_TAG: u64 = 300;

/// Joint supervised training on every domain with complete labels, for as
/// many sample updates as the whole incremental run.
pub fn train_oracle(cfg: &ExperimentConfig, store: &DatasetStore) -> Result<SegModel<f32>> {
    cfg.validate()?;
    let schedule = &cfg.schedule;
    let last = schedule.num_steps() - 1;
    store.log().enter_step(None);
    let mut samples = Vec::new();
    for t in 0..schedule.num_steps() {
        samples.extend(store.read_train(t)?);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let mut model = SegModel::<f32>::init(
        derive_seed(cfg.seed, INIT_TAG),
        cfg.features(),
        schedule.channel_layout(last),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ORACLE_TAG));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let lr = cfg.lr as f32;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let s = &samples[i];
            let (logits, tape) = model.forward_tape(&s.image)?;
            let probs = softmax(&logits, model.layout())?;
            let loss = ce_loss(
                &group_by(&probs, &[], GroupMode::PastIntoU)?,
                &s.full_labels.data,
                IGNORE,
            )?;
            let (h, w, c) = logits.shape();
            let g = Tensor3::from_vec(h, w, c, loss.grad.iter().map(|&v| v as f32).collect())?;
            let mut grads = model.backward_tape(&tape, &g)?;
            clip_grad_norm(&mut grads, MAX_GRAD_NORM);
            model.sgd_step(&grads, lr)?;
        }
    }
    Ok(model)
}

/// Evaluation samples of every domain in the sequence, read once.
pub fn load_eval_sets(
    cfg: &ExperimentConfig,
    store: &DatasetStore,
) -> Result<Vec<Vec<LabeledSample>>> {
    store.log().enter_step(None);
    cfg.domains()?
        .iter()
        .enumerate()
        .map(|(k, d)| store.read_eval(k, &d.name))
        .collect()
}

pub fn oracle_report(
    cfg: &ExperimentConfig,
    oracle: &SegModel<f32>,
    eval_sets: &[Vec<LabeledSample>],
    dataset_hash: &str,
) -> Result<OracleReport> {
    let schedule = &cfg.schedule;
    let miou = (0..schedule.num_steps())
        .map(|t| {
            (0..=t)
                .map(|k| miou(oracle, &eval_sets[k], &schedule.seen_classes(t)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(OracleReport {
        domains: cfg.domains()?.into_iter().map(|d| d.name).collect(),
        miou,
        dataset_hash: dataset_hash.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub domain: String,
    pub miou: f64,
    pub oracle_miou: Option<f64>,
    /// Percent.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    /// Percent.
    pub delta_bar: Option<f64>,
    pub gamma_gen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub dataset_hash: String,
    pub external_domain: String,
    pub rows: Vec<ReportRow>,
    pub steps: Vec<StepSummary>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn row(&self, step: usize, domain: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.step == step && r.domain == domain)
    }

    pub fn final_delta_bar(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.delta_bar)
    }

    /// Fills per-row gaps and per-step averages from `oracle`.
    pub fn attach_oracle(&mut self, oracle: &OracleReport) -> Result<()> {
        for r in &mut self.rows {
            let k = oracle
                .domains
                .iter()
                .position(|d| *d == r.domain)
                .ok_or_else(|| {
                    Error::Refused(format!("oracle report has no domain `{}`", r.domain))
                })?;
            let o = *oracle
                .miou
                .get(r.step)
                .and_then(|row| row.get(k))
                .ok_or_else(|| {
                    Error::Refused(format!(
                        "oracle report has no value for step {} domain `{}`",
                        r.step, r.domain
                    ))
                })?;
            r.oracle_miou = Some(o);
            r.delta = Some(delta(r.miou, o)?);
        }
        for s in &mut self.steps {
            let ds: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.step == s.step)
                .filter_map(|r| r.delta)
                .collect();
            s.delta_bar = Some(delta_bar(&ds)?);
        }
        Ok(())
    }

    pub fn check_consistency(&self) -> Result<()> {
        for s in &self.steps {
            let ds: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.step == s.step)
                .filter_map(|r| r.delta)
                .collect();
            if let (Some(db), false) = (s.delta_bar, ds.is_empty()) {
                if (db - delta_bar(&ds)?).abs() > 1e-9 {
                    return Err(Error::Invariant(format!(
                        "step {}: average gap {db} is not the mean of its rows",
                        s.step
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evaluates every checkpoint of `run` on the domains seen so far and on the
/// external domain.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    run: &ProtocolRun,
    eval_sets: &[Vec<LabeledSample>],
    external: &[LabeledSample],
    dataset_hash: &str,
) -> Result<MetricsReport> {
    let schedule = &cfg.schedule;
    let domains = cfg.domains()?;
    let ext = cfg.external()?;
    let mut rows = Vec::new();
    let mut steps = Vec::new();
    let mut warnings = Vec::new();
    for (t, ck) in run.checkpoints.iter().enumerate() {
        let seen = schedule.seen_classes(t);
        for k in 0..=t {
            let m = miou(&ck.model, &eval_sets[k], &seen)?;
            rows.push(ReportRow {
                step: t,
                domain: domains[k].name.clone(),
                miou: m,
                oracle_miou: None,
                delta: None,
            });
        }
        let g = gamma_gen(&ck.model, external, &seen, &ext, &domains)?;
        if let Some(w) = g.warning {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        steps.push(StepSummary {
            step: t,
            delta_bar: None,
            gamma_gen: g.value,
        });
    }
    Ok(MetricsReport {
        variant: run.variant.name().to_string(),
        dataset_hash: dataset_hash.into(),
        external_domain: ext.name,
        rows,
        steps,
        warnings,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// CSV view: `step,domain,miou,delta` per evaluated domain, then one
/// `delta_bar` row (gap in the last column) and one `gamma_gen` row (score in
/// the mIoU column) per step. Percent, two decimals.
pub fn report_csv(report: &MetricsReport) -> Result<String> {
    let mut out = String::from("step,domain,miou,delta\n");
    for s in &report.steps {
        for r in report.rows.iter().filter(|r| r.step == s.step) {
            let d = r.delta.ok_or_else(|| missing_oracle(r.step, &r.domain))?;
            writeln!(
                out,
                "{},{},{:.2},{:.2}",
                r.step,
                r.domain,
                r.miou * 100.0,
                d
            )
            .unwrap();
        }
        let db = s.delta_bar.ok_or_else(|| missing_oracle(s.step, "all"))?;
        writeln!(out, "{},delta_bar,,{:.2}", s.step, db).unwrap();
        writeln!(out, "{},gamma_gen,{:.2},", s.step, s.gamma_gen * 100.0).unwrap();
    }
    Ok(out)
}

fn missing_oracle(step: usize, domain: &str) -> Error {
    Error::Refused(format!(
        "oracle mIoU missing for step {step}, domain {domain}: gaps cannot be reported without an oracle report"
    ))
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    report.check_consistency()?;
    let csv = report_csv(report)?;
    write_file(&dir.join(REPORT_CSV), csv.as_bytes())?;
    write_file(
        &dir.join(REPORT_JSON),
        serde_json::to_string_pretty(report)
            .expect("report serializes")
            .as_bytes(),
    )
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(e.column() as u64, format!("{}: {e}", path.display())))
}
