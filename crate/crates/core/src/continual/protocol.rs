//! The full incremental protocol over a generated dataset.

use super::trainer::{train_step, TraceRow, TrainSettings, MAX_GRAD_NORM};
use crate::config::{ExperimentConfig, Variant};
use crate::data::{AccessRecord, DatasetStore};
use crate::model::{freeze, Checkpoint, SegModel, Teacher};
use crate::style::{extract_style, StyleBank};
use crate::{Error, Result};

/// Derives an independent stream seed from the experiment seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const INIT_TAG: u64 = 1;
pub const EXPAND_TAG: u64 = 100;
pub const SHUFFLE_TAG: u64 = 200;

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub variant: Variant,
    /// Checkpoint at the end of every step.
    pub checkpoints: Vec<Checkpoint>,
    pub bank: StyleBank,
    pub trace: Vec<TraceRow>,
    /// Reads of an earlier step's training files made during a later step.
    pub violations: Vec<AccessRecord>,
}

impl ProtocolRun {
    pub fn final_model(&self) -> &SegModel<f32> {
        &self.checkpoints.last().expect("at least one step").model
    }
}

/// Runs every step of `cfg` over the dataset in `store`, with `variant`
/// overriding the configured one when given.
pub fn run_protocol(
    cfg: &ExperimentConfig,
    store: &DatasetStore,
    variant: Option<&Variant>,
) -> Result<ProtocolRun> {
    cfg.validate()?;
    let variant = match variant {
        Some(v) => v.clone(),
        None => cfg.variant()?,
    };
    let schedule = &cfg.schedule;
    let domains = cfg.domains()?;
    let lambdas = cfg.lambdas().masked(variant.losses);
    let mut bank = StyleBank::new(cfg.h, cfg.w, cfg.beta)?;
    let mut model: Option<SegModel<f32>> = None;
    let mut teacher: Option<Teacher> = None;
    let mut checkpoints = Vec::new();
    let mut trace = Vec::new();
    let log = store.log();
    let result = (|| -> Result<()> {
        for t in 0..schedule.num_steps() {
            log.enter_step(Some(t));
            let manifest = store.read_manifest(t)?;
            if manifest.class_set != schedule.new_classes(t)
                || (manifest.h, manifest.w) != (cfg.h, cfg.w)
                || manifest.domain != domains[t].name
            {
                return Err(Error::Protocol(format!(
                    "dataset step {t} was generated for a different configuration"
                )));
            }
            let samples = store.read_train(t)?;
            let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
            bank = bank
                .clone()
                .with_token(extract_style(&images, cfg.beta, t as u32)?)?;
            let current = match model.take() {
                None => SegModel::init(
                    derive_seed(cfg.seed, INIT_TAG),
                    cfg.features(),
                    schedule.channel_layout(0),
                )?,
                Some(m) => m.expand_head(
                    schedule.new_classes(t),
                    derive_seed(cfg.seed, EXPAND_TAG + t as u64),
                )?,
            };
            let settings = TrainSettings {
                epochs: cfg.epochs,
                lr: cfg.lr,
                tau: cfg.tau,
                topk_frac: cfg.topk_frac,
                lambdas,
                variant: variant.clone(),
                shuffle_seed: derive_seed(cfg.seed, SHUFFLE_TAG + t as u64),
                max_grad_norm: Some(MAX_GRAD_NORM),
            };
            let (trained, rows) = train_step(
                t,
                &samples,
                &bank,
                teacher.as_ref(),
                current,
                schedule,
                &settings,
            )?;
            drop(samples);
            trace.extend(rows);
            teacher = Some(freeze(&trained));
            checkpoints.push(Checkpoint {
                step: t as u32,
                schedule_hash: schedule.hash(),
                model: trained.clone(),
            });
            model = Some(trained);
        }
        Ok(())
    })();
    log.enter_step(None);
    result?;
    Ok(ProtocolRun {
        variant,
        checkpoints,
        bank,
        trace,
        violations: store.exemplar_violations(),
    })
}
