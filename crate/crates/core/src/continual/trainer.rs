//! One incremental step of training.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grouping::{ce_loss, group_new_into_u, group_past_into_u, kd_loss, lws_loss};
use super::pseudo::{fuse_pseudo_labels, PseudoLabelMap, StyledProbs};
use crate::config::{Lambdas, Variant};
use crate::data::{ClassSchedule, LabeledSample};
use crate::model::{softmax, Params, ProbMap, Scalar, SegModel, Teacher};
use crate::numerics::Tensor3;
use crate::style::{StyleBank, Stylizer};
use crate::{ClassId, Error, Result, IGNORE};

/// Per-sample gradient norm cap used by the protocol and the oracle. The
/// auxiliary terms are weighted 10x at a fixed lr of 0.1, which overshoots
/// badly on the confident model left by the previous step without it.
pub const MAX_GRAD_NORM: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub topk_frac: f64,
    /// Weights with switched-off terms already zeroed.
    pub lambdas: Lambdas,
    pub variant: Variant,
    pub shuffle_seed: u64,
    /// Rescales a sample's gradient down to this L2 norm when it is larger.
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce_n: f64,
    pub l_ce_o: f64,
    pub l_lws_n: f64,
    pub l_kd_o: f64,
    pub total: f64,
    /// Pixels entering each term, summed over views.
    pub valid: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub sample: usize,
    pub l_ce_n: f64,
    pub l_ce_o: f64,
    pub l_lws_n: f64,
    pub l_kd_o: f64,
    pub total: f64,
}

/// The inputs the student sees for one sample.
#[derive(Debug, Clone)]
pub struct SampleViews {
    /// Image in its own domain's style (or raw when stylization is off).
    pub current: Tensor3<f32>,
    /// One view per past style, ascending.
    pub old: Vec<Tensor3<f32>>,
}

/// Everything the losses compare the student against for one sample.
#[derive(Debug, Clone)]
pub struct SampleTargets {
    pub step_labels: Vec<ClassId>,
    /// Teacher probabilities on each old view; empty unless distillation is on.
    pub teacher_old: Vec<ProbMap>,
    pub pseudo: Option<PseudoLabelMap>,
}

fn needs_old_views(l: &Lambdas) -> bool {
    l.ce_o > 0.0 || l.kd_o > 0.0
}

/// Builds the stylized views and teacher targets for one sample at step `t`.
pub fn prepare_sample(
    t: usize,
    sample: &LabeledSample,
    bank: &StyleBank,
    teacher: Option<&Teacher>,
    settings: &TrainSettings,
) -> Result<(SampleViews, SampleTargets)> {
    let l = &settings.lambdas;
    let stylizer = if settings.variant.stylize {
        Some(Stylizer::new(&sample.image)?)
    } else {
        None
    };
    let render = |k: usize| -> Result<Tensor3<f32>> {
        match &stylizer {
            Some(s) => {
                let token = bank
                    .get(k as u32)
                    .ok_or_else(|| Error::Protocol(format!("style {k} is not in the bank")))?;
                s.apply(token)
            }
            None => Ok(sample.image.clone()),
        }
    };
    let current = render(t)?;
    let want_teacher = t > 0 && (l.kd_o > 0.0 || l.lws_n > 0.0);
    let old: Vec<Tensor3<f32>> = if t > 0 && (needs_old_views(l) || want_teacher) {
        (0..t).map(render).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let step_labels = sample.step_labels.data.clone();
    let mut targets = SampleTargets {
        step_labels,
        teacher_old: Vec::new(),
        pseudo: None,
    };
    if want_teacher {
        let teacher =
            teacher.ok_or_else(|| Error::Protocol(format!("step {t} needs a teacher")))?;
        let mut styled: Vec<StyledProbs> = old
            .iter()
            .enumerate()
            .map(|(k, v)| {
                Ok(StyledProbs {
                    style: k as u32,
                    probs: teacher.probs(v)?,
                })
            })
            .collect::<Result<_>>()?;
        if l.lws_n > 0.0 {
            if settings.variant.pseudo_with_current {
                styled.push(StyledProbs {
                    style: t as u32,
                    probs: teacher.probs(&current)?,
                });
            }
            targets.pseudo = Some(fuse_pseudo_labels(
                &styled,
                &targets.step_labels,
                settings.tau,
                settings.topk_frac,
            )?);
            styled.truncate(t);
        }
        if l.kd_o > 0.0 {
            targets.teacher_old = styled.into_iter().map(|s| s.probs).collect();
        }
    }
    Ok((SampleViews { current, old }, targets))
}

fn to_tensor<T: Scalar>(grad: Vec<f64>, like: &Tensor3<T>) -> Tensor3<T> {
    let (h, w, c) = like.shape();
    Tensor3::from_vec(
        h,
        w,
        c,
        grad.into_iter().map(|g| T::from(g).unwrap()).collect(),
    )
    .unwrap()
}

fn accumulate<T: Scalar>(acc: &mut Option<Params<T>>, g: Params<T>) {
    match acc {
        Some(a) => a.add_scaled(&g, T::one()),
        None => *acc = Some(g),
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Weighted objective for one sample and its parameter gradient.
pub fn sample_objective<T: Scalar>(
    t: usize,
    schedule: &ClassSchedule,
    model: &SegModel<T>,
    views: &SampleViews,
    targets: &SampleTargets,
    lambdas: &Lambdas,
) -> Result<(LossBreakdown, Params<T>)> {
    let mut out = LossBreakdown::default();
    let mut grads = None;

    let image = views.current.cast::<T>();
    let (logits, tape) = model.forward_tape(&image)?;
    let probs = softmax(&logits, model.layout())?;
    let ce_n = ce_loss(
        &group_past_into_u(&probs, schedule, t)?,
        &targets.step_labels,
        IGNORE,
    )?;
    out.l_ce_n = ce_n.value;
    out.valid[0] = ce_n.valid_pixels;
    let mut g = ce_n.grad;
    if t > 0 && lambdas.lws_n > 0.0 {
        let pseudo = targets
            .pseudo
            .as_ref()
            .ok_or_else(|| Error::Protocol("pseudo-labels missing".into()))?;
        let lws = lws_loss(&group_new_into_u(&probs, schedule, t)?, pseudo)?;
        out.l_lws_n = lws.value;
        out.valid[2] = lws.valid_pixels;
        add_scaled(&mut g, &lws.grad, lambdas.lws_n);
    }
    accumulate(
        &mut grads,
        model.backward_tape(&tape, &to_tensor(g, &logits))?,
    );

    if t > 0 && needs_old_views(lambdas) {
        if views.old.len() != t {
            return Err(Error::Protocol(format!(
                "{} old views at step {t}",
                views.old.len()
            )));
        }
        if lambdas.kd_o > 0.0 && targets.teacher_old.len() != t {
            return Err(Error::Protocol(
                "teacher targets missing for old views".into(),
            ));
        }
        let per_view = 1.0 / t as f64;
        for (k, view) in views.old.iter().enumerate() {
            let (logits, tape) = model.forward_tape(&view.cast::<T>())?;
            let probs = softmax(&logits, model.layout())?;
            let mut g = vec![0.0; logits.data().len()];
            if lambdas.ce_o > 0.0 {
                let ce = ce_loss(
                    &group_past_into_u(&probs, schedule, t)?,
                    &targets.step_labels,
                    IGNORE,
                )?;
                out.l_ce_o += ce.value * per_view;
                out.valid[1] += ce.valid_pixels;
                add_scaled(&mut g, &ce.grad, lambdas.ce_o * per_view);
            }
            if lambdas.kd_o > 0.0 {
                let kd = kd_loss(
                    &targets.teacher_old[k],
                    &group_new_into_u(&probs, schedule, t)?,
                )?;
                out.l_kd_o += kd.value * per_view;
                out.valid[3] += kd.valid_pixels;
                add_scaled(&mut g, &kd.grad, lambdas.kd_o * per_view);
            }
            accumulate(
                &mut grads,
                model.backward_tape(&tape, &to_tensor(g, &logits))?,
            );
        }
    }
    out.total = out.l_ce_n
        + lambdas.ce_o * out.l_ce_o
        + lambdas.lws_n * out.l_lws_n
        + lambdas.kd_o * out.l_kd_o;
    Ok((out, grads.unwrap()))
}

/// Global L2 norm of a gradient, accumulated in f64.
pub fn grad_norm(g: &Params<f32>) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Scales `g` so its norm is at most `max`. Returns the norm before scaling.
pub fn clip_grad_norm(g: &mut Params<f32>, max: f64) -> f64 {
    let n = grad_norm(g);
    if n > max {
        let s = (max / n) as f32;
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

/// Trains `model` for one step. Per-sample SGD, a fresh shuffle each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    t: usize,
    samples: &[LabeledSample],
    bank: &StyleBank,
    teacher: Option<&Teacher>,
    mut model: SegModel<f32>,
    schedule: &ClassSchedule,
    settings: &TrainSettings,
) -> Result<(SegModel<f32>, Vec<TraceRow>)> {
    if (t > 0) != teacher.is_some() {
        return Err(Error::Protocol(format!(
            "step {t}: a teacher is required exactly when t >= 1"
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no training samples for step {t}"
        )));
    }
    if model.layout() != schedule.channel_layout(t) {
        return Err(Error::Protocol(format!(
            "model layout {:?} is not the step {t} layout",
            model.layout()
        )));
    }
    if settings.variant.stylize && (0..=t as u32).any(|k| bank.get(k).is_none()) {
        return Err(Error::Protocol(format!(
            "style bank must hold styles 0..={t}"
        )));
    }
    if settings.epochs == 0 || !(settings.lr > 0.0) {
        return Err(Error::config("epochs", "epochs and lr must be positive"));
    }
    let lambdas = if t == 0 {
        Lambdas {
            ce_o: 0.0,
            lws_n: 0.0,
            kd_o: 0.0,
        }
    } else {
        settings.lambdas
    };
    let settings = TrainSettings {
        lambdas,
        ..settings.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(settings.epochs * samples.len());
    let lr = settings.lr as f32;
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (views, targets) = prepare_sample(t, &samples[i], bank, teacher, &settings)?;
            let (b, mut grads) =
                sample_objective(t, schedule, &model, &views, &targets, &settings.lambdas)?;
            if let Some(max) = settings.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            model.sgd_step(&grads, lr)?;
            trace.push(TraceRow {
                step: t,
                epoch,
                sample: i,
                l_ce_n: b.l_ce_n,
                l_ce_o: b.l_ce_o,
                l_lws_n: b.l_lws_n,
                l_kd_o: b.l_kd_o,
                total: b.total,
            });
        }
    }
    Ok((model, trace))
}

/// CSV with columns `step, epoch, sample, l_ce_n, l_ce_o, l_lws_n, l_kd_o, total`.
pub fn write_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}
