//! Channel grouping of the unknown class and the grouped objectives.
//!
//! At step `t` the student predicts `[u] ++ C_0..C_t`. The current-step view
//! folds every past class into `u`; the past-step view folds every new class
//! into `u`. All gradients are taken w.r.t. the ungrouped logits.

use crate::data::ClassSchedule;
use crate::model::ProbMap;
use crate::{ClassId, Error, Result, IGNORE, UNKNOWN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    /// Past classes are summed into `u`; new classes stay separate.
    PastIntoU,
    /// New classes are summed into `u`; past classes stay separate.
    NewIntoU,
}

#[derive(Debug, Clone)]
pub struct GroupedProbMap {
    pub height: usize,
    pub width: usize,
    pub mode: GroupMode,
    /// Grouped channel -> class id, `u` first.
    pub layout: Vec<ClassId>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    source: ProbMap,
    /// Source channel -> grouped channel.
    group_of: Vec<usize>,
}

impl GroupedProbMap {
    pub fn channels(&self) -> usize {
        self.layout.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let c = self.channels();
        &self.probs[p * c..(p + 1) * c]
    }

    pub fn source(&self) -> &ProbMap {
        &self.source
    }

    /// Grouped channel receiving source channel `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    /// Arg-max class id per pixel (ties to the lowest channel).
    pub fn argmax_labels(&self) -> Vec<ClassId> {
        let c = self.channels();
        self.probs
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                self.layout[best]
            })
            .collect()
    }
}

/// Sums the channels of `merged` into `u`. The others keep their order.
pub fn group_by(p: &ProbMap, merged: &[ClassId], mode: GroupMode) -> Result<GroupedProbMap> {
    if p.layout.first() != Some(&UNKNOWN) {
        return Err(Error::Protocol(
            "probability map has no unknown channel".into(),
        ));
    }
    for c in merged {
        if !p.layout.contains(c) {
            return Err(Error::Protocol(format!(
                "class {c} has no channel in layout {:?}",
                p.layout
            )));
        }
    }
    let mut layout = vec![UNKNOWN];
    let mut group_of = Vec::with_capacity(p.channels());
    for (i, &c) in p.layout.iter().enumerate() {
        if i == 0 || merged.contains(&c) {
            group_of.push(0);
        } else {
            group_of.push(layout.len());
            layout.push(c);
        }
    }
    let g = layout.len();
    let c = p.channels();
    let mut probs = vec![0.0; p.pixels() * g];
    let mut log_probs = vec![0.0; p.pixels() * g];
    let mut members = vec![0usize; g];
    // Source channel of each single-member group.
    let mut single = vec![0usize; g];
    for (i, &j) in group_of.iter().enumerate() {
        members[j] += 1;
        single[j] = i;
    }
    let mut max = vec![f64::NEG_INFINITY; g];
    let mut acc = vec![0.0; g];
    for px in 0..p.pixels() {
        let lp = &p.log_probs[px * c..(px + 1) * c];
        if members[0] == 1 {
            // Nothing merged: the grouped map is the source map.
            log_probs[px * g..(px + 1) * g].copy_from_slice(lp);
            probs[px * g..(px + 1) * g].copy_from_slice(&p.probs[px * c..(px + 1) * c]);
            continue;
        }
        max.fill(f64::NEG_INFINITY);
        acc.fill(0.0);
        for (i, &v) in lp.iter().enumerate() {
            max[group_of[i]] = max[group_of[i]].max(v);
        }
        for (i, &v) in lp.iter().enumerate() {
            acc[group_of[i]] += (v - max[group_of[i]]).exp();
        }
        for j in 0..g {
            if members[j] == 1 {
                let i = single[j];
                log_probs[px * g + j] = lp[i];
                probs[px * g + j] = p.probs[px * c + i];
            } else {
                let l = max[j] + acc[j].ln();
                log_probs[px * g + j] = l;
                probs[px * g + j] = l.exp();
            }
        }
    }
    Ok(GroupedProbMap {
        height: p.height,
        width: p.width,
        mode,
        layout,
        probs,
        log_probs,
        source: p.clone(),
        group_of,
    })
}

fn check_layout(p: &ProbMap, schedule: &ClassSchedule, t: usize) -> Result<()> {
    if t >= schedule.num_steps() {
        return Err(Error::Protocol(format!("step {t} out of range")));
    }
    let expected = schedule.channel_layout(t);
    if p.layout != expected {
        return Err(Error::Protocol(format!(
            "layout {:?} does not match step {t} layout {expected:?}",
            p.layout
        )));
    }
    Ok(())
}

/// `u := P[u] + sum of past classes`; the classes of step `t` are copied.
pub fn group_past_into_u(
    p: &ProbMap,
    schedule: &ClassSchedule,
    t: usize,
) -> Result<GroupedProbMap> {
    check_layout(p, schedule, t)?;
    group_by(p, &schedule.past_classes(t), GroupMode::PastIntoU)
}

/// `u := P[u] + sum of the classes of step t`; past classes are copied.
pub fn group_new_into_u(p: &ProbMap, schedule: &ClassSchedule, t: usize) -> Result<GroupedProbMap> {
    check_layout(p, schedule, t)?;
    group_by(p, schedule.new_classes(t), GroupMode::NewIntoU)
}

/// Loss value with its gradient w.r.t. the ungrouped logits (`H x W x C`,
/// channel-fastest).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub valid_pixels: usize,
    pub grad: Vec<f64>,
}

/// Mean over non-ignored pixels of `-log G[label]`.
pub fn ce_loss(
    grouped: &GroupedProbMap,
    labels: &[ClassId],
    ignore: ClassId,
) -> Result<LossOutput> {
    let n_pix = grouped.pixels();
    if labels.len() != n_pix {
        return Err(Error::Shape(format!(
            "{} labels for {n_pix} pixels",
            labels.len()
        )));
    }
    let mut lookup = [usize::MAX; 256];
    for (j, &c) in grouped.layout.iter().enumerate() {
        lookup[c as usize] = j;
    }
    let mut targets = Vec::with_capacity(n_pix);
    for &l in labels {
        if l == ignore {
            targets.push(None);
        } else if lookup[l as usize] == usize::MAX {
            return Err(Error::Label(format!(
                "label {l} is not in layout {:?}",
                grouped.layout
            )));
        } else {
            targets.push(Some(lookup[l as usize]));
        }
    }
    let src = grouped.source();
    let c = src.channels();
    let g = grouped.channels();
    let valid = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![0.0; n_pix * c];
    if valid == 0 {
        return Ok(LossOutput {
            value: 0.0,
            valid_pixels: 0,
            grad,
        });
    }
    let scale = 1.0 / valid as f64;
    let mut sum = 0.0;
    for (px, target) in targets.iter().enumerate() {
        let Some(j) = *target else { continue };
        let log_g = grouped.log_probs[px * g + j];
        sum -= log_g;
        for i in 0..c {
            let k = px * c + i;
            let own = if grouped.group_of[i] == j {
                (src.log_probs[k] - log_g).exp()
            } else {
                0.0
            };
            grad[k] = (src.probs[k] - own) * scale;
        }
    }
    Ok(LossOutput {
        value: sum * scale,
        valid_pixels: valid,
        grad,
    })
}

/// Hard pseudo-labels against the past-step grouping; 255 is ignored.
pub fn lws_loss(grouped: &GroupedProbMap, pseudo: &super::PseudoLabelMap) -> Result<LossOutput> {
    if grouped.mode != GroupMode::NewIntoU || pseudo.layout != grouped.layout {
        return Err(Error::Protocol(format!(
            "pseudo-label layout {:?} does not match grouped layout {:?}",
            pseudo.layout, grouped.layout
        )));
    }
    ce_loss(grouped, &pseudo.labels, IGNORE)
}

/// Soft cross-entropy `-sum_c q_c log G_c`, averaged over all pixels.
pub fn kd_loss(teacher: &ProbMap, grouped: &GroupedProbMap) -> Result<LossOutput> {
    if teacher.layout != grouped.layout {
        return Err(Error::Shape(format!(
            "teacher channels {:?} vs student {:?}",
            teacher.layout, grouped.layout
        )));
    }
    if teacher.pixels() != grouped.pixels() {
        return Err(Error::Shape(
            "teacher and student maps differ in size".into(),
        ));
    }
    let src = grouped.source();
    let c = src.channels();
    let g = grouped.channels();
    let n_pix = grouped.pixels();
    let scale = 1.0 / n_pix as f64;
    let mut grad = vec![0.0; n_pix * c];
    let mut sum = 0.0;
    for px in 0..n_pix {
        let q = teacher.pixel(px);
        let log_g = &grouped.log_probs[px * g..(px + 1) * g];
        let q_total: f64 = q.iter().sum();
        sum -= q.iter().zip(log_g).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..c {
            let k = px * c + i;
            let j = grouped.group_of[i];
            grad[k] = (src.probs[k] * q_total - q[j] * (src.log_probs[k] - log_g[j]).exp()) * scale;
        }
    }
    Ok(LossOutput {
        value: sum * scale,
        valid_pixels: n_pix,
        grad,
    })
}
