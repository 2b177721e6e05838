//! Style-fused pseudo-labels from the frozen teacher.

use crate::model::{ProbMap, Teacher};
use crate::numerics::Tensor3;
use crate::style::StyleBank;
use crate::{ClassId, Error, Result, IGNORE, UNKNOWN};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    /// Teacher channel layout; every non-ignore label is drawn from it.
    pub layout: Vec<ClassId>,
    pub labels: Vec<ClassId>,
    /// Style whose view won the fusion at each pixel.
    pub source_style: Vec<u32>,
}

/// Teacher probabilities on the image rendered in one style.
#[derive(Debug, Clone)]
pub struct StyledProbs {
    pub style: u32,
    pub probs: ProbMap,
}

/// Channel of the highest probability; ties go to the lowest class id.
fn peak(row: &[f64], layout: &[ClassId]) -> (usize, f64) {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] || (row[i] == row[best] && layout[i] < layout[best]) {
            best = i;
        }
    }
    (best, row[best])
}

/// Size of the top fraction of `n`; guards against `0.66 * 50 = 33.000...04`.
fn top_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Fuses per-style teacher predictions into refined hard labels.
///
/// Per pixel the view with the highest peak wins (ties to the lowest style),
/// and its arg-max class is taken. A pixel is confident when its peak is
/// above `tau` or it ranks in the top `ceil(topk_frac * n_c)` peaks among the
/// `n_c` pixels fused to the same class. Pixels labelled in the current step
/// become `u`, confident ones keep the fused class, the rest are ignored.
pub fn fuse_pseudo_labels(
    views: &[StyledProbs],
    current_labels: &[ClassId],
    tau: f64,
    topk_frac: f64,
) -> Result<PseudoLabelMap> {
    let first = views
        .first()
        .ok_or_else(|| Error::Protocol("no styled views to pseudo-label from".into()))?;
    let (h, w) = (first.probs.height, first.probs.width);
    let layout = first.probs.layout.clone();
    let n = h * w;
    if current_labels.len() != n {
        return Err(Error::Shape(format!(
            "{} current labels for {n} pixels",
            current_labels.len()
        )));
    }
    let mut order: Vec<&StyledProbs> = views.iter().collect();
    order.sort_by_key(|v| v.style);
    for v in &order {
        if v.probs.layout != layout || (v.probs.height, v.probs.width) != (h, w) {
            return Err(Error::Shape(
                "styled views disagree in layout or size".into(),
            ));
        }
    }
    let mut class = vec![0usize; n];
    let mut conf = vec![0.0f64; n];
    let mut source_style = vec![0u32; n];
    for p in 0..n {
        let mut best: Option<(usize, f64, u32)> = None;
        for v in &order {
            let (c, pk) = peak(v.probs.pixel(p), &layout);
            if best.is_none_or(|b| pk > b.1) {
                best = Some((c, pk, v.style));
            }
        }
        let (c, pk, s) = best.unwrap();
        class[p] = c;
        conf[p] = pk;
        source_style[p] = s;
    }
    let mut confident: Vec<bool> = conf.iter().map(|&pk| pk > tau).collect();
    for c in 0..layout.len() {
        let mut members: Vec<usize> = (0..n).filter(|&p| class[p] == c).collect();
        let k = top_count(topk_frac, members.len());
        if k == 0 {
            continue;
        }
        members.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
        for &p in &members[..k] {
            confident[p] = true;
        }
    }
    let labels = (0..n)
        .map(|p| {
            if current_labels[p] != UNKNOWN {
                UNKNOWN
            } else if confident[p] {
                layout[class[p]]
            } else {
                IGNORE
            }
        })
        .collect();
    Ok(PseudoLabelMap {
        height: h,
        width: w,
        layout,
        labels,
        source_style,
    })
}

/// Teacher predictions on `image` rendered in each of `styles`.
pub fn styled_teacher_probs(
    teacher: &Teacher,
    image: &Tensor3<f32>,
    bank: &StyleBank,
    styles: &[u32],
) -> Result<Vec<StyledProbs>> {
    styles
        .iter()
        .map(|&k| {
            if bank.get(k).is_none() {
                return Err(Error::Protocol(format!("style {k} is not in the bank")));
            }
            Ok(StyledProbs {
                style: k,
                probs: teacher.probs(&bank.apply(image, k)?)?,
            })
        })
        .collect()
}

/// Pseudo-labels for `image` at step `t` from the styles `0..t` of the bank.
pub fn pseudo_label(
    teacher: &Teacher,
    image: &Tensor3<f32>,
    bank: &StyleBank,
    t: usize,
    tau: f64,
    topk_frac: f64,
    current_labels: &[ClassId],
) -> Result<PseudoLabelMap> {
    if t == 0 || bank.is_empty() {
        return Err(Error::Protocol(
            "pseudo-labels need at least one past style".into(),
        ));
    }
    let styles: Vec<u32> = (0..t as u32).collect();
    fuse_pseudo_labels(
        &styled_teacher_probs(teacher, image, bank, &styles)?,
        current_labels,
        tau,
        topk_frac,
    )
}
