//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed. Criteria 7 to 9 share one run of the
//! default benchmark in a temporary directory.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;

use common::*;
use stylecl::commands::{prepare_bench, run_variant, Bench, RunOutcome};
use stylecl::config::{ExperimentConfig, Lambdas, Variant};
use stylecl::continual::{
    fuse_pseudo_labels, group_new_into_u, group_past_into_u, run_protocol, sample_objective,
    PseudoLabelMap, SampleTargets, SampleViews, StyledProbs,
};
use stylecl::data::{ClassSchedule, DatasetStore};
use stylecl::eval::{delta, delta_bar};
use stylecl::model::{softmax, ProbMap, SegModel, DEFAULT_FEATURES};
use stylecl::numerics::{fft2, ifft2_real, Grid, Tensor3};
use stylecl::style::{apply_style_unclamped, extract_style, window_bins, Stylizer};
use stylecl::{IGNORE, UNKNOWN};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> std::result::Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < budget, || {
        format!(
            "took {:.1}s, budget {}s",
            took.as_secs_f64(),
            budget.as_secs()
        )
    })?;
    Ok(took)
}

// ---------------------------------------------------------------------------
// 1. Metric arithmetic on reference values

fn metric_arithmetic() -> Check {
    let start = Instant::now();
    let d1 = delta(44.47, 63.08).map_err(|e| e.to_string())?;
    let d2 = delta(53.31, 69.82).map_err(|e| e.to_string())?;
    ensure((d1 - 29.51).abs() <= 0.02, || {
        format!("delta(44.47, 63.08) = {d1}")
    })?;
    ensure((d2 - 23.65).abs() <= 0.02, || {
        format!("delta(53.31, 69.82) = {d2}")
    })?;
    let bar = delta_bar(&[29.51, 23.65]).map_err(|e| e.to_string())?;
    ensure((bar - 26.58).abs() <= 0.01, || format!("delta_bar = {bar}"))?;
    within_budget(start, Duration::from_secs(1))?;
    Ok(format!("{d1:.2}, {d2:.2}, mean {bar:.2}"))
}

// ---------------------------------------------------------------------------
// 2. FFT against a brute-force DFT

fn reference_dft(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ang = -2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    acc += x[y * w + xx] * Complex64::from_polar(1.0, ang);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

fn fft_oracle() -> Check {
    let start = Instant::now();
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    for h in 1..=16 {
        for w in 1..=16 {
            let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let plane = Grid::new(h, w, x.clone()).unwrap();
            let fast = fft2(&plane).unwrap();
            let slow = reference_dft(&x, h, w);
            let diff = fast
                .data
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            ensure(diff < 1e-6 * energy, || {
                format!("{h}x{w}: max diff {diff:e}, energy {energy:e}")
            })?;
            worst = worst.max(diff / energy);

            let back = ifft2_real(&fast).unwrap();
            let err = x
                .iter()
                .zip(&back.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            ensure(err <= 1e-5 * energy.sqrt(), || {
                format!("{h}x{w}: round trip error {err:e}")
            })?;

            let spec_energy: f64 =
                fast.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
            ensure((spec_energy - energy).abs() <= 1e-4 * energy, || {
                format!("{h}x{w}: Parseval {spec_energy} vs {energy}")
            })?;
        }
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("256 sizes, worst diff/energy {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 3. Stylization invariants

fn spectrum_of(planes: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<Complex64>> {
    planes
        .iter()
        .map(|p| fft2(&Grid::new(h, w, p.clone()).unwrap()).unwrap().data)
        .collect()
}

fn planes_of(img: &Tensor3<f64>) -> Vec<Vec<f64>> {
    (0..3)
        .map(|c| img.data().iter().skip(c).step_by(3).copied().collect())
        .collect()
}

fn stylization_invariants() -> Check {
    let start = Instant::now();
    let (h, w) = (64, 64);
    let mut rng = rng(3);
    let donors: Vec<_> = (0..8).map(|_| random_image(&mut rng, h, w)).collect();
    let mut worst = [0.0f64; 4];
    for i in 0..100 {
        let img = random_image(&mut rng, h, w);

        let own = extract_style(std::slice::from_ref(&img), 0.01, 0).unwrap();
        let same = apply_style_unclamped(&img, &own).unwrap();
        let e = same
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max);
        ensure(e <= 1e-4, || format!("image {i}: self-style error {e:e}"))?;
        worst[0] = worst[0].max(e);

        // Odd windows only: an even extent is not symmetric about DC.
        for beta in [0.01, 0.05] {
            let token = extract_style(&donors, beta, 0).unwrap();
            let styled = apply_style_unclamped(&img, &token).unwrap();
            let before = spectrum_of(&planes_of(&img.cast::<f64>()), h, w);
            let after = spectrum_of(&planes_of(&styled), h, w);
            let window = window_bins(beta, h, w);
            for c in 0..3 {
                for u in 0..h {
                    for v in 0..w {
                        let (a, b) = (before[c][u * w + v], after[c][u * w + v]);
                        if a.norm() > 1e-6 && b.norm() > 1e-6 {
                            let dphi = (b * a.conj()).arg().abs();
                            ensure(dphi <= 1e-3, || {
                                format!("image {i} beta {beta}: phase moved {dphi:e} at ({u},{v})")
                            })?;
                            worst[1] = worst[1].max(dphi);
                        }
                        if !window.contains(&(u, v)) {
                            let rel = (b.norm() - a.norm()).abs() / a.norm().max(1e-6);
                            ensure(rel <= 1e-4, || {
                                format!("image {i} beta {beta}: complement amplitude changed by {rel:e} at ({u},{v})")
                            })?;
                            worst[2] = worst[2].max(rel);
                        }
                    }
                }
            }
            let once = styled.map(|v| v as f32);
            let twice = Stylizer::new(&once)
                .unwrap()
                .apply_unclamped(&token)
                .unwrap();
            let e = planes_of(&styled)
                .iter()
                .zip(&twice)
                .flat_map(|(a, b)| a.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            ensure(e <= 1e-4, || {
                format!("image {i} beta {beta}: idempotence error {e:e}")
            })?;
            worst[3] = worst[3].max(e);
        }
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "100 images; worst identity {:.1e}, phase {:.1e} rad, complement {:.1e}, idempotence {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------------------
// 4. Gradients through each loss composite

struct GradCase {
    schedule: ClassSchedule,
    model: SegModel<f64>,
    views: SampleViews,
    targets: SampleTargets,
}

fn grad_case() -> GradCase {
    let schedule = ClassSchedule::three_way();
    let layout = schedule.channel_layout(1);
    let mut model = SegModel::<f64>::init(17, DEFAULT_FEATURES, layout.clone()).unwrap();
    let mut rng = rng(4);
    for t in [1, 3, 5] {
        for b in model.params_mut().tensors_mut()[t].iter_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let (h, w) = (16, 16);
    let views = SampleViews {
        current: random_image(&mut rng, h, w),
        old: vec![random_image(&mut rng, h, w)],
    };
    let step_labels = (0..h * w)
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE,
            1..=3 => 3,
            4..=5 => 4,
            _ => UNKNOWN,
        })
        .collect();
    let teacher_layout = schedule.channel_layout(0);
    let teacher = ProbMap::from_probs(
        h,
        w,
        teacher_layout.clone(),
        random_probs(&mut rng, h * w, 3, 2.0),
    )
    .unwrap();
    let pseudo = PseudoLabelMap {
        height: h,
        width: w,
        layout: teacher_layout.clone(),
        labels: (0..h * w)
            .map(|_| [0, 1, 2, IGNORE][rng.random_range(0..4)])
            .collect(),
        source_style: vec![0; h * w],
    };
    GradCase {
        schedule,
        model,
        views,
        targets: SampleTargets {
            step_labels,
            teacher_old: vec![teacher],
            pseudo: Some(pseudo),
        },
    }
}

/// Composite objective recomputed from scratch: reference logits, explicit
/// channel groups, plain loss formulas.
fn reference_objective(
    case: &GradCase,
    model: &SegModel<f64>,
    l: &Lambdas,
    gates: Option<&[Gates; 2]>,
) -> (f64, [Gates; 2]) {
    // Layout at step 1 is [u, 1, 2, 3, 4].
    let past_into_u = vec![vec![0, 1, 2], vec![3], vec![4]]; // -> [u, 3, 4]
    let new_into_u = vec![vec![0, 3, 4], vec![1], vec![2]]; // -> [u, 1, 2]
    let c = 5;
    let index = |layout: &[u8], lbl: u8| {
        (lbl != IGNORE).then(|| layout.iter().position(|&x| x == lbl).unwrap())
    };
    let (cur, g_cur) = reference_logits(model, &case.views.current.cast(), gates.map(|g| &g[0]));
    let (old, g_old) = reference_logits(model, &case.views.old[0].cast(), gates.map(|g| &g[1]));

    let y: Vec<_> = case
        .targets
        .step_labels
        .iter()
        .map(|&v| index(&[0, 3, 4], v))
        .collect();
    let mut total = nll(&grouped_log_probs(&cur, c, &past_into_u), &y);
    if l.ce_o > 0.0 {
        total += l.ce_o * nll(&grouped_log_probs(&old, c, &past_into_u), &y);
    }
    if l.lws_n > 0.0 {
        let pseudo = case.targets.pseudo.as_ref().unwrap();
        let yp: Vec<_> = pseudo
            .labels
            .iter()
            .map(|&v| index(&[0, 1, 2], v))
            .collect();
        total += l.lws_n * nll(&grouped_log_probs(&cur, c, &new_into_u), &yp);
    }
    if l.kd_o > 0.0 {
        total += l.kd_o
            * soft_ce(
                &grouped_log_probs(&old, c, &new_into_u),
                &case.targets.teacher_old[0].probs,
            );
    }
    (total, [g_cur, g_old])
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let case = grad_case();
    let composites = [
        (
            "ce_n",
            Lambdas {
                ce_o: 0.0,
                lws_n: 0.0,
                kd_o: 0.0,
            },
        ),
        (
            "ce_n+ce_o",
            Lambdas {
                ce_o: 10.0,
                lws_n: 0.0,
                kd_o: 0.0,
            },
        ),
        (
            "ce_n+lws_n",
            Lambdas {
                ce_o: 0.0,
                lws_n: 10.0,
                kd_o: 0.0,
            },
        ),
        (
            "ce_n+kd_o",
            Lambdas {
                ce_o: 0.0,
                lws_n: 0.0,
                kd_o: 10.0,
            },
        ),
    ];
    let eps = 1e-3;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, l) in &composites {
        let (b, grads) = sample_objective(
            1,
            &case.schedule,
            &case.model,
            &case.views,
            &case.targets,
            l,
        )
        .map_err(|e| e.to_string())?;
        let (value, gates) = reference_objective(&case, &case.model, l, None);
        ensure(
            (b.total - value).abs() <= 1e-9 * value.abs().max(1.0),
            || format!("{name}: objective {} vs reference {value}", b.total),
        )?;
        for t in 0..6 {
            for i in 0..grads.tensors()[t].len() {
                let mut plus = case.model.clone();
                plus.params_mut().tensors_mut()[t][i] += eps;
                let mut minus = case.model.clone();
                minus.params_mut().tensors_mut()[t][i] -= eps;
                let lp = reference_objective(&case, &plus, l, Some(&gates)).0;
                let lm = reference_objective(&case, &minus, l, Some(&gates)).0;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.tensors()[t][i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                ensure(rel < 1e-4, || {
                    format!("{name}: tensor {t} index {i}: {numeric} vs {analytic}")
                })?;
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "{checked} parameter checks over 4 composites, worst rel err {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Grouping and pseudo-label properties

fn grouping_properties() -> Check {
    let start = Instant::now();
    let schedule = ClassSchedule::three_way();
    let mut rng = rng(5);
    let mut worst = 0.0f64;
    for n in 0..1000 {
        let t = n % 3;
        let layout = schedule.channel_layout(t);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let logits: Vec<f32> = (0..h * w * layout.len())
            .map(|_| rng.random_range(-30.0..30.0))
            .collect();
        let p = softmax(
            &Tensor3::from_vec(h, w, layout.len(), logits).unwrap(),
            &layout,
        )
        .unwrap();
        for g in [
            group_past_into_u(&p, &schedule, t).unwrap(),
            group_new_into_u(&p, &schedule, t).unwrap(),
        ] {
            for px in 0..g.pixels() {
                let e = (g.pixel(px).iter().sum::<f64>() - 1.0).abs();
                ensure(e <= 1e-6, || format!("map {n}: mass off by {e:e}"))?;
                worst = worst.max(e);
            }
        }
    }

    let teacher_layout = schedule.channel_layout(1);
    let new_ids = schedule.new_classes(2);
    let taus = [0.5, 0.7, 0.9, 0.99];
    for n in 0..200 {
        let (h, w) = (8, 8);
        let views: Vec<StyledProbs> = (0..rng.random_range(1..4))
            .map(|k| StyledProbs {
                style: k,
                probs: ProbMap::from_probs(
                    h,
                    w,
                    teacher_layout.clone(),
                    random_probs(&mut rng, h * w, 5, 4.0),
                )
                .unwrap(),
            })
            .collect();
        let current: Vec<u8> = (0..h * w)
            .map(|_| [0, 0, 5, 6][rng.random_range(0..4)])
            .collect();
        let mut labeled_prev: Option<Vec<bool>> = None;
        for &tau in &taus {
            let out = fuse_pseudo_labels(&views, &current, tau, 0.0).unwrap();
            for p in 0..h * w {
                let l = out.labels[p];
                ensure(!new_ids.contains(&l), || {
                    format!("case {n}: new-class id {l} emitted")
                })?;
                ensure(current[p] == UNKNOWN || l == UNKNOWN, || {
                    format!("case {n}: pixel {p} labelled {l} where Y_t != u")
                })?;
            }
            let labeled: Vec<bool> = out.labels.iter().map(|&l| l != IGNORE).collect();
            if let Some(prev) = &labeled_prev {
                for p in 0..h * w {
                    ensure(prev[p] || !labeled[p], || {
                        format!("case {n}: raising tau to {tau} labelled pixel {p}")
                    })?;
                }
            }
            labeled_prev = Some(labeled);
        }
        // With top-K admission on, refinement still holds.
        let out = fuse_pseudo_labels(&views, &current, 0.9, 0.66).unwrap();
        for p in 0..h * w {
            ensure(current[p] == UNKNOWN || out.labels[p] == UNKNOWN, || {
                format!("case {n}: top-K broke refinement")
            })?;
        }
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "1000 maps (worst mass error {worst:.1e}), 200 pseudo-label cases over tau {taus:?}"
    ))
}

// ---------------------------------------------------------------------------
// 6. Zero auxiliary weights reproduce the self-styled fine-tuning baseline

fn baseline_equivalence() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        h: 32,
        w: 32,
        n_train: 24,
        n_eval: 4,
        epochs: 3,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let data = stylecl::commands::cmd_generate(&cfg, false).map_err(|e| e.to_string())?;
    let store = DatasetStore::new(data.store.root());
    let zero = ExperimentConfig {
        lambdas: [0.0; 3],
        ..cfg.clone()
    };
    let full = run_protocol(&zero, &store, Some(&Variant::parse("full").unwrap()))
        .map_err(|e| e.to_string())?;
    let base = run_protocol(&cfg, &store, Some(&Variant::parse("ft_selfstyle").unwrap()))
        .map_err(|e| e.to_string())?;
    for (a, b) in full.checkpoints.iter().zip(&base.checkpoints) {
        ensure(a.to_bytes() == b.to_bytes(), || {
            format!("step {} checkpoints differ", a.step)
        })?;
    }
    ensure(
        full.checkpoints.len() == 3 && base.checkpoints.len() == 3,
        || "missing checkpoints".into(),
    )?;
    ensure(full.trace == base.trace, || "loss traces differ".into())?;
    // The comparison has teeth: non-zero weights change the result.
    let weighted = run_protocol(&cfg, &store, Some(&Variant::parse("full").unwrap()))
        .map_err(|e| e.to_string())?;
    ensure(
        weighted.checkpoints[1].to_bytes() != base.checkpoints[1].to_bytes(),
        || "non-zero weights left step 1 unchanged".into(),
    )?;
    let took = within_budget(start, Duration::from_secs(180))?;
    Ok(format!(
        "3 checkpoints bit-identical ({:.1}s)",
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 7-9. Default benchmark

const ORDER: [&str; 5] = ["ft", "ft_selfstyle", "mask:1010", "mask:1110", "full"];

struct BenchRuns {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    bench: Bench,
    runs: Vec<RunOutcome>,
    took: Duration,
}

fn final_delta_bar(r: &RunOutcome) -> f64 {
    r.report.final_delta_bar().expect("oracle attached")
}

fn run_benchmark() -> std::result::Result<BenchRuns, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let bench = prepare_bench(&cfg, false).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for v in ORDER {
        let variant = Variant::parse(v).unwrap();
        let out = run_variant(
            &cfg,
            &bench.data,
            &variant,
            &bench.eval_sets,
            &bench.external,
            &bench.oracle,
            false,
        )
        .map_err(|e| format!("{v}: {e}"))?;
        runs.push(out);
    }
    Ok(BenchRuns {
        _dir: dir,
        cfg,
        bench,
        runs,
        took: start.elapsed(),
    })
}

fn ordering(b: &BenchRuns) -> Check {
    let deltas: Vec<f64> = b.runs.iter().map(final_delta_bar).collect();
    let shown = ORDER
        .iter()
        .zip(&deltas)
        .map(|(v, d)| format!("{v} {d:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    for i in 1..deltas.len() {
        ensure(deltas[i] < deltas[i - 1], || {
            format!("not strictly decreasing: {shown}")
        })?;
    }
    let gain = deltas[0] - deltas[4];
    ensure(gain >= 10.0, || {
        format!("full beats ft by only {gain:.2} points: {shown}")
    })?;
    ensure(b.took < Duration::from_secs(600), || {
        format!("took {:.0}s: {shown}", b.took.as_secs_f64())
    })?;
    Ok(format!(
        "final delta_bar: {shown}; full beats ft by {gain:.2} ({:.0}s)",
        b.took.as_secs_f64()
    ))
}

fn beta_sweep(b: &BenchRuns) -> Check {
    let start = Instant::now();
    let full = Variant::parse("full").unwrap();
    let default = final_delta_bar(&b.runs[4]);
    let small = ExperimentConfig {
        beta: 0.001,
        output_dir: b.cfg.output_dir.join("beta_0.001"),
        ..b.cfg.clone()
    };
    let at_small = run_variant(
        &small,
        &b.bench.data,
        &full,
        &b.bench.eval_sets,
        &b.bench.external,
        &b.bench.oracle,
        false,
    )
    .map_err(|e| e.to_string())?;
    let no_style = Variant::parse("no_style").unwrap();
    let raw = run_variant(
        &b.cfg,
        &b.bench.data,
        &no_style,
        &b.bench.eval_sets,
        &b.bench.external,
        &b.bench.oracle,
        false,
    )
    .map_err(|e| e.to_string())?;
    let (d_small, d_raw) = (final_delta_bar(&at_small), final_delta_bar(&raw));
    let shown =
        format!("beta 0.01: {default:.2}, beta 0.001: {d_small:.2}, no stylization: {d_raw:.2}");
    let took = start.elapsed() + b.took;
    ensure(took < Duration::from_secs(1200), || {
        format!("took {:.0}s: {shown}", took.as_secs_f64())
    })?;
    ensure(default < d_raw, || {
        format!("stylization does not help: {shown}")
    })?;
    ensure(default < d_small, || {
        format!("beta 0.01 not better than beta 0.001: {shown}")
    })?;
    Ok(shown)
}

fn exemplar_audit(b: &BenchRuns) -> Check {
    let mut reads = 0;
    for (v, r) in ORDER.iter().zip(&b.runs) {
        ensure(r.run.violations.is_empty(), || {
            format!(
                "{v}: {} reads of earlier-step training files",
                r.run.violations.len()
            )
        })?;
        ensure(r.train_reads > 0, || {
            format!("{v}: no training reads were logged")
        })?;
        reads += r.train_reads;
    }
    // The log does catch a stale read.
    let store = DatasetStore::new(b.bench.data.store.root());
    store.log().enter_step(Some(1));
    store.read_train(0).map_err(|e| e.to_string())?;
    store.log().enter_step(None);
    ensure(!store.exemplar_violations().is_empty(), || {
        "a step-0 read during step 1 went unnoticed".into()
    })?;
    Ok(format!(
        "{reads} logged training-file reads across {} runs, none stale",
        b.runs.len()
    ))
}

// ---------------------------------------------------------------------------

fn run(id: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {id} PASS  {name}: {detail} [{secs:.1}s]"),
        Err(why) => println!("criterion {id} FAIL  {name}: {why} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "metric arithmetic", metric_arithmetic);
    ok &= run(2, "FFT oracle", fft_oracle);
    ok &= run(3, "stylization invariants", stylization_invariants);
    ok &= run(4, "gradient suite", gradient_suite);
    ok &= run(
        5,
        "grouping and pseudo-label properties",
        grouping_properties,
    );
    ok &= run(6, "baseline equivalence", baseline_equivalence);
    match run_benchmark() {
        Ok(b) => {
            ok &= run(7, "end-to-end ordering", || ordering(&b));
            ok &= run(8, "beta sweep", || beta_sweep(&b));
            ok &= run(9, "exemplar-free audit", || exemplar_audit(&b));
        }
        Err(e) => {
            for (id, name) in [
                (7, "end-to-end ordering"),
                (8, "beta sweep"),
                (9, "exemplar-free audit"),
            ] {
                println!("criterion {id} FAIL  {name}: benchmark run failed: {e}");
            }
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
