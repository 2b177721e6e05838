//! Synthetic street scenes with full ground truth, per-step label masking,
//! and the on-disk dataset layout used by the protocol.
//!
//! Every read that goes through a [`DatasetStore`] is recorded in its
//! [`AccessLog`] together with the protocol step that was active, so a run
//! can be audited for exemplar-free behaviour afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::Tensor3;
use crate::{ClassId, Error, Result, IGNORE, UNKNOWN};

pub const SKY: ClassId = 1;
pub const ROAD: ClassId = 2;
pub const BUILDING: ClassId = 3;
pub const POLE: ClassId = 4;
pub const CAR: ClassId = 5;
pub const PERSON: ClassId = 6;

/// Classes the scene generator can emit, in painter's order.
pub const SCENE_CLASSES: [ClassId; 6] = [SKY, ROAD, BUILDING, POLE, CAR, PERSON];

/// Disjoint class sets introduced one per step. The unknown class is
/// implicit in every set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSchedule {
    pub sets: Vec<Vec<ClassId>>,
    pub class_names: BTreeMap<ClassId, String>,
}

impl ClassSchedule {
    /// background -> static -> moving split.
    pub fn three_way() -> Self {
        let names = [
            (SKY, "sky"),
            (ROAD, "road"),
            (BUILDING, "building"),
            (POLE, "pole"),
            (CAR, "car"),
            (PERSON, "person"),
        ];
        Self {
            sets: vec![vec![SKY, ROAD], vec![BUILDING, POLE], vec![CAR, PERSON]],
            class_names: names.iter().map(|&(c, n)| (c, n.to_string())).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets.is_empty() {
            return Err(Error::config(
                "schedule.sets",
                "at least one class set is required",
            ));
        }
        let mut seen = Vec::new();
        for (t, set) in self.sets.iter().enumerate() {
            for &c in set {
                if c == UNKNOWN || c == IGNORE {
                    return Err(Error::config(
                        format!("schedule.sets[{t}]"),
                        format!("class id {c} is reserved"),
                    ));
                }
                if seen.contains(&c) {
                    return Err(Error::config(
                        format!("schedule.sets[{t}]"),
                        format!("class {c} appears in two sets"),
                    ));
                }
                if !self.class_names.contains_key(&c) {
                    return Err(Error::config(
                        "schedule.class_names",
                        format!("no name for class {c}"),
                    ));
                }
                seen.push(c);
            }
        }
        Ok(())
    }

    /// Errors unless every class the scene generator emits is scheduled.
    pub fn check_covers_scene_classes(&self) -> Result<()> {
        for c in SCENE_CLASSES {
            if !self.sets.iter().any(|s| s.contains(&c)) {
                return Err(Error::config(
                    "schedule.sets",
                    format!("generated class {c} is never introduced"),
                ));
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.sets.len()
    }

    /// Real classes introduced at step `t`.
    pub fn new_classes(&self, t: usize) -> &[ClassId] {
        &self.sets[t]
    }

    /// Real classes introduced strictly before step `t`.
    pub fn past_classes(&self, t: usize) -> Vec<ClassId> {
        self.sets[..t].iter().flatten().copied().collect()
    }

    /// Real classes introduced up to and including step `t`.
    pub fn seen_classes(&self, t: usize) -> Vec<ClassId> {
        self.sets[..=t].iter().flatten().copied().collect()
    }

    /// Output channel layout of the model at step `t`: unknown first, then
    /// every seen class in introduction order.
    pub fn channel_layout(&self, t: usize) -> Vec<ClassId> {
        std::iter::once(UNKNOWN)
            .chain(self.seen_classes(t))
            .collect()
    }

    pub fn name(&self, c: ClassId) -> &str {
        self.class_names.get(&c).map(String::as_str).unwrap_or("?")
    }

    /// Stable 64-bit digest of the schedule.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("schedule serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

fn default_noise_sigma() -> f32 {
    0.01
}

/// Appearance of one image domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Base RGB per real class id.
    pub palette: BTreeMap<ClassId, [f32; 3]>,
    pub texture_amp: f32,
    /// Period of the smooth texture field, in pixels.
    pub texture_scale: f32,
    pub layout_seed_offset: u64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f32,
}

const BASE_PALETTE: [(ClassId, [f32; 3]); 6] = [
    (SKY, [0.50, 0.70, 0.92]),
    (ROAD, [0.38, 0.38, 0.42]),
    (BUILDING, [0.66, 0.48, 0.36]),
    (POLE, [0.88, 0.82, 0.30]),
    (CAR, [0.80, 0.18, 0.20]),
    (PERSON, [0.25, 0.62, 0.30]),
];

impl DomainSpec {
    /// Palette derived from the base colors as `gain * base + tint`, clamped.
    pub fn tinted(
        name: &str,
        gain: f32,
        tint: [f32; 3],
        texture_amp: f32,
        texture_scale: f32,
        layout_seed_offset: u64,
    ) -> Self {
        let palette = BASE_PALETTE
            .iter()
            .map(|&(c, rgb)| {
                (
                    c,
                    std::array::from_fn(|i| (gain * rgb[i] + tint[i]).clamp(0.0, 1.0)),
                )
            })
            .collect();
        Self {
            name: name.into(),
            palette,
            texture_amp,
            texture_scale,
            layout_seed_offset,
            noise_sigma: default_noise_sigma(),
        }
    }

    pub fn dayville() -> Self {
        Self::tinted("dayville", 1.0, [0.0, 0.0, 0.0], 0.12, 32.0, 0)
    }

    pub fn duskton() -> Self {
        Self::tinted("duskton", 0.8, [0.14, -0.02, -0.12], 0.12, 48.0, 1_000_003)
    }

    pub fn nightburg() -> Self {
        Self::tinted(
            "nightburg",
            0.6,
            [-0.10, -0.04, 0.16],
            0.12,
            64.0,
            2_000_003,
        )
    }

    /// Held-out domain for the generalization score.
    pub fn fogmouth() -> Self {
        Self::tinted("fogmouth", 0.7, [0.15, 0.15, 0.12], 0.12, 20.0, 3_000_017)
    }

    pub fn validate(&self, schedule: &ClassSchedule, field: &str) -> Result<()> {
        for set in &schedule.sets {
            for c in set {
                if !self.palette.contains_key(c) {
                    return Err(Error::config(
                        format!("{field}.palette"),
                        format!("no color for class {c}"),
                    ));
                }
            }
        }
        for c in SCENE_CLASSES {
            if !self.palette.contains_key(&c) {
                return Err(Error::config(
                    format!("{field}.palette"),
                    format!("no color for class {c}"),
                ));
            }
        }
        if !(self.texture_scale > 0.0) || !(self.texture_amp >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config(
                field,
                "texture_scale must be > 0, texture_amp and noise_sigma >= 0",
            ));
        }
        Ok(())
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<ClassId>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, c: ClassId) -> Self {
        Self {
            height,
            width,
            data: vec![c; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: ClassId) {
        self.data[y * self.width + x] = c;
    }

    pub fn distinct(&self) -> Vec<ClassId> {
        let mut v = self.data.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Image with its complete ground truth and the labels visible at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor3<f32>,
    pub full_labels: LabelMap,
    pub step_labels: LabelMap,
}

/// Keeps in-set labels and turns everything else into the unknown class.
pub fn mask_labels(full: &LabelMap, class_set: &[ClassId]) -> LabelMap {
    LabelMap {
        height: full.height,
        width: full.width,
        data: full
            .data
            .iter()
            .map(|c| if class_set.contains(c) { *c } else { UNKNOWN })
            .collect(),
    }
}

fn scene_rng(domain: &DomainSpec, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ domain
            .layout_seed_offset
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

/// Smooth value noise in `[-1, 1]` with lattice spacing `period`.
struct ValueNoise {
    period: f32,
    cols: usize,
    offset: (f32, f32),
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize, period: f32) -> Self {
        let rows = (h as f32 / period).ceil() as usize + 2;
        let cols = (w as f32 / period).ceil() as usize + 2;
        let offset = (rng.random_range(0.0..period), rng.random_range(0.0..period));
        let lattice = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            period,
            cols,
            offset,
            lattice,
        }
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        let fy = (y as f32 + self.offset.0) / self.period;
        let fx = (x as f32 + self.offset.1) / self.period;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
        let l = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
        let bottom = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn paint_rect(labels: &mut LabelMap, y0: usize, y1: usize, x0: usize, x1: usize, c: ClassId) {
    for y in y0..y1.min(labels.height) {
        for x in x0..x1.min(labels.width) {
            labels.set(y, x, c);
        }
    }
}

fn paint_ellipse(labels: &mut LabelMap, cy: f32, cx: f32, ry: f32, rx: f32, c: ClassId) {
    for y in 0..labels.height {
        for x in 0..labels.width {
            let dy = (y as f32 + 0.5 - cy) / ry;
            let dx = (x as f32 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                labels.set(y, x, c);
            }
        }
    }
}

fn scene_layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    let (hf, wf) = (h as f32, w as f32);
    let sky_h = (rng.random_range(0.25f32..=0.40) * hf).round() as usize;
    let road_top = h - (rng.random_range(0.30f32..=0.45) * hf).round() as usize;
    let mut labels = LabelMap::filled(h, w, SKY);
    paint_rect(&mut labels, road_top, h, 0, w, ROAD);

    let n_buildings = rng.random_range(1..=3);
    for _ in 0..n_buildings {
        let bw = rng.random_range((wf / 6.0)..=(wf / 2.5)).round() as usize;
        let x0 = rng.random_range(0..=w - bw);
        let top = rng.random_range(sky_h..=road_top.saturating_sub(4).max(sky_h));
        paint_rect(&mut labels, top, road_top, x0, x0 + bw, BUILDING);
    }

    let n_poles = rng.random_range(0..=2);
    let pole_w = (w / 32).max(1);
    for _ in 0..n_poles {
        let x0 = rng.random_range(0..=w - pole_w);
        let top = rng.random_range((sky_h / 2)..=road_top.saturating_sub(8).max(sky_h / 2));
        paint_rect(&mut labels, top, road_top + h / 32, x0, x0 + pole_w, POLE);
    }

    let road_h = (h - road_top) as f32;
    let n_cars = rng.random_range(0..=3);
    for _ in 0..n_cars {
        let rx = rng.random_range((wf / 12.0)..=(wf / 7.0));
        let ry = (rx * rng.random_range(0.5f32..=0.6)).min(road_h / 2.0);
        let cy = rng.random_range((road_top as f32 + ry)..=(hf - ry).max(road_top as f32 + ry));
        let cx = rng.random_range(rx..=(wf - rx));
        paint_ellipse(&mut labels, cy, cx, ry, rx, CAR);
    }

    let n_persons = rng.random_range(0..=2);
    for _ in 0..n_persons {
        let ry = rng.random_range((hf / 16.0)..=(hf / 10.0));
        let rx = (ry * rng.random_range(0.35f32..=0.45)).max(1.5);
        let cy = rng.random_range((road_top as f32 - 0.5 * ry)..=(road_top as f32 + ry));
        let cx = rng.random_range(rx..=(wf - rx));
        paint_ellipse(&mut labels, cy, cx, ry, rx, PERSON);
    }
    labels
}

fn check_scene_dims(h: usize, w: usize) -> Result<()> {
    for (name, n) in [("height", h), ("width", w)] {
        if n < 32 || !n.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "scene {name} must be a power of two >= 32, got {n}"
            )));
        }
    }
    Ok(())
}

/// Deterministic street scene: sky band, road band, buildings, poles, cars
/// and persons, colored by the domain palette plus smooth texture and pixel
/// noise.
pub fn generate_scene(
    domain: &DomainSpec,
    seed: u64,
    h: usize,
    w: usize,
) -> Result<(Tensor3<f32>, LabelMap)> {
    check_scene_dims(h, w)?;
    let mut rng = scene_rng(domain, seed);
    let labels = scene_layout(&mut rng, h, w);
    let texture = ValueNoise::new(&mut rng, h, w, domain.texture_scale);
    let noise = Normal::new(0.0f32, domain.noise_sigma)
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut image = Tensor3::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let c = labels.get(y, x);
            let base = domain
                .palette
                .get(&c)
                .ok_or_else(|| Error::config("palette", format!("no color for class {c}")))?;
            let t = if domain.texture_amp > 0.0 {
                domain.texture_amp * texture.at(y, x)
            } else {
                0.0
            };
            for (ch, &b) in base.iter().enumerate() {
                let n = if domain.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                image.set(y, x, ch, (b + t + n).clamp(0.0, 1.0));
            }
        }
    }
    Ok((image, labels))
}

// ---------------------------------------------------------------------------
// PNM I/O

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Binary PPM, maxval 255, round-to-nearest.
pub fn encode_ppm(image: &Tensor3<f32>) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "PPM needs 3 channels, got {}",
            image.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(
                pos as u64,
                format!("expected header integer #{}", i + 1),
            ));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start as u64, "header integer out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos as u64, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            pos as u64,
            format!("maxval must be 255, got {maxval}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos as u64, "zero image dimension"));
    }
    Ok(PnmHeader {
        width,
        height,
        data_offset: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor3<f32>> {
    let hdr = parse_pnm_header(bytes, b"P6")?;
    let n = hdr.width * hdr.height * 3;
    let raster = bytes
        .get(hdr.data_offset..hdr.data_offset + n)
        .ok_or_else(|| {
            Error::format(
                bytes.len() as u64,
                format!("raster truncated, need {n} bytes"),
            )
        })?;
    Tensor3::from_vec(
        hdr.height,
        hdr.width,
        3,
        raster.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let hdr = parse_pnm_header(bytes, b"P5")?;
    let n = hdr.width * hdr.height;
    let raster = bytes
        .get(hdr.data_offset..hdr.data_offset + n)
        .ok_or_else(|| {
            Error::format(
                bytes.len() as u64,
                format!("raster truncated, need {n} bytes"),
            )
        })?;
    Ok(LabelMap {
        height: hdr.height,
        width: hdr.width,
        data: raster.to_vec(),
    })
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Files backing one sample: `<stem>.ppm`, `<stem>.full.pgm`, `<stem>.step.pgm`.
pub fn sample_paths(stem: &Path) -> [PathBuf; 3] {
    [
        with_suffix(stem, ".ppm"),
        with_suffix(stem, ".full.pgm"),
        with_suffix(stem, ".step.pgm"),
    ]
}

pub fn write_sample(stem: &Path, sample: &LabeledSample) -> Result<()> {
    let [img, full, step] = sample_paths(stem);
    write_file(&img, &encode_ppm(&sample.image)?)?;
    write_file(&full, &encode_pgm(&sample.full_labels))?;
    write_file(&step, &encode_pgm(&sample.step_labels))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn tag_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, msg } => {
            Error::format(offset, format!("{}: {msg}", path.display()))
        }
        other => other,
    }
}

pub fn read_sample(stem: &Path) -> Result<LabeledSample> {
    let [img, full, step] = sample_paths(stem);
    let image = decode_ppm(&read_bytes(&img)?).map_err(|e| tag_path(e, &img))?;
    let full_labels = decode_pgm(&read_bytes(&full)?).map_err(|e| tag_path(e, &full))?;
    let step_labels = decode_pgm(&read_bytes(&step)?).map_err(|e| tag_path(e, &step))?;
    let dims = (image.height(), image.width());
    if (full_labels.height, full_labels.width) != dims
        || (step_labels.height, step_labels.width) != dims
    {
        return Err(Error::Shape(format!(
            "{}: label maps do not match the image size",
            stem.display()
        )));
    }
    Ok(LabeledSample {
        image,
        full_labels,
        step_labels,
    })
}

// ---------------------------------------------------------------------------
// Step datasets

/// Seeds are allotted in disjoint blocks of this size.
pub const SEED_BLOCK: u64 = 1_000_000;
const EVAL_BLOCK_BASE: u64 = 1_000;
const EXTERNAL_BLOCK: u64 = 999;

pub fn train_seed(base: u64, step: usize, i: usize) -> u64 {
    base.wrapping_add((1 + step as u64) * SEED_BLOCK + i as u64)
}

pub fn eval_seed(base: u64, domain_index: usize, j: usize) -> u64 {
    base.wrapping_add((EVAL_BLOCK_BASE + domain_index as u64) * SEED_BLOCK + j as u64)
}

pub fn external_seed(base: u64, j: usize) -> u64 {
    base.wrapping_add(EXTERNAL_BLOCK * SEED_BLOCK + j as u64)
}

/// Errors when per-step counts would spill into another seed block.
pub fn check_seed_budget(num_steps: usize, n_train: usize, n_eval: usize) -> Result<()> {
    if n_train as u64 >= SEED_BLOCK || n_eval as u64 >= SEED_BLOCK {
        return Err(Error::config(
            "n_train",
            format!("sample counts must stay below {SEED_BLOCK}"),
        ));
    }
    if num_steps as u64 >= EXTERNAL_BLOCK - 1 {
        return Err(Error::config(
            "schedule.sets",
            "too many steps for the seed layout",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepManifest {
    pub step: usize,
    pub domain: String,
    pub class_set: Vec<ClassId>,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: BTreeMap<String, Vec<u64>>,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub domain_index: usize,
    pub domain: String,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Clone)]
pub struct StepDataset {
    pub manifest: StepManifest,
    pub train: Vec<LabeledSample>,
    pub eval: Vec<EvalSet>,
}

/// Full-label evaluation samples of one domain.
pub fn generate_eval_samples(
    domain: &DomainSpec,
    seeds: &[u64],
    h: usize,
    w: usize,
) -> Result<Vec<LabeledSample>> {
    seeds
        .iter()
        .map(|&s| {
            let (image, full) = generate_scene(domain, s, h, w)?;
            Ok(LabeledSample {
                image,
                step_labels: full.clone(),
                full_labels: full,
            })
        })
        .collect()
}

/// Training samples of domain `t` masked to the step-`t` class set, plus
/// full-label evaluation samples for every domain up to `t`.
pub fn build_step_dataset(
    schedule: &ClassSchedule,
    domains: &[DomainSpec],
    t: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
    (h, w): (usize, usize),
) -> Result<StepDataset> {
    if schedule.num_steps() != domains.len() {
        return Err(Error::config(
            "domain_sequence",
            format!(
                "{} domains for {} class sets",
                domains.len(),
                schedule.num_steps()
            ),
        ));
    }
    if t >= schedule.num_steps() {
        return Err(Error::config(
            "step",
            format!("step {t} out of range for {} steps", schedule.num_steps()),
        ));
    }
    check_seed_budget(schedule.num_steps(), n_train, n_eval)?;
    let class_set = schedule.new_classes(t).to_vec();
    let train_seeds: Vec<u64> = (0..n_train).map(|i| train_seed(seed, t, i)).collect();
    let train = train_seeds
        .iter()
        .map(|&s| {
            let (image, full) = generate_scene(&domains[t], s, h, w)?;
            let step_labels = mask_labels(&full, &class_set);
            Ok(LabeledSample {
                image,
                full_labels: full,
                step_labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut eval = Vec::new();
    let mut eval_seeds = BTreeMap::new();
    for (k, domain) in domains.iter().enumerate().take(t + 1) {
        let seeds: Vec<u64> = (0..n_eval).map(|j| eval_seed(seed, k, j)).collect();
        eval.push(EvalSet {
            domain_index: k,
            domain: domain.name.clone(),
            samples: generate_eval_samples(domain, &seeds, h, w)?,
        });
        eval_seeds.insert(domain.name.clone(), seeds);
    }
    let manifest = StepManifest {
        step: t,
        domain: domains[t].name.clone(),
        class_set,
        train_seeds,
        eval_seeds,
        h,
        w,
    };
    Ok(StepDataset {
        manifest,
        train,
        eval,
    })
}

// ---------------------------------------------------------------------------
// On-disk store with access auditing

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    /// Protocol step active when the read happened, if any.
    pub during_step: Option<usize>,
    pub path: PathBuf,
}

#[derive(Debug, Default)]
struct AccessLogInner {
    current_step: Option<usize>,
    records: Vec<AccessRecord>,
}

/// Shared record of every file read through a [`DatasetStore`].
#[derive(Debug, Clone, Default)]
pub struct AccessLog(Arc<Mutex<AccessLogInner>>);

impl AccessLog {
    pub fn enter_step(&self, step: Option<usize>) {
        self.0.lock().unwrap().current_step = step;
    }

    fn record(&self, path: PathBuf) {
        let mut inner = self.0.lock().unwrap();
        let during_step = inner.current_step;
        inner.records.push(AccessRecord { during_step, path });
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.0.lock().unwrap().records.clone()
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().records.clear();
    }
}

/// Directory layout:
///
/// ```text
/// root/step{t}/manifest.json
/// root/step{t}/train/{i:06}.{ppm,full.pgm,step.pgm}
/// root/eval/{k}_{domain}/{j:06}.*
/// root/external/{domain}/{j:06}.*
/// ```
#[derive(Debug, Clone)]
pub struct DatasetStore {
    root: PathBuf,
    log: AccessLog,
}

impl DatasetStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            log: AccessLog::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&self) -> &AccessLog {
        &self.log
    }

    pub fn step_dir(&self, t: usize) -> PathBuf {
        self.root.join(format!("step{t}"))
    }

    pub fn train_dir(&self, t: usize) -> PathBuf {
        self.step_dir(t).join("train")
    }

    pub fn eval_dir(&self, k: usize, domain: &str) -> PathBuf {
        self.root.join("eval").join(format!("{k}_{domain}"))
    }

    pub fn external_dir(&self, domain: &str) -> PathBuf {
        self.root.join("external").join(domain)
    }

    fn mkdir(path: &Path) -> Result<()> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))
    }

    pub fn write_samples(dir: &Path, samples: &[LabeledSample]) -> Result<()> {
        Self::mkdir(dir)?;
        for (i, s) in samples.iter().enumerate() {
            write_sample(&dir.join(format!("{i:06}")), s)?;
        }
        Ok(())
    }

    /// Writes the step's training split and manifest; evaluation samples go
    /// to the per-domain eval directories (identical across steps).
    pub fn write_step(&self, ds: &StepDataset) -> Result<()> {
        let t = ds.manifest.step;
        Self::write_samples(&self.train_dir(t), &ds.train)?;
        let manifest = self.step_dir(t).join("manifest.json");
        let json = serde_json::to_vec_pretty(&ds.manifest).expect("manifest serializes");
        write_file(&manifest, &json)?;
        for e in &ds.eval {
            let dir = self.eval_dir(e.domain_index, &e.domain);
            if !dir.exists() {
                Self::write_samples(&dir, &e.samples)?;
            }
        }
        Ok(())
    }

    pub fn read_manifest(&self, t: usize) -> Result<StepManifest> {
        let path = self.step_dir(t).join("manifest.json");
        let bytes = self.read_logged(&path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(e.column() as u64, format!("{}: {e}", path.display())))
    }

    fn read_logged(&self, path: &Path) -> Result<Vec<u8>> {
        self.log.record(path.to_path_buf());
        read_bytes(path)
    }

    /// Reads every sample in `dir`, logging each file access.
    pub fn read_dir_samples(&self, dir: &Path) -> Result<Vec<LabeledSample>> {
        let mut stems: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .map(|p| p.with_extension(""))
            .collect();
        stems.sort();
        stems
            .iter()
            .map(|stem| {
                for p in sample_paths(stem) {
                    self.log.record(p);
                }
                read_sample(stem)
            })
            .collect()
    }

    pub fn read_train(&self, t: usize) -> Result<Vec<LabeledSample>> {
        self.read_dir_samples(&self.train_dir(t))
    }

    pub fn read_eval(&self, k: usize, domain: &str) -> Result<Vec<LabeledSample>> {
        self.read_dir_samples(&self.eval_dir(k, domain))
    }

    /// Reads made during step `t` of training files that belong to an
    /// earlier step. Empty for an exemplar-free run.
    pub fn exemplar_violations(&self) -> Vec<AccessRecord> {
        let train_step_of = |path: &Path| -> Option<usize> {
            let rel = path.strip_prefix(&self.root).ok()?;
            let mut comps = rel.components();
            let step = comps
                .next()?
                .as_os_str()
                .to_str()?
                .strip_prefix("step")?
                .parse()
                .ok()?;
            (comps.next()?.as_os_str() == "train").then_some(step)
        };
        self.log
            .records()
            .into_iter()
            .filter(|r| match (r.during_step, train_step_of(&r.path)) {
                (Some(t), Some(k)) => k < t,
                _ => false,
            })
            .collect()
    }

    /// SHA-256 over every file under the root, in sorted path order.
    pub fn content_hash(&self) -> Result<String> {
        let mut files = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = entry.map_err(|e| Error::io(&dir, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        let mut hasher = Sha256::new();
        for f in files {
            hasher.update(
                f.strip_prefix(&self.root)
                    .unwrap()
                    .to_string_lossy()
                    .as_bytes(),
            );
            hasher.update(read_bytes(&f)?);
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
