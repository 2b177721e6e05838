//! Three-layer convolutional segmenter with hand-written reverse mode.
//!
//! `conv3x3(3->F) -> ReLU -> conv3x3(F->F) -> ReLU -> conv1x1(F->C)`, zero
//! "same" padding throughout. Output channel 0 is always the unknown class;
//! the head grows by appending rows as new classes arrive.
//!
//! A 3x3 convolution runs as nine GEMMs, one per kernel tap, over a
//! zero-padded input whose rows keep the padded stride; the two wrap-around
//! columns per row are computed and dropped. Weight layout is
//! `[out][ky][kx][in]`.

use std::fmt::Debug;
use std::path::Path;
use std::sync::Arc;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{ByteReader, ByteWriter};
use crate::numerics::Tensor3;
use crate::{ClassId, Error, Result, UNKNOWN};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_FEATURES: usize = 16;
const IN_CHANNELS: usize = 3;
const KERNEL: usize = 3;

/// Floating point type the model can run in. `f32` for training, `f64` for
/// gradient checking.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn gemm_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= gemm_extent(m, k, rsa, csa));
                assert!(b.len() >= gemm_extent(k, n, rsb, csb));
                assert!(c.len() >= gemm_extent(m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Model parameters (or gradients) in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(features: usize, classes: usize) -> Self {
        let k1 = KERNEL * KERNEL * IN_CHANNELS;
        let k2 = KERNEL * KERNEL * features;
        Self {
            conv1_w: vec![T::zero(); features * k1],
            conv1_b: vec![T::zero(); features],
            conv2_w: vec![T::zero(); features * k2],
            conv2_b: vec![T::zero(); features],
            head_w: vec![T::zero(); classes * features],
            head_b: vec![T::zero(); classes],
        }
    }

    pub fn tensors(&self) -> [&Vec<T>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = *d + scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::from(x).unwrap()).collect();
        Params {
            conv1_w: c(&self.conv1_w),
            conv1_b: c(&self.conv1_b),
            conv2_w: c(&self.conv2_w),
            conv2_b: c(&self.conv2_b),
            head_w: c(&self.head_w),
            head_b: c(&self.head_b),
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
pub struct Tape<T> {
    height: usize,
    width: usize,
    /// Padded image.
    x0: Vec<T>,
    /// Padded first activation.
    x1: Vec<T>,
    h2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T = f32> {
    features: usize,
    layout: Vec<ClassId>,
    params: Params<T>,
}

/// Copy of an `h x w x c` map with a one-pixel zero border, plus two zero
/// pixels at the end so the last tap's row window stays in bounds.
fn pad<T: Scalar>(input: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let wp = w + 2;
    let mut out = vec![T::zero(); ((h + 2) * wp + 2) * c];
    for y in 0..h {
        let dst = ((y + 1) * wp + 1) * c;
        out[dst..dst + w * c].copy_from_slice(&input[y * w * c..(y + 1) * w * c]);
    }
    out
}

/// Offsets of tap `(ky, kx)` in the padded input and in a weight row.
fn tap(ky: usize, kx: usize, wp: usize, cin: usize) -> (usize, usize) {
    ((ky * wp + kx) * cin, (ky * KERNEL + kx) * cin)
}

fn conv3x3_forward<T: Scalar>(
    padded: &[T],
    (h, w, cin): (usize, usize, usize),
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let wp = w + 2;
    let rows = h * wp;
    let n = bias.len();
    let k = KERNEL * KERNEL * cin;
    let mut wide = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        wide.extend_from_slice(bias);
    }
    for ky in 0..KERNEL {
        for kx in 0..KERNEL {
            let (off, koff) = tap(ky, kx, wp, cin);
            T::gemm(
                rows,
                cin,
                n,
                &padded[off..],
                cin as isize,
                1,
                &weight[koff..],
                1,
                k as isize,
                T::one(),
                &mut wide,
                n as isize,
                1,
            );
        }
    }
    let mut out = Vec::with_capacity(h * w * n);
    for y in 0..h {
        out.extend_from_slice(&wide[y * wp * n..(y * wp + w) * n]);
    }
    out
}

/// Weight, bias and (optionally) input gradients of [`conv3x3_forward`].
fn conv3x3_backward<T: Scalar>(
    padded: &[T],
    (h, w, cin): (usize, usize, usize),
    weight: &[T],
    dout: &[T],
    n: usize,
    need_dinput: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let wp = w + 2;
    let rows = h * wp;
    let k = KERNEL * KERNEL * cin;
    let mut wide = vec![T::zero(); rows * n];
    for y in 0..h {
        wide[y * wp * n..(y * wp + w) * n].copy_from_slice(&dout[y * w * n..(y + 1) * w * n]);
    }
    let mut dw = vec![T::zero(); n * k];
    let mut dpad = need_dinput.then(|| vec![T::zero(); padded.len()]);
    for ky in 0..KERNEL {
        for kx in 0..KERNEL {
            let (off, koff) = tap(ky, kx, wp, cin);
            T::gemm(
                n,
                rows,
                cin,
                &wide,
                1,
                n as isize,
                &padded[off..],
                cin as isize,
                1,
                T::one(),
                &mut dw[koff..],
                k as isize,
                1,
            );
            if let Some(dp) = dpad.as_mut() {
                T::gemm(
                    rows,
                    n,
                    cin,
                    &wide,
                    n as isize,
                    1,
                    &weight[koff..],
                    k as isize,
                    1,
                    T::one(),
                    &mut dp[off..],
                    cin as isize,
                    1,
                );
            }
        }
    }
    let mut db = vec![T::zero(); n];
    for row in dout.chunks_exact(n) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    let dinput = dpad.map(|dp| {
        let mut out = Vec::with_capacity(h * w * cin);
        for y in 0..h {
            let src = ((y + 1) * wp + 1) * cin;
            out.extend_from_slice(&dp[src..src + w * cin]);
        }
        out
    });
    (dw, db, dinput)
}

/// `out[p][o] = sum_k input[p][k] * weight[o][k] + bias[o]`.
fn dense_forward<T: Scalar>(
    input: &[T],
    pixels: usize,
    k: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let n = bias.len();
    let mut out = Vec::with_capacity(pixels * n);
    for _ in 0..pixels {
        out.extend_from_slice(bias);
    }
    T::gemm(
        pixels,
        k,
        n,
        input,
        k as isize,
        1,
        weight,
        1,
        k as isize,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    out
}

/// Weight and bias gradients of a dense layer; optionally the input gradient.
fn dense_backward<T: Scalar>(
    input: &[T],
    pixels: usize,
    k: usize,
    weight: &[T],
    dout: &[T],
    n: usize,
    need_dinput: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dw = vec![T::zero(); n * k];
    T::gemm(
        n,
        pixels,
        k,
        dout,
        1,
        n as isize,
        input,
        k as isize,
        1,
        T::zero(),
        &mut dw,
        k as isize,
        1,
    );
    let mut db = vec![T::zero(); n];
    for row in dout.chunks_exact(n) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    let dinput = need_dinput.then(|| {
        let mut di = vec![T::zero(); pixels * k];
        T::gemm(
            pixels,
            n,
            k,
            dout,
            n as isize,
            1,
            weight,
            k as isize,
            1,
            T::zero(),
            &mut di,
            k as isize,
            1,
        );
        di
    });
    (dw, db, dinput)
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

impl<T: Scalar> SegModel<T> {
    /// He-normal weights, zero biases, deterministic in `seed`.
    pub fn init(seed: u64, features: usize, layout: Vec<ClassId>) -> Result<Self> {
        if features == 0 {
            return Err(Error::Dimension("feature width must be >= 1".into()));
        }
        check_layout(&layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(features, layout.len());
        let fan_ins = [
            KERNEL * KERNEL * IN_CHANNELS,
            KERNEL * KERNEL * features,
            features,
        ];
        for (w, fan_in) in [&mut params.conv1_w, &mut params.conv2_w, &mut params.head_w]
            .into_iter()
            .zip(fan_ins)
        {
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in w.iter_mut() {
                *v = T::from(normal.sample(&mut rng)).unwrap();
            }
        }
        Ok(Self {
            features,
            layout,
            params,
        })
    }

    pub fn from_parts(features: usize, layout: Vec<ClassId>, params: Params<T>) -> Result<Self> {
        check_layout(&layout)?;
        let expected = Params::<T>::zeros(features, layout.len());
        for (a, b) in params.tensors().iter().zip(expected.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "parameter tensor of length {} where {} expected",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(Self {
            features,
            layout,
            params,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn num_classes(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &[ClassId] {
        &self.layout
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            features: self.features,
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Appends head rows for `new_ids`: weights `N(0, 0.01^2)`, bias
    /// `-ln(C_new)`. Existing rows are untouched.
    pub fn expand_head(&self, new_ids: &[ClassId], seed: u64) -> Result<Self> {
        let mut layout = self.layout.clone();
        for &c in new_ids {
            if layout.contains(&c) {
                return Err(Error::Protocol(format!(
                    "class {c} already has an output channel"
                )));
            }
            layout.push(c);
        }
        check_layout(&layout)?;
        let mut out = self.clone();
        if new_ids.is_empty() {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.01).unwrap();
        let bias = T::from(-(layout.len() as f64).ln()).unwrap();
        for _ in new_ids {
            for _ in 0..self.features {
                out.params
                    .head_w
                    .push(T::from(normal.sample(&mut rng)).unwrap());
            }
            out.params.head_b.push(bias);
        }
        out.layout = layout;
        Ok(out)
    }

    fn check_image(&self, image: &Tensor3<T>) -> Result<()> {
        if image.channels() != IN_CHANNELS || image.height() == 0 || image.width() == 0 {
            return Err(Error::Shape(format!(
                "expected an HxWx3 image, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Logits `H x W x C` together with the activations needed by [`Self::backward_tape`].
    pub fn forward_tape(&self, image: &Tensor3<T>) -> Result<(Tensor3<T>, Tape<T>)> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let p = h * w;
        let f = self.features;
        let c = self.num_classes();
        let x0 = pad(image.data(), h, w, IN_CHANNELS);
        let mut h1 = conv3x3_forward(
            &x0,
            (h, w, IN_CHANNELS),
            &self.params.conv1_w,
            &self.params.conv1_b,
        );
        relu_inplace(&mut h1);
        let x1 = pad(&h1, h, w, f);
        drop(h1);
        let mut h2 = conv3x3_forward(&x1, (h, w, f), &self.params.conv2_w, &self.params.conv2_b);
        relu_inplace(&mut h2);
        let logits = dense_forward(&h2, p, f, &self.params.head_w, &self.params.head_b);
        let logits = Tensor3::from_vec(h, w, c, logits)?;
        Ok((
            logits,
            Tape {
                height: h,
                width: w,
                x0,
                x1,
                h2,
            },
        ))
    }

    pub fn forward(&self, image: &Tensor3<T>) -> Result<Tensor3<T>> {
        Ok(self.forward_tape(image)?.0)
    }

    /// Parameter gradients given `dL/dlogits`.
    pub fn backward_tape(&self, tape: &Tape<T>, dlogits: &Tensor3<T>) -> Result<Params<T>> {
        let (h, w) = (tape.height, tape.width);
        if dlogits.shape() != (h, w, self.num_classes()) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} vs logits {:?}",
                dlogits.shape(),
                (h, w, self.num_classes())
            )));
        }
        let p = h * w;
        let f = self.features;
        let c = self.num_classes();

        let (head_w, head_b, dh2) =
            dense_backward(&tape.h2, p, f, &self.params.head_w, dlogits.data(), c, true);
        let mut dz2 = dh2.unwrap();
        for (g, &a) in dz2.iter_mut().zip(&tape.h2) {
            if !(a > T::zero()) {
                *g = T::zero();
            }
        }
        let (conv2_w, conv2_b, dh1) =
            conv3x3_backward(&tape.x1, (h, w, f), &self.params.conv2_w, &dz2, f, true);
        let mut dz1 = dh1.unwrap();
        for y in 0..h {
            let row = ((y + 1) * (w + 2) + 1) * f;
            let active = &tape.x1[row..row + w * f];
            for (g, &a) in dz1[y * w * f..(y + 1) * w * f].iter_mut().zip(active) {
                if !(a > T::zero()) {
                    *g = T::zero();
                }
            }
        }
        let (conv1_w, conv1_b, _) = conv3x3_backward(
            &tape.x0,
            (h, w, IN_CHANNELS),
            &self.params.conv1_w,
            &dz1,
            f,
            false,
        );
        Ok(Params {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            head_w,
            head_b,
        })
    }

    /// Recomputes the forward pass and returns parameter gradients.
    pub fn backward(&self, image: &Tensor3<T>, dlogits: &Tensor3<T>) -> Result<Params<T>> {
        let (_, tape) = self.forward_tape(image)?;
        self.backward_tape(&tape, dlogits)
    }

    /// `theta <- theta - lr * grads`.
    pub fn sgd_step(&mut self, grads: &Params<T>, lr: T) -> Result<()> {
        for (p, g) in self.params.tensors().iter().zip(grads.tensors()) {
            if p.len() != g.len() {
                return Err(Error::Shape(
                    "gradient does not match parameter shapes".into(),
                ));
            }
        }
        self.params.add_scaled(grads, -lr);
        if !self.params.all_finite() {
            return Err(Error::Invariant(
                "non-finite parameter after SGD step".into(),
            ));
        }
        Ok(())
    }
}

fn check_layout(layout: &[ClassId]) -> Result<()> {
    if layout.first() != Some(&UNKNOWN) {
        return Err(Error::Protocol(
            "channel 0 must be the unknown class".into(),
        ));
    }
    for (i, c) in layout.iter().enumerate() {
        if layout[..i].contains(c) {
            return Err(Error::Protocol(format!(
                "class {c} appears twice in the channel layout"
            )));
        }
    }
    Ok(())
}

/// Per-pixel class probabilities with their logarithms, kept in double
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub layout: Vec<ClassId>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ProbMap {
    pub fn channels(&self) -> usize {
        self.layout.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        let c = self.channels();
        &self.probs[p * c..(p + 1) * c]
    }

    /// Builds a map from explicit probabilities (rows must be positive and
    /// sum to one).
    pub fn from_probs(
        height: usize,
        width: usize,
        layout: Vec<ClassId>,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != height * width * layout.len() {
            return Err(Error::Shape(
                "probability buffer does not match the layout".into(),
            ));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            height,
            width,
            layout,
            probs,
            log_probs,
        })
    }

    /// Arg-max channel per pixel; ties go to the lowest channel.
    pub fn argmax_channels(&self) -> Vec<usize> {
        (0..self.pixels())
            .map(|p| {
                let row = self.pixel(p);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Numerically stable per-pixel softmax.
pub fn softmax<T: Scalar>(logits: &Tensor3<T>, layout: &[ClassId]) -> Result<ProbMap> {
    let c = logits.channels();
    if c != layout.len() {
        return Err(Error::Shape(format!(
            "{c} logit channels for a layout of {}",
            layout.len()
        )));
    }
    let mut probs = Vec::with_capacity(logits.data().len());
    let mut log_probs = Vec::with_capacity(logits.data().len());
    for p in 0..logits.pixels() {
        let row = logits.pixel(p);
        let max = row
            .iter()
            .map(|v| v.to_f64().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Invariant("non-finite logit".into()));
        }
        let start = probs.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v.to_f64().unwrap() - max).exp();
            sum += e;
            probs.push(e);
        }
        let log_z = max + sum.ln();
        for (pr, v) in probs[start..].iter_mut().zip(row) {
            *pr /= sum;
            log_probs.push(v.to_f64().unwrap() - log_z);
        }
    }
    Ok(ProbMap {
        height: logits.height(),
        width: logits.width(),
        layout: layout.to_vec(),
        probs,
        log_probs,
    })
}

/// Arg-max class id per pixel.
pub fn predict<T: Scalar>(model: &SegModel<T>, image: &Tensor3<T>) -> Result<Vec<ClassId>> {
    let logits = model.forward(image)?;
    let c = logits.channels();
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            model.layout[best]
        })
        .collect())
}

/// Immutable snapshot of a model, shareable across threads.
#[derive(Debug, Clone)]
pub struct Teacher(Arc<SegModel<f32>>);

impl Teacher {
    pub fn model(&self) -> &SegModel<f32> {
        &self.0
    }

    pub fn forward(&self, image: &Tensor3<f32>) -> Result<Tensor3<f32>> {
        self.0.forward(image)
    }

    pub fn probs(&self, image: &Tensor3<f32>) -> Result<ProbMap> {
        softmax(&self.0.forward(image)?, self.0.layout())
    }
}

pub fn freeze(model: &SegModel<f32>) -> Teacher {
    Teacher(Arc::new(model.clone()))
}

/// Model plus the protocol context it was saved in.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u32,
    pub schedule_hash: u64,
    pub model: SegModel<f32>,
}

impl Checkpoint {
    /// `SEGC`, version, step, F, C, layout (C x u32), parameters (f32 LE in
    /// declaration order), then the schedule hash (u64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.step);
        w.u32(m.features as u32);
        w.u32(m.num_classes() as u32);
        for &c in &m.layout {
            w.u32(c as u32);
        }
        for t in m.params.tensors() {
            for &v in t.iter() {
                w.f32(v);
            }
        }
        w.u64(self.schedule_hash);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let step = r.u32("step")?;
        let at = r.offset();
        let features = r.u32("F")? as usize;
        let classes = r.u32("C")? as usize;
        if features == 0 || classes == 0 || features > 4096 || classes > 256 {
            return Err(Error::format(
                at,
                format!("implausible model size F={features} C={classes}"),
            ));
        }
        let at = r.offset();
        let mut layout = Vec::with_capacity(classes);
        for _ in 0..classes {
            let c = r.u32("channel layout")?;
            layout.push(
                ClassId::try_from(c)
                    .map_err(|_| Error::format(at, format!("class id {c} out of range")))?,
            );
        }
        let mut params = Params::<f32>::zeros(features, classes);
        for t in params.tensors_mut() {
            let n = t.len();
            *t = r.f32_vec(n, "parameters")?;
        }
        let schedule_hash = r.u64("schedule hash")?;
        r.expect_end()?;
        let model = SegModel::from_parts(features, layout, params)
            .map_err(|e| Error::format(at, e.to_string()))?;
        if !model.params.all_finite() {
            return Err(Error::format(at, "non-finite parameter"));
        }
        Ok(Self {
            step,
            schedule_hash,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image<T: Scalar>(seed: u64, h: usize, w: usize) -> Tensor3<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(
            h,
            w,
            3,
            (0..h * w * 3)
                .map(|_| T::from(rng.random_range(0.0..1.0)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = SegModel::<f32>::init(5, 8, vec![0, 1, 2]).unwrap();
        let b = SegModel::<f32>::init(5, 8, vec![0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_classes(), 3);
        assert!(a.params().conv1_b.iter().all(|&v| v == 0.0));
        assert!(SegModel::<f32>::init(5, 0, vec![0]).is_err());
    }

    #[test]
    fn zero_image_gives_head_bias() {
        let mut m = SegModel::<f64>::init(1, 4, vec![0, 1, 2]).unwrap();
        m.params_mut().head_b = vec![0.25, -1.0, 2.0];
        let logits = m.forward(&Tensor3::zeros(5, 7, 3)).unwrap();
        for p in 0..35 {
            assert_eq!(logits.pixel(p), &[0.25, -1.0, 2.0]);
        }
    }

    #[test]
    fn expansion_keeps_old_logits() {
        let m = SegModel::<f32>::init(2, 6, vec![0, 1, 2]).unwrap();
        let img = random_image::<f32>(3, 8, 8);
        let before = m.forward(&img).unwrap();
        let grown = m.expand_head(&[3, 4], 77).unwrap();
        assert_eq!(grown.num_classes(), 5);
        assert_eq!(grown.params().head_b[3], -(5f32).ln());
        let after = grown.forward(&img).unwrap();
        for p in 0..64 {
            assert_eq!(&after.pixel(p)[..3], before.pixel(p));
        }
        // Probability ratios among old channels survive renormalization.
        let pb = softmax(&before, m.layout()).unwrap();
        let pa = softmax(&after, grown.layout()).unwrap();
        for p in 0..64 {
            let r_before = pb.pixel(p)[1] / pb.pixel(p)[2];
            let r_after = pa.pixel(p)[1] / pa.pixel(p)[2];
            assert!((r_before - r_after).abs() < 1e-6 * r_before.abs());
        }
        assert_eq!(m.expand_head(&[], 1).unwrap(), m);
        assert!(matches!(m.expand_head(&[2], 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn head_scaling_doubles_logits() {
        let m = SegModel::<f64>::init(4, 5, vec![0, 1, 2, 3]).unwrap();
        let mut m2 = m.clone();
        m2.params_mut().head_b = vec![0.1, 0.2, -0.3, 0.4];
        let mut m3 = m2.clone();
        let p3 = m3.params_mut();
        for v in p3.head_w.iter_mut().chain(p3.head_b.iter_mut()) {
            *v *= 2.0;
        }
        let img = random_image::<f64>(9, 6, 6);
        let a = m2.forward(&img).unwrap();
        let b = m3.forward(&img).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert_eq!(m.forward(&img).unwrap(), m.forward(&img).unwrap());
    }

    #[test]
    fn softmax_properties() {
        let layout = vec![0, 1, 2, 3];
        let flat = Tensor3::from_vec(1, 1, 4, vec![0.5f32; 4]).unwrap();
        assert!(softmax(&flat, &layout)
            .unwrap()
            .probs
            .iter()
            .all(|p| (p - 0.25).abs() < 1e-12));
        let a =
            Tensor3::from_vec(1, 2, 4, vec![0.1f64, 0.2, 0.3, 0.4, 1.0, -1.0, 0.0, 2.0]).unwrap();
        let b = a.map(|v| v + 7.0);
        let (pa, pb) = (softmax(&a, &layout).unwrap(), softmax(&b, &layout).unwrap());
        for (x, y) in pa.probs.iter().zip(&pb.probs) {
            assert!((x - y).abs() < 1e-12);
        }
        let spike = Tensor3::from_vec(1, 1, 4, vec![0.0f32, 1000.0, 0.0, 0.0]).unwrap();
        let ps = softmax(&spike, &layout).unwrap();
        assert!((ps.probs[1] - 1.0).abs() < 1e-6);
        assert!(ps.probs.iter().all(|p| p.is_finite()));
        for p in 0..2 {
            assert!((pa.pixel(p).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = SegModel::<f32>::init(1, 4, vec![0, 1]).unwrap();
        let img = random_image::<f32>(2, 6, 6);
        let g = m.backward(&img, &Tensor3::zeros(6, 6, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    /// Direct-loop forward pass. With `frozen` set, ReLU gates come from the
    /// given masks instead of the current pre-activations.
    fn oracle_forward(
        m: &SegModel<f64>,
        img: &Tensor3<f64>,
        frozen: Option<&(Vec<bool>, Vec<bool>)>,
    ) -> (Vec<f64>, (Vec<bool>, Vec<bool>)) {
        let (h, w) = (img.height(), img.width());
        let f = m.features();
        let p = m.params();
        let conv = |input: &[f64], cin: usize, wt: &[f64], b: &[f64], gate: Option<&Vec<bool>>| {
            let mut out = vec![0.0; h * w * f];
            let mut mask = vec![false; h * w * f];
            for y in 0..h {
                for x in 0..w {
                    for o in 0..f {
                        let mut z = b[o];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) =
                                    (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    z += wt[o * 9 * cin + (ky * 3 + kx) * cin + ci]
                                        * input[(sy as usize * w + sx as usize) * cin + ci];
                                }
                            }
                        }
                        let i = (y * w + x) * f + o;
                        mask[i] = z > 0.0;
                        let on = gate.map_or(mask[i], |g| g[i]);
                        out[i] = if on { z } else { 0.0 };
                    }
                }
            }
            (out, mask)
        };
        let (a1, m1) = conv(img.data(), 3, &p.conv1_w, &p.conv1_b, frozen.map(|f| &f.0));
        let (a2, m2) = conv(&a1, f, &p.conv2_w, &p.conv2_b, frozen.map(|f| &f.1));
        let c = m.num_classes();
        let mut logits = vec![0.0; h * w * c];
        for px in 0..h * w {
            for k in 0..c {
                logits[px * c + k] = p.head_b[k]
                    + (0..f)
                        .map(|j| p.head_w[k * f + j] * a2[px * f + j])
                        .sum::<f64>();
            }
        }
        (logits, (m1, m2))
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut m = SegModel::<f64>::init(11, DEFAULT_FEATURES, vec![0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for t in [1, 3, 5] {
            for b in m.params_mut().tensors_mut()[t].iter_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        let img = random_image::<f64>(12, 16, 16);
        let r: Vec<f64> = (0..16 * 16 * 4)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let upstream = Tensor3::from_vec(16, 16, 4, r.clone()).unwrap();
        let dot = |l: &[f64]| l.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();

        let (base, masks) = oracle_forward(&m, &img, None);
        let fast = m.forward(&img).unwrap();
        for (a, b) in base.iter().zip(fast.data()) {
            assert!((a - b).abs() < 1e-10);
        }

        let grads = m.backward(&img, &upstream).unwrap();
        let eps = 1e-3;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let (mut checked, mut unfrozen_checked) = (0, 0);
        for t in 0..6 {
            for i in 0..grads.tensors()[t].len() {
                let mut plus = m.clone();
                plus.params_mut().tensors_mut()[t][i] += eps;
                let mut minus = m.clone();
                minus.params_mut().tensors_mut()[t][i] -= eps;
                let analytic = grads.tensors()[t][i];

                let lp = dot(&oracle_forward(&plus, &img, Some(&masks)).0);
                let lm = dot(&oracle_forward(&minus, &img, Some(&masks)).0);
                let numeric = (lp - lm) / (2.0 * eps);
                assert!(
                    rel(numeric, analytic) < 1e-4,
                    "tensor {t} index {i}: {numeric} vs {analytic}"
                );
                checked += 1;

                let (lp, mp) = oracle_forward(&plus, &img, None);
                let (lm, mm) = oracle_forward(&minus, &img, None);
                if mp == masks && mm == masks {
                    let numeric = (dot(&lp) - dot(&lm)) / (2.0 * eps);
                    assert!(
                        rel(numeric, analytic) < 1e-4,
                        "tensor {t} index {i}: {numeric} vs {analytic}"
                    );
                    unfrozen_checked += 1;
                }
            }
        }
        assert_eq!(checked, m.params().len());
        assert!(unfrozen_checked > 0);
    }

    #[test]
    fn head_bias_grad_counts_pixels() {
        let m = SegModel::<f64>::init(1, 4, vec![0, 1, 2]).unwrap();
        let img = random_image::<f64>(2, 5, 7);
        let g = m.backward(&img, &Tensor3::filled(5, 7, 3, 1.0)).unwrap();
        assert_eq!(g.head_b, vec![35.0; 3]);
    }

    #[test]
    fn upstream_shape_is_checked() {
        let m = SegModel::<f32>::init(1, 4, vec![0, 1]).unwrap();
        let img = random_image::<f32>(2, 6, 6);
        assert!(matches!(
            m.backward(&img, &Tensor3::zeros(6, 6, 3)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.forward(&Tensor3::zeros(6, 6, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sgd_closed_forms() {
        let mut m = SegModel::<f32>::init(3, 4, vec![0, 1]).unwrap();
        let before = m.clone();
        let grads = m.params().clone();
        m.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(m, before);
        // loss = 0.5 * |theta|^2 has gradient theta
        let mut m64 = before.cast::<f64>();
        let g = m64.params().clone();
        m64.sgd_step(&g, 0.1).unwrap();
        for (a, b) in m64
            .params()
            .tensors()
            .iter()
            .zip(before.cast::<f64>().params().tensors())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - 0.9 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SegModel::<f32>::init(4, 5, vec![0, 1, 2])
            .unwrap()
            .expand_head(&[3], 9)
            .unwrap();
        let ck = Checkpoint {
            step: 1,
            schedule_hash: 0xABCD,
            model: m,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let img = random_image::<f32>(1, 8, 8);
        assert_eq!(
            back.model.forward(&img).unwrap(),
            ck.model.forward(&img).unwrap()
        );
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
