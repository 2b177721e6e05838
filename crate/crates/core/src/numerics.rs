//! Dense tensors and the discrete Fourier transform.
//!
//! Images are `Tensor3<f32>` in row-major, channel-fastest order. Spectra
//! are computed in double precision; the forward transform is unnormalized
//! and the inverse carries the `1/(H*W)` factor. Zero frequency sits at
//! index `(0, 0)`; [`fftshift_index`] maps to the centered layout used by
//! style windows.

use std::f64::consts::PI;

use num_complex::Complex64;
use num_traits::Float;

use crate::{Error, Result};

/// Height x width x channels array, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor3<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }
}

impl<T: Copy> Tensor3<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Tensor3<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

impl<T: Float> Tensor3<T> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One channel as a double-precision plane.
    pub fn plane(&self, c: usize) -> Grid<f64> {
        let data = (0..self.pixels())
            .map(|p| self.data[p * self.channels + c].to_f64().unwrap())
            .collect();
        Grid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Sum of squares, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap().powi(2)).sum()
    }

    pub fn cast<U: Float>(&self) -> Tensor3<U> {
        self.map(|v| U::from(v).unwrap())
    }
}

impl Tensor3<f32> {
    /// Interleaves double-precision planes back into an f32 tensor.
    pub fn from_planes(planes: &[Grid<f64>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Dimension("no planes".into()))?;
        let (h, w, c) = (first.height, first.width, planes.len());
        if planes.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::Shape("planes differ in size".into()));
        }
        let mut out = Tensor3::zeros(h, w, c);
        for (ci, plane) in planes.iter().enumerate() {
            for (p, &v) in plane.data.iter().enumerate() {
                out.data[p * c + ci] = v as f32;
            }
        }
        Ok(out)
    }
}

/// Plain 2-D row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

pub type Plane = Grid<f64>;
pub type ComplexPlane = Grid<Complex64>;

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "zero-sized plane {height}x{width}"
        )));
    }
    Ok(())
}

/// Unnormalized forward DFT of a real plane.
pub fn fft2(plane: &Plane) -> Result<ComplexPlane> {
    check_dims(plane.height, plane.width)?;
    if plane.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite input to fft2".into()));
    }
    let mut g = Grid {
        height: plane.height,
        width: plane.width,
        data: plane.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
    };
    transform2(&mut g, false);
    Ok(g)
}

/// Unnormalized forward DFT of a complex plane.
pub fn fft2_complex(plane: &ComplexPlane) -> Result<ComplexPlane> {
    check_dims(plane.height, plane.width)?;
    let mut g = plane.clone();
    transform2(&mut g, false);
    Ok(g)
}

/// Inverse DFT including the `1/(H*W)` normalization.
pub fn ifft2(spectrum: &ComplexPlane) -> Result<ComplexPlane> {
    check_dims(spectrum.height, spectrum.width)?;
    let mut g = spectrum.clone();
    transform2(&mut g, true);
    let scale = 1.0 / (g.height * g.width) as f64;
    for v in &mut g.data {
        *v *= scale;
    }
    Ok(g)
}

/// Inverse DFT keeping only the real part.
pub fn ifft2_real(spectrum: &ComplexPlane) -> Result<Plane> {
    let g = ifft2(spectrum)?;
    Ok(Grid {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|c| c.re).collect(),
    })
}

fn transform2(g: &mut ComplexPlane, inverse: bool) {
    let (h, w) = (g.height, g.width);
    let row_plan = Plan1d::new(w);
    for row in g.data.chunks_exact_mut(w) {
        row_plan.run(row, inverse);
    }
    let col_plan = Plan1d::new(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g.data[y * w + x];
        }
        col_plan.run(&mut col, inverse);
        for y in 0..h {
            g.data[y * w + x] = col[y];
        }
    }
}

/// Precomputed 1-D transform: iterative radix-2 for powers of two,
/// Bluestein's chirp-z otherwise.
enum Plan1d {
    Radix2 {
        twiddles: Vec<Complex64>,
    },
    Bluestein {
        n: usize,
        chirp: Vec<Complex64>,
        kernel_hat: Vec<Complex64>,
        inner: Box<Plan1d>,
    },
}

impl Plan1d {
    fn new(n: usize) -> Self {
        if n.is_power_of_two() {
            let twiddles = (0..n / 2)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
                .collect();
            return Plan1d::Radix2 { twiddles };
        }
        let m = (2 * n - 1).next_power_of_two();
        // chirp[k] = exp(-i*pi*k^2/n); k^2 reduced mod 2n keeps the angle small.
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                Complex64::from_polar(1.0, -PI * k2 / n as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        let inner = Plan1d::new(m);
        inner.run(&mut kernel, false);
        Plan1d::Bluestein {
            n,
            chirp,
            kernel_hat: kernel,
            inner: Box::new(inner),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        if inverse {
            for v in buf.iter_mut() {
                *v = v.conj();
            }
            self.forward(buf);
            for v in buf.iter_mut() {
                *v = v.conj();
            }
        } else {
            self.forward(buf);
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        match self {
            Plan1d::Radix2 { twiddles } => radix2(buf, twiddles),
            Plan1d::Bluestein {
                n,
                chirp,
                kernel_hat,
                inner,
            } => {
                let m = kernel_hat.len();
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..*n {
                    a[k] = buf[k] * chirp[k];
                }
                inner.forward(&mut a);
                for (v, kh) in a.iter_mut().zip(kernel_hat) {
                    *v *= kh;
                }
                inner.run(&mut a, true);
                let scale = 1.0 / m as f64;
                for k in 0..*n {
                    buf[k] = a[k] * chirp[k] * scale;
                }
            }
        }
    }
}

fn radix2(buf: &mut [Complex64], twiddles: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let t = buf[start + k + half] * twiddles[k * stride];
                let u = buf[start + k];
                buf[start + k] = u + t;
                buf[start + k + half] = u - t;
            }
        }
        len <<= 1;
    }
}

/// Largest side accepted by [`dft2_bruteforce`].
pub const BRUTEFORCE_MAX_SIDE: usize = 32;

/// Textbook double-loop DFT, O(H^2 W^2). Test oracle for [`fft2`].
pub fn dft2_bruteforce(plane: &Plane) -> Result<ComplexPlane> {
    let (h, w) = (plane.height, plane.width);
    check_dims(h, w)?;
    if h > BRUTEFORCE_MAX_SIDE || w > BRUTEFORCE_MAX_SIDE {
        return Err(Error::Refused(format!(
            "brute-force DFT limited to {BRUTEFORCE_MAX_SIDE}x{BRUTEFORCE_MAX_SIDE}, got {h}x{w}"
        )));
    }
    let mut out = Grid::filled(h, w, Complex64::new(0.0, 0.0));
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let angle = -2.0
                        * PI
                        * (((u * y) % h) as f64 / h as f64 + ((v * x) % w) as f64 / w as f64);
                    acc += Complex64::from_polar(plane.get(y, x), angle);
                }
            }
            out.set(u, v, acc);
        }
    }
    Ok(out)
}

/// Amplitude/phase decomposition of a multi-channel spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub amplitude: Tensor3<f64>,
    pub phase: Tensor3<f64>,
}

/// Splits per-channel complex spectra into modulus and argument. A zero bin
/// gets phase 0.
pub fn to_amp_phase(channels: &[ComplexPlane]) -> Result<Spectrum> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Dimension("no channels".into()))?;
    let (h, w, c) = (first.height, first.width, channels.len());
    if channels.iter().any(|p| p.height != h || p.width != w) {
        return Err(Error::Shape("channel spectra differ in size".into()));
    }
    let mut amplitude = Tensor3::zeros(h, w, c);
    let mut phase = Tensor3::zeros(h, w, c);
    for (ci, plane) in channels.iter().enumerate() {
        for (p, z) in plane.data.iter().enumerate() {
            let a = z.norm();
            amplitude.data[p * c + ci] = a;
            phase.data[p * c + ci] = if a == 0.0 { 0.0 } else { z.arg() };
        }
    }
    Ok(Spectrum { amplitude, phase })
}

/// `amplitude * exp(i * phase)` per bin.
pub fn recompose(spec: &Spectrum) -> Result<Vec<ComplexPlane>> {
    if !spec.amplitude.same_shape(&spec.phase) {
        return Err(Error::Shape("amplitude and phase differ in shape".into()));
    }
    if let Some(a) = spec.amplitude.data().iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::Invariant(format!("negative or NaN amplitude {a}")));
    }
    let (h, w, c) = spec.amplitude.shape();
    Ok((0..c)
        .map(|ci| Grid {
            height: h,
            width: w,
            data: (0..h * w)
                .map(|p| {
                    Complex64::from_polar(
                        spec.amplitude.data()[p * c + ci],
                        spec.phase.data()[p * c + ci],
                    )
                })
                .collect(),
        })
        .collect())
}

/// Per-channel forward transform of an image.
pub fn image_spectrum(image: &Tensor3<f32>) -> Result<Vec<ComplexPlane>> {
    (0..image.channels())
        .map(|c| fft2(&image.plane(c)))
        .collect()
}

/// Position of unshifted frequency index `k` in the center-shifted layout
/// (zero frequency at `n / 2`).
#[inline]
pub fn fftshift_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// Inverse of [`fftshift_index`].
#[inline]
pub fn ifftshift_index(s: usize, n: usize) -> usize {
    (s + n - n / 2) % n
}

/// Maximum absolute difference between two complex planes.
pub fn max_abs_diff(a: &ComplexPlane, b: &ComplexPlane) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}
