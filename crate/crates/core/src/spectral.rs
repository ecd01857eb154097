//! Orthonormal per-channel 2-D Fourier analysis and synthesis.
//!
//! Every `(n, c)` plane is transformed on its own with a `1/√(HW)` factor in
//! both directions, so forward followed by inverse is the identity and
//! energy is preserved. Spectra are kept unshifted (DC at index `(0, 0)`).

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative imaginary residue tolerated by [`recompose`].
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-4;

/// Complex spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

/// Amplitude and phase planes of a spectrum. Phase lies in `(-π, π]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Reusable buffers for [`transform_plane`].
#[derive(Default)]
struct Workspace {
    transposed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

/// In-place orthonormal 2-D transform of one row-major `h × w` plane.
fn transform_plane(buf: &mut [Complex64], h: usize, w: usize, inverse: bool, ws: &mut Workspace) {
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let scratch_len = row_fft
        .get_inplace_scratch_len()
        .max(col_fft.get_inplace_scratch_len());
    ws.scratch.resize(scratch_len, Complex64::default());
    row_fft.process_with_scratch(buf, &mut ws.scratch);
    ws.transposed.resize(h * w, Complex64::default());
    for y in 0..h {
        for x in 0..w {
            ws.transposed[x * h + y] = buf[y * w + x];
        }
    }
    col_fft.process_with_scratch(&mut ws.transposed, &mut ws.scratch);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for x in 0..w {
        for y in 0..h {
            buf[y * w + x] = ws.transposed[x * h + y] * norm;
        }
    }
}

/// Forward transform of real planes without validation.
///
/// Bins that are their own conjugate partner (DC and the Nyquist rows and
/// columns) are real for real input; their imaginary parts are set to `+0.0`
/// so the phase there is exactly `0` or `π`.
pub(crate) fn fft_real(x: &Tensor) -> Spectrum {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let mut re = Tensor::zeros(s);
    let mut im = Tensor::zeros(s);
    let mut buf = vec![Complex64::default(); h * w];
    let mut ws = Workspace::default();
    let self_conj = |y: usize, x: usize| (y == 0 || 2 * y == h) && (x == 0 || 2 * x == w);
    for n in 0..s.n {
        for c in 0..s.c {
            for (b, &v) in buf.iter_mut().zip(x.plane(n, c)) {
                *b = Complex64::new(v, 0.0);
            }
            transform_plane(&mut buf, h, w, false, &mut ws);
            let re_p = re.plane_mut(n, c);
            for (r, b) in re_p.iter_mut().zip(&buf) {
                *r = b.re;
            }
            let im_p = im.plane_mut(n, c);
            for (i, (v, b)) in im_p.iter_mut().zip(&buf).enumerate() {
                *v = if self_conj(i / w, i % w) { 0.0 } else { b.im };
            }
        }
    }
    Spectrum { re, im }
}

/// Inverse transform without validation, returning both parts of the result.
pub(crate) fn ifft_complex(spec: &Spectrum) -> (Tensor, Tensor) {
    complex_transform(&spec.re, &spec.im, true)
}

/// Forward transform of a complex input given as two planes.
pub(crate) fn fft_complex(re: &Tensor, im: &Tensor) -> (Tensor, Tensor) {
    complex_transform(re, im, false)
}

fn complex_transform(re_in: &Tensor, im_in: &Tensor, inverse: bool) -> (Tensor, Tensor) {
    let s = re_in.shape();
    debug_assert_eq!(s, im_in.shape());
    let (h, w) = (s.h, s.w);
    let mut re = Tensor::zeros(s);
    let mut im = Tensor::zeros(s);
    let mut buf = vec![Complex64::default(); h * w];
    let mut ws = Workspace::default();
    for n in 0..s.n {
        for c in 0..s.c {
            for ((b, &r), &i) in buf.iter_mut().zip(re_in.plane(n, c)).zip(im_in.plane(n, c)) {
                *b = Complex64::new(r, i);
            }
            transform_plane(&mut buf, h, w, inverse, &mut ws);
            for (o, b) in re.plane_mut(n, c).iter_mut().zip(&buf) {
                *o = b.re;
            }
            for (o, b) in im.plane_mut(n, c).iter_mut().zip(&buf) {
                *o = b.im;
            }
        }
    }
    (re, im)
}

/// Phase of `re + i·im` in `(-π, π]`, with the origin mapped to 0.
#[inline]
pub fn phase_of(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    if p <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Orthonormal forward transform, each channel of each batch element alone.
pub fn forward_fft(x: &Tensor) -> Result<Spectrum> {
    x.ensure_finite("forward_fft input")?;
    Ok(fft_real(x))
}

/// Inverse of [`forward_fft`]; fails when the result is not real.
pub fn inverse_fft(spec: &Spectrum) -> Result<Tensor> {
    spec.re.expect_shape(spec.im.shape(), "inverse_fft imaginary plane")?;
    let (re, im) = ifft_complex(spec);
    check_residue(&re, &im)?;
    Ok(re)
}

fn check_residue(re: &Tensor, im: &Tensor) -> Result<()> {
    let residue = im.max_abs();
    let limit = IMAG_RESIDUE_LIMIT * re.max_abs().max(1e-8);
    if residue > limit {
        return Err(Error::ImaginaryResidue { residue, limit });
    }
    Ok(())
}

pub fn split(x: &Tensor) -> Result<SpectralPair> {
    Ok(pair_of(&forward_fft(x)?))
}

pub(crate) fn pair_of(spec: &Spectrum) -> SpectralPair {
    SpectralPair {
        amplitude: spec.re.zip_map(&spec.im, f64::hypot).expect("same shape"),
        phase: spec.re.zip_map(&spec.im, phase_of).expect("same shape"),
    }
}

/// Inverse transform of `amplitude · e^{i·phase}`, discarding the imaginary
/// residue once it is checked to be negligible.
pub fn recompose(pair: &SpectralPair) -> Result<Tensor> {
    let amp = &pair.amplitude;
    amp.expect_shape(pair.phase.shape(), "recompose phase plane")?;
    amp.ensure_finite("recompose amplitude")?;
    pair.phase.ensure_finite("recompose phase")?;
    if let Some(v) = amp.data().iter().find(|v| **v < 0.0) {
        return Err(Error::Shape(format!("recompose: negative amplitude {v}")));
    }
    let re = amp.zip_map(&pair.phase, |a, p| a * p.cos())?;
    let im = amp.zip_map(&pair.phase, |a, p| a * p.sin())?;
    inverse_fft(&Spectrum { re, im })
}

/// Image carrying the amplitude spectrum of `src_amp` and the phase spectrum
/// of `src_phase`.
pub fn amp_swap(src_amp: &Tensor, src_phase: &Tensor) -> Result<Tensor> {
    src_amp.expect_shape(src_phase.shape(), "amp_swap")?;
    let amplitude = split(src_amp)?.amplitude;
    let phase = split(src_phase)?.phase;
    recompose(&SpectralPair { amplitude, phase })
}
