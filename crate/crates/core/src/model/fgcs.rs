//! Axis-factorized spectral mixing with grouped weight sharing.
//!
//! Each branch transforms feature maps along one grid axis, keeps the first
//! `M` frequency bins, applies one shared `(C/G) x (C/G)` complex mixing
//! block-diagonally to all `G` channel groups, and inverse-transforms back
//! assuming Hermitian symmetry (real output, one-sided spectrum semantics).
//!
//! Everything here is real-linear, and `axis_adjoint` is the exact transpose
//! of `axis_forward` with respect to the real inner product: the cotangent of
//! the truncated transform is pushed back through a zero-padded inverse
//! transform, and spectral-weight cotangents are outer products against the
//! cached input spectra. Pairs of real lines ride one complex FFT.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::Real;

/// FFT plans for one axis length.
#[derive(Clone)]
pub struct AxisPlan<F: Real> {
    pub n: usize,
    fwd: Arc<dyn Fft<F>>,
    inv: Arc<dyn Fft<F>>,
    scratch_len: usize,
}

impl<F: Real> AxisPlan<F> {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Self {
            n,
            fwd,
            inv,
            scratch_len,
        }
    }
}

/// Which grid axis a branch transforms along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisDir {
    /// Along z: lines are contiguous runs of length `nz`.
    Z,
    /// Along x: lines stride by `nz`.
    X,
}

struct LineIo {
    stride: usize,
    line_len: usize,
    orth: usize,
}

fn line_io(dir: AxisDir, nx: usize, nz: usize) -> LineIo {
    match dir {
        AxisDir::Z => LineIo {
            stride: 1,
            line_len: nz,
            orth: nx,
        },
        AxisDir::X => LineIo {
            stride: nz,
            line_len: nx,
            orth: nz,
        },
    }
}

#[inline]
fn line_start(dir: AxisDir, nz: usize, orth_idx: usize) -> usize {
    match dir {
        AxisDir::Z => orth_idx * nz,
        AxisDir::X => orth_idx,
    }
}

/// Scratch reused across lines within one axis pass.
struct AxisScratch<F: Real> {
    buf: Vec<Complex<F>>,
    fft_scratch: Vec<Complex<F>>,
    s_line: Vec<Complex<F>>,
    t_line: Vec<Complex<F>>,
}

impl<F: Real> AxisScratch<F> {
    fn new(plan: &AxisPlan<F>, modes: usize, channels: usize) -> Self {
        let zero = Complex::new(F::zero(), F::zero());
        Self {
            buf: vec![zero; plan.n],
            fft_scratch: vec![zero; plan.scratch_len],
            s_line: vec![zero; modes * channels],
            t_line: vec![zero; modes * channels],
        }
    }
}

/// Forward-transforms channel pair lines and stores the first `modes` bins
/// into `dst[m * channels + c]`.
#[allow(clippy::too_many_arguments)]
fn fft_lines_truncated<F: Real>(
    src: &[F],
    hw: usize,
    io: &LineIo,
    start: usize,
    modes: usize,
    channels: usize,
    plan: &AxisPlan<F>,
    sc: &mut AxisScratch<F>,
    dst: &mut [Complex<F>],
) {
    let n = plan.n;
    let half = F::of(0.5);
    let mut c = 0;
    while c < channels {
        let pair = c + 1 < channels;
        let base_a = c * hw + start;
        if pair {
            let base_b = (c + 1) * hw + start;
            for k in 0..n {
                sc.buf[k] = Complex::new(src[base_a + k * io.stride], src[base_b + k * io.stride]);
            }
        } else {
            for k in 0..n {
                sc.buf[k] = Complex::new(src[base_a + k * io.stride], F::zero());
            }
        }
        plan.fwd
            .process_with_scratch(&mut sc.buf, &mut sc.fft_scratch);
        for m in 0..modes {
            let bm = sc.buf[m];
            if pair {
                let bmm = sc.buf[(n - m) % n];
                let sum = bm + bmm.conj();
                let diff = bm - bmm.conj();
                dst[m * channels + c] = Complex::new(sum.re * half, sum.im * half);
                dst[m * channels + c + 1] = Complex::new(diff.im * half, -diff.re * half);
            } else {
                dst[m * channels + c] = bm;
            }
        }
        c += 2;
    }
}

/// Inverse of the truncated transform for channel pairs, building the
/// Hermitian-symmetric spectrum from `src[m * channels + c]`.
///
/// `prescale_mid` multiplies bins `1..n/2` before symmetrization (1 for the
/// forward path, 1/2 for the adjoint path); `out_scale` multiplies the
/// output (1/n forward, 1 adjoint). Results are accumulated into `dst`.
#[allow(clippy::too_many_arguments)]
fn ifft_lines_accumulate<F: Real>(
    src: &[Complex<F>],
    hw: usize,
    io: &LineIo,
    start: usize,
    modes: usize,
    channels: usize,
    plan: &AxisPlan<F>,
    sc: &mut AxisScratch<F>,
    prescale_mid: F,
    out_scale: F,
    dst: &mut [F],
) {
    let n = plan.n;
    let zero = Complex::new(F::zero(), F::zero());
    let mut c = 0;
    while c < channels {
        let pair = c + 1 < channels;
        sc.buf.iter_mut().for_each(|v| *v = zero);
        for m in 0..modes {
            let ta = src[m * channels + c];
            let tb = if pair {
                src[m * channels + c + 1]
            } else {
                zero
            };
            if m == 0 || 2 * m == n {
                sc.buf[m] = Complex::new(ta.re, tb.re);
            } else {
                let ta = Complex::new(ta.re * prescale_mid, ta.im * prescale_mid);
                let tb = Complex::new(tb.re * prescale_mid, tb.im * prescale_mid);
                sc.buf[m] = Complex::new(ta.re - tb.im, ta.im + tb.re);
                sc.buf[n - m] = Complex::new(ta.re + tb.im, -ta.im + tb.re);
            }
        }
        plan.inv
            .process_with_scratch(&mut sc.buf, &mut sc.fft_scratch);
        let base_a = c * hw + start;
        for k in 0..n {
            dst[base_a + k * io.stride] = dst[base_a + k * io.stride] + sc.buf[k].re * out_scale;
        }
        if pair {
            let base_b = (c + 1) * hw + start;
            for k in 0..n {
                dst[base_b + k * io.stride] =
                    dst[base_b + k * io.stride] + sc.buf[k].im * out_scale;
            }
        }
        c += 2;
    }
}

/// Applies the shared group mixing `t = W[m] s` per retained mode.
fn mix_line<F: Real>(
    weights: &Array3<Complex<F>>,
    s_line: &[Complex<F>],
    t_line: &mut [Complex<F>],
    channels: usize,
    groups: usize,
) {
    let modes = weights.dim().0;
    let cg = channels / groups;
    let w = weights.as_slice().unwrap();
    for m in 0..modes {
        let wm = &w[m * cg * cg..(m + 1) * cg * cg];
        let s = &s_line[m * channels..(m + 1) * channels];
        let t = &mut t_line[m * channels..(m + 1) * channels];
        for g in 0..groups {
            let sg = &s[g * cg..(g + 1) * cg];
            let tg = &mut t[g * cg..(g + 1) * cg];
            for (a, out) in tg.iter_mut().enumerate() {
                let row = &wm[a * cg..(a + 1) * cg];
                let mut acc = Complex::new(F::zero(), F::zero());
                for (wv, sv) in row.iter().zip(sg.iter()) {
                    acc = acc + wv * sv;
                }
                *out = acc;
            }
        }
    }
}

/// Adjoint mixing `sbar = W[m]^H gbar` per retained mode.
fn mix_line_adjoint<F: Real>(
    weights: &Array3<Complex<F>>,
    g_line: &[Complex<F>],
    s_bar: &mut [Complex<F>],
    channels: usize,
    groups: usize,
) {
    let modes = weights.dim().0;
    let cg = channels / groups;
    let w = weights.as_slice().unwrap();
    for m in 0..modes {
        let wm = &w[m * cg * cg..(m + 1) * cg * cg];
        let g_ = &g_line[m * channels..(m + 1) * channels];
        let s = &mut s_bar[m * channels..(m + 1) * channels];
        for g in 0..groups {
            let gg = &g_[g * cg..(g + 1) * cg];
            let sg = &mut s[g * cg..(g + 1) * cg];
            for (b, out) in sg.iter_mut().enumerate() {
                let mut acc = Complex::new(F::zero(), F::zero());
                for a in 0..cg {
                    acc = acc + wm[a * cg + b].conj() * gg[a];
                }
                *out = acc;
            }
        }
    }
}

/// One spectral branch. Returns the cached input spectra, shaped
/// `(orth, modes, channels)`, and accumulates the branch output into `out`.
pub fn axis_forward<F: Real>(
    x: &Array2<F>,
    nx: usize,
    nz: usize,
    dir: AxisDir,
    weights: &Array3<Complex<F>>,
    groups: usize,
    plan: &AxisPlan<F>,
    out: &mut Array2<F>,
) -> Array3<Complex<F>> {
    let modes = weights.dim().0;
    let orth = line_io(dir, nx, nz).orth;
    let mut spectra =
        Array3::from_elem((orth, modes, x.dim().0), Complex::new(F::zero(), F::zero()));
    axis_forward_impl(x, nx, nz, dir, weights, groups, plan, out, Some(&mut spectra));
    spectra
}

/// [`axis_forward`] without retaining spectra; the inference path.
pub fn axis_apply<F: Real>(
    x: &Array2<F>,
    nx: usize,
    nz: usize,
    dir: AxisDir,
    weights: &Array3<Complex<F>>,
    groups: usize,
    plan: &AxisPlan<F>,
    out: &mut Array2<F>,
) {
    axis_forward_impl(x, nx, nz, dir, weights, groups, plan, out, None);
}

#[allow(clippy::too_many_arguments)]
fn axis_forward_impl<F: Real>(
    x: &Array2<F>,
    nx: usize,
    nz: usize,
    dir: AxisDir,
    weights: &Array3<Complex<F>>,
    groups: usize,
    plan: &AxisPlan<F>,
    out: &mut Array2<F>,
    mut spectra: Option<&mut Array3<Complex<F>>>,
) {
    let (channels, hw) = x.dim();
    debug_assert_eq!(hw, nx * nz);
    let modes = weights.dim().0;
    let io = line_io(dir, nx, nz);
    debug_assert_eq!(io.line_len, plan.n);
    let mut sc = AxisScratch::new(plan, modes, channels);
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let inv_n = F::one() / F::of(plan.n as f64);
    let mut s_line = std::mem::take(&mut sc.s_line);
    for oi in 0..io.orth {
        let start = line_start(dir, nz, oi);
        fft_lines_truncated(xs, hw, &io, start, modes, channels, plan, &mut sc, &mut s_line);
        if let Some(sp) = spectra.as_deref_mut() {
            let dst = sp.as_slice_mut().unwrap();
            dst[oi * modes * channels..(oi + 1) * modes * channels].copy_from_slice(&s_line);
        }
        mix_line(weights, &s_line, &mut sc.t_line, channels, groups);
        let t_line = std::mem::take(&mut sc.t_line);
        ifft_lines_accumulate(
            &t_line,
            hw,
            &io,
            start,
            modes,
            channels,
            plan,
            &mut sc,
            F::one(),
            inv_n,
            os,
        );
        sc.t_line = t_line;
    }
    sc.s_line = s_line;
}

/// Exact adjoint of [`axis_forward`]: accumulates the input cotangent into
/// `x_bar` and the spectral-weight cotangent into `w_bar`.
#[allow(clippy::too_many_arguments)]
pub fn axis_adjoint<F: Real>(
    y_bar: &Array2<F>,
    spectra: &Array3<Complex<F>>,
    nx: usize,
    nz: usize,
    dir: AxisDir,
    weights: &Array3<Complex<F>>,
    groups: usize,
    plan: &AxisPlan<F>,
    x_bar: &mut Array2<F>,
    w_bar: &mut Array3<Complex<F>>,
) {
    let (channels, hw) = y_bar.dim();
    let modes = weights.dim().0;
    let cg = channels / groups;
    let io = line_io(dir, nx, nz);
    let mut sc = AxisScratch::new(plan, modes, channels);
    let ys = y_bar.as_slice().unwrap();
    let xbs = x_bar.as_slice_mut().unwrap();
    let ss = spectra.as_slice().unwrap();
    let wb = w_bar.as_slice_mut().unwrap();
    let n = plan.n;
    let inv_n = F::one() / F::of(n as f64);
    let two_inv_n = F::of(2.0) * inv_n;
    let half = F::of(0.5);
    let mut g_line = vec![Complex::new(F::zero(), F::zero()); modes * channels];
    for oi in 0..io.orth {
        let start = line_start(dir, nz, oi);
        // Cotangent of the retained bins: (w_m / n) fft(y_bar).
        fft_lines_truncated(
            ys, hw, &io, start, modes, channels, plan, &mut sc, &mut g_line,
        );
        for m in 0..modes {
            let w = if m == 0 || 2 * m == n { inv_n } else { two_inv_n };
            for c in 0..channels {
                let v = g_line[m * channels + c];
                g_line[m * channels + c] = Complex::new(v.re * w, v.im * w);
            }
        }
        // Weight cotangent: gbar (x) conj(s), shared over groups and lines.
        let s_cached = &ss[oi * modes * channels..(oi + 1) * modes * channels];
        for m in 0..modes {
            let wm = &mut wb[m * cg * cg..(m + 1) * cg * cg];
            for g in 0..groups {
                for a in 0..cg {
                    let ga = g_line[m * channels + g * cg + a];
                    let row = &mut wm[a * cg..(a + 1) * cg];
                    for (b, out) in row.iter_mut().enumerate() {
                        *out = *out + ga * s_cached[m * channels + g * cg + b].conj();
                    }
                }
            }
        }
        // Input cotangent through the zero-padded inverse transform.
        mix_line_adjoint(weights, &g_line, &mut sc.s_line, channels, groups);
        let s_line = std::mem::take(&mut sc.s_line);
        ifft_lines_accumulate(
            &s_line,
            hw,
            &io,
            start,
            modes,
            channels,
            plan,
            &mut sc,
            half,
            F::one(),
            xbs,
        );
        sc.s_line = s_line;
    }
}

/// Channel shuffle: channel `g * (C/G) + k` moves to `k * G + g`.
pub fn channel_shuffle<F: Real>(x: &Array2<F>, groups: usize) -> Array2<F> {
    let mut out = Array2::zeros(x.dim());
    channel_shuffle_into(x, groups, &mut out);
    out
}

/// [`channel_shuffle`] into an existing buffer.
pub fn channel_shuffle_into<F: Real>(x: &Array2<F>, groups: usize, out: &mut Array2<F>) {
    let (channels, _) = x.dim();
    assert_eq!(channels % groups, 0, "channels must divide into groups");
    assert_eq!(x.dim(), out.dim());
    let cg = channels / groups;
    for g in 0..groups {
        for k in 0..cg {
            let src = x.row(g * cg + k);
            out.row_mut(k * groups + g).assign(&src);
        }
    }
}

/// Inverse of [`channel_shuffle`] with the same group count.
pub fn channel_unshuffle<F: Real>(x: &Array2<F>, groups: usize) -> Array2<F> {
    let (channels, _) = x.dim();
    channel_shuffle(x, channels / groups)
}
