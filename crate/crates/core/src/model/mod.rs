//! Wavelength-conditioned spectral neural operator.
//!
//! The surrogate maps a normalized permittivity map and a wavelength to a
//! complex field. The permittivity is lifted to `C` channels by a 1x1
//! mixing; the refined wave prior for the wavelength is lifted separately to
//! a latent conditioning map `z_wp` (channel-wise only, so its spatial
//! structure is preserved). Each of the `L` layers applies the factorized
//! grouped spectral operator ([`fgcs`]), a 1x1 mixing with bias and a GELU,
//! multiplies element-wise by a per-layer 1x1 projection of `z_wp`, and adds
//! the residual. A final 1x1 head emits real and imaginary field channels.
//!
//! In `concat` conditioning mode the prior channels are instead concatenated
//! to the permittivity before the lift and all multiplicative injections are
//! disabled; this is the baseline conditioning the multiplicative scheme is
//! compared against.
//!
//! Everything is generic over `f32`/`f64`; gradients are exact reverse-mode
//! transposes of the forward pass, accumulated in deterministic order.

pub mod checkpoint;
pub mod fgcs;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::TAU;

use crate::dataset::{lambda_key, Sample};
use crate::{ComplexField, CoreError, Grid2D, PermittivityMap, Result};
use fgcs::{axis_adjoint, axis_forward, channel_shuffle, channel_unshuffle, AxisDir, AxisPlan};

/// Scalar type the operator runs in. `f64` for gradient verification,
/// `f32` for fast training; both share one code path.
pub trait Real: ndarray::NdFloat + rustfft::FftNum + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Parallel chunk size for batch work; fixed so gradient reductions do not
/// depend on the worker count.
pub const BATCH_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Multiplicative injection of the lifted prior at every layer.
    Wime,
    /// Prior concatenated to the input once; no per-layer injection.
    Concat,
}

impl Conditioning {
    pub fn as_str(&self) -> &'static str {
        match self {
            Conditioning::Wime => "wime",
            Conditioning::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wime" => Ok(Conditioning::Wime),
            "concat" => Ok(Conditioning::Concat),
            other => Err(CoreError::InvalidArg(format!(
                "unknown conditioning '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        "gelu"
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub layers: usize,
    /// Retained modes of the transform along z.
    pub modes_v: usize,
    /// Retained modes of the transform along x.
    pub modes_h: usize,
    pub groups: usize,
    pub conditioning: Conditioning,
    pub activation: Activation,
    pub lift_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: trains on a CPU in minutes.
    pub fn desk_default() -> Self {
        Self {
            channels: 32,
            layers: 4,
            modes_v: 12,
            modes_h: 12,
            groups: 4,
            conditioning: Conditioning::Wime,
            activation: Activation::Gelu,
            lift_width: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(CoreError::InvalidArg("layers must be >= 1".into()));
        }
        if self.groups == 0 {
            return Err(CoreError::InvalidArg("groups must be >= 1".into()));
        }
        if self.channels == 0 || self.channels % self.groups != 0 {
            return Err(CoreError::InvalidArg(format!(
                "channels {} must be a positive multiple of groups {}",
                self.channels, self.groups
            )));
        }
        if self.modes_v == 0 || self.modes_h == 0 {
            return Err(CoreError::InvalidArg("modes must be >= 1".into()));
        }
        if self.lift_width != self.channels {
            return Err(CoreError::InvalidArg(format!(
                "lift_width {} must equal channels {} (single 1x1 lift)",
                self.lift_width, self.channels
            )));
        }
        Ok(())
    }

    /// Mode counts are bounded by the one-sided spectrum length at bind time.
    pub fn check_grid(&self, grid: &Grid2D) -> Result<()> {
        if self.modes_v > grid.nz / 2 + 1 {
            return Err(CoreError::Incompatible(format!(
                "modes_v {} exceeds nz/2+1 = {}",
                self.modes_v,
                grid.nz / 2 + 1
            )));
        }
        if self.modes_h > grid.nx / 2 + 1 {
            return Err(CoreError::Incompatible(format!(
                "modes_h {} exceeds nx/2+1 = {}",
                self.modes_h,
                grid.nx / 2 + 1
            )));
        }
        Ok(())
    }

    /// Input channels consumed by the permittivity lift.
    pub fn in_channels(&self) -> usize {
        match self.conditioning {
            Conditioning::Wime => 1,
            Conditioning::Concat => 1 + 4,
        }
    }

    /// Complex spectral entries per layer: `(C/G)^2 (M_v + M_h)`. At the
    /// default `G = 4` this equals `C^2 (M_v + M_h) / (4 G)`.
    pub fn spectral_complex_per_layer(&self) -> usize {
        let cg = self.channels / self.groups;
        cg * cg * (self.modes_v + self.modes_h)
    }

    /// Exact trainable scalar count (complex entries count twice).
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let mut n = c * self.in_channels(); // lift_eps
        if self.conditioning == Conditioning::Wime {
            n += c * 4; // lift_prior
        }
        let mut per_layer = 2 * self.spectral_complex_per_layer();
        per_layer += c * c + c; // pointwise with bias
        if self.conditioning == Conditioning::Wime {
            per_layer += c * c; // prior projection
        }
        n += self.layers * per_layer;
        n += 2 * c; // head
        n
    }
}

/// Per-layer trainable tensors.
#[derive(Debug, Clone)]
pub struct LayerParams<F: Real> {
    pub spectral_v: Array3<Complex<F>>,
    pub spectral_h: Array3<Complex<F>>,
    pub pointwise_w: Array2<F>,
    pub pointwise_b: ndarray::Array1<F>,
    pub prior_proj: Option<Array2<F>>,
}

/// All trainable tensors, in a fixed declaration order used by flattening
/// and the checkpoint format.
#[derive(Debug, Clone)]
pub struct Parameters<F: Real> {
    pub lift_eps: Array2<F>,
    pub lift_prior: Option<Array2<F>>,
    pub layers: Vec<LayerParams<F>>,
    pub head: Array2<F>,
}

impl<F: Real> Parameters<F> {
    /// Zero-initialized tensors with the shapes implied by the config.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let cg = c / cfg.groups;
        let zc = Complex::new(F::zero(), F::zero());
        let layer = |_| LayerParams {
            spectral_v: Array3::from_elem((cfg.modes_v, cg, cg), zc),
            spectral_h: Array3::from_elem((cfg.modes_h, cg, cg), zc),
            pointwise_w: Array2::zeros((c, c)),
            pointwise_b: ndarray::Array1::zeros(c),
            prior_proj: (cfg.conditioning == Conditioning::Wime).then(|| Array2::zeros((c, c))),
        };
        Self {
            lift_eps: Array2::zeros((c, cfg.in_channels())),
            lift_prior: (cfg.conditioning == Conditioning::Wime).then(|| Array2::zeros((c, 4))),
            layers: (0..cfg.layers).map(layer).collect(),
            head: Array2::zeros((2, c)),
        }
    }

    fn visit(&self, f: &mut impl FnMut(&[F], &[Complex<F>])) {
        f(self.lift_eps.as_slice().unwrap(), &[]);
        if let Some(a) = &self.lift_prior {
            f(a.as_slice().unwrap(), &[]);
        }
        for l in &self.layers {
            f(&[], l.spectral_v.as_slice().unwrap());
            f(&[], l.spectral_h.as_slice().unwrap());
            f(l.pointwise_w.as_slice().unwrap(), &[]);
            f(l.pointwise_b.as_slice().unwrap(), &[]);
            if let Some(a) = &l.prior_proj {
                f(a.as_slice().unwrap(), &[]);
            }
        }
        f(self.head.as_slice().unwrap(), &[]);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [F], &mut [Complex<F>])) {
        let mut no_c: [Complex<F>; 0] = [];
        let mut no_r: [F; 0] = [];
        f(self.lift_eps.as_slice_mut().unwrap(), &mut no_c);
        if let Some(a) = &mut self.lift_prior {
            f(a.as_slice_mut().unwrap(), &mut no_c);
        }
        for l in &mut self.layers {
            f(&mut no_r, l.spectral_v.as_slice_mut().unwrap());
            f(&mut no_r, l.spectral_h.as_slice_mut().unwrap());
            f(l.pointwise_w.as_slice_mut().unwrap(), &mut no_c);
            f(l.pointwise_b.as_slice_mut().unwrap(), &mut no_c);
            if let Some(a) = &mut l.prior_proj {
                f(a.as_slice_mut().unwrap(), &mut no_c);
            }
        }
        f(self.head.as_slice_mut().unwrap(), &mut no_c);
    }

    /// Total scalar count (complex entries count twice).
    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |r, c| n += r.len() + 2 * c.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalars in declaration order; complex entries as (re, im).
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(&mut |r, c| {
            out.extend_from_slice(r);
            for v in c {
                out.push(v.re);
                out.push(v.im);
            }
        });
        out
    }

    /// Inverse of [`Parameters::flatten`].
    pub fn assign_from_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "flat parameter vector has {} scalars, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut pos = 0;
        self.visit_mut(&mut |r, c| {
            r.copy_from_slice(&flat[pos..pos + r.len()]);
            pos += r.len();
            for v in c.iter_mut() {
                v.re = flat[pos];
                v.im = flat[pos + 1];
                pos += 2;
            }
        });
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        let flat = other.flatten();
        let mut pos = 0;
        self.visit_mut(&mut |r, c| {
            for v in r.iter_mut() {
                *v = *v + flat[pos];
                pos += 1;
            }
            for v in c.iter_mut() {
                v.re = v.re + flat[pos];
                v.im = v.im + flat[pos + 1];
                pos += 2;
            }
        });
    }

    pub fn scale(&mut self, s: F) {
        self.visit_mut(&mut |r, c| {
            for v in r.iter_mut() {
                *v = *v * s;
            }
            for v in c.iter_mut() {
                v.re = v.re * s;
                v.im = v.im * s;
            }
        });
    }

    pub fn max_abs(&self) -> F {
        let mut m = F::zero();
        self.visit(&mut |r, c| {
            for v in r {
                m = m.max(v.abs());
            }
            for v in c {
                m = m.max(v.re.abs()).max(v.im.abs());
            }
        });
        m
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |r, c| {
            ok = ok
                && r.iter().all(|v| v.is_finite())
                && c.iter().all(|v| v.re.is_finite() && v.im.is_finite());
        });
        ok
    }
}

/// Seeded deterministic initialization: spectral entries uniform with scale
/// `1/(C max(M_v, M_h))`, 1x1 mixings fan-in-scaled uniform, biases zero.
pub fn init_params<F: Real>(cfg: &ModelConfig) -> Result<Parameters<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Parameters::zeros(cfg);
    let spectral_scale = 1.0 / (cfg.channels as f64 * cfg.modes_v.max(cfg.modes_h) as f64);
    fn fill_real<F: Real>(a: &mut Array2<F>, fan_in: usize, rng: &mut ChaCha8Rng) {
        let s = (1.0 / fan_in as f64).sqrt();
        for v in a.iter_mut() {
            *v = F::of(rng.random_range(-s..s));
        }
    }
    fn fill_complex<F: Real>(a: &mut Array3<Complex<F>>, s: f64, rng: &mut ChaCha8Rng) {
        for v in a.iter_mut() {
            v.re = F::of(rng.random_range(-s..s));
            v.im = F::of(rng.random_range(-s..s));
        }
    }
    fill_real(&mut p.lift_eps, cfg.in_channels(), &mut rng);
    if let Some(a) = &mut p.lift_prior {
        fill_real(a, 4, &mut rng);
    }
    for l in &mut p.layers {
        fill_complex(&mut l.spectral_v, spectral_scale, &mut rng);
        fill_complex(&mut l.spectral_h, spectral_scale, &mut rng);
        fill_real(&mut l.pointwise_w, cfg.channels, &mut rng);
        // biases stay zero
        if let Some(a) = &mut l.prior_proj {
            fill_real(a, cfg.channels, &mut rng);
        }
    }
    fill_real(&mut p.head, cfg.channels, &mut rng);
    Ok(p)
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

#[inline]
fn gelu_tanh_arg<F: Real>(x: F) -> F {
    let c1 = F::of(GELU_C1);
    let c2 = F::of(GELU_C2);
    c1 * (x + c2 * x * x * x)
}

/// Value-only twin of [`fast_tanh_with_grad`]; identical operations in
/// identical order, so training and inference forwards agree bit-for-bit.
#[inline]
fn fast_tanh<F: Real>(x: F) -> F {
    let bound = F::of(7.905_093_1);
    let clamped = x.min(bound).max(-bound);
    let x = clamped;
    let s = x * x;
    let a1 = F::of(4.893_525_458_917_86e-3);
    let a3 = F::of(6.372_619_288_754_36e-4);
    let a5 = F::of(1.485_722_357_179_79e-5);
    let a7 = F::of(5.122_297_090_371_14e-8);
    let a9 = F::of(-8.604_671_522_137_35e-11);
    let a11 = F::of(2.000_187_904_824_77e-13);
    let a13 = F::of(-2.760_768_477_423_55e-16);
    let b0 = F::of(4.893_525_185_543_85e-3);
    let b2 = F::of(2.268_434_632_439e-3);
    let b4 = F::of(1.185_347_056_866_54e-4);
    let b6 = F::of(1.198_258_394_667_02e-6);
    let pp = a1 + s * (a3 + s * (a5 + s * (a7 + s * (a9 + s * (a11 + s * a13)))));
    let p = x * pp;
    let q = b0 + s * (b2 + s * (b4 + s * b6));
    p / q
}

/// Branchless rational tanh, accurate to single precision (~1e-7 absolute)
/// and an order of magnitude faster than the libm call in hot loops.
/// Returns the value and its exact derivative; the backward pass
/// differentiates this expression, not the ideal tanh, so gradients match
/// finite differences of the actual forward computation.
#[inline]
fn fast_tanh_with_grad<F: Real>(x: F) -> (F, F) {
    let bound = F::of(7.905_093_1);
    let clamped = x.min(bound).max(-bound);
    let inside = if x == clamped { F::one() } else { F::zero() };
    let x = clamped;
    let s = x * x;
    let a1 = F::of(4.893_525_458_917_86e-3);
    let a3 = F::of(6.372_619_288_754_36e-4);
    let a5 = F::of(1.485_722_357_179_79e-5);
    let a7 = F::of(5.122_297_090_371_14e-8);
    let a9 = F::of(-8.604_671_522_137_35e-11);
    let a11 = F::of(2.000_187_904_824_77e-13);
    let a13 = F::of(-2.760_768_477_423_55e-16);
    let b0 = F::of(4.893_525_185_543_85e-3);
    let b2 = F::of(2.268_434_632_439e-3);
    let b4 = F::of(1.185_347_056_866_54e-4);
    let b6 = F::of(1.198_258_394_667_02e-6);
    let two = F::of(2.0);
    let three = F::of(3.0);
    let pp = a1 + s * (a3 + s * (a5 + s * (a7 + s * (a9 + s * (a11 + s * a13)))));
    let dpp = a3
        + s * (two * a5
            + s * (three * a7 + s * (F::of(4.0) * a9 + s * (F::of(5.0) * a11 + s * F::of(6.0) * a13))));
    let p = x * pp;
    let dp = pp + two * s * dpp;
    let q = b0 + s * (b2 + s * (b4 + s * b6));
    let dq = two * x * (b2 + s * (two * b4 + s * three * b6));
    let value = p / q;
    let grad = (dp * q - p * dq) / (q * q);
    (value, grad * inside)
}

/// GELU (tanh form) evaluated from the pre-activation and its cached tanh.
#[inline]
fn gelu_from_tanh<F: Real>(x: F, t: F) -> F {
    F::of(0.5) * x * (F::one() + t)
}

/// Derivative of the GELU given the cached tanh value `t` and the cached
/// derivative `dt` of the tanh evaluation with respect to its argument.
#[inline]
fn gelu_prime<F: Real>(x: F, t: F, dt: F) -> F {
    let half = F::of(0.5);
    let c1 = F::of(GELU_C1);
    let c2 = F::of(GELU_C2);
    let three = F::of(3.0);
    half * (F::one() + t) + half * x * dt * c1 * (F::one() + three * c2 * x * x)
}

/// Per-layer cached activations for the backward pass.
struct LayerCache<F: Real> {
    spectra_v: Array3<Complex<F>>,
    spectra_h: Array3<Complex<F>>,
    /// Spectral-branch output after channel shuffle (pointwise input).
    u: Array2<F>,
    /// Pre-activation.
    p: Array2<F>,
    /// tanh of the GELU argument.
    t: Array2<F>,
    /// Derivative of the tanh evaluation with respect to its argument.
    dt: Array2<F>,
    /// Projected prior (multiplicative conditioning), when enabled.
    q: Option<Array2<F>>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache<F: Real> {
    x_in: Array2<F>,
    prior4: Option<Array2<F>>,
    zwp: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
    x_final: Array2<F>,
}

/// One training/evaluation item with precomputed tensors.
#[derive(Debug, Clone)]
pub struct TrainItem<F: Real> {
    pub lambda: f64,
    /// Normalized permittivity, shape (1, nx*nz).
    pub eps_norm: Array2<F>,
    /// Target field as (2, nx*nz) real/imag channels.
    pub target: Array2<F>,
    pub target_norm_sq: F,
}

/// Everything wavelength-dependent a forward pass needs, precomputed once
/// per wavelength: the raw prior channels plus (in multiplicative mode) the
/// per-layer projections of the lifted prior. Weights are baked in, so a
/// conditioning object is only valid for the model that built it.
pub struct LambdaConditioning<F: Real> {
    pub lambda: f64,
    prior4: Array2<F>,
    q_layers: Option<Vec<Array2<F>>>,
}

/// Prior channel maps per distinct wavelength, shared read-only by workers.
pub struct PriorSet<F: Real> {
    map: HashMap<u64, Array2<F>>,
}

impl<F: Real> PriorSet<F> {
    pub fn build(model: &Model<F>, wavelengths: &[f64]) -> Result<Self> {
        let mut map = HashMap::new();
        for &w in wavelengths {
            if let std::collections::hash_map::Entry::Vacant(e) = map.entry(lambda_key(w)) {
                e.insert(model.prior_channels(w)?);
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, lambda: f64) -> Result<&Array2<F>> {
        self.map.get(&lambda_key(lambda)).ok_or_else(|| {
            CoreError::InvalidArg(format!(
                "no cached prior for wavelength {:.3} nm",
                lambda * 1e9
            ))
        })
    }
}

/// The bound surrogate: config, grid, normalization constant and weights.
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub grid: Grid2D,
    /// Largest permittivity of the training data; fixes input normalization.
    pub eps_max: f64,
    pub params: Parameters<F>,
    plan_z: AxisPlan<F>,
    plan_x: AxisPlan<F>,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig, grid: Grid2D, eps_max: f64) -> Result<Self> {
        let params = init_params(&cfg)?;
        Self::with_params(cfg, grid, eps_max, params)
    }

    pub fn with_params(
        cfg: ModelConfig,
        grid: Grid2D,
        eps_max: f64,
        params: Parameters<F>,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.check_grid(&grid)?;
        if !(eps_max > 1.0 && eps_max.is_finite()) {
            return Err(CoreError::InvalidArg(format!(
                "eps_max must be finite and > 1 for input normalization, got {eps_max}"
            )));
        }
        let expected = Parameters::<F>::zeros(&cfg).len();
        if params.len() != expected {
            return Err(CoreError::ShapeMismatch(format!(
                "parameters hold {} scalars, config implies {}",
                params.len(),
                expected
            )));
        }
        Ok(Self {
            cfg,
            grid,
            eps_max,
            params,
            plan_z: AxisPlan::new(grid.nz),
            plan_x: AxisPlan::new(grid.nx),
        })
    }

    pub fn hw(&self) -> usize {
        self.grid.nx * self.grid.nz
    }

    /// `(eps_r - 1) / (eps_max - 1)` as a (1, HW) channel.
    pub fn normalize_eps(&self, eps: &PermittivityMap) -> Result<Array2<F>> {
        if eps.grid != self.grid {
            return Err(CoreError::Incompatible(format!(
                "permittivity grid {}x{} does not match model grid {}x{}",
                eps.grid.nx, eps.grid.nz, self.grid.nx, self.grid.nz
            )));
        }
        let denom = self.eps_max - 1.0;
        let mut out = Array2::zeros((1, self.hw()));
        for (dst, src) in out.as_slice_mut().unwrap().iter_mut().zip(eps.eps.iter()) {
            *dst = F::of((src - 1.0) / denom);
        }
        Ok(out)
    }

    /// Refined-wave-prior channels `[wx.re, wx.im, wz.re, wz.im]` as (4, HW).
    pub fn prior_channels(&self, lambda: f64) -> Result<Array2<F>> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CoreError::InvalidArg(format!(
                "wavelength must be positive, got {lambda}"
            )));
        }
        let (nx, nz) = (self.grid.nx, self.grid.nz);
        let mut out = Array2::zeros((4, nx * nz));
        let phase_x: Vec<(f64, f64)> = (0..nx)
            .map(|i| {
                let ph = TAU * i as f64 * self.grid.dl_x / lambda;
                (ph.cos(), ph.sin())
            })
            .collect();
        let phase_z: Vec<(f64, f64)> = (0..nz)
            .map(|k| {
                let ph = TAU * k as f64 * self.grid.dl_z / lambda;
                (ph.cos(), ph.sin())
            })
            .collect();
        for i in 0..nx {
            for k in 0..nz {
                let p = i * nz + k;
                out[[0, p]] = F::of(phase_x[i].0);
                out[[1, p]] = F::of(phase_x[i].1);
                out[[2, p]] = F::of(phase_z[k].0);
                out[[3, p]] = F::of(phase_z[k].1);
            }
        }
        Ok(out)
    }

    /// Precomputes the tensors of one dataset sample.
    pub fn prepare_item(&self, sample: &Sample) -> Result<TrainItem<F>> {
        let eps_norm = self.normalize_eps(&sample.eps)?;
        if sample.field.grid != self.grid {
            return Err(CoreError::Incompatible(
                "field grid does not match model grid".into(),
            ));
        }
        let mut target = Array2::zeros((2, self.hw()));
        let mut norm_sq = F::zero();
        for (p, v) in sample.field.values.iter().enumerate() {
            let re = F::of(v.re);
            let im = F::of(v.im);
            target[[0, p]] = re;
            target[[1, p]] = im;
            norm_sq = norm_sq + re * re + im * im;
        }
        if norm_sq == F::zero() {
            return Err(CoreError::InvalidArg(
                "target field has zero norm; NMSE undefined".into(),
            ));
        }
        Ok(TrainItem {
            lambda: sample.lambda,
            eps_norm,
            target,
            target_norm_sq: norm_sq,
        })
    }

    fn matmul(w: &Array2<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::zeros((w.dim().0, x.dim().1));
        general_mat_mul(F::one(), w, x, F::zero(), &mut y);
        y
    }

    /// `w^T x` without materializing the transpose.
    fn matmul_t(w: &Array2<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::zeros((w.dim().1, x.dim().1));
        general_mat_mul(F::one(), &w.t(), x, F::zero(), &mut y);
        y
    }

    /// One conditioning layer: residual + GELU(pointwise(spectral)) scaled
    /// by the projected prior. `zwp` is ignored in concat mode.
    pub fn wime_layer(&self, layer: usize, x: &Array2<F>, zwp: Option<&Array2<F>>) -> Array2<F> {
        let (y, _) = self.wime_layer_cached(layer, x, zwp);
        y
    }

    fn wime_layer_cached(
        &self,
        layer: usize,
        x: &Array2<F>,
        zwp: Option<&Array2<F>>,
    ) -> (Array2<F>, LayerCache<F>) {
        let lp = &self.params.layers[layer];
        let (nx, nz) = (self.grid.nx, self.grid.nz);
        let mut pre = Array2::zeros(x.dim());
        let spectra_v = axis_forward(
            x,
            nx,
            nz,
            AxisDir::Z,
            &lp.spectral_v,
            self.cfg.groups,
            &self.plan_z,
            &mut pre,
        );
        let spectra_h = axis_forward(
            x,
            nx,
            nz,
            AxisDir::X,
            &lp.spectral_h,
            self.cfg.groups,
            &self.plan_x,
            &mut pre,
        );
        let u = channel_shuffle(&pre, self.cfg.groups);
        let mut p = Self::matmul(&lp.pointwise_w, &u);
        for (c, mut row) in p.outer_iter_mut().enumerate() {
            let b = lp.pointwise_b[c];
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        let mut t = Array2::zeros(p.dim());
        let mut dt = Array2::zeros(p.dim());
        for ((tv, dv), &pv) in t.iter_mut().zip(dt.iter_mut()).zip(p.iter()) {
            let (val, grad) = fast_tanh_with_grad(gelu_tanh_arg(pv));
            *tv = val;
            *dv = grad;
        }
        let q = match (&lp.prior_proj, zwp) {
            (Some(proj), Some(z)) => Some(Self::matmul(proj, z)),
            _ => None,
        };
        let mut y = x.clone();
        match &q {
            Some(qm) => {
                for ((yv, (&pv, &tv)), &qv) in
                    y.iter_mut().zip(p.iter().zip(t.iter())).zip(qm.iter())
                {
                    *yv = *yv + gelu_from_tanh(pv, tv) * qv;
                }
            }
            None => {
                for (yv, (&pv, &tv)) in y.iter_mut().zip(p.iter().zip(t.iter())) {
                    *yv = *yv + gelu_from_tanh(pv, tv);
                }
            }
        }
        (
            y,
            LayerCache {
                spectra_v,
                spectra_h,
                u,
                p,
                t,
                dt,
                q,
            },
        )
    }

    /// Full forward pass keeping everything the backward pass needs.
    pub fn forward_cached(
        &self,
        eps_norm: &Array2<F>,
        prior4: &Array2<F>,
    ) -> (Array2<F>, ForwardCache<F>) {
        let (x_in, zwp, prior_kept) = match self.cfg.conditioning {
            Conditioning::Wime => {
                let zwp = Self::matmul(self.params.lift_prior.as_ref().unwrap(), prior4);
                (eps_norm.clone(), Some(zwp), Some(prior4.clone()))
            }
            Conditioning::Concat => {
                let mut x_in = Array2::zeros((5, self.hw()));
                x_in.row_mut(0).assign(&eps_norm.row(0));
                for ch in 0..4 {
                    x_in.row_mut(1 + ch).assign(&prior4.row(ch));
                }
                (x_in, None, None)
            }
        };
        let mut x = Self::matmul(&self.params.lift_eps, &x_in);
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for layer in 0..self.cfg.layers {
            let (y, cache) = self.wime_layer_cached(layer, &x, zwp.as_ref());
            layers.push(cache);
            x = y;
        }
        let pred = Self::matmul(&self.params.head, &x);
        (
            pred,
            ForwardCache {
                x_in,
                prior4: prior_kept,
                zwp,
                layers,
                x_final: x,
            },
        )
    }

    /// Reverse-mode pass: accumulates parameter cotangents into `grad`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<F>,
        pred_bar: &Array2<F>,
        grad: &mut Parameters<F>,
    ) {
        let hw = self.hw();
        // head: pred = head x_final
        general_mat_mul(
            F::one(),
            pred_bar,
            &cache.x_final.t(),
            F::one(),
            &mut grad.head,
        );
        let mut xbar = Self::matmul_t(&self.params.head, pred_bar);
        let mut zwp_bar: Option<Array2<F>> = cache
            .zwp
            .as_ref()
            .map(|_| Array2::zeros((self.cfg.channels, hw)));

        for layer in (0..self.cfg.layers).rev() {
            let lp = &self.params.layers[layer];
            let lg = &mut grad.layers[layer];
            let lc = &cache.layers[layer];
            // y = x + gelu(p) (*) q ; xbar currently holds ybar.
            let mut pbar = Array2::zeros((self.cfg.channels, hw));
            match (&lc.q, zwp_bar.as_mut()) {
                (Some(q), Some(zb)) => {
                    let mut qbar = Array2::zeros((self.cfg.channels, hw));
                    for ((((qb, pb), (&pv, &tv)), &dv), (&yb, &qv)) in qbar
                        .iter_mut()
                        .zip(pbar.iter_mut())
                        .zip(lc.p.iter().zip(lc.t.iter()))
                        .zip(lc.dt.iter())
                        .zip(xbar.iter().zip(q.iter()))
                    {
                        let a = gelu_from_tanh(pv, tv);
                        *qb = yb * a;
                        *pb = yb * qv * gelu_prime(pv, tv, dv);
                    }
                    // q = proj zwp
                    let proj = lp.prior_proj.as_ref().unwrap();
                    general_mat_mul(
                        F::one(),
                        &qbar,
                        &cache.zwp.as_ref().unwrap().t(),
                        F::one(),
                        lg.prior_proj.as_mut().unwrap(),
                    );
                    general_mat_mul(F::one(), &proj.t(), &qbar, F::one(), zb);
                }
                _ => {
                    for ((pb, ((&pv, &tv), &yb)), &dv) in pbar
                        .iter_mut()
                        .zip(lc.p.iter().zip(lc.t.iter()).zip(xbar.iter()))
                        .zip(lc.dt.iter())
                    {
                        *pb = yb * gelu_prime(pv, tv, dv);
                    }
                }
            }
            // p = W u + b
            general_mat_mul(F::one(), &pbar, &lc.u.t(), F::one(), &mut lg.pointwise_w);
            for (c, row) in pbar.outer_iter().enumerate() {
                let mut acc = F::zero();
                for v in row.iter() {
                    acc = acc + *v;
                }
                lg.pointwise_b[c] = lg.pointwise_b[c] + acc;
            }
            let ubar = Self::matmul_t(&lp.pointwise_w, &pbar);
            // u = shuffle(v); v = axis_v(x) + axis_h(x); then the residual.
            let vbar = channel_unshuffle(&ubar, self.cfg.groups);
            axis_adjoint(
                &vbar,
                &lc.spectra_v,
                self.grid.nx,
                self.grid.nz,
                AxisDir::Z,
                &lp.spectral_v,
                self.cfg.groups,
                &self.plan_z,
                &mut xbar,
                &mut lg.spectral_v,
            );
            axis_adjoint(
                &vbar,
                &lc.spectra_h,
                self.grid.nx,
                self.grid.nz,
                AxisDir::X,
                &lp.spectral_h,
                self.cfg.groups,
                &self.plan_x,
                &mut xbar,
                &mut lg.spectral_h,
            );
        }
        // x0 = lift_eps x_in
        general_mat_mul(F::one(), &xbar, &cache.x_in.t(), F::one(), &mut grad.lift_eps);
        if let (Some(zb), Some(prior4)) = (&zwp_bar, &cache.prior4) {
            general_mat_mul(F::one(), zb, &prior4.t(), F::one(), grad.lift_prior.as_mut().unwrap());
        }
    }

    /// NMSE of one prediction against an item's target.
    pub fn item_nmse(&self, pred: &Array2<F>, item: &TrainItem<F>) -> F {
        let mut num = F::zero();
        for (p, t) in pred.iter().zip(item.target.iter()) {
            let d = *p - *t;
            num = num + d * d;
        }
        num / item.target_norm_sq
    }

    /// Mean NMSE and parameter gradient over a batch. Work splits into fixed
    /// chunks whose partial results are reduced in order, so the result is
    /// bit-deterministic for any worker count.
    pub fn loss_and_grad(
        &self,
        items: &[&TrainItem<F>],
        priors: &PriorSet<F>,
    ) -> Result<(F, Parameters<F>)> {
        if items.is_empty() {
            return Err(CoreError::InvalidArg("empty batch".into()));
        }
        let partials: Vec<Result<(F, Parameters<F>)>> = items
            .par_chunks(BATCH_CHUNK)
            .map(|chunk| {
                let mut grad = Parameters::zeros(&self.cfg);
                let mut loss_sum = F::zero();
                for item in chunk {
                    let prior4 = priors.get(item.lambda)?;
                    let (pred, cache) = self.forward_cached(&item.eps_norm, prior4);
                    loss_sum = loss_sum + self.item_nmse(&pred, item);
                    let two = F::of(2.0);
                    let mut pred_bar = Array2::zeros(pred.dim());
                    for (pb, (p, t)) in pred_bar
                        .iter_mut()
                        .zip(pred.iter().zip(item.target.iter()))
                    {
                        *pb = two * (*p - *t) / item.target_norm_sq;
                    }
                    self.backward_into(&cache, &pred_bar, &mut grad);
                }
                Ok((loss_sum, grad))
            })
            .collect();
        let mut total = Parameters::zeros(&self.cfg);
        let mut loss = F::zero();
        for part in partials {
            let (l, g) = part?;
            loss = loss + l;
            total.add_assign(&g);
        }
        let inv_b = F::one() / F::of(items.len() as f64);
        total.scale(inv_b);
        loss = loss * inv_b;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite("training loss".into()));
        }
        Ok((loss, total))
    }

    /// Mean NMSE over items without gradients; same deterministic chunking.
    pub fn batch_nmse(&self, items: &[&TrainItem<F>], priors: &PriorSet<F>) -> Result<F> {
        if items.is_empty() {
            return Err(CoreError::InvalidArg("empty batch".into()));
        }
        let partials: Vec<Result<F>> = items
            .par_chunks(BATCH_CHUNK)
            .map(|chunk| {
                let mut loss_sum = F::zero();
                for item in chunk {
                    let prior4 = priors.get(item.lambda)?;
                    let (pred, _) = self.forward_cached(&item.eps_norm, prior4);
                    loss_sum = loss_sum + self.item_nmse(&pred, item);
                }
                Ok(loss_sum)
            })
            .collect();
        let mut loss = F::zero();
        for part in partials {
            loss = loss + part?;
        }
        Ok(loss / F::of(items.len() as f64))
    }

    /// Precomputes the wavelength-dependent tensors used by [`Model::infer`].
    pub fn conditioning_for(&self, lambda: f64) -> Result<LambdaConditioning<F>> {
        let prior4 = self.prior_channels(lambda)?;
        let q_layers = match self.cfg.conditioning {
            Conditioning::Wime => {
                let zwp = Self::matmul(self.params.lift_prior.as_ref().unwrap(), &prior4);
                Some(
                    self.params
                        .layers
                        .iter()
                        .map(|l| Self::matmul(l.prior_proj.as_ref().unwrap(), &zwp))
                        .collect(),
                )
            }
            Conditioning::Concat => None,
        };
        Ok(LambdaConditioning {
            lambda,
            prior4,
            q_layers,
        })
    }

    /// Inference forward pass: no gradient caches, activation fused, buffers
    /// reused across layers. Bit-identical to the training forward.
    pub fn infer(&self, eps_norm: &Array2<F>, cond: &LambdaConditioning<F>) -> Array2<F> {
        let hw = self.hw();
        let mut x = match self.cfg.conditioning {
            Conditioning::Wime => Self::matmul(&self.params.lift_eps, eps_norm),
            Conditioning::Concat => {
                let mut x_in = Array2::zeros((5, hw));
                x_in.row_mut(0).assign(&eps_norm.row(0));
                for ch in 0..4 {
                    x_in.row_mut(1 + ch).assign(&cond.prior4.row(ch));
                }
                Self::matmul(&self.params.lift_eps, &x_in)
            }
        };
        let c = self.cfg.channels;
        let mut pre = Array2::zeros((c, hw));
        let mut u = Array2::zeros((c, hw));
        let mut p = Array2::zeros((c, hw));
        for layer in 0..self.cfg.layers {
            let lp = &self.params.layers[layer];
            pre.fill(F::zero());
            fgcs::axis_apply(
                &x,
                self.grid.nx,
                self.grid.nz,
                AxisDir::Z,
                &lp.spectral_v,
                self.cfg.groups,
                &self.plan_z,
                &mut pre,
            );
            fgcs::axis_apply(
                &x,
                self.grid.nx,
                self.grid.nz,
                AxisDir::X,
                &lp.spectral_h,
                self.cfg.groups,
                &self.plan_x,
                &mut pre,
            );
            fgcs::channel_shuffle_into(&pre, self.cfg.groups, &mut u);
            general_mat_mul(F::one(), &lp.pointwise_w, &u, F::zero(), &mut p);
            for (ci, mut row) in p.outer_iter_mut().enumerate() {
                let b = lp.pointwise_b[ci];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
            match cond.q_layers.as_ref() {
                Some(q) => {
                    for (xv, (&pv, &qv)) in x.iter_mut().zip(p.iter().zip(q[layer].iter())) {
                        let t = fast_tanh(gelu_tanh_arg(pv));
                        *xv = *xv + gelu_from_tanh(pv, t) * qv;
                    }
                }
                None => {
                    for (xv, &pv) in x.iter_mut().zip(p.iter()) {
                        let t = fast_tanh(gelu_tanh_arg(pv));
                        *xv = *xv + gelu_from_tanh(pv, t);
                    }
                }
            }
        }
        Self::matmul(&self.params.head, &x)
    }

    /// Batched inference with the fixed deterministic chunking.
    pub fn infer_batch(
        &self,
        items: &[(&Array2<F>, &LambdaConditioning<F>)],
    ) -> Vec<Array2<F>> {
        items
            .par_chunks(BATCH_CHUNK)
            .flat_map_iter(|chunk| {
                chunk
                    .iter()
                    .map(|(eps_norm, cond)| self.infer(eps_norm, cond))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn pred_to_field(&self, pred: &Array2<F>) -> Result<ComplexField> {
        let mut values = Array2::from_elem(
            (self.grid.nx, self.grid.nz),
            num_complex::Complex64::new(0.0, 0.0),
        );
        for (p, v) in values.iter_mut().enumerate() {
            v.re = pred[[0, p]].as_f64();
            v.im = pred[[1, p]].as_f64();
        }
        ComplexField::new(self.grid, values)
    }

    /// Predicts the complex field for a permittivity map at a wavelength.
    pub fn forward_field(&self, eps: &PermittivityMap, lambda: f64) -> Result<ComplexField> {
        let eps_norm = self.normalize_eps(eps)?;
        let cond = self.conditioning_for(lambda)?;
        self.pred_to_field(&self.infer(&eps_norm, &cond))
    }

    /// [`Model::forward_field`] with a precomputed conditioning object.
    pub fn forward_field_with(
        &self,
        eps: &PermittivityMap,
        cond: &LambdaConditioning<F>,
    ) -> Result<ComplexField> {
        let eps_norm = self.normalize_eps(eps)?;
        self.pred_to_field(&self.infer(&eps_norm, cond))
    }
}

#[cfg(test)]
mod tests;
