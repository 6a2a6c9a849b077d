//! Deterministic solvers for the limiting systems: pure Smoluchowski coagulation,
//! regime II (coagulation plus random gel burns), the critical constrained system
//! of regime III, and the subcritical system of regime IV.
//!
//! All systems are truncated at a size `K`. The pure system lets mass leave
//! through `K` into the gel. The critical system routes every coagulation whose
//! product exceeds `K` back into singletons, which is how the burning flux
//! `φ_K = Σ_{k,l≤K, k+l>K} ((k+l)/2) v_k v_l` is defined. The subcritical system
//! does the same: a cluster past `K` is gel, and gel burns at once when `λ > 0`.
//!
//! Time stepping is fixed-step fourth order. Size `k` relaxes at rate `k`, so
//! classical RK4 needs `dt ≲ 2.8/K`. The default is a linearly implicit
//! Rosenbrock method instead: the Jacobian is lower triangular in `k` apart from
//! the `v_1` row, so each linear solve is a forward substitution done with an
//! online FFT convolution, and the step size is limited by accuracy alone.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::mcsim::rng_from_seed;
use crate::model::{record_times, EvolutionTrace, Regime, RegimeSpec, Sample, SizeDistribution};
use crate::scalar::Scalar;

/// Values above `-NEGATIVE_CLAMP` are clamped to zero after a step; anything lower is an error.
pub const NEGATIVE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvolutionMethod {
    /// `O(K²)` direct sum using the `l ↔ k−l` symmetry.
    Direct,
    /// Zero-padded real FFT, `O(K log K)`.
    Fft,
    /// Direct below [`AUTO_FFT_THRESHOLD`], FFT above.
    Auto,
}

pub const AUTO_FFT_THRESHOLD: usize = 256;

/// Computes `c_m = Σ_{l=1}^{m−1} v_l v_{m−l}` for `m = 1..=K` (so `c_1 = 0`).
pub fn direct_self_convolution<S: Scalar>(v: &[S], out: &mut [S]) {
    let k_max = v.len();
    for m in 1..=k_max {
        // sizes l and m-l, with l < m-l counted twice
        let mut acc = S::zero();
        let mut l = 1;
        while 2 * l < m {
            acc += v[l - 1] * v[m - l - 1];
            l += 1;
        }
        acc += acc;
        if m % 2 == 0 {
            let h = v[m / 2 - 1];
            acc += h * h;
        }
        out[m - 1] = acc;
    }
}

struct FftPlan<S: Scalar> {
    forward: Arc<dyn RealToComplex<S>>,
    inverse: Arc<dyn ComplexToReal<S>>,
    real: Vec<S>,
    spectrum: Vec<Complex<S>>,
    scratch_fwd: Vec<Complex<S>>,
    scratch_inv: Vec<Complex<S>>,
}

/// Reusable self-convolution kernel for a fixed truncation.
pub struct Convolver<S: Scalar> {
    k_max: usize,
    fft: Option<FftPlan<S>>,
}

impl<S: Scalar> Convolver<S> {
    pub fn new(k_max: usize, method: ConvolutionMethod) -> Self {
        let use_fft = match method {
            ConvolutionMethod::Direct => false,
            ConvolutionMethod::Fft => true,
            ConvolutionMethod::Auto => k_max > AUTO_FFT_THRESHOLD,
        };
        let fft = use_fft.then(|| {
            let len = (2 * k_max).next_power_of_two();
            let mut planner = RealFftPlanner::<S>::new();
            let forward = planner.plan_fft_forward(len);
            let inverse = planner.plan_fft_inverse(len);
            FftPlan {
                real: forward.make_input_vec(),
                spectrum: forward.make_output_vec(),
                scratch_fwd: forward.make_scratch_vec(),
                scratch_inv: inverse.make_scratch_vec(),
                forward,
                inverse,
            }
        });
        Self { k_max, fft }
    }

    pub fn uses_fft(&self) -> bool {
        self.fft.is_some()
    }

    pub fn self_convolve(&mut self, v: &[S], out: &mut [S]) {
        debug_assert_eq!(v.len(), self.k_max);
        let Some(p) = self.fft.as_mut() else {
            direct_self_convolution(v, out);
            return;
        };
        let len = p.real.len();
        p.real[..self.k_max].copy_from_slice(v);
        p.real[self.k_max..].fill(S::zero());
        p.forward
            .process_with_scratch(&mut p.real, &mut p.spectrum, &mut p.scratch_fwd)
            .expect("buffer sizes match the plan");
        for z in p.spectrum.iter_mut() {
            *z = *z * *z;
        }
        // The inverse transform requires real DC and Nyquist bins.
        p.spectrum[0].im = S::zero();
        if let Some(last) = p.spectrum.last_mut() {
            last.im = S::zero();
        }
        p.inverse
            .process_with_scratch(&mut p.spectrum, &mut p.real, &mut p.scratch_inv)
            .expect("buffer sizes match the plan");
        let scale = S::of(len).recip();
        // index i holds size i+1, so the product of indices i, j lands on size i+j+2
        out[0] = S::zero();
        for m in 2..=self.k_max {
            out[m - 1] = p.real[m - 2] * scale;
        }
    }
}

/// Which truncated system a right-hand side describes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum System<S> {
    /// `v̇_k = (k/2) Σ v_l v_{k−l} − k v_k`, mass leaking past `K` becomes gel.
    Pure,
    /// `k ≥ 2` as in the pure system, `v̇_1` fixed by `Σ v̇_k = 0`.
    Critical,
    /// Pure coagulation plus lightning at rate `λ` per vertex for `k ≥ 2`; `v̇_1`
    /// fixed by `Σ v̇_k = 0`, so mass crossing `K` burns like the gel would.
    Subcritical { lambda: S },
}

/// Right-hand side evaluator with its own convolution buffers.
pub struct Rhs<S: Scalar> {
    system: System<S>,
    conv: Convolver<S>,
    c: Vec<S>,
}

impl<S: Scalar> Rhs<S> {
    pub fn new(system: System<S>, k_max: usize, method: ConvolutionMethod) -> Self {
        Self { system, conv: Convolver::new(k_max, method), c: vec![S::zero(); k_max] }
    }

    pub fn system(&self) -> System<S> {
        self.system
    }

    /// Linear loss rate of `v_k`, the diagonal of the Jacobian.
    pub fn decay(&self, k: usize) -> S {
        match self.system {
            System::Pure | System::Critical => S::of(k),
            System::Subcritical { lambda } => (S::one() + lambda) * S::of(k),
        }
    }

    /// The singleton flux alone, without the convolution.
    pub fn flux_only(&self, v: &[S]) -> S {
        match self.system {
            System::Pure => S::zero(),
            System::Critical => flux_closure(v),
            System::Subcritical { lambda } => {
                let m1: S = v.iter().enumerate().map(|(i, &x)| S::of(i + 1) * x).sum();
                lambda * (m1 - v[0]) + flux_closure(v)
            }
        }
    }

    /// Writes `v̇` into `dv`; returns the mass flux into singletons
    /// (`φ_K` for the critical system, burns plus `φ_K` for the subcritical one, 0 otherwise).
    pub fn eval(&mut self, v: &[S], dv: &mut [S]) -> S {
        self.conv.self_convolve(v, &mut self.c);
        let half = S::lit(0.5);
        match self.system {
            System::Pure => {
                for (i, d) in dv.iter_mut().enumerate() {
                    let k = S::of(i + 1);
                    *d = half * k * self.c[i] - k * v[i];
                }
                S::zero()
            }
            System::Critical => {
                let mut rest = S::zero();
                for i in 1..dv.len() {
                    let k = S::of(i + 1);
                    dv[i] = half * k * self.c[i] - k * v[i];
                    rest += dv[i];
                }
                dv[0] = -rest;
                flux_closure(v)
            }
            System::Subcritical { lambda } => {
                // Writing v̇_1 = −(1+λ) v_1 + λ Σ k v_k instead would make Σ v_k = 1
                // repelling: the deficit grows like exp(Σ k v_k · t) from round-off.
                let mut rest = S::zero();
                let mut m1 = v[0];
                for i in 1..dv.len() {
                    let k = S::of(i + 1);
                    m1 += k * v[i];
                    dv[i] = half * k * self.c[i] - (S::one() + lambda) * k * v[i];
                    rest += dv[i];
                }
                dv[0] = -rest;
                lambda * (m1 - v[0]) + flux_closure(v)
            }
        }
    }
}

/// `φ_K = Σ_{k,l≤K, k+l>K} ((k+l)/2) v_k v_l`, evaluated in `O(K)` with suffix sums.
pub fn flux_closure<S: Scalar>(v: &[S]) -> S {
    let k_max = v.len();
    // s0[j] = Σ_{l≥j+1} v_l, s1[j] = Σ_{l≥j+1} l v_l
    let mut s0 = vec![S::zero(); k_max + 1];
    let mut s1 = vec![S::zero(); k_max + 1];
    for j in (0..k_max).rev() {
        s0[j] = s0[j + 1] + v[j];
        s1[j] = s1[j + 1] + S::of(j + 1) * v[j];
    }
    let half = S::lit(0.5);
    let mut acc = S::zero();
    for k in 1..=k_max {
        let vk = v[k - 1];
        if vk == S::zero() {
            continue;
        }
        // partners l > K - k
        let j = k_max - k;
        acc += vk * half * (S::of(k) * s0[j] + s1[j]);
    }
    acc
}

/// Pure Smoluchowski right-hand side.
pub fn rhs_pure<S: Scalar>(v: &SizeDistribution<S>) -> Vec<S> {
    let mut rhs = Rhs::new(System::Pure, v.truncation(), ConvolutionMethod::Auto);
    let mut dv = vec![S::zero(); v.truncation()];
    rhs.eval(v.as_slice(), &mut dv);
    dv
}

/// Critical (regime III) right-hand side and the flux closure `φ_K`.
pub fn rhs_regime3<S: Scalar>(v: &SizeDistribution<S>) -> (Vec<S>, S) {
    let mut rhs = Rhs::new(System::Critical, v.truncation(), ConvolutionMethod::Auto);
    let mut dv = vec![S::zero(); v.truncation()];
    let phi = rhs.eval(v.as_slice(), &mut dv);
    (dv, phi)
}

/// Subcritical (regime IV) right-hand side.
pub fn rhs_regime4<S: Scalar>(v: &SizeDistribution<S>, lambda: S) -> Vec<S> {
    let mut rhs = Rhs::new(System::Subcritical { lambda }, v.truncation(), ConvolutionMethod::Auto);
    let mut dv = vec![S::zero(); v.truncation()];
    rhs.eval(v.as_slice(), &mut dv);
    dv
}

/// `T_gel = 1 / Σ k v_k(0)`.
pub fn gelation_time<S: Scalar>(v0: &SizeDistribution<S>) -> Result<S> {
    let m1 = v0.m1();
    if !(m1 > S::zero()) {
        return Err(Error::UndefinedGelation);
    }
    Ok(m1.recip())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    /// Classical RK4; stable only for `dt · K ≲ 2.8`.
    Rk4,
    /// Shampine's four-stage linearly implicit Rosenbrock method: fourth order,
    /// A-stable, with the exact Jacobian. The default.
    Rosenbrock4,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub integrator: Integrator,
    pub convolution: ConvolutionMethod,
    /// Negative values above `-negative_clamp` are zeroed after each step.
    pub negative_clamp: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            integrator: Integrator::Rosenbrock4,
            convolution: ConvolutionMethod::Auto,
            negative_clamp: NEGATIVE_CLAMP,
        }
    }
}

/// Segments at or below this length are solved by direct substitution.
const SOLVE_BASE: usize = 64;

struct SegmentKernel<S: Scalar> {
    forward: Arc<dyn RealToComplex<S>>,
    inverse: Arc<dyn ComplexToReal<S>>,
    /// Spectrum of `v_1..v_{n−1}` zero-padded to the transform length.
    v_hat: Vec<Complex<S>>,
    generation: u64,
    buf: Vec<S>,
    spectrum: Vec<Complex<S>>,
    scratch_fwd: Vec<Complex<S>>,
    scratch_inv: Vec<Complex<S>>,
}

/// Solver for `(σ + d_k) x_k − k Σ_{j<k} v_{k−j} x_j = r_k`, the lower-triangular
/// part of `σ I − J` for every system here.
///
/// Forward substitution needs the convolution of `x` with `v` while `x` is still
/// being produced, so the solve splits the index range in halves: the left half is
/// solved first, its whole contribution to the right half is added with one FFT,
/// then the right half is solved. That costs `O(K log² K)`.
struct TriangularSolver<S: Scalar> {
    k_max: usize,
    planner: RealFftPlanner<S>,
    kernels: HashMap<usize, SegmentKernel<S>>,
    generation: u64,
    v: Vec<S>,
    diag: Vec<S>,
    acc: Vec<S>,
    x: Vec<S>,
}

impl<S: Scalar> TriangularSolver<S> {
    fn new(k_max: usize) -> Self {
        let z = vec![S::zero(); k_max + 1];
        Self {
            k_max,
            planner: RealFftPlanner::new(),
            kernels: HashMap::new(),
            generation: 0,
            v: z.clone(),
            diag: z.clone(),
            acc: z.clone(),
            x: z,
        }
    }

    /// Installs a new matrix; `v` and `diag` are 0-based over sizes `1..=K`.
    fn set_matrix(&mut self, v: &[S], diag: &[S]) {
        self.v[1..].copy_from_slice(v);
        self.diag[1..].copy_from_slice(diag);
        self.generation += 1;
    }

    fn solve(&mut self, rhs: &[S], x: &mut [S]) {
        // 1-based scratch: acc[k] collects Σ_{j<k} v_{k−j} x_j
        self.acc.fill(S::zero());
        let mut xs = std::mem::take(&mut self.x);
        self.solve_range(1, self.k_max + 1, rhs, &mut xs);
        x.copy_from_slice(&xs[1..]);
        self.x = xs;
    }

    fn solve_range(&mut self, lo: usize, hi: usize, rhs: &[S], x: &mut [S]) {
        let n = hi - lo;
        if n <= SOLVE_BASE {
            for k in lo..hi {
                let mut a = self.acc[k];
                for j in lo..k {
                    a += self.v[k - j] * x[j];
                }
                x[k] = (rhs[k - 1] + S::of(k) * a) / self.diag[k];
            }
            return;
        }
        let mid = lo + n / 2;
        self.solve_range(lo, mid, rhs, x);
        self.add_contribution(lo, mid, hi, x);
        self.solve_range(mid, hi, rhs, x);
    }

    /// `acc[k] += Σ_{j∈[lo,mid)} x_j v_{k−j}` for `k ∈ [mid, hi)`.
    fn add_contribution(&mut self, lo: usize, mid: usize, hi: usize, x: &[S]) {
        let n = hi - lo;
        let a = mid - lo;
        // Only products landing at or beyond `mid` are needed, and a cyclic
        // transform of length ≥ n−1 wraps just the ones below it.
        let len = (n - 1).next_power_of_two();
        let generation = self.generation;
        let entry = self.kernels.entry(n).or_insert_with(|| {
            let forward = self.planner.plan_fft_forward(len);
            let inverse = self.planner.plan_fft_inverse(len);
            SegmentKernel {
                v_hat: forward.make_output_vec(),
                buf: forward.make_input_vec(),
                spectrum: forward.make_output_vec(),
                scratch_fwd: forward.make_scratch_vec(),
                scratch_inv: inverse.make_scratch_vec(),
                generation: 0,
                forward,
                inverse,
            }
        });
        if entry.generation != generation {
            entry.buf.fill(S::zero());
            entry.buf[..n - 1].copy_from_slice(&self.v[1..n]);
            entry
                .forward
                .process_with_scratch(&mut entry.buf, &mut entry.v_hat, &mut entry.scratch_fwd)
                .expect("plan length");
            entry.generation = generation;
        }
        entry.buf.fill(S::zero());
        entry.buf[..a].copy_from_slice(&x[lo..mid]);
        entry
            .forward
            .process_with_scratch(&mut entry.buf, &mut entry.spectrum, &mut entry.scratch_fwd)
            .expect("plan length");
        for (z, w) in entry.spectrum.iter_mut().zip(&entry.v_hat) {
            *z *= *w;
        }
        entry.spectrum[0].im = S::zero();
        if let Some(last) = entry.spectrum.last_mut() {
            last.im = S::zero();
        }
        entry
            .inverse
            .process_with_scratch(&mut entry.spectrum, &mut entry.buf, &mut entry.scratch_inv)
            .expect("plan length");
        let scale = S::of(len).recip();
        // buf[p] pairs x_{lo+i} with v_{q+1} where i + q = p, landing on size lo + p + 1
        for k in mid..hi {
            self.acc[k] += entry.buf[k - lo - 1] * scale;
        }
    }
}

/// Fixed-step integrator state for one system.
pub struct Stepper<S: Scalar> {
    rhs: Rhs<S>,
    opts: SolverOptions,
    solver: Option<TriangularSolver<S>>,
    k1: Vec<S>,
    k2: Vec<S>,
    k3: Vec<S>,
    k4: Vec<S>,
    a: Vec<S>,
    /// Dense first row of `σ I − J` minus its triangular part, and `L⁻¹ e_1`.
    row: Vec<S>,
    z: Vec<S>,
    clamped: u64,
}

// Shampine (1982) coefficients.
const ROS_GAMMA: f64 = 0.5;
const ROS_A21: f64 = 2.0;
const ROS_A31: f64 = 48.0 / 25.0;
const ROS_A32: f64 = 6.0 / 25.0;
const ROS_C21: f64 = -8.0;
const ROS_C31: f64 = 372.0 / 25.0;
const ROS_C32: f64 = 12.0 / 5.0;
const ROS_C41: f64 = -112.0 / 125.0;
const ROS_C42: f64 = -54.0 / 125.0;
const ROS_C43: f64 = -2.0 / 5.0;
const ROS_B: [f64; 4] = [19.0 / 9.0, 0.5, 25.0 / 108.0, 125.0 / 108.0];

impl<S: Scalar> Stepper<S> {
    pub fn new(system: System<S>, k_max: usize, opts: SolverOptions) -> Self {
        let z = vec![S::zero(); k_max];
        Self {
            rhs: Rhs::new(system, k_max, opts.convolution),
            solver: (opts.integrator == Integrator::Rosenbrock4).then(|| TriangularSolver::new(k_max)),
            opts,
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            a: z.clone(),
            row: z.clone(),
            z,
            clamped: 0,
        }
    }

    /// Number of entries zeroed by the negative-value clamp so far.
    pub fn clamped(&self) -> u64 {
        self.clamped
    }

    /// Singleton flux at `v`.
    pub fn flux(&self, v: &[S]) -> S {
        self.rhs.flux_only(v)
    }

    /// Builds `σ I − J(v)` as a triangular part plus a dense first row.
    fn prepare_jacobian(&mut self, v: &[S], sigma: S) {
        let n = v.len();
        let system = self.rhs.system();
        let mut diag = std::mem::take(&mut self.a);
        for (i, d) in diag.iter_mut().enumerate() {
            *d = sigma + self.rhs.decay(i + 1);
        }
        self.row.fill(S::zero());
        match system {
            System::Pure => {}
            System::Critical | System::Subcritical { .. } => {
                // v̇_1 = −Σ_{k≥2} v̇_k, so J_1j = −Σ_{k≥2} J_kj
                // = 1{j≥2} d_j − Σ_{m=1}^{K−j} (j+m) v_m with d_j the linear loss rate
                let mut p0 = vec![S::zero(); n + 1];
                let mut p1 = vec![S::zero(); n + 1];
                for m in 1..=n {
                    p0[m] = p0[m - 1] + v[m - 1];
                    p1[m] = p1[m - 1] + S::of(m) * v[m - 1];
                }
                for j in 1..=n {
                    let s = S::of(j) * p0[n - j] + p1[n - j];
                    let own = if j >= 2 { self.rhs.decay(j) } else { S::zero() };
                    self.row[j - 1] = s - own;
                }
                diag[0] = sigma;
            }
        }
        let solver = self.solver.as_mut().expect("implicit stepper");
        solver.set_matrix(v, &diag);
        self.a = diag;
        if self.row.iter().any(|w| *w != S::zero()) {
            let mut e1 = vec![S::zero(); n];
            e1[0] = S::one();
            solver.solve(&e1, &mut self.z);
        }
    }

    /// Solves `(σ I − J) x = r` in place of `x`.
    fn linear_solve(&mut self, r: &[S], x: &mut [S]) {
        let solver = self.solver.as_mut().expect("implicit stepper");
        solver.solve(r, x);
        if self.row.iter().all(|w| *w == S::zero()) {
            return;
        }
        // Sherman-Morrison for the dense first row
        let wy: S = self.row.iter().zip(x.iter()).map(|(&w, &y)| w * y).sum();
        let wz: S = self.row.iter().zip(&self.z).map(|(&w, &z)| w * z).sum();
        let c = wy / (S::one() + wz);
        for (xi, &zi) in x.iter_mut().zip(&self.z) {
            *xi -= c * zi;
        }
    }

    /// Advances `v` by `h` in place; returns the step integral of the singleton flux.
    pub fn step(&mut self, v: &mut [S], h: S, t: f64) -> Result<S> {
        let six = S::lit(6.0);
        let two = S::lit(2.0);
        let half_h = h * S::lit(0.5);
        let n = v.len();
        let flux_integral = match self.opts.integrator {
            Integrator::Rk4 => {
                let f1 = self.rhs.eval(v, &mut self.k1);
                for i in 0..n {
                    self.a[i] = v[i] + half_h * self.k1[i];
                }
                let f2 = self.rhs.eval(&self.a, &mut self.k2);
                for i in 0..n {
                    self.a[i] = v[i] + half_h * self.k2[i];
                }
                let f3 = self.rhs.eval(&self.a, &mut self.k3);
                for i in 0..n {
                    self.a[i] = v[i] + h * self.k3[i];
                }
                let f4 = self.rhs.eval(&self.a, &mut self.k4);
                for i in 0..n {
                    v[i] += h / six * (self.k1[i] + two * (self.k2[i] + self.k3[i]) + self.k4[i]);
                }
                h / six * (f1 + two * (f2 + f3) + f4)
            }
            Integrator::Rosenbrock4 => {
                let c = |x: f64| S::lit(x);
                let hinv = h.recip();
                self.prepare_jacobian(v, (c(ROS_GAMMA) * h).recip());
                let mut g1 = vec![S::zero(); n];
                let mut g2 = vec![S::zero(); n];
                let mut g3 = vec![S::zero(); n];
                let mut g4 = vec![S::zero(); n];
                let mut r = vec![S::zero(); n];
                let mut y = vec![S::zero(); n];

                let phi0 = self.rhs.eval(v, &mut r);
                self.linear_solve(&r, &mut g1);
                for i in 0..n {
                    y[i] = v[i] + c(ROS_A21) * g1[i];
                }
                self.rhs.eval(&y, &mut r);
                for i in 0..n {
                    r[i] += c(ROS_C21) * g1[i] * hinv;
                }
                self.linear_solve(&r, &mut g2);
                for i in 0..n {
                    y[i] = v[i] + c(ROS_A31) * g1[i] + c(ROS_A32) * g2[i];
                }
                self.rhs.eval(&y, &mut self.k3);
                for i in 0..n {
                    r[i] = self.k3[i] + (c(ROS_C31) * g1[i] + c(ROS_C32) * g2[i]) * hinv;
                }
                self.linear_solve(&r, &mut g3);
                for i in 0..n {
                    r[i] = self.k3[i] + (c(ROS_C41) * g1[i] + c(ROS_C42) * g2[i] + c(ROS_C43) * g3[i]) * hinv;
                }
                self.linear_solve(&r, &mut g4);
                for i in 0..n {
                    v[i] += c(ROS_B[0]) * g1[i] + c(ROS_B[1]) * g2[i] + c(ROS_B[2]) * g3[i] + c(ROS_B[3]) * g4[i];
                }
                let phi1 = self.rhs.flux_only(v);
                half_h * (phi0 + phi1)
            }
        };
        self.enforce_sign(v, t)?;
        Ok(flux_integral)
    }

    fn enforce_sign(&mut self, v: &mut [S], t: f64) -> Result<()> {
        let floor = S::lit(-self.opts.negative_clamp.max(16.0 * S::epsilon().as_f64()));
        for (i, x) in v.iter_mut().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite { t });
            }
            if *x < S::zero() {
                if *x < floor {
                    return Err(Error::NegativeValue { t, k: i + 1, value: x.as_f64() });
                }
                if self.clamped == 0 {
                    log::debug!("clamping v_{} = {:e} to zero at t = {t}", i + 1, x.as_f64());
                }
                self.clamped += 1;
                *x = S::zero();
            }
        }
        Ok(())
    }
}

fn system_for<S: Scalar>(spec: &RegimeSpec) -> Result<System<S>> {
    Ok(match spec.regime {
        Regime::PureSmoluchowski | Regime::RegimeII => System::Pure,
        Regime::RegimeIII => System::Critical,
        Regime::RegimeIV => System::Subcritical {
            lambda: S::lit(spec.lambda_value().expect("validated")),
        },
        Regime::FiniteN => return Err(Error::config("regime", "finite-n runs belong to the simulator")),
    })
}

fn initial_vector<S: Scalar>(v0: &SizeDistribution<S>, k_max: usize) -> Result<Vec<S>> {
    if v0.support_max() > k_max {
        return Err(Error::config("K", format!("initial condition has mass at k = {} beyond K = {k_max}", v0.support_max())));
    }
    let mut v = v0.as_slice().to_vec();
    v.resize(k_max, S::zero());
    Ok(v)
}

fn snapshot<S: Scalar>(system: System<S>, v: &[S], t: f64, burnt: S, phi: Option<S>) -> Result<Sample<S>> {
    let dist = match system {
        System::Pure => SizeDistribution::with_gel(v.to_vec())?,
        _ => SizeDistribution::new(v.to_vec(), S::zero())?,
    };
    let max_cluster = dist.theta();
    Ok(Sample { t: S::lit(t), dist, flow: None, burnt, phi, max_cluster })
}

/// Steps of size at most `dt` that exactly cover `[t0, t1]`.
fn substeps(t0: f64, t1: f64, dt: f64) -> (usize, f64) {
    let span = t1 - t0;
    let m = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    (m, span / m as f64)
}

/// Integrates a deterministic regime from `v0` over `[0, T]`.
///
/// Regime II draws its gel burns from an RNG seeded with `spec.seed`.
pub fn integrate<S: Scalar>(
    spec: &RegimeSpec,
    v0: &SizeDistribution<S>,
    opts: SolverOptions,
) -> Result<EvolutionTrace<S>> {
    integrate_on_grid(spec, v0, opts, &record_times(spec.horizon, spec.record_every))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("checkpoints", "record times must start at 0 and increase strictly"));
    }
    Ok(())
}

/// Like [`integrate`], recording at the given times (starting at 0) instead of
/// the spec's regular grid. Each interval is covered by equal steps of at most `dt`.
pub fn integrate_on_grid<S: Scalar>(
    spec: &RegimeSpec,
    v0: &SizeDistribution<S>,
    opts: SolverOptions,
    grid: &[f64],
) -> Result<EvolutionTrace<S>> {
    spec.validate()?;
    check_grid(grid)?;
    if spec.regime == Regime::RegimeII {
        let mut rng = rng_from_seed(spec.seed);
        return regime2_on_grid(spec, v0, &mut rng, opts, grid);
    }
    let system = system_for::<S>(spec)?;
    let mut v = initial_vector(v0, spec.k_max)?;
    let mut stepper = Stepper::new(system, spec.k_max, opts);
    let report_phi = !matches!(system, System::Pure);

    let mut trace = EvolutionTrace::new(spec.clone());
    let mut burnt = S::zero();
    let phi0 = stepper.flux(&v);
    trace.push(snapshot(system, &v, 0.0, burnt, report_phi.then_some(phi0))?)?;
    for w in grid.windows(2) {
        let (m, h) = substeps(w[0], w[1], spec.dt);
        let hs = S::lit(h);
        for j in 0..m {
            let t = w[0] + h * j as f64;
            burnt += stepper.step(&mut v, hs, t + h)?;
        }
        let phi = stepper.flux(&v);
        trace.push(snapshot(system, &v, w[1], burnt, report_phi.then_some(phi))?)?;
    }
    Ok(trace)
}

/// Regime II: pure coagulation between gel burns; at each step the gel burns
/// with probability `λ θ dt`, and a burn moves all gel mass into singletons.
pub fn simulate_regime2<S: Scalar, R: Rng + ?Sized>(
    spec: &RegimeSpec,
    v0: &SizeDistribution<S>,
    rng: &mut R,
    opts: SolverOptions,
) -> Result<EvolutionTrace<S>> {
    regime2_on_grid(spec, v0, rng, opts, &record_times(spec.horizon, spec.record_every))
}

fn regime2_on_grid<S: Scalar, R: Rng + ?Sized>(
    spec: &RegimeSpec,
    v0: &SizeDistribution<S>,
    rng: &mut R,
    opts: SolverOptions,
    grid: &[f64],
) -> Result<EvolutionTrace<S>> {
    check_grid(grid)?;
    if spec.regime != Regime::RegimeII {
        return Err(Error::config("regime", "regime II simulation needs a regime II spec"));
    }
    spec.validate()?;
    let lambda = spec.lambda_value().expect("validated");
    let mut v = initial_vector(v0, spec.k_max)?;
    let mut stepper = Stepper::new(System::Pure, spec.k_max, opts);
    let gel = |v: &[S]| (S::one() - v.iter().copied().sum::<S>()).max(S::zero());

    let mut trace = EvolutionTrace::new(spec.clone());
    let mut burnt = S::zero();
    let mut jumps_in_window = S::zero();
    trace.push(snapshot(System::Pure, &v, 0.0, burnt, Some(S::zero()))?)?;
    for w in grid.windows(2) {
        let (m, h) = substeps(w[0], w[1], spec.dt);
        for j in 0..m {
            let t = w[0] + h * j as f64;
            let theta_before = gel(&v).as_f64();
            stepper.step(&mut v, S::lit(h), t + h)?;
            if rng.random::<f64>() < lambda * theta_before * h {
                let theta = gel(&v);
                v[0] += theta;
                burnt += theta;
                jumps_in_window += theta;
            }
        }
        let rate = jumps_in_window / S::lit(w[1] - w[0]);
        jumps_in_window = S::zero();
        trace.push(snapshot(System::Pure, &v, w[1], burnt, Some(rate))?)?;
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiMethod {
    FluxClosure,
    TailFit,
}

/// Burning flux over time.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiSeries<S> {
    pub times: Vec<S>,
    pub values: Vec<S>,
    pub method: PhiMethod,
}

impl<S: Scalar> PhiSeries<S> {
    /// Flux-closure values recorded in a regime III trace.
    pub fn from_flux(trace: &EvolutionTrace<S>) -> Self {
        let (times, values) = trace
            .samples()
            .iter()
            .filter_map(|s| s.phi.map(|p| (s.t, p)))
            .unzip();
        Self { times, values, method: PhiMethod::FluxClosure }
    }

    /// Pinned-exponent tail-fit estimate `π A²/2` at every sample; zero where the tail vanishes.
    pub fn from_tail_fit(trace: &EvolutionTrace<S>, window: (usize, usize)) -> Self {
        let (times, values) = trace
            .samples()
            .iter()
            .map(|s| {
                let phi = crate::genfunc::fit_tail(&s.dist, window.0, window.1, crate::genfunc::TailMode::PinnedHalf)
                    .ok()
                    .and_then(|f| f.phi)
                    .unwrap_or_else(S::zero);
                (s.t, phi)
            })
            .unzip();
        Self { times, values, method: PhiMethod::TailFit }
    }

    /// Largest `|φ(t_i) − φ(t_j)| / |t_i − t_j|` over consecutive samples in `[from, to]`.
    pub fn max_lipschitz_quotient(&self, from: S, to: S) -> S {
        let pts: Vec<(S, S)> = self
            .times
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .filter(|(t, _)| *t >= from && *t <= to)
            .collect();
        pts.windows(2)
            .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
            .fold(S::zero(), S::max)
    }

    /// First time the series exceeds `level`.
    pub fn first_crossing(&self, level: S) -> Option<S> {
        self.times.iter().zip(&self.values).find(|(_, &p)| p > level).map(|(&t, _)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfunc::{borel, borel_distribution, stationary_critical_distribution, stationary_subcritical_distribution};

    /// Time derivative of the Borel law, differentiated by hand:
    /// `d/dt v_k = v_k · ((k−1)/t − k)`.
    fn borel_dot(t: f64, k: usize) -> f64 {
        let v: f64 = borel(t, k);
        if k == 1 {
            return -v;
        }
        v * ((k as f64 - 1.0) / t - k as f64)
    }

    #[test]
    fn pure_rhs_on_monodisperse() {
        let dv = rhs_pure(&SizeDistribution::<f64>::monodisperse(5));
        assert_eq!(dv, vec![-1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_vector_has_zero_derivative() {
        let z = SizeDistribution::new(vec![0.0f64; 6], 0.0).unwrap();
        assert!(rhs_pure(&z).iter().all(|&x| x == 0.0));
        assert!(rhs_regime4(&z, 0.7).iter().all(|&x| x == 0.0));
        let (d3, phi) = rhs_regime3(&z);
        assert!(d3.iter().all(|&x| x == 0.0));
        assert_eq!(phi, 0.0);
    }

    #[test]
    fn subcritical_rhs_on_monodisperse() {
        let dv = rhs_regime4(&SizeDistribution::<f64>::monodisperse(4), 1.0);
        assert_eq!(dv[0], -1.0);
        assert_eq!(dv[1], 1.0);
    }

    #[test]
    fn critical_rhs_before_gelation_is_pure() {
        let v = SizeDistribution::<f64>::monodisperse(50);
        let (d3, phi) = rhs_regime3(&v);
        assert_eq!(phi, 0.0);
        assert_eq!(d3, rhs_pure(&v));
    }

    #[test]
    fn borel_solves_pure_system() {
        for t in [0.2, 0.5, 0.8, 1.0] {
            let v = borel_distribution(t, 400);
            let dv = rhs_pure(&v);
            for k in 1..=20 {
                assert!((dv[k - 1] - borel_dot(t, k)).abs() <= 1e-8, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn fft_and_direct_convolutions_agree() {
        let v: Vec<f64> = (1..=700).map(|k| borel(0.9, k)).collect();
        let mut a = vec![0.0; 700];
        let mut b = vec![0.0; 700];
        Convolver::new(700, ConvolutionMethod::Direct).self_convolve(&v, &mut a);
        let mut fft = Convolver::new(700, ConvolutionMethod::Fft);
        assert!(fft.uses_fft());
        fft.self_convolve(&v, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15, "{x} {y}");
        }
    }

    #[test]
    fn flux_closure_matches_double_sum() {
        let v: Vec<f64> = (1..=60).map(|k| 1.0 / (k * k) as f64).collect();
        let mut brute = 0.0;
        for k in 1..=60 {
            for l in 1..=60 {
                if k + l > 60 {
                    brute += 0.5 * (k + l) as f64 * v[k - 1] * v[l - 1];
                }
            }
        }
        assert!((flux_closure(&v) - brute).abs() < 1e-13 * brute);
    }

    #[test]
    fn critical_rhs_conserves_mass() {
        let v = stationary_critical_distribution::<f64>(3000);
        let (dv, _) = rhs_regime3(&v);
        let s: f64 = dv.iter().sum();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn subcritical_fixed_point() {
        let v = stationary_subcritical_distribution(200, 1.0f64);
        let r = rhs_regime4(&v, 1.0);
        let worst = r.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(worst <= 1e-8, "{worst}");
    }

    #[test]
    fn subcritical_mass_is_not_repelled() {
        let spec = RegimeSpec::ode(Regime::RegimeIV, 120, 60.0, 0.01, 60.0).with_lambda(1.0);
        let tr = integrate(&spec, &SizeDistribution::<f64>::monodisperse(120), SolverOptions::default()).unwrap();
        let last = tr.last().unwrap();
        assert!((last.dist.total() - 1.0).abs() < 1e-12);
        assert!((last.dist.get(1) - 0.75).abs() < 1e-10, "{}", last.dist.get(1));
    }

    #[test]
    fn gelation_times() {
        assert_eq!(gelation_time(&SizeDistribution::<f64>::monodisperse(3)).unwrap(), 1.0);
        let half = SizeDistribution::new(vec![0.5f64, 0.5], 0.0).unwrap();
        assert!((gelation_time(&half).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let pairs = SizeDistribution::new(vec![0.0f64, 1.0], 0.0).unwrap();
        assert_eq!(gelation_time(&pairs).unwrap(), 0.5);
        let empty = SizeDistribution::new(vec![0.0f64; 3], 0.0).unwrap();
        assert!(matches!(gelation_time(&empty), Err(Error::UndefinedGelation)));
    }

    fn borel_error(dt: f64, integrator: Integrator) -> f64 {
        let spec = RegimeSpec::ode(Regime::PureSmoluchowski, 200, 0.5, dt, 0.5);
        let opts = SolverOptions { integrator, ..Default::default() };
        let tr = integrate(&spec, &SizeDistribution::<f64>::monodisperse(200), opts).unwrap();
        let v = &tr.last().unwrap().dist;
        (1..=30).map(|k| (v.get(k) - borel(0.5, k)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn fourth_order_convergence() {
        for integrator in [Integrator::Rk4, Integrator::Rosenbrock4] {
            let e1 = borel_error(0.05, integrator);
            let e2 = borel_error(0.025, integrator);
            let ratio = e1 / e2;
            assert!((12.0..20.0).contains(&ratio), "{integrator:?}: {e1:e} / {e2:e} = {ratio}");
        }
    }

    #[test]
    fn regime3_matches_pure_before_gelation() {
        let v0 = SizeDistribution::<f64>::monodisperse(2000);
        let pure = integrate(&RegimeSpec::ode(Regime::PureSmoluchowski, 2000, 0.9, 1e-3, 0.1), &v0, SolverOptions::default()).unwrap();
        let crit = integrate(&RegimeSpec::ode(Regime::RegimeIII, 2000, 0.9, 1e-3, 0.1), &v0, SolverOptions::default()).unwrap();
        for (a, b) in pure.samples().iter().zip(crit.samples()) {
            for k in 1..=2000 {
                assert!((a.dist.get(k) - b.dist.get(k)).abs() <= 1e-6, "t={} k={k} {} {}", a.t, a.dist.get(k), b.dist.get(k));
            }
        }
    }

    #[test]
    fn regime2_without_gel_is_pure() {
        let v0 = SizeDistribution::<f64>::monodisperse(300);
        let spec = RegimeSpec::ode(Regime::RegimeII, 300, 0.8, 1e-3, 0.2).with_lambda(2.0);
        let ii = integrate(&spec, &v0, SolverOptions::default()).unwrap();
        let pure = integrate(&RegimeSpec::ode(Regime::PureSmoluchowski, 300, 0.8, 1e-3, 0.2), &v0, SolverOptions::default()).unwrap();
        for (a, b) in ii.samples().iter().zip(pure.samples()) {
            assert_eq!(a.dist, b.dist);
            assert_eq!(a.burnt, 0.0);
        }
    }

    #[test]
    fn regime2_jumps_restore_mass() {
        let v0 = SizeDistribution::<f64>::monodisperse(400);
        let spec = RegimeSpec::ode(Regime::RegimeII, 400, 6.0, 1e-3, 1e-3).with_lambda(5.0).with_seed(11);
        let tr = integrate(&spec, &v0, SolverOptions::default()).unwrap();
        let mut jumps = 0;
        for w in tr.samples().windows(2) {
            if w[1].burnt > w[0].burnt {
                jumps += 1;
                assert!(w[1].dist.theta() < 1e-6, "gel left after a jump: {}", w[1].dist.theta());
            }
        }
        assert!(jumps > 0);
    }

    #[test]
    fn regime2_small_lambda_reaches_er_gel() {
        let v0 = SizeDistribution::<f64>::monodisperse(2000);
        let spec = RegimeSpec::ode(Regime::RegimeII, 2000, 2.0, 1e-3, 0.5).with_lambda(1e-9).with_seed(1);
        let tr = integrate(&spec, &v0, SolverOptions::default()).unwrap();
        let theta = tr.last().unwrap().dist.theta();
        assert!((theta - 0.79681).abs() < 1e-3, "{theta}");
    }

    #[test]
    fn negative_values_are_rejected_when_large() {
        // Classical RK4 far outside its stability region goes negative fast.
        let spec = RegimeSpec::ode(Regime::PureSmoluchowski, 400, 0.5, 0.1, 0.5);
        let opts = SolverOptions { integrator: Integrator::Rk4, ..Default::default() };
        let err = integrate(&spec, &SizeDistribution::<f64>::monodisperse(400), opts).unwrap_err();
        assert!(matches!(err, Error::NegativeValue { .. } | Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn single_precision_runs() {
        let spec = RegimeSpec::ode(Regime::PureSmoluchowski, 64, 0.5, 0.01, 0.25);
        let tr = integrate(&spec, &SizeDistribution::<f32>::monodisperse(64), SolverOptions::default()).unwrap();
        let v = &tr.last().unwrap().dist;
        assert!((v.get(1) - (-0.5f32).exp()).abs() < 1e-5);
        assert!((v.get(2) - borel(0.5f32, 2)).abs() < 1e-5);
    }
}
