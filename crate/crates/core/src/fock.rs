//! Single-mode Fock-space primitives: truncated state vectors, density
//! matrices, Wigner functions and cat/coherent-state fitting.

use std::f64::consts::{FRAC_2_PI, FRAC_PI_2, PI};
use std::io::Write;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest truncated-norm loss tolerated when building coherent or cat states.
pub const MAX_TRUNCATION_LOSS: f64 = 1e-6;

/// Reconstructed density matrices with a trace defect below this are
/// renormalized; larger defects are rejected.
pub const TRACE_TOLERANCE: f64 = 0.02;

const HERMITIAN_TOLERANCE: f64 = 1e-8;

/// Truncated single-mode state; `amps[n]` is the coefficient of `|n>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FockVector {
    amps: Vec<C64>,
}

impl FockVector {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::InvalidParameter("empty Fock vector".into()));
        }
        Ok(Self { amps })
    }

    pub fn zeros(cutoff: usize) -> Self {
        Self { amps: vec![C64::new(0.0, 0.0); cutoff + 1] }
    }

    pub fn basis(n: usize, cutoff: usize) -> Self {
        let mut v = Self::zeros(cutoff.max(n));
        v.amps[n] = C64::new(1.0, 0.0);
        v
    }

    pub fn cutoff(&self) -> usize {
        self.amps.len() - 1
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalize(&mut self) {
        let norm = self.norm_sqr().sqrt();
        if norm > 0.0 {
            self.amps.iter_mut().for_each(|a| *a /= norm);
        }
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm_sqr() - 1.0).abs() <= 1e-12
    }

    /// `a|psi>`; the top component becomes zero.
    pub fn annihilate(&self) -> Self {
        let n = self.amps.len();
        let mut out = vec![C64::new(0.0, 0.0); n];
        for k in 0..n - 1 {
            out[k] = self.amps[k + 1] * ((k + 1) as f64).sqrt();
        }
        Self { amps: out }
    }

    /// `a^dag|psi>` with the component pushed beyond the cutoff dropped.
    pub fn create(&self) -> Self {
        let n = self.amps.len();
        let mut out = vec![C64::new(0.0, 0.0); n];
        for k in 1..n {
            out[k] = self.amps[k - 1] * (k as f64).sqrt();
        }
        Self { amps: out }
    }

    /// `<self|other>`, treating missing components as zero.
    pub fn inner(&self, other: &Self) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.amps.iter().enumerate().map(|(n, a)| n as f64 * a.norm_sqr()).sum::<f64>()
            / self.norm_sqr()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

/// Untruncated coherent-state coefficients up to `cutoff`, together with the
/// norm that lies beyond it.
fn coherent_coefficients(alpha: C64, cutoff: usize) -> (Vec<C64>, f64) {
    let mut amps = Vec::with_capacity(cutoff + 1);
    let mut c = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    amps.push(c);
    for n in 1..=cutoff {
        c = c * alpha / (n as f64).sqrt();
        amps.push(c);
    }
    // tail, summed explicitly so tiny losses are not lost to cancellation
    let mut loss = 0.0;
    let mut n = cutoff;
    loop {
        n += 1;
        c = c * alpha / (n as f64).sqrt();
        let p = c.norm_sqr();
        loss += p;
        if (n as f64) > alpha.norm_sqr() && (p < 1e-30 || p < loss * 1e-17) {
            break;
        }
    }
    (amps, loss)
}

pub fn coherent_state(alpha: C64, cutoff: usize) -> Result<FockVector> {
    let (amps, loss) = coherent_coefficients(alpha, cutoff);
    if loss > MAX_TRUNCATION_LOSS {
        return Err(Error::CutoffTooSmall { cutoff, magnitude: alpha.norm(), loss });
    }
    let mut v = FockVector { amps };
    v.normalize();
    Ok(v)
}

/// `(|beta e^{i theta}> ± |-beta e^{i theta}>) / sqrt(2(1 ± e^{-2 beta^2}))`,
/// renormalized over the truncated space.
pub fn cat_state(beta: f64, theta: f64, parity: Parity, cutoff: usize) -> Result<FockVector> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("cat amplitude must be >= 0, got {beta}")));
    }
    if parity == Parity::Odd && beta == 0.0 {
        return Err(Error::InvalidParameter("odd cat requires beta > 0".into()));
    }
    let alpha = C64::from_polar(beta, theta);
    let (amps, loss) = coherent_coefficients(alpha, cutoff);
    if loss > MAX_TRUNCATION_LOSS {
        return Err(Error::CutoffTooSmall { cutoff, magnitude: beta, loss });
    }
    let mut v = FockVector { amps: cat_from_coherent(&amps, beta, parity) };
    v.normalize();
    Ok(v)
}

fn cat_from_coherent(coherent: &[C64], beta: f64, parity: Parity) -> Vec<C64> {
    let overlap = (-2.0 * beta * beta).exp();
    let (keep, norm) = match parity {
        Parity::Even => (0, (2.0 * (1.0 + overlap)).sqrt()),
        Parity::Odd => (1, (2.0 * (1.0 - overlap)).sqrt()),
    };
    // |alpha> ± |-alpha> doubles the matching-parity terms and cancels the rest
    coherent
        .iter()
        .enumerate()
        .map(|(n, &c)| if n % 2 == keep { 2.0 * c / norm } else { C64::new(0.0, 0.0) })
        .collect()
}

/// Even cat at a cutoff large enough that truncation is below 1e-15.
pub fn ideal_cat(beta: f64, theta: f64) -> FockVector {
    let beta = beta.abs();
    let mut cutoff = 8 + (beta * beta).ceil() as usize;
    loop {
        let (amps, loss) = coherent_coefficients(C64::from_polar(beta, theta), cutoff);
        if loss < 1e-15 {
            return FockVector { amps: cat_from_coherent(&amps, beta, Parity::Even) };
        }
        cutoff += 4;
    }
}

fn ideal_coherent(alpha: C64) -> FockVector {
    let mut cutoff = 8 + alpha.norm_sqr().ceil() as usize;
    loop {
        let (amps, loss) = coherent_coefficients(alpha, cutoff);
        if loss < 1e-15 {
            return FockVector { amps };
        }
        cutoff += 4;
    }
}

/// Row-major `(cutoff+1) x (cutoff+1)` matrix, entry `(m, n)` = `<m|rho|n>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix {
    cutoff: usize,
    elements: Vec<C64>,
}

impl DensityMatrix {
    pub fn from_elements(cutoff: usize, elements: Vec<C64>) -> Result<Self> {
        if elements.len() != (cutoff + 1) * (cutoff + 1) {
            return Err(Error::InvalidParameter(format!(
                "expected {} elements for cutoff {cutoff}, got {}",
                (cutoff + 1) * (cutoff + 1),
                elements.len()
            )));
        }
        Ok(Self { cutoff, elements })
    }

    pub fn from_pure(psi: &FockVector) -> Self {
        let dim = psi.amps.len();
        let mut elements = Vec::with_capacity(dim * dim);
        for m in 0..dim {
            for n in 0..dim {
                elements.push(psi.amps[m] * psi.amps[n].conj());
            }
        }
        Self { cutoff: dim - 1, elements }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.cutoff + 1
    }

    pub fn get(&self, m: usize, n: usize) -> C64 {
        self.elements[m * self.dim() + n]
    }

    pub fn set(&mut self, m: usize, n: usize, value: C64) {
        let dim = self.dim();
        self.elements[m * dim + n] = value;
    }

    pub fn elements(&self) -> &[C64] {
        &self.elements
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|n| self.get(n, n)).sum()
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|n| self.get(n, n).re).collect()
    }

    pub fn mean_photon_number(&self) -> f64 {
        (0..self.dim()).map(|n| n as f64 * self.get(n, n).re).sum()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for m in 0..dim {
            for n in m..dim {
                worst = worst.max((self.get(m, n) - self.get(n, m).conj()).norm());
            }
        }
        worst
    }

    /// Replaces the matrix with its Hermitian part.
    pub fn symmetrize(&mut self) {
        let dim = self.dim();
        for m in 0..dim {
            for n in m..dim {
                let avg = 0.5 * (self.get(m, n) + self.get(n, m).conj());
                self.set(m, n, avg);
                self.set(n, m, avg.conj());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.elements.iter_mut().for_each(|e| *e *= factor);
    }

    pub fn padded(&self, cutoff: usize) -> Self {
        if cutoff <= self.cutoff {
            return self.clone();
        }
        let dim = cutoff + 1;
        let mut elements = vec![C64::new(0.0, 0.0); dim * dim];
        for m in 0..self.dim() {
            for n in 0..self.dim() {
                elements[m * dim + n] = self.get(m, n);
            }
        }
        Self { cutoff, elements }
    }

    fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.elements)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.to_nalgebra().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Nearest positive-semidefinite, unit-trace matrix (negative eigenvalues
    /// clipped, then renormalized).
    pub fn project_psd(&self) -> Self {
        let eig = self.to_nalgebra().symmetric_eigen();
        let mut clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let total: f64 = clipped.iter().sum();
        if total > 0.0 {
            clipped /= total;
        }
        let diag = DMatrix::from_diagonal(&clipped.map(|v| C64::new(v, 0.0)));
        let rebuilt = &eig.eigenvectors * diag * eig.eigenvectors.adjoint();
        let dim = self.dim();
        let mut elements = Vec::with_capacity(dim * dim);
        for m in 0..dim {
            for n in 0..dim {
                elements.push(rebuilt[(m, n)]);
            }
        }
        Self { cutoff: self.cutoff, elements }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "m,n,re,im")?;
        for m in 0..self.dim() {
            for n in 0..self.dim() {
                let v = self.get(m, n);
                writeln!(w, "{m},{n},{:.15e},{:.15e}", v.re, v.im)?;
            }
        }
        Ok(())
    }
}

/// Rectangular grid of Wigner-function samples. `values[i][k]` is the value at
/// `re_axis[k] + i im_axis[i]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WignerGrid {
    pub re_axis: Vec<f64>,
    pub im_axis: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl WignerGrid {
    pub fn max(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "re,im,w")?;
        for (i, &im) in self.im_axis.iter().enumerate() {
            for (k, &re) in self.re_axis.iter().enumerate() {
                writeln!(w, "{re:.6},{im:.6},{:.12e}", self.values[i][k])?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { re_min: -3.0, re_max: 3.0, im_min: -3.0, im_max: 3.0, step: 0.05 }
    }
}

impl GridSpec {
    fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| lo + k as f64 * step).collect()
    }

    pub fn re_axis(&self) -> Vec<f64> {
        Self::axis(self.re_min, self.re_max, self.step)
    }

    pub fn im_axis(&self) -> Vec<f64> {
        Self::axis(self.im_min, self.im_max, self.step)
    }
}

/// `W(beta) = (2/pi) sum_k (-1)^k <k|D(-beta) rho D(beta)|k>`.
///
/// The displaced Fock states `D(beta)|k>` are generated by the recurrence
/// `D|k> = (a^dag - beta^*) D|k-1> / sqrt(k)`, keeping only the components that
/// overlap the support of `rho`. The sum over `k` runs to at least
/// `cutoff + 8` and continues until the displaced states no longer reach the
/// support of `rho`.
pub fn wigner_point(rho: &DensityMatrix, beta: C64) -> f64 {
    let dim = rho.dim();
    let min_terms = rho.cutoff + 8;
    let max_terms = min_terms + 400 + (8.0 * beta.norm_sqr()) as usize;
    let (mut phi, _) = coherent_coefficients(beta, rho.cutoff);
    let mut next = vec![C64::new(0.0, 0.0); dim];
    let mut sum = 0.0;
    for k in 0..=max_terms {
        let mut expect = 0.0;
        for m in 0..dim {
            let mut row = C64::new(0.0, 0.0);
            for n in 0..dim {
                row += rho.get(m, n) * phi[n];
            }
            expect += (phi[m].conj() * row).re;
        }
        sum += if k % 2 == 0 { expect } else { -expect };

        let weight: f64 = phi.iter().map(|c| c.norm_sqr()).sum();
        if k >= min_terms && (k as f64) > beta.norm_sqr() && weight < 1e-32 {
            break;
        }
        let scale = 1.0 / ((k + 1) as f64).sqrt();
        for m in 0..dim {
            let raised = if m > 0 { phi[m - 1] * (m as f64).sqrt() } else { C64::new(0.0, 0.0) };
            next[m] = (raised - beta.conj() * phi[m]) * scale;
        }
        std::mem::swap(&mut phi, &mut next);
    }
    FRAC_2_PI * sum
}

pub fn wigner(rho: &DensityMatrix, grid: &GridSpec) -> WignerGrid {
    let re_axis = grid.re_axis();
    let im_axis = grid.im_axis();
    let values = im_axis
        .par_iter()
        .map(|&im| re_axis.iter().map(|&re| wigner_point(rho, C64::new(re, im))).collect())
        .collect();
    WignerGrid { re_axis, im_axis, values }
}

/// `<psi|rho|psi>`, padding whichever operand is shorter with zeros.
pub fn fidelity_pure(rho: &DensityMatrix, psi: &FockVector) -> Result<f64> {
    let defect = rho.hermiticity_defect();
    if defect > HERMITIAN_TOLERANCE {
        return Err(Error::NotHermitian(defect));
    }
    Ok(clamp_fidelity(overlap(rho, psi)))
}

fn overlap(rho: &DensityMatrix, psi: &FockVector) -> f64 {
    let dim = rho.dim().min(psi.amps.len());
    let mut acc = C64::new(0.0, 0.0);
    for m in 0..dim {
        let mut row = C64::new(0.0, 0.0);
        for n in 0..dim {
            row += rho.get(m, n) * psi.amps[n];
        }
        acc += psi.amps[m].conj() * row;
    }
    acc.re
}

fn clamp_fidelity(f: f64) -> f64 {
    if (-1e-9..0.0).contains(&f) {
        0.0
    } else if f > 1.0 && f <= 1.0 + 1e-9 {
        1.0
    } else {
        f
    }
}

/// Best even-cat approximation to a density matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatFit {
    pub beta_cat: f64,
    pub theta_cat: f64,
    pub fidelity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherentFit {
    pub alpha: C64,
    pub fidelity: f64,
}

/// Wraps a cat phase into (-pi/2, pi/2]; the even cat is invariant under
/// theta -> theta + pi.
fn wrap_cat_phase(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(PI);
    if t > FRAC_PI_2 {
        t -= PI;
    }
    if t <= -FRAC_PI_2 {
        t += PI;
    }
    t
}

struct NegatedFidelity<F> {
    eval: F,
}

impl<F: Fn(f64, f64) -> f64> CostFunction for NegatedFidelity<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-(self.eval)(p[0], p[1]))
    }
}

/// Nelder-Mead polish of a grid optimum.
fn refine<F: Fn(f64, f64) -> f64>(eval: F, start: [f64; 2], scale: [f64; 2]) -> Result<[f64; 2]> {
    let simplex = vec![
        start.to_vec(),
        vec![start[0] + scale[0], start[1]],
        vec![start[0], start[1] + scale[1]],
    ];
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-16)
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let res = Executor::new(NegatedFidelity { eval }, solver)
        .configure(|s| s.max_iters(2000))
        .run()
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let best = res.state().best_param.clone().unwrap_or_else(|| start.to_vec());
    Ok([best[0], best[1]])
}

/// Maximizes the fidelity against the even cat
/// `(|b e^{it}> + |-b e^{it}>) / sqrt(2(1 + e^{-2 b^2}))` over `(b, t)`.
pub fn fit_cat(rho: &DensityMatrix) -> Result<CatFit> {
    let defect = rho.hermiticity_defect();
    if defect > HERMITIAN_TOLERANCE {
        return Err(Error::NotHermitian(defect));
    }
    let eval = |beta: f64, theta: f64| overlap(rho, &ideal_cat(beta, theta));

    let beta_sq_max = 2.0 * rho.mean_photon_number().max(0.0) + 2.0;
    let n_beta = (beta_sq_max / 0.02).floor() as usize;
    let theta_step = PI / 200.0;
    let (mut best, mut best_f) = ([0.0, 0.0], eval(0.0, 0.0));
    for ib in 1..=n_beta {
        let beta = (ib as f64 * 0.02).sqrt();
        for it in 1..=200 {
            let theta = -FRAC_PI_2 + it as f64 * theta_step;
            let f = eval(beta, theta);
            if f > best_f {
                best_f = f;
                best = [beta, theta];
            }
        }
    }

    if best[0] > 0.0 {
        let polished = refine(eval, best, [0.02, theta_step])?;
        let f = eval(polished[0].abs(), polished[1]);
        if f >= best_f {
            best = [polished[0].abs(), polished[1]];
        }
    }
    let (beta_cat, theta_cat) = if best[0] == 0.0 { (0.0, 0.0) } else { (best[0], wrap_cat_phase(best[1])) };
    let fidelity = clamp_fidelity(eval(beta_cat, theta_cat));
    Ok(CatFit { beta_cat, theta_cat, fidelity })
}

impl CatFit {
    pub fn state(&self) -> FockVector {
        ideal_cat(self.beta_cat, self.theta_cat)
    }
}

/// Maximizes the fidelity against a coherent state `|alpha>`.
pub fn fit_coherent(rho: &DensityMatrix) -> Result<CoherentFit> {
    let defect = rho.hermiticity_defect();
    if defect > HERMITIAN_TOLERANCE {
        return Err(Error::NotHermitian(defect));
    }
    let eval = |mag: f64, phase: f64| overlap(rho, &ideal_coherent(C64::from_polar(mag, phase)));

    let mag_sq_max = 2.0 * rho.mean_photon_number().max(0.0) + 2.0;
    let n_mag = (mag_sq_max / 0.02).floor() as usize;
    let phase_step = PI / 100.0;
    let (mut best, mut best_f) = ([0.0, 0.0], eval(0.0, 0.0));
    for im in 1..=n_mag {
        let mag = (im as f64 * 0.02).sqrt();
        for ip in 1..=200 {
            let phase = -PI + ip as f64 * phase_step;
            let f = eval(mag, phase);
            if f > best_f {
                best_f = f;
                best = [mag, phase];
            }
        }
    }
    if best[0] > 0.0 {
        let polished = refine(eval, best, [0.02, phase_step])?;
        if eval(polished[0], polished[1]) >= best_f {
            best = polished;
        }
    }
    let alpha = C64::from_polar(best[0], best[1]);
    Ok(CoherentFit { alpha, fidelity: clamp_fidelity(eval(best[0], best[1])) })
}

/// Renormalizes a reconstructed matrix with a small trace defect; rejects
/// larger ones.
pub fn normalize_trace(rho: &mut DensityMatrix) -> Result<f64> {
    let trace = rho.trace().re;
    let defect = (trace - 1.0).abs();
    if defect > TRACE_TOLERANCE || trace <= 0.0 {
        return Err(Error::TraceDefect(defect));
    }
    if defect > 1e-6 {
        warn!("density matrix trace defect {defect:.3e}; renormalizing");
    }
    rho.scale(1.0 / trace);
    Ok(defect)
}
