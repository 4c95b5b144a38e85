//! Time evolution of the KPO coupled to the binned output field.
//!
//! While the evolution is inside bin `j` the KPO talks to that bin only, and
//! only tuples with `j_1 <= j` can be populated. Each sector is stored as
//! rank-major blocks of `N_l + 1` KPO amplitudes, so a bin only touches the
//! leading `binomial(j+l-1, l)` blocks of sector `l`, and the bin-`j` coupling
//! maps that prefix of sector `l` onto a contiguous block of sector `l+1`.

use std::io::Write;
use std::time::Instant;

use log::{debug, warn};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{self, binomial, sector_size, MultiIndex, SectorSpec, SectorWalker};
use crate::error::{Error, Result};
use crate::fock::{coherent_state, FockVector};
use crate::pump::{LpfCascade, PumpDrive, PumpSample, PumpState, ShortcutMode};

/// Largest tolerated change of the squared norm in a single RK4 step.
pub const NORM_STEP_LIMIT: f64 = 1e-6;

/// State copies held during a run: the state and three RK4 buffers.
pub const WORKING_COPIES: u64 = 4;

const RANK_CHUNK: usize = 256;
const SUM_CHUNK: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PumpProfile {
    /// Low-pass-filter cascade driven by `K A_p exp(-kappa_ex t)`.
    Lpf { amplitude: f64, bandwidth: f64, order: usize },
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialKpo {
    Vacuum,
    Coherent { re: f64, im: f64 },
}

/// All physical and numerical knobs of one run. Rates are in units of `K`
/// and times in units of `1/K` when `kerr = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub kerr: f64,
    pub kappa_ex: f64,
    pub detuning: f64,
    pub pump: PumpProfile,
    pub shortcut: ShortcutMode,
    pub final_time: f64,
    pub bins: usize,
    /// `N_0..=N_L`; the output-photon truncation is `len - 1`.
    pub kpo_cutoffs: Vec<usize>,
    pub substep_target: f64,
    pub initial_kpo: InitialKpo,
    pub memory_budget: u64,
    pub allow_over_budget: bool,
    pub check_causality: bool,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            kerr: 1.0,
            kappa_ex: 0.2,
            detuning: 0.0,
            pump: PumpProfile::Lpf { amplitude: 2.45, bandwidth: 0.5, order: 4 },
            shortcut: ShortcutMode::None,
            final_time: 50.0,
            bins: 80,
            kpo_cutoffs: vec![6, 6, 6, 5, 4],
            substep_target: 0.04,
            initial_kpo: InitialKpo::Vacuum,
            memory_budget: basis::DEFAULT_MEMORY_BUDGET,
            allow_over_budget: false,
            check_causality: true,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.kappa_ex > 0.0) {
            return bad(format!("kappa_ex must be > 0, got {}", self.kappa_ex));
        }
        if !(self.kerr >= 0.0) {
            return bad(format!("Kerr coefficient must be >= 0, got {}", self.kerr));
        }
        if self.shortcut != ShortcutMode::None && !(self.kerr > 0.0) {
            return bad("counterdiabatic pumping requires K > 0".into());
        }
        if !(self.final_time > 0.0) {
            return bad(format!("final time must be > 0, got {}", self.final_time));
        }
        if self.bins == 0 || self.bins % 5 != 0 {
            return bad(format!("number of bins must be a positive multiple of 5, got {}", self.bins));
        }
        if self.kpo_cutoffs.is_empty() {
            return bad("at least one sector is required".into());
        }
        if !(self.substep_target > 0.0) {
            return bad(format!("substep target must be > 0, got {}", self.substep_target));
        }
        if let PumpProfile::Lpf { order, bandwidth, .. } = self.pump {
            if order == 0 || !(bandwidth > 0.0) {
                return bad("filter order and bandwidth must be positive".into());
            }
        }
        Ok(())
    }

    pub fn max_out_photons(&self) -> usize {
        self.kpo_cutoffs.len() - 1
    }

    pub fn sector_spec(&self) -> SectorSpec {
        SectorSpec { bins: self.bins, max_out_photons: self.max_out_photons(), kpo_cutoffs: self.kpo_cutoffs.clone() }
    }

    pub fn drive(&self) -> Result<PumpDrive> {
        Ok(match self.pump {
            PumpProfile::Lpf { amplitude, bandwidth, order } => {
                PumpDrive::Lpf(LpfCascade::new(order, bandwidth, amplitude, self.kappa_ex, self.kerr)?)
            }
            PumpProfile::Off => PumpDrive::off(),
        })
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.final_time, self.bins, self.substep_target)
    }
}

/// Nonuniform bins: the first `4J/5` share the first half of `[0, T]`, the
/// last `J/5` the second half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub boundaries: Vec<f64>,
    pub widths: Vec<f64>,
    pub substeps: Vec<usize>,
}

impl TimeGrid {
    pub fn new(final_time: f64, bins: usize, substep_target: f64) -> Self {
        let early = 4 * bins / 5;
        let late = bins - early;
        let widths: Vec<f64> = (1..=bins)
            .map(|j| if j <= early { final_time / 2.0 / early as f64 } else { final_time / 2.0 / late as f64 })
            .collect();
        let mut boundaries = Vec::with_capacity(bins + 1);
        boundaries.push(0.0);
        for (j, w) in widths.iter().enumerate() {
            // accumulate per half so z_{4J/5} = T/2 and z_J = T exactly
            let z = if j + 1 <= early {
                (j + 1) as f64 * w
            } else {
                final_time / 2.0 + (j + 1 - early) as f64 * w
            };
            boundaries.push(z);
        }
        let substeps = widths.iter().map(|w| ((w / substep_target) - 1e-9).ceil().max(1.0) as usize).collect();
        Self { boundaries, widths, substeps }
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    /// Step size inside bin `j` (1-based).
    pub fn step(&self, j: usize) -> f64 {
        self.widths[j - 1] / self.substeps[j - 1] as f64
    }

    pub fn total_steps(&self) -> usize {
        self.substeps.iter().sum()
    }
}

/// Sectored amplitude store: `sectors[l][rank * (N_l + 1) + n]` is the
/// coefficient of KPO Fock state `n` with the `rank`-th `l`-photon tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    spec: SectorSpec,
    sectors: Vec<Vec<C64>>,
    bin: usize,
    t: f64,
}

impl CoupledState {
    pub fn vacuum(spec: &SectorSpec) -> Self {
        let mut state = Self::zeros(spec);
        state.sectors[0][0] = C64::new(1.0, 0.0);
        state
    }

    pub fn zeros(spec: &SectorSpec) -> Self {
        let sectors = (0..=spec.max_out_photons)
            .map(|l| vec![C64::new(0.0, 0.0); sector_size(spec.bins, l) * spec.kpo_dim(l)])
            .collect();
        Self { spec: spec.clone(), sectors, bin: 0, t: 0.0 }
    }

    /// KPO in `kpo`, output field empty. Components above `N_0` must vanish.
    pub fn with_kpo_state(spec: &SectorSpec, kpo: &FockVector) -> Result<Self> {
        let mut state = Self::zeros(spec);
        let dim = spec.kpo_dim(0);
        if kpo.amps()[dim.min(kpo.amps().len())..].iter().any(|a| a.norm() > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "KPO state has support above the sector-0 cutoff {}",
                spec.kpo_cutoffs[0]
            )));
        }
        for (n, &a) in kpo.amps().iter().take(dim).enumerate() {
            state.sectors[0][n] = a;
        }
        Ok(state)
    }

    pub fn from_sectors(spec: &SectorSpec, sectors: Vec<Vec<C64>>) -> Result<Self> {
        if sectors.len() != spec.max_out_photons + 1 {
            return Err(Error::InvalidParameter("sector count does not match the spec".into()));
        }
        for (l, s) in sectors.iter().enumerate() {
            if s.len() != sector_size(spec.bins, l) * spec.kpo_dim(l) {
                return Err(Error::InvalidParameter(format!("sector {l} has the wrong length")));
            }
        }
        Ok(Self { spec: spec.clone(), sectors, bin: 0, t: 0.0 })
    }

    pub fn spec(&self) -> &SectorSpec {
        &self.spec
    }

    pub fn sectors(&self) -> &[Vec<C64>] {
        &self.sectors
    }

    pub fn sectors_mut(&mut self) -> &mut [Vec<C64>] {
        &mut self.sectors
    }

    pub fn max_sector(&self) -> usize {
        self.spec.max_out_photons
    }

    /// Index of the bin most recently entered (0 before the evolution).
    pub fn bin(&self) -> usize {
        self.bin
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn amplitude(&self, n: usize, m: &MultiIndex) -> Result<C64> {
        let l = m.photons();
        if l > self.spec.max_out_photons {
            return Err(Error::SectorOverflow(l));
        }
        let dim = self.spec.kpo_dim(l);
        if n >= dim {
            return Ok(C64::new(0.0, 0.0));
        }
        let r = basis::rank(m, self.spec.bins)?;
        Ok(self.sectors[l][r * dim + n])
    }

    pub fn set_amplitude(&mut self, n: usize, m: &MultiIndex, value: C64) -> Result<()> {
        let l = m.photons();
        if l > self.spec.max_out_photons {
            return Err(Error::SectorOverflow(l));
        }
        let dim = self.spec.kpo_dim(l);
        if n >= dim {
            return Err(Error::InvalidParameter(format!("KPO level {n} above cutoff in sector {l}")));
        }
        let r = basis::rank(m, self.spec.bins)?;
        self.sectors[l][r * dim + n] = value;
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.sector_populations().iter().sum()
    }

    pub fn inner(&self, other: &Self) -> C64 {
        self.sectors
            .iter()
            .zip(&other.sectors)
            .map(|(a, b)| {
                ordered_sum(a.par_chunks(SUM_CHUNK).zip(b.par_chunks(SUM_CHUNK)).map(|(x, y)| {
                    x.iter().zip(y).map(|(u, v)| u.conj() * v).sum::<C64>()
                }))
            })
            .sum()
    }

    pub fn sector_populations(&self) -> Vec<f64> {
        self.sectors
            .iter()
            .map(|s| ordered_sum(s.par_chunks(SUM_CHUNK).map(|c| c.iter().map(|a| a.norm_sqr()).sum::<f64>())))
            .collect()
    }

    pub fn kpo_photon_number(&self) -> f64 {
        (0..self.sectors.len()).map(|l| kpo_moments(&self.sectors[l], self.spec.kpo_dim(l), usize::MAX).1).sum()
    }

    /// `<b_j^dag b_j>` for every bin.
    pub fn bin_populations(&self) -> Vec<f64> {
        let mut pops = vec![0.0; self.spec.bins];
        for (l, sector) in self.sectors.iter().enumerate().skip(1) {
            let dim = self.spec.kpo_dim(l);
            let mut walker = SectorWalker::new(l, self.spec.bins);
            for block in sector.chunks_exact(dim) {
                let w: f64 = block.iter().map(|a| a.norm_sqr()).sum();
                if w > 0.0 {
                    for &a in walker.ascending() {
                        pops[a] += w;
                    }
                }
                walker.advance();
            }
        }
        pops
    }

    /// True when every amplitude involving a bin beyond `j` is exactly zero.
    pub fn causality_holds(&self, j: usize) -> bool {
        self.sectors.iter().enumerate().skip(1).all(|(l, s)| {
            let start = sector_size(j, l) * self.spec.kpo_dim(l);
            s[start.min(s.len())..].par_iter().all(|a| *a == C64::new(0.0, 0.0))
        })
    }
}

/// `(sum |a|^2, sum n |a|^2)` over the first `ranks` blocks of a sector.
fn kpo_moments(sector: &[C64], dim: usize, ranks: usize) -> (f64, f64) {
    let len = sector.len().min(ranks.saturating_mul(dim));
    let partial: Vec<(f64, f64)> = sector[..len]
        .par_chunks(dim * RANK_CHUNK)
        .map(|chunk| {
            let mut norm = 0.0;
            let mut photons = 0.0;
            for block in chunk.chunks_exact(dim) {
                for (n, a) in block.iter().enumerate() {
                    let p = a.norm_sqr();
                    norm += p;
                    photons += n as f64 * p;
                }
            }
            (norm, photons)
        })
        .collect();
    partial.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Sums per-chunk partials in chunk order so results do not depend on
/// how the thread pool split the work.
fn ordered_sum<T, I>(partials: I) -> T
where
    T: Send + std::iter::Sum<T>,
    I: IndexedParallelIterator<Item = T>,
{
    partials.collect::<Vec<T>>().into_iter().sum()
}

/// Index bookkeeping for the coupling to bin `j`.
#[derive(Clone, Debug)]
pub struct BinCoupling {
    pub bin: usize,
    /// Coupling strength between the KPO and the bin mode.
    pub strength: f64,
    /// Populated ranks per sector: tuples with `j_1 <= j`.
    pub active: Vec<usize>,
    /// First rank in sector `l` whose tuple starts with `j`.
    up_offset: Vec<usize>,
    /// Rank shift from sector `l` to `l + 1` when `j` is prepended.
    down_shift: Vec<usize>,
    /// Multiplicity of `j` in each active tuple.
    mult: Vec<Vec<u8>>,
}

impl BinCoupling {
    pub fn new(spec: &SectorSpec, j: usize, strength: f64) -> Self {
        assert!(j >= 1 && j <= spec.bins, "bin {j} outside 1..={}", spec.bins);
        let top = spec.max_out_photons;
        let active: Vec<usize> = (0..=top).map(|l| sector_size(j, l)).collect();
        let up_offset: Vec<usize> = (0..=top).map(|l| if l == 0 { 0 } else { sector_size(j - 1, l) }).collect();
        let down_shift: Vec<usize> = (0..=top).map(|l| binomial(j + l - 1, l + 1) as usize).collect();
        let mut mult: Vec<Vec<u8>> = Vec::with_capacity(top + 1);
        mult.push(vec![0]);
        for l in 1..=top {
            let prev = &mult[l - 1];
            let m: Vec<u8> =
                (0..active[l]).map(|r| if r < up_offset[l] { 0 } else { 1 + prev[r - up_offset[l]] }).collect();
            mult.push(m);
        }
        Self { bin: j, strength, active, up_offset, down_shift, mult }
    }

    pub fn multiplicity(&self, l: usize, rank: usize) -> usize {
        self.mult[l][rank] as usize
    }
}

/// KPO Hamiltonian
/// `(p + i p')/2 a^dag^2 + (p - i p')/2 a^2 - (K/2) a^dag^2 a^2 + Delta a^dag a`
/// plus the exchange `i g (b_j^dag a - a^dag b_j)` with the current bin.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    dims: Vec<usize>,
    diag: Vec<Vec<f64>>,
    raise2: Vec<f64>,
    lower2: Vec<f64>,
    sqrt_n: Vec<f64>,
}

impl Hamiltonian {
    pub fn new(spec: &SectorSpec, kerr: f64, detuning: f64) -> Self {
        let dims: Vec<usize> = (0..=spec.max_out_photons).map(|l| spec.kpo_dim(l)).collect();
        let max_dim = dims.iter().copied().max().unwrap_or(1) + 2;
        let diag = dims
            .iter()
            .map(|&d| (0..d).map(|n| -0.5 * kerr * (n * n.saturating_sub(1)) as f64 + detuning * n as f64).collect())
            .collect();
        let raise2 = (0..max_dim).map(|n| ((n * n.saturating_sub(1)) as f64).sqrt()).collect();
        let lower2 = (0..max_dim).map(|n| (((n + 1) * (n + 2)) as f64).sqrt()).collect();
        let sqrt_n = (0..max_dim.max(8)).map(|n| (n as f64).sqrt()).collect();
        Self { dims, diag, raise2, lower2, sqrt_n }
    }

    /// Writes `-i H psi` into `out` over the active ranks of `coupling`.
    pub fn apply_into(&self, psi: &[Vec<C64>], out: &mut [Vec<C64>], coupling: &BinCoupling, sample: &PumpSample) {
        let top = self.dims.len() - 1;
        let pump_up = 0.5 * C64::new(sample.p, sample.p_prime);
        let pump_down = 0.5 * C64::new(sample.p, -sample.p_prime);
        let g = coupling.strength;
        for (l, out_l) in out.iter_mut().enumerate() {
            let d = self.dims[l];
            let active = coupling.active[l];
            let psi_l = &psi[l];
            let diag = &self.diag[l];
            out_l[..active * d].par_chunks_mut(d * RANK_CHUNK).enumerate().for_each(|(c, chunk)| {
                let r0 = c * RANK_CHUNK;
                for (i, y) in chunk.chunks_exact_mut(d).enumerate() {
                    let r = r0 + i;
                    let x = &psi_l[r * d..(r + 1) * d];
                    for n in 0..d {
                        let mut h = diag[n] * x[n];
                        if n >= 2 {
                            h += pump_up * self.raise2[n] * x[n - 2];
                        }
                        if n + 2 < d {
                            h += pump_down * self.lower2[n] * x[n + 2];
                        }
                        y[n] = C64::new(h.im, -h.re);
                    }
                    // b_j^dag a: feeds tuples starting with j from sector l-1
                    if l > 0 && r >= coupling.up_offset[l] {
                        let src = r - coupling.up_offset[l];
                        let dl = self.dims[l - 1];
                        let c = g * self.sqrt_n[coupling.mult[l][r] as usize];
                        let xs = &psi[l - 1][src * dl..(src + 1) * dl];
                        for n in 0..d.min(dl.saturating_sub(1)) {
                            y[n] += c * self.sqrt_n[n + 1] * xs[n + 1];
                        }
                    }
                    // -a^dag b_j: drains the tuple with j prepended in sector l+1
                    if l < top {
                        let tgt = r + coupling.down_shift[l];
                        let du = self.dims[l + 1];
                        let c = g * self.sqrt_n[coupling.mult[l][r] as usize + 1];
                        let xs = &psi[l + 1][tgt * du..(tgt + 1) * du];
                        for n in 1..d.min(du + 1) {
                            y[n] -= c * self.sqrt_n[n] * xs[n - 1];
                        }
                    }
                }
            });
        }
    }
}

/// `-i H_I(t)|psi>` for a state inside bin `j`.
pub fn apply_hamiltonian(
    state: &CoupledState,
    sample: &PumpSample,
    j: usize,
    kerr: f64,
    detuning: f64,
    strength: f64,
) -> CoupledState {
    let ham = Hamiltonian::new(&state.spec, kerr, detuning);
    let coupling = BinCoupling::new(&state.spec, j, strength);
    let mut out = CoupledState::zeros(&state.spec);
    ham.apply_into(&state.sectors, &mut out.sectors, &coupling, sample);
    out.bin = j;
    out.t = state.t;
    out
}

/// RK4 scratch buffers sized for one sector layout.
pub struct Propagator {
    ham: Hamiltonian,
    acc: Vec<Vec<C64>>,
    stage: Vec<Vec<C64>>,
    deriv: Vec<Vec<C64>>,
    dims: Vec<usize>,
}

impl Propagator {
    pub fn new(spec: &SectorSpec, kerr: f64, detuning: f64) -> Self {
        let zeros = || CoupledState::zeros(spec).sectors;
        Self {
            ham: Hamiltonian::new(spec, kerr, detuning),
            acc: zeros(),
            stage: zeros(),
            deriv: zeros(),
            dims: (0..=spec.max_out_photons).map(|l| spec.kpo_dim(l)).collect(),
        }
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.ham
    }

    /// One classical RK4 step with the pump sampled at `t, t+dt/2, t+dt/2, t+dt`.
    pub fn step(&mut self, state: &mut CoupledState, coupling: &BinCoupling, samples: &[PumpSample; 4], dt: f64) {
        let lens: Vec<usize> = coupling.active.iter().zip(&self.dims).map(|(a, d)| a * d).collect();
        let weights = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
        let offsets = [0.5 * dt, 0.5 * dt, dt];

        self.ham.apply_into(&state.sectors, &mut self.deriv, coupling, &samples[0]);
        for stage_idx in 0..4 {
            if stage_idx > 0 {
                self.ham.apply_into(&self.stage, &mut self.deriv, coupling, &samples[stage_idx]);
            }
            let w = weights[stage_idx];
            for l in 0..lens.len() {
                let n = lens[l];
                let psi = &state.sectors[l][..n];
                let k = &self.deriv[l][..n];
                let acc = &mut self.acc[l][..n];
                match stage_idx {
                    0 => {
                        let h = offsets[0];
                        let stage = &mut self.stage[l][..n];
                        (acc, stage, psi, k).into_par_iter().for_each(|(a, s, &p, &kk)| {
                            *a = p + w * kk;
                            *s = p + h * kk;
                        });
                    }
                    1 | 2 => {
                        let h = offsets[stage_idx];
                        let stage = &mut self.stage[l][..n];
                        (acc, stage, psi, k).into_par_iter().for_each(|(a, s, &p, &kk)| {
                            *a += w * kk;
                            *s = p + h * kk;
                        });
                    }
                    _ => {
                        acc.par_iter_mut().zip(k.par_iter()).for_each(|(a, &kk)| *a += w * kk);
                    }
                }
            }
        }
        std::mem::swap(&mut state.sectors, &mut self.acc);
        state.t += dt;
        state.bin = coupling.bin;
    }
}

/// Advances `state` by one RK4 step and moves the pump drive along with it.
pub fn rk4_step(
    propagator: &mut Propagator,
    state: &mut CoupledState,
    drive: &mut PumpDrive,
    mode: ShortcutMode,
    kerr: f64,
    coupling: &BinCoupling,
    dt: f64,
) -> Result<()> {
    let before = state.norm_sqr();
    let samples = stage_samples(drive, mode, kerr, dt);
    propagator.step(state, coupling, &samples, dt);
    drive.advance(dt);
    let drift = (state.norm_sqr() - before).abs();
    if drift > NORM_STEP_LIMIT {
        return Err(Error::NormDrift { drift, t: state.t });
    }
    Ok(())
}

fn stage_samples(drive: &PumpDrive, mode: ShortcutMode, kerr: f64, dt: f64) -> [PumpSample; 4] {
    drive.stage_samples(dt).map(|s: PumpState| PumpSample::new(s, mode, kerr))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunObservables {
    pub times: Vec<f64>,
    pub pump: Vec<f64>,
    pub pump_prime: Vec<f64>,
    pub kpo_photons: Vec<f64>,
    /// `<b_j^dag b_j>` at the final time.
    pub bin_populations: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub n_in: f64,
    pub n_out: f64,
    /// `int_0^T <a^dag a> dt`, trapezoidal on the substep grid.
    pub integrated_photons: f64,
    pub initial_photons: f64,
    pub norm_drift: f64,
    pub max_step_drift: f64,
    pub top_sector_max_population: f64,
    pub leakage_warnings: usize,
    pub steps: usize,
    pub elapsed_seconds: f64,
}

impl RunObservables {
    pub fn write_timeseries_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,p,p_prime,n_kpo")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{:.6},{:.12e},{:.12e},{:.12e}",
                self.times[i], self.pump[i], self.pump_prime[i], self.kpo_photons[i]
            )?;
        }
        Ok(())
    }
}

fn norm_and_photons(state: &CoupledState, coupling: Option<&BinCoupling>) -> (f64, f64) {
    state
        .sectors
        .iter()
        .enumerate()
        .map(|(l, s)| kpo_moments(s, state.spec.kpo_dim(l), coupling.map_or(usize::MAX, |c| c.active[l])))
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Builds the initial state of a run.
pub fn initial_state(params: &SystemParams) -> Result<CoupledState> {
    let spec = params.sector_spec();
    match params.initial_kpo {
        InitialKpo::Vacuum => Ok(CoupledState::vacuum(&spec)),
        InitialKpo::Coherent { re, im } => {
            let kpo = coherent_state(C64::new(re, im), params.kpo_cutoffs[0])?;
            CoupledState::with_kpo_state(&spec, &kpo)
        }
    }
}

/// Evolves KPO ⊗ output from the configured initial state through all bins.
pub fn run_simulation(params: &SystemParams) -> Result<(CoupledState, RunObservables)> {
    params.validate()?;
    let spec = params.sector_spec();
    let lay = basis::layout_with_budget(&spec, params.memory_budget);
    let required = lay.memory_bytes.saturating_mul(WORKING_COPIES);
    if required > params.memory_budget && !params.allow_over_budget {
        return Err(Error::MemoryBudget { estimate: required, budget: params.memory_budget });
    }
    let started = Instant::now();
    let grid = params.time_grid();
    let mut state = initial_state(params)?;
    let mut drive = params.drive()?;
    let mut prop = Propagator::new(&spec, params.kerr, params.detuning);
    let kerr = params.kerr;

    let mut obs = RunObservables { bin_edges: grid.boundaries.clone(), ..Default::default() };
    let record = |obs: &mut RunObservables, t: f64, sample: &PumpSample, photons: f64| {
        obs.times.push(t);
        obs.pump.push(sample.p);
        obs.pump_prime.push(sample.p_prime);
        obs.kpo_photons.push(photons);
    };
    let (mut norm, photons) = norm_and_photons(&state, None);
    obs.initial_photons = photons;
    record(&mut obs, 0.0, &PumpSample::new(drive.current(), params.shortcut, kerr), photons);

    for j in 1..=params.bins {
        if params.check_causality && !state.causality_holds(j - 1) {
            return Err(Error::InvalidParameter(format!("causality violated entering bin {j}")));
        }
        let width = grid.widths[j - 1];
        let coupling = BinCoupling::new(&spec, j, (params.kappa_ex / width).sqrt());
        let dt = grid.step(j);
        for s in 0..grid.substeps[j - 1] {
            let samples = stage_samples(&drive, params.shortcut, kerr, dt);
            prop.step(&mut state, &coupling, &samples, dt);
            drive.advance(dt);
            state.t = grid.boundaries[j - 1] + (s + 1) as f64 * dt;
            let (new_norm, photons) = norm_and_photons(&state, Some(&coupling));
            let drift = (new_norm - norm).abs();
            obs.max_step_drift = obs.max_step_drift.max(drift);
            if drift > NORM_STEP_LIMIT {
                return Err(Error::NormDrift { drift, t: state.t });
            }
            norm = new_norm;
            let sample = PumpSample::new(drive.current(), params.shortcut, kerr);
            record(&mut obs, state.t, &sample, photons);
            obs.steps += 1;
        }
        let top = spec.max_out_photons;
        let top_pop = kpo_moments(&state.sectors[top], spec.kpo_dim(top), coupling.active[top]).0;
        obs.top_sector_max_population = obs.top_sector_max_population.max(top_pop);
        if top > 0 && top_pop > 1e-2 && drive.current().p > 1e-2 * kerr.max(1e-300) {
            obs.leakage_warnings += 1;
            warn!("bin {j}: {top_pop:.3e} of the population sits in the top output sector while pumping");
        }
        debug!("bin {j}/{}: t = {:.3}, <a^dag a> = {:.4e}", params.bins, state.t, obs.kpo_photons.last().unwrap());
    }
    state.t = params.final_time;

    obs.bin_populations = state.bin_populations();
    obs.n_out = obs.bin_populations.iter().sum();
    obs.n_in = *obs.kpo_photons.last().unwrap();
    obs.integrated_photons = obs
        .times
        .windows(2)
        .zip(obs.kpo_photons.windows(2))
        .map(|(t, n)| 0.5 * (t[1] - t[0]) * (n[0] + n[1]))
        .sum();
    obs.norm_drift = (norm - 1.0).abs();
    obs.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok((state, obs))
}
