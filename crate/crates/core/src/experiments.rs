//! Canned runs: the four emission settings, the bin-count sweep, the
//! closed-KPO ramp comparison, and the internal-loss arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::basis::{SectorSpec, DESK_MAX_OUT_PHOTONS, PAPER_KPO_CUTOFFS};
use crate::dynamics::{
    run_simulation, BinCoupling, CoupledState, InitialKpo, Propagator, PumpProfile, RunObservables, SystemParams,
};
use crate::error::{Error, Result};
use crate::fock::{cat_state, fit_cat, wigner, wigner_point, CatFit, DensityMatrix, GridSpec, Parity, WignerGrid};
use crate::pump::{LinearRamp, PumpDrive, PumpSample, ShortcutMode};
use crate::tomography::{envelope_from_state, moments, reconstruct_density, MomentsTable, PulseEnvelope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn letter(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            other => Err(Error::InvalidParameter(format!("unknown variant '{other}' (expected a, b, c or d)"))),
        }
    }
}

/// Published figures of merit for one row, kept next to the settings so
/// summaries can report deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub fidelity: f64,
    pub beta_cat_sq: f64,
    pub theta_cat_over_pi: f64,
    pub n_in: f64,
    pub k_it: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Config {
    pub variant: Variant,
    #[serde(default, rename = "_comments")]
    pub comments: BTreeMap<String, String>,
    pub kerr: f64,
    pub kappa_ex: f64,
    pub bandwidth: f64,
    pub amplitude: f64,
    pub final_time: f64,
    pub bins: usize,
    pub shortcut: ShortcutMode,
    pub filter_order: usize,
    pub kpo_cutoffs: Vec<usize>,
    pub substep_target: f64,
    pub memory_budget: u64,
    pub reference: ReferenceRow,
}

impl Table1Config {
    pub fn defaults(variant: Variant) -> Self {
        // kappa_ex/K, B/K, A_p, KT, J, shortcut, then the reported row
        let (bandwidth, amplitude, final_time, shortcut, reference) = match variant {
            Variant::A => (0.5, 2.45, 50.0, ShortcutMode::None, ReferenceRow { fidelity: 0.962, beta_cat_sq: 2.01, theta_cat_over_pi: 0.03, n_in: 6.2e-4, k_it: 9.63 }),
            Variant::B => (1.0, 2.15, 45.0, ShortcutMode::None, ReferenceRow { fidelity: 0.930, beta_cat_sq: 1.96, theta_cat_over_pi: 0.02, n_in: 6.1e-4, k_it: 9.64 }),
            Variant::C => (0.5, 2.50, 50.0, ShortcutMode::Tanh, ReferenceRow { fidelity: 0.983, beta_cat_sq: 2.03, theta_cat_over_pi: 0.02, n_in: 6.4e-4, k_it: 9.63 }),
            Variant::D => (1.0, 2.25, 45.0, ShortcutMode::Tanh, ReferenceRow { fidelity: 0.993, beta_cat_sq: 2.02, theta_cat_over_pi: 0.01, n_in: 6.4e-4, k_it: 9.60 }),
        };
        let mut comments = BTreeMap::new();
        let row = variant.letter();
        comments.insert("kappa_ex".into(), format!("row {row}, kappa_ex/K column"));
        comments.insert("bandwidth".into(), format!("row {row}, B/K column"));
        comments.insert("amplitude".into(), format!("row {row}, A_p column"));
        comments.insert("final_time".into(), format!("row {row}, KT column"));
        comments.insert("bins".into(), format!("row {row}, J column"));
        comments.insert("shortcut".into(), format!("row {row}, shortcut column (used = tanh counterdiabatic term)"));
        comments.insert("kpo_cutoffs".into(), "desk profile: output photons truncated at 4 with N_l = 6,6,6,5,4".into());
        comments.insert("substep_target".into(), "RK4 step bound; 0.04 keeps cumulative norm drift below 1e-6 at J = 80".into());
        comments.insert("reference".into(), format!("row {row} results: fidelity, beta_cat^2, theta_cat/pi, n_in, K I_t"));
        Self {
            variant,
            comments,
            kerr: 1.0,
            kappa_ex: 0.2,
            bandwidth,
            amplitude,
            final_time,
            bins: 80,
            shortcut,
            filter_order: 4,
            kpo_cutoffs: PAPER_KPO_CUTOFFS[..=DESK_MAX_OUT_PHOTONS].to_vec(),
            substep_target: 0.04,
            memory_budget: crate::basis::DEFAULT_MEMORY_BUDGET,
            reference,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }

    /// Output-photon truncation `L`, resetting the KPO cutoffs to the
    /// standard `6,6,6,5,4,3,2` ladder.
    pub fn set_max_out_photons(&mut self, l: usize) -> Result<()> {
        if l >= PAPER_KPO_CUTOFFS.len() {
            return Err(Error::InvalidParameter(format!("output-photon truncation {l} above {}", PAPER_KPO_CUTOFFS.len() - 1)));
        }
        self.kpo_cutoffs = PAPER_KPO_CUTOFFS[..=l].to_vec();
        Ok(())
    }

    pub fn max_out_photons(&self) -> usize {
        self.kpo_cutoffs.len() - 1
    }

    pub fn system_params(&self) -> SystemParams {
        SystemParams {
            kerr: self.kerr,
            kappa_ex: self.kappa_ex,
            detuning: 0.0,
            pump: PumpProfile::Lpf { amplitude: self.amplitude, bandwidth: self.bandwidth, order: self.filter_order },
            shortcut: self.shortcut,
            final_time: self.final_time,
            bins: self.bins,
            kpo_cutoffs: self.kpo_cutoffs.clone(),
            substep_target: self.substep_target,
            initial_kpo: InitialKpo::Vacuum,
            memory_budget: self.memory_budget,
            allow_over_budget: false,
            check_causality: true,
        }
    }
}

/// Deterministic part of a run's results; wall-clock data lives in
/// [`Timings`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Summary {
    pub variant: Variant,
    pub bins: usize,
    pub max_out_photons: usize,
    pub shortcut: ShortcutMode,
    pub fidelity: f64,
    pub beta_cat_sq: f64,
    pub theta_cat_over_pi: f64,
    pub n_in: f64,
    pub k_it: f64,
    pub n_out: f64,
    pub kappa_ex_it: f64,
    pub pulse_photons: f64,
    pub trace_before_normalization: f64,
    pub odd_population: f64,
    pub wigner_origin: f64,
    pub wigner_min: f64,
    pub min_eigenvalue: f64,
    pub top_sector_max_population: f64,
    pub norm_drift: f64,
    pub max_step_drift: f64,
    pub steps: usize,
    pub reference: ReferenceRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub dynamics_seconds: f64,
    pub analysis_seconds: f64,
}

pub struct PulseAnalysis {
    pub envelope: PulseEnvelope,
    pub moments: MomentsTable,
    pub density: DensityMatrix,
    pub trace: f64,
    pub fit: CatFit,
}

pub struct Table1Result {
    pub config: Table1Config,
    pub summary: Table1Summary,
    pub observables: RunObservables,
    pub analysis: PulseAnalysis,
    pub wigner: WignerGrid,
    pub timings: Timings,
}

/// Envelope, moments up to the output truncation, and the reconstructed
/// density matrix with its best cat fit.
pub fn analyze_pulse(state: &CoupledState, observables: &RunObservables) -> Result<PulseAnalysis> {
    let envelope = envelope_from_state(&observables.bin_populations)?;
    let order = state.spec().max_out_photons;
    let moments = moments(state, &envelope, order)?;
    let (density, trace) = reconstruct_density(&moments, order)?;
    let fit = fit_cat(&density)?;
    Ok(PulseAnalysis { envelope, moments, density, trace, fit })
}

pub fn run_table1(config: &Table1Config) -> Result<Table1Result> {
    let params = config.system_params();
    info!("row {}: J = {}, L = {}, shortcut {}", config.variant, config.bins, config.max_out_photons(), config.shortcut.token());
    let started = Instant::now();
    let (state, observables) = run_simulation(&params)?;
    let dynamics_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let analysis = analyze_pulse(&state, &observables)?;
    drop(state);
    let wigner_grid = wigner(&analysis.density, &GridSpec::default());
    let pops = analysis.density.populations();
    let summary = Table1Summary {
        variant: config.variant,
        bins: config.bins,
        max_out_photons: config.max_out_photons(),
        shortcut: config.shortcut,
        fidelity: analysis.fit.fidelity,
        beta_cat_sq: analysis.fit.beta_cat * analysis.fit.beta_cat,
        theta_cat_over_pi: analysis.fit.theta_cat / std::f64::consts::PI,
        n_in: observables.n_in,
        k_it: config.kerr * observables.integrated_photons,
        n_out: observables.n_out,
        kappa_ex_it: config.kappa_ex * observables.integrated_photons,
        pulse_photons: analysis.moments.get(1, 1).re,
        trace_before_normalization: analysis.trace,
        odd_population: pops.iter().skip(1).step_by(2).sum(),
        wigner_origin: wigner_point(&analysis.density, C64::new(0.0, 0.0)),
        wigner_min: wigner_grid.min(),
        min_eigenvalue: analysis.density.eigenvalues().into_iter().fold(f64::INFINITY, f64::min),
        top_sector_max_population: observables.top_sector_max_population,
        norm_drift: observables.norm_drift,
        max_step_drift: observables.max_step_drift,
        steps: observables.steps,
        reference: config.reference,
    };
    let timings = Timings { dynamics_seconds, analysis_seconds: started.elapsed().as_secs_f64() };
    info!("row {}: fidelity {:.4}, beta^2 {:.3}, K I_t {:.3}", config.variant, summary.fidelity, summary.beta_cat_sq, summary.k_it);
    Ok(Table1Result { config: config.clone(), summary, observables, analysis, wigner: wigner_grid, timings })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Writes the run directory: params, summary, time series, Wigner grid,
/// density matrix, envelope, moments and timings.
pub fn write_table1(result: &Table1Result, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("params.json"), &result.config)?;
    write_json(&dir.join("summary.json"), &result.summary)?;
    write_json(&dir.join("timings.json"), &result.timings)?;
    result.observables.write_timeseries_csv(BufWriter::new(File::create(dir.join("timeseries.csv"))?))?;
    result.wigner.write_csv(BufWriter::new(File::create(dir.join("wigner.csv"))?))?;
    result.analysis.density.write_csv(BufWriter::new(File::create(dir.join("density.csv"))?))?;
    result
        .analysis
        .envelope
        .write_csv(BufWriter::new(File::create(dir.join("envelope.csv"))?), &result.observables.bin_edges)?;
    result.analysis.moments.write_csv(BufWriter::new(File::create(dir.join("moments.csv"))?))?;
    Ok(())
}

/// Least-squares fit of `n_out(J) = n_0 - b / J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JSweepFit {
    pub bins: Vec<usize>,
    pub n_out: Vec<f64>,
    pub n0: f64,
    pub b: f64,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
    /// `|n_out(J_max) - n_0| / n_0`.
    pub discrepancy: f64,
}

pub fn fit_j_sweep(bins: &[usize], n_out: &[f64]) -> Result<JSweepFit> {
    if bins.len() != n_out.len() {
        return Err(Error::DegenerateFit("bin counts and samples differ in length".into()));
    }
    let mut distinct = bins.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || distinct[0] == 0 {
        return Err(Error::DegenerateFit("need at least three distinct positive bin counts".into()));
    }
    let x: Vec<f64> = bins.iter().map(|&j| 1.0 / j as f64).collect();
    let count = x.len() as f64;
    let mx = x.iter().sum::<f64>() / count;
    let my = n_out.iter().sum::<f64>() / count;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(n_out).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let n0 = my - slope * mx;
    let b = -slope;
    let residuals: Vec<f64> = x.iter().zip(n_out).map(|(xv, y)| y - (n0 - b * xv)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = n_out.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let last = bins.iter().enumerate().max_by_key(|(_, j)| **j).map(|(i, _)| i).unwrap();
    if n0 == 0.0 {
        return Err(Error::DegenerateFit("fitted n_0 is zero".into()));
    }
    let discrepancy = (n_out[last] - n0).abs() / n0.abs();
    Ok(JSweepFit { bins: bins.to_vec(), n_out: n_out.to_vec(), n0, b, residuals, r_squared, discrepancy })
}

/// Runs the emission dynamics for each bin count and fits the photon number.
pub fn run_j_sweep(config: &Table1Config, bin_counts: &[usize]) -> Result<JSweepFit> {
    if let Some(bad) = bin_counts.iter().find(|j| **j == 0 || **j % 5 != 0) {
        return Err(Error::InvalidParameter(format!("bin count {bad} is not a positive multiple of 5")));
    }
    let mut n_out = Vec::with_capacity(bin_counts.len());
    for &bins in bin_counts {
        let params = SystemParams { bins, ..config.system_params() };
        let (_, obs) = run_simulation(&params)?;
        info!("J = {bins}: n_out = {:.6}", obs.n_out);
        n_out.push(obs.n_out);
    }
    fit_j_sweep(bin_counts, &n_out)
}

/// Single-mode KPO under a linear pump ramp, no output coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedKpoConfig {
    pub mode: ShortcutMode,
    pub kerr: f64,
    pub cutoff: usize,
    pub p_final: f64,
    pub ramp_time: f64,
    pub final_time: f64,
    pub dt: f64,
}

impl ClosedKpoConfig {
    pub fn new(mode: ShortcutMode) -> Self {
        Self { mode, kerr: 1.0, cutoff: 30, p_final: 2.0, ramp_time: 10.0, final_time: 10.0, dt: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedKpoResult {
    pub mode: ShortcutMode,
    pub times: Vec<f64>,
    pub photons: Vec<f64>,
    pub fidelity: Vec<f64>,
    pub final_fidelity: f64,
    pub final_photons: f64,
    /// Largest decrease `max_{t1 < t2} n(t1) - n(t2)` of the photon number.
    pub max_drawdown: f64,
}

impl ClosedKpoResult {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,n,fidelity")?;
        for i in 0..self.times.len() {
            writeln!(w, "{:.6},{:.12e},{:.12e}", self.times[i], self.photons[i], self.fidelity[i])?;
        }
        Ok(())
    }
}

pub fn max_drawdown(series: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in series {
        peak = peak.max(v);
        worst = worst.max(peak - v);
    }
    worst
}

/// Evolves the KPO vacuum through the ramp and tracks the overlap with the
/// even cat of amplitude `sqrt(p_final / K)`.
pub fn run_closed_kpo(config: &ClosedKpoConfig) -> Result<ClosedKpoResult> {
    if config.cutoff < 30 {
        return Err(Error::InvalidParameter(format!("closed-KPO cutoff must be >= 30, got {}", config.cutoff)));
    }
    if !(config.dt > 0.0 && config.final_time > 0.0) {
        return Err(Error::InvalidParameter("time step and final time must be positive".into()));
    }
    let spec = SectorSpec::new(1, vec![config.cutoff])?;
    let mut state = CoupledState::vacuum(&spec);
    let mut drive = PumpDrive::Ramp(LinearRamp::new(config.p_final, config.ramp_time)?);
    let mut prop = Propagator::new(&spec, config.kerr, 0.0);
    let coupling = BinCoupling::new(&spec, 1, 0.0);
    let target = cat_state((config.p_final / config.kerr).sqrt(), 0.0, Parity::Even, config.cutoff)?;
    let overlap = |s: &CoupledState| {
        s.sectors()[0].iter().zip(target.amps()).map(|(a, c)| c.conj() * a).sum::<C64>().norm_sqr()
    };
    let steps = (config.final_time / config.dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut photons = Vec::with_capacity(steps + 1);
    let mut fidelity = Vec::with_capacity(steps + 1);
    let mut record = |s: &CoupledState, t: f64| {
        times.push(t);
        photons.push(s.kpo_photon_number());
        fidelity.push(overlap(s));
    };
    record(&state, 0.0);
    for k in 1..=steps {
        let samples: [PumpSample; 4] =
            drive.stage_samples(config.dt).map(|st| PumpSample::new(st, config.mode, config.kerr));
        prop.step(&mut state, &coupling, &samples, config.dt);
        drive.advance(config.dt);
        record(&state, k as f64 * config.dt);
    }
    let max_drawdown = max_drawdown(&photons);
    Ok(ClosedKpoResult {
        mode: config.mode,
        final_fidelity: *fidelity.last().unwrap(),
        final_photons: *photons.last().unwrap(),
        times,
        photons,
        fidelity,
        max_drawdown,
    })
}

/// How the internal loss is specified.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum InternalLoss {
    /// `kappa_in` in the same units as `kappa_ex`.
    Rate(f64),
    QualityFactor(f64),
    /// Largest acceptable loss probability `kappa_in I_t`.
    LossBudget(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub omega_kpo: f64,
    pub kerr: f64,
    pub kappa_ex: f64,
    pub kappa_in: f64,
    pub i_t: f64,
    pub photon_loss_prob: f64,
    pub q_ex: f64,
    pub q_in: f64,
}

/// Loss bound `kappa_in I_t` and quality factors. Frequencies and rates
/// share one unit; `i_t` is in the inverse of that unit.
pub fn estimate_loss(omega_kpo: f64, kerr: f64, kappa_ex: f64, i_t: f64, loss: InternalLoss) -> Result<LossEstimate> {
    for (name, v) in [("omega_kpo", omega_kpo), ("K", kerr), ("kappa_ex", kappa_ex), ("I_t", i_t)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    let kappa_in = match loss {
        InternalLoss::Rate(r) if r >= 0.0 => r,
        InternalLoss::QualityFactor(q) if q > 0.0 => omega_kpo / q,
        InternalLoss::LossBudget(p) if p >= 0.0 => p / i_t,
        other => return Err(Error::InvalidParameter(format!("invalid internal loss {other:?}"))),
    };
    Ok(LossEstimate {
        omega_kpo,
        kerr,
        kappa_ex,
        kappa_in,
        i_t,
        photon_loss_prob: kappa_in * i_t,
        q_ex: omega_kpo / kappa_ex,
        q_in: if kappa_in > 0.0 { omega_kpo / kappa_in } else { f64::INFINITY },
    })
}
