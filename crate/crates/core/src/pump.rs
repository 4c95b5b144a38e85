//! Time-dependent pump amplitude.
//!
//! The real amplitude `p(t)` is either the output of a cascade of first-order
//! low-pass filters driven by `K A_p exp(-kappa_ex t)`, or a linear ramp. The
//! imaginary amplitude `p'(t)` implements the counterdiabatic correction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `p/K` the tanh counterdiabatic amplitude switches to its series.
const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShortcutMode {
    /// Real pump only.
    #[default]
    #[serde(rename = "none")]
    None,
    /// `p' = (p_dot / p) tanh(p / K)`, derived for the even cat eigenstate.
    #[serde(rename = "eq12")]
    Tanh,
    /// `p' = p_dot sqrt(1 - 2 exp(-2p/K)) / (sqrt(K p) + 2p)`, the earlier
    /// formula based on following the coherent amplitude `sqrt(p/K)`.
    #[serde(rename = "ref15")]
    CoherentAmplitude,
}

impl ShortcutMode {
    pub fn token(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Tanh => "eq12",
            Self::CoherentAmplitude => "ref15",
        }
    }
}

impl std::str::FromStr for ShortcutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "off" => Ok(Self::None),
            "eq12" | "tanh" => Ok(Self::Tanh),
            "ref15" | "coherent" => Ok(Self::CoherentAmplitude),
            other => Err(Error::InvalidParameter(format!("unknown shortcut mode {other:?}"))),
        }
    }
}

pub fn counterdiabatic_tanh(p: f64, p_dot: f64, kerr: f64) -> f64 {
    let x = p / kerr;
    if x.abs() < SERIES_THRESHOLD {
        // tanh(x)/x = 1 - x^2/3 + ...
        p_dot / kerr * (1.0 - x * x / 3.0)
    } else {
        p_dot / p * x.tanh()
    }
}

/// Zero while `1 - 2 exp(-2p/K)` is negative, i.e. for `p < K ln(2)/2`.
pub fn counterdiabatic_coherent(p: f64, p_dot: f64, kerr: f64) -> f64 {
    let arg = 1.0 - 2.0 * (-2.0 * p / kerr).exp();
    if p <= 0.0 || arg <= 0.0 {
        return 0.0;
    }
    p_dot * arg.sqrt() / ((kerr * p).sqrt() + 2.0 * p)
}

/// Pump amplitude and its derivative at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PumpState {
    pub p: f64,
    pub p_dot: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PumpSample {
    pub p: f64,
    pub p_dot: f64,
    pub p_prime: f64,
    pub shortcut_mode: ShortcutMode,
}

impl PumpSample {
    pub fn new(state: PumpState, mode: ShortcutMode, kerr: f64) -> Self {
        let p_prime = match mode {
            ShortcutMode::None => 0.0,
            ShortcutMode::Tanh => counterdiabatic_tanh(state.p, state.p_dot, kerr),
            ShortcutMode::CoherentAmplitude => counterdiabatic_coherent(state.p, state.p_dot, kerr),
        };
        Self { p: state.p, p_dot: state.p_dot, p_prime, shortcut_mode: mode }
    }

    pub fn off() -> Self {
        Self::default()
    }
}

/// Chain of first-order low-pass filters, `s_i' = -B (s_i - s_{i-1})`, with
/// `s_0` the exponentially decaying input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpfCascade {
    bandwidth: f64,
    amplitude: f64,
    kappa_ex: f64,
    kerr: f64,
    stages: Vec<f64>,
    t: f64,
}

impl LpfCascade {
    /// All stages start at zero at `t = 0`.
    pub fn new(order: usize, bandwidth: f64, amplitude: f64, kappa_ex: f64, kerr: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("filter order must be at least 1".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!("filter bandwidth must be > 0, got {bandwidth}")));
        }
        Ok(Self { bandwidth, amplitude, kappa_ex, kerr, stages: vec![0.0; order], t: 0.0 })
    }

    pub fn order(&self) -> usize {
        self.stages.len()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn stages(&self) -> &[f64] {
        &self.stages
    }

    pub fn input(&self, t: f64) -> f64 {
        self.kerr * self.amplitude * (-self.kappa_ex * t).exp()
    }

    fn rhs(&self, t: f64, stages: &[f64], out: &mut [f64]) {
        let mut upstream = self.input(t);
        for (o, &s) in out.iter_mut().zip(stages) {
            *o = -self.bandwidth * (s - upstream);
            upstream = s;
        }
    }

    fn state_of(&self, t: f64, stages: &[f64], scratch: &mut [f64]) -> PumpState {
        self.rhs(t, stages, scratch);
        PumpState { p: *stages.last().unwrap(), p_dot: *scratch.last().unwrap() }
    }

    pub fn current(&self) -> PumpState {
        let mut scratch = vec![0.0; self.order()];
        self.state_of(self.t, &self.stages, &mut scratch)
    }

    /// Runs the classical RK4 stages for a step of `dt`. Returns the pump at
    /// the four stage points together with the advanced stage values.
    fn rk4(&self, dt: f64) -> ([PumpState; 4], Vec<f64>) {
        let n = self.order();
        let t = self.t;
        let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut probe = self.stages.clone();
        let mut samples = [PumpState::default(); 4];
        let offsets = [0.0, 0.5, 0.5, 1.0];
        for s in 0..4 {
            if s > 0 {
                for i in 0..n {
                    probe[i] = self.stages[i] + offsets[s] * dt * k[s - 1][i];
                }
            }
            let ts = t + offsets[s] * dt;
            self.rhs(ts, &probe, &mut k[s]);
            samples[s] = PumpState { p: probe[n - 1], p_dot: k[s][n - 1] };
        }
        let next = (0..n)
            .map(|i| self.stages[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
            .collect();
        (samples, next)
    }

    pub fn stage_samples(&self, dt: f64) -> [PumpState; 4] {
        self.rk4(dt).0
    }

    pub fn advance(&mut self, dt: f64) {
        let (_, next) = self.rk4(dt);
        self.stages = next;
        self.t += dt;
    }
}

/// `p(t) = p_final t / ramp_time`, held at `p_final` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRamp {
    pub p_final: f64,
    pub ramp_time: f64,
    t: f64,
}

impl LinearRamp {
    pub fn new(p_final: f64, ramp_time: f64) -> Result<Self> {
        if !(ramp_time > 0.0) {
            return Err(Error::InvalidParameter(format!("ramp time must be > 0, got {ramp_time}")));
        }
        Ok(Self { p_final, ramp_time, t: 0.0 })
    }

    pub fn at(&self, t: f64) -> PumpState {
        if t < self.ramp_time {
            PumpState { p: self.p_final * t / self.ramp_time, p_dot: self.p_final / self.ramp_time }
        } else {
            PumpState { p: self.p_final, p_dot: 0.0 }
        }
    }
}

/// Source of `p(t)` for the integrators. Stage samples line up with the RK4
/// stage times `t, t + dt/2, t + dt/2, t + dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PumpDrive {
    Off { t: f64 },
    Lpf(LpfCascade),
    Ramp(LinearRamp),
}

impl PumpDrive {
    pub fn off() -> Self {
        Self::Off { t: 0.0 }
    }

    pub fn time(&self) -> f64 {
        match self {
            Self::Off { t } => *t,
            Self::Lpf(c) => c.time(),
            Self::Ramp(r) => r.t,
        }
    }

    pub fn current(&self) -> PumpState {
        match self {
            Self::Off { .. } => PumpState::default(),
            Self::Lpf(c) => c.current(),
            Self::Ramp(r) => r.at(r.t),
        }
    }

    pub fn stage_samples(&self, dt: f64) -> [PumpState; 4] {
        match self {
            Self::Off { .. } => [PumpState::default(); 4],
            Self::Lpf(c) => c.stage_samples(dt),
            Self::Ramp(r) => {
                // the stage-3 sample is taken just below the kink so a ramp
                // ending exactly on a step boundary keeps its slope
                let t = r.t;
                [r.at(t), r.at(t + 0.5 * dt), r.at(t + 0.5 * dt), r.at(t + dt * (1.0 - 1e-12))]
            }
        }
    }

    pub fn advance(&mut self, dt: f64) {
        match self {
            Self::Off { t } => *t += dt,
            Self::Lpf(c) => c.advance(dt),
            Self::Ramp(r) => r.t += dt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t: f64,
    pub p: f64,
    pub p_dot: f64,
    pub p_prime: f64,
}

/// Samples the drive on a uniform grid of step `dt` up to `t_end`.
pub fn schedule(mut drive: PumpDrive, mode: ShortcutMode, kerr: f64, t_end: f64, dt: f64) -> Vec<ScheduleRow> {
    let steps = (t_end / dt).round() as usize;
    let mut rows = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let s = PumpSample::new(drive.current(), mode, kerr);
        rows.push(ScheduleRow { t: drive.time(), p: s.p, p_dot: s.p_dot, p_prime: s.p_prime });
        drive.advance(dt);
    }
    rows
}

pub fn write_schedule_csv<W: Write>(mut w: W, rows: &[ScheduleRow]) -> std::io::Result<()> {
    writeln!(w, "t,p,p_dot,p_prime")?;
    for r in rows {
        writeln!(w, "{:.6},{:.12e},{:.12e},{:.12e}", r.t, r.p, r.p_dot, r.p_prime)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed form of the fourth-order cascade driven by `K A e^{-kappa t}`:
    /// `K A B^4 [e^{-kappa t}/(B-kappa)^4 - e^{-Bt} sum_{k=1}^4 t^{k-1}/((k-1)! (B-kappa)^{5-k})]`.
    fn cascade_exact(t: f64, b: f64, a: f64, kappa: f64, kerr: f64) -> f64 {
        let d = b - kappa;
        let mut tail = 0.0;
        let mut fact = 1.0;
        for k in 1..=4 {
            if k > 1 {
                fact *= (k - 1) as f64;
            }
            tail += t.powi(k - 1) / (fact * d.powi(5 - k));
        }
        kerr * a * b.powi(4) * ((-kappa * t).exp() / d.powi(4) - (-b * t).exp() * tail)
    }

    fn run(cascade: &mut LpfCascade, dt: f64, steps: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(cascade.time(), cascade.current().p)];
        for _ in 0..steps {
            cascade.advance(dt);
            out.push((cascade.time(), cascade.current().p));
        }
        out
    }

    #[test]
    fn first_order_step_response() {
        let mut c = LpfCascade::new(1, 0.7, 1.3, 0.0, 1.0).unwrap();
        for (t, p) in run(&mut c, 0.01, 500) {
            assert!((p - 1.3 * (1.0 - (-0.7 * t).exp())).abs() < 1e-10);
        }
    }

    #[test]
    fn fourth_order_starts_flat() {
        let c = LpfCascade::new(4, 0.5, 2.45, 0.2, 1.0).unwrap();
        assert_eq!(c.current(), PumpState { p: 0.0, p_dot: 0.0 });
        // p(h) ~ B^4 K A h^4 / 24: derivatives up to third order vanish at 0
        for h in [1e-2, 5e-3] {
            let mut c = c.clone();
            c.advance(h);
            let ratio = c.current().p / h.powi(4);
            assert!((ratio - 0.5f64.powi(4) * 2.45 / 24.0).abs() / ratio < 0.02);
        }
    }

    #[test]
    fn fourth_order_matches_closed_form() {
        let (b, a, kappa) = (0.5, 2.45, 0.2);
        // fine-step integration agrees with the closed form
        let mut fine = LpfCascade::new(4, b, a, kappa, 1.0).unwrap();
        let fine_run = run(&mut fine, 1e-4, 200_000);
        let worst = fine_run.iter().map(|&(t, p)| (p - cascade_exact(t, b, a, kappa, 1.0)).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "fine-step deviation {worst:e}");
        let (t_peak, p_peak) = fine_run.iter().copied().fold((0.0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });

        // production step size, same peak within 1e-6 K
        let dt = 25.0 / 64.0 / 4.0;
        let mut coarse = LpfCascade::new(4, b, a, kappa, 1.0).unwrap();
        let coarse_run = run(&mut coarse, dt, (50.0 / dt) as usize);
        let worst = coarse_run.iter().map(|&(t, p)| (p - cascade_exact(t, b, a, kappa, 1.0)).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "coarse deviation {worst:e}");
        let near = coarse_run.iter().min_by(|x, y| (x.0 - t_peak).abs().total_cmp(&(y.0 - t_peak).abs())).unwrap();
        assert!((near.1 - cascade_exact(near.0, b, a, kappa, 1.0)).abs() < 1e-6);
        assert!(p_peak > 0.0 && t_peak > 0.0);
    }

    #[test]
    fn tail_follows_input_decay() {
        let (b, kappa) = (0.5, 0.2);
        let mut c = LpfCascade::new(4, b, 2.45, kappa, 1.0).unwrap();
        let dt = 0.05;
        for _ in 0..(45.0 / dt) as usize {
            c.advance(dt);
            let s = c.current();
            assert!(s.p >= 0.0);
        }
        let s = c.current();
        let log_rate = s.p_dot / s.p;
        assert!((log_rate + kappa).abs() < 0.01 * kappa, "d ln p/dt = {log_rate}");
    }

    fn doubling_difference(b: f64, dt: f64) -> f64 {
        let mut coarse = LpfCascade::new(4, b, 2.45, 0.2, 1.0).unwrap();
        let mut fine = coarse.clone();
        let mut worst = 0.0f64;
        for _ in 0..(50.0 / dt).round() as usize {
            coarse.advance(dt);
            fine.advance(dt / 2.0);
            fine.advance(dt / 2.0);
            worst = worst.max((coarse.current().p - fine.current().p).abs());
        }
        worst
    }

    #[test]
    fn step_doubling_converges() {
        for b in [0.5, 1.0] {
            assert!(doubling_difference(b, 0.025) < 1e-8);
            // fourth order: halving the step shrinks the change ~16x
            let ratio = doubling_difference(b, 0.1) / doubling_difference(b, 0.05);
            assert!((12.0..20.0).contains(&ratio), "B = {b}: ratio {ratio}");
        }
    }

    #[test]
    fn counterdiabatic_amplitudes() {
        assert!((counterdiabatic_tanh(1.0, 1.0, 1.0) - 1f64.tanh()).abs() < 1e-15);
        assert!((counterdiabatic_tanh(1.0, 1.0, 1.0) - 0.76159).abs() < 1e-5);
        // small-p limit is p_dot / K, continuous across the series switch
        assert_eq!(counterdiabatic_tanh(0.0, 0.3, 1.0), 0.3);
        let below = counterdiabatic_tanh(0.999e-6, 0.3, 1.0);
        let above = counterdiabatic_tanh(1.001e-6, 0.3, 1.0);
        assert!((below - above).abs() < 1e-15);
        assert_eq!(counterdiabatic_coherent(2.0, 0.0, 1.0), 0.0);
        assert_eq!(counterdiabatic_coherent(0.1, 1.0, 1.0), 0.0);
        let p = 2.0;
        let expect = 0.2 * (1.0 - 2.0 * (-4f64).exp()).sqrt() / (2f64.sqrt() + 4.0);
        assert!((counterdiabatic_coherent(p, 0.2, 1.0) - expect).abs() < 1e-15);
    }

    #[test]
    fn samples_respect_mode() {
        let state = PumpState { p: 0.8, p_dot: 0.1 };
        assert_eq!(PumpSample::new(state, ShortcutMode::None, 1.0).p_prime, 0.0);
        assert!(PumpSample::new(state, ShortcutMode::Tanh, 1.0).p_prime > 0.0);
        let mut c = LpfCascade::new(4, 1.0, 2.25, 0.2, 1.0).unwrap();
        for _ in 0..1000 {
            let s = PumpSample::new(c.current(), ShortcutMode::Tanh, 1.0);
            assert!(s.p_prime.is_finite() && s.p >= 0.0);
            c.advance(0.05);
        }
    }

    #[test]
    fn ramp_stage_samples() {
        let mut drive = PumpDrive::Ramp(LinearRamp::new(2.0, 10.0).unwrap());
        let s = drive.stage_samples(0.1);
        assert_eq!(s[0], PumpState { p: 0.0, p_dot: 0.2 });
        assert!((s[1].p - 0.01).abs() < 1e-15 && (s[3].p - 0.02).abs() < 1e-12);
        for _ in 0..101 {
            drive.advance(0.1);
        }
        assert!((drive.current().p - 2.0).abs() < 1e-12);
        assert_eq!(drive.current().p_dot, 0.0);
    }

    #[test]
    fn shortcut_tokens() {
        for mode in [ShortcutMode::None, ShortcutMode::Tanh, ShortcutMode::CoherentAmplitude] {
            assert_eq!(mode.token().parse::<ShortcutMode>().unwrap(), mode);
            assert_eq!(serde_json::to_string(&mode).unwrap(), format!("\"{}\"", mode.token()));
        }
    }
}
