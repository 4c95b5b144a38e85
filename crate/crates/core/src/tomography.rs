//! Pulse-mode tomography: envelope, moments `<b_p^dag^m b_p^n>`, and the
//! Fock-basis density matrix built from them.

use std::io::Write;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::basis::{rank_ascending, SectorSpec, SectorWalker};
use crate::dynamics::CoupledState;
use crate::error::{Error, Result};
use crate::fock::{normalize_trace, DensityMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseEnvelope {
    f: Vec<f64>,
}

impl PulseEnvelope {
    /// Normalizes non-negative weights to `sum f_j^2 = 1`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("envelope weights must be finite and non-negative".into()));
        }
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::NoEmission);
        }
        Ok(Self { f: weights.into_iter().map(|w| w / norm).collect() })
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }

    pub fn bins(&self) -> usize {
        self.f.len()
    }

    /// Rows `j,z_center,f` with bin centers taken from `edges`.
    pub fn write_csv<W: Write>(&self, mut w: W, edges: &[f64]) -> std::io::Result<()> {
        writeln!(w, "j,z,f")?;
        for (i, f) in self.f.iter().enumerate() {
            let z = edges.get(i + 1).map_or(f64::NAN, |hi| 0.5 * (edges[i] + hi));
            writeln!(w, "{},{:.6},{:.12e}", i + 1, z, f)?;
        }
        Ok(())
    }
}

/// `f_j = sqrt(n_j / sum_l n_l)` from the bin populations.
pub fn envelope_from_state(populations: &[f64]) -> Result<PulseEnvelope> {
    if populations.iter().sum::<f64>() <= 0.0 {
        return Err(Error::NoEmission);
    }
    // tiny negative round-off from the population sums is clamped
    PulseEnvelope::new(populations.iter().map(|&n| n.max(0.0).sqrt()).collect())
}

/// `b_p |psi>` with `b_p = sum_j f_j b_j`. Sector `l` of the result holds
/// the part that came from sector `l + 1`, with that sector's KPO cutoff.
pub fn pulse_mode_apply(state: &CoupledState, envelope: &PulseEnvelope) -> Result<CoupledState> {
    let spec = state.spec();
    if spec.max_out_photons == 0 {
        return Err(Error::SectorOverflow(0));
    }
    if envelope.bins() != spec.bins {
        return Err(Error::InvalidParameter(format!(
            "envelope has {} bins, state has {}",
            envelope.bins(),
            spec.bins
        )));
    }
    let lowered = SectorSpec { bins: spec.bins, max_out_photons: spec.max_out_photons - 1, kpo_cutoffs: spec.kpo_cutoffs[1..].to_vec() };
    let mut out = CoupledState::zeros(&lowered);
    let f = envelope.values();
    let mut target = Vec::with_capacity(spec.max_out_photons);
    for l in 1..=spec.max_out_photons {
        let d = spec.kpo_dim(l);
        let src = &state.sectors()[l];
        let dst = &mut out.sectors_mut()[l - 1];
        let mut walker = SectorWalker::new(l, spec.bins);
        for block in src.chunks_exact(d) {
            if block.iter().any(|a| *a != C64::new(0.0, 0.0)) {
                let tuple = walker.ascending();
                let mut k = 0;
                while k < l {
                    let v = tuple[k];
                    let mut run = 1;
                    while k + run < l && tuple[k + run] == v {
                        run += 1;
                    }
                    if f[v] != 0.0 {
                        target.clear();
                        target.extend_from_slice(&tuple[..k]);
                        target.extend_from_slice(&tuple[k + 1..]);
                        let r = rank_ascending(&target);
                        let c = f[v] * (run as f64).sqrt();
                        for (y, x) in dst[r * d..(r + 1) * d].iter_mut().zip(block) {
                            *y += c * x;
                        }
                    }
                    k += run;
                }
            }
            walker.advance();
        }
    }
    Ok(out)
}

/// `<a|b>` for states whose sector layouts may differ; missing components
/// count as zero.
pub fn overlap(a: &CoupledState, b: &CoupledState) -> C64 {
    let sa = a.spec();
    let sb = b.spec();
    if sa.bins != sb.bins {
        return C64::new(0.0, 0.0);
    }
    let top = sa.max_out_photons.min(sb.max_out_photons);
    let mut total = C64::new(0.0, 0.0);
    for l in 0..=top {
        let (da, db) = (sa.kpo_dim(l), sb.kpo_dim(l));
        let d = da.min(db);
        for (xa, xb) in a.sectors()[l].chunks_exact(da).zip(b.sectors()[l].chunks_exact(db)) {
            for n in 0..d {
                total += xa[n].conj() * xb[n];
            }
        }
    }
    total
}

/// `M_{m,n} = <b_p^dag^m b_p^n>` for `0 <= m, n <= M_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentsTable {
    pub max_order: usize,
    values: Vec<C64>,
}

impl MomentsTable {
    pub fn from_fn(max_order: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let dim = max_order + 1;
        let mut values = Vec::with_capacity(dim * dim);
        for m in 0..dim {
            for n in 0..dim {
                values.push(f(m, n));
            }
        }
        Self { max_order, values }
    }

    pub fn get(&self, m: usize, n: usize) -> C64 {
        self.values[m * (self.max_order + 1) + n]
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let dim = self.max_order + 1;
        let mut worst: f64 = 0.0;
        for m in 0..dim {
            for n in 0..dim {
                worst = worst.max((self.get(m, n) - self.get(n, m).conj()).norm());
            }
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "m,n,re,im")?;
        for m in 0..=self.max_order {
            for n in 0..=self.max_order {
                let v = self.get(m, n);
                writeln!(w, "{m},{n},{:.15e},{:.15e}", v.re, v.im)?;
            }
        }
        Ok(())
    }
}

pub fn moments(state: &CoupledState, envelope: &PulseEnvelope, max_order: usize) -> Result<MomentsTable> {
    if max_order > state.spec().max_out_photons {
        return Err(Error::InvalidParameter(format!(
            "moment order {max_order} exceeds the output-photon truncation {}",
            state.spec().max_out_photons
        )));
    }
    let mut powers = vec![state.clone()];
    for k in 1..=max_order {
        let next = pulse_mode_apply(&powers[k - 1], envelope)?;
        powers.push(next);
    }
    let dim = max_order + 1;
    let mut upper = vec![C64::new(0.0, 0.0); dim * dim];
    for m in 0..dim {
        for n in m..dim {
            upper[m * dim + n] = overlap(&powers[m], &powers[n]);
        }
    }
    Ok(MomentsTable::from_fn(max_order, |m, n| if n >= m { upper[m * dim + n] } else { upper[n * dim + m].conj() }))
}

/// `rho_{m,n} = (m! n!)^{-1/2} sum_l (-1)^l / l! M_{n+l, m+l}` with the sum
/// cut at the highest available moment, then made Hermitian and
/// renormalized. Returns the matrix and the trace before renormalization.
pub fn reconstruct_density(moments: &MomentsTable, cutoff: usize) -> Result<(DensityMatrix, f64)> {
    let top = moments.max_order;
    if cutoff > top {
        return Err(Error::InvalidParameter(format!("cutoff {cutoff} exceeds the moment order {top}")));
    }
    let fact: Vec<f64> = (0..=top).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let dim = cutoff + 1;
    let mut elements = vec![C64::new(0.0, 0.0); dim * dim];
    for m in 0..dim {
        for n in 0..dim {
            let mut sum = C64::new(0.0, 0.0);
            for l in 0..=top - m.max(n) {
                let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                sum += sign / fact[l] * moments.get(n + l, m + l);
            }
            elements[m * dim + n] = sum / (fact[m] * fact[n]).sqrt();
        }
    }
    let mut rho = DensityMatrix::from_elements(cutoff, elements)?;
    rho.symmetrize();
    let trace = rho.trace().re;
    normalize_trace(&mut rho)?;
    Ok((rho, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{sector_size, MultiIndex};
    use crate::fock::{cat_state, coherent_state, fidelity_pure, FockVector, Parity};

    /// Puts the pulse mode with envelope `f` in the state `sum_k c_k |k>`,
    /// KPO in vacuum: `|k>_p = (b_p^dag)^k / sqrt(k!) |0>` expanded on bins.
    fn pulse_state(f: &[f64], pulse: &FockVector, max_out: usize) -> CoupledState {
        let bins = f.len();
        let spec = SectorSpec::new(bins, vec![1; max_out + 1]).unwrap();
        let mut state = CoupledState::zeros(&spec);
        // amplitude of a tuple with multiplicities m_j in (b_p^dag)^k|0>/sqrt(k!):
        // sqrt(k!) prod_j f_j^{m_j} / sqrt(m_j!)
        for k in 0..=max_out.min(pulse.cutoff()) {
            let ck = pulse.amps()[k];
            let mut walker = SectorWalker::new(k, bins);
            let kf: f64 = (1..=k).map(|i| i as f64).product();
            while !walker.done() {
                let tuple = walker.ascending();
                let mut amp = kf.sqrt();
                let mut i = 0;
                while i < k {
                    let mut run = 1;
                    while i + run < k && tuple[i + run] == tuple[i] {
                        run += 1;
                    }
                    let rf: f64 = (1..=run).map(|x| x as f64).product();
                    amp *= f[tuple[i]].powi(run as i32) / rf.sqrt();
                    i += run;
                }
                state.sectors_mut()[k][walker.rank() * 2] = ck * amp;
                walker.advance();
            }
        }
        state
    }

    #[test]
    fn uniform_envelope() {
        let env = envelope_from_state(&[0.3; 5]).unwrap();
        for f in env.values() {
            assert!((f - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        }
        assert!(matches!(envelope_from_state(&[0.0; 4]), Err(Error::NoEmission)));
    }

    #[test]
    fn exponential_envelope() {
        let kappa = 0.2;
        let edges: Vec<f64> = (0..=40).map(|j| j as f64 * 0.5).collect();
        let pops: Vec<f64> = (1..=40).map(|j| (-kappa * edges[j]).exp() * 0.5).collect();
        let env = envelope_from_state(&pops).unwrap();
        let norm: f64 = pops.iter().sum();
        for (j, f) in env.values().iter().enumerate() {
            assert!((f - (pops[j] / norm).sqrt()).abs() < 1e-12);
        }
        assert!((env.values().iter().map(|f| f * f).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pulse_mode_single_and_double_photon() {
        let spec = SectorSpec::new(4, vec![0, 0, 0]).unwrap();
        let env = PulseEnvelope::new(vec![0.1, 0.7, 0.5, 0.3]).unwrap();
        let mut psi = CoupledState::zeros(&spec);
        psi.set_amplitude(0, &MultiIndex::from_bins(vec![3]).unwrap(), C64::new(1.0, 0.0)).unwrap();
        let out = pulse_mode_apply(&psi, &env).unwrap();
        assert!((out.sectors()[0][0] - C64::new(env.values()[2], 0.0)).norm() < 1e-15);

        let mut psi = CoupledState::zeros(&spec);
        psi.set_amplitude(0, &MultiIndex::from_bins(vec![2, 2]).unwrap(), C64::new(1.0, 0.0)).unwrap();
        let out = pulse_mode_apply(&psi, &env).unwrap();
        let one = MultiIndex::from_bins(vec![2]).unwrap();
        let expect = 2f64.sqrt() * env.values()[1];
        assert!((out.amplitude(0, &one).unwrap() - C64::new(expect, 0.0)).norm() < 1e-15);
        assert!((out.norm_sqr() - expect * expect).abs() < 1e-15);
    }

    #[test]
    fn pulse_mode_commutator_on_dense_basis() {
        // <x|[b_p, b_p^dag]|y> = <x|y> on states below the truncation; the
        // adjoint is obtained from <b_p^dag x|y> = <x|b_p y>
        let bins = 3;
        let env = PulseEnvelope::new(vec![0.2, 0.9, 0.4]).unwrap();
        let spec = SectorSpec::new(bins, vec![0; 4]).unwrap();
        let mut basis_states = Vec::new();
        for l in 0..=3 {
            for r in 0..sector_size(bins, l) {
                let mut s = CoupledState::zeros(&spec);
                s.sectors_mut()[l][r] = C64::new(1.0, 0.0);
                basis_states.push((l, s));
            }
        }
        // matrix of b_p on the full space
        let b: Vec<Vec<C64>> = basis_states
            .iter()
            .map(|(_, y)| {
                let by = pulse_mode_apply(y, &env).unwrap();
                basis_states.iter().map(|(_, x)| overlap(x, &by)).collect()
            })
            .collect();
        let dim = basis_states.len();
        for x in 0..dim {
            for y in 0..dim {
                if basis_states[x].0 > 2 || basis_states[y].0 > 2 {
                    continue;
                }
                // (B B^dag - B^dag B)_{xy}
                let mut c = C64::new(0.0, 0.0);
                for z in 0..dim {
                    c += b[z][x] * b[z][y].conj() - b[x][z].conj() * b[y][z];
                }
                let expect = if x == y { 1.0 } else { 0.0 };
                assert!((c - C64::new(expect, 0.0)).norm() < 1e-13, "({x},{y}) = {c}");
            }
        }
    }

    #[test]
    fn vacuum_moments_and_density() {
        let spec = SectorSpec::new(5, vec![2, 2, 2, 2]).unwrap();
        let psi = CoupledState::vacuum(&spec);
        let env = PulseEnvelope::new(vec![1.0; 5]).unwrap();
        let m = moments(&psi, &env, 3).unwrap();
        for a in 0..=3 {
            for b in 0..=3 {
                let expect = if a == 0 && b == 0 { 1.0 } else { 0.0 };
                assert_eq!(m.get(a, b), C64::new(expect, 0.0));
            }
        }
        let (rho, trace) = reconstruct_density(&m, 3).unwrap();
        assert_eq!(trace, 1.0);
        assert_eq!(rho.get(0, 0), C64::new(1.0, 0.0));
    }

    #[test]
    fn coherent_pulse_moments_and_density() {
        let f = [0.3, 0.5, 0.6, 0.4, 0.2];
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f: Vec<f64> = f.iter().map(|x| x / norm).collect();
        let alpha = C64::from_polar(0.5f64.sqrt(), 0.7);
        let cutoff = 6;
        let pulse = coherent_state(alpha, 40).unwrap();
        let psi = pulse_state(&f, &pulse, cutoff);
        let env = PulseEnvelope::new(f.clone()).unwrap();
        let m = moments(&psi, &env, cutoff).unwrap();
        assert!(m.hermiticity_defect() < 1e-12);
        // truncated at 6 photons the low moments match alpha*^m alpha^n closely
        for a in 0..=2 {
            for b in 0..=2 {
                let expect = alpha.conj().powu(a as u32) * alpha.powu(b as u32);
                assert!((m.get(a, b) - expect).norm() < 1e-3, "M_{a}{b}");
            }
        }
        let (rho, _) = reconstruct_density(&m, cutoff).unwrap();
        let ideal = DensityMatrix::from_pure(&coherent_state(alpha, 40).unwrap()).padded(cutoff);
        for a in 0..=cutoff {
            for b in 0..=cutoff {
                assert!((rho.get(a, b) - ideal.get(a, b)).norm() < 1e-3, "rho_{a}{b}");
            }
        }
    }

    #[test]
    fn round_trip_cat_pulse() {
        let f: Vec<f64> = (0..6).map(|j| ((j as f64 + 0.5) * 0.5).sin()).collect();
        let env = PulseEnvelope::new(f).unwrap();
        let top = 6;
        // pure pulse states with at most top/2 photons: exact reconstruction
        let mut amps = vec![C64::new(0.0, 0.0); 4];
        amps[0] = C64::new(0.6, 0.0);
        amps[2] = C64::new(0.0, 0.64);
        amps[3] = C64::new(0.48, 0.0);
        let pulse = FockVector::new(amps).unwrap();
        let psi = pulse_state(env.values(), &pulse, top);
        let m = moments(&psi, &env, top).unwrap();
        let (rho, trace) = reconstruct_density(&m, 3).unwrap();
        assert!((trace - 1.0).abs() < 1e-12);
        let ideal = DensityMatrix::from_pure(&pulse);
        for a in 0..=3 {
            for b in 0..=3 {
                assert!((rho.get(a, b) - ideal.get(a, b)).norm() < 1e-6);
            }
        }
        // even cat: parity selection rule and high fidelity
        let cat = cat_state(1.0, 0.0, Parity::Even, top).unwrap_or_else(|_| {
            let c = cat_state(1.0, 0.0, Parity::Even, 30).unwrap();
            let mut a = c.amps()[..=top].to_vec();
            let n = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            a.iter_mut().for_each(|x| *x /= n);
            FockVector::new(a).unwrap()
        });
        let psi = pulse_state(env.values(), &cat, top);
        let m = moments(&psi, &env, top).unwrap();
        for a in 0..=top {
            for b in 0..=top {
                if (a + b) % 2 == 1 {
                    assert!(m.get(a, b).norm() < 1e-14);
                }
            }
        }
        let (rho, _) = reconstruct_density(&m, top).unwrap();
        assert!(fidelity_pure(&rho, &cat).unwrap() > 1.0 - 1e-10);
    }

    #[test]
    fn moments_order_is_checked() {
        let spec = SectorSpec::new(3, vec![1, 1]).unwrap();
        let psi = CoupledState::vacuum(&spec);
        let env = PulseEnvelope::new(vec![1.0; 3]).unwrap();
        assert!(moments(&psi, &env, 2).is_err());
        assert!(reconstruct_density(&moments(&psi, &env, 1).unwrap(), 2).is_err());
    }
}
