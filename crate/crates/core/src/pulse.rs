//! Pulse envelopes, drive-channel schedules, DRAG correction, and
//! virtual-Z phase frames.
//!
//! Envelopes are flat-top Gaussians: a plateau of duration τ with Gaussian
//! edges of width Θ, where Θ is defined so the pulse area equals that of a
//! square pulse of duration Θ+τ. Tails are truncated at ±`trunc_radius`·Θ
//! beyond the plateau and the Gaussian part is renormalized so the area
//! property holds exactly.
//!
//! A schedule is a time-ordered set of segments per drive channel plus a
//! virtual-Z phase ledger for the auxiliary frame. Evaluation is
//! continuous-time; the integrator chooses its own steps.

use statrs::function::erf::erf;
use thiserror::Error;

use crate::hilbert::{annihilation, tensor3, ModeDims, Operator};
use crate::system::{ac_stark_shift, f0g1_coupling, DispersiveParams, JcParams};
use crate::C64;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("storage segments must be resonant in the drive frame (detuning = 0) for the analytic displacement integral; got {0} rad/s")]
    DetunedStorageSegment(f64),
    #[error("channel {0:?} is not mapped for this operation")]
    UnmappedChannel(DriveChannel),
}

pub const DEFAULT_TRUNC_RADIUS: f64 = 2.5;

/// Flat-top Gaussian envelope.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Envelope {
    /// Complex peak amplitude (rad/s).
    pub eps0: C64,
    /// Gaussian width Θ (s).
    pub theta: f64,
    /// Plateau duration τ (s), ≥ 0.
    pub tau: f64,
    /// Center time (s); ε(t0) = eps0.
    pub t0: f64,
    /// Tail truncation radius in units of Θ.
    pub trunc_radius: f64,
}

impl Envelope {
    pub fn new(eps0: C64, theta: f64, tau: f64, t0: f64) -> Self {
        assert!(theta > 0.0, "Θ must be positive");
        assert!(tau >= 0.0, "τ must be non-negative");
        Self {
            eps0,
            theta,
            tau,
            t0,
            trunc_radius: DEFAULT_TRUNC_RADIUS,
        }
    }

    /// Renormalization of the Gaussian part so the truncated pulse keeps
    /// area eps0·(Θ+τ).
    fn gaussian_scale(&self) -> f64 {
        1.0 / erf(std::f64::consts::PI.sqrt() * self.trunc_radius)
    }

    /// Real envelope shape (1 on the plateau), truncated and renormalized.
    pub fn shape(&self, t: f64) -> f64 {
        let half = self.tau / 2.0;
        let u = (t - self.t0).abs() - half;
        if u <= 0.0 {
            1.0
        } else if u > self.trunc_radius * self.theta {
            0.0
        } else {
            self.gaussian_scale() * (-std::f64::consts::PI * u * u / (self.theta * self.theta)).exp()
        }
    }

    /// ε(t) = eps0 · shape(t).
    pub fn value(&self, t: f64) -> C64 {
        self.eps0 * self.shape(t)
    }

    /// dε/dt.
    pub fn derivative(&self, t: f64) -> C64 {
        let half = self.tau / 2.0;
        let dt = t - self.t0;
        let u = dt.abs() - half;
        if u <= 0.0 || u > self.trunc_radius * self.theta {
            return C64::new(0.0, 0.0);
        }
        let pi = std::f64::consts::PI;
        let g = self.gaussian_scale() * (-pi * u * u / (self.theta * self.theta)).exp();
        self.eps0 * (-2.0 * pi * u / (self.theta * self.theta) * g * dt.signum())
    }

    /// Start of the truncated support.
    pub fn support_start(&self) -> f64 {
        self.t0 - self.tau / 2.0 - self.trunc_radius * self.theta
    }

    /// End of the truncated support.
    pub fn support_end(&self) -> f64 {
        self.t0 + self.tau / 2.0 + self.trunc_radius * self.theta
    }

    /// Cumulative shape area ∫_{-∞}^{t} shape(t') dt'; multiply by eps0 for
    /// the drive integral. The total equals Θ+τ exactly.
    pub fn cumulative_shape_area(&self, t: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let half = self.tau / 2.0;
        let r = self.trunc_radius;
        let scale = self.gaussian_scale();
        // Half-Gaussian primitive in the edge coordinate:
        // ∫ e^{-π u²/Θ²} du = (Θ/2) erf(√π u / Θ).
        let prim = |u: f64| 0.5 * self.theta * erf(pi.sqrt() * u / self.theta);
        let left_edge = self.t0 - half;
        let right_edge = self.t0 + half;
        let mut area = 0.0;
        if t > self.support_start() {
            let hi = (t - left_edge).min(0.0);
            area += scale * (prim(hi) - prim(-r * self.theta));
        }
        if t > left_edge {
            area += (t.min(right_edge) - left_edge).max(0.0);
        }
        if t > right_edge {
            let hi = (t - right_edge).min(r * self.theta);
            area += scale * (prim(hi) - prim(0.0));
        }
        area
    }

    /// Total pulse area, eps0·(Θ+τ) by construction.
    pub fn area(&self) -> C64 {
        self.eps0 * (self.theta + self.tau)
    }
}

/// Which drive line a segment plays on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DriveChannel {
    /// Storage drive in the storage drive frame (ω_d,s = ω_s + χ_sq).
    Storage,
    /// Auxiliary drive resonant with the dressed g↔e transition.
    AuxiliaryGe,
    /// Auxiliary drive resonant with the dressed e↔f transition.
    AuxiliaryEf,
    /// Drive activating the |f0_r⟩ ↔ |g1_r⟩ transition.
    F0g1,
}

/// One pulse on one channel.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DriveSegment {
    pub channel: DriveChannel,
    pub envelope: Envelope,
    /// Carrier detuning from the channel's frame (rad/s); the phase factor
    /// is referenced to the pulse center, e^{-i·detuning·(t-t0)}.
    pub detuning: f64,
    /// Carrier phase (rad).
    pub phase: f64,
    /// DRAG coefficient τ_D (s); used on the auxiliary channels only.
    pub drag_tau: f64,
}

impl DriveSegment {
    /// Complex drive coefficient at time `t`, including DRAG on auxiliary
    /// channels and the carrier detuning phase. `extra_phase` carries the
    /// virtual-Z ledger for auxiliary segments.
    fn coefficient(&self, t: f64, extra_phase: f64) -> C64 {
        let is_aux = matches!(
            self.channel,
            DriveChannel::AuxiliaryGe | DriveChannel::AuxiliaryEf
        );
        let base = if is_aux && self.drag_tau != 0.0 {
            self.envelope.value(t) + C64::new(0.0, self.drag_tau) * self.envelope.derivative(t)
        } else {
            self.envelope.value(t)
        };
        let phase = self.phase + extra_phase - self.detuning * (t - self.envelope.t0);
        base * C64::new(0.0, phase).exp()
    }
}

/// Time-ordered drive schedule with a virtual-Z ledger for the auxiliary
/// phase frame.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PulseSchedule {
    pub segments: Vec<DriveSegment>,
    /// (time, phase increment): auxiliary segments centered at or after the
    /// entry time carry the accumulated phase.
    pub virtual_z_ledger: Vec<(f64, f64)>,
    /// Logical end of the schedule (last effective pulse edge).
    pub logical_end: f64,
}

impl PulseSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Effective (square-equivalent) half-width of an envelope.
    fn half_extent(env: &Envelope) -> f64 {
        0.5 * (env.theta + env.tau)
    }

    /// Append a segment after the current logical end with spacing δt
    /// between effective pulse edges, per
    /// δt_ab = (t_b - Θ_b/2 - τ_b/2) - (t_a + Θ_a/2 + τ_a/2).
    pub fn append(
        &mut self,
        channel: DriveChannel,
        mut envelope: Envelope,
        spacing: f64,
        detuning: f64,
        phase: f64,
        drag_tau: f64,
    ) -> &mut Self {
        let h = Self::half_extent(&envelope);
        envelope.t0 = self.logical_end + spacing + h;
        self.logical_end = envelope.t0 + h;
        self.segments.push(DriveSegment {
            channel,
            envelope,
            detuning,
            phase,
            drag_tau,
        });
        self
    }

    /// Insert a segment at an absolute center time, extending the logical
    /// end if it runs past it.
    pub fn add_at(&mut self, mut seg: DriveSegment, t0: f64) -> &mut Self {
        seg.envelope.t0 = t0;
        let end = t0 + Self::half_extent(&seg.envelope);
        if end > self.logical_end {
            self.logical_end = end;
        }
        self.segments.push(seg);
        self
    }

    /// Advance the logical clock (idle gap).
    pub fn wait(&mut self, dt: f64) -> &mut Self {
        self.logical_end += dt;
        self
    }

    /// Record a virtual-Z phase update of the auxiliary frame at the current
    /// logical time. No physical segment is emitted.
    pub fn virtual_z(&mut self, phi: f64) -> &mut Self {
        if phi != 0.0 {
            self.virtual_z_ledger.push((self.logical_end, phi));
        }
        self
    }

    /// Accumulated auxiliary frame phase applying to a segment centered at `t0`.
    pub fn aux_frame_phase(&self, t0: f64) -> f64 {
        self.virtual_z_ledger
            .iter()
            .filter(|(t, _)| *t <= t0)
            .map(|(_, p)| p)
            .sum()
    }

    /// Total virtual-Z phase accumulated by the end of the schedule.
    pub fn total_virtual_z(&self) -> f64 {
        self.virtual_z_ledger.iter().map(|(_, p)| p).sum()
    }

    /// Sum of complex drive coefficients on a channel at time `t`.
    pub fn channel_value(&self, channel: DriveChannel, t: f64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for seg in self.segments.iter().filter(|s| s.channel == channel) {
            if t < seg.envelope.support_start() || t > seg.envelope.support_end() {
                continue;
            }
            let extra = if matches!(
                channel,
                DriveChannel::AuxiliaryGe | DriveChannel::AuxiliaryEf
            ) {
                self.aux_frame_phase(seg.envelope.t0)
            } else {
                0.0
            };
            acc += seg.coefficient(t, extra);
        }
        acc
    }

    /// True if any segment's support contains `t` (used for step-size caps).
    pub fn any_active(&self, t: f64) -> bool {
        self.segments
            .iter()
            .any(|s| t >= s.envelope.support_start() && t <= s.envelope.support_end())
    }

    /// Time window an evolution must cover so no envelope tail is clipped:
    /// pulses scheduled near the logical start have Gaussian lead-ins at
    /// negative times, and the last pulse's tail runs past the logical end.
    pub fn evolution_span(&self) -> (f64, f64) {
        let lo = self
            .segments
            .iter()
            .map(|s| s.envelope.support_start())
            .fold(0.0_f64, f64::min);
        let hi = self
            .segments
            .iter()
            .map(|s| s.envelope.support_end())
            .fold(self.logical_end, f64::max);
        (lo, hi)
    }

    /// Storage-frame displacement α(t) = -i ∫₀ᵗ ε_s(τ) dτ, evaluated
    /// analytically from the envelope primitives. Requires all storage
    /// segments resonant in the drive frame.
    pub fn storage_alpha(&self, t: f64) -> Result<C64, PulseError> {
        let mut acc = C64::new(0.0, 0.0);
        for seg in self
            .segments
            .iter()
            .filter(|s| s.channel == DriveChannel::Storage)
        {
            if seg.detuning != 0.0 {
                return Err(PulseError::DetunedStorageSegment(seg.detuning));
            }
            let area = seg.envelope.cumulative_shape_area(t);
            if area != 0.0 {
                acc += seg.envelope.eps0 * C64::new(0.0, seg.phase).exp() * area;
            }
        }
        Ok(acc * C64::new(0.0, -1.0))
    }

    /// Shift the whole schedule (pulse centers, ledger entries, logical
    /// clock) by `dt`.
    pub fn shifted(&self, dt: f64) -> Self {
        let mut out = self.clone();
        for seg in &mut out.segments {
            seg.envelope.t0 += dt;
        }
        for entry in &mut out.virtual_z_ledger {
            entry.0 += dt;
        }
        out.logical_end += dt;
        out
    }

    /// Merge another schedule, offset to start at the current logical end
    /// plus `gap`, and advance the clock.
    pub fn extend_with(&mut self, other: &PulseSchedule, gap: f64) -> &mut Self {
        let offset = self.logical_end + gap;
        for seg in &other.segments {
            let mut s = *seg;
            s.envelope.t0 += offset;
            self.segments.push(s);
        }
        for (t, p) in &other.virtual_z_ledger {
            self.virtual_z_ledger.push((t + offset, *p));
        }
        self.logical_end = offset + other.logical_end;
        self
    }
}

/// Dense reference assembly of the driving Hamiltonian at time `t` in the
/// simulation frame (each mode rotating at its dressed reference, the
/// auxiliary at its anharmonic ladder). Serves as the oracle for the
/// engine's sparse term assembly.
///
/// Terms: ac-Stark shift δω(t) b†b from the f0g1 drive, single-mode drives
/// with both ladder elements and explicit cross-transition carriers, and
/// the f0g1 interaction (1/√2) g̃(t) b†²c + H.c.
pub fn build_drive_hamiltonian(
    schedule: &PulseSchedule,
    params: &DispersiveParams,
    jc: &JcParams,
    dims: ModeDims,
    t: f64,
) -> Operator {
    let d = dims.total();
    let mut h = ndarray::Array2::<C64>::zeros((d, d));

    let eye_s = ndarray::Array2::<C64>::eye(dims.storage);
    let eye_q = ndarray::Array2::<C64>::eye(dims.auxiliary);
    let eye_r = ndarray::Array2::<C64>::eye(dims.resonator);

    // Storage drive: ε_s(t) a† + H.c. in the storage drive frame.
    let c_s = schedule.channel_value(DriveChannel::Storage, t);
    if c_s != C64::new(0.0, 0.0) {
        let a = annihilation(dims.storage);
        let adag = a.t().mapv(|x| x.conj());
        h = h + tensor3(&adag, &eye_q, &eye_r).mapv(|x| x * c_s);
        h = h + tensor3(&a, &eye_q, &eye_r).mapv(|x| x * c_s.conj());
    }

    // Auxiliary drives couple to both ladder elements; the off-resonant
    // element carries the anharmonicity beat e^{±i K_q t}.
    let c_ge_res = schedule.channel_value(DriveChannel::AuxiliaryGe, t);
    let c_ef_res = schedule.channel_value(DriveChannel::AuxiliaryEf, t);
    let beat = C64::new(0.0, params.k_q * t).exp();
    let c_ge = c_ge_res + c_ef_res * beat.conj();
    let c_ef = c_ef_res + c_ge_res * beat;
    if dims.auxiliary >= 2 && (c_ge != C64::new(0.0, 0.0) || c_ef != C64::new(0.0, 0.0)) {
        let mut bdag_eff = ndarray::Array2::<C64>::zeros((dims.auxiliary, dims.auxiliary));
        bdag_eff[[1, 0]] = c_ge;
        if dims.auxiliary >= 3 {
            bdag_eff[[2, 1]] = c_ef * 2.0_f64.sqrt();
        }
        let term = tensor3(&eye_s, &bdag_eff, &eye_r);
        let term_dag = term.t().mapv(|x| x.conj());
        h = h + term + term_dag;
    }

    // f0g1 drive: Stark term plus the effective b†²c interaction.
    let c_f = schedule.channel_value(DriveChannel::F0g1, t);
    if c_f != C64::new(0.0, 0.0) {
        let stark = ac_stark_shift(jc, c_f).unwrap_or(0.0);
        let g_tilde = f0g1_coupling(jc, c_f).unwrap_or(C64::new(0.0, 0.0));
        if stark != 0.0 {
            let mut nb = ndarray::Array2::<C64>::zeros((dims.auxiliary, dims.auxiliary));
            for n in 0..dims.auxiliary {
                nb[[n, n]] = C64::new(stark * n as f64, 0.0);
            }
            h = h + tensor3(&eye_s, &nb, &eye_r);
        }
        if dims.auxiliary >= 3 && dims.resonator >= 2 {
            let b = annihilation(dims.auxiliary);
            let bdag = b.t().mapv(|x| x.conj());
            let bdag2 = bdag.dot(&bdag);
            let c_op = annihilation(dims.resonator);
            let term = tensor3(&eye_s, &bdag2, &c_op);
            let coeff = g_tilde / 2.0_f64.sqrt();
            let term_dag = term.t().mapv(|x| x.conj());
            h = h + term.mapv(|x| x * coeff) + term_dag.mapv(|x| x * coeff.conj());
        }
    }

    Operator::new(dims, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::paper;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 0 { n } else { n + 1 };
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + k as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn envelope_plateau_center_value() {
        let env = Envelope::new(c(2.0, 1.0), 20e-9, 20e-9, 100e-9);
        assert_eq!(env.value(100e-9), c(2.0, 1.0));
        assert_eq!(env.value(92e-9), c(2.0, 1.0));
    }

    #[test]
    fn envelope_area_property_against_quadrature() {
        // τ = 20 ns, Θ = 20 ns → area = eps0 · 40 ns.
        let env = Envelope::new(c(1.0, 0.0), 20e-9, 20e-9, 0.0);
        let num = simpson(
            |t| env.value(t).re,
            env.support_start(),
            env.support_end(),
            20000,
        );
        assert!(
            (num - 40e-9).abs() / 40e-9 < 1e-6,
            "quadrature {num:.6e} vs 40 ns"
        );
        assert_abs_diff_eq!(
            env.cumulative_shape_area(env.support_end()),
            40e-9,
            epsilon = 1e-18
        );
        let t_mid = -5e-9;
        let num_mid = simpson(|t| env.value(t).re, env.support_start(), t_mid, 20000);
        assert!((num_mid - env.cumulative_shape_area(t_mid)).abs() < 1e-15);
    }

    #[test]
    fn envelope_area_no_plateau() {
        let env = Envelope::new(c(0.3, -0.4), 24e-9, 0.0, 0.0);
        let area = env.area();
        assert_abs_diff_eq!(area.re, 0.3 * 24e-9, epsilon = 1e-20);
        let num = simpson(
            |t| env.value(t).re,
            env.support_start(),
            env.support_end(),
            20000,
        );
        assert!((num - area.re).abs() / area.re.abs() < 1e-6);
    }

    #[test]
    fn drag_zero_coefficient_is_identity() {
        let env = Envelope::new(c(1.0, 0.0), 24e-9, 0.0, 50e-9);
        let seg = DriveSegment {
            channel: DriveChannel::AuxiliaryGe,
            envelope: env,
            detuning: 0.0,
            phase: 0.0,
            drag_tau: 0.0,
        };
        for t in [30e-9, 50e-9, 65e-9] {
            assert_eq!(seg.coefficient(t, 0.0), env.value(t));
        }
    }

    #[test]
    fn drag_value_at_center_and_odd_imaginary_part() {
        let env = Envelope::new(c(1.0, 0.0), 24e-9, 0.0, 50e-9);
        let seg = DriveSegment {
            channel: DriveChannel::AuxiliaryGe,
            envelope: env,
            detuning: 0.0,
            phase: 0.0,
            drag_tau: 1e-9,
        };
        // ε̇ = 0 at the (plateau-free) center.
        assert_abs_diff_eq!(seg.coefficient(50e-9, 0.0).re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seg.coefficient(50e-9, 0.0).im, 0.0, epsilon = 1e-12);
        // The DRAG quadrature component integrates to zero over the pulse.
        let quad = simpson(
            |t| seg.coefficient(t, 0.0).im,
            env.support_start(),
            env.support_end(),
            20000,
        );
        assert!(quad.abs() < 1e-18);
    }

    #[test]
    fn virtual_z_identity_and_cancellation() {
        let env = Envelope::new(c(1.0, 0.0), 24e-9, 0.0, 0.0);
        let mut sched = PulseSchedule::new();
        sched.append(DriveChannel::AuxiliaryGe, env, 0.0, 0.0, 0.0, 0.0);
        let base = sched.clone();
        sched.virtual_z(0.0);
        assert_eq!(sched.virtual_z_ledger.len(), base.virtual_z_ledger.len());
        sched.virtual_z(0.7);
        sched.virtual_z(-0.7);
        sched.append(DriveChannel::AuxiliaryGe, env, 10e-9, 0.0, 0.0, 0.0);
        let t_late = sched.segments[1].envelope.t0;
        assert_abs_diff_eq!(sched.aux_frame_phase(t_late), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn virtual_z_ledger_composes_additively() {
        let mut sched = PulseSchedule::new();
        sched.wait(10e-9).virtual_z(0.3);
        sched.wait(10e-9).virtual_z(0.5);
        assert_abs_diff_eq!(sched.total_virtual_z(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(sched.aux_frame_phase(15e-9), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(sched.aux_frame_phase(25e-9), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn schedule_time_translation_covariance() {
        let env = Envelope::new(c(0.5, 0.2), 20e-9, 10e-9, 0.0);
        let mut sched = PulseSchedule::new();
        sched.append(DriveChannel::Storage, env, 5e-9, 0.0, 0.4, 0.0);
        sched.append(DriveChannel::AuxiliaryGe, env, 7e-9, 0.0, -0.2, 0.0);
        let shifted = sched.shifted(123e-9);
        for t in [10e-9, 25e-9, 40e-9, 80e-9] {
            for ch in [DriveChannel::Storage, DriveChannel::AuxiliaryGe] {
                let a = sched.channel_value(ch, t);
                let b = shifted.channel_value(ch, t + 123e-9);
                assert!((a - b).norm() < 1e-8);
            }
        }
        assert_abs_diff_eq!(
            shifted.logical_end,
            sched.logical_end + 123e-9,
            epsilon = 1e-18
        );
    }

    #[test]
    fn spacing_definition_matches_invariant() {
        let env_a = Envelope::new(c(1.0, 0.0), 24e-9, 6e-9, 0.0);
        let env_b = Envelope::new(c(1.0, 0.0), 16e-9, 4e-9, 0.0);
        let mut sched = PulseSchedule::new();
        sched.append(DriveChannel::Storage, env_a, 0.0, 0.0, 0.0, 0.0);
        let delta = 37e-9;
        sched.append(DriveChannel::Storage, env_b, delta, 0.0, 0.0, 0.0);
        let a = &sched.segments[0].envelope;
        let b = &sched.segments[1].envelope;
        let measured =
            (b.t0 - b.theta / 2.0 - b.tau / 2.0) - (a.t0 + a.theta / 2.0 + a.tau / 2.0);
        assert_abs_diff_eq!(measured, delta, epsilon = 1e-18);
    }

    #[test]
    fn storage_alpha_single_pulse_and_return() {
        let env = Envelope::new(c(1.0e8, 0.0), 24e-9, 0.0, 0.0);
        let mut sched = PulseSchedule::new();
        sched.append(DriveChannel::Storage, env, 0.0, 0.0, 0.0, 0.0);
        let t_end = sched.segments[0].envelope.support_end();
        let alpha = sched.storage_alpha(t_end).unwrap();
        // α = -i ε0 (Θ+τ)
        assert_abs_diff_eq!(alpha.im, -1.0e8 * 24e-9, epsilon = 1e-9);
        assert_abs_diff_eq!(alpha.re, 0.0, epsilon = 1e-12);

        // Four-pulse +,-,-,+ pattern returns to the origin.
        let mut ecd_like = PulseSchedule::new();
        for (sign, gap) in [(1.0, 0.0), (-1.0, 100e-9), (-1.0, 50e-9), (1.0, 100e-9)] {
            let e = Envelope::new(c(sign * 1.0e8, 0.0), 24e-9, 0.0, 0.0);
            ecd_like.append(DriveChannel::Storage, e, gap, 0.0, 0.0, 0.0);
        }
        let t_end = ecd_like.logical_end + 70e-9;
        let alpha_end = ecd_like.storage_alpha(t_end).unwrap();
        assert!(alpha_end.norm() < 1e-9);
    }

    #[test]
    fn drive_hamiltonian_zero_when_idle() {
        let sched = PulseSchedule::new();
        let dims = ModeDims::new(4, 3, 2);
        let jc = paper::fitted_jc();
        let params = paper::dispersive_sim();
        let h = build_drive_hamiltonian(&sched, &params, &jc, dims, 10e-9);
        assert!(h.matrix.iter().map(|x| x.norm()).fold(0.0, f64::max) < 1e-30);
    }

    #[test]
    fn f0g1_matrix_element_equals_g_tilde() {
        let jc = paper::fitted_jc();
        let params = paper::dispersive_sim();
        let dims = ModeDims::new(2, 3, 2);
        let eps = 2.0e8;
        let env = Envelope::new(c(eps, 0.0), 20e-9, 100e-9, 80e-9);
        let mut sched = PulseSchedule::new();
        sched.add_at(
            DriveSegment {
                channel: DriveChannel::F0g1,
                envelope: env,
                detuning: 0.0,
                phase: 0.0,
                drag_tau: 0.0,
            },
            80e-9,
        );
        // On the plateau the element ⟨f,0_r|H|g,1_r⟩ equals g̃ exactly (the
        // √2 from b†² on |g⟩→|f⟩ cancels the 1/√2 prefactor).
        let h = build_drive_hamiltonian(&sched, &params, &jc, dims, 80e-9);
        let g_tilde = f0g1_coupling(&jc, c(eps, 0.0)).unwrap();
        let i_f0 = dims.index(0, 2, 0);
        let i_g1 = dims.index(0, 0, 1);
        assert!((h.matrix[[i_f0, i_g1]] - g_tilde).norm() < 1e-6 * g_tilde.norm());
        // Stark term is diagonal in the auxiliary number operator.
        let stark = ac_stark_shift(&jc, c(eps, 0.0)).unwrap();
        let i_e0 = dims.index(0, 1, 0);
        assert_abs_diff_eq!(h.matrix[[i_e0, i_e0]].re, stark, epsilon = stark.abs() * 1e-9);
        assert_abs_diff_eq!(
            h.matrix[[i_f0, i_f0]].re,
            2.0 * stark,
            epsilon = stark.abs() * 1e-9
        );
    }

    #[test]
    fn ge_drive_couples_both_ladder_elements() {
        let jc = paper::fitted_jc();
        let params = paper::dispersive_sim();
        let dims = ModeDims::new(1, 3, 1);
        let env = Envelope::new(c(1.0e7, 0.0), 24e-9, 0.0, 0.0);
        let mut sched = PulseSchedule::new();
        sched.add_at(
            DriveSegment {
                channel: DriveChannel::AuxiliaryGe,
                envelope: env,
                detuning: 0.0,
                phase: 0.0,
                drag_tau: 0.0,
            },
            0.0,
        );
        let t = 3e-9;
        let h = build_drive_hamiltonian(&sched, &params, &jc, dims, t);
        let eps_t = env.value(t);
        // ge element is the bare envelope.
        assert!((h.matrix[[1, 0]] - eps_t).norm() < 1e-9 * eps_t.norm());
        // ef element is √2 ε(t) e^{i K_q t}.
        let expect = eps_t * 2.0_f64.sqrt() * C64::new(0.0, params.k_q * t).exp();
        assert!((h.matrix[[2, 1]] - expect).norm() < 1e-9 * expect.norm());
        assert!(crate::hilbert::hermiticity_defect(&h.matrix) < 1e-12 * eps_t.norm());
    }
}
