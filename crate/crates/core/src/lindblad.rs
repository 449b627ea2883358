//! Time evolution of the three-mode density matrix under the driven
//! dispersive master equation, in either the plain multi-rotating frame or
//! the displaced rotating storage frame.
//!
//! The right-hand side is applied matrix-free: the Hamiltonian (plus the
//! anti-Hermitian -i/2 Σ κ O†O fold) is kept as one merged sparse matrix
//! whose coefficient values are rebuilt each evaluation, and each jump
//! sandwich O ρ O† is two sparse passes. Nothing of superoperator size is
//! ever formed.
//!
//! Frames: the storage rotates at its drive frequency ω_s + χ_sq during
//! driven segments (or at ω_s during idles), the auxiliary at its dressed
//! anharmonic ladder, the resonator at ω_r. In the displaced frame the
//! storage operators are shifted by α(t) = -i∫ε_s, which cancels the linear
//! drive term and leaves only a -i(κ_1s/2)α residual drive, Kerr and
//! cross-Kerr terms dressed by α, and a dephasing jump a†a → Â†Â with
//! Â = a + α(t).

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::hilbert::{displacement, ModeDims, QuantumState, StateRepr};
use crate::pulse::{DriveChannel, PulseError, PulseSchedule};
use crate::system::{
    ac_stark_shift, f0g1_coupling, DispersiveParams, JcParams, LindbladParams,
};
use crate::C64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("step size underflow at t = {t:.3e} s (h = {h:.3e} s)")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("tolerance violation: {0}")]
    ToleranceViolation(String),
    #[error("lab-frame state requested but no displacement record is available")]
    FrameMismatch,
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error("dimension mismatch between state ({state}) and model ({model})")]
    DimMismatch { state: usize, model: usize },
}

/// Which frame the storage mode rotates in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageFrame {
    /// Drive frame at ω_d,s = ω_s + χ_sq (the ECD frame condition).
    Drive,
    /// Dressed frame at ω_s (idles and free evolution).
    Dressed,
}

/// Displaced rotating storage frame bookkeeping: α(t) = -i ∫₀ᵗ ε_s(τ) dτ
/// derived from the schedule, with the storage drive detuning Δ_s.
pub struct DisplacedFrame<'a> {
    pub schedule: &'a PulseSchedule,
    pub delta_s: f64,
}

impl DisplacedFrame<'_> {
    pub fn alpha(&self, t: f64) -> Result<C64, PulseError> {
        self.schedule.storage_alpha(t)
    }
}

/// Integrator and sampling options.
#[derive(Debug, Clone)]
pub struct EvolveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Max step while any drive envelope is active.
    pub max_step_driven: f64,
    pub initial_step: f64,
    /// Times at which to record observable expectations.
    pub sample_times: Vec<f64>,
    /// Observables (full-space matrices) sampled at `sample_times`.
    pub observables: Vec<Array2<C64>>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_step_driven: 1e-9,
            initial_step: 1e-11,
            sample_times: Vec::new(),
            observables: Vec::new(),
        }
    }
}

/// Evolution output: final state, integrator diagnostics, optional samples.
pub struct EvolutionResult {
    pub state: QuantumState,
    /// Storage displacement at the final time (displaced-frame runs only).
    pub alpha_end: Option<C64>,
    pub steps: usize,
    pub rejected_steps: usize,
    pub max_trace_drift: f64,
    pub max_hermiticity_defect: f64,
    /// (time, one value per observable).
    pub samples: Vec<(f64, Vec<C64>)>,
}

impl EvolutionResult {
    /// Final state mapped back to the undisplaced frame (conjugation by
    /// D(α_end) on the storage factor).
    pub fn state_undisplaced(&self) -> Result<QuantumState, EngineError> {
        let alpha = self.alpha_end.ok_or(EngineError::FrameMismatch)?;
        Ok(undisplace(&self.state, alpha))
    }
}

/// Conjugate a state by the storage-mode displacement D(α).
pub fn undisplace(state: &QuantumState, alpha: C64) -> QuantumState {
    if alpha.norm() < 1e-14 {
        return state.clone();
    }
    let dims = state.dims;
    let d_s = displacement(alpha, dims.storage);
    let full = crate::hilbert::tensor3(
        &d_s,
        &Array2::eye(dims.auxiliary),
        &Array2::eye(dims.resonator),
    );
    match &state.repr {
        StateRepr::Pure(v) => QuantumState::pure(dims, full.dot(v)),
        StateRepr::Density(r) => {
            let fd = full.t().mapv(|x| x.conj());
            QuantumState::density(dims, full.dot(r).dot(&fd))
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse machinery
// ---------------------------------------------------------------------------

/// CSR pattern with fixed structural values; term coefficients multiply the
/// structural values at assembly time.
#[derive(Clone)]
struct Csr {
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<C64>,
}

impl Csr {
    fn from_triplets(d: usize, mut trip: Vec<(u32, u32, C64)>) -> Self {
        trip.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0u32; d + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals = Vec::with_capacity(trip.len());
        for (r, c, v) in trip {
            row_ptr[r as usize + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for i in 0..d {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { row_ptr, cols, vals }
    }

    fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

/// out += scale · (M ρ) for CSR M, row-major ρ.
fn left_csr(m: &Csr, scale: C64, rho: &[C64], out: &mut [C64], d: usize) {
    if scale == C64::new(0.0, 0.0) || m.is_empty() {
        return;
    }
    for i in 0..d {
        let lo = m.row_ptr[i] as usize;
        let hi = m.row_ptr[i + 1] as usize;
        if lo == hi {
            continue;
        }
        let orow = &mut out[i * d..(i + 1) * d];
        for e in lo..hi {
            let k = m.cols[e] as usize;
            let v = scale * m.vals[e];
            let rrow = &rho[k * d..(k + 1) * d];
            for (o, r) in orow.iter_mut().zip(rrow.iter()) {
                *o += v * r;
            }
        }
    }
}

/// out += scale · (ρ M) for CSR M.
fn right_csr(m: &Csr, scale: C64, rho: &[C64], out: &mut [C64], d: usize) {
    if scale == C64::new(0.0, 0.0) || m.is_empty() {
        return;
    }
    for i in 0..d {
        let rrow = &rho[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        for k in 0..d {
            let lo = m.row_ptr[k] as usize;
            let hi = m.row_ptr[k + 1] as usize;
            if lo == hi {
                continue;
            }
            let rik = rrow[k];
            if rik == C64::new(0.0, 0.0) {
                continue;
            }
            for e in lo..hi {
                orow[m.cols[e] as usize] += scale * rik * m.vals[e];
            }
        }
    }
}

/// out += scale · (ρ M†) for CSR M.
fn right_csr_dagger(m: &Csr, scale: C64, rho: &[C64], out: &mut [C64], d: usize) {
    if scale == C64::new(0.0, 0.0) || m.is_empty() {
        return;
    }
    // (ρ M†)[i][j] = Σ_k ρ[i][k] conj(M[j][k])
    for i in 0..d {
        let rrow = &rho[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            let lo = m.row_ptr[j] as usize;
            let hi = m.row_ptr[j + 1] as usize;
            if lo == hi {
                continue;
            }
            let mut acc = C64::new(0.0, 0.0);
            for e in lo..hi {
                acc += rrow[m.cols[e] as usize] * m.vals[e].conj();
            }
            orow[j] += scale * acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// Indices of the off-diagonal Hamiltonian term patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OffTerm {
    ADag,
    A,
    ADag2,
    A2,
    ADag2A,
    ADagA2,
    NbADag,
    NbA,
    NbADag2,
    NbA2,
    NbADag2A,
    NbADagA2,
    Nb2ADag,
    Nb2A,
    NaAnA,    // n̂ a + a n̂
    NaAnADag, // n̂ a† + a† n̂
    BGe,
    BGeDag,
    BEf,
    BEfDag,
    F0g1,
    F0g1Dag,
}

const OFF_TERMS: [OffTerm; 22] = [
    OffTerm::ADag,
    OffTerm::A,
    OffTerm::ADag2,
    OffTerm::A2,
    OffTerm::ADag2A,
    OffTerm::ADagA2,
    OffTerm::NbADag,
    OffTerm::NbA,
    OffTerm::NbADag2,
    OffTerm::NbA2,
    OffTerm::NbADag2A,
    OffTerm::NbADagA2,
    OffTerm::Nb2ADag,
    OffTerm::Nb2A,
    OffTerm::NaAnA,
    OffTerm::NaAnADag,
    OffTerm::BGe,
    OffTerm::BGeDag,
    OffTerm::BEf,
    OffTerm::BEfDag,
    OffTerm::F0g1,
    OffTerm::F0g1Dag,
];

struct JumpChannel {
    rate: f64,
    pattern: Csr,
}

/// Everything the integrator needs to evaluate the RHS.
pub struct LindbladModel {
    dims: ModeDims,
    d: usize,
    displaced: bool,
    frame: StorageFrame,
    schedule: PulseSchedule,
    // Hermitian static diagonal plus constant -(i/2)ΣκO†O fold.
    diag_static: Vec<f64>,
    gamma_diag: Vec<f64>,
    // Time-dependent diagonal basis vectors.
    diag_na: Vec<f64>,
    diag_nb: Vec<f64>,
    diag_nanb: Vec<f64>,
    diag_nb2: Vec<f64>,
    diag_na_sq: Vec<f64>,
    diag_2nap1: Vec<f64>,
    // Off-diagonal patterns in OFF_TERMS order (empty when inapplicable).
    patterns: Vec<Csr>,
    // Constant-rate jump sandwiches.
    jumps: Vec<JumpChannel>,
    // Storage dephasing (time-dependent jump in the displaced frame).
    kappa_phi_s: f64,
    pattern_a: Csr,
    pattern_adag: Csr,
    pattern_na: Vec<f64>,
    // Drive conversion constants.
    k_q: f64,
    k_s: f64,
    chi_sq: f64,
    chi_s2q: f64,
    chi_sq2: f64,
    kappa_1s: f64,
    delta_s: f64,
    f0g1_conv: C64,
    stark_conv: f64,
    pure_ok: bool,
}

fn c0() -> C64 {
    C64::new(0.0, 0.0)
}

impl LindbladModel {
    /// Build the model for a schedule in the requested frame.
    ///
    /// `displaced` enables the α(t) substitutions (storage drives are then
    /// absorbed into the frame); otherwise storage drives act directly.
    pub fn new(
        dims: ModeDims,
        params: &DispersiveParams,
        jc: &JcParams,
        lindblad: &LindbladParams,
        schedule: PulseSchedule,
        frame: StorageFrame,
        displaced: bool,
    ) -> Self {
        let d = dims.total();
        let chi_sq2 = params.chi_sq2.unwrap_or(0.0);
        let delta_s = match frame {
            StorageFrame::Drive => -params.chi_sq,
            StorageFrame::Dressed => 0.0,
        };

        // Diagonal basis vectors over the product basis.
        let mut diag_static = vec![0.0; d];
        let mut gamma_diag = vec![0.0; d];
        let mut diag_na = vec![0.0; d];
        let mut diag_nb = vec![0.0; d];
        let mut diag_nanb = vec![0.0; d];
        let mut diag_nb2 = vec![0.0; d];
        let mut diag_na_sq = vec![0.0; d];
        let mut diag_2nap1 = vec![0.0; d];
        for i in 0..d {
            let (ns, nq, nr) = dims.unindex(i);
            let (ns, nq, nr) = (ns as f64, nq as f64, nr as f64);
            diag_static[i] = delta_s * ns
                + 0.5 * params.k_s * ns * (ns - 1.0)
                + 0.5 * params.k_r * nr * (nr - 1.0)
                + 2.0 * params.chi_sq * ns * nq
                + 2.0 * params.chi_qr * nq * nr
                + 2.0 * params.chi_sr * ns * nr
                + 2.0 * params.chi_s2q * ns * (ns - 1.0) * nq
                + 2.0 * chi_sq2 * ns * nq * (nq - 1.0)
                + 2.0 * params.chi_q2r * nq * (nq - 1.0) * nr
                + 2.0 * params.chi_qr2 * nq * nr * (nr - 1.0);
            gamma_diag[i] = (1.0 + lindblad.n_eq_s) * lindblad.kappa_1s * ns
                + lindblad.n_eq_s * lindblad.kappa_1s * (ns + 1.0)
                + (1.0 + lindblad.n_eq_q) * lindblad.kappa_1q * nq
                + lindblad.n_eq_q * lindblad.kappa_1q * (nq + 1.0)
                + 2.0 * lindblad.kappa_phi_q * nq * nq
                + (1.0 + lindblad.n_eq_r) * lindblad.kappa_1r * nr
                + lindblad.n_eq_r * lindblad.kappa_1r * (nr + 1.0)
                + 2.0 * lindblad.kappa_phi_r * nr * nr;
            diag_na[i] = ns;
            diag_nb[i] = nq;
            diag_nanb[i] = ns * nq;
            diag_nb2[i] = nq * (nq - 1.0);
            diag_na_sq[i] = ns * ns;
            diag_2nap1[i] = 2.0 * ns + 1.0;
        }

        // Mode-operator triplet builders on the full space.
        let idx = |ns: usize, nq: usize, nr: usize| dims.index(ns, nq, nr) as u32;
        let mut tr_a = Vec::new();
        let mut tr_adag = Vec::new();
        let mut tr_a2 = Vec::new();
        let mut tr_adag2 = Vec::new();
        let mut tr_adag2a = Vec::new();
        let mut tr_adaga2 = Vec::new();
        let mut tr_naan = Vec::new();
        let mut tr_nadagan = Vec::new();
        let mut tr_b = Vec::new();
        let mut tr_bdag = Vec::new();
        let mut tr_bge = Vec::new();
        let mut tr_bef = Vec::new();
        let mut tr_c = Vec::new();
        let mut tr_cdag = Vec::new();
        let mut tr_f = Vec::new();
        for ns in 0..dims.storage {
            for nq in 0..dims.auxiliary {
                for nr in 0..dims.resonator {
                    let col = idx(ns, nq, nr);
                    let nsf = ns as f64;
                    // a: |ns-1⟩⟨ns| √ns
                    if ns >= 1 {
                        let v = C64::new(nsf.sqrt(), 0.0);
                        tr_a.push((idx(ns - 1, nq, nr), col, v));
                        tr_adag.push((col, idx(ns - 1, nq, nr), v));
                        // n a + a n = (2ns-1)√ns |ns-1⟩⟨ns|
                        let w = C64::new((2.0 * nsf - 1.0) * nsf.sqrt(), 0.0);
                        tr_naan.push((idx(ns - 1, nq, nr), col, w));
                        tr_nadagan.push((col, idx(ns - 1, nq, nr), w));
                        // a†² a = (ns) ... a†²a|ns⟩ = ns √(ns+1) ... build below
                    }
                    if ns >= 2 {
                        let v = C64::new((nsf * (nsf - 1.0)).sqrt(), 0.0);
                        tr_a2.push((idx(ns - 2, nq, nr), col, v));
                        tr_adag2.push((col, idx(ns - 2, nq, nr), v));
                    }
                    // a†² a |ns⟩ = ns √(ns+1) |ns+1⟩  (valid for ns ≥ 1)
                    if ns >= 1 && ns + 1 < dims.storage {
                        let v = C64::new(nsf * (nsf + 1.0).sqrt(), 0.0);
                        tr_adag2a.push((idx(ns + 1, nq, nr), col, v));
                        tr_adaga2.push((col, idx(ns + 1, nq, nr), v));
                    }
                    // Auxiliary ladder.
                    if nq >= 1 {
                        let v = C64::new((nq as f64).sqrt(), 0.0);
                        tr_b.push((idx(ns, nq - 1, nr), col, v));
                        tr_bdag.push((col, idx(ns, nq - 1, nr), v));
                    }
                    if nq == 0 && dims.auxiliary >= 2 {
                        tr_bge.push((idx(ns, 1, nr), col, C64::new(1.0, 0.0)));
                    }
                    if nq == 1 && dims.auxiliary >= 3 {
                        tr_bef.push((idx(ns, 2, nr), col, C64::new(2.0_f64.sqrt(), 0.0)));
                    }
                    // Resonator ladder.
                    if nr >= 1 {
                        let v = C64::new((nr as f64).sqrt(), 0.0);
                        tr_c.push((idx(ns, nq, nr - 1), col, v));
                        tr_cdag.push((col, idx(ns, nq, nr - 1), v));
                    }
                    // (1/√2) b†² c = |f⟩⟨g| ⊗ c.
                    if nq == 0 && nr >= 1 && dims.auxiliary >= 3 {
                        let v = C64::new((nr as f64).sqrt(), 0.0);
                        tr_f.push((idx(ns, 2, nr - 1), col, v));
                    }
                }
            }
        }

        // Weight a storage-operator triplet list by an auxiliary diagonal.
        let weight_nb = |trip: &[(u32, u32, C64)], power2: bool| -> Vec<(u32, u32, C64)> {
            trip.iter()
                .map(|&(r, c, v)| {
                    let (_, nq, _) = dims.unindex(r as usize);
                    let w = if power2 {
                        (nq * nq.saturating_sub(1)) as f64
                    } else {
                        nq as f64
                    };
                    (r, c, v * w)
                })
                .filter(|&(_, _, v)| v != c0())
                .collect()
        };

        let mk = |t: Vec<(u32, u32, C64)>| Csr::from_triplets(d, t);
        let patterns: Vec<Csr> = OFF_TERMS
            .iter()
            .map(|term| match term {
                OffTerm::ADag => mk(tr_adag.clone()),
                OffTerm::A => mk(tr_a.clone()),
                OffTerm::ADag2 => mk(tr_adag2.clone()),
                OffTerm::A2 => mk(tr_a2.clone()),
                OffTerm::ADag2A => mk(tr_adag2a.clone()),
                OffTerm::ADagA2 => mk(tr_adaga2.clone()),
                OffTerm::NbADag => mk(weight_nb(&tr_adag, false)),
                OffTerm::NbA => mk(weight_nb(&tr_a, false)),
                OffTerm::NbADag2 => mk(weight_nb(&tr_adag2, false)),
                OffTerm::NbA2 => mk(weight_nb(&tr_a2, false)),
                OffTerm::NbADag2A => mk(weight_nb(&tr_adag2a, false)),
                OffTerm::NbADagA2 => mk(weight_nb(&tr_adaga2, false)),
                OffTerm::Nb2ADag => mk(weight_nb(&tr_adag, true)),
                OffTerm::Nb2A => mk(weight_nb(&tr_a, true)),
                OffTerm::NaAnA => mk(tr_naan.clone()),
                OffTerm::NaAnADag => mk(tr_nadagan.clone()),
                OffTerm::BGe => mk(tr_bge.clone()),
                OffTerm::BGeDag => mk(
                    tr_bge
                        .iter()
                        .map(|&(r, c, v)| (c, r, v.conj()))
                        .collect(),
                ),
                OffTerm::BEf => mk(tr_bef.clone()),
                OffTerm::BEfDag => mk(
                    tr_bef
                        .iter()
                        .map(|&(r, c, v)| (c, r, v.conj()))
                        .collect(),
                ),
                OffTerm::F0g1 => mk(tr_f.clone()),
                OffTerm::F0g1Dag => mk(
                    tr_f.iter().map(|&(r, c, v)| (c, r, v.conj())).collect(),
                ),
            })
            .collect();

        // Constant-rate jump sandwiches (zero-rate channels skipped).
        let mut jumps = Vec::new();
        let mut push = |rate: f64, trip: Vec<(u32, u32, C64)>| {
            if rate > 0.0 && !trip.is_empty() {
                jumps.push(JumpChannel {
                    rate,
                    pattern: Csr::from_triplets(d, trip),
                });
            }
        };
        push((1.0 + lindblad.n_eq_s) * lindblad.kappa_1s, tr_a.clone());
        push(lindblad.n_eq_s * lindblad.kappa_1s, tr_adag.clone());
        push((1.0 + lindblad.n_eq_q) * lindblad.kappa_1q, tr_b.clone());
        push(lindblad.n_eq_q * lindblad.kappa_1q, tr_bdag.clone());
        push(
            2.0 * lindblad.kappa_phi_q,
            (0..d as u32)
                .filter(|&i| diag_nb[i as usize] != 0.0)
                .map(|i| (i, i, C64::new(diag_nb[i as usize], 0.0)))
                .collect(),
        );
        push((1.0 + lindblad.n_eq_r) * lindblad.kappa_1r, tr_c.clone());
        push(lindblad.n_eq_r * lindblad.kappa_1r, tr_cdag.clone());
        push(
            2.0 * lindblad.kappa_phi_r,
            (0..d as u32)
                .map(|i| {
                    let (_, _, nr) = dims.unindex(i as usize);
                    (i, i, C64::new(nr as f64, 0.0))
                })
                .filter(|&(_, _, v)| v != c0())
                .collect(),
        );

        let any_rate = lindblad.kappa_1s > 0.0
            || lindblad.kappa_1q > 0.0
            || lindblad.kappa_1r > 0.0
            || lindblad.kappa_phi_s > 0.0
            || lindblad.kappa_phi_q > 0.0
            || lindblad.kappa_phi_r > 0.0;

        let f0g1_conv = f0g1_coupling(jc, C64::new(1.0, 0.0)).unwrap_or(c0());
        let stark_conv = ac_stark_shift(jc, C64::new(1.0, 0.0)).unwrap_or(0.0);
        let pattern_a = mk(tr_a);
        let pattern_adag = mk(tr_adag);
        let pattern_na = diag_na.clone();

        Self {
            dims,
            d,
            displaced,
            frame,
            schedule,
            diag_static,
            gamma_diag,
            diag_na,
            diag_nb,
            diag_nanb,
            diag_nb2,
            diag_na_sq,
            diag_2nap1,
            patterns,
            jumps,
            kappa_phi_s: lindblad.kappa_phi_s,
            pattern_a,
            pattern_adag,
            pattern_na,
            k_q: params.k_q,
            k_s: params.k_s,
            chi_sq: params.chi_sq,
            chi_s2q: params.chi_s2q,
            chi_sq2,
            kappa_1s: lindblad.kappa_1s,
            delta_s,
            f0g1_conv,
            stark_conv,
            pure_ok: !any_rate,
        }
    }

    fn alpha_at(&self, t: f64) -> C64 {
        if self.displaced {
            self.schedule.storage_alpha(t).unwrap_or(c0())
        } else {
            c0()
        }
    }

    /// Scalar coefficients of every term at time `t`.
    fn coeffs(&self, t: f64) -> Coeffs {
        let alpha = self.alpha_at(t);
        let a2 = alpha.norm_sqr();
        let eps_s = if self.displaced {
            c0()
        } else {
            self.schedule.channel_value(DriveChannel::Storage, t)
        };

        let c_ge_res = self.schedule.channel_value(DriveChannel::AuxiliaryGe, t);
        let c_ef_res = self.schedule.channel_value(DriveChannel::AuxiliaryEf, t);
        let (c_ge, c_ef) = if c_ge_res != c0() || c_ef_res != c0() {
            let beat = C64::new(0.0, self.k_q * t).exp();
            (
                c_ge_res + c_ef_res * beat.conj(),
                c_ef_res + c_ge_res * beat,
            )
        } else {
            (c0(), c0())
        };

        let c_f_raw = self.schedule.channel_value(DriveChannel::F0g1, t);
        let g_tilde = self.f0g1_conv * c_f_raw;
        let stark = self.stark_conv * c_f_raw.norm_sqr();

        let i = C64::new(0.0, 1.0);
        let kphis = self.kappa_phi_s;

        let c_adag = if self.displaced {
            alpha * self.delta_s + alpha * (self.k_s * a2) - i * alpha * (0.5 * self.kappa_1s)
        } else {
            eps_s
        };
        let c_adag2 = alpha * alpha * (0.5 * self.k_s);
        let c_adag2a = alpha * self.k_s;
        let c_nb_adag = alpha * (2.0 * self.chi_sq) + alpha * (4.0 * self.chi_s2q * a2);
        let c_nb_adag2 = alpha * alpha * (2.0 * self.chi_s2q);
        let c_nb_adag2a = alpha * (4.0 * self.chi_s2q);
        let c_nb2_adag = alpha * (2.0 * self.chi_sq2);

        let mut off = [c0(); 22];
        off[0] = c_adag;
        off[1] = c_adag.conj();
        off[2] = c_adag2 - i * kphis * alpha * alpha;
        off[3] = c_adag2.conj() - i * kphis * (alpha.conj() * alpha.conj());
        off[4] = c_adag2a;
        off[5] = c_adag2a.conj();
        off[6] = c_nb_adag;
        off[7] = c_nb_adag.conj();
        off[8] = c_nb_adag2;
        off[9] = c_nb_adag2.conj();
        off[10] = c_nb_adag2a;
        off[11] = c_nb_adag2a.conj();
        off[12] = c_nb2_adag;
        off[13] = c_nb2_adag.conj();
        off[14] = -i * kphis * alpha.conj(); // n̂a + an̂
        off[15] = -i * kphis * alpha; // n̂a† + a†n̂
        off[16] = c_ge;
        off[17] = c_ge.conj();
        off[18] = c_ef;
        off[19] = c_ef.conj();
        off[20] = g_tilde;
        off[21] = g_tilde.conj();

        Coeffs {
            alpha,
            alpha_sq: a2,
            stark,
            off,
            any_off: off.iter().any(|c| *c != c0()),
        }
    }

    /// Assemble the complex diagonal of H_eff at these coefficients.
    fn assemble_diag(&self, co: &Coeffs, out: &mut [C64]) {
        let kphis = self.kappa_phi_s;
        let a2 = co.alpha_sq;
        let d_na = self.k_s * 2.0 * a2;
        let d_nb = 2.0 * self.chi_sq * a2 + 2.0 * self.chi_s2q * a2 * a2 + co.stark;
        let d_nanb = 4.0 * self.chi_s2q * a2;
        let d_nb2 = 2.0 * self.chi_sq2 * a2;
        for i in 0..self.d {
            let herm = self.diag_static[i]
                + d_na * self.diag_na[i]
                + d_nb * self.diag_nb[i]
                + d_nanb * self.diag_nanb[i]
                + d_nb2 * self.diag_nb2[i];
            let anti = 0.5 * self.gamma_diag[i]
                + kphis * (self.diag_na_sq[i] + a2 * self.diag_2nap1[i]);
            out[i] = C64::new(herm, -anti);
        }
    }
}

struct Coeffs {
    alpha: C64,
    alpha_sq: f64,
    stark: f64,
    off: [C64; 22],
    any_off: bool,
}

// ---------------------------------------------------------------------------
// RHS evaluation
// ---------------------------------------------------------------------------

struct Workspace {
    diag: Vec<C64>,
    acc1: Vec<C64>,
    acc2: Vec<C64>,
    v: Vec<C64>,
}

impl Workspace {
    fn new(n: usize, d: usize) -> Self {
        Self {
            diag: vec![c0(); d],
            acc1: vec![c0(); n],
            acc2: vec![c0(); n],
            v: vec![c0(); n],
        }
    }
}

/// dρ/dt for the density-matrix path.
fn rhs_density(model: &LindbladModel, t: f64, rho: &[C64], out: &mut [C64], ws: &mut Workspace) {
    let d = model.d;
    let co = model.coeffs(t);
    model.assemble_diag(&co, &mut ws.diag);

    // acc1 = H_eff ρ ; acc2 = ρ H_eff†
    ws.acc1.iter_mut().for_each(|x| *x = c0());
    ws.acc2.iter_mut().for_each(|x| *x = c0());
    for i in 0..d {
        let di = ws.diag[i];
        let rrow = &rho[i * d..(i + 1) * d];
        let orow = &mut ws.acc1[i * d..(i + 1) * d];
        for (o, r) in orow.iter_mut().zip(rrow.iter()) {
            *o += di * r;
        }
    }
    for i in 0..d {
        let rrow = &rho[i * d..(i + 1) * d];
        let orow = &mut ws.acc2[i * d..(i + 1) * d];
        for (o, (r, dj)) in orow.iter_mut().zip(rrow.iter().zip(ws.diag.iter())) {
            *o += r * dj.conj();
        }
    }
    if co.any_off {
        for (k, pat) in model.patterns.iter().enumerate() {
            let c = co.off[k];
            if c != c0() {
                left_csr(pat, c, rho, &mut ws.acc1, d);
                right_csr_dagger(pat, c.conj(), rho, &mut ws.acc2, d);
            }
        }
    }
    // out = -i (acc1 - acc2)
    let mi = C64::new(0.0, -1.0);
    for ((o, a), b) in out.iter_mut().zip(ws.acc1.iter()).zip(ws.acc2.iter()) {
        *o = mi * (a - b);
    }

    // Constant-rate jump sandwiches: out += κ (J ρ) J†.
    for j in &model.jumps {
        ws.v.iter_mut().for_each(|x| *x = c0());
        left_csr(&j.pattern, C64::new(1.0, 0.0), rho, &mut ws.v, d);
        right_csr_dagger(&j.pattern, C64::new(j.rate, 0.0), &ws.v, out, d);
    }

    // Storage dephasing with the displaced jump Â†Â = n̂ + α* a + α a†.
    if model.kappa_phi_s > 0.0 {
        ws.v.iter_mut().for_each(|x| *x = c0());
        // v = O ρ
        for i in 0..d {
            let w = model.pattern_na[i];
            if w != 0.0 {
                let rrow = &rho[i * d..(i + 1) * d];
                let orow = &mut ws.v[i * d..(i + 1) * d];
                for (o, r) in orow.iter_mut().zip(rrow.iter()) {
                    *o += w * r;
                }
            }
        }
        if co.alpha != c0() {
            left_csr(&model.pattern_a, co.alpha.conj(), rho, &mut ws.v, d);
            left_csr(&model.pattern_adag, co.alpha, rho, &mut ws.v, d);
        }
        // out += 2κ_φs (v O)   [O Hermitian]
        let rate = C64::new(2.0 * model.kappa_phi_s, 0.0);
        for i in 0..d {
            let vrow = &ws.v[i * d..(i + 1) * d];
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                let w = model.pattern_na[j];
                if w != 0.0 {
                    orow[j] += rate * vrow[j] * w;
                }
            }
        }
        if co.alpha != c0() {
            right_csr(&model.pattern_a, rate * co.alpha.conj(), &ws.v, out, d);
            right_csr(&model.pattern_adag, rate * co.alpha, &ws.v, out, d);
        }
    }
}

/// dψ/dt for the pure-state fast path (all rates zero).
fn rhs_pure(model: &LindbladModel, t: f64, psi: &[C64], out: &mut [C64], ws: &mut Workspace) {
    let d = model.d;
    let co = model.coeffs(t);
    model.assemble_diag(&co, &mut ws.diag);
    let mi = C64::new(0.0, -1.0);
    for i in 0..d {
        out[i] = ws.diag[i] * psi[i];
    }
    if co.any_off {
        for (k, pat) in model.patterns.iter().enumerate() {
            let c = co.off[k];
            if c == c0() || pat.is_empty() {
                continue;
            }
            for i in 0..d {
                let lo = pat.row_ptr[i] as usize;
                let hi = pat.row_ptr[i + 1] as usize;
                for e in lo..hi {
                    out[i] += c * pat.vals[e] * psi[pat.cols[e] as usize];
                }
            }
        }
    }
    for o in out.iter_mut() {
        *o = mi * *o;
    }
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4) adaptive stepper
// ---------------------------------------------------------------------------

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Evolve a flat state (vector or vectorized density matrix) from t0 to t1.
#[allow(clippy::too_many_arguments)]
fn integrate<F>(
    mut rhs: F,
    y: &mut Vec<C64>,
    t0: f64,
    t1: f64,
    events: &[f64],
    driven_cap: impl Fn(f64) -> Option<f64>,
    opts: &EvolveOptions,
    mut on_accept: impl FnMut(f64, &mut Vec<C64>),
) -> Result<(usize, usize), EngineError>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let n = y.len();
    let mut k: Vec<Vec<C64>> = (0..7).map(|_| vec![c0(); n]).collect();
    let mut ytmp = vec![c0(); n];
    let mut t = t0;
    let mut h = opts.initial_step.min(t1 - t0).max(1e-18);
    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut k1_fresh = false;

    while t < t1 - 1e-18 * t1.abs().max(1.0) {
        // Cap by the next event and the driven-segment limit.
        let mut cap = t1 - t;
        if let Some(next) = events.iter().find(|&&e| e > t + 1e-15) {
            cap = cap.min(next - t);
        }
        if let Some(dc) = driven_cap(t) {
            cap = cap.min(dc);
        }
        let mut h_try = h.min(cap).max(1e-16);

        if !k1_fresh {
            rhs(t, y, &mut k[0]);
        }

        loop {
            // Stages 2..7.
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = c0();
                    for (j, kj) in k.iter().enumerate().take(s) {
                        let a = DP_A[s - 1][j];
                        if a != 0.0 {
                            acc += kj[i] * a;
                        }
                    }
                    ytmp[i] = y[i] + acc * h_try;
                }
                let ts = t + DP_C[s] * h_try;
                let (head, tail) = k.split_at_mut(s);
                let _ = head;
                rhs(ts, &ytmp, &mut tail[0]);
            }
            // 5th-order solution and embedded error.
            let mut err_sq = 0.0_f64;
            for i in 0..n {
                let mut y5 = c0();
                let mut y4 = c0();
                for s in 0..7 {
                    if DP_B5[s] != 0.0 {
                        y5 += k[s][i] * DP_B5[s];
                    }
                    if DP_B4[s] != 0.0 {
                        y4 += k[s][i] * DP_B4[s];
                    }
                }
                let ynew = y[i] + y5 * h_try;
                let e = (y5 - y4) * h_try;
                let scale = opts.atol + opts.rtol * y[i].norm().max(ynew.norm());
                let w = e.norm() / scale;
                err_sq += w * w;
                ytmp[i] = ynew;
            }
            let err = (err_sq / n as f64).sqrt();

            if err <= 1.0 {
                t += h_try;
                std::mem::swap(y, &mut ytmp);
                // FSAL: k7 was evaluated at (t, y_new).
                k.swap(0, 6);
                k1_fresh = true;
                steps += 1;
                on_accept(t, y);
                let fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h = (h_try * fac).min(t1 - t0);
                break;
            }
            rejected += 1;
            k1_fresh = false;
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            h_try *= fac;
            if h_try < 1e-16 {
                return Err(EngineError::StepSizeUnderflow { t, h: h_try });
            }
        }
        if steps > 100_000_000 {
            return Err(EngineError::ToleranceViolation(
                "step budget exhausted".into(),
            ));
        }
    }
    Ok((steps, rejected))
}

// ---------------------------------------------------------------------------
// Public evolution entry points
// ---------------------------------------------------------------------------

/// Bundle of model parameters used by the evolution routines.
#[derive(Clone, Copy)]
pub struct SimContext<'a> {
    pub params: &'a DispersiveParams,
    pub jc: &'a JcParams,
    pub lindblad: &'a LindbladParams,
}

fn run_model(
    model: &LindbladModel,
    state: &QuantumState,
    t0: f64,
    t1: f64,
    opts: &EvolveOptions,
) -> Result<EvolutionResult, EngineError> {
    if state.dims.total() != model.d {
        return Err(EngineError::DimMismatch {
            state: state.dims.total(),
            model: model.d,
        });
    }
    let d = model.d;

    // Event times: segment support edges and sampling times.
    let mut events: Vec<f64> = Vec::new();
    for seg in &model.schedule.segments {
        events.push(seg.envelope.support_start());
        events.push(seg.envelope.support_end());
    }
    events.extend(opts.sample_times.iter().copied());
    events.push(t1);
    events.retain(|&e| e > t0 && e <= t1);
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());
    events.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let schedule = &model.schedule;
    let driven_cap = |t: f64| -> Option<f64> {
        if schedule.any_active(t) {
            Some(opts.max_step_driven)
        } else {
            None
        }
    };

    let pure_path = model.pure_ok && state.is_pure();
    let mut ws = Workspace::new(if pure_path { d } else { d * d }, d);

    let mut max_trace_drift = 0.0_f64;
    let mut max_herm = 0.0_f64;
    let mut samples: Vec<(f64, Vec<C64>)> = Vec::new();
    let mut sample_cursor = 0usize;
    let sample_times = {
        let mut s = opts.sample_times.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s
    };

    let result_state: QuantumState;
    let steps;
    let rejected;

    if pure_path {
        let mut y: Vec<C64> = match &state.repr {
            StateRepr::Pure(v) => v.to_vec(),
            StateRepr::Density(_) => unreachable!(),
        };
        let (s, r) = integrate(
            |t, y, out| rhs_pure(model, t, y, out, &mut ws),
            &mut y,
            t0,
            t1,
            &events,
            driven_cap,
            opts,
            |t, y| {
                let norm_sq: f64 = y.iter().map(|c| c.norm_sqr()).sum();
                max_trace_drift = max_trace_drift.max((norm_sq - 1.0).abs());
                while sample_cursor < sample_times.len() && t >= sample_times[sample_cursor] - 1e-15
                {
                    let vals = opts
                        .observables
                        .iter()
                        .map(|m| {
                            let mv = m.dot(&Array1::from_vec(y.clone()));
                            y.iter()
                                .zip(mv.iter())
                                .map(|(a, b)| a.conj() * b)
                                .sum::<C64>()
                        })
                        .collect();
                    samples.push((sample_times[sample_cursor], vals));
                    sample_cursor += 1;
                }
            },
        )?;
        steps = s;
        rejected = r;
        result_state = QuantumState {
            dims: state.dims,
            repr: StateRepr::Pure(Array1::from_vec(y)),
        };
    } else {
        let rho0 = state.density_matrix();
        let mut y: Vec<C64> = rho0.iter().copied().collect();
        let (s, r) = integrate(
            |t, y, out| rhs_density(model, t, y, out, &mut ws),
            &mut y,
            t0,
            t1,
            &events,
            driven_cap,
            opts,
            |t, y| {
                // Re-symmetrize and track drift diagnostics.
                let mut herm = 0.0_f64;
                for i in 0..d {
                    for j in (i + 1)..d {
                        let a = y[i * d + j];
                        let b = y[j * d + i].conj();
                        herm = herm.max((a - b).norm());
                        let m = (a + b) * 0.5;
                        y[i * d + j] = m;
                        y[j * d + i] = m.conj();
                    }
                    let di = y[i * d + i];
                    herm = herm.max(di.im.abs());
                    y[i * d + i] = C64::new(di.re, 0.0);
                }
                max_herm = max_herm.max(herm);
                let tr: f64 = (0..d).map(|i| y[i * d + i].re).sum();
                max_trace_drift = max_trace_drift.max((tr - 1.0).abs());
                while sample_cursor < sample_times.len() && t >= sample_times[sample_cursor] - 1e-15
                {
                    let vals = opts
                        .observables
                        .iter()
                        .map(|m| {
                            let mut acc = c0();
                            for i in 0..d {
                                for j in 0..d {
                                    acc += y[i * d + j] * m[[j, i]];
                                }
                            }
                            acc
                        })
                        .collect();
                    samples.push((sample_times[sample_cursor], vals));
                    sample_cursor += 1;
                }
            },
        )?;
        steps = s;
        rejected = r;
        let rho = Array2::from_shape_vec((d, d), y).expect("shape");
        result_state = QuantumState {
            dims: state.dims,
            repr: StateRepr::Density(rho),
        };
    }

    let alpha_end = if model.displaced {
        Some(model.schedule.storage_alpha(t1)?)
    } else {
        None
    };

    Ok(EvolutionResult {
        state: result_state,
        alpha_end,
        steps,
        rejected_steps: rejected,
        max_trace_drift,
        max_hermiticity_defect: max_herm,
        samples,
    })
}

/// Evolve under the dispersive model with drives applied directly (no
/// displaced frame). The storage rotates in the chosen frame; drive
/// envelopes act as written in the schedule.
pub fn evolve(
    state: &QuantumState,
    ctx: &SimContext,
    schedule: &PulseSchedule,
    frame: StorageFrame,
    t_span: (f64, f64),
    opts: &EvolveOptions,
) -> Result<EvolutionResult, EngineError> {
    let model = LindbladModel::new(
        state.dims,
        ctx.params,
        ctx.jc,
        ctx.lindblad,
        schedule.clone(),
        frame,
        false,
    );
    run_model(&model, state, t_span.0, t_span.1, opts)
}

/// Evolve in the displaced rotating storage frame: storage drive segments
/// define α(t) and are absorbed into the frame; the state stays small even
/// for large coherent excursions. The storage drive must be in the drive
/// frame (Δ_s = χ_sq).
pub fn evolve_displaced(
    state: &QuantumState,
    ctx: &SimContext,
    schedule: &PulseSchedule,
    t_span: (f64, f64),
    opts: &EvolveOptions,
) -> Result<EvolutionResult, EngineError> {
    // Surface detuned storage segments as an error up front.
    schedule.storage_alpha(t_span.1)?;
    let model = LindbladModel::new(
        state.dims,
        ctx.params,
        ctx.jc,
        ctx.lindblad,
        schedule.clone(),
        StorageFrame::Drive,
        true,
    );
    run_model(&model, state, t_span.0, t_span.1, opts)
}

/// Drive-free evolution for `duration` in the dressed storage frame
/// (idle-time fast path; the static Hamiltonian is diagonal there).
pub fn evolve_static_segment(
    state: &QuantumState,
    ctx: &SimContext,
    duration: f64,
    opts: &EvolveOptions,
) -> Result<EvolutionResult, EngineError> {
    if duration == 0.0 {
        return Ok(EvolutionResult {
            state: state.clone(),
            alpha_end: None,
            steps: 0,
            rejected_steps: 0,
            max_trace_drift: 0.0,
            max_hermiticity_defect: 0.0,
            samples: Vec::new(),
        });
    }
    let model = LindbladModel::new(
        state.dims,
        ctx.params,
        ctx.jc,
        ctx.lindblad,
        PulseSchedule::new(),
        StorageFrame::Dressed,
        false,
    );
    run_model(&model, state, 0.0, duration, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{eigh, number_op, partial_trace, Mode};
    use crate::pulse::Envelope;
    use crate::system::paper;
    use crate::TWO_PI;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn trace_distance(a: &QuantumState, b: &QuantumState) -> f64 {
        let diff = a.density_matrix() - b.density_matrix();
        let (evals, _) = eigh(&diff);
        0.5 * evals.iter().map(|l| l.abs()).sum::<f64>()
    }

    fn zero_lindblad() -> LindbladParams {
        LindbladParams {
            kappa_1s: 0.0,
            kappa_1q: 0.0,
            kappa_1r: 0.0,
            kappa_phi_s: 0.0,
            kappa_phi_q: 0.0,
            kappa_phi_r: 0.0,
            n_eq_s: 0.0,
            n_eq_q: 0.0,
            n_eq_r: 0.0,
            eps_g: 0.0,
            eps_e: 0.0,
        }
    }

    #[test]
    fn diagonal_hamiltonian_preserves_populations() {
        let dims = ModeDims::new(4, 2, 1);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = zero_lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let mut v = Array1::<C64>::zeros(dims.total());
        v[dims.index(2, 1, 0)] = c(0.6, 0.0);
        v[dims.index(1, 0, 0)] = c(0.0, 0.8);
        let st = QuantumState::pure(dims, v);
        let res = evolve_static_segment(&st, &ctx, 5e-6, &EvolveOptions::default()).unwrap();
        // Populations unchanged; only phases evolve.
        if let StateRepr::Pure(out) = &res.state.repr {
            assert_abs_diff_eq!(out[dims.index(2, 1, 0)].norm(), 0.6, epsilon = 1e-8);
            assert_abs_diff_eq!(out[dims.index(1, 0, 0)].norm(), 0.8, epsilon = 1e-8);
        } else {
            panic!("expected pure output");
        }
    }

    #[test]
    fn single_mode_decay_matches_exponential() {
        let dims = ModeDims::new(3, 1, 1);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let mut lb = zero_lindblad();
        lb.kappa_1s = TWO_PI * 0.474e3;
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let st = QuantumState::basis(dims, 1, 0, 0);
        let t = 150e-6;
        let res = evolve_static_segment(&st, &ctx, t, &EvolveOptions::default()).unwrap();
        let n_op = crate::hilbert::embed(&number_op(3), Mode::Storage, dims).unwrap();
        let n = crate::hilbert::expectation(&res.state, &n_op).re;
        let expect = (-lb.kappa_1s * t).exp();
        assert_abs_diff_eq!(n, expect, epsilon = 1e-7);
        assert!(res.max_trace_drift < 1e-9);
    }

    #[test]
    fn auxiliary_thermal_steady_state() {
        // n̄_q = 0.0038, κ_1q/2π = 4.81 kHz from |g⟩ → p_e ≈ 0.38% at late times.
        let dims = ModeDims::new(1, 3, 1);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = paper::lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let st = QuantumState::basis(dims, 0, 0, 0);
        let res = evolve_static_segment(&st, &ctx, 300e-6, &EvolveOptions::default()).unwrap();
        let rho = res.state.density_matrix();
        let p_e = rho[[dims.index(0, 1, 0), dims.index(0, 1, 0)]].re;
        assert!((p_e - 0.0038).abs() < 2e-4, "p_e = {p_e:.5}");
    }

    #[test]
    fn zero_duration_is_identity() {
        let dims = ModeDims::new(3, 2, 1);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = paper::lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let st = QuantumState::basis(dims, 1, 1, 0);
        let res = evolve_static_segment(&st, &ctx, 0.0, &EvolveOptions::default()).unwrap();
        assert_eq!(res.steps, 0);
        assert!(trace_distance(&st, &res.state) < 1e-14);
    }

    #[test]
    fn ge_pi_pulse_transfers_population() {
        let dims = ModeDims::new(1, 3, 1);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = zero_lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let theta = 24e-9;
        let eps0 = std::f64::consts::PI / (2.0 * theta);
        let mut sched = PulseSchedule::new();
        sched.append(
            DriveChannel::AuxiliaryGe,
            Envelope::new(c(eps0, 0.0), theta, 0.0, 0.0),
            0.0,
            0.0,
            0.0,
            -1.0 / params.k_q, // DRAG
        );
        let st = QuantumState::basis(dims, 0, 0, 0);
        let res = evolve(
            &st,
            &ctx,
            &sched,
            StorageFrame::Drive,
            sched.evolution_span(),
            &EvolveOptions::default(),
        )
        .unwrap();
        let rho = res.state.density_matrix();
        let p_e = rho[[1, 1]].re;
        let p_f = rho[[2, 2]].re;
        assert!(p_e > 0.998, "π pulse transferred only p_e = {p_e:.5}");
        assert!(p_f < 5e-4, "leakage p_f = {p_f:.2e}");
    }

    #[test]
    fn displaced_equals_lab_frame_for_small_drive() {
        // Closed system: drive a small coherent pulse; the displaced-frame
        // run on a 10-dim storage must match the direct run on 24 dims.
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = zero_lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let eps0 = 2.0e7;
        let mut sched = PulseSchedule::new();
        sched.append(
            DriveChannel::Storage,
            Envelope::new(c(eps0, 0.0), 24e-9, 0.0, 0.0),
            0.0,
            0.0,
            0.3,
            0.0,
        );
        let (t_lo, t_hi) = sched.evolution_span();
        let span = (t_lo, t_hi + 10e-9);

        let dims_small = ModeDims::new(10, 2, 1);
        let st_small = QuantumState::basis(dims_small, 0, 1, 0);
        let res_disp =
            evolve_displaced(&st_small, &ctx, &sched, span, &EvolveOptions::default()).unwrap();
        let lab_small = res_disp.state_undisplaced().unwrap();

        let dims_big = ModeDims::new(24, 2, 1);
        let st_big = QuantumState::basis(dims_big, 0, 1, 0);
        let res_lab = evolve(
            &st_big,
            &ctx,
            &sched,
            StorageFrame::Drive,
            span,
            &EvolveOptions::default(),
        )
        .unwrap();

        // Compare reduced storage states on the common 10-dim subspace.
        let red_small = partial_trace(&lab_small, &[Mode::Storage]).density_matrix();
        let red_big_full = partial_trace(&res_lab.state, &[Mode::Storage]).density_matrix();
        let mut diff_max = 0.0_f64;
        for i in 0..10 {
            for j in 0..10 {
                diff_max = diff_max.max((red_small[[i, j]] - red_big_full[[i, j]]).norm());
            }
        }
        assert!(
            diff_max < 1e-7,
            "displaced vs lab frame element mismatch {diff_max:.2e}"
        );
    }

    #[test]
    fn displaced_equals_lab_frame_with_dissipation() {
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = paper::lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let eps0 = 1.5e7;
        let mut sched = PulseSchedule::new();
        sched.append(
            DriveChannel::Storage,
            Envelope::new(c(eps0, 0.0), 24e-9, 0.0, 0.0),
            0.0,
            0.0,
            0.0,
            0.0,
        );
        let (t_lo, t_hi) = sched.evolution_span();
        let span = (t_lo, t_hi + 20e-9);

        let dims_small = ModeDims::new(8, 2, 1);
        let st_small = QuantumState::basis(dims_small, 0, 0, 0).into_density();
        let res_disp =
            evolve_displaced(&st_small, &ctx, &sched, span, &EvolveOptions::default()).unwrap();
        let lab_small = res_disp.state_undisplaced().unwrap();

        let dims_big = ModeDims::new(20, 2, 1);
        let st_big = QuantumState::basis(dims_big, 0, 0, 0).into_density();
        let res_lab = evolve(
            &st_big,
            &ctx,
            &sched,
            StorageFrame::Drive,
            span,
            &EvolveOptions::default(),
        )
        .unwrap();

        let red_small = partial_trace(&lab_small, &[Mode::Storage]).density_matrix();
        let red_big = partial_trace(&res_lab.state, &[Mode::Storage]).density_matrix();
        let mut diff_max = 0.0_f64;
        for i in 0..8 {
            for j in 0..8 {
                diff_max = diff_max.max((red_small[[i, j]] - red_big[[i, j]]).norm());
            }
        }
        assert!(diff_max < 1e-6, "open-system frame mismatch {diff_max:.2e}");
        assert!(res_disp.max_trace_drift < 1e-8);
        assert!(res_disp.max_hermiticity_defect < 1e-8);
    }

    #[test]
    fn static_segment_matches_generic_evolve() {
        let dims = ModeDims::new(6, 3, 2);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = paper::lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let mut v = Array1::<C64>::zeros(dims.total());
        v[dims.index(3, 1, 1)] = c(0.5, 0.0);
        v[dims.index(2, 0, 0)] = c(0.5, 0.5);
        v[dims.index(0, 2, 0)] = c(0.0, 0.5);
        let st = QuantumState::pure(dims, v).into_density();
        let dur = 2e-6;
        let a = evolve_static_segment(&st, &ctx, dur, &EvolveOptions::default()).unwrap();
        let b = evolve(
            &st,
            &ctx,
            &PulseSchedule::new(),
            StorageFrame::Dressed,
            (0.0, dur),
            &EvolveOptions::default(),
        )
        .unwrap();
        assert!(trace_distance(&a.state, &b.state) < 1e-8);
    }

    #[test]
    fn convergence_under_tolerance_halving() {
        let dims = ModeDims::new(4, 3, 2);
        let params = paper::dispersive_sim();
        let jc = paper::fitted_jc();
        let lb = paper::lindblad();
        let ctx = SimContext {
            params: &params,
            jc: &jc,
            lindblad: &lb,
        };
        let st = QuantumState::basis(dims, 1, 1, 0).into_density();
        let run = |rtol: f64| {
            let opts = EvolveOptions {
                rtol,
                atol: rtol * 1e-2,
                ..EvolveOptions::default()
            };
            evolve_static_segment(&st, &ctx, 10e-6, &opts).unwrap().state
        };
        let loose = run(1e-8);
        let tight = run(5e-9);
        assert!(trace_distance(&loose, &tight) < 10.0 * 1e-8);
    }
}
