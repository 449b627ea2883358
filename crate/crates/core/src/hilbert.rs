//! Truncated-Fock-space linear algebra for the three-mode system.
//!
//! The tensor order is fixed throughout the crate as
//! storage ⊗ auxiliary ⊗ resonator, with the flat index
//! `(n_s * d_q + n_q) * d_r + n_r`. Single-mode operators are plain
//! `Array2<C64>` matrices in the Fock basis; [`embed`] lifts them to the
//! full space as an [`Operator`].

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::C64;

#[derive(Debug, Error)]
pub enum HilbertError {
    #[error("dimension mismatch: operator is {op}×{op}, mode {mode:?} has dimension {dim}")]
    DimensionMismatch { op: usize, mode: Mode, dim: usize },
    #[error("operator dimensions {a}×{a} and {b}×{b} are incompatible")]
    OperatorMismatch { a: usize, b: usize },
    #[error("input is not a valid state: {0}")]
    NonState(String),
    #[error("coherent-state truncation loss {loss:.3e} exceeds {limit:.1e} (|α|={alpha:.3}, dim={dim})")]
    TruncationLoss {
        loss: f64,
        limit: f64,
        alpha: f64,
        dim: usize,
    },
    #[error("matrix is not Hermitian: max |M - M†| = {0:.3e}")]
    NotHermitian(f64),
}

/// Which of the three physical modes an operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Storage,
    Auxiliary,
    Resonator,
}

/// Truncation sizes of the three modes.
///
/// The auxiliary levels |g⟩, |e⟩, |f⟩, … are counted from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModeDims {
    pub storage: usize,
    pub auxiliary: usize,
    pub resonator: usize,
}

impl ModeDims {
    pub fn new(storage: usize, auxiliary: usize, resonator: usize) -> Self {
        assert!(
            storage >= 1 && auxiliary >= 1 && resonator >= 1,
            "all mode dimensions must be ≥ 1"
        );
        Self {
            storage,
            auxiliary,
            resonator,
        }
    }

    pub fn total(&self) -> usize {
        self.storage * self.auxiliary * self.resonator
    }

    pub fn dim_of(&self, mode: Mode) -> usize {
        match mode {
            Mode::Storage => self.storage,
            Mode::Auxiliary => self.auxiliary,
            Mode::Resonator => self.resonator,
        }
    }

    /// Flat index of the product basis state |n_s, n_q, n_r⟩.
    pub fn index(&self, n_s: usize, n_q: usize, n_r: usize) -> usize {
        debug_assert!(n_s < self.storage && n_q < self.auxiliary && n_r < self.resonator);
        (n_s * self.auxiliary + n_q) * self.resonator + n_r
    }

    /// Inverse of [`ModeDims::index`].
    pub fn unindex(&self, i: usize) -> (usize, usize, usize) {
        let n_r = i % self.resonator;
        let rest = i / self.resonator;
        (rest / self.auxiliary, rest % self.auxiliary, n_r)
    }
}

/// An operator on the full three-mode space.
#[derive(Debug, Clone)]
pub struct Operator {
    pub dims: ModeDims,
    pub matrix: Array2<C64>,
}

impl Operator {
    pub fn new(dims: ModeDims, matrix: Array2<C64>) -> Self {
        assert_eq!(matrix.nrows(), dims.total());
        assert_eq!(matrix.ncols(), dims.total());
        Self { dims, matrix }
    }

    pub fn identity(dims: ModeDims) -> Self {
        Self::new(dims, Array2::eye(dims.total()))
    }

    /// Max-norm deviation from Hermiticity, max |M - M†|.
    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.matrix)
    }
}

pub fn hermiticity_defect(m: &Array2<C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            let d = (m[[i, j]] - m[[j, i]].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Fock lowering operator: entry (n-1, n) = √n.
pub fn annihilation(dim: usize) -> Array2<C64> {
    assert!(dim >= 1);
    let mut a = Array2::zeros((dim, dim));
    for n in 1..dim {
        a[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

/// Fock number operator, diag(0, 1, 2, …).
pub fn number_op(dim: usize) -> Array2<C64> {
    Array2::from_diag(&Array1::from_iter((0..dim).map(|n| C64::new(n as f64, 0.0))))
}

/// Photon-number parity, diag((-1)^n).
pub fn parity_operator(dim: usize) -> Array2<C64> {
    Array2::from_diag(&Array1::from_iter(
        (0..dim).map(|n| C64::new(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0)),
    ))
}

/// Dense Kronecker product.
pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            let aij = a[[i, j]];
            if aij == C64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..rb {
                for l in 0..cb {
                    out[[i * rb + k, j * cb + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

/// Tensor product of three single-mode operators in storage ⊗ auxiliary ⊗ resonator order.
pub fn tensor3(s: &Array2<C64>, q: &Array2<C64>, r: &Array2<C64>) -> Array2<C64> {
    kron(&kron(s, q), r)
}

/// Lift a single-mode operator to the full space, identity on the other modes.
pub fn embed(op: &Array2<C64>, mode: Mode, dims: ModeDims) -> Result<Operator, HilbertError> {
    let d = dims.dim_of(mode);
    if op.nrows() != d || op.ncols() != d {
        return Err(HilbertError::DimensionMismatch {
            op: op.nrows(),
            mode,
            dim: d,
        });
    }
    let eye_s = Array2::eye(dims.storage);
    let eye_q = Array2::eye(dims.auxiliary);
    let eye_r = Array2::eye(dims.resonator);
    let matrix = match mode {
        Mode::Storage => tensor3(op, &eye_q, &eye_r),
        Mode::Auxiliary => tensor3(&eye_s, op, &eye_r),
        Mode::Resonator => tensor3(&eye_s, &eye_q, op),
    };
    Ok(Operator::new(dims, matrix))
}

/// Fraction of a coherent state |α⟩ lost to Fock truncation at `dim`,
/// 1 - e^{-|α|²} Σ_{n<dim} |α|^{2n}/n!.
pub fn coherent_norm_loss(alpha: C64, dim: usize) -> f64 {
    let x = alpha.norm_sqr();
    let mut term = (-x).exp();
    let mut kept = 0.0;
    for n in 0..dim {
        kept += term;
        term *= x / (n as f64 + 1.0);
    }
    (1.0 - kept).max(0.0)
}

/// Displacement operator D(α) = exp(α a† - α* a) on a `dim`-dimensional Fock space.
pub fn displacement(alpha: C64, dim: usize) -> Array2<C64> {
    let mut m = Array2::<C64>::zeros((dim, dim));
    for n in 1..dim {
        let root = C64::new((n as f64).sqrt(), 0.0);
        m[[n, n - 1]] = alpha * root;
        m[[n - 1, n]] = -alpha.conj() * root;
    }
    matrix_exp(&m)
}

/// Like [`displacement`], but fails when the implied coherent-state norm loss
/// exceeds `1e-6`, signalling that the truncation cannot support |α⟩.
pub fn displacement_checked(alpha: C64, dim: usize) -> Result<Array2<C64>, HilbertError> {
    let loss = coherent_norm_loss(alpha, dim);
    if loss > 1e-6 {
        return Err(HilbertError::TruncationLoss {
            loss,
            limit: 1e-6,
            alpha: alpha.norm(),
            dim,
        });
    }
    Ok(displacement(alpha, dim))
}

/// A state of the full three-mode system, pure or mixed.
#[derive(Debug, Clone)]
pub enum StateRepr {
    Pure(Array1<C64>),
    Density(Array2<C64>),
}

#[derive(Debug, Clone)]
pub struct QuantumState {
    pub dims: ModeDims,
    pub repr: StateRepr,
}

impl QuantumState {
    pub fn pure(dims: ModeDims, mut vec: Array1<C64>) -> Self {
        assert_eq!(vec.len(), dims.total());
        let norm = vec.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(norm > 0.0, "zero state vector");
        vec.mapv_inplace(|c| c / norm);
        Self {
            dims,
            repr: StateRepr::Pure(vec),
        }
    }

    pub fn density(dims: ModeDims, rho: Array2<C64>) -> Self {
        assert_eq!(rho.nrows(), dims.total());
        Self {
            dims,
            repr: StateRepr::Density(rho),
        }
    }

    /// Basis state |n_s, n_q, n_r⟩.
    pub fn basis(dims: ModeDims, n_s: usize, n_q: usize, n_r: usize) -> Self {
        let mut v = Array1::zeros(dims.total());
        v[dims.index(n_s, n_q, n_r)] = C64::new(1.0, 0.0);
        Self {
            dims,
            repr: StateRepr::Pure(v),
        }
    }

    pub fn is_pure(&self) -> bool {
        matches!(self.repr, StateRepr::Pure(_))
    }

    /// Density-matrix view, promoting a pure state to |ψ⟩⟨ψ|.
    pub fn density_matrix(&self) -> Array2<C64> {
        match &self.repr {
            StateRepr::Pure(v) => {
                let n = v.len();
                let mut rho = Array2::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        rho[[i, j]] = v[i] * v[j].conj();
                    }
                }
                rho
            }
            StateRepr::Density(r) => r.clone(),
        }
    }

    /// In-place promotion to a density matrix.
    pub fn into_density(self) -> Self {
        let rho = self.density_matrix();
        Self {
            dims: self.dims,
            repr: StateRepr::Density(rho),
        }
    }

    pub fn trace(&self) -> C64 {
        match &self.repr {
            StateRepr::Pure(v) => C64::new(v.iter().map(|c| c.norm_sqr()).sum(), 0.0),
            StateRepr::Density(r) => r.diag().sum(),
        }
    }

    /// Check the density-matrix invariants: Hermitian, unit trace within
    /// 1e-9, eigenvalues ≥ -1e-9.
    pub fn validate(&self) -> Result<(), HilbertError> {
        let rho = self.density_matrix();
        let herm = hermiticity_defect(&rho);
        if herm > 1e-8 {
            return Err(HilbertError::NotHermitian(herm));
        }
        let tr = rho.diag().sum();
        if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
            return Err(HilbertError::NonState(format!("trace = {tr}")));
        }
        let (evals, _) = eigh(&rho);
        if let Some(min) = evals.iter().cloned().reduce(f64::min) {
            if min < -1e-9 {
                return Err(HilbertError::NonState(format!("min eigenvalue {min:.3e}")));
            }
        }
        Ok(())
    }
}

/// ⟨O⟩ = Tr(ρ O) (or ⟨ψ|O|ψ⟩ on the pure fast path).
pub fn expectation(state: &QuantumState, op: &Operator) -> C64 {
    assert_eq!(state.dims, op.dims, "expectation: dims mismatch");
    expectation_matrix(state, &op.matrix)
}

pub fn expectation_matrix(state: &QuantumState, m: &Array2<C64>) -> C64 {
    match &state.repr {
        StateRepr::Pure(v) => {
            let mv = m.dot(v);
            v.iter().zip(mv.iter()).map(|(a, b)| a.conj() * b).sum()
        }
        StateRepr::Density(rho) => {
            // Tr(ρ M) = Σ_ij ρ_ij M_ji
            let n = rho.nrows();
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    acc += rho[[i, j]] * m[[j, i]];
                }
            }
            acc
        }
    }
}

/// Partial trace keeping the modes in `keep`; traced-out modes are retained
/// with dimension 1 so the result is still a three-mode state.
pub fn partial_trace(state: &QuantumState, keep: &[Mode]) -> QuantumState {
    let dims = state.dims;
    let keep_s = keep.contains(&Mode::Storage);
    let keep_q = keep.contains(&Mode::Auxiliary);
    let keep_r = keep.contains(&Mode::Resonator);
    let new_dims = ModeDims::new(
        if keep_s { dims.storage } else { 1 },
        if keep_q { dims.auxiliary } else { 1 },
        if keep_r { dims.resonator } else { 1 },
    );
    let rho = state.density_matrix();
    let mut out = Array2::<C64>::zeros((new_dims.total(), new_dims.total()));
    for i in 0..dims.total() {
        let (is_, iq, ir) = dims.unindex(i);
        let oi = new_dims.index(
            if keep_s { is_ } else { 0 },
            if keep_q { iq } else { 0 },
            if keep_r { ir } else { 0 },
        );
        for j in 0..dims.total() {
            let (js, jq, jr) = dims.unindex(j);
            // Traced modes must match on both sides.
            if (!keep_s && is_ != js) || (!keep_q && iq != jq) || (!keep_r && ir != jr) {
                continue;
            }
            let oj = new_dims.index(
                if keep_s { js } else { 0 },
                if keep_q { jq } else { 0 },
                if keep_r { jr } else { 0 },
            );
            out[[oi, oj]] += rho[[i, j]];
        }
    }
    QuantumState::density(new_dims, out)
}

/// Uhlmann fidelity F = Tr √(√ρ σ √ρ), symmetric in its arguments.
///
/// Pure inputs take the overlap fast paths; the general case goes through a
/// Hermitian eigendecomposition.
pub fn fidelity(rho: &QuantumState, sigma: &QuantumState) -> f64 {
    assert_eq!(rho.dims, sigma.dims, "fidelity: dims mismatch");
    match (&rho.repr, &sigma.repr) {
        (StateRepr::Pure(a), StateRepr::Pure(b)) => {
            let ovl: C64 = a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
            ovl.norm()
        }
        (StateRepr::Pure(v), StateRepr::Density(m)) | (StateRepr::Density(m), StateRepr::Pure(v)) => {
            let mv = m.dot(v);
            let q: C64 = v.iter().zip(mv.iter()).map(|(x, y)| x.conj() * y).sum();
            q.re.max(0.0).sqrt()
        }
        (StateRepr::Density(a), StateRepr::Density(b)) => {
            let sqrt_a = matrix_sqrt_psd(a);
            let m = sqrt_a.dot(b).dot(&sqrt_a);
            let (evals, _) = eigh(&m);
            evals.iter().map(|&l| l.max(0.0).sqrt()).sum::<f64>().clamp(0.0, 1.0)
        }
    }
}

/// Principal square root of a positive-semidefinite Hermitian matrix.
pub fn matrix_sqrt_psd(m: &Array2<C64>) -> Array2<C64> {
    let (evals, vecs) = eigh(m);
    let n = m.nrows();
    let mut out = Array2::<C64>::zeros((n, n));
    for k in 0..n {
        let s = evals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += vecs[[i, k]] * vecs[[j, k]].conj() * s;
            }
        }
    }
    out
}

/// Hermitian eigendecomposition by cyclic complex Jacobi rotations.
///
/// Returns eigenvalues in ascending order with the matching eigenvectors as
/// columns. Accuracy is on the order of machine epsilon times ‖A‖, which is
/// what the dressed-parameter extraction needs (sub-Hz differences of
/// 10-GHz-scale eigenvalues survive because the error is absolute, not
/// relative to the differences).
pub fn eigh(a: &Array2<C64>) -> (Vec<f64>, Array2<C64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v: Array2<C64> = Array2::eye(n);

    let norm: f64 = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let tol = 1e-15 * norm.max(1e-300);

    for _sweep in 0..60 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]].norm_sqr();
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.norm() <= tol / (n as f64) {
                    continue;
                }
                let app = m[[p, p]].re;
                let aqq = m[[q, q]].re;
                let abs_apq = apq.norm();
                let phase = apq / abs_apq;
                // Rotation angle for the 2×2 Hermitian block.
                let tau = (aqq - app) / (2.0 * abs_apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Complex rotation: columns p, q mix with phase.
                let cs = C64::new(c, 0.0);
                let sn = phase * s;
                // Update rows/columns of m: m ← G† m G with
                // G[[p,p]]=c, G[[p,q]]=s·phase ... acting on (p,q) plane.
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = mkp * cs - mkq * sn.conj();
                    m[[k, q]] = mkp * sn + mkq * cs;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = mpk * cs - mqk * sn;
                    m[[q, k]] = mpk * sn.conj() + mqk * cs;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = vkp * cs - vkq * sn.conj();
                    v[[k, q]] = vkp * sn + vkq * cs;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals_raw: Vec<f64> = (0..n).map(|i| m[[i, i]].re).collect();
    order.sort_by(|&i, &j| evals_raw[i].partial_cmp(&evals_raw[j]).unwrap());
    let evals: Vec<f64> = order.iter().map(|&i| evals_raw[i]).collect();
    let mut vecs = Array2::<C64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vecs[[i, new_col]] = v[[i, old_col]];
        }
    }
    (evals, vecs)
}

/// Dense matrix exponential by scaling-and-squaring with a degree-13 Padé
/// approximant (Higham's constants); accurate to ~1e-14 relative for the
/// operator sizes used here.
pub fn matrix_exp(a: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    // 1-norm (max column sum).
    let mut norm1 = 0.0_f64;
    for j in 0..n {
        let s: f64 = (0..n).map(|i| a[[i, j]].norm()).sum();
        norm1 = norm1.max(s);
    }
    let theta13 = 5.371920351148152;
    let mut squarings = 0usize;
    let mut scaled = a.clone();
    if norm1 > theta13 {
        squarings = ((norm1 / theta13).log2().ceil()) as usize;
        let factor = C64::new(0.5_f64.powi(squarings as i32), 0.0);
        scaled.mapv_inplace(|c| c * factor);
    }

    let b: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];

    let eye: Array2<C64> = Array2::eye(n);
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let u_inner = &a6 * C64::new(b[13], 0.0) + &a4 * C64::new(b[11], 0.0) + &a2 * C64::new(b[9], 0.0);
    let u_tail = &a6 * C64::new(b[7], 0.0)
        + &a4 * C64::new(b[5], 0.0)
        + &a2 * C64::new(b[3], 0.0)
        + &eye * C64::new(b[1], 0.0);
    let u = scaled.dot(&(a6.dot(&u_inner) + u_tail));

    let v_inner = &a6 * C64::new(b[12], 0.0) + &a4 * C64::new(b[10], 0.0) + &a2 * C64::new(b[8], 0.0);
    let v = a6.dot(&v_inner)
        + &a6 * C64::new(b[6], 0.0)
        + &a4 * C64::new(b[4], 0.0)
        + &a2 * C64::new(b[2], 0.0)
        + &eye * C64::new(b[0], 0.0);

    // Solve (V - U) X = (V + U).
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = solve_dense(&lhs, &rhs);
    for _ in 0..squarings {
        x = x.dot(&x);
    }
    x
}

/// Solve A X = B for dense complex A by LU with partial pivoting.
pub fn solve_dense(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.nrows());
    let m = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        // Pivot.
        let mut pmax = lu[[k, k]].norm();
        let mut prow = k;
        for i in (k + 1)..n {
            let v = lu[[i, k]].norm();
            if v > pmax {
                pmax = v;
                prow = i;
            }
        }
        assert!(pmax > 0.0, "singular matrix in solve_dense");
        if prow != k {
            for j in 0..n {
                let tmp = lu[[k, j]];
                lu[[k, j]] = lu[[prow, j]];
                lu[[prow, j]] = tmp;
            }
            for j in 0..m {
                let tmp = x[[k, j]];
                x[[k, j]] = x[[prow, j]];
                x[[prow, j]] = tmp;
            }
            perm.swap(k, prow);
        }
        let pivot = lu[[k, k]];
        for i in (k + 1)..n {
            let factor = lu[[i, k]] / pivot;
            lu[[i, k]] = factor;
            if factor != C64::new(0.0, 0.0) {
                for j in (k + 1)..n {
                    let l = lu[[k, j]];
                    lu[[i, j]] -= factor * l;
                }
                for j in 0..m {
                    let r = x[[k, j]];
                    x[[i, j]] -= factor * r;
                }
            }
        }
    }
    // Back substitution.
    for j in 0..m {
        for i in (0..n).rev() {
            let mut acc = x[[i, j]];
            for k in (i + 1)..n {
                acc -= lu[[i, k]] * x[[k, j]];
            }
            x[[i, j]] = acc / lu[[i, i]];
        }
    }
    x
}
