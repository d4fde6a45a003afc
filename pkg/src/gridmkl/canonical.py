"""Exact solver for the canonical group-penalized subproblem.

Solves  min_X ||A - B X C^T||_F^2 + mu * ||X||_B  with B symmetric positive
definite, where ||X||_B = sqrt(trace(X^T B X)). The minimizer is zero
exactly when ||B^{1/2} A C||_F <= mu/2; otherwise it is recovered from a
univariate convex dual problem followed by a shifted Sylvester system,
both solved in the joint eigenbasis of B and C^T C.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelMatrix

ARMIJO_SIGMA = 1e-4
MAX_BACKTRACKS = 80
DEFAULT_MAX_ITER = 10**6


class ConvergenceError(RuntimeError):
    """Iteration cap exceeded; carries the last iterate."""

    def __init__(self, message: str, last_value: float):
        super().__init__(message)
        self.last_value = last_value


@dataclass(frozen=True)
class CanonicalInstance:
    """One (A, B, C, mu) problem with its spectral caches.

    `t_mat` is U_B^T (A C) V where V diagonalizes C^T C. Working with
    C^T C (d2 x d2) instead of C C^T keeps the cache small when the
    feature dimension d3 exceeds d2; the nonzero spectra coincide and the
    reduced-basis coordinates recover the usual W = U_B^T A U_C as
    t_mat[:, j] = W[:, j] * sqrt(m_j) on the nonzero eigenvalues m_j.
    """

    a_mat: np.ndarray
    b_kernel: KernelMatrix
    c_mat: np.ndarray
    mu: float
    ac: np.ndarray            # A C                      (d1 x d2)
    c_eigvecs: np.ndarray     # V, eigenvectors of C^T C (d2 x d2)
    c_eigvals: np.ndarray     # m_j >= 0                 (d2,)
    nz_mask: np.ndarray       # columns with m_j > 0
    t_mat: np.ndarray         # U_B^T (A C) V            (d1 x d2)
    gate_value: float         # ||B^{1/2} A C||_F

    @property
    def w_mat(self) -> np.ndarray:
        """W in the paper's coordinates, restricted to nonzero m_j."""
        return self.t_mat[:, self.nz_mask] / np.sqrt(self.c_eigvals[self.nz_mask])

    def _sum_terms(self):
        lam = self.b_kernel.eigvals
        m = self.c_eigvals[self.nz_mask]
        t = self.t_mat[:, self.nz_mask]
        q = np.outer(lam, m)          # lambda_i * m_j
        e = lam[:, None] * t * t      # W_ij^2 * lambda_i * m_j
        return q, e


def make_instance(a_mat, b_kernel: KernelMatrix, c_mat, mu: float) -> CanonicalInstance:
    a_mat = np.asarray(a_mat, dtype=float)
    c_mat = np.asarray(c_mat, dtype=float)
    if a_mat.ndim != 2 or c_mat.ndim != 2:
        raise ValueError("A and C must be matrices")
    if a_mat.shape[0] != b_kernel.dim:
        raise ValueError(f"A has {a_mat.shape[0]} rows but B is {b_kernel.dim}-dimensional")
    if a_mat.shape[1] != c_mat.shape[0]:
        raise ValueError(f"A is {a_mat.shape} but C is {c_mat.shape}")
    if mu <= 0:
        raise ValueError(f"penalty mu must be positive, got {mu}")
    ac = a_mat @ c_mat
    ctc = c_mat.T @ c_mat
    ctc = 0.5 * (ctc + ctc.T)
    m, v = np.linalg.eigh(ctc)
    m = np.maximum(m, 0.0)
    m_max = float(m.max()) if m.size else 0.0
    nz_mask = m > (1e-12 * m_max if m_max > 0 else np.inf)
    t_mat = b_kernel.eigvecs.T @ ac @ v
    lam = b_kernel.eigvals
    gate = float(np.sqrt(np.sum(lam[:, None] * t_mat * t_mat)))
    return CanonicalInstance(
        a_mat=a_mat, b_kernel=b_kernel, c_mat=c_mat, mu=float(mu),
        ac=ac, c_eigvecs=v, c_eigvals=m, nz_mask=nz_mask,
        t_mat=t_mat, gate_value=gate,
    )


@dataclass(frozen=True)
class CanonicalSolution:
    x_mat: np.ndarray
    w_hat: float
    is_zero: bool
    gate_value: float
    iterations: int


def frob_gate(inst: CanonicalInstance) -> tuple[float, bool]:
    """Gate value ||B^{1/2} A C||_F and the zero-solution decision."""
    return inst.gate_value, inst.gate_value <= inst.mu / 2.0


def s_value(w: float, inst: CanonicalInstance) -> float:
    q, e = inst._sum_terms()
    c2 = inst.mu * inst.mu / 4.0
    return float(w - np.sum(e * w / (q * w + c2)))


def s_derivative(w: float, inst: CanonicalInstance) -> float:
    q, e = inst._sum_terms()
    c2 = inst.mu * inst.mu / 4.0
    denom = q * w + c2
    return float(1.0 - c2 * np.sum(e / (denom * denom)))


def s_value_and_derivative(w: float, inst: CanonicalInstance) -> tuple[float, float]:
    """Dual objective s(w) and its derivative.

    s(w)  = w - sum_ij W_ij^2 lam_i m_j w / (lam_i m_j w + mu^2/4)
    s'(w) = 1 - sum_ij mu^2 W_ij^2 lam_i m_j / (4 (lam_i m_j w + mu^2/4)^2)

    Zero eigenvalues m_j contribute nothing and are excluded from the sums.
    """
    q, e = inst._sum_terms()
    c2 = inst.mu * inst.mu / 4.0
    denom = q * w + c2
    s = float(w - np.sum(e * w / denom))
    sp = float(1.0 - c2 * np.sum(e / (denom * denom)))
    return s, sp


def minimize_s(inst: CanonicalInstance, eps_c: float | None = None,
               max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Minimize s over w >= 0 by projected gradient descent."""
    return _projected_gradient(inst, eps_c, max_iter)[0]


def _projected_gradient(inst, eps_c, max_iter) -> tuple[float, int]:
    w = 0.0
    s_prev = s_value(w, inst)  # = 0 at the w^0 = 0 initialization
    if eps_c is None:
        eps_c = 1e-10 * (1.0 + abs(s_prev))
    iters = 0
    while iters < max_iter:
        iters += 1
        g = s_derivative(w, inst)
        if w == 0.0 and g >= 0.0:
            return w, iters  # KKT at the boundary
        # Backtracking from c0 = 1, halving until sufficient decrease.
        step = 1.0
        w_new, s_new = w, s_prev
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            cand = max(0.0, w - step * g)
            if cand == w:
                break
            s_cand = s_value(cand, inst)
            if s_cand <= s_prev + ARMIJO_SIGMA * g * (cand - w):
                w_new, s_new, accepted = cand, s_cand, True
                break
            step *= 0.5
        if not accepted:
            return w, iters  # no descent step representable: numerically optimal
        converged = abs(s_new - s_prev) < eps_c
        w, s_prev = w_new, s_new
        if converged:
            return w, iters
    raise ConvergenceError(
        f"projected gradient did not converge within {max_iter} iterations", w
    )


def solve_shifted_sylvester(inst: CanonicalInstance, rho: float) -> np.ndarray:
    """Solve B X C^T C + rho X = A C in the joint eigenbasis.

    With B = U diag(lam) U^T and C^T C = V diag(m) V^T, the transformed
    unknown Y = U^T X V satisfies Y_ij = [U^T (A C) V]_ij / (lam_i m_j + rho).
    """
    if rho <= 0:
        raise ValueError(f"shift rho must be positive, got {rho}")
    lam = inst.b_kernel.eigvals
    denom = np.outer(lam, inst.c_eigvals) + rho
    y = inst.t_mat / denom
    return inst.b_kernel.eigvecs @ y @ inst.c_eigvecs.T


def solve_instance(inst: CanonicalInstance, eps_c: float | None = None,
                   max_iter: int = DEFAULT_MAX_ITER) -> CanonicalSolution:
    gate, is_zero = frob_gate(inst)
    d1, d2 = inst.t_mat.shape
    if is_zero:
        return CanonicalSolution(np.zeros((d1, d2)), 0.0, True, gate, 0)
    w_hat, iters = _projected_gradient(inst, eps_c, max_iter)
    if w_hat <= 0.0:
        # Open gate implies s'(0) < 0, so this only happens at the numerical
        # knife edge where the solution is indistinguishable from zero.
        return CanonicalSolution(np.zeros((d1, d2)), 0.0, False, gate, iters)
    rho = inst.mu * inst.mu / (4.0 * w_hat)
    x = solve_shifted_sylvester(inst, rho)
    return CanonicalSolution(x, w_hat, False, gate, iters)


def solve_canonical(a_mat, b_kernel: KernelMatrix, c_mat, mu: float,
                    eps_c: float | None = None,
                    max_iter: int = DEFAULT_MAX_ITER) -> CanonicalSolution:
    """Gate test, univariate dual, then Sylvester solve."""
    return solve_instance(make_instance(a_mat, b_kernel, c_mat, mu), eps_c, max_iter)


def canonical_objective(a_mat, b_kernel: KernelMatrix, c_mat, mu: float, x_mat) -> float:
    """||A - B X C^T||_F^2 + mu ||X||_B, evaluated directly."""
    a_mat = np.asarray(a_mat, dtype=float)
    x_mat = np.asarray(x_mat, dtype=float)
    resid = a_mat - b_kernel.gram @ x_mat @ np.asarray(c_mat, dtype=float).T
    v = b_kernel.eigvecs.T @ x_mat
    norm_b = np.sqrt(max(float(np.sum(b_kernel.eigvals[:, None] * v * v)), 0.0))
    return float(np.sum(resid * resid) + mu * norm_b)
