"""Convex QP solver for the piecewise-linear SVM dual.

Problems have the form

    minimize    0.5 z'Qz + c'z
    subject to  Az = b,  z >= 0

solved with a primal-dual interior-point method using Mehrotra's
predictor-corrector steps.  The SVM dual is assembled in structured
form: for l samples and a k-piece loss, z stacks k blocks of length l
(one multiplier block per piece), Q = D'HD with D = [I, -tau_1*I, ...]
and H_ij = y_i y_j k(x_i, x_j), and the equalities are one global
balance row y'Dz = 0 plus l per-sample simplex rows (block sums equal
the per-sample cap C_i).

For structured problems the Newton system is solved by block
elimination (Q = cc' (x) H plus a positive diagonal), which costs one
l x l factorization per iteration instead of one (k*l + l + 1) one.
The generic dense-KKT route remains for arbitrary problems and as a
cross-check.  A projected-gradient method over the per-sample
simplexes (matrix-free, quadratic penalty on the balance row) serves
as a fallback when the interior-point iteration breaks down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InfeasibleError
from .loss import LossSpec

__all__ = [
    "QpProblem",
    "QpSolution",
    "QpStructure",
    "assemble_dual",
    "gram_factor",
    "solve",
]


@dataclass
class QpStructure:
    """Structured view of an SVM dual (see module docstring)."""

    H: np.ndarray                  # l x l, symmetric PSD
    y: np.ndarray                  # l, +-1
    C: np.ndarray                  # l, positive caps
    block_coeffs: np.ndarray       # k, (1, -tau_1, ..., -tau_{k-1})
    chol_L: np.ndarray | None = None  # Cholesky factor of H + delta*I
    chol_delta: float = 0.0

    @property
    def l(self) -> int:
        return self.y.size

    @property
    def k(self) -> int:
        return self.block_coeffs.size

    def combined(self, z: np.ndarray) -> np.ndarray:
        """s = Dz, the per-sample combined coefficients."""
        Z = z.reshape(self.k, self.l)
        return self.block_coeffs @ Z


@dataclass
class QpProblem:
    """Equality-constrained nonnegative QP.

    Exactly one of (``Q_mat``/``A_mat``) or ``structure`` backs the
    problem; dense views are materialized on demand either way.
    """

    c: np.ndarray
    b: np.ndarray
    Q_mat: np.ndarray | None = None
    A_mat: np.ndarray | None = None
    structure: QpStructure | None = None
    reg: float = 0.0
    _dense_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.structure is None:
            if self.Q_mat is None or self.A_mat is None:
                raise ValueError("generic problems need both Q and A")
            self.Q_mat = np.asarray(self.Q_mat, dtype=float)
            self.A_mat = np.asarray(self.A_mat, dtype=float)
            sym_gap = np.abs(self.Q_mat - self.Q_mat.T).max()
            if sym_gap > 1e-10 * (1.0 + np.abs(self.Q_mat).max()):
                raise ValueError("Q must be symmetric")
            if self.A_mat.shape != (self.b.size, self.c.size):
                raise ValueError("A shape inconsistent with b and c")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m_eq(self) -> int:
        return self.b.size

    def Q_dense(self) -> np.ndarray:
        if self.Q_mat is not None:
            return self.Q_mat
        if "Q" not in self._dense_cache:
            st = self.structure
            D = np.kron(st.block_coeffs[:, None], np.eye(st.l))  # (kl, l)
            H_eff = st.H
            if st.chol_delta:
                H_eff = H_eff + st.chol_delta * np.eye(st.l)
            Q = D @ H_eff @ D.T
            Q[np.diag_indices_from(Q)] += self.reg
            self._dense_cache["Q"] = Q
        return self._dense_cache["Q"]

    def A_dense(self) -> np.ndarray:
        if self.A_mat is not None:
            return self.A_mat
        if "A" not in self._dense_cache:
            st = self.structure
            A = np.zeros((st.l + 1, st.k * st.l))
            for bidx, coef in enumerate(st.block_coeffs):
                cols = slice(bidx * st.l, (bidx + 1) * st.l)
                A[0, cols] = coef * st.y
                A[1:, cols] = np.eye(st.l)
            self._dense_cache["A"] = A
        return self._dense_cache["A"]

    def q_mul(self, z: np.ndarray) -> np.ndarray:
        """Q @ z without materializing Q for structured problems."""
        if self.structure is None:
            return self.Q_mat @ z
        st = self.structure
        s = st.combined(z)
        Hs = st.H @ s
        if st.chol_delta:
            Hs = Hs + st.chol_delta * s
        out = np.multiply.outer(st.block_coeffs, Hs).ravel()
        if self.reg:
            out += self.reg * z
        return out

    def a_mul(self, z: np.ndarray) -> np.ndarray:
        if self.structure is None:
            return self.A_mat @ z
        st = self.structure
        Z = z.reshape(st.k, st.l)
        return np.concatenate(([st.y @ st.combined(z)], Z.sum(axis=0)))

    def at_mul(self, w: np.ndarray) -> np.ndarray:
        if self.structure is None:
            return self.A_mat.T @ w
        st = self.structure
        base = st.y * w[0]
        return (np.multiply.outer(st.block_coeffs, base) + w[1:]).ravel()

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.q_mul(z) + self.c @ z)

    def feasible_start(self) -> np.ndarray:
        if self.structure is not None:
            st = self.structure
            return np.tile(st.C / st.k, st.k)
        z, *_ = np.linalg.lstsq(self.A_mat, self.b, rcond=None)
        floor = 1e-2 * (1.0 + np.abs(z).max())
        return np.maximum(z, floor)


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    kkt_residuals: dict[str, float]
    iterations: int
    status: str                     # optimal | max_iter | numerical_failure
    nu: np.ndarray | None = None    # equality multipliers
    mu: np.ndarray | None = None    # bound multipliers


def gram_factor(H: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of H + delta*I with the smallest workable jitter.

    Shared across many assemblies of the same Gram matrix; the jitter
    only perturbs the Newton direction, never the reported residuals.
    """
    l = H.shape[0]
    scale = max(np.trace(H) / l, 1e-8)
    delta = 1e-12 * scale
    for _ in range(8):
        try:
            L = np.linalg.cholesky(H + delta * np.eye(l))
            return L, delta
        except np.linalg.LinAlgError:
            delta *= 100.0
    raise InfeasibleError("Gram matrix is not positive semidefinite")


def assemble_dual(
    H: np.ndarray,
    y: np.ndarray,
    C: np.ndarray,
    spec: LossSpec,
    chol: tuple[np.ndarray, float] | None = None,
    feas_tol: float = 1e-9,
) -> QpProblem:
    """Build the structured dual QP for one training configuration.

    Feasibility is certified up front: each sample's combined
    coefficient s_i ranges over C_i * [min block coeff, max block
    coeff], so the balance row is satisfiable iff the attainable
    interval of the positive class overlaps that of the negative
    class.  Raises InfeasibleError (with the gap width as certificate)
    otherwise.
    """
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    C = np.asarray(C, dtype=float)
    l = y.size
    if H.shape != (l, l) or C.size != l:
        raise ValueError("H, y, C sizes are inconsistent")
    if np.any(C <= 0):
        raise ValueError("per-sample caps must be positive")

    coeffs = np.concatenate(([1.0], -np.asarray(spec.taus, dtype=float)))
    lo, hi = coeffs.min(), coeffs.max()
    pos_total = float(C[y > 0].sum())
    neg_total = float(C[y < 0].sum())
    gap = max(lo * pos_total - hi * neg_total,
              lo * neg_total - hi * pos_total)
    if gap > feas_tol * (1.0 + pos_total + neg_total):
        raise InfeasibleError(
            "balance row unattainable for this loss/cap combination",
            certificate=float(gap),
        )

    k = coeffs.size
    c = np.empty(k * l)
    c[:l] = -1.0
    for m in range(1, k):
        c[m * l:(m + 1) * l] = spec.taus[m - 1] - spec.epsilons[m - 1]
    b = np.concatenate(([0.0], C))
    reg = 1e-10 * np.trace(H) / l
    structure = QpStructure(H=H, y=y, C=C, block_coeffs=coeffs)
    # The Gram factor is computed eagerly so every view of the problem
    # (objective, residuals, Newton system) consistently uses the same
    # jittered H; a lazily appearing jitter would bias Newton directions
    # against the residuals being measured.
    structure.chol_L, structure.chol_delta = \
        chol if chol is not None else gram_factor(H)
    return QpProblem(c=c, b=b, structure=structure, reg=reg)


# ---------------------------------------------------------------------------
# interior-point method


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 200,
          method: str = "auto") -> QpSolution:
    """Solve the QP to the requested scaled KKT tolerance.

    ``method`` is "auto" (interior point, projected-gradient rescue on
    numerical failure for structured problems), "ipm", or
    "projected-gradient" (structured problems only).
    """
    if method == "projected-gradient":
        return _projected_gradient(problem, tol=tol)
    sol = _interior_point(problem, tol=tol, max_iter=max_iter)
    polished = _crossover(problem, sol, tol)
    if polished is not None and _max_residual(polished) < _max_residual(sol):
        sol = polished
    if (
        method == "auto"
        and sol.status == "numerical_failure"
        and problem.structure is not None
    ):
        rescue = _projected_gradient(problem, tol=max(tol, 1e-7))
        if _max_residual(rescue) < _max_residual(sol):
            return rescue
    return sol


def _max_residual(sol: QpSolution) -> float:
    return max(sol.kkt_residuals.values())


def _interior_point(problem: QpProblem, tol: float, max_iter: int) -> QpSolution:
    n, m = problem.n, problem.m_eq
    z = np.maximum(problem.feasible_start(), 1e-8)
    g0 = problem.q_mul(z) + problem.c
    mu = np.maximum(g0, 0.0) + 0.1 * (1.0 + np.abs(g0).mean())
    nu = np.zeros(m)

    c_scale = 1.0 + np.abs(problem.c).max()
    b_scale = 1.0 + (np.abs(problem.b).max() if m else 0.0)

    best: QpSolution | None = None
    status = "max_iter"
    it = 0
    stall = 0
    for it in range(1, max_iter + 1):
        qz = problem.q_mul(z)
        r_d = qz + problem.c - problem.at_mul(nu) - mu
        r_p = problem.a_mul(z) - problem.b
        gap = float(z @ mu) / n
        obj = float(0.5 * z @ qz + problem.c @ z)

        res = {
            "primal_eq": float(np.abs(r_p).max()) / b_scale,
            "dual_stationarity": float(np.abs(r_d).max())
            / (c_scale + np.abs(qz).max()),
            "complementarity": gap / (1.0 + abs(obj)),
        }
        if not all(np.isfinite(v) for v in res.values()):
            status = "numerical_failure"
            break
        cur = QpSolution(z.copy(), obj, res, it - 1, "running",
                         nu.copy(), mu.copy())
        if best is None:
            best = cur
            anchor = _max_residual(cur)
            stall = 0
        else:
            if _max_residual(cur) < _max_residual(best):
                best = cur
            if _max_residual(cur) < 0.9 * anchor:
                anchor = _max_residual(cur)
                stall = 0
            else:
                stall += 1
        if max(res.values()) <= tol:
            status = "optimal"
            best = cur
            break
        if stall >= 12:
            # converged as far as the arithmetic allows; grinding on only
            # shrinks the complementarity pairs into denormals
            break

        d = mu / np.maximum(z, 1e-280)
        try:
            factor = _factorize(problem, d)
            # predictor (affine scaling) direction
            dz_a, dnu_a = factor(-r_d - mu, -r_p)
            dmu_a = -mu - d * dz_a
            ap = _max_step(z, dz_a)
            ad = _max_step(mu, dmu_a)
            gap_aff = float((z + ap * dz_a) @ (mu + ad * dmu_a)) / n
            sigma = (max(gap_aff, 0.0) / gap) ** 3 if gap > 0 else 0.1
            sigma = min(max(sigma, 1e-8), 0.99)
            # corrector with centering
            comp = (dz_a * dmu_a - sigma * gap) / z
            dz, dnu = factor(-r_d - mu - comp, -r_p)
            dmu = -mu - comp - d * dz
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            status = "numerical_failure"
            break

        eta = min(0.99995, max(0.99, 1.0 - gap / (1.0 + abs(obj))))
        ap = eta * _max_step(z, dz)
        ad = eta * _max_step(mu, dmu)
        if max(ap, ad) < 1e-13:
            status = "numerical_failure"
            break
        z = z + ap * dz
        nu = nu + ad * dnu
        mu = mu + ad * dmu

    if status == "running":
        status = "max_iter"
    assert best is not None
    best.status = status
    best.iterations = it
    return best


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


# ---------------------------------------------------------------------------
# active-set polish (crossover)


def _crossover(problem: QpProblem, sol: QpSolution,
               tol: float) -> QpSolution | None:
    """Polish an interior-point iterate onto an exact face.

    Interior-point complementarity pairs only vanish in the limit; the
    surviving O(tol) products get amplified wherever later work divides
    by a small multiplier (bias candidates most of all).  Fixing the
    active set suggested by the iterate and solving the reduced
    equality-constrained KKT system makes the products exactly zero up
    to linear-algebra precision.  Coordinates are swapped while sign
    conditions fail; returns None if no verified improvement emerges
    within the pivot budget.
    """
    if sol.nu is None or sol.mu is None or not np.all(np.isfinite(sol.z)):
        return None
    n, m = problem.n, problem.m_eq
    z0 = sol.z
    free = z0 > np.maximum(sol.mu, 0.0)
    st = problem.structure

    def guard(free: np.ndarray, z: np.ndarray) -> None:
        # every simplex row needs at least one free coordinate
        if st is not None:
            Z = z.reshape(st.k, st.l)
            covered = free.reshape(st.k, st.l).any(axis=0)
            top = Z.argmax(axis=0) * st.l + np.arange(st.l)
            free[top[~covered]] = True
        elif not free.any():
            free[int(np.argmax(z))] = True

    guard(free, z0)
    c_scale = 1.0 + np.abs(problem.c).max()
    b_scale = 1.0 + (np.abs(problem.b).max() if m else 0.0)
    z_scale = 1.0 + np.abs(z0).max()
    # any feasible coordinate obeys its simplex row, so a face solution
    # beyond the cap scale means the face system was effectively singular
    z_cap = 10.0 * (1.0 + np.abs(problem.b).sum())

    nu = None
    seen: set[bytes] = set()
    for _ in range(60):
        idx = np.flatnonzero(free)
        if idx.size + m > 6000:
            return None
        key = np.packbits(free).tobytes()
        if key in seen:            # cycling over degenerate faces
            return None
        seen.add(key)
        try:
            z, nu = _solve_face(problem, idx)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            return None
        if np.abs(z).max() > z_cap or not np.all(np.isfinite(nu)):
            return None
        qz = problem.q_mul(z)
        mu = qz + problem.c - problem.at_mul(nu)
        drop = free & (z < -1e-9 * z_scale)
        add = ~free & (mu < -1e-9 * (c_scale + np.abs(qz).max()))
        if not drop.any() and not add.any():
            break
        free[drop] = False
        free[add] = True
        guard(free, np.maximum(z, 0.0))
    else:
        return None

    z = np.maximum(z, 0.0)
    qz = problem.q_mul(z)
    mu = qz + problem.c - problem.at_mul(nu)
    r_p = problem.a_mul(z) - problem.b
    obj = float(0.5 * z @ qz + problem.c @ z)
    res = {
        "primal_eq": float(np.abs(r_p).max()) / b_scale,
        "dual_stationarity": float(max(0.0, -mu.min()))
        / (c_scale + np.abs(qz).max()),
        "complementarity": float(z @ np.maximum(mu, 0.0)) / n
        / (1.0 + abs(obj)),
    }
    if not all(np.isfinite(v) for v in res.values()):
        return None
    status = "optimal" if max(res.values()) <= tol else sol.status
    return QpSolution(z, obj, res, sol.iterations, status,
                      nu.copy(), np.maximum(mu, 0.0))


def _solve_face(problem: QpProblem, idx: np.ndarray):
    """Exact KKT solve with inactive coordinates pinned to zero.

    Returns (z, nu) where z is the full-length vector.  The bordered
    system is made quasi-definite with a tiny diagonal shift, then the
    shift's effect is removed by iterative refinement against the
    unshifted operator.
    """
    nf, m = idx.size, problem.m_eq
    Qff = _q_sub(problem, idx)
    Af = _a_cols(problem, idx)
    dim = nf + m
    K = np.zeros((dim, dim))
    K[:nf, :nf] = Qff
    eps = 1e-12 * (1.0 + np.abs(Qff).max())
    K[:nf, :nf][np.diag_indices(nf)] += eps
    K[:nf, nf:] = Af.T
    K[nf:, :nf] = Af
    K[nf:, nf:][np.diag_indices(m)] -= eps
    rhs = np.concatenate((-problem.c[idx], problem.b))
    lu = scipy.linalg.lu_factor(K, check_finite=False)
    x = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    for _ in range(2):
        r1 = rhs[:nf] - (Qff @ x[:nf] + Af.T @ x[nf:])
        r2 = rhs[nf:] - Af @ x[:nf]
        e = scipy.linalg.lu_solve(lu, np.concatenate((r1, r2)),
                                  check_finite=False)
        x = x + e
    z = np.zeros(problem.n)
    z[idx] = x[:nf]
    return z, -x[nf:]


def _q_sub(problem: QpProblem, idx: np.ndarray) -> np.ndarray:
    if problem.structure is None:
        Q = problem.Q_dense()[np.ix_(idx, idx)].copy()
        return Q
    st = problem.structure
    si = idx % st.l
    cf = st.block_coeffs[idx // st.l]
    Q = np.outer(cf, cf) * st.H[np.ix_(si, si)]
    if st.chol_delta:
        Q += st.chol_delta * np.outer(cf, cf) * (si[:, None] == si[None, :])
    if problem.reg:
        Q[np.diag_indices(idx.size)] += problem.reg
    return Q


def _a_cols(problem: QpProblem, idx: np.ndarray) -> np.ndarray:
    if problem.structure is None:
        return problem.A_dense()[:, idx]
    st = problem.structure
    si = idx % st.l
    A = np.zeros((st.l + 1, idx.size))
    A[0] = st.block_coeffs[idx // st.l] * st.y[si]
    A[1 + si, np.arange(idx.size)] = 1.0
    return A


def _factorize(problem: QpProblem, d: np.ndarray):
    """Factor the Newton system for diagonal d = mu/z.

    Returns a callable (r1, r2) -> (dz, dnu) solving

        (Q + diag(d)) dz - A' dnu = r1
        A dz                      = r2

    reusable for the predictor and corrector right-hand sides.
    """
    if problem.structure is None or problem.structure.l < 12:
        raw = _factorize_dense(problem, d)
    else:
        raw = _factorize_structured(problem, d)

    def refined(r1: np.ndarray, r2: np.ndarray):
        # iterative refinement; the Schur pieces scale like 1/reg near
        # convergence and eat ~8 digits without it
        dz, dnu = raw(r1, r2)
        scale = 1.0 + max(np.abs(r1).max(), np.abs(r2).max() if r2.size else 0.0)
        prev = np.inf
        for _ in range(3):
            rr1 = r1 - (problem.q_mul(dz) + d * dz - problem.at_mul(dnu))
            rr2 = r2 - problem.a_mul(dz)
            err = max(np.abs(rr1).max(), np.abs(rr2).max() if rr2.size else 0.0)
            if err <= 1e-13 * scale or err >= 0.5 * prev:
                break
            prev = err
            ez, enu = raw(rr1, rr2)
            dz, dnu = dz + ez, dnu + enu
        return dz, dnu

    return refined


def _factorize_dense(problem: QpProblem, d: np.ndarray):
    n, m = problem.n, problem.m_eq
    S = np.zeros((n + m, n + m))
    S[:n, :n] = problem.Q_dense()
    S[:n, :n][np.diag_indices(n)] += d
    A = problem.A_dense()
    S[:n, n:] = A.T
    S[n:, :n] = A
    # tiny dual regularization keeps rank-deficient equality rows solvable
    S[n:, n:][np.diag_indices(m)] -= 1e-12 * (1.0 + np.abs(A).max())
    lu = scipy.linalg.lu_factor(S, check_finite=False)

    def solve_kkt(r1: np.ndarray, r2: np.ndarray):
        sol = scipy.linalg.lu_solve(lu, np.concatenate((r1, r2)),
                                    check_finite=False)
        return sol[:n], -sol[n:]

    return solve_kkt


def _factorize_structured(problem: QpProblem, d: np.ndarray):
    """Block elimination using Q = cc' (x) H + reg*I.

    With P = reg + d (positive diagonal, viewed per block) and
    M = Q + diag(d), the Woodbury identity reduces M^{-1} to solves
    with K = H~^{-1} + G where G = D P^{-1} D' is diagonal and
    H~ = LL' is the jittered Gram factor.  K^{-1} = L (I + L'GL)^{-1} L'
    keeps everything Cholesky-friendly: I + L'GL is always well posed.
    The equality block is then a dense (l+1) Schur complement.
    """
    st = problem.structure
    if st.chol_L is None:
        st.chol_L, st.chol_delta = gram_factor(st.H)
    L = st.chol_L
    l, k = st.l, st.k
    coeffs = st.block_coeffs
    P = (problem.reg + d).reshape(k, l)
    Pinv = 1.0 / P

    g = (coeffs[:, None] ** 2 * Pinv).sum(axis=0)      # D P^-1 D'
    t = (coeffs[:, None] * Pinv).sum(axis=0)           # D P^-1 E'
    r = Pinv.sum(axis=0)                               # E P^-1 E'

    F = L.T @ (g[:, None] * L)
    F[np.diag_indices(l)] += 1.0
    F_chol = scipy.linalg.cho_factor(F, lower=True, check_finite=False)

    def K_inv(X):
        # (H~^{-1} + G)^{-1} X = L (I + L'GL)^{-1} L' X
        return L @ scipy.linalg.cho_solve(F_chol, L.T @ X,
                                          check_finite=False)

    def M_inv(v):
        w = v.reshape(k, l) * Pinv
        corr = K_inv(coeffs @ w)
        return (w - Pinv * np.multiply.outer(coeffs, corr)).ravel()

    # Schur complement over [balance row; simplex rows]
    X = np.empty((l, l + 1))
    X[:, 0] = L.T @ (st.y * g)
    X[:, 1:] = L.T * t[None, :]
    FX = scipy.linalg.cho_solve(F_chol, X, check_finite=False)
    T = np.empty((l + 1, l + 1))
    T[0, 0] = g.sum()
    T[0, 1:] = st.y * t
    T[1:, 0] = st.y * t
    T[1:, 1:] = np.diag(r)
    S_eq = T - X.T @ FX
    S_eq[np.diag_indices(l + 1)] += 1e-12 * (1.0 + abs(T[0, 0]))
    try:
        S_chol = scipy.linalg.cho_factor(S_eq, lower=True,
                                         check_finite=False)
        eq_solve = lambda rhs: scipy.linalg.cho_solve(S_chol, rhs,
                                                      check_finite=False)
    except scipy.linalg.LinAlgError:
        lu = scipy.linalg.lu_factor(S_eq, check_finite=False)
        eq_solve = lambda rhs: scipy.linalg.lu_solve(lu, rhs,
                                                     check_finite=False)

    def solve_kkt(r1: np.ndarray, r2: np.ndarray):
        u = M_inv(r1)
        dnu = eq_solve(r2 - problem.a_mul(u))
        dz = M_inv(r1 + problem.at_mul(dnu))
        return dz, dnu

    return solve_kkt


# ---------------------------------------------------------------------------
# projected-gradient fallback (structured problems)


def _project_simplexes(Z: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Project each column of Z (k x l) onto {v >= 0, sum v = C_i}."""
    k, l = Z.shape
    U = -np.sort(-Z, axis=0)                # descending per column
    css = np.cumsum(U, axis=0) - C[None, :]
    idx = np.arange(1, k + 1)[:, None]
    cond = U - css / idx > 0
    rho = k - np.argmax(cond[::-1], axis=0) - 1
    theta = css[rho, np.arange(l)] / (rho + 1)
    return np.maximum(Z - theta[None, :], 0.0)


def _projected_gradient(problem: QpProblem, tol: float,
                        max_rounds: int = 8,
                        inner_iters: int = 4000) -> QpSolution:
    """FISTA over the product of per-sample simplexes.

    The balance row is enforced through a quadratic penalty whose
    weight grows geometrically across rounds (warm-started).  Residuals
    in the returned solution are measured on the true KKT system, and
    the status is "optimal" only if they actually meet ``tol``.
    """
    st = problem.structure
    if st is None:
        raise ValueError("projected-gradient fallback needs structure")
    k, l = st.k, st.l
    coeffs = st.block_coeffs
    y = st.y

    z = problem.feasible_start()
    # Lipschitz estimate via power iteration on Q
    v = np.random.default_rng(0).standard_normal(problem.n)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(25):
        w = problem.q_mul(v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            break
        v = w / lam
    ag_norm2 = float((coeffs ** 2).sum() * l)
    rho = max(lam, 1.0)
    b_scale = 1.0 + np.abs(problem.b).max()
    balance_vec = problem.at_mul(np.concatenate(([1.0], np.zeros(l))))

    for _ in range(max_rounds):
        step = 1.0 / (lam + rho * ag_norm2 + problem.reg + 1e-12)
        x = z.copy()
        zk = z.copy()
        tk = 1.0
        for _ in range(inner_iters):
            bal = float(y @ st.combined(x))
            grad = problem.q_mul(x) + problem.c + rho * bal * balance_vec
            Znew = (x - step * grad).reshape(k, l)
            z_new = _project_simplexes(Znew, st.C).ravel()
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            x = z_new + ((tk - 1.0) / t_new) * (z_new - zk)
            move = np.abs(z_new - zk).max()
            zk, tk = z_new, t_new
            if move < 1e-12 * (1.0 + np.abs(zk).max()):
                break
        z = zk
        if abs(float(y @ st.combined(z))) <= tol * b_scale:
            break
        rho *= 10.0

    # recover multipliers from the gradient at z
    grad = problem.q_mul(z) + problem.c
    bal = float(y @ st.combined(z))
    nu_g = -rho * bal
    shifted = (grad.reshape(k, l) - np.multiply.outer(coeffs, y * nu_g))
    nu_s = shifted.min(axis=0)
    nu = np.concatenate(([nu_g], nu_s))
    mu = np.maximum((shifted - nu_s[None, :]).ravel(), 0.0)

    qz = problem.q_mul(z)
    obj = float(0.5 * z @ qz + problem.c @ z)
    r_d = qz + problem.c - problem.at_mul(nu) - mu
    r_p = problem.a_mul(z) - problem.b
    res = {
        "primal_eq": float(np.abs(r_p).max()) / b_scale,
        "dual_stationarity": float(np.abs(r_d).max())
        / (1.0 + np.abs(problem.c).max() + np.abs(qz).max()),
        "complementarity": abs(float(z @ mu)) / problem.n / (1.0 + abs(obj)),
    }
    status = "optimal" if max(res.values()) <= tol else "max_iter"
    return QpSolution(z, obj, res, inner_iters, status, nu, mu)
