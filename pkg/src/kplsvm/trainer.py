"""End-to-end model training: dual assembly, bias recovery, verification.

The decision function is f(x) = sign(sum_i beta_i k(x_i, x) + b) with
beta_i = s_i y_i, where s is the combined multiplier vector of the dual.
Bias comes from complementary-slackness candidates averaged over all
samples with two active pieces; when no candidate exists, b falls back to
the exact minimizer of the primal objective in b with w fixed (a convex
piecewise-linear line search), taking the optimal point closest to zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels, loss, qp
from .data import NormalizationTransform, fit_normalizer
from .errors import DataError, SolverError, TrainingError
from .kernels import KernelSpec
from .loss import LossSpec

__all__ = [
    "TrainParams",
    "TrainedModel",
    "KktReport",
    "train",
    "recover_bias",
    "verify_kkt",
    "reduction_equivalence",
]

_PAR_TOL = 1e-9   # slope-coincidence guard in bias formulas


@dataclass(frozen=True)
class TrainParams:
    loss: LossSpec
    c0: float
    kernel: KernelSpec = field(default_factory=KernelSpec)
    balance_classes: bool = True
    qp_tol: float = 1e-8
    max_iter: int = 200
    active_threshold: float = 1e-6
    method: str = "auto"
    canonicalize: bool = True

    def __post_init__(self):
        if not self.c0 > 0:
            raise TrainingError(f"c0 must be positive, got {self.c0}")
        if not self.qp_tol > 0:
            raise TrainingError("qp_tol must be positive")
        if not 0 < self.active_threshold < 1:
            raise TrainingError("active_threshold must lie in (0, 1)")
        if self.loss.k < 2:
            raise TrainingError("loss must have at least one non-identity piece")


@dataclass
class KktReport:
    """Scale-normalized residuals of the optimality system.

    stationarity_w: negative part of the dual slack Qz + c - A^T nu
    (weight-stationarity multipliers must be nonnegative), relative to
    the objective's gradient scale.  stationarity_b: balance equation
    |sum_i s_i y_i| / (1 + ||s||_1).  stationarity_xi: per-sample cap
    equations max_i |C_i - sum of blocks| / (1 + C_i).  complementarity_max:
    multiplier-times-slack products of both piece families, using the
    recovered bias.  primal_feasibility_max: piece values exceeding the
    recovered slack xi_i = L(u_i) plus multiplier sign violations.
    """

    stationarity_w: float
    stationarity_b: float
    stationarity_xi: float
    complementarity_max: float
    primal_feasibility_max: float
    xi: np.ndarray

    @property
    def max_residual(self) -> float:
        return max(self.stationarity_w, self.stationarity_b,
                   self.stationarity_xi, self.complementarity_max,
                   self.primal_feasibility_max)


@dataclass
class TrainedModel:
    kernel: KernelSpec
    loss: LossSpec
    c0: float
    support_x: np.ndarray
    beta: np.ndarray
    bias: float
    normalizer: NormalizationTransform | None = None
    diagnostics: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if self.normalizer is not None:
            X = self.normalizer.apply(X)
        if X.shape[1] != self.support_x.shape[1]:
            raise DataError(
                f"model expects {self.support_x.shape[1]} features, "
                f"got {X.shape[1]}")
        K = kernels.cross_gram(self.kernel, X, self.support_x)
        return K @ self.beta + self.bias

    def predict(self, X) -> np.ndarray:
        # score exactly 0 maps to +1
        return np.where(self.decision_function(X) >= 0.0, 1.0, -1.0)


def _class_caps(y: np.ndarray, c0: float, balance: bool) -> np.ndarray:
    pos = int((y > 0).sum())
    neg = int((y < 0).sum())
    if pos == 0 or neg == 0:
        raise TrainingError("training data must contain both classes")
    C = np.full(y.size, c0)
    if balance:
        C[y < 0] = (pos / neg) * c0
    return C


def train(X, y, params: TrainParams, normalize: bool = True) -> TrainedModel:
    """Fit a piecewise-linear-loss kernel machine.

    ``normalize`` fits the [-1, 1] feature transform on X and stores it in
    the model; pass False when features are already scaled.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise TrainingError("X must be (l, n) with matching label vector")
    if y.size < 2:
        raise TrainingError("need at least two training points")
    if not np.isfinite(X).all():
        raise TrainingError("non-finite features")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise TrainingError("labels must be +-1")

    normalizer = fit_normalizer(X) if normalize else None
    Xn = normalizer.apply(X) if normalizer else X

    spec = loss.canonical(params.loss) if params.canonicalize else params.loss
    C = _class_caps(y, params.c0, params.balance_classes)
    G = kernels.gram(params.kernel, Xn)
    H = G * np.outer(y, y)

    problem = qp.assemble_dual(H, y, C, spec)
    try:
        sol = qp.solve(problem, tol=params.qp_tol, max_iter=params.max_iter,
                       method=params.method)
    except SolverError as exc:
        raise TrainingError(f"dual solve failed: {exc}") from exc
    if sol.status != "optimal":
        raise TrainingError(
            f"dual solve ended with status {sol.status!r} after "
            f"{sol.iterations} iterations "
            f"(residuals {sol.kkt_residuals})")

    l = y.size
    s = problem.structure.combined(sol.z)
    beta = s * y
    scores_wo_b = G @ beta          # sum_i beta_i k(x_i, x_j), no bias

    b, n_cands, used_fallback = recover_bias(
        sol.z, scores_wo_b, spec, y, C, params.active_threshold, mu=sol.mu)

    report = _kkt_report(sol, problem, spec, y, C, scores_wo_b, b)

    dual_value = -sol.objective     # maximized dual of the original problem
    norm_w_sq = float(s @ (H @ s))
    xi = report.xi
    primal_value = 0.5 * norm_w_sq + float(C @ xi)
    gap_rel = abs(primal_value - dual_value) / (1.0 + abs(dual_value))

    keep = np.abs(s) > params.active_threshold * params.c0
    pruned = ~keep
    if pruned.any() and keep.any():
        delta = np.abs(G[:, pruned] @ beta[pruned]).max()
        if delta > 1e-6:
            keep = np.ones(l, dtype=bool)   # pruning would move scores
    elif not keep.any():
        keep = np.ones(l, dtype=bool)

    diagnostics = {
        "bias_candidates_used": n_cands,
        "bias_fallback": used_fallback,
        "kkt_max_residual": report.max_residual,
        "duality_gap_rel": gap_rel,
        "primal_objective": primal_value,
        "dual_objective": dual_value,
        "qp_iterations": sol.iterations,
        "qp_status": sol.status,
        "support_count": int(keep.sum()),
        "class_ratio": float((y > 0).sum() / (y < 0).sum()),
        "balanced": params.balance_classes,
        "kkt_report": report,
    }
    return TrainedModel(kernel=params.kernel, loss=params.loss,
                        c0=params.c0, support_x=Xn[keep],
                        beta=beta[keep], bias=b, normalizer=normalizer,
                        diagnostics=diagnostics)


def recover_bias(z: np.ndarray, scores_wo_b: np.ndarray, spec: LossSpec,
                 y: np.ndarray, C: np.ndarray, threshold: float,
                 mu: np.ndarray | None = None):
    """(bias, candidate_count, used_fallback) from complementary slackness.

    A sample whose identity multiplier and one piece multiplier are both
    active pins u_j = eps_m / (1 + tau_m); two active piece multipliers
    pin u_j = (eps_2 - eps_1) / (tau_2 - tau_1).  Each gives the candidate
    b = y_j (1 - u_j) - score_j.  Candidates average arithmetically; an
    empty set falls back to the exact primal line search in b.

    ``mu`` (the dual slack vector, when available) refines which
    multipliers count as active: a coordinate whose slack dominates its
    value is converging to zero, and its margin equation carries the
    solver's complementarity error rather than information about b.
    """
    l = y.size
    k = spec.k
    blocks = z.reshape(k, l)
    active = blocks > threshold * C[None, :]
    if mu is not None:
        active &= blocks > mu.reshape(k, l)
    taus, epss = spec.taus, spec.epsilons

    cands: list[float] = []
    for j in range(l):
        if active[0, j]:
            for m in range(k - 1):
                if active[m + 1, j] and abs(1.0 + taus[m]) >= _PAR_TOL:
                    u = epss[m] / (1.0 + taus[m])
                    cands.append(y[j] * (1.0 - u) - scores_wo_b[j])
        for m1, m2 in itertools.combinations(range(k - 1), 2):
            if active[m1 + 1, j] and active[m2 + 1, j] \
                    and abs(taus[m2] - taus[m1]) >= _PAR_TOL:
                u = (epss[m2] - epss[m1]) / (taus[m2] - taus[m1])
                cands.append(y[j] * (1.0 - u) - scores_wo_b[j])
    if cands:
        return float(np.mean(cands)), len(cands), False
    return _bias_line_search(scores_wo_b, spec, y, C), 0, True


def _envelope_kinks(spec: LossSpec) -> list[float]:
    """u-positions where the active piece of the loss changes."""
    pieces = loss.pieces(spec)
    kinks = []
    for p, q in itertools.combinations(pieces, 2):
        if abs(p.slope - q.slope) < _PAR_TOL:
            continue
        u = (q.intercept - p.intercept) / (p.slope - q.slope)
        v = p.slope * u + p.intercept
        top = max(pc.slope * u + pc.intercept for pc in pieces)
        if v >= top - 1e-9 * (1.0 + abs(top)):
            kinks.append(u)
    return sorted(set(kinks))


def _bias_line_search(scores_wo_b, spec, y, C) -> float:
    """Exact minimizer of sum_i C_i L(1 - y_i (score_i + b)) over b.

    The objective is convex piecewise-linear with breakpoints only where
    some sample's margin crosses a kink of the loss.  Among minimizers the
    one closest to zero is returned (zero when the objective is flat).
    """
    kinks = _envelope_kinks(spec)
    if not kinks:
        return 0.0
    bps = np.unique(np.concatenate(
        [y * (1.0 - u) - scores_wo_b for u in kinks]))

    def phi(b):
        return float(C @ loss.eval_loss(spec, 1.0 - y * (scores_wo_b + b)))

    vals = np.array([phi(b) for b in bps])
    vmin = vals.min()
    opt = bps[vals <= vmin + 1e-12 * (1.0 + abs(vmin))]
    lo, hi = float(opt.min()), float(opt.max())
    # flat tails extend the optimal set to +-infinity
    step = 1.0 + (bps.max() - bps.min())
    if np.isclose(phi(bps[0] - step), vals[0], rtol=0, atol=1e-12 * (1 + abs(vals[0]))) \
            and vals[0] <= vmin + 1e-12 * (1.0 + abs(vmin)):
        lo = -np.inf
    if np.isclose(phi(bps[-1] + step), vals[-1], rtol=0, atol=1e-12 * (1 + abs(vals[-1]))) \
            and vals[-1] <= vmin + 1e-12 * (1.0 + abs(vmin)):
        hi = np.inf
    if lo <= 0.0 <= hi:
        return 0.0
    return hi if hi < 0.0 else lo


def _kkt_report(sol: qp.QpSolution, problem: qp.QpProblem, spec: LossSpec,
                y, C, scores_wo_b, b) -> KktReport:
    """Recompute every optimality equation from the raw solution."""
    z, nu = sol.z, sol.nu
    l = y.size
    k = spec.k
    Qz = problem.q_mul(z)
    mu = Qz + problem.c - problem.at_mul(nu)
    grad_scale = 1.0 + np.abs(problem.c).max() + np.abs(Qz).max()
    stationarity_w = float(max(0.0, -mu.min()) / grad_scale)

    s = problem.structure.combined(z)
    stationarity_b = float(abs(s @ y) / (1.0 + np.abs(s).sum()))

    blocks = z.reshape(k, l)
    stationarity_xi = float(
        (np.abs(C - blocks.sum(axis=0)) / (1.0 + C)).max())

    u = 1.0 - y * (scores_wo_b + b)
    xi = np.atleast_1d(loss.eval_loss(spec, u))
    comp = np.abs(blocks[0] * (xi - u)) / (1.0 + C)
    feas = 0.0
    for m, (tau, eps) in enumerate(zip(spec.taus, spec.epsilons)):
        piece = -tau * u + eps
        comp = np.maximum(comp, np.abs(blocks[m + 1] * (xi - piece)) / (1.0 + C))
        feas = max(feas, float((piece - xi).max()))
    complementarity_max = float(comp.max())
    primal_feasibility_max = float(max(0.0, feas, -z.min()))
    return KktReport(stationarity_w=stationarity_w,
                     stationarity_b=stationarity_b,
                     stationarity_xi=stationarity_xi,
                     complementarity_max=complementarity_max,
                     primal_feasibility_max=primal_feasibility_max,
                     xi=xi)


def verify_kkt(sol: qp.QpSolution, problem: qp.QpProblem, spec: LossSpec,
               y, C, scores_wo_b, b, z_override=None) -> KktReport:
    """Independent KKT recheck; ``z_override`` audits a perturbed point."""
    if z_override is not None:
        sol = qp.QpSolution(z=np.asarray(z_override, dtype=float),
                            objective=sol.objective,
                            kkt_residuals=dict(sol.kkt_residuals),
                            iterations=sol.iterations, status=sol.status,
                            nu=sol.nu, mu=sol.mu)
        s = problem.structure.combined(sol.z)
        scores_wo_b = _scores_from_combined(problem, s, y)
    return _kkt_report(sol, problem, spec, y, C, scores_wo_b, b)


def _scores_from_combined(problem, s, y):
    # H = (y y^T) o G, so G (s o y) = y o (H s)
    return y * (problem.structure.H @ s)


def reduction_equivalence(dataset, c0: float,
                          kernel: KernelSpec | None = None,
                          tau: float = -0.6, qp_tol: float = 1e-8) -> dict:
    """Check the hinge and pinball special cases coincide with embeddings.

    Trains (i) the 3-piece all-zero spec against the hinge spec and
    (ii) the pinball spec against its 3-piece embedding (tau, 0, 0, 0) on
    the dataset's training half, comparing predictions on both halves and
    dual objectives.
    """
    kernel = kernel or KernelSpec()
    if dataset.split is None:
        raise TrainingError("dataset needs a train/test split")
    tr, te = dataset.split
    Xtr, ytr = dataset.X[tr], dataset.y[tr]
    X_all = np.vstack([dataset.X[tr], dataset.X[te]])

    pairs = {
        "hinge": (loss.hinge(),
                  LossSpec(taus=(0.0, 0.0), epsilons=(0.0, 0.0))),
        "pinball": (loss.pinball(tau),
                    LossSpec(taus=(tau, 0.0), epsilons=(0.0, 0.0))),
    }
    report = {"tau": tau}
    for name, (small, embedded) in pairs.items():
        models = []
        for sp, canon in ((small, True), (embedded, False)):
            # the embedded spec keeps its redundant piece so the check
            # really solves the larger dual rather than a renamed copy
            params = TrainParams(loss=sp, c0=c0, kernel=kernel,
                                 qp_tol=qp_tol, canonicalize=canon)
            models.append(train(Xtr, ytr, params))
        pred = [m.predict(X_all) for m in models]
        obj = [m.diagnostics["dual_objective"] for m in models]
        report[f"{name}_predictions_match"] = bool((pred[0] == pred[1]).all())
        report[f"{name}_objective_reldiff"] = abs(obj[0] - obj[1]) / (
            1.0 + abs(obj[0]))
    return report
