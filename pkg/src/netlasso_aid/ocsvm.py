"""Linear one-class SVM node model and its proximal subproblem solver.

The per-node training loss over windows ``x_1..x_N`` is

    f(w, b) = 0.5*||w||^2 + (1/(nu*N)) * sum_i max(0, b - <w, x_i>) - b

with the slack variables eliminated analytically into the hinge terms.
``solve_local`` minimises ``f`` plus optional quadratic proximal terms
``(rho/2)*||w - target||^2`` (on ``w`` only; ``b`` stays free), which is the
node update of the graph-coupled ADMM in :mod:`netlasso_aid.engine`.

Solver design: an inner ADMM on the splitting ``s = b*1 - X w`` provides
globally convergent progress, and an exact KKT refinement on the support
set identified by the iterate finishes the solve whenever its verification
passes.  Both paths are certified through the Lagrange dual

    D(alpha) = kappa - ||v + X^T alpha||^2 / (2*(1+R)),
    alpha in {0 <= alpha_i <= 1/(nu*N), sum_i alpha_i = 1},

where ``R = sum_p rho_p``, ``v = sum_p rho_p * target_p`` and
``kappa = sum_p (rho_p/2)*||target_p||^2``: any feasible ``alpha`` yields a
true lower bound, so ``F(w, b) - D(alpha)`` is a certified objective gap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateDataWarning, InvalidInputError, SolverFailureError

NORMAL = "normal"
INCIDENT = "incident"

#: default certified objective-gap tolerance for the subproblem solver
DEFAULT_TOL = 1e-6

_MAX_INNER_ITER = 200_000
_GAP_FLOOR = 1e-12
_SIGMA = 1.0          # splitting penalty
_RELAX = 1.7          # over-relaxation factor


@dataclass(frozen=True)
class LossConfig:
    """Trade-off parameter ``nu`` and training-sample count ``n``."""

    nu: float
    n: int

    def __post_init__(self):
        if not (0.0 < self.nu <= 1.0):
            raise InvalidInputError(f"nu must be in (0, 1], got {self.nu}")
        if self.n < 1:
            raise InvalidInputError(f"n must be >= 1, got {self.n}")

    @property
    def hinge_weight(self) -> float:
        return 1.0 / (self.nu * self.n)


@dataclass(frozen=True)
class ModelParams:
    """Weight vector ``w`` and local bias ``b`` of one node model."""

    w: np.ndarray
    b: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1:
            raise InvalidInputError("w must be a 1-D vector")
        if not np.all(np.isfinite(w)) or not np.isfinite(self.b):
            raise InvalidInputError("model parameters must be finite")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class ProxTerm:
    """One quadratic pull ``(rho/2)*||w - target||^2`` on the weight vector."""

    target: np.ndarray
    rho: float

    def __post_init__(self):
        target = np.asarray(self.target, dtype=float)
        if target.ndim != 1 or not np.all(np.isfinite(target)):
            raise InvalidInputError("prox target must be a finite 1-D vector")
        if not (self.rho > 0.0):
            raise InvalidInputError(f"prox rho must be > 0, got {self.rho}")
        target = target.copy()
        target.flags.writeable = False
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "rho", float(self.rho))


def _as_matrix(data) -> np.ndarray:
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise InvalidInputError("data must be a non-empty (N, d) array of windows")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("data contains non-finite values")
    return X


def primal_objective(params: ModelParams, data, cfg: LossConfig) -> float:
    """Evaluate the one-class SVM loss at ``params`` over ``data``."""
    X = _as_matrix(data)
    if X.shape[1] != params.dim:
        raise InvalidInputError(
            f"dimension mismatch: data has d={X.shape[1]}, model has d={params.dim}"
        )
    if cfg.n != X.shape[0]:
        raise InvalidInputError(f"cfg.n={cfg.n} does not match |data|={X.shape[0]}")
    scores = X @ params.w
    hinges = np.maximum(0.0, params.b - scores)
    return float(0.5 * params.w @ params.w + cfg.hinge_weight * hinges.sum() - params.b)


def decision_score(params: ModelParams, x) -> float:
    """Signed decision value ``<w, x> - b``; negative means incident-like."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.dim,):
        raise InvalidInputError(
            f"dimension mismatch: x has shape {x.shape}, model has d={params.dim}"
        )
    return float(params.w @ x - params.b)


def anomaly_score(params: ModelParams, x) -> float:
    """Negated decision score; larger means more incident-like."""
    return -decision_score(params, x)


def classify(params: ModelParams, x) -> str:
    """Label ``x``: incident iff the decision score is strictly negative."""
    return INCIDENT if decision_score(params, x) < 0.0 else NORMAL


def optimal_bias(scores: np.ndarray, nu: float) -> float:
    """Exact minimiser over ``b`` of the loss given fixed projections.

    The hinge-plus-linear part ``(1/(nu*N))*sum max(0, b - s_i) - b`` is
    piecewise linear in ``b`` with minimiser at the ``ceil(nu*N)``-th smallest
    projection (the smallest minimiser is returned when a flat stretch of
    optima exists, e.g. for integer ``nu*N``).
    """
    n = scores.shape[0]
    k = int(np.ceil(nu * n - 1e-12))
    k = min(max(k, 1), n)
    return float(np.partition(scores, k - 1)[k - 1])


def _feasible_dual(candidate: np.ndarray, cap: float) -> np.ndarray:
    # Cheapest feasible point of {0 <= a <= cap, sum a = 1} near `candidate`:
    # clip, then either rescale down or spread the deficit over the headroom.
    a = np.clip(candidate, 0.0, cap)
    s = a.sum()
    headroom = cap - a
    total = headroom.sum()  # n*cap - s = 1/nu - s, but can round to 0 at nu=1
    if s >= 1.0 or total <= 0.0:
        return a / s
    return a + (1.0 - s) * headroom / total


class LocalSubproblem:
    """Reusable solver for one node's proximal one-class SVM subproblem.

    Caches the data-dependent factorisation so repeated solves (the ADMM
    node updates, which change only the prox targets) are cheap, and keeps
    the splitting state across calls for warm starts.  Deterministic: no
    randomness anywhere.
    """

    def __init__(self, data, cfg: LossConfig, rho_total: float = 0.0):
        self.X = _as_matrix(data)
        if cfg.n != self.X.shape[0]:
            raise InvalidInputError(
                f"cfg.n={cfg.n} does not match |data|={self.X.shape[0]}"
            )
        self.cfg = cfg
        self.n, self.d = self.X.shape
        self.C = cfg.hinge_weight
        self.degenerate = bool(np.all(self.X == self.X[0]))
        self.sigma = _SIGMA
        self._XtX = self.X.T @ self.X
        self._Xt1 = self.X.sum(axis=0)
        self._set_curvature(rho_total)
        self._w = np.zeros(self.d)
        self._s = np.zeros(self.n)
        self._y = np.zeros(self.n)

    def _set_curvature(self, rho_total: float):
        self.R = float(rho_total)
        H = np.empty((self.d + 1, self.d + 1))
        H[: self.d, : self.d] = (1.0 + self.R) * np.eye(self.d) + self.sigma * self._XtX
        H[: self.d, self.d] = -self.sigma * self._Xt1
        H[self.d, : self.d] = -self.sigma * self._Xt1
        H[self.d, self.d] = self.sigma * self.n
        self._factor = cho_factor(H)

    def _objective(self, w: np.ndarray, b: float, v: np.ndarray, kappa: float) -> float:
        hinges = np.maximum(0.0, b - self.X @ w)
        quad = 0.5 * (1.0 + self.R) * (w @ w) - v @ w + kappa
        return float(quad + self.C * hinges.sum() - b)

    def _dual_bound(self, alpha: np.ndarray, v: np.ndarray, kappa: float) -> float:
        g = v + self.X.T @ alpha
        return float(kappa - (g @ g) / (2.0 * (1.0 + self.R)))

    # -- exact refinement ---------------------------------------------------

    def _refine(self, w, v, kappa, y=None):
        """Active-set finish from the support structure implied by the iterate.

        Maintains a (cap / free / zero) partition of the dual variables and
        solves the equality-constrained KKT system on the free set.  The
        partition is seeded from the splitting dual when available (it
        encodes the support directly); pivoting moves one variable at a
        time, bound violations first.  Acceptance requires a certified
        duality gap at rounding level, so a wrong partition can never yield
        a wrong answer (it returns ``None`` and ADMM continues).
        """
        X, C, n, d = self.X, self.C, self.n, self.d
        proj = X @ w
        b0 = optimal_bias(proj, self.cfg.nu)
        scale = 1.0 + abs(b0) + float(np.max(np.abs(proj)))
        eps = 1e-10 * scale
        state = None
        if y is not None:
            a = self.sigma * y
            margin = 1e-6 * C
            state = np.where(a >= C - margin, 2, 0).astype(np.int8)
            state[(a > margin) & (a < C - margin)] = 1
        if state is None or (state == 1).sum() > d + 2:
            dist = np.abs(proj - b0)
            near = np.argsort(dist, kind="stable")[: d + 1]
            state = np.where(proj < b0, 2, 0).astype(np.int8)
            state[near[dist[near] <= 1e-4 * scale]] = 1
        seen = set()
        for _pivot in range(60):
            key = state.tobytes()
            if key in seen:
                return None
            seen.add(key)
            low = state == 2
            free = np.flatnonzero(state == 1)
            mass = 1.0 - C * low.sum()
            base = v + C * (X[low].sum(axis=0) if low.any() else 0.0)
            alpha = np.zeros(n)
            alpha[low] = C
            if free.size == 0:
                if abs(mass) > 1e-9 * (1.0 + C):
                    return None
                w_new = base / (1.0 + self.R)
                raw = np.empty(0)
            else:
                Xf = X[free]
                G = (Xf @ Xf.T) / (1.0 + self.R)
                k = free.size
                A = np.zeros((k + 1, k + 1))
                A[:k, :k] = G
                A[:k, k] = -1.0
                A[k, :k] = 1.0
                rhs = np.concatenate([-(Xf @ base) / (1.0 + self.R), [mass]])
                sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
                raw = sol[:k]
                alpha[free] = np.clip(raw, 0.0, C)
                w_new = (base + Xf.T @ alpha[free]) / (1.0 + self.R)
            proj_new = X @ w_new
            b_new = optimal_bias(proj_new, self.cfg.nu)
            alpha_feas = _feasible_dual(alpha, C)
            obj = self._objective(w_new, b_new, v, kappa)
            gap = obj - self._dual_bound(alpha_feas, v, kappa)
            if gap <= max(_GAP_FLOOR, 1e-12 * (1.0 + abs(obj))):
                return w_new, b_new, alpha_feas, gap
            # single-move pivot: worst bound violation leaves the free set;
            # otherwise the worst boundary violation enters it
            if raw.size and (np.min(raw, initial=0.0) < -eps or np.max(raw, initial=0.0) > C + eps):
                over = np.maximum(-raw, raw - C)
                worst = int(np.argmax(over))
                state[free[worst]] = 0 if raw[worst] < -eps else 2
                continue
            viol = np.where(
                ((state == 2) & (proj_new > b_new + eps))
                | ((state == 0) & (proj_new < b_new - eps)),
                np.abs(proj_new - b_new),
                0.0,
            )
            worst = int(np.argmax(viol))
            if viol[worst] <= 0.0:
                return None
            if (state == 1).sum() >= d + 2:
                # free set full: park the member nearest a bound at that bound
                near_bound = np.argmin(np.minimum(np.abs(raw), np.abs(C - raw)))
                state[free[near_bound]] = 0 if raw[near_bound] < C / 2 else 2
            state[worst] = 1
        return None

    # -- main entry ----------------------------------------------------------

    def solve(
        self, prox: Sequence[ProxTerm] = (), tol: float = DEFAULT_TOL
    ) -> tuple[ModelParams, float]:
        """Minimise the composite objective; returns (params, certified gap)."""
        if not (tol > 0.0):
            raise InvalidInputError(f"tol must be > 0, got {tol}")
        rho_total = 0.0
        v = np.zeros(self.d)
        kappa = 0.0
        for p in prox:
            if p.target.shape[0] != self.d:
                raise InvalidInputError("prox target dimension mismatch")
            rho_total += p.rho
            v += p.rho * p.target
            kappa += 0.5 * p.rho * (p.target @ p.target)
        if abs(rho_total - self.R) > 1e-15 * max(1.0, rho_total):
            self._set_curvature(rho_total)
        if self.degenerate:
            warnings.warn(
                "training windows are all identical; model is weakly determined",
                DegenerateDataWarning,
                stacklevel=3,
            )
            return self._solve_degenerate(v, kappa)

        # tighter internal target so first-order (kink-aware) optimality holds
        # at the returned point, not just an objective-level gap
        gap_target = min(tol, max(10.0 * tol * tol, _GAP_FLOOR))

        refined = self._refine(self._w, v, kappa, self._y)
        if refined is not None:
            return self._accept(refined)

        w, s, y = self._w, self._s, self._y
        X, C = self.X, self.C
        shrink = C / self.sigma
        best_obj = np.inf
        best_w, best_b, best_gap = w.copy(), 0.0, np.inf
        stale = 0
        next_refine = 10
        next_sigma_bump = 500
        rhs = np.empty(self.d + 1)
        for it in range(1, _MAX_INNER_ITER + 1):
            r = s - y
            rhs[: self.d] = v - self.sigma * (X.T @ r)
            rhs[self.d] = 1.0 + self.sigma * r.sum()
            wb = cho_solve(self._factor, rhs)
            w = wb[: self.d]
            b = wb[self.d]
            ax = b - X @ w
            axr = _RELAX * ax + (1.0 - _RELAX) * s
            t = axr + y
            s = np.where(t < 0.0, t, np.maximum(t - shrink, 0.0))
            y = y + axr - s

            proj = X @ w
            b_star = optimal_bias(proj, self.cfg.nu)
            obj = self._objective(w, b_star, v, kappa)
            alpha = _feasible_dual(self.sigma * y, C)
            gap = obj - self._dual_bound(alpha, v, kappa)
            if obj < best_obj - 1e-18:
                best_obj, best_w, best_b = obj, w.copy(), b_star
                stale = 0
            else:
                stale += 1
            best_gap = min(best_gap, gap)
            if gap <= gap_target:
                best_w, best_b, best_gap = w.copy(), b_star, gap
                break
            if it >= next_refine:
                refined = self._refine(w, v, kappa, y)
                if refined is not None:
                    self._w, self._s, self._y = w, s, y
                    return self._accept(refined)
                next_refine = it + min(max(10, it), 2000)
            # numerically stuck but contractually converged: accept
            if stale >= 200 and best_gap <= tol:
                break
            if stale >= 400 and it >= next_sigma_bump:
                # stalled rate: rebalance the splitting penalty (dual rescaled
                # to keep sigma*y, the multiplier estimate, unchanged)
                y *= self.sigma
                self.sigma = min(self.sigma * 4.0, 1e4)
                y /= self.sigma
                self._set_curvature(self.R)
                shrink = C / self.sigma
                stale = 0
                next_sigma_bump = it + 500
        else:
            self._w, self._s, self._y = w, s, y
            raise SolverFailureError(
                f"subproblem did not reach gap {gap_target:g} within "
                f"{_MAX_INNER_ITER} iterations (best certified gap {best_gap:g})",
                params=ModelParams(best_w, best_b),
                gap=best_gap,
            )
        self._w, self._s, self._y = w, s, y
        return ModelParams(best_w, best_b), float(best_gap)

    def _accept(self, refined):
        w, b, alpha, gap = refined
        # park the splitting state at the exact fixed point for warm restarts
        self._w = w.copy()
        self._s = b - self.X @ w
        self._y = alpha / self.sigma
        return ModelParams(w, b), float(gap)

    def _solve_degenerate(self, v, kappa):
        # all windows equal x0: the dual is a single point X^T alpha = x0,
        # so the solution is closed-form and the gap is exactly zero
        x0 = self.X[0]
        w = (v + x0) / (1.0 + self.R)
        b = optimal_bias(self.X @ w, self.cfg.nu)
        alpha = np.full(self.n, 1.0 / self.n)
        obj = self._objective(w, b, v, kappa)
        gap = obj - self._dual_bound(alpha, v, kappa)
        self._w, self._s, self._y = w.copy(), b - self.X @ w, alpha / self.sigma
        return ModelParams(w, b), float(max(gap, 0.0))


def solve_local(
    data,
    cfg: LossConfig,
    prox: Sequence[ProxTerm] = (),
    tol: float = DEFAULT_TOL,
) -> ModelParams:
    """Minimise the node loss plus proximal terms to certified gap ``tol``."""
    rho_total = sum(p.rho for p in prox)
    solver = LocalSubproblem(data, cfg, rho_total)
    params, _ = solver.solve(prox, tol)
    return params


def fit_standalone(data, cfg: LossConfig, tol: float = DEFAULT_TOL) -> ModelParams:
    """Fit the uncoupled one-class SVM (no proximal terms)."""
    return solve_local(data, cfg, (), tol)
