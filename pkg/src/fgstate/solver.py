"""Levenberg-Marquardt over whitened factor residuals.

Variables are either objects with ``dim`` and ``retract(delta)`` (such as
:class:`~fgstate.state.NavState`) or plain numpy vectors, which retract
additively. The normal equations are stored in LAPACK lower-banded form: a
chain of states with factors spanning a few neighbours gives a narrow band,
so Cholesky cost grows linearly with window length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from fgstate.state import NavState, retract_states

log = logging.getLogger(__name__)


@dataclass
class LMParams:
    max_iterations: int = 50
    relative_decrease_tol: float = 1e-12
    gradient_tol: float = 1e-10
    # Marquardt damping scales diag(H), whose entries span ~12 decades on IMU
    # chains; any sizable start damps the weakly observed directions for
    # many iterations, so try an (almost) Gauss-Newton step first.
    initial_lambda: float = 1e-12
    rejected_lambda: float = 1e-6
    max_lambda: float = 1e12


def var_dim(value) -> int:
    d = getattr(value, "dim", None)
    return int(d) if d is not None else int(np.size(value))


def retract(value, delta: np.ndarray):
    if hasattr(value, "retract"):
        return value.retract(delta)
    return np.asarray(value, dtype=float) + delta.reshape(np.shape(value))


class Problem:
    """Fixed variable ordering and sparsity pattern for a set of factors.

    Factors whose class names a ``batch`` type are evaluated together, one
    group per class; all others are linearized one at a time.
    """

    def __init__(self, ordering: Sequence[Hashable], dims: Mapping[Hashable, int], factors: Sequence):
        self.ordering = list(ordering)
        self.factors = list(factors)
        self.offsets = {}
        n = 0
        for k in self.ordering:
            self.offsets[k] = n
            n += dims[k]
        self.dims = dict(dims)
        self.n = n

        by_type: dict = {}
        self.singles = []
        for f in self.factors:
            if getattr(type(f), "batch", None) is not None:
                by_type.setdefault(type(f), []).append(f)
            else:
                self.singles.append(f)
        self.groups = []
        for cls, fs in by_type.items():
            if len(fs) > 1:
                self.groups.append(cls.batch(fs))
            else:
                self.singles.extend(fs)

        def index_of(keys):
            return np.concatenate([np.arange(self.offsets[k], self.offsets[k] + self.dims[k]) for k in keys])

        self._group_index = [np.array([index_of(f.keys) for f in grp.factors]) for grp in self.groups]
        self._single_index = [index_of(f.keys) for f in self.singles]
        rows, cols = [], []
        band = 0
        for idx in self._group_index:
            band = max(band, int((idx.max(axis=1) - idx.min(axis=1)).max()))
            rows.append(np.broadcast_to(idx[:, :, None], idx.shape + idx.shape[1:]).ravel())
            cols.append(np.broadcast_to(idx[:, None, :], idx.shape + idx.shape[1:]).ravel())
        for idx in self._single_index:
            band = max(band, int(idx.max() - idx.min()))
            rows.append(np.repeat(idx, len(idx)))
            cols.append(np.tile(idx, len(idx)))
        self.bandwidth = band
        if rows:
            r = np.concatenate(rows)
            c = np.concatenate(cols)
            self._lower = r >= c
            self._band_linear = ((r - c) * n + c)[self._lower]
        else:
            self._lower = np.zeros(0, dtype=bool)
            self._band_linear = np.zeros(0, dtype=int)

    def cost(self, values: Mapping) -> float:
        total = 0.0
        for grp in self.groups:
            e = grp.error(values)
            total += float(np.einsum("ij,ij->", e, e))
        for f in self.singles:
            e = f.error(values)
            total += float(e @ e)
        return 0.5 * total

    def linearize(self, values: Mapping) -> tuple[np.ndarray, np.ndarray, float]:
        """Banded Gauss-Newton Hessian (lower form), gradient and cost."""
        g = np.zeros(self.n)
        data = []
        total = 0.0
        for grp, idx in zip(self.groups, self._group_index):
            r, jacs = grp.linearize(values)
            J = jacs[0] if len(jacs) == 1 else np.concatenate(jacs, axis=2)
            total += float(np.einsum("ij,ij->", r, r))
            g += np.bincount(idx.ravel(), weights=np.einsum("nmi,nm->ni", J, r).ravel(), minlength=self.n)
            data.append((np.swapaxes(J, 1, 2) @ J).ravel())
        for f, idx in zip(self.singles, self._single_index):
            r, jacs = f.linearize(values)
            J = jacs[0] if len(jacs) == 1 else np.hstack(jacs)
            total += float(r @ r)
            g[idx] += J.T @ r
            data.append((J.T @ J).ravel())
        size = (self.bandwidth + 1) * self.n
        if data:
            flat = np.bincount(self._band_linear, weights=np.concatenate(data)[self._lower], minlength=size)
        else:
            flat = np.zeros(size)
        return flat.reshape(self.bandwidth + 1, self.n), g, 0.5 * total

    def split(self, delta: np.ndarray) -> dict:
        return {k: delta[self.offsets[k] : self.offsets[k] + self.dims[k]] for k in self.ordering}

    def apply(self, values: Mapping, delta: np.ndarray) -> dict:
        out = dict(values)
        if self._uniform_states(values):
            states = retract_states([values[k] for k in self.ordering], delta)
            out.update(zip(self.ordering, states))
            return out
        for k in self.ordering:
            o = self.offsets[k]
            out[k] = retract(values[k], delta[o : o + self.dims[k]])
        return out

    def _uniform_states(self, values: Mapping) -> bool:
        return bool(self.ordering) and all(type(values[k]) is NavState for k in self.ordering)


def banded_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``H @ x`` for symmetric ``H`` in lower-banded storage."""
    n = ab.shape[1]
    y = ab[0] * x
    for d in range(1, ab.shape[0]):
        y[d:] += ab[d, : n - d] * x[: n - d]
        y[: n - d] += ab[d, : n - d] * x[d:]
    return y


def banded_to_dense(ab: np.ndarray) -> np.ndarray:
    n = ab.shape[1]
    H = np.zeros((n, n))
    for d in range(min(ab.shape[0], n)):
        i = np.arange(d, n)
        H[i, i - d] = ab[d, : n - d]
        H[i - d, i] = ab[d, : n - d]
    return H


@dataclass
class SolveResult:
    values: dict
    problem: Problem
    hessian: np.ndarray  # lower-banded, at the final values
    gradient: np.ndarray
    initial_cost: float
    cost: float
    iterations: int
    converged: bool
    degenerate: bool = False
    reason: str = ""
    _chol: np.ndarray | None = field(default=None, repr=False)

    @property
    def gradient_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))

    def _factor(self) -> np.ndarray:
        if self._chol is None:
            ab = self.hessian.copy()
            try:
                self._chol = cholesky_banded(ab, lower=True, check_finite=False)
            except LinAlgError:
                self.degenerate = True
                ridge = 1e-9 * max(1.0, float(np.max(ab[0])))
                ab[0] += ridge
                self._chol = cholesky_banded(ab, lower=True)
        return self._chol

    def marginal_covariance(self, key) -> np.ndarray:
        p = self.problem
        o, d = p.offsets[key], p.dims[key]
        if o + d == p.n:
            # last block: (H^-1)_kk = (L_kk L_kk^T)^-1 for the trailing block of L
            L = self._factor()
            i, j = np.tril_indices(d)
            ok = i - j < L.shape[0]
            Lkk = np.zeros((d, d))
            Lkk[i[ok], j[ok]] = L[(i - j)[ok], o + j[ok]]
            Linv = np.linalg.inv(Lkk)
            cov = Linv.T @ Linv
            return 0.5 * (cov + cov.T)
        E = np.zeros((p.n, d))
        E[o : o + d] = np.eye(d)
        X = cho_solve_banded((self._factor(), True), E)
        cov = X[o : o + d]
        return 0.5 * (cov + cov.T)


def levenberg_marquardt(problem: Problem, values: Mapping, params: LMParams | None = None) -> SolveResult:
    """Minimize ``0.5 * sum ||r_f||^2``; a step is accepted only if it lowers the cost.

    Convergence: the gradient norm falls below ``gradient_tol``, or the
    relative cost decrease of the last accepted step or the model-predicted
    relative decrease of the next step falls below ``relative_decrease_tol``.
    The Hessian and gradient in the result are always those of the returned
    values.
    """
    params = params or LMParams()
    values = dict(values)
    ab, g, cost = problem.linearize(values)
    initial_cost = cost
    lam = params.initial_lambda
    converged = False
    reason = "max iterations"
    final_chol = None
    it = 0
    while True:
        if np.linalg.norm(g) < params.gradient_tol:
            converged, reason = True, "gradient"
            break
        if it >= params.max_iterations:
            break
        accepted = False
        stop = False
        while lam <= params.max_lambda:
            damped = ab.copy()
            scale = np.maximum(ab[0], 1e-12)
            damped[0] += lam * scale
            try:
                chol = cholesky_banded(damped, lower=True, overwrite_ab=True, check_finite=False)
            except LinAlgError:
                lam = max(lam * 10.0, params.rejected_lambda)
                continue
            delta = cho_solve_banded((chol, True), -g, check_finite=False)
            if not np.all(np.isfinite(delta)):
                lam = max(lam * 10.0, params.rejected_lambda)
                continue
            # (H + lam D) delta = -g gives delta' H delta = -g' delta - lam delta' D delta
            predicted = 0.5 * (lam * (delta * scale) @ delta - g @ delta)
            if predicted <= params.relative_decrease_tol * cost:
                stop = True
                if lam <= params.initial_lambda:
                    final_chol = chol
                break
            candidate = problem.apply(values, delta)
            # linearizing the candidate yields its cost and is reused on acceptance
            lin = problem.linearize(candidate)
            if np.isfinite(lin[2]) and lin[2] <= cost:
                accepted = True
                break
            lam = max(lam * 10.0, params.rejected_lambda)
        if stop:
            converged, reason = True, "relative decrease"
            break
        if not accepted:
            converged, reason = True, "no descent step"
            break
        it += 1
        lam = max(lam / 10.0, params.initial_lambda)
        rel = (cost - lin[2]) / cost if cost > 0 else 0.0
        values = candidate
        ab, g, cost = lin
        if rel < params.relative_decrease_tol:
            converged, reason = True, "relative decrease"
            break
    result = SolveResult(values, problem, ab, g, initial_cost, cost, it, converged, reason=reason, _chol=final_chol)
    if problem.n:
        result._factor()
    return result
