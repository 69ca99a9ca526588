"""Sparse linear solvers: BiCGSTAB and a classical AMG hierarchy.

The AMG side is a Ruge-Stuben style V(1,1) cycle (strength-of-connection
coarsening, direct interpolation, Galerkin coarse operators, symmetric
Gauss-Seidel smoothing) used as a preconditioner for BiCGSTAB.  solve_auto
falls back to plain BiCGSTAB when AMG setup fails or the preconditioned
iteration diverges.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg as sla
import scipy.sparse as sp
from numba import njit


class LinearSolveError(Exception):
    """Raised when no solver path reaches the requested tolerance."""


class AmgSetupError(Exception):
    """Raised when the multigrid hierarchy cannot be built (e.g. zero diagonal)."""


@dataclass
class SolveReport:
    """Outcome of one linear solve.

    residual is the true relative residual of the returned iterate,
    recomputed from scratch; residuals is the per-iteration history.
    """

    iterations: int
    residual: float
    method: str
    diverged: bool
    reason: str = ""
    residuals: list = field(default_factory=list)


def _as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise LinearSolveError(f"matrix is not square: {A.shape}")
    A.sort_indices()
    return A


def dump_matrix(A, path: str) -> None:
    """MatrixMarket coordinate dump for offline debugging."""
    scipy.io.mmwrite(path, sp.coo_matrix(A))


@njit(cache=True)
def _gs_sweep(indptr, indices, data, x, b, reverse):
    n = x.shape[0]
    if reverse:
        start, stop, step = n - 1, -1, -1
    else:
        start, stop, step = 0, n, 1
    i = start
    while i != stop:
        s = b[i]
        d = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            if j == i:
                d = data[jj]
            else:
                s -= data[jj] * x[j]
        x[i] = s / d
        i += step


def _symmetric_gs(A: sp.csr_matrix, x: np.ndarray, b: np.ndarray) -> None:
    _gs_sweep(A.indptr, A.indices, A.data, x, b, False)
    _gs_sweep(A.indptr, A.indices, A.data, x, b, True)


def _check_diagonal(A: sp.csr_matrix, level: int) -> None:
    d = A.diagonal()
    counts = np.diff(A.indptr)
    rowmax = np.zeros(A.shape[0])
    nz = counts > 0
    if A.data.size:
        rowmax[nz] = np.maximum.reduceat(np.abs(A.data), A.indptr[:-1][nz])
    bad = (rowmax == 0.0) | (np.abs(d) < 1e-12 * rowmax)
    if np.any(bad):
        raise AmgSetupError(
            f"level {level}: zero diagonal in row {int(np.nonzero(bad)[0][0])}")


def _strength(A: sp.csr_matrix, theta: float) -> sp.csr_matrix:
    """Strong-connection graph: -a_ij >= theta * max_k(-a_ik), negative couplings."""
    B = A.copy()
    B.setdiag(0.0)
    B.eliminate_zeros()
    n = A.shape[0]
    neg = -B.data
    counts = np.diff(B.indptr)
    rowmax = np.zeros(n)
    nz = counts > 0
    if neg.size:
        rowmax[nz] = np.maximum.reduceat(neg, B.indptr[:-1][nz])
    keep = (neg > 0.0) & (neg >= np.repeat(theta * rowmax, counts))
    rows = np.repeat(np.arange(n), counts)[keep]
    return sp.csr_matrix((np.ones(rows.size), (rows, B.indices[keep])), shape=(n, n))


def _coarsen(S: sp.csr_matrix) -> np.ndarray:
    """First-pass splitting; returns per-point state (1 = coarse, 2 = fine)."""
    n = S.shape[0]
    ST = S.T.tocsr()
    state = np.zeros(n, dtype=np.int8)
    iso = (np.diff(S.indptr) == 0) & (np.diff(ST.indptr) == 0)
    state[iso] = 2
    measure = np.diff(ST.indptr).astype(np.int64)
    heap = [(-measure[i], i) for i in range(n) if not iso[i]]
    heapq.heapify(heap)
    while heap:
        negm, i = heapq.heappop(heap)
        if state[i] != 0 or -negm != measure[i]:
            continue
        state[i] = 1
        for j in ST.indices[ST.indptr[i]:ST.indptr[i + 1]]:
            if state[j] != 0:
                continue
            state[j] = 2
            for k in S.indices[S.indptr[j]:S.indptr[j + 1]]:
                if state[k] == 0:
                    measure[k] += 1
                    heapq.heappush(heap, (-measure[k], int(k)))
    return state


def _direct_interpolation(A: sp.csr_matrix, S: sp.csr_matrix,
                          state: np.ndarray) -> sp.csr_matrix:
    n = A.shape[0]
    coarse = state == 1
    cidx = np.cumsum(coarse) - 1
    rows, cols, vals = [], [], []
    for i in range(n):
        if coarse[i]:
            rows.append(i)
            cols.append(cidx[i])
            vals.append(1.0)
            continue
        strong = S.indices[S.indptr[i]:S.indptr[i + 1]]
        strong_c = set(int(c) for c in strong if coarse[c])
        lo, hi = A.indptr[i], A.indptr[i + 1]
        diag = 0.0
        pos = 0.0
        neg_total = 0.0
        neg_strong = 0.0
        entries = []
        for jj in range(lo, hi):
            c = int(A.indices[jj])
            v = A.data[jj]
            if c == i:
                diag = v
            elif v > 0.0:
                pos += v
            else:
                neg_total += v
                if c in strong_c:
                    neg_strong += v
                    entries.append((c, v))
        if not entries:
            continue  # weakly coupled point: smoother-only correction
        scale = neg_total / neg_strong
        aii = diag + pos
        for c, v in entries:
            rows.append(i)
            cols.append(cidx[c])
            vals.append(-v * scale / aii)
    nc = int(coarse.sum())
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, nc))


@dataclass
class AmgLevel:
    A: sp.csr_matrix
    P: sp.csr_matrix | None = None
    R: sp.csr_matrix | None = None


class AmgHierarchy:
    """V(1,1) multigrid built by amg_setup; usable standalone or as preconditioner."""

    def __init__(self, levels: list[AmgLevel], coarse_lu=None):
        self.levels = levels
        self.coarse_lu = coarse_lu

    @property
    def level_sizes(self) -> list[int]:
        return [lvl.A.shape[0] for lvl in self.levels]

    def _coarse_solve(self, b: np.ndarray) -> np.ndarray:
        if self.coarse_lu is not None:
            return sla.lu_solve(self.coarse_lu, b)
        A = self.levels[-1].A
        x = np.zeros_like(b)
        for _ in range(3):
            _symmetric_gs(A, x, b)
        return x

    def _vcycle(self, k: int, b: np.ndarray, x: np.ndarray) -> np.ndarray:
        if k == len(self.levels) - 1:
            return self._coarse_solve(b)
        lvl = self.levels[k]
        _symmetric_gs(lvl.A, x, b)
        r = b - lvl.A @ x
        ec = self._vcycle(k + 1, lvl.R @ r, np.zeros(lvl.R.shape[0]))
        x += lvl.P @ ec
        _symmetric_gs(lvl.A, x, b)
        return x

    def cycle(self, b: np.ndarray, x: np.ndarray | None = None) -> np.ndarray:
        if x is None:
            x = np.zeros_like(b)
        return self._vcycle(0, b, x)

    def as_preconditioner(self):
        return lambda r: self.cycle(r)

    def solve(self, b, x0=None, tol: float = 1e-10,
              max_cycles: int = 100) -> tuple[np.ndarray, SolveReport]:
        A = self.levels[0].A
        x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
        bn = np.linalg.norm(b)
        scale = bn if bn > 0 else 1.0
        res = [np.linalg.norm(b - A @ x) / scale]
        it = 0
        while res[-1] > tol and it < max_cycles:
            x = self._vcycle(0, b, x)
            res.append(np.linalg.norm(b - A @ x) / scale)
            it += 1
            if not np.isfinite(res[-1]):
                return x, SolveReport(it, res[-1], "amg", True, "nan", res)
        final = np.linalg.norm(b - A @ x) / scale
        return x, SolveReport(it, final, "amg", final > tol, "", res)


def amg_setup(A, theta: float = 0.25, max_levels: int = 25,
              max_coarse: int = 64) -> AmgHierarchy:
    """Build the multigrid hierarchy; raises AmgSetupError when unusable."""
    A = _as_csr(A).astype(np.float64)
    levels = [AmgLevel(A)]
    _check_diagonal(A, 0)
    while levels[-1].A.shape[0] >= max_coarse and len(levels) < max_levels:
        cur = levels[-1].A
        S = _strength(cur, theta)
        state = _coarsen(S)
        nc = int(np.sum(state == 1))
        if nc == 0 or nc == cur.shape[0]:
            break  # coarsening stalled; current level becomes the coarsest
        P = _direct_interpolation(cur, S, state)
        R = P.T.tocsr()
        Ac = (R @ cur @ P).tocsr()
        Ac.sort_indices()
        _check_diagonal(Ac, len(levels))
        levels[-1].P = P
        levels[-1].R = R
        levels.append(AmgLevel(Ac))
    coarse_lu = None
    Ad = levels[-1].A
    if Ad.shape[0] < max_coarse:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                coarse_lu = sla.lu_factor(Ad.toarray())
            except sla.LinAlgError as exc:
                raise AmgSetupError(f"coarse direct solve failed: {exc}") from exc
        pivots = np.abs(np.diag(coarse_lu[0]))
        if (not np.all(np.isfinite(coarse_lu[0]))
                or pivots.min() <= 1e-12 * max(pivots.max(), 1e-300)):
            raise AmgSetupError("coarse level is singular")
    return AmgHierarchy(levels, coarse_lu)


def bicgstab(A, b, x0=None, tol: float = 1e-10, max_iter: int = 1000,
             M=None, divergence_window: int | None = None
             ) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned BiCGSTAB.

    M is an approximate-inverse callable (r -> z).  With divergence_window
    set, the solve aborts with the divergence flag after that many
    consecutive residual increases.
    """
    A = _as_csr(A)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise LinearSolveError(f"rhs length {b.shape[0]} != matrix size {A.shape[0]}")
    if not np.all(np.isfinite(b)):
        raise LinearSolveError("rhs contains non-finite entries")
    method = "bicgstab" if M is None else "amg-bicgstab"
    bn = np.linalg.norm(b)
    if bn == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, method, False, "", [0.0])

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    res = [np.linalg.norm(r) / bn]
    if res[0] <= tol:
        return x, SolveReport(0, res[0], method, False, "", res)
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    up_streak = 0

    def finish(k, diverged, reason):
        true_res = np.linalg.norm(b - A @ x) / bn
        if diverged and np.isfinite(true_res) and true_res <= tol:
            diverged, reason = False, ""  # breakdown at convergence
        return x, SolveReport(k, true_res, method, diverged, reason, res)

    for k in range(1, max_iter + 1):
        rho_new = float(r_hat @ r)
        if abs(rho_new) < 1e-300:
            return finish(k, True, "breakdown (rho ~ 0)")
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        ph = M(p) if M is not None else p
        v = A @ ph
        denom = float(r_hat @ v)
        if not np.isfinite(denom) or abs(denom) < 1e-300:
            return finish(k, True, "breakdown (r_hat . v ~ 0)")
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) / bn <= tol:
            x = x + alpha * ph
            res.append(np.linalg.norm(b - A @ x) / bn)
            if res[-1] <= tol:
                return finish(k, False, "")
            r = b - A @ x
            continue
        if not np.all(np.isfinite(s)):
            return finish(k, True, "non-finite residual")
        sh = M(s) if M is not None else s
        t = A @ sh
        tt = float(t @ t)
        if not np.isfinite(tt) or tt == 0.0:
            return finish(k, True, "breakdown (t = 0)")
        omega = float(t @ s) / tt
        x = x + alpha * ph + omega * sh
        r = s - omega * t
        rn = np.linalg.norm(r) / bn
        res.append(rn)
        if not np.isfinite(rn):
            return finish(k, True, "non-finite residual")
        if rn <= tol:
            true_res = np.linalg.norm(b - A @ x) / bn
            if true_res <= tol:
                return finish(k, False, "")
            r = b - A @ x  # recursive residual drifted; refresh and continue
            rn = true_res
        if rn > res[-2]:
            up_streak += 1
            if divergence_window is not None and up_streak >= divergence_window:
                return finish(k, True,
                              f"residual grew {divergence_window} iterations in a row")
        else:
            up_streak = 0
        if abs(omega) < 1e-300:
            return finish(k, True, "breakdown (omega ~ 0)")
    return finish(max_iter, True, "max iterations")


def solve_auto(A, b, x0=None, tol: float = 1e-10, max_iter: int = 500,
               theta: float = 0.25, hierarchy: AmgHierarchy | None = None
               ) -> tuple[np.ndarray, SolveReport]:
    """AMG-preconditioned BiCGSTAB with automatic plain-BiCGSTAB fallback.

    A prebuilt hierarchy may be passed to amortize setup across repeated
    solves with the same matrix.
    """
    amg_history: list = []
    try:
        H = hierarchy if hierarchy is not None else amg_setup(A, theta=theta)
        x, rep = bicgstab(A, b, x0=x0, tol=tol, max_iter=max_iter,
                          M=H.as_preconditioner(), divergence_window=3)
        if not rep.diverged:
            return x, rep
        amg_history = rep.residuals
    except AmgSetupError:
        pass
    x, rep = bicgstab(A, b, x0=x0, tol=tol, max_iter=max_iter)
    if rep.diverged:
        raise LinearSolveError(
            "AMG-preconditioned and plain BiCGSTAB both failed "
            f"(amg residuals: {amg_history[-4:]}, "
            f"bicgstab residuals: {rep.residuals[-4:]}, reason: {rep.reason})")
    return x, rep
