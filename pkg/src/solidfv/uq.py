"""Non-intrusive uncertainty propagation.

Hermite polynomial chaos fitted by least-squares collocation on Smolyak
sparse grids built from one-dimensional Gauss quadrature rules, with
Sobol variance decomposition and response-surface evaluation on top of
the fitted model.  All random inputs are Gaussian; physical values map
to standardized coordinates through their mean and standard deviation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtri


class UqError(Exception):
    pass


@dataclass
class InputDistribution:
    """Independent Gaussian marginals, one per stochastic dimension."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.sd = np.atleast_1d(np.asarray(self.sd, dtype=float))
        if self.mean.shape != self.sd.shape or self.mean.ndim != 1:
            raise UqError("means and deviations must be matching 1-D arrays")
        if np.any(self.sd <= 0.0):
            raise UqError("standard deviations must be positive")

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass
class SparseGrid:
    """Collocation nodes in standardized coordinates plus quadrature
    weights against the standard normal density."""

    level: int
    nodes: np.ndarray    # (M, d)
    weights: np.ndarray  # (M,)

    @property
    def count(self) -> int:
        return len(self.weights)


@dataclass
class PceModel:
    """Truncated Hermite chaos: output = sum_i coeffs[i] * prod_k
    He_{indices[i][k]}(xi_k)."""

    order: int
    indices: list
    coeffs: np.ndarray
    dist: InputDistribution | None = None

    def __post_init__(self):
        d = len(self.indices[0])
        if len(self.indices) != comb(self.order + d, d):
            raise UqError("index set size does not match the total order")
        if len(self.coeffs) != len(self.indices):
            raise UqError("coefficient count does not match the basis")

    @property
    def dim(self) -> int:
        return len(self.indices[0])


def hermite_eval(order: int, x):
    """Probabilists' Hermite polynomial by the three-term recurrence."""
    if order < 0:
        raise UqError("polynomial order must be non-negative")
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if order == 0:
        return prev
    cur = x.copy()
    for k in range(1, order):
        prev, cur = cur, x * cur - k * prev
    return cur


def hermite_norm_sq(order: int) -> float:
    return float(factorial(order))


def multi_indices(d: int, order: int) -> list:
    """All exponent tuples with total degree <= order, graded
    lexicographic: ascending total degree, plain tuple order within."""
    out = [a for a in itertools.product(range(order + 1), repeat=d)
           if sum(a) <= order]
    out.sort(key=lambda a: (sum(a), a))
    return out


def _gauss_1d(n: int):
    x, w = hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


def smolyak_nodes(d: int, level: int) -> SparseGrid:
    """Smolyak combination of one-dimensional Gauss rules.

    Level l is exact for all monomials of total degree <= 2l-1 against
    the d-variate standard normal.  Coinciding nodes from different
    tensor terms are merged to 12 decimals with their weights summed.
    """
    if d < 1 or level < 1:
        raise UqError("need d >= 1 and level >= 1")
    q = level + d - 1
    acc: dict = {}
    for i in itertools.product(range(1, level + 1), repeat=d):
        s = sum(i)
        if not (q - d + 1 <= s <= q):
            continue
        coeff = (-1.0) ** (q - s) * comb(d - 1, q - s)
        rules = [_gauss_1d(k) for k in i]
        for combo in itertools.product(*(range(k) for k in i)):
            pt = tuple(round(rules[k][0][j], 12) for k, j in enumerate(combo))
            wt = coeff * np.prod([rules[k][1][j]
                                  for k, j in enumerate(combo)])
            acc[pt] = acc.get(pt, 0.0) + wt
    pts = sorted(acc)
    nodes = np.array(pts, dtype=float).reshape(len(pts), d)
    weights = np.array([acc[p] for p in pts])
    return SparseGrid(level, nodes, weights)


def standardize(x, dist: InputDistribution):
    x = np.asarray(x, dtype=float)
    return (x - dist.mean) / dist.sd


def unstandardize(xi, dist: InputDistribution):
    xi = np.asarray(xi, dtype=float)
    return dist.mean + dist.sd * xi


def basis_matrix(indices, xi: np.ndarray) -> np.ndarray:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    d = xi.shape[1]
    top = max(max(a) for a in indices)
    per_dim = [[hermite_eval(j, xi[:, k]) for j in range(top + 1)]
               for k in range(d)]
    cols = []
    for a in indices:
        col = np.ones(len(xi))
        for k, j in enumerate(a):
            if j:
                col = col * per_dim[k][j]
        cols.append(col)
    return np.column_stack(cols)


def fit_pce(xi: np.ndarray, outputs: np.ndarray, order: int,
            dist: InputDistribution | None = None) -> PceModel:
    """Least-squares collocation fit of the chaos coefficients through
    an orthogonal factorization of the Vandermonde system."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    w = np.asarray(outputs, dtype=float)
    if len(w) != len(xi):
        raise UqError("one output value per sample is required")
    idx = multi_indices(xi.shape[1], order)
    if len(xi) <= len(idx):
        raise UqError(
            f"{len(xi)} samples cannot overdetermine {len(idx)} basis terms")
    psi = basis_matrix(idx, xi)
    coeffs, _, rank, _ = np.linalg.lstsq(psi, w, rcond=None)
    if rank < len(idx):
        raise UqError("collocation matrix is rank deficient")
    return PceModel(order, idx, coeffs, dist)


def evaluate_pce(model: PceModel, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    psi = basis_matrix(model.indices, np.atleast_2d(xi))
    vals = psi @ model.coeffs
    return float(vals[0]) if single else vals


def pce_moments(model: PceModel):
    """Mean and variance implied by the chaos coefficients."""
    mean = float(model.coeffs[0])
    var = 0.0
    for a, c in zip(model.indices, model.coeffs):
        if sum(a):
            var += c * c * float(np.prod([factorial(j) for j in a]))
    return mean, var


def sobol_indices(model: PceModel):
    """Variance decomposition over the multi-index set.

    Returns (first_order, total, defined).  A constant model carries no
    variance to partition and is reported as undefined.
    """
    d = model.dim
    var = 0.0
    contrib = []
    for a, c in zip(model.indices, model.coeffs):
        if sum(a) == 0:
            contrib.append(0.0)
            continue
        v = c * c * float(np.prod([factorial(j) for j in a]))
        contrib.append(v)
        var += v
    first = np.full(d, np.nan)
    total = np.full(d, np.nan)
    if var <= 0.0:
        return first, total, False
    for k in range(d):
        f = t = 0.0
        for a, v in zip(model.indices, contrib):
            if a[k] == 0:
                continue
            t += v
            if sum(a) == a[k]:
                f += v
        first[k] = f / var
        total[k] = t / var
    return first, total, True


def latin_hypercube(n: int, d: int, seed: int) -> np.ndarray:
    """Seeded Latin-hypercube sample of the standard normal: stratified
    uniforms per dimension pushed through the normal quantile."""
    if n < 1 or d < 1:
        raise UqError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    out = np.empty((n, d))
    for k in range(d):
        strata = (rng.permutation(n) + rng.random(n)) / n
        out[:, k] = ndtri(strata)
    return out


def response_surface(model: PceModel, dims: tuple, resolution: int = 41,
                     span: float = 3.0, fixed: dict | None = None):
    """Output over a regular grid of two physical inputs.

    The two selected dimensions sweep mean +- span standard deviations;
    every other dimension sits at its mean unless a physical value is
    supplied in fixed.  Returns (x values, y values, grid) with the
    first axis of the grid following x.
    """
    if model.dist is None:
        raise UqError("response surface needs the input distribution")
    i, j = dims
    dist = model.dist
    xv = dist.mean[i] + dist.sd[i] * np.linspace(-span, span, resolution)
    yv = dist.mean[j] + dist.sd[j] * np.linspace(-span, span, resolution)
    base = np.zeros(dist.dim)
    for k, val in (fixed or {}).items():
        base[k] = (val - dist.mean[k]) / dist.sd[k]
    pts = np.tile(base, (resolution * resolution, 1))
    xi_x = (xv - dist.mean[i]) / dist.sd[i]
    xi_y = (yv - dist.mean[j]) / dist.sd[j]
    xx, yy = np.meshgrid(xi_x, xi_y, indexing="ij")
    pts[:, i] = xx.ravel()
    pts[:, j] = yy.ravel()
    grid = evaluate_pce(model, pts).reshape(resolution, resolution)
    return xv, yv, grid


def save_pce(model: PceModel, path) -> None:
    """Flat text table: one header, one distribution block, then one
    line per basis term holding the multi-index and its coefficient."""
    lines = [f"pce order={model.order} dim={model.dim} "
             f"terms={len(model.indices)}"]
    if model.dist is not None:
        mu = " ".join(f"{v:.17g}" for v in model.dist.mean)
        sd = " ".join(f"{v:.17g}" for v in model.dist.sd)
        lines.append(f"mean {mu}")
        lines.append(f"sd {sd}")
    for a, c in zip(model.indices, model.coeffs):
        lines.append(" ".join(str(j) for j in a) + f" {c:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pce(path) -> PceModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if not head or head[0] != "pce":
        raise UqError("not a chaos model file")
    meta = dict(kv.split("=") for kv in head[1:])
    order, d = int(meta["order"]), int(meta["dim"])
    pos = 1
    dist = None
    if pos < len(lines) and lines[pos].startswith("mean "):
        mean = np.array([float(v) for v in lines[pos].split()[1:]])
        sd = np.array([float(v) for v in lines[pos + 1].split()[1:]])
        dist = InputDistribution(mean, sd)
        pos += 2
    indices, coeffs = [], []
    for ln in lines[pos:]:
        parts = ln.split()
        indices.append(tuple(int(v) for v in parts[:d]))
        coeffs.append(float(parts[d]))
    model = PceModel(order, indices, np.array(coeffs), dist)
    if len(indices) != int(meta["terms"]):
        raise UqError("term count does not match the header")
    return model
