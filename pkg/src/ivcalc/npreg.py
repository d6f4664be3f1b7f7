"""Local polynomial regression with derivatives, multiclass probability
curves and conditional density kernels.

All smoothers use the biweight kernel ``K(u) = 15/16 (1 - u^2)^2`` on
``|u| < 1``; ``bandwidth`` is the half-width of its support.

Univariate fits are computed from exact binned moments: the sorted sample is
cut into fine bins, each bin stores power sums of ``(x - centre)``, and the
kernel-weighted moments at a grid point are obtained by shifting those sums to
the grid point (binomial expansion) for bins fully inside the window and by
direct summation for the points of the two partially covered bins.  Because
the biweight is a polynomial on its support this is exact, not an
approximation, and the cost is O(grid x bins) instead of O(grid x N).
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator

from .errors import InsufficientDataError, IVWarning
from .rng import substream

KERNEL_CONST = 15.0 / 16.0
# variance of the unit biweight
KERNEL_VAR = 1.0 / 7.0

DEFAULT_TRIM = 0.025
DEFAULT_GRID_SIZE = 101


@dataclass
class RegressionFit:
    """Smoothed conditional mean and its first derivative on a grid.

    ``values``/``derivs`` are NaN where ``valid`` is False.  For
    multi-response fits they are (grid, responses) arrays.  ``density`` is
    the kernel density estimate of the regressor at each grid point.
    """

    grid: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    bandwidth: float
    degree: int
    valid: np.ndarray = None
    density: np.ndarray = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.isfinite(self.values) if self.values.ndim == 1 else np.all(np.isfinite(self.values), axis=1)
        if self.bandwidth <= 0 or self.degree < 1:
            raise ValueError("bandwidth must be > 0 and degree >= 1")


@dataclass
class ProbFit:
    """Class-probability curves q_j(z) (columns 0..n) and their derivatives."""

    grid: np.ndarray
    probs: np.ndarray
    dprobs: np.ndarray
    bandwidth: float
    degree: int
    valid: np.ndarray = None
    density: np.ndarray = None
    empty_classes: tuple = ()


@dataclass
class CondDensityKernel:
    """Estimated conditional density of X given Z on a tensor grid.

    ``K[i, j]`` approximates the density of X at ``x_grid[i]`` given
    ``Z = z_grid[j]``; ``widths`` are trapezoid weights on ``x_grid`` so that
    ``widths @ K[:, j] == 1`` for every valid column.
    """

    x_grid: np.ndarray
    z_grid: np.ndarray
    K: np.ndarray
    widths: np.ndarray
    valid: np.ndarray
    bandwidths: tuple = field(default=(None, None))


# --------------------------------------------------------------------------
# grids and bandwidth defaults


def default_grid(v: np.ndarray, size: int = DEFAULT_GRID_SIZE, trim: float = DEFAULT_TRIM) -> np.ndarray:
    """Equispaced grid over the observed range with ``trim`` of the range cut
    from each side."""
    lo, hi = float(np.min(v)), float(np.max(v))
    span = hi - lo
    return np.linspace(lo + trim * span, hi - trim * span, size)


def inner_mask(grid: np.ndarray, frac: float) -> np.ndarray:
    """Points in the central ``frac`` share of the grid's span."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = grid.min(), grid.max()
    pad = 0.5 * (1.0 - frac) * (hi - lo)
    return (grid >= lo + pad - 1e-12) & (grid <= hi - pad + 1e-12)


def candidate_bandwidths(v: np.ndarray, count: int = 10, lo: float = 0.05, hi: float = 0.5) -> np.ndarray:
    """Log-spaced candidates between ``lo`` and ``hi`` times the data range."""
    span = float(np.ptp(v))
    return np.geomspace(lo * span, hi * span, count)


def rule_of_thumb_bandwidth(v: np.ndarray, dim: int = 1) -> float:
    """Normal-reference bandwidth rescaled to the biweight support half-width."""
    v = np.asarray(v, dtype=float)
    sd = np.std(v)
    iqr = np.subtract(*np.percentile(v, [75, 25])) / 1.349
    scale = min(sd, iqr) if iqr > 0 else sd
    if scale <= 0:
        scale = max(np.ptp(v), 1.0)
    # 2.78 converts a Gaussian bandwidth to the equivalent biweight half-width
    return float(2.78 * 0.9 * scale * len(v) ** (-1.0 / (dim + 4)))


# --------------------------------------------------------------------------
# binned-moment engine


def _powers(a: np.ndarray, L: int) -> np.ndarray:
    out = np.empty(a.shape + (L + 1,))
    out[..., 0] = 1.0
    for k in range(1, L + 1):
        np.multiply(out[..., k - 1], a, out=out[..., k])
    return out


def _shift_matrix(L: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index/coefficient lists turning sums of (e^i * d^k) into sums of
    (e + d)^l via the binomial expansion."""
    ii, kk, rows, coef = [], [], [], []
    for l in range(L + 1):
        for i in range(l + 1):
            ii.append(i)
            kk.append(l - i)
            rows.append(l)
            coef.append(comb(l, i))
    B = np.zeros((L + 1, len(ii)))
    B[rows, np.arange(len(ii))] = coef
    return np.array(ii), np.array(kk), B


class _Binned:
    """Sorted sample with per-bin power sums, reusable across bandwidths."""

    def __init__(self, x, Y, w, nbins: int, degree: int):
        x = np.asarray(x, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        w = np.ones(len(x)) if w is None else np.asarray(w, dtype=float)
        order = np.argsort(x, kind="stable")
        self.x = x[order]
        self.Y = Y[order]
        self.w = w[order]
        self.degree = degree
        self.Lx = 2 * degree + 4
        self.Ly = degree + 4
        N = len(self.x)
        self.N = N
        lo = self.x[0] if N else 0.0
        hi = self.x[-1] if N else 1.0
        nbins = max(1, int(nbins))
        width = (hi - lo) / nbins if hi > lo else 1.0
        self.lo, self.width, self.nbins = lo, width, nbins
        edges = lo + width * np.arange(nbins)
        starts = np.searchsorted(self.x, edges, side="left")
        starts[0] = 0
        self.starts = np.append(starts, N)
        self.centers = lo + width * (np.arange(nbins) + 0.5)
        counts = np.diff(self.starts)
        bin_idx = np.repeat(np.arange(nbins), counts)
        self.order = order
        self._pe = _powers(self.x - self.centers[bin_idx], self.Lx)
        self._nonempty = np.flatnonzero(counts > 0)
        self._cols = None
        self._plans = {}
        self._accumulate()
        self._sx = _shift_matrix(self.Lx)
        self._sy = _shift_matrix(self.Ly)

    def _accumulate(self):
        r = self.Y.shape[1]
        if self._cols is None:
            pe = self._pe
            self._cols = np.concatenate(
                [pe, (pe[:, : self.Ly + 1, None] * self.Y[:, None, :]).reshape(self.N, -1)], axis=1)
        sums = np.zeros((self.nbins, self._cols.shape[1]))
        if len(self._nonempty):
            # bins are contiguous runs of the sorted sample
            sums[self._nonempty] = np.add.reduceat(self._cols * self.w[:, None], self.starts[self._nonempty], axis=0)
        self.M = sums[:, : self.Lx + 1]
        self.R = sums[:, self.Lx + 1 :].reshape(self.nbins, self.Ly + 1, r)
        xs = self.x[self.w > 0]
        self.xu = xs[np.concatenate([[True], np.diff(xs) > 0])] if len(xs) else xs

    def reweighted(self, w) -> "_Binned":
        """Copy with new observation weights (original sample order), reusing
        the sort and the per-point powers."""
        new = copy.copy(self)
        new.w = np.asarray(w, dtype=float)[self.order]
        new._accumulate()
        return new

    def _plan(self, grid: np.ndarray, h: float) -> dict:
        """Weight-independent index and power arrays for (grid, h)."""
        key = (grid.tobytes(), float(h))
        plan = self._plans.get(key)
        if plan is not None:
            return plan
        G = len(grid)
        lo_w, hi_w = grid - h, grid + h
        # full bins: [b_lo, b_hi)
        b_lo = np.ceil((lo_w - self.lo) / self.width).astype(np.int64)
        b_hi = np.floor((hi_w - self.lo) / self.width).astype(np.int64)
        b_lo = np.clip(b_lo, 0, self.nbins)
        b_hi = np.clip(b_hi, 0, self.nbins)
        # guard against rounding placing a bin edge outside the window
        b_lo += (self.lo + b_lo * self.width < lo_w) & (b_lo < self.nbins)
        b_hi -= (self.lo + b_hi * self.width > hi_w) & (b_hi > 0)
        has_full = b_hi > b_lo
        b_hi = np.where(has_full, b_hi, b_lo)

        i0 = np.searchsorted(self.x, lo_w, side="right")
        i1 = np.searchsorted(self.x, hi_w, side="left")
        s_lo = np.where(has_full, np.maximum(self.starts[b_lo], i0), i1)
        s_hi = np.where(has_full, np.minimum(self.starts[b_hi], i1), i1)
        s_lo = np.maximum(s_lo, i0)

        Lx = self.Lx
        plan = {"lo_w": lo_w, "hi_w": hi_w, "full": None, "raw": []}
        nfull = b_hi - b_lo
        wmax = int(nfull.max()) if G else 0
        if wmax > 0:
            off = np.arange(wmax)
            ok = off[None, :] < nfull[:, None]
            bidx = np.where(ok, b_lo[:, None] + off[None, :], 0)
            delta = np.where(ok, (self.centers[bidx] - grid[:, None]) / h, 0.0)
            plan["full"] = (bidx, _powers(delta, Lx) * ok[:, :, None], h ** -np.arange(Lx + 1))
        # raw points of partially covered bins: [i0, s_lo) and [s_hi, i1)
        for start, stop in ((i0, s_lo), (s_hi, i1)):
            lens = np.maximum(stop - start, 0)
            width = int(lens.max()) if G else 0
            if width == 0:
                continue
            off = np.arange(width)
            ok = off[None, :] < lens[:, None]
            idx = np.where(ok, start[:, None] + off[None, :], 0)
            u = np.where(ok, (self.x[idx] - grid[:, None]) / h, 0.0)
            plan["raw"].append((idx, ok, _powers(u, Lx)))
        self._plans[key] = plan
        return plan

    def moments(self, grid: np.ndarray, h: float):
        """Kernel moments S_k (k=0..2p) and T_k (k=0..p) at every grid point,
        in units of u = (x - g)/h, plus distinct-point counts."""
        grid = np.asarray(grid, dtype=float)
        plan = self._plan(grid, h)
        G = len(grid)
        Lx, Ly = self.Lx, self.Ly
        r = self.Y.shape[1]
        P = np.zeros((G, Lx + 1))
        Q = np.zeros((G, Ly + 1, r))
        if plan["full"] is not None:
            bidx, Dp, inv = plan["full"]
            wmax = bidx.shape[1]
            Mu = self.M[bidx] * inv
            G1 = np.matmul(Mu.transpose(0, 2, 1), Dp)
            ii, kk, B = self._sx
            P += G1[:, ii, kk] @ B.T
            Ru = (self.R[bidx] * inv[: Ly + 1, None]).reshape(G, wmax, (Ly + 1) * r)
            G2 = np.matmul(Ru.transpose(0, 2, 1), Dp[:, :, : Ly + 1]).reshape(G, Ly + 1, r, Ly + 1)
            ii, kk, B = self._sy
            Q += np.einsum("lj,gjr->glr", B, G2[:, ii, :, kk].transpose(1, 0, 2))
        for idx, ok, up in plan["raw"]:
            wup = up * np.where(ok, self.w[idx], 0.0)[:, :, None]
            P += wup.sum(axis=1)
            Q += np.matmul(wup[:, :, : Ly + 1].transpose(0, 2, 1), self.Y[idx])

        p = self.degree
        S = P[:, : 2 * p + 1] - 2 * P[:, 2 : 2 * p + 3] + P[:, 4 : 2 * p + 5]
        T = Q[:, : p + 1] - 2 * Q[:, 2 : p + 3] + Q[:, 4 : p + 5]
        distinct = (np.searchsorted(self.xu, plan["hi_w"], side="left")
                    - np.searchsorted(self.xu, plan["lo_w"], side="right"))
        return S, T, distinct

    def _shift_operators(self, grid: np.ndarray, h: float):
        """Dense maps from per-bin moments to full-bin window moments:
        (nbins*(Lx+1), G*(Lx+1)) and (nbins*(Ly+1), G*(Ly+1))."""
        plan = self._plan(grid, h)
        if "ops" in plan:
            return plan["ops"]
        G = len(grid)
        ops = []
        for L, (ii, kk, B) in ((self.Lx, self._sx), (self.Ly, self._sy)):
            T = np.zeros((self.nbins, L + 1, G, L + 1))
            if plan["full"] is not None:
                bidx, Dp, inv = plan["full"]
                E = np.zeros((len(ii), L + 1))
                E[np.arange(len(ii)), ii] = inv[ii]
                coef = np.einsum("gwc,ck,lc->gwkl", Dp[:, :, kk], E, B, optimize=True)
                ok = Dp[:, :, 0] > 0
                gi = np.broadcast_to(np.arange(G)[:, None], ok.shape)
                T[bidx[ok], :, gi[ok], :] = coef[ok]
            ops.append(T.reshape(self.nbins * (L + 1), G * (L + 1)))
        plan["ops"] = tuple(ops)
        return plan["ops"]

    def fit_many(self, grid: np.ndarray, h, W: np.ndarray):
        """Fits for many weight vectors at once; ``W`` is (B, N) in original
        sample order.  Returns values and derivs of shape (B, G, r) and valid
        (B, G), or a list of such triples when ``h`` is a sequence.  Agrees
        with ``reweighted(W[b]).fit(grid, h)``."""
        grid = np.asarray(grid, dtype=float)
        W = np.asarray(W, dtype=float)[:, self.order]
        Bn = len(W)
        if self._cols is None:
            self._accumulate()
        Mb = np.zeros((Bn, self.nbins, self._cols.shape[1]))
        for b in self._nonempty:
            s0, s1 = self.starts[b], self.starts[b + 1]
            Mb[:, b] = W[:, s0:s1] @ self._cols[s0:s1]
        # distinct positive-weight x values, as cumulative counts over unique x
        first = np.concatenate([[True], np.diff(self.x) > 0])
        gstart = np.flatnonzero(first)
        upos = W > 0 if len(gstart) == self.N else np.maximum.reduceat(W > 0, gstart, axis=1)
        cum = np.zeros((Bn, len(gstart) + 1), dtype=np.int32)
        np.cumsum(upos, axis=1, dtype=np.int32, out=cum[:, 1:])
        ux = self.x[gstart]
        hs = np.atleast_1d(np.asarray(h, dtype=float))
        out = [self._fit_batch(grid, float(hh), W, Mb, cum, ux) for hh in hs]
        return out if np.ndim(h) else out[0]

    def _fit_batch(self, grid, h, W, Mb, cum, ux):
        Bn, G = len(W), len(grid)
        Lx, Ly, p = self.Lx, self.Ly, self.degree
        r = self.Y.shape[1]
        nx = Lx + 1
        plan = self._plan(grid, h)
        Tx, Ty = self._shift_operators(grid, h)
        P = (Mb[:, :, :nx].reshape(Bn, -1) @ Tx).reshape(Bn, G, nx)
        Rb = Mb[:, :, nx:].reshape(Bn, self.nbins, Ly + 1, r).transpose(0, 3, 1, 2).reshape(Bn * r, -1)
        Q = (Rb @ Ty).reshape(Bn, r, G, Ly + 1).transpose(0, 2, 3, 1)
        if "raw_y" not in plan:
            plan["raw_y"] = [(up[:, :, : Ly + 1, None] * self.Y[idx][:, :, None, :]).reshape(G, idx.shape[1], -1)
                             for idx, ok, up in plan["raw"]]
        for (idx, ok, up), uy in zip(plan["raw"], plan["raw_y"]):
            Wg = (W[:, idx] * ok).transpose(1, 0, 2)
            P += np.matmul(Wg, up).transpose(1, 0, 2)
            Q += np.matmul(Wg, uy).reshape(G, Bn, Ly + 1, r).transpose(1, 0, 2, 3)
        S = P[..., : 2 * p + 1] - 2 * P[..., 2 : 2 * p + 3] + P[..., 4 : 2 * p + 5]
        T = Q[:, :, : p + 1] - 2 * Q[:, :, 2 : p + 3] + Q[:, :, 4 : p + 5]
        hi = np.searchsorted(ux, plan["hi_w"], side="left")
        lo = np.searchsorted(ux, plan["lo_w"], side="right")
        distinct = cum[:, hi] - cum[:, lo]
        idx = np.arange(p + 1)
        H = S[..., idx[:, None] + idx[None, :]]
        valid = (distinct >= p + 1) & (S[..., 0] > 0)
        coef = np.full((Bn, G, p + 1, r), np.nan)
        if np.any(valid):
            Hs = H[valid]
            with np.errstate(all="ignore"):
                cond = np.linalg.cond(Hs)
            good = np.isfinite(cond) & (cond < 1e12)
            sel = tuple(a[good] for a in np.nonzero(valid))
            if len(sel[0]):
                coef[sel] = np.linalg.solve(H[sel], T[sel])
            valid = np.zeros_like(valid)
            valid[sel] = True
        return coef[:, :, 0, :], coef[:, :, 1, :] / h, valid

    def fit(self, grid: np.ndarray, h: float):
        """Local polynomial coefficients at ``grid``.

        Returns (values, derivs, valid, density) with values/derivs of shape
        (G, r).
        """
        p = self.degree
        S, T, distinct = self.moments(grid, h)
        G = len(grid)
        idx = np.arange(p + 1)
        H = S[:, idx[:, None] + idx[None, :]]
        valid = distinct >= p + 1
        sane = valid & (S[:, 0] > 0)
        coef = np.full((G, p + 1, T.shape[2]), np.nan)
        if np.any(sane):
            Hs = H[sane]
            cond = np.linalg.cond(Hs)
            good = np.isfinite(cond) & (cond < 1e12)
            sel = np.flatnonzero(sane)[good]
            if len(sel):
                coef[sel] = np.linalg.solve(H[sel], T[sel])
            valid = np.zeros(G, dtype=bool)
            valid[sel] = True
        else:
            valid = np.zeros(G, dtype=bool)
        values = coef[:, 0, :]
        derivs = coef[:, 1, :] / h
        total = self.w.sum()
        density = KERNEL_CONST * S[:, 0] / (h * total) if total > 0 else np.zeros(G)
        return values, derivs, valid, density


def _nbins_for(x: np.ndarray, h_min: float) -> int:
    span = float(np.ptp(x)) if len(x) else 0.0
    if span <= 0 or h_min <= 0:
        return 1
    # bins narrow relative to h and light enough that partial bins are cheap
    return int(np.clip(max(np.ceil(8.0 * span / h_min), 2.0 * np.sqrt(len(x))), 16, 2048))


def _warn_masked(valid: np.ndarray, what: str):
    k = int((~valid).sum())
    if k:
        warnings.warn(f"{what}: {k} of {len(valid)} grid points masked (insufficient local data)", IVWarning, stacklevel=3)


def local_poly(x, Y, degree: int, bandwidth: float, grid, weights=None):
    """Multi-response local polynomial fit; returns (values, derivs, valid,
    density) with (G, r) values/derivs."""
    b = _Binned(x, Y, weights, _nbins_for(np.asarray(x), bandwidth), degree)
    return b.fit(np.asarray(grid, dtype=float), float(bandwidth))


def prepare_local_poly(x, Y, degree: int, min_bandwidth: float, weights=None) -> _Binned:
    """Sorted, binned sample for repeated fits at bandwidths >= ``min_bandwidth``.

    The returned engine has ``fit(grid, h)`` and ``reweighted(w)``; the latter
    serves resampling loops that keep the sample fixed and vary the weights.
    """
    return _Binned(x, Y, weights, _nbins_for(np.asarray(x, dtype=float), min_bandwidth), degree)


def fit_local_poly(x, y, degree: int = 2, bandwidth: float | None = None, grid=None, weights=None) -> RegressionFit:
    """Local polynomial regression of ``y`` on scalar ``x``.

    ``values`` is the local intercept and ``derivs`` the local linear
    coefficient at each grid point.  Grid points with fewer than
    ``degree + 1`` distinct x values inside the kernel window are masked
    (NaN) and a warning is emitted.  ``bandwidth=None`` selects it by
    cross-validation.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if grid is None:
        grid = default_grid(x)
    grid = np.asarray(grid, dtype=float)
    if bandwidth is None:
        bandwidth = select_bandwidth_cv(x, y, degree)
    values, derivs, valid, density = local_poly(x, y, degree, bandwidth, grid, weights)
    _warn_masked(valid, "fit_local_poly")
    if y.ndim == 1:
        values, derivs = values[:, 0], derivs[:, 0]
    return RegressionFit(grid, values, derivs, float(bandwidth), degree, valid, density)


CV_RULES = ("min", "1se")


@dataclass
class CVScores:
    """Cross-validation totals per candidate (rows) and response column.

    ``scores`` sums squared held-out errors, ``sumsq`` sums their squares,
    ``sumsq_total`` sums the squares of per-point losses totalled over
    columns and ``count`` is the number of scored held-out points.
    Ineligible candidates score ``inf``.
    """

    candidates: np.ndarray
    scores: np.ndarray
    sumsq: np.ndarray
    sumsq_total: np.ndarray
    count: int


def cv_scores(x, y, degree: int = 2, candidate_grid=None, folds: int = 5, seed: int = 0,
              cv_grid_size: int = DEFAULT_GRID_SIZE) -> CVScores:
    """K-fold prediction error for each candidate bandwidth and each column
    of ``y``.

    Each training fit is evaluated on a fine grid over the trimmed training
    range and carried to the held-out points by cubic Hermite interpolation
    of (value, derivative); held-out points outside that grid are not scored.
    A candidate that leaves any grid point without enough local data is
    ineligible.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Y = y[:, None] if y.ndim == 1 else y
    cands = candidate_bandwidths(x) if candidate_grid is None else np.asarray(candidate_grid, dtype=float)
    if len(cands) == 0:
        raise ValueError("need at least one candidate bandwidth")
    if len(x) < 20:
        raise InsufficientDataError("bandwidth cross-validation needs at least 20 observations")
    fold = substream(seed, 0).permutation(len(x)) % folds
    scores = np.zeros((len(cands), Y.shape[1]))
    sumsq = np.zeros_like(scores)
    sumsq_total = np.zeros(len(cands))
    count = 0
    ok = np.ones(len(cands), dtype=bool)
    hmin = float(np.min(cands))
    for f in range(folds):
        tr, te = fold != f, fold == f
        b = _Binned(x[tr], Y[tr], None, _nbins_for(x[tr], hmin), degree)
        g = default_grid(x[tr], cv_grid_size)
        inside = (x[te] >= g[0]) & (x[te] <= g[-1])
        xt, yt = x[te][inside], Y[te][inside]
        count += len(xt)
        for c, h in enumerate(cands):
            if not ok[c]:
                continue
            vals, ders, valid, _ = b.fit(g, float(h))
            if not np.all(valid):
                ok[c] = False
                continue
            loss = (CubicHermiteSpline(g, vals, ders, axis=0)(xt) - yt) ** 2
            scores[c] += loss.sum(axis=0)
            sumsq[c] += (loss**2).sum(axis=0)
            sumsq_total[c] += float((loss.sum(axis=1) ** 2).sum())
    scores[~ok] = np.inf
    return CVScores(cands, scores, sumsq, sumsq_total, count)


def _pick(cands: np.ndarray, score: np.ndarray, sumsq: np.ndarray, count: int, rule: str) -> float:
    if not np.any(np.isfinite(score)):
        raise InsufficientDataError("no candidate bandwidth leaves enough data at every grid point")
    c = int(np.argmin(score))
    best = score[c]
    slack = best * 1e-12 + 1e-300
    if rule == "1se" and count > 1:
        mean = best / count
        # standard error of the best candidate's mean held-out loss
        slack += count * np.sqrt(max(sumsq[c] / count - mean**2, 0.0) / count)
    tie = np.flatnonzero(score <= best + slack)
    return float(cands[tie].max())


def select_bandwidth_cv(x, y, degree: int = 2, candidate_grid=None, folds: int = 5, seed: int = 0,
                        cv_grid_size: int = DEFAULT_GRID_SIZE, return_scores: bool = False, per_column: bool = False,
                        rule: str = "min"):
    """K-fold cross-validated bandwidth (see :func:`cv_scores`).

    ``rule="min"`` takes the minimiser, with ties going to the larger
    bandwidth.  ``rule="1se"`` takes the largest candidate whose error is
    within one standard error of the minimum, which suits fits whose
    derivative is the target.  Multi-column ``y`` is scored by the summed
    error over columns, or with ``per_column=True`` one bandwidth per column
    is returned as an array.
    """
    if rule not in CV_RULES:
        raise ValueError(f"rule must be one of {CV_RULES}")
    cands = None if candidate_grid is None else np.asarray(candidate_grid, dtype=float)
    if cands is not None and len(cands) == 1:
        h = float(cands[0])
        if per_column:
            r = 1 if np.ndim(y) == 1 else np.shape(y)[1]
            h = np.full(r, h)
        return (h, np.array([np.nan])) if return_scores else h
    cv = cv_scores(x, y, degree, cands, folds, seed, cv_grid_size)
    if per_column:
        h = np.array([_pick(cv.candidates, cv.scores[:, j], cv.sumsq[:, j], cv.count, rule)
                      for j in range(cv.scores.shape[1])])
        return (h, cv.scores) if return_scores else h
    total = cv.scores.sum(axis=1)
    h = _pick(cv.candidates, total, cv.sumsq_total, cv.count, rule)
    return (h, total) if return_scores else h


def _simplex(raw: np.ndarray, draw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clip to [0, 1], renormalise rows, and carry derivatives through both
    steps (the derivative of a clipped coordinate is zero)."""
    c = np.clip(raw, 0.0, 1.0)
    dc = np.where((raw > 0.0) & (raw < 1.0), draw, 0.0)
    s = c.sum(axis=1, keepdims=True)
    ds = dc.sum(axis=1, keepdims=True)
    q = c / s
    dq = (dc * s - c * ds) / s**2
    return q, dq


def fit_multiclass_probs(z, x, bandwidth: float | None = None, grid=None, n: int | None = None,
                         degree: int = 2, weights=None) -> ProbFit:
    """Smooth class-probability curves q_j(z) = P(X = j | Z = z).

    Indicators I(X = j) are regressed on z by local polynomials sharing one
    bandwidth, then projected onto the simplex (clip, renormalise) with the
    derivatives transformed by the same map.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(x)
    k = (int(x.max()) if n is None else int(n)) + 1
    ind = (x[:, None] == np.arange(k)[None, :]).astype(float)
    if grid is None:
        grid = default_grid(z)
    grid = np.asarray(grid, dtype=float)
    if bandwidth is None:
        bandwidth = select_bandwidth_cv(z, ind, degree)
    raw, draw, valid, density = local_poly(z, ind, degree, bandwidth, grid, weights)
    _warn_masked(valid, "fit_multiclass_probs")
    present = ind.sum(axis=0) if weights is None else (ind * np.asarray(weights)[:, None]).sum(axis=0)
    empty = tuple(int(j) for j in np.flatnonzero(present == 0))
    if empty:
        warnings.warn(f"classes {empty} never observed; their curves are fixed at 0", IVWarning, stacklevel=2)
    q = np.full_like(raw, np.nan)
    dq = np.full_like(raw, np.nan)
    if np.any(valid):
        q[valid], dq[valid] = _simplex(raw[valid], draw[valid])
    return ProbFit(grid, q, dq, float(bandwidth), degree, valid, density, empty)


# --------------------------------------------------------------------------
# multivariate local linear


def local_linear_nd(Z, Y, bandwidths, grid, weights=None):
    """Product-biweight local linear fit in m regressors.

    Returns (values (G, r), grads (G, m, r), valid (G,)).
    """
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    h = np.broadcast_to(np.asarray(bandwidths, dtype=float), (Z.shape[1],))
    w_all = np.ones(len(Z)) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(Z[:, 0], kind="stable")
    Zs, Ys, ws = Z[order], Y[order], w_all[order]
    m, r = Z.shape[1], Y.shape[1]
    G = len(grid)
    values = np.full((G, r), np.nan)
    grads = np.full((G, m, r), np.nan)
    valid = np.zeros(G, dtype=bool)
    for gi, g in enumerate(grid):
        a = np.searchsorted(Zs[:, 0], g[0] - h[0], side="right")
        b = np.searchsorted(Zs[:, 0], g[0] + h[0], side="left")
        U = (Zs[a:b] - g) / h
        inside = np.all(np.abs(U) < 1.0, axis=1)
        U = U[inside]
        wk = ws[a:b][inside] * np.prod((1.0 - U**2) ** 2, axis=1)
        if np.count_nonzero(wk > 0) < m + 1:
            continue
        Xd = np.hstack([np.ones((len(U), 1)), U])
        XtW = Xd.T * wk
        H = XtW @ Xd
        if np.linalg.cond(H) > 1e12:
            continue
        beta = np.linalg.solve(H, XtW @ Ys[a:b][inside])
        values[gi] = beta[0]
        grads[gi] = beta[1:] / h[:, None]
        valid[gi] = True
    return values, grads, valid


def select_bandwidths_nd(Z, y, candidate_factors=None, folds: int = 5, seed: int = 0, grid_size: int = 11,
                         rule: str = "1se") -> np.ndarray:
    """Cross-validated bandwidths for :func:`local_linear_nd`.

    Candidates are a common fraction of each coordinate's range (10
    log-spaced fractions from 0.05 to 0.5 by default).  Each training fit is
    evaluated on a coarse tensor grid and linearly interpolated to held-out
    points inside it; ``y`` columns are scored jointly.
    """
    if rule not in CV_RULES:
        raise ValueError(f"rule must be one of {CV_RULES}")
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    N, m = Z.shape
    if N < 20:
        raise InsufficientDataError("bandwidth cross-validation needs at least 20 observations")
    fr = np.geomspace(0.05, 0.5, 10) if candidate_factors is None else np.asarray(candidate_factors, dtype=float)
    span = np.ptp(Z, axis=0)
    fold = substream(seed, 0).permutation(N) % folds
    scores = np.zeros(len(fr))
    sq = np.zeros(len(fr))
    ok = np.ones(len(fr), dtype=bool)
    count = 0
    for f in range(folds):
        tr, te = fold != f, fold == f
        axes = [default_grid(Z[tr, i], grid_size) for i in range(m)]
        grid = np.column_stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")])
        inside = np.all([(Z[te, i] >= axes[i][0]) & (Z[te, i] <= axes[i][-1]) for i in range(m)], axis=0)
        zt, yt = Z[te][inside], Y[te][inside]
        count += len(zt)
        for c, k in enumerate(fr):
            if not ok[c]:
                continue
            vals, _, valid = local_linear_nd(Z[tr], Y[tr], k * span, grid)
            if not np.all(valid):
                ok[c] = False
                continue
            interp = RegularGridInterpolator(axes, vals.reshape([grid_size] * m + [Y.shape[1]]))
            loss = ((interp(zt) - yt) ** 2).sum(axis=1)
            scores[c] += loss.sum()
            sq[c] += (loss**2).sum()
    scores[~ok] = np.inf
    return _pick(fr, scores, sq, count, rule) * span


def tensor_grid(Z: np.ndarray, size: int = 21, trim: float = DEFAULT_TRIM) -> np.ndarray:
    axes = [default_grid(Z[:, i], size, trim) for i in range(Z.shape[1])]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in mesh])


# --------------------------------------------------------------------------
# conditional density


def trapezoid_widths(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    w = np.zeros(len(grid))
    d = np.diff(grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def _biweight(u: np.ndarray) -> np.ndarray:
    return np.where(np.abs(u) < 1.0, KERNEL_CONST * (1.0 - u * u) ** 2, 0.0)


def fit_cond_density(x, z, x_grid=None, z_grid=None, bandwidths=None, chunk: int = 10000,
                     min_rel_density: float = 1e-3) -> CondDensityKernel:
    """Product-kernel estimate of the density of X given Z.

    Columns whose kernel estimate of the marginal Z density falls below
    ``min_rel_density`` of its maximum are masked.  Valid columns are scaled
    to integrate to one under trapezoid quadrature on ``x_grid``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if len(x) < 100:
        raise InsufficientDataError("conditional density estimation needs at least 100 observations")
    x_grid = default_grid(x) if x_grid is None else np.asarray(x_grid, dtype=float)
    z_grid = default_grid(z) if z_grid is None else np.asarray(z_grid, dtype=float)
    if bandwidths is None:
        hx, hz = rule_of_thumb_bandwidth(x, dim=2), rule_of_thumb_bandwidth(z, dim=2)
    else:
        hx, hz = (float(b) for b in bandwidths)
    K = np.zeros((len(x_grid), len(z_grid)))
    marg = np.zeros(len(z_grid))
    for s in range(0, len(x), chunk):
        xs, zs = x[s:s + chunk], z[s:s + chunk]
        kx = _biweight((x_grid[:, None] - xs[None, :]) / hx) / hx
        kz = _biweight((zs[:, None] - z_grid[None, :]) / hz)
        K += kx @ kz
        marg += kz.sum(axis=0)
    widths = trapezoid_widths(x_grid)
    mass = widths @ K
    valid = (marg > min_rel_density * marg.max()) & (mass > 0)
    K = np.where(valid[None, :], K / np.where(mass > 0, mass, 1.0)[None, :], 0.0)
    return CondDensityKernel(x_grid, z_grid, K, widths, valid, (hx, hz))
