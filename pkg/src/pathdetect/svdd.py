"""Support Vector Domain Description with an RBF kernel.

The model encloses the training rows in a minimal kernel-space sphere (center a,
radius R). Training solves the dual

    maximize   sum_i a_i K(x_i, x_i) - sum_ij a_i a_j K(x_i, x_j)
    subject to sum_i a_i = 1,   0 <= a_i <= 1/(n * nu)

with pairwise coordinate ascent: pick the most KKT-violating receiver, pair it
with the donor of largest second-order gain, solve the 1-D subproblem in closed
form, and clip to the box (ties broken by lowest index). Since
1/(n*nu) * n = 1/nu >= 1, the constraints are feasible for every nu in (0, 1].

Feature columns are z-standardized before kernel evaluation (zero-variance
columns are dropped with a warning); the transform is stored in the model.
Scores are negated squared kernel distances to the center, so HIGHER = more
normal, and membership holds iff score(z) >= -R^2.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import AllIdentical

_SV_EPS = 1e-12  # alphas at or below this are treated as exactly zero

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _njit = None


def rbf_kernel(x_i, x_j, s: float) -> float:
    """exp(-||x_i - x_j||^2 / s^2); symmetric, K(x, x) = 1, range (0, 1]."""
    if s <= 0:
        raise ValueError(f"kernel width must be positive, got {s}")
    a = np.asarray(x_i, dtype=np.float64)
    b = np.asarray(x_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return float(np.exp(-d2 / (s * s)))


def _rbf_matrix(A: np.ndarray, B: np.ndarray, s: float) -> np.ndarray:
    if A.shape[1] == 0:
        return np.ones((A.shape[0], B.shape[0]))
    d2 = cdist(A, B, "sqeuclidean")
    return np.exp(-d2 / (s * s))


def median_heuristic(X, sample_cap: int = 256, seed: int = 0,
                     fallback: float | None = 1.0) -> float:
    """Median pairwise Euclidean distance over up to sample_cap sampled rows.

    Degenerate data (every sampled distance zero) returns `fallback` with a
    warning, or raises AllIdentical when fallback is None.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("median heuristic needs a 2-D matrix with >= 2 rows")
    if X.shape[0] > sample_cap:
        rng = np.random.default_rng([int(seed), 3])
        idx = np.sort(rng.choice(X.shape[0], size=sample_cap, replace=False))
        X = X[idx]
    if X.shape[1] == 0:
        s = 0.0
    else:
        s = float(np.median(pdist(X)))
    if s > 0.0:
        return s
    if fallback is None:
        raise AllIdentical("all sampled rows are identical")
    warnings.warn("all sampled pairwise distances are zero; "
                  f"falling back to kernel width {fallback}")
    return float(fallback)


def dual_objective(K: np.ndarray, alpha: np.ndarray) -> float:
    """sum_i a_i K_ii - a^T K a (the maximized dual value)."""
    K = np.asarray(K, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(alpha @ np.diag(K) - alpha @ K @ alpha)


def _pair_loop_python(K, diag, alpha, h, C, tol, max_iter):
    """Pure-numpy pair loop; same selection rule as the jitted version."""
    n = alpha.shape[0]
    hi = np.empty(n)
    hj = np.empty(n)
    for _ in range(max_iter):
        np.copyto(hi, h)
        hi[alpha >= C - _SV_EPS] = np.inf
        np.copyto(hj, h)
        hj[alpha <= _SV_EPS] = -np.inf
        i = int(hi.argmin())
        gap = hj.max() - hi[i]  # -inf when a side is empty (all at a box face)
        if gap <= tol:
            return True
        # second-order choice of the donor: maximize violation^2 / curvature
        viol = hj - h[i]
        curv_row = 2.0 * (diag[i] + diag - 2.0 * K[i])
        np.maximum(curv_row, 1e-12, out=curv_row)
        gain = np.where(viol > 0.0, viol * viol / curv_row, -np.inf)
        j = int(gain.argmax())
        curv = 2.0 * (diag[i] + diag[j] - 2.0 * K[i, j])
        limit = min(C - alpha[i], alpha[j])
        delta = limit if curv <= 1e-18 else min((h[j] - h[i]) / curv, limit)
        alpha[i] = min(alpha[i] + delta, C)
        alpha[j] = max(alpha[j] - delta, 0.0)
        step = K[:, i] - K[:, j]
        step *= 2.0 * delta
        h += step
    return False


def _make_pair_loop_jit():
    @_njit(cache=True)
    def _pair_loop(K, diag, alpha, h, C, tol, max_iter):  # pragma: no cover
        n = alpha.shape[0]
        eps = 1e-12
        for _ in range(max_iter):
            hi_val = np.inf
            i = -1
            hj_val = -np.inf
            for t in range(n):
                if alpha[t] < C - eps and h[t] < hi_val:
                    hi_val = h[t]
                    i = t
                if alpha[t] > eps and h[t] > hj_val:
                    hj_val = h[t]
            if i == -1 or hj_val - hi_val <= tol:
                return True
            best_gain = -np.inf
            j = -1
            for t in range(n):
                if alpha[t] > eps:
                    viol = h[t] - hi_val
                    if viol > 0.0:
                        c = 2.0 * (diag[i] + diag[t] - 2.0 * K[i, t])
                        if c < 1e-12:
                            c = 1e-12
                        gain = viol * viol / c
                        if gain > best_gain:
                            best_gain = gain
                            j = t
            if j == -1:
                return True
            curv = 2.0 * (diag[i] + diag[j] - 2.0 * K[i, j])
            limit = C - alpha[i]
            if alpha[j] < limit:
                limit = alpha[j]
            delta = limit
            if curv > 1e-18:
                newton = (h[j] - hi_val) / curv
                if newton < delta:
                    delta = newton
            alpha[i] = min(alpha[i] + delta, C)
            alpha[j] = max(alpha[j] - delta, 0.0)
            two_delta = 2.0 * delta
            for t in range(n):
                h[t] += two_delta * (K[t, i] - K[t, j])
        return False

    return _pair_loop


_pair_loop = _make_pair_loop_jit() if _njit is not None else _pair_loop_python


def solve_svdd_dual(K: np.ndarray, nu: float, tol: float = 1e-6,
                    max_passes: int | None = None):
    """Solve the SVDD dual on a precomputed kernel Gram matrix.

    Returns (alpha, converged). alpha starts uniform (always feasible); pairs
    are picked by first-order violation for the receiver and second-order gain
    for the donor (ties to the lowest index), and the loop stops when the KKT
    gradient gap drops to tol, which bounds the dual objective gap by tol.
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValueError("kernel matrix must be square")
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    alpha = np.full(n, 1.0 / n)
    if n == 1:
        return alpha, True
    C = 1.0 / (n * nu)
    if max_passes is None:
        # 10n sweeps, floored so tiny problems get enough zigzag iterations
        max_iter = max(10 * n * n, 1000)
    else:
        max_iter = max_passes * n
    diag = np.diag(K).copy()
    # gradient of the minimized form (a^T K a - a . diag) is 2 K a - diag
    h = 2.0 * (K @ alpha) - diag
    converged = bool(_pair_loop(K, diag, alpha, h, C, tol, max_iter))
    return alpha, converged


@dataclass(eq=False)
class SvddModel:
    """Solved SVDD dual: retained coefficients, support rows, width, and radius.

    support_vectors hold the z-standardized kept feature columns; column_means,
    column_stds and kept_cols describe the transform from raw feature rows.
    """

    alphas: np.ndarray
    support_vectors: np.ndarray
    nu: float
    kernel_width: float
    const_term: float
    radius_sq: float
    column_means: np.ndarray
    column_stds: np.ndarray
    kept_cols: np.ndarray
    n_train: int
    converged: bool = True

    @property
    def dim(self) -> int:
        return int(len(self.column_means))

    def transform(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dim feature rows, got {Z.shape[1]}")
        kept = self.kept_cols
        return (Z[:, kept] - self.column_means[kept]) / self.column_stds[kept]


def train_svdd(X, nu: float = 0.1, s: float | None = None, tol: float = 1e-6,
               max_passes: int | None = None, sample_cap: int = 256,
               seed: int = 0) -> SvddModel:
    """Fit an SVDD model to raw feature rows.

    s=None selects the kernel width by the median heuristic on the standardized
    matrix. A non-converged solve (budget exhausted) returns the best iterate
    with converged=False.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training matrix must be 2-D and non-empty")
    n = X.shape[0]
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    kept = np.flatnonzero(stds > 1e-12)
    if len(kept) < X.shape[1]:
        warnings.warn(f"dropping {X.shape[1] - len(kept)} constant feature column(s)")
    Z = (X[:, kept] - means[kept]) / stds[kept]
    if n == 1:
        return SvddModel(np.array([1.0]), Z, nu, float(s or 1.0), 1.0, 0.0,
                         means, stds, kept, 1, True)
    if s is None:
        s = median_heuristic(Z, sample_cap=sample_cap, seed=seed)
    elif s <= 0:
        raise ValueError(f"kernel width must be positive, got {s}")
    K = _rbf_matrix(Z, Z, s)
    alpha, converged = solve_svdd_dual(K, nu, tol=tol, max_passes=max_passes)
    const = float(alpha @ K @ alpha)
    dist2 = 1.0 - 2.0 * (K @ alpha) + const
    C = 1.0 / (n * nu)
    retained = alpha > _SV_EPS
    boundary = retained & (alpha < C - tol)
    if boundary.any():
        radius_sq = float(np.mean(dist2[boundary]))
    else:
        radius_sq = float(np.max(dist2[retained]))
    return SvddModel(alpha[retained].copy(), Z[retained].copy(), float(nu),
                     float(s), const, max(radius_sq, 0.0), means, stds, kept,
                     n, converged)


def svdd_score_batch(model: SvddModel, Z) -> np.ndarray:
    """Scores for raw feature rows; -(squared kernel distance to the center)."""
    Zs = model.transform(Z)
    Kz = _rbf_matrix(Zs, model.support_vectors, model.kernel_width)
    return 2.0 * (Kz @ model.alphas) - model.const_term - 1.0


def svdd_score(model: SvddModel, z) -> float:
    return float(svdd_score_batch(model, np.atleast_2d(z))[0])


def is_member(model: SvddModel, z) -> bool:
    """Membership test: the point lies inside the sphere (score >= -R^2)."""
    return svdd_score(model, z) >= -model.radius_sq


# --- serialization -------------------------------------------------------------
#
# Single file: u32 LE header length | JSON header | alphas f32 LE | support
# vectors f32 LE (row-major). The header carries nu, s, const_term, radius_sq,
# n_sv, dim plus the column transform.


def save_svdd(model: SvddModel, path):
    header = {
        "nu": model.nu,
        "s": model.kernel_width,
        "const_term": model.const_term,
        "radius_sq": model.radius_sq,
        "n_sv": int(len(model.alphas)),
        "dim": int(model.support_vectors.shape[1]),
        "column_means": [float(v) for v in model.column_means],
        "column_stds": [float(v) for v in model.column_stds],
        "kept_cols": [int(v) for v in model.kept_cols],
        "n_train": int(model.n_train),
        "converged": bool(model.converged),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(np.ascontiguousarray(model.alphas, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.support_vectors, dtype="<f4").tobytes())


def load_svdd(path) -> SvddModel:
    data = Path(path).read_bytes()
    hlen = struct.unpack("<I", data[:4])[0]
    header = json.loads(data[4 : 4 + hlen])
    n_sv, dim = header["n_sv"], header["dim"]
    off = 4 + hlen
    alphas = np.frombuffer(data, dtype="<f4", count=n_sv, offset=off).astype(np.float64)
    off += 4 * n_sv
    svs = np.frombuffer(data, dtype="<f4", count=n_sv * dim, offset=off)
    return SvddModel(
        alphas=alphas,
        support_vectors=svs.reshape(n_sv, dim).astype(np.float64),
        nu=header["nu"],
        kernel_width=header["s"],
        const_term=header["const_term"],
        radius_sq=header["radius_sq"],
        column_means=np.array(header["column_means"]),
        column_stds=np.array(header["column_stds"]),
        kept_cols=np.array(header["kept_cols"], dtype=np.int64),
        n_train=header["n_train"],
        converged=header["converged"],
    )
