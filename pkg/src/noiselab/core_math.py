"""Dense linear-algebra kernels, seeded random streams, and trajectory records.

Everything is desk scale: dense float64 matrices of at most a few hundred rows,
factored through SVD or symmetric eigendecomposition. The dynamics modules are
built on these kernels and on RngStream, which makes every simulation
replayable bit for bit.
"""

from __future__ import annotations

import numpy as np

# Row-major dense carriers. All kernels expect finite float64 entries.
Mat = np.ndarray
Vec = np.ndarray

# Relative singular-value cutoff below which directions count as rank-deficient.
PINV_CUTOFF = 1e-12

_MASK64 = (1 << 64) - 1


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


class RngStream:
    """Deterministic random stream addressed by (seed, path).

    Streams with equal seed and path emit identical samples bit for bit;
    distinct paths give statistically independent PCG64 states. child(k)
    derives a sub-stream, so one experiment seed fans out into per-trajectory
    and per-role streams (index draws vs Gaussian noise vs shared Brownian
    increments) without any cross-talk.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(p) & _MASK64 for p in path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed,) + self.path))
        )

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, self.path + (k,))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def indices(self, n: int, batch: int):
        """Uniform draw of `batch` distinct indices from range(n)."""
        return self._gen.choice(n, size=batch, replace=False)


def min_norm_solve(X: Mat, Y: Vec) -> Vec:
    """Least-squares solution of minimal Euclidean norm, pinv(X) @ Y."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 1 or X.shape[0] != Y.shape[0]:
        raise ValueError("shape mismatch between X and Y")
    _require_finite("X", X)
    _require_finite("Y", Y)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        raise ValueError("X must be nonzero")
    keep = s > PINV_CUTOFF * s[0]
    return Vt[keep].T @ ((U[:, keep].T @ Y) / s[keep])


def solve_lyapunov(Bm: Mat, D: Mat) -> Mat:
    """Solve Bm W + W Bm = 2 D for symmetric positive definite Bm.

    Works in the eigenbasis of Bm, where the equation decouples entrywise:
    W = Q ((Q^T D Q)_ij * 2 / (lam_i + lam_j)) Q^T.
    """
    Bm = np.asarray(Bm, dtype=float)
    D = np.asarray(D, dtype=float)
    if Bm.ndim != 2 or Bm.shape[0] != Bm.shape[1] or Bm.shape != D.shape:
        raise ValueError("Bm and D must be square matrices of equal shape")
    _require_finite("Bm", Bm)
    _require_finite("D", D)
    scale = max(1.0, float(np.abs(Bm).max()))
    if not np.allclose(Bm, Bm.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("Bm must be symmetric")
    lam, Q = np.linalg.eigh(0.5 * (Bm + Bm.T))
    if lam[0] <= 1e-12 * max(lam[-1], 0.0):
        raise ValueError("Bm must be positive definite")
    core = (Q.T @ D @ Q) * (2.0 / (lam[:, None] + lam[None, :]))
    W = Q @ core @ Q.T
    # symmetrize away factorization roundoff
    return 0.5 * (W + W.T)


def row_space_projector(X: Mat) -> Mat:
    """Orthogonal projector onto the span of the rows of X."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a matrix")
    _require_finite("X", X)
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return np.zeros((X.shape[1], X.shape[1]))
    Vr = Vt[s > PINV_CUTOFF * s[0]]
    P = Vr.T @ Vr
    return 0.5 * (P + P.T)


def spectral_norm(M: Mat) -> float:
    """Largest singular value of M."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise ValueError("empty matrix")
    _require_finite("M", M)
    if M.ndim == 1:
        M = M[None, :]
    return float(np.linalg.svd(M, compute_uv=False)[0])


def fmt17(x: float) -> str:
    """Decimal rendering with 17 significant digits, round-trip exact."""
    return "%.17g" % float(x)


class Trajectory:
    """Column-labeled numeric rows with deterministic CSV rendering.

    meta holds side outputs (standard errors, final iterates) that belong to
    the run but not to the row schema.
    """

    def __init__(self, columns):
        self.columns = tuple(str(c) for c in columns)
        self.rows: list[tuple[float, ...]] = []
        self.meta: dict = {}

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError("row width does not match column count")
        self.rows.append(tuple(float(v) for v in values))

    def column(self, name: str) -> np.ndarray:
        return np.array([row[self.columns.index(name)] for row in self.rows])

    def csv_text(self) -> str:
        lines = [", ".join(self.columns)]
        for row in self.rows:
            lines.append(", ".join(fmt17(v) for v in row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.csv_text())
