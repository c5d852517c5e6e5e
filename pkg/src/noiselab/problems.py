"""Synthetic regression instances and the constants derived from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import Mat, RngStream, Vec, fmt17, min_norm_solve, spectral_norm


@dataclass
class Dataset:
    """A regression instance with pre-normalized features.

    Xbar is X / sqrt(n), so the empirical risk reads (1/2)||Xbar @ beta - Ybar||^2
    with Ybar = Y / sqrt(n). beta_star, when present, interpolates: X @ beta_star = Y.
    regime records which side of n = d the instance sits on ("under" or "over").
    """

    X: Mat
    Y: Vec
    Xbar: Mat
    beta_star: Vec | None
    regime: str

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        self.Xbar = np.asarray(self.Xbar, dtype=float)
        if self.X.ndim != 2 or self.Y.ndim != 1 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y shapes are inconsistent")
        if self.Xbar.shape != self.X.shape:
            raise ValueError("Xbar shape differs from X")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("non-finite dataset entries")
        if not np.array_equal(self.Xbar, self.X / np.sqrt(self.X.shape[0])):
            raise ValueError("Xbar must equal X / sqrt(n) entrywise")
        if self.regime not in ("under", "over"):
            raise ValueError("regime must be 'under' or 'over'")
        if self.beta_star is not None:
            self.beta_star = np.asarray(self.beta_star, dtype=float)
            if self.beta_star.shape != (self.X.shape[1],):
                raise ValueError("beta_star dimension mismatch")
            scale = max(1.0, float(np.abs(self.Y).max()))
            if np.max(np.abs(self.X @ self.beta_star - self.Y)) > 1e-9 * scale:
                raise ValueError("beta_star does not interpolate Y")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def Ybar(self) -> Vec:
        return self.Y / np.sqrt(self.n)

    def theta_ls(self) -> Vec:
        """Minimum-norm least-squares point of the instance."""
        return min_norm_solve(self.X, self.Y)


def gen_sparse_regression(n: int, d: int, s: int, rng: RngStream) -> Dataset:
    """Standard-normal features with an s-sparse planted vector, noiseless labels.

    Support drawn uniformly without replacement; nonzero values standard normal,
    redrawn in the (measure-zero) event one lands exactly on 0.
    """
    if not 0 <= s <= d:
        raise ValueError("need 0 <= s <= d")
    X = rng.normal((n, d))
    beta_star = np.zeros(d)
    if s > 0:
        support = np.sort(rng.indices(d, s))
        vals = rng.normal(s)
        while np.any(vals == 0.0):
            vals = np.where(vals == 0.0, rng.normal(s), vals)
        beta_star[support] = vals
    Y = X @ beta_star
    regime = "over" if d >= n else "under"
    return Dataset(X=X, Y=Y, Xbar=X / np.sqrt(n), beta_star=beta_star, regime=regime)


def gen_underparam_regression(n: int, d: int, label_noise: float, rng: RngStream) -> Dataset:
    """Tall instance (n > d) with Gaussian label noise, default scale 0.5."""
    if n <= d or d < 1:
        raise ValueError("underparametrized instance needs n > d >= 1")
    if label_noise < 0:
        raise ValueError("label_noise must be nonnegative")
    X = rng.normal((n, d))
    beta0 = rng.normal(d)
    Y = X @ beta0 + label_noise * rng.normal(n)
    return Dataset(X=X, Y=Y, Xbar=X / np.sqrt(n), beta_star=None, regime="under")


def default_step_size(ds: Dataset) -> float:
    """Step size 1 / (1.3 ||Xbar Xbar^T||_2) used by all bundled experiments."""
    nrm = spectral_norm(ds.Xbar @ ds.Xbar.T)
    if nrm <= 0.0:
        raise ValueError("zero feature matrix has no step size")
    return 1.0 / (1.3 * nrm)


def save_dataset(ds: Dataset, path) -> None:
    """Flat text serialization: header 'n d regime', X rows, Y, optional beta_star."""
    lines = [f"{ds.n} {ds.d} {ds.regime}"]
    for row in ds.X:
        lines.append(" ".join(fmt17(v) for v in row))
    lines.append(" ".join(fmt17(v) for v in ds.Y))
    if ds.beta_star is not None:
        lines.append(" ".join(fmt17(v) for v in ds.beta_star))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError("malformed dataset header")
    n, d, regime = int(head[0]), int(head[1]), head[2]
    body = lines[1:]
    if len(body) not in (n + 1, n + 2):
        raise ValueError("unexpected number of dataset lines")
    X = np.array([[float(v) for v in body[i].split()] for i in range(n)])
    if X.shape != (n, d):
        raise ValueError("feature block has wrong shape")
    Y = np.array([float(v) for v in body[n].split()])
    beta_star = None
    if len(body) == n + 2:
        beta_star = np.array([float(v) for v in body[n + 1].split()])
    return Dataset(X=X, Y=Y, Xbar=X / np.sqrt(n), beta_star=beta_star, regime=regime)
