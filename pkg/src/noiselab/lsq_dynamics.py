"""Discrete optimizers and Euler-Maruyama integrators for linear least squares.

The loss convention everywhere is the normalized empirical risk
R(theta) = (1/2n) ||X theta - Y||^2 = (1/2) ||Xbar theta - Ybar||^2,
so gradients read Xbar^T (Xbar theta - Ybar) and the default step size
1/(1.3 ||Xbar Xbar^T||_2) is the right scale for every optimizer kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import Mat, RngStream, Trajectory, Vec, min_norm_solve
from .problems import Dataset

KINDS = ("GD", "SGD", "NoisySGD", "DPSGD")


@dataclass
class LsqState:
    theta: Vec
    step: int = 0
    time: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite iterate")


@dataclass
class OptimizerConfig:
    """Knobs shared by all optimizer kinds.

    sigma is the added-noise scale (unused by GD/SGD), eps_floor the additive
    isotropic floor of the underparametrized SDE, clip the per-sample norm
    bound (DPSGD only, may be inf), sde_step the Euler-Maruyama step which
    defaults to gamma.
    """

    kind: str
    gamma: float
    sigma: float = 0.0
    eps_floor: float = 0.0
    batch: int = 1
    clip: float = math.inf
    sde_step: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.sigma < 0 or self.eps_floor < 0:
            raise ValueError("sigma and eps_floor must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if not self.clip > 0:
            raise ValueError("clip must be positive (use inf to disable)")
        if self.kind == "DPSGD" and math.isinf(self.clip) and self.sigma > 0:
            raise ValueError("DPSGD noise scale C*sigma is undefined for clip=inf, sigma>0")
        if self.sde_step is None:
            self.sde_step = self.gamma
        if not self.sde_step > 0:
            raise ValueError("sde_step must be positive")


@dataclass
class StationaryLaw:
    mean: Vec
    cov: Mat


@dataclass
class EtaReport:
    """Averaged coupled-trajectory deviation record.

    eta_mean[k] is the Monte Carlo mean of ||theta - beta||^2 at times[k], and
    bound_rhs[k] = gamma * d * sigma^2 * loss_integral_mean[k] the matching
    deviation bound.
    """

    times: Vec
    eta_mean: Vec
    loss_integral_mean: Vec
    bound_rhs: Vec
    n_traj: int
    traj: Trajectory = field(repr=False)


def clip(g: Vec, C: float) -> Vec:
    """Rescale g onto the ball of radius C when it is longer than C."""
    if not C > 0:
        raise ValueError("clip threshold must be positive")
    g = np.asarray(g, dtype=float)
    nrm = float(np.linalg.norm(g))
    if nrm >= C:
        return (C / nrm) * g
    return g


def _full_gradient(ds: Dataset, theta: Vec) -> Vec:
    return ds.Xbar.T @ (ds.Xbar @ theta - ds.Ybar)


def lsq_discrete_step(state: LsqState, ds: Dataset, cfg: OptimizerConfig, rng: RngStream) -> LsqState:
    """One update theta <- theta - gamma * g_tilde.

    g_tilde is the full gradient (GD), a without-replacement minibatch gradient
    (SGD), the SGD gradient plus N(0, sigma^2/B^2 I) (NoisySGD), or the
    per-sample-clipped minibatch mean plus N(0, C^2 sigma^2 / B^2 I) (DPSGD).
    Batches of size n use the dataset in natural order through the same
    full-batch expression as GD. Draw order within a step is fixed: indices
    first, then the Gaussian; absent terms draw nothing.
    """
    if cfg.batch > ds.n:
        raise ValueError("batch exceeds dataset size")
    theta = state.theta
    if not np.all(np.isfinite(theta)):
        raise ValueError(f"non-finite iterate at step {state.step}")

    if cfg.kind == "GD":
        g = _full_gradient(ds, theta)
    else:
        if cfg.batch == ds.n:
            idx = None
        else:
            idx = rng.indices(ds.n, cfg.batch)
        if cfg.kind == "DPSGD" and not math.isinf(cfg.clip):
            rows = ds.X if idx is None else ds.X[idx]
            ys = ds.Y if idx is None else ds.Y[idx]
            res = rows @ theta - ys
            per_sample = rows * res[:, None]
            norms = np.linalg.norm(per_sample, axis=1)
            scale = np.minimum(1.0, cfg.clip / np.maximum(norms, 1e-300))
            g = (per_sample * scale[:, None]).sum(axis=0) / cfg.batch
        elif idx is None:
            g = _full_gradient(ds, theta)
        else:
            rows = ds.X[idx]
            g = rows.T @ (rows @ theta - ds.Y[idx]) / cfg.batch
        if cfg.kind == "NoisySGD" and cfg.sigma > 0:
            g = g + (cfg.sigma / cfg.batch) * rng.normal(ds.d)
        elif cfg.kind == "DPSGD" and cfg.sigma > 0:
            g = g + (cfg.clip * cfg.sigma / cfg.batch) * rng.normal(ds.d)

    return LsqState(theta=theta - cfg.gamma * g, step=state.step + 1,
                    time=state.time + cfg.gamma)


def stationary_law_theory(ds: Dataset, gamma: float, eps: float, sigma: float) -> StationaryLaw:
    """Limit law of the underparametrized Ornstein-Uhlenbeck iteration.

    Mean is the least-squares point. The covariance solves the Lyapunov
    equation A W + W A = 2 D with A = Xbar^T Xbar and
    D = (gamma eps^2 / 2) A + (sigma^2 / 2) I, which in closed form is
    (gamma eps^2 / 2) I + (sigma^2 / 2) A^{-1}.
    """
    if ds.regime != "under":
        raise ValueError("stationary law needs an underparametrized instance")
    A = ds.Xbar.T @ ds.Xbar
    lam, Q = np.linalg.eigh(A)
    if lam[0] <= 1e-12 * lam[-1]:
        raise ValueError("Xbar^T Xbar is singular")
    diag = 0.5 * gamma * eps * eps + 0.5 * sigma * sigma / lam
    cov = (Q * diag) @ Q.T
    return StationaryLaw(mean=min_norm_solve(ds.X, ds.Y), cov=0.5 * (cov + cov.T))


def simulate_ou_under(ds: Dataset, cfg: OptimizerConfig, steps: int, burn_in: int,
                      rng: RngStream, record_stride: int = 100, thin: int = 10):
    """Euler-Maruyama for d theta = -Xbar^T(Xbar theta - Ybar) dt
    + sqrt(gamma) eps Xbar^T dW + sigma dW~.

    Returns (empirical mean, empirical covariance, trajectory). Mean and
    covariance are time averages over post-burn-in iterates thinned by
    `thin`; the trajectory meta carries batch-means standard errors of the
    mean ("mean_se", 50 batches) and the sample count ("n_samples").
    """
    if ds.regime != "under":
        raise ValueError("needs an underparametrized instance")
    if burn_in >= steps:
        raise ValueError("burn_in must be smaller than steps")
    A = ds.Xbar.T @ ds.Xbar
    b = ds.Xbar.T @ ds.Ybar
    h = cfg.sde_step
    lam = np.linalg.eigvalsh(A)
    if lam[0] <= 0 or max(abs(1.0 - h * lam[0]), abs(1.0 - h * lam[-1])) >= 1.0:
        raise ValueError("unstable step size: spectral radius of I - h A is >= 1")

    d, n = ds.d, ds.n
    amp_x = math.sqrt(h) * math.sqrt(cfg.gamma) * cfg.eps_floor
    amp_i = math.sqrt(h) * cfg.sigma
    theta = np.zeros(d)

    n_samples = (steps - burn_in + thin - 1) // thin
    samples = np.empty((n_samples, d))
    traj = Trajectory(("t", "loss", "eta", "bound_rhs", "theta_norm"))

    block = 10_000
    sample_at = burn_in  # next step index to sample (pre-update state at index k)
    si = 0
    for start in range(0, steps, block):
        count = min(block, steps - start)
        if cfg.eps_floor > 0:
            noise = amp_x * (rng.normal((count, n)) @ ds.Xbar)
            if cfg.sigma > 0:
                noise += amp_i * rng.normal((count, d))
        elif cfg.sigma > 0:
            noise = amp_i * rng.normal((count, d))
        else:
            noise = None
        for j in range(count):
            k = start + j
            if k >= burn_in and k == sample_at:
                samples[si] = theta
                si += 1
                sample_at += thin
            if k % record_stride == 0:
                r = ds.Xbar @ theta - ds.Ybar
                traj.append(k * h, 0.5 * float(r @ r), 0.0, 0.0,
                            float(np.linalg.norm(theta)))
            if noise is None:
                theta = theta - h * (A @ theta - b)
            else:
                theta = theta - h * (A @ theta - b) + noise[j]

    samples = samples[:si]
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = (centered.T @ centered) / si

    n_batches = min(50, si)
    bounds = np.linspace(0, si, n_batches + 1).astype(int)
    batch_means = np.array([samples[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    mean_se = batch_means.std(axis=0, ddof=1) / math.sqrt(n_batches)

    traj.meta["mean_se"] = mean_se
    traj.meta["n_samples"] = si
    traj.meta["final_theta"] = theta
    return mean, cov, traj


def eta_bound_rhs(gamma: float, d: int, sigma: float, loss_integral: float) -> float:
    """Deviation bound gamma * d * sigma^2 * integral of the loss."""
    if gamma < 0 or d < 0 or sigma < 0 or loss_integral < 0:
        raise ValueError("all bound inputs must be nonnegative")
    return gamma * d * sigma * sigma * loss_integral


def simulate_coupled_over(ds: Dataset, gamma: float, sigma: float, steps: int,
                          n_traj: int, rng: RngStream, record_stride: int = 1) -> EtaReport:
    """Jointly integrate the clean and noisy overparametrized SDEs.

    Both share the Brownian increments of the data-noise term
    sqrt(gamma L(.)) Xbar^T dB; the noisy copy adds sqrt(gamma L(beta)) sigma dB~
    with independent increments. Trajectories start at zero and are averaged
    pointwise; eta_t = ||theta_t - beta_t||^2. Step size is gamma.
    """
    if ds.regime != "over":
        raise ValueError("needs an overparametrized instance")
    trace = float(np.sum(ds.Xbar * ds.Xbar))
    if gamma > 1.0 / trace + 1e-12:
        raise ValueError("gamma exceeds 1 / Tr(Xbar^T Xbar)")
    if n_traj < 1 or steps < 1:
        raise ValueError("need at least one trajectory and one step")

    h = gamma
    d, n = ds.d, ds.n
    sq = math.sqrt(h * gamma)
    theta = np.zeros((n_traj, d))
    beta = np.zeros((n_traj, d))
    loss_int = np.zeros(n_traj)
    shared = rng.child(2)
    own = rng.child(1)

    traj = Trajectory(("t", "loss", "eta", "bound_rhs", "theta_norm"))
    times, eta_mean, li_mean, rhs = [0.0], [0.0], [0.0], [0.0]
    traj.append(0.0, _mean_loss(ds, beta), 0.0, 0.0, 0.0)

    for k in range(steps):
        r_t = theta @ ds.Xbar.T - ds.Ybar
        r_b = beta @ ds.Xbar.T - ds.Ybar
        l_t = 0.5 * np.einsum("ij,ij->i", r_t, r_t)
        l_b = 0.5 * np.einsum("ij,ij->i", r_b, r_b)
        loss_int += h * l_b

        xi = shared.normal((n_traj, n)) @ ds.Xbar
        theta = theta - h * (r_t @ ds.Xbar) + sq * np.sqrt(l_t)[:, None] * xi
        beta = beta - h * (r_b @ ds.Xbar) + sq * np.sqrt(l_b)[:, None] * xi
        if sigma > 0:
            beta = beta + (sq * sigma) * np.sqrt(l_b)[:, None] * own.normal((n_traj, d))

        if (k + 1) % record_stride == 0 or k + 1 == steps:
            diff = theta - beta
            eta = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
            li = float(np.mean(loss_int))
            t = (k + 1) * h
            times.append(t)
            eta_mean.append(eta)
            li_mean.append(li)
            rhs.append(eta_bound_rhs(gamma, d, sigma, li))
            traj.append(t, _mean_loss(ds, beta), eta, rhs[-1],
                        float(np.mean(np.linalg.norm(theta, axis=1))))

    return EtaReport(times=np.array(times), eta_mean=np.array(eta_mean),
                     loss_integral_mean=np.array(li_mean), bound_rhs=np.array(rhs),
                     n_traj=n_traj, traj=traj)


def _mean_loss(ds: Dataset, batch: Mat) -> float:
    r = batch @ ds.Xbar.T - ds.Ybar
    return 0.5 * float(np.mean(np.einsum("ij,ij->i", r, r)))
