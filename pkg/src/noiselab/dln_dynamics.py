"""Two-layer diagonal linear network dynamics: the predictor is <w_+^2 - w_-^2, x>.

Discrete updates are exact minibatch SGD on the reparametrized risk, written in
multiplicative form, with optional loss-scaled Gaussian noise multiplying the
weights. The SDE integrator drives both weight signs with one shared Brownian
path, mirrored, which is what makes the hyperbolic closed form of the iterate
hold along the trajectory. The loss is the normalized empirical risk
L(beta) = (1/2n) sum_i (<beta, x_i> - y_i)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import Mat, RngStream, Trajectory, Vec, min_norm_solve, row_space_projector
from .lsq_dynamics import OptimizerConfig
from .problems import Dataset

# convergence detection for discrete and SDE runs
CONVERGED_LOSS = 1e-12
CONVERGED_STREAK = 100


class DivergenceError(RuntimeError):
    """A weight coordinate left the finite range; carries the failing step."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite iterate at step {step}" + (f": {detail}" if detail else ""))


@dataclass
class NoiseSchedule:
    """Added-noise model for the DLN updates.

    loss_scaled: sigma_t = 2 sigma sqrt(L(w_t)), the scalar schedule used by
    all bundled experiments. general: a deterministic table of matrices of
    shape (p, d) (constant) or (steps, p, d); only accepted when the squared
    Frobenius mass integrates to at most 1 over the run.
    """

    kind: str = "loss_scaled"
    sigma: float = 0.0
    matrices: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("loss_scaled", "general"):
            raise ValueError("kind must be 'loss_scaled' or 'general'")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind == "general":
            if self.matrices is None:
                raise ValueError("general schedule needs its matrix table")
            self.matrices = np.asarray(self.matrices, dtype=float)
            if self.matrices.ndim not in (2, 3) or not np.all(np.isfinite(self.matrices)):
                raise ValueError("matrix table must be finite with shape (p,d) or (T,p,d)")

    def matrix_at(self, step: int) -> np.ndarray:
        if self.matrices.ndim == 2:
            return self.matrices
        return self.matrices[min(step, self.matrices.shape[0] - 1)]

    def check_budget(self, h: float, steps: int) -> None:
        """Refuse general schedules whose noise mass exceeds the admissible budget."""
        if self.kind != "general":
            return
        if self.matrices.ndim == 2:
            mass = steps * h * float(np.sum(self.matrices**2))
        else:
            count = min(steps, self.matrices.shape[0])
            mass = h * float(np.sum(self.matrices[:count] ** 2))
            mass += max(0, steps - count) * h * float(np.sum(self.matrices[-1] ** 2))
        if mass > 1.0 + 1e-12:
            raise ValueError(f"general schedule mass {mass:.3g} exceeds the unit budget")


@dataclass
class DlnState:
    """Weight pair and running diagnostics of one DLN trajectory.

    loss_integral is the left Riemann sum of the loss, r_acc the accumulated
    out-of-row-span noise, noise_sq_integral the integrated squared schedule
    magnitude. last_increment / last_loss expose the most recent step's dual
    Brownian increment and pre-step loss so the r_acc pipeline can be composed
    from outside.
    """

    w_plus: Vec
    w_minus: Vec
    step: int = 0
    time: float = 0.0
    loss_integral: float = 0.0
    r_acc: Vec | None = None
    noise_sq_integral: float = 0.0
    last_increment: Vec | None = field(default=None, repr=False)
    last_loss: float = field(default=0.0, repr=False)

    def __post_init__(self):
        self.w_plus = np.asarray(self.w_plus, dtype=float)
        self.w_minus = np.asarray(self.w_minus, dtype=float)
        if self.w_plus.shape != self.w_minus.shape or self.w_plus.ndim != 1:
            raise ValueError("weight vectors must be 1-d with equal shapes")
        if self.r_acc is None:
            self.r_acc = np.zeros(self.w_plus.size)

    def beta(self) -> Vec:
        return self.w_plus * self.w_plus - self.w_minus * self.w_minus


def dln_init(alpha, d: int) -> DlnState:
    """Symmetric initialization w_+ = w_- = alpha, so beta starts at zero."""
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if a.size == 1:
        a = np.full(d, a[0])
    if a.shape != (d,) or np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ValueError("alpha must be positive, finite, and of length d")
    return DlnState(w_plus=a.copy(), w_minus=a.copy())


def dln_loss(beta: Vec, ds: Dataset) -> float:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (ds.d,):
        raise ValueError("beta dimension mismatch")
    r = ds.Xbar @ beta - ds.Ybar
    return 0.5 * float(r @ r)


def _batch_gradient(ds: Dataset, beta: Vec, rbar: Vec, cfg: OptimizerConfig, rng: RngStream) -> Vec:
    """Minibatch estimate of grad_beta L; full batch reuses the GD expression."""
    if cfg.kind == "GD" or cfg.batch == ds.n:
        return ds.Xbar.T @ rbar
    if cfg.batch == 1:
        i = int(rng.indices(ds.n, 1)[0])
        return ds.X[i] * (math.sqrt(ds.n) * rbar[i])
    idx = rng.indices(ds.n, cfg.batch)
    rows = ds.X[idx]
    return rows.T @ (rows @ beta - ds.Y[idx]) / cfg.batch


def dln_discrete_step(state: DlnState, ds: Dataset, cfg: OptimizerConfig,
                      sched: NoiseSchedule, rng: RngStream) -> DlnState:
    """One multiplicative update of the weight pair.

    w_{+} <- w_{+} (1 - 2 gamma a_t + gamma sigma_t Z_+), and mirrored with
    independent Z_- for w_{-}, where a_t is the minibatch gradient estimate
    and sigma_t comes from the schedule. GD drops both stochastic terms, SGD
    drops the Z term. Draw order: batch indices, then Z_+, then Z_-.
    """
    if cfg.kind not in ("GD", "SGD", "NoisySGD"):
        raise ValueError(f"unsupported optimizer kind for this model: {cfg.kind!r}")
    if cfg.batch > ds.n:
        raise ValueError("batch exceeds dataset size")
    w_p, w_m = state.w_plus, state.w_minus
    beta = w_p * w_p - w_m * w_m
    rbar = ds.Xbar @ beta - ds.Ybar
    loss = 0.5 * float(rbar @ rbar)
    if not math.isfinite(loss):
        raise DivergenceError(state.step)

    a = _batch_gradient(ds, beta, rbar, cfg, rng)
    drift = 2.0 * cfg.gamma * a
    mult_p = 1.0 - drift
    mult_m = 1.0 + drift

    increment = None
    noise_sq = 0.0
    if cfg.kind == "NoisySGD":
        if sched.kind == "loss_scaled":
            if sched.sigma > 0:
                sigma_t = 2.0 * sched.sigma * math.sqrt(loss)
                z_p = rng.normal(ds.d)
                z_m = rng.normal(ds.d)
                mult_p = mult_p + cfg.gamma * sigma_t * z_p
                mult_m = mult_m - cfg.gamma * sigma_t * z_m
                increment = math.sqrt(cfg.gamma) * 0.5 * (z_p + z_m)
                noise_sq = sigma_t * sigma_t
        else:
            mat = sched.matrix_at(state.step)
            z_p = rng.normal(mat.shape[0])
            z_m = rng.normal(mat.shape[0])
            mult_p = mult_p + cfg.gamma * (mat.T @ z_p)
            mult_m = mult_m - cfg.gamma * (mat.T @ z_m)
            noise_sq = float(np.sum(mat * mat))

    new_p = w_p * mult_p
    new_m = w_m * mult_m
    if not (np.all(np.isfinite(new_p)) and np.all(np.isfinite(new_m))):
        raise DivergenceError(state.step)
    return replace(
        state,
        w_plus=new_p,
        w_minus=new_m,
        step=state.step + 1,
        time=state.time + cfg.gamma,
        loss_integral=state.loss_integral + cfg.gamma * loss,
        noise_sq_integral=state.noise_sq_integral + cfg.gamma * noise_sq,
        last_increment=increment,
        last_loss=loss,
    )


def accumulate_r_infinity(state: DlnState, P: Mat, increment: Vec, gamma: float,
                          loss: float, sigma: float) -> DlnState:
    """r_acc += sigma sqrt(gamma loss) (I - P) increment."""
    increment = np.asarray(increment, dtype=float)
    if P.shape != (increment.size, increment.size) or increment.size != state.r_acc.size:
        raise ValueError("projector and increment dimensions are inconsistent")
    out = increment - P @ increment
    return replace(state, r_acc=state.r_acc + sigma * math.sqrt(gamma * loss) * out)


def effective_alpha(alpha0: Vec, ds: Dataset, gamma: float, sigma: float,
                    loss_integral: float) -> Vec:
    """Decayed potential scale alpha0 . exp(-2 gamma (sigma^2 + diag(Xbar^T Xbar)) int L)."""
    alpha0 = np.atleast_1d(np.asarray(alpha0, dtype=float))
    if np.any(alpha0 <= 0) or loss_integral < 0:
        raise ValueError("need alpha0 > 0 and a nonnegative loss integral")
    col = np.sum(ds.Xbar * ds.Xbar, axis=0)
    if alpha0.size == 1:
        alpha0 = np.full(ds.d, alpha0[0])
    return alpha0 * np.exp(-2.0 * gamma * sigma * sigma * loss_integral) * np.exp(
        -2.0 * gamma * col * loss_integral
    )


def effective_init(alpha_inf: Vec, r_inf: Vec) -> Vec:
    """Reference point 2 alpha_inf^2 sinh(4 r_inf) of the limit Bregman problem."""
    alpha_inf = np.asarray(alpha_inf, dtype=float)
    if np.any(alpha_inf <= 0):
        raise ValueError("alpha_inf must be positive")
    return 2.0 * alpha_inf * alpha_inf * np.sinh(4.0 * np.asarray(r_inf, dtype=float))


def _dist_reference(ds: Dataset) -> Vec:
    return ds.beta_star if ds.beta_star is not None else min_norm_solve(ds.X, ds.Y)


def simulate_dln_sde(ds: Dataset, alpha, sched: NoiseSchedule, gamma: float, h: float,
                     steps: int, rng: RngStream, record_stride: int = 100,
                     early_stop: bool = True) -> Trajectory:
    """Geometric Euler-Maruyama for the mirrored weight SDE, one shared path.

    The weights of the exact SDE stay positive, so the scheme steps their
    logarithms. Per step, with xi ~ N(0, I_{n+d}) and A = (Xbar | sigma I_d):
        c = 2 h Xbar^T rbar - 2 sqrt(gamma L) sqrt(h) A^T xi
        v = per-coordinate noise variance, 4 gamma L h (diag(A^T A))
        w_+ <- w_+ exp(-c - v/2),  w_- <- w_- exp(+c - v/2)
    The drift coefficient is the small-step limit of the discrete update, so
    the dual variable (1/4) log(w_+/w_-) descends the full loss gradient and
    the run dissipates at the same rate as the algorithm it models. Stepping
    in log space keeps the product w_+ w_- exactly on the decayed-scale law
    and never flips a weight sign, which a linear multiplier does at O(h).
    The trajectory records t, loss, squared distance to the planted vector,
    the loss integral, and ||r_acc||. meta["checkpoints"] keeps, at every
    recorded step, the iterate beta together with the linearly re-accumulated
    exponents (eta from the drift and data-noise block, delta from the
    isotropic block) so the hyperbolic closed form can be checked externally.
    """
    if steps < 0 or h <= 0 or gamma <= 0:
        raise ValueError("need positive gamma, h and nonnegative steps")
    sched.check_budget(h, steps)
    state = dln_init(alpha, ds.d)
    w_p, w_m = state.w_plus, state.w_minus
    sigma = sched.sigma if sched.kind == "loss_scaled" else 0.0
    n, d = ds.n, ds.d
    P = row_space_projector(ds.X)
    ref = _dist_reference(ds)
    sqh = math.sqrt(h)
    # per-coordinate noise variance of the shared path is 4 gamma L h (diag + sigma^2)
    var_fac = 4.0 * gamma * h * (np.sum(ds.Xbar * ds.Xbar, axis=0) + sigma * sigma)

    eta = np.zeros(d)
    delta = np.zeros(d)
    r_acc = np.zeros(d)
    loss_integral = 0.0
    noise_sq_integral = 0.0
    streak = 0
    last_recorded = -1
    traj = Trajectory(("t", "loss", "dist_to_beta_l0_sq", "loss_integral", "r_acc_norm"))
    traj.meta["checkpoints"] = []

    def record(k, beta, loss):
        nonlocal last_recorded
        diff = beta - ref
        traj.append(k * h, loss, float(diff @ diff), loss_integral,
                    float(np.linalg.norm(r_acc)))
        traj.meta["checkpoints"].append({
            "step": k, "time": k * h, "beta": beta.copy(), "eta": eta.copy(),
            "delta": delta.copy(), "loss_integral": loss_integral,
        })
        last_recorded = k

    block = 4096
    k = 0
    stopped = False
    while k < steps and not stopped:
        count = min(block, steps - k)
        xi_all = rng.normal((count, n + d))
        if sched.kind == "general":
            z_gen = rng.normal((count, sched.matrices.shape[-2]))
        for j in range(count):
            beta = w_p * w_p - w_m * w_m
            rbar = ds.Xbar @ beta - ds.Ybar
            loss = 0.5 * float(rbar @ rbar)
            if not math.isfinite(loss):
                raise DivergenceError(k)
            if k % record_stride == 0:
                record(k, beta, loss)
            if early_stop:
                streak = streak + 1 if loss <= CONVERGED_LOSS else 0
                if streak >= CONVERGED_STREAK:
                    stopped = True
                    break

            g = 2.0 * h * (ds.Xbar.T @ rbar)
            amp = 2.0 * math.sqrt(gamma * loss) * sqh
            xi = xi_all[j]
            m_x = amp * (ds.Xbar.T @ xi[:n])
            c = g - m_x
            v = var_fac * loss
            eta = eta - g + m_x
            if sigma > 0:
                m_i = (amp * sigma) * xi[n:]
                inc = sqh * xi[n:]
                r_acc = r_acc + sigma * math.sqrt(gamma * loss) * (inc - P @ inc)
                c = c - m_i
                delta = delta + m_i
            if sched.kind == "general":
                mat = sched.matrix_at(k)
                m_g = 2.0 * sqh * (mat.T @ z_gen[j])
                c = c - m_g
                delta = delta + m_g
                r_acc = r_acc + 0.5 * (m_g - P @ m_g)
                v = v + 4.0 * h * np.sum(mat * mat, axis=0)
                noise_sq_integral += h * float(np.sum(mat * mat))
            fade = np.exp(-0.5 * v)
            grow = np.exp(-c)
            w_p = w_p * (fade * grow)
            w_m = w_m * (fade / grow)
            loss_integral += h * loss
            noise_sq_integral += h * 4.0 * sigma * sigma * loss
            k += 1

    beta = w_p * w_p - w_m * w_m
    rbar = ds.Xbar @ beta - ds.Ybar
    if last_recorded != k:
        record(k, beta, 0.5 * float(rbar @ rbar))
    traj.meta["final_state"] = DlnState(
        w_plus=w_p, w_minus=w_m, step=k, time=k * h, loss_integral=loss_integral,
        r_acc=r_acc, noise_sq_integral=noise_sq_integral,
    )
    traj.meta["eta"] = eta
    traj.meta["delta"] = delta
    traj.meta["converged"] = stopped
    traj.meta["steps_run"] = k
    return traj


def run_dln_discrete(ds: Dataset, state: DlnState, cfg: OptimizerConfig,
                     sched: NoiseSchedule, steps: int, rng: RngStream,
                     record_stride: int = 100, P: Mat | None = None,
                     early_stop: bool = True):
    """Sequential driver: iterates dln_discrete_step, bitwise equal to manual stepping.

    Returns (final DlnState, Trajectory). Rows are pre-step snapshots every
    record_stride steps plus the final iterate. When P is given, each noisy
    step also feeds its dual increment sqrt(gamma) (Z_+ + Z_-) / 2 through
    accumulate_r_infinity, building the realized out-of-row-span noise of the
    run. Stops early once the loss sits at or below 1e-12 for 100 straight
    steps; the step that completes the streak is still applied.
    """
    if sched.kind == "general":
        sched.check_budget(cfg.gamma, steps)
    ref = _dist_reference(ds)
    traj = Trajectory(("t", "loss", "dist_to_beta_l0_sq", "loss_integral", "r_acc_norm"))
    streak = 0
    last_recorded = -1
    stopped = False

    def record(snap: DlnState, beta: Vec, loss: float):
        nonlocal last_recorded
        diff = beta - ref
        traj.append(snap.time, loss, float(diff @ diff), snap.loss_integral,
                    float(np.linalg.norm(snap.r_acc)))
        last_recorded = snap.step

    done = 0
    for k in range(steps):
        prev = state
        beta_prev = prev.beta()
        state = dln_discrete_step(prev, ds, cfg, sched, rng)
        loss_prev = state.last_loss
        done = k + 1
        if k % record_stride == 0:
            record(prev, beta_prev, loss_prev)
        if P is not None and state.last_increment is not None:
            state = accumulate_r_infinity(state, P, state.last_increment,
                                          cfg.gamma, loss_prev, sched.sigma)
        if early_stop:
            streak = streak + 1 if loss_prev <= CONVERGED_LOSS else 0
            if streak >= CONVERGED_STREAK:
                stopped = True
                break

    beta = state.beta()
    if last_recorded != state.step:
        record(state, beta, dln_loss(beta, ds))
    traj.meta["final_state"] = state
    traj.meta["converged"] = stopped
    traj.meta["steps_run"] = done
    return state, traj
