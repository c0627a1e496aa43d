"""Nonlinear least-squares fitting of the Ball-and-Stick model.

The optimizer is a damped Gauss-Newton (Levenberg-Marquardt style) loop on
an internal parameterization that builds the constraints in:

* stick fraction through a logistic squash onto (0, 1),
* diffusivity and s0 through their logarithms,
* orientation through two spherical angles.

Each voxel runs the initial start plus a fixed number of perturbed
restarts; the lowest final cost wins. Restart perturbations are seeded
from the voxel index, so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dti import DtiVolumeFit, _run_chunked, design_matrix, dti_metrics, eig3_sym
from .dti import FLAG_NO_SIGNAL, fit_dti_volume
from .errors import AllNonPositive, ShapeMismatch
from .gradients import GradientScheme
from .nifti import DwiVolume
from .signals import BallStick, Tensor

N_PARAMS = 5  # (a, ln d, theta, phi, ln s0)

DAMPING_INIT = 1e-3
DAMPING_UP = 3.0
DAMPING_DOWN = 0.3
DAMPING_STUCK = 1e12
MAX_ITER = 200
COST_TOL = 1e-10
N_RESTARTS = 5

_D_INIT_BOUNDS = (1e-5, 5e-3)
_F_INIT_BOUNDS = (0.05, 0.95)
_THETA_LO = np.array([-30.0, np.log(1e-8), -np.inf, -np.inf, -60.0])
_THETA_HI = np.array([30.0, np.log(0.1), np.inf, np.inf, 60.0])
_PERTURB_SCALE = np.array([0.8, 0.4, 0.5, 1.0, 0.05])
_SEED_TAG = 0x9B5


@dataclass
class BallStickFitResult:
    params: BallStick
    residual_rms: float
    iterations: int
    converged: bool
    restarts_used: int
    cost_trace: list | None = None


def ballstick_metrics(m: BallStick) -> tuple[float, float]:
    """(ID, FWW): the stick's diffusivity and the ball's weight."""
    return m.d, 1.0 - m.f_stick


def init_from_dti(t: Tensor) -> BallStick:
    """Initial Ball-and-Stick guess from a fitted tensor.

    Orientation from the principal eigenvector, diffusivity from MD,
    stick fraction from FA; both clamped away from their bounds.
    """
    e = eig3_sym(t)
    m = dti_metrics(e)
    return BallStick(
        f_stick=float(np.clip(m.fa, *_F_INIT_BOUNDS)),
        d=float(np.clip(m.md, *_D_INIT_BOUNDS)),
        mu=e.vectors[0],
        s0=t.s0,
    )


def theta_from_params(p: BallStick) -> np.ndarray:
    """Internal coordinates of a parameter set."""
    f = np.clip(p.f_stick, 1e-9, 1.0 - 1e-9)
    mu = p.mu / np.linalg.norm(p.mu)
    return np.array([
        np.log(f / (1.0 - f)),
        np.log(max(p.d, 1e-8)),
        np.arccos(np.clip(mu[2], -1.0, 1.0)),
        np.arctan2(mu[1], mu[0]),
        np.log(max(p.s0, 1e-30)),
    ])


def params_from_theta(theta) -> BallStick:
    """Inverse of :func:`theta_from_params`; mu is sign-canonicalized."""
    a, ld, th, ph, ls0 = np.asarray(theta, dtype=np.float64)
    mu = np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    mu = canonical_direction(mu)
    return BallStick(
        f_stick=float(1.0 / (1.0 + np.exp(-a))),
        d=float(np.exp(ld)),
        mu=mu / np.linalg.norm(mu),
        s0=float(np.exp(ls0)),
    )


def canonical_direction(mu: np.ndarray) -> np.ndarray:
    """Flip the sign so the first component with |x| > 1e-9 is positive."""
    for component in mu:
        if abs(component) > 1e-9:
            return -mu if component < 0 else mu
    return mu


def model_and_jacobian(theta: np.ndarray, bvals: np.ndarray, dirs: np.ndarray):
    """Signals and analytic Jacobian for a (k, 5) batch of internal
    parameters: returns (S (k, n), J (k, n, 5))."""
    theta = np.atleast_2d(theta)
    a, ld, th, ph = theta[:, 0:1], theta[:, 1:2], theta[:, 2], theta[:, 3]
    ls0 = theta[:, 4:5]

    f = 1.0 / (1.0 + np.exp(-a))
    d = np.exp(ld)
    s0 = np.exp(ls0)

    sth, cth = np.sin(th), np.cos(th)
    sph, cph = np.sin(ph), np.cos(ph)
    mu = np.stack([sth * cph, sth * sph, cth], axis=1)
    dmu_dth = np.stack([cth * cph, cth * sph, -sth], axis=1)
    dmu_dph = np.stack([-sth * sph, sth * cph, np.zeros_like(th)], axis=1)

    c = mu @ dirs.T  # (k, n)
    eb = np.exp(-bvals * d)
    es = np.exp(-bvals * d * c**2)
    s = s0 * ((1.0 - f) * eb + f * es)

    ds_dc = s0 * f * es * (-2.0 * bvals * d * c)
    j = np.empty(s.shape + (N_PARAMS,))
    j[:, :, 0] = s0 * (es - eb) * (f * (1.0 - f))
    j[:, :, 1] = -s0 * d * bvals * ((1.0 - f) * eb + f * c**2 * es)
    j[:, :, 2] = ds_dc * (dmu_dth @ dirs.T)
    j[:, :, 3] = ds_dc * (dmu_dph @ dirs.T)
    j[:, :, 4] = s
    return s, j


def _lm_minimize(theta0, signals, bvals, dirs, max_iter, tol, trace=None):
    """Damped Gauss-Newton on a (k, 5) batch against (k, n) targets.

    Returns (theta, cost, iterations, converged). Accepted steps never
    increase the cost; damping shrinks by DAMPING_DOWN on success and grows
    by DAMPING_UP on rejection.
    """
    theta = np.clip(np.array(theta0, dtype=np.float64), _THETA_LO, _THETA_HI)
    k = theta.shape[0]
    s, j = model_and_jacobian(theta, bvals, dirs)
    cost = ((s - signals) ** 2).sum(axis=1)
    if trace is not None:
        trace.append(cost.copy())

    lam = np.full(k, DAMPING_INIT)
    converged = np.zeros(k, dtype=bool)
    active = np.ones(k, dtype=bool)
    iters = np.zeros(k, dtype=np.int64)
    didx = np.arange(N_PARAMS)

    for _ in range(max_iter):
        if not np.any(active):
            break
        rows = np.flatnonzero(active)
        s, j = model_and_jacobian(theta[rows], bvals, dirs)
        r = s - signals[rows]
        jtj = np.einsum("kni,knj->kij", j, j, optimize=True)
        g = np.einsum("kni,kn->ki", j, r, optimize=True)
        # Fletcher scaling: damp each direction relative to its own
        # curvature, with a floor so flat directions stay solvable
        diag = jtj[:, didx, didx]
        dscale = np.maximum(diag, 1e-12 * diag.max(axis=1, keepdims=True))
        m = jtj.copy()
        m[:, didx, didx] += lam[rows, None] * dscale
        delta = np.linalg.solve(m, g[..., None])[..., 0]
        trial = np.clip(theta[rows] - delta, _THETA_LO, _THETA_HI)

        s_trial, _ = model_and_jacobian(trial, bvals, dirs)
        cost_trial = ((s_trial - signals[rows]) ** 2).sum(axis=1)
        ok = np.isfinite(cost_trial) & (cost_trial <= cost[rows])

        acc = rows[ok]
        rel = (cost[acc] - cost_trial[ok]) / np.maximum(cost[acc], 1e-300)
        theta[acc] = trial[ok]
        cost[acc] = cost_trial[ok]
        lam[acc] = np.maximum(lam[acc] * DAMPING_DOWN, 1e-12)
        done = acc[rel < tol]
        converged[done] = True
        active[done] = False

        rej = rows[~ok]
        lam[rej] = lam[rej] * DAMPING_UP
        stuck = rej[lam[rej] > DAMPING_STUCK]
        active[stuck] = False

        iters[rows] += 1
        if trace is not None:
            trace.append(cost.copy())

    return theta, cost, iters, converged


def _restart_perturbations(seed, voxel_key, n_restarts):
    ss = np.random.SeedSequence(entropy=(_SEED_TAG, int(seed), int(voxel_key)))
    rng = np.random.default_rng(ss)
    return rng.standard_normal((n_restarts, N_PARAMS)) * _PERTURB_SCALE


def _fit_batch(signals, bvals, dirs, init_thetas, seed, voxel_keys,
               restarts, max_iter, tol, trace=None):
    """Multi-start fit of a (k, n) voxel block. Returns per-voxel arrays
    (theta, cost, iterations, converged)."""
    k = signals.shape[0]
    n_starts = 1 + restarts
    starts = np.repeat(init_thetas, n_starts, axis=0)
    for i, key in enumerate(voxel_keys):
        pert = _restart_perturbations(seed, key, restarts)
        starts[i * n_starts + 1 : (i + 1) * n_starts] += pert

    targets = np.repeat(signals, n_starts, axis=0)
    theta, cost, iters, conv = _lm_minimize(
        starts, targets, bvals, dirs, max_iter, tol, trace=trace
    )

    cost = cost.reshape(k, n_starts)
    best = np.argmin(cost, axis=1)  # ties break to the lowest start index
    pick = np.arange(k) * n_starts + best
    return (
        theta[pick],
        cost[np.arange(k), best],
        iters.reshape(k, n_starts)[np.arange(k), best],
        conv.reshape(k, n_starts)[np.arange(k), best],
    )


def fit_ballstick_voxel(signals, scheme: GradientScheme, init: BallStick | None = None,
                        *, seed: int = 0, voxel_key: int = 0,
                        restarts: int = N_RESTARTS, max_iter: int = MAX_ITER,
                        tol: float = COST_TOL,
                        return_trace: bool = False) -> BallStickFitResult:
    """Fit the Ball-and-Stick model to one voxel.

    Parameters
    ----------
    signals : (n,) array
    scheme : GradientScheme
    init : BallStick, optional
        Starting point; None runs an internal DTI pre-fit.
    seed, voxel_key : int
        Together they seed the restart perturbations, making the fit
        reproducible and schedule-independent.

    Raises
    ------
    AllNonPositive, DegenerateDesign, ShapeMismatch
    """
    signals = np.asarray(signals, dtype=np.float64).reshape(-1)
    if signals.shape[0] != scheme.n:
        raise ShapeMismatch(f"{signals.shape[0]} signals vs {scheme.n} measurements")
    design_matrix(scheme)  # validates the scheme
    if not np.any(signals > 0):
        raise AllNonPositive("every signal in the voxel is <= 0")
    if init is None:
        from .dti import fit_dti_voxel

        init = init_from_dti(fit_dti_voxel(signals, scheme).tensor)

    trace = [] if return_trace else None
    theta, cost, iters, conv = _fit_batch(
        signals[None], scheme.bvals, scheme.dirs,
        theta_from_params(init)[None], seed, [voxel_key],
        restarts, max_iter, tol, trace=trace,
    )
    return BallStickFitResult(
        params=params_from_theta(theta[0]),
        residual_rms=float(np.sqrt(cost[0] / scheme.n)),
        iterations=int(iters[0]),
        converged=bool(conv[0]),
        restarts_used=restarts,
        cost_trace=trace,
    )


@dataclass
class BallStickVolumeFit:
    """Per-voxel Ball-and-Stick fit over a masked grid; NaN marks absent."""

    f_stick: np.ndarray
    d: np.ndarray
    mu: np.ndarray  # (x, y, z, 3)
    s0: np.ndarray
    residual_rms: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    flags: np.ndarray
    restarts_used: int

    def metric_volumes(self) -> dict[str, np.ndarray]:
        return {"ID": self.d, "FWW": 1.0 - self.f_stick}


def fit_ballstick_volume(dwi, scheme: GradientScheme, mask=None,
                         dti_field: DtiVolumeFit | None = None,
                         threads: int = 1, seed: int = 0,
                         restarts: int = N_RESTARTS, max_iter: int = MAX_ITER,
                         tol: float = COST_TOL) -> BallStickVolumeFit:
    """Fit every masked voxel, initializing from a co-indexed DTI fit.

    ``dti_field`` may be a previous :func:`fit_dti_volume` result; None
    runs the pre-fit internally. Restart seeds derive from each voxel's
    flat grid index, so the output is identical for any ``threads``.
    """
    data = dwi.data if isinstance(dwi, DwiVolume) else np.asarray(dwi)
    if data.ndim != 4:
        raise ShapeMismatch(f"expected 4-D data, got {data.ndim}-D")
    if data.shape[3] != scheme.n:
        raise ShapeMismatch(f"{data.shape[3]} volumes vs {scheme.n} measurements")
    spatial = data.shape[:3]
    if mask is None:
        mask = np.ones(spatial, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != spatial:
        raise ShapeMismatch(f"mask shape {mask.shape} != data grid {spatial}")
    mask = mask.astype(bool)

    if dti_field is None:
        dti_field = fit_dti_volume(data, scheme, mask, threads=threads)
    if dti_field.s0.shape != spatial:
        raise ShapeMismatch("DTI field grid does not match the data grid")

    sig = np.ascontiguousarray(data[mask], dtype=np.float64)
    k = sig.shape[0]
    valid = np.any(sig > 0, axis=1)
    voxel_keys = np.flatnonzero(mask.ravel())

    init_thetas = np.tile(theta_from_params(BallStick(0.5, 1e-3)), (k, 1))
    tensor_rows = dti_field.tensor[mask]
    s0_rows = dti_field.s0[mask]
    for i in np.flatnonzero(valid):
        init = init_from_dti(Tensor(d6=tensor_rows[i], s0=s0_rows[i]))
        init_thetas[i] = theta_from_params(init)

    theta = np.full((k, N_PARAMS), np.nan)
    cost = np.full(k, np.nan)
    iters = np.zeros(k, dtype=np.int64)
    conv = np.zeros(k, dtype=bool)

    def worker(start, stop):
        rows = np.flatnonzero(valid[start:stop]) + start
        if rows.size == 0:
            return
        th, co, it, cv = _fit_batch(
            sig[rows], scheme.bvals, scheme.dirs, init_thetas[rows],
            seed, voxel_keys[rows], restarts, max_iter, tol,
        )
        theta[rows] = th
        cost[rows] = co
        iters[rows] = it
        conv[rows] = cv

    _run_chunked(k, worker, threads)

    # unpack internal coordinates into the reported parameter volumes
    a, ld, th_ang, ph, ls0 = (theta[:, i] for i in range(N_PARAMS))
    f = 1.0 / (1.0 + np.exp(-a))
    d = np.exp(ld)
    s0 = np.exp(ls0)
    mu = np.stack([
        np.sin(th_ang) * np.cos(ph),
        np.sin(th_ang) * np.sin(ph),
        np.cos(th_ang),
    ], axis=1)
    with np.errstate(invalid="ignore"):
        mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    for i in range(k):
        if valid[i]:
            mu[i] = canonical_direction(mu[i])

    def scatter(values, fill=np.nan, dtype=np.float64):
        vol = np.full(spatial + values.shape[1:], fill, dtype=dtype)
        vol[mask] = values
        return vol

    def nanify(arr):
        return np.where(valid, arr, np.nan)

    return BallStickVolumeFit(
        f_stick=scatter(nanify(f)),
        d=scatter(nanify(d)),
        mu=scatter(np.where(valid[:, None], mu, np.nan)),
        s0=scatter(nanify(s0)),
        residual_rms=scatter(np.sqrt(nanify(cost) / scheme.n)),
        iterations=scatter(iters, fill=0, dtype=np.int16),
        converged=scatter(conv, fill=False, dtype=bool),
        flags=scatter(np.where(valid, 0, FLAG_NO_SIGNAL), fill=0, dtype=np.uint8),
        restarts_used=restarts,
    )
