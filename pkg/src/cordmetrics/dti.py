"""Voxel-wise diffusion tensor fitting and the DTI metrics.

The estimator is ordinary least squares on log-signals followed by one
weighted refinement whose weights are the squared predicted signals. On
noiseless model data this recovers the generating tensor to roundoff.

The symmetric 3x3 eigensolver is a closed-form trigonometric solution with
cross-product eigenvectors, plus an iterative Jacobi fallback for spectra
too degenerate for the closed form to certify (checked by reconstruction).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AllNonPositive, DegenerateDesign, ShapeMismatch
from .gradients import GradientScheme
from .nifti import DwiVolume
from .signals import Tensor

# voxel flag bits
FLAG_CLAMPED_SIGNAL = 1
FLAG_NEGATIVE_EIGENVALUE = 2
FLAG_NO_SIGNAL = 4

# fixed batch size: keeps results identical for any thread count
_CHUNK = 4096

_EPS = 1e-12


@dataclass
class EigenSystem:
    """Sorted eigendecomposition of a symmetric 3x3 matrix.

    ``lambdas`` are descending; ``vectors[i]`` is the unit eigenvector of
    ``lambdas[i]`` (rows), pairwise orthogonal, each with its first nonzero
    component nonnegative.
    """

    lambdas: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors.T * self.lambdas) @ self.vectors


@dataclass
class DtiMetrics:
    fa: float
    md: float
    ad: float
    rd: float
    clamped: bool = False


class DtiVoxelFit(NamedTuple):
    tensor: Tensor
    clamped: bool


def design_matrix(scheme: GradientScheme) -> np.ndarray:
    """Log-signal design: columns (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz, ln s0).

    Raises
    ------
    DegenerateDesign
        If the scheme has no b=0 entry or cannot determine 7 parameters.
    """
    if not np.any(scheme.b0_mask):
        raise DegenerateDesign("scheme has no b = 0 measurement")
    if int(np.count_nonzero(scheme.dw_mask)) < 6:
        raise DegenerateDesign("scheme has fewer than 6 diffusion-weighted entries")
    b = scheme.bvals
    gx, gy, gz = scheme.dirs[:, 0], scheme.dirs[:, 1], scheme.dirs[:, 2]
    x = np.column_stack([
        -b * gx**2,
        -2.0 * b * gx * gy,
        -2.0 * b * gx * gz,
        -b * gy**2,
        -2.0 * b * gy * gz,
        -b * gz**2,
        np.ones_like(b),
    ])
    if np.linalg.matrix_rank(x) < 7:
        raise DegenerateDesign("design matrix rank < 7 (collinear directions)")
    return x


def _fit_dti_batch(signals: np.ndarray, x: np.ndarray, x_pinv: np.ndarray):
    """Fit a (k, n) block of voxels. Returns d6, s0, flags, valid."""
    k = signals.shape[0]
    flags = np.zeros(k, dtype=np.uint8)

    b0_cols = x[:, :6].sum(axis=1) == 0.0
    mean_b0 = signals[:, b0_cols].mean(axis=1)
    valid = np.any(signals > 0, axis=1)
    flags[~valid] |= FLAG_NO_SIGNAL

    floor = np.maximum(_EPS, 1e-6 * np.maximum(mean_b0, 0.0))
    clamped = signals <= 0
    flags[np.any(clamped, axis=1) & valid] |= FLAG_CLAMPED_SIGNAL
    s = np.maximum(signals, floor[:, None])
    y = np.log(s)

    beta = y @ x_pinv.T  # OLS, (k, 7)

    # one WLS refinement, weights = squared predicted signals
    log_pred = np.clip(beta @ x.T, -300.0, 300.0)
    w = np.exp(2.0 * log_pred)
    a = np.einsum("kn,ni,nj->kij", w, x, x, optimize=True)
    rhs = np.einsum("kn,ni->ki", w * y, x, optimize=True)
    beta = np.linalg.solve(a, rhs[..., None])[..., 0]

    d6 = beta[:, :6]
    s0 = np.exp(beta[:, 6])
    d6[~valid] = np.nan
    s0[~valid] = np.nan
    return d6, s0, flags, valid


def fit_dti_voxel(signals, scheme: GradientScheme) -> DtiVoxelFit:
    """Fit one voxel's tensor.

    Parameters
    ----------
    signals : (n,) array
        Measured intensities, same order as the scheme.
    scheme : GradientScheme

    Returns
    -------
    DtiVoxelFit
        Fitted tensor (raw, possibly indefinite) and whether any
        non-positive signal was clamped before the log.

    Raises
    ------
    AllNonPositive, DegenerateDesign, ShapeMismatch
    """
    signals = np.asarray(signals, dtype=np.float64).reshape(1, -1)
    if signals.shape[1] != scheme.n:
        raise ShapeMismatch(f"{signals.shape[1]} signals vs {scheme.n} measurements")
    x = design_matrix(scheme)
    d6, s0, flags, valid = _fit_dti_batch(signals, x, np.linalg.pinv(x))
    if not valid[0]:
        raise AllNonPositive("every signal in the voxel is <= 0")
    return DtiVoxelFit(
        tensor=Tensor(d6=d6[0], s0=float(s0[0])),
        clamped=bool(flags[0] & FLAG_CLAMPED_SIGNAL),
    )


# ---------------------------------------------------------------------------
# symmetric 3x3 eigendecomposition


def _trig_eigenvalues(a: np.ndarray):
    """Closed-form eigenvalues of a (k, 3, 3) symmetric batch, descending."""
    q = np.trace(a, axis1=1, axis2=2) / 3.0
    p1 = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
    dev = a[:, (0, 1, 2), (0, 1, 2)] - q[:, None]
    p2 = (dev**2).sum(axis=1) + 2.0 * p1
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)

    safe_p = np.where(p > 0, p, 1.0)
    b = (a - q[:, None, None] * np.eye(3)) / safe_p[:, None, None]
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0

    lam1 = q + 2.0 * p * np.cos(phi)
    lam3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam2 = 3.0 * q - lam1 - lam3
    lams = np.stack([lam1, lam2, lam3], axis=1)
    lams[p == 0] = q[p == 0, None]
    return lams


def _null_vector(m: np.ndarray):
    """Largest cross product of row pairs of (k, 3, 3): the null direction
    of a rank-2 matrix. Returns (vector, norm)."""
    c01 = np.cross(m[:, 0], m[:, 1])
    c02 = np.cross(m[:, 0], m[:, 2])
    c12 = np.cross(m[:, 1], m[:, 2])
    cand = np.stack([c01, c02, c12], axis=1)
    norms = np.linalg.norm(cand, axis=2)
    best = np.argmax(norms, axis=1)
    idx = np.arange(m.shape[0])
    return cand[idx, best], norms[idx, best]


def _complete_unit(v: np.ndarray) -> np.ndarray:
    """A unit vector orthogonal to each row of unit-vector batch v."""
    k = v.shape[0]
    smallest = np.argmin(np.abs(v), axis=1)
    h = np.zeros((k, 3))
    h[np.arange(k), smallest] = 1.0
    u = np.cross(v, h)
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip eigenvector rows so the first component with |x| > 1e-12 is >= 0."""
    v = vecs.reshape(-1, 3)
    big = np.abs(v) > 1e-12
    first = np.argmax(big, axis=1)
    has = np.any(big, axis=1)
    lead = v[np.arange(v.shape[0]), first]
    sign = np.where(has & (lead < 0), -1.0, 1.0)
    return (v * sign[:, None]).reshape(vecs.shape)


def _jacobi_eig3(a: np.ndarray):
    """Cyclic Jacobi sweeps for one symmetric 3x3 matrix."""
    b = a.astype(np.float64).copy()
    v = np.eye(3)
    scale = max(np.max(np.abs(b)), _EPS)
    for _ in range(60):
        off = abs(b[0, 1]) + abs(b[0, 2]) + abs(b[1, 2])
        if off < 1e-15 * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if b[p, q] == 0.0:
                continue
            theta = (b[q, q] - b[p, p]) / (2.0 * b[p, q])
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t**2 + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            b = rot.T @ b @ rot
            v = v @ rot
    lams = np.diag(b).copy()
    order = np.argsort(lams)[::-1]
    return lams[order], v[:, order].T


def _eig3_batch(a: np.ndarray):
    """Eigendecomposition of a (k, 3, 3) symmetric batch.

    Returns (lambdas (k, 3) descending, vectors (k, 3, 3) rows).
    """
    k = a.shape[0]
    lams = _trig_eigenvalues(a)
    scale = np.maximum(np.abs(lams).max(axis=1), _EPS)

    eye = np.eye(3)
    v1, n1 = _null_vector(a - lams[:, 0, None, None] * eye)
    v3, n3 = _null_vector(a - lams[:, 2, None, None] * eye)

    # anchor on the eigenvalue with the larger gap; its null direction is
    # the numerically reliable one
    gap1 = lams[:, 0] - lams[:, 1]
    gap3 = lams[:, 1] - lams[:, 2]
    anchor_is_1 = gap1 >= gap3

    tiny = 1e-14 * np.maximum(scale**2, _EPS)
    va = np.where(anchor_is_1[:, None], v1, v3)
    na = np.where(anchor_is_1, n1, n3)
    vo = np.where(anchor_is_1[:, None], v3, v1)
    no = np.where(anchor_is_1, n3, n1)

    usable_a = na > tiny
    va = np.where(usable_a[:, None], va, np.tile([1.0, 0.0, 0.0], (k, 1)))
    va = va / np.linalg.norm(va, axis=1, keepdims=True)

    # other axis: orthogonalize against the anchor, rebuild when collapsed
    vo = np.where((no > tiny)[:, None], vo, _complete_unit(va))
    vo = vo - (vo * va).sum(axis=1, keepdims=True) * va
    no2 = np.linalg.norm(vo, axis=1)
    vo = np.where((no2 > 1e-12)[:, None], vo, _complete_unit(va))
    vo = vo / np.linalg.norm(vo, axis=1, keepdims=True)

    vmid = np.cross(va, vo)
    vmid = vmid / np.linalg.norm(vmid, axis=1, keepdims=True)

    first = np.where(anchor_is_1[:, None], va, vo)
    last = np.where(anchor_is_1[:, None], vo, va)
    vecs = np.stack([first, vmid, last], axis=1)

    # certify by reconstruction; anything the closed form got wrong goes
    # through Jacobi
    recon = np.matmul(vecs.transpose(0, 2, 1) * lams[:, None, :], vecs)
    fro = np.linalg.norm(a.reshape(k, 9), axis=1)
    err = np.linalg.norm((recon - a).reshape(k, 9), axis=1)
    bad = ~np.isfinite(err) | (err > 1e-10 * np.maximum(fro, _EPS))

    for i in np.flatnonzero(bad):
        lams[i], vecs[i] = _jacobi_eig3(a[i])

    return lams, _canonical_signs(vecs)


def eig3_sym(t) -> EigenSystem:
    """Eigendecomposition of a Tensor or symmetric 3x3 array."""
    m = t.matrix if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeMismatch(f"expected 3x3 matrix, got {m.shape}")
    lams, vecs = _eig3_batch(m[None])
    return EigenSystem(lambdas=lams[0], vectors=vecs[0])


# ---------------------------------------------------------------------------
# metrics


def _metrics_from_lambdas(lams: np.ndarray):
    """FA/MD/AD/RD for a (k, 3) eigenvalue batch, clamping negatives."""
    lam1 = lams[:, 0]
    floor = _EPS * np.maximum(lam1, _EPS)
    clamped = np.any(lams < 0, axis=1)
    lams = np.where(lams < 0, floor[:, None], lams)

    l1, l2, l3 = lams[:, 0], lams[:, 1], lams[:, 2]
    md = (l1 + l2 + l3) / 3.0
    ad = l1
    rd = (l2 + l3) / 2.0
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1**2 + l2**2 + l3**2
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(0.5 * num / den)
    fa = np.where(den > 0, fa, 0.0)
    fa = np.clip(fa, 0.0, 1.0)
    return fa, md, ad, rd, clamped


def dti_metrics(e: EigenSystem) -> DtiMetrics:
    """The four DTI metrics of an eigensystem.

    FA = sqrt(1/2) sqrt((l1-l2)^2 + (l2-l3)^2 + (l3-l1)^2) / sqrt(l1^2+l2^2+l3^2)

    Negative eigenvalues are clamped to 1e-12 * max(l1, eps) before the
    metrics are computed and the result is flagged. The FA of an all-zero
    spectrum is 0.
    """
    fa, md, ad, rd, clamped = _metrics_from_lambdas(e.lambdas[None])
    return DtiMetrics(
        fa=float(fa[0]), md=float(md[0]), ad=float(ad[0]), rd=float(rd[0]),
        clamped=bool(clamped[0]),
    )


# ---------------------------------------------------------------------------
# whole-volume fitting


@dataclass
class DtiVolumeFit:
    """Per-voxel tensor fit over a masked grid; NaN marks absent voxels."""

    tensor: np.ndarray  # (x, y, z, 6)
    s0: np.ndarray
    fa: np.ndarray
    md: np.ndarray
    ad: np.ndarray
    rd: np.ndarray
    flags: np.ndarray  # uint8 bit field

    def metric_volumes(self) -> dict[str, np.ndarray]:
        return {"FA": self.fa, "MD": self.md, "AD": self.ad, "RD": self.rd}


def _d6_to_matrices(d6: np.ndarray) -> np.ndarray:
    mats = np.empty(d6.shape[:-1] + (3, 3))
    mats[..., 0, 0] = d6[..., 0]
    mats[..., 0, 1] = mats[..., 1, 0] = d6[..., 1]
    mats[..., 0, 2] = mats[..., 2, 0] = d6[..., 2]
    mats[..., 1, 1] = d6[..., 3]
    mats[..., 1, 2] = mats[..., 2, 1] = d6[..., 4]
    mats[..., 2, 2] = d6[..., 5]
    return mats


def _run_chunked(n_items: int, worker, threads: int):
    """Apply ``worker(start, stop)`` over fixed-size chunks, optionally in
    a thread pool. Chunk boundaries do not depend on the thread count, so
    results are identical for any ``threads``."""
    spans = [(s, min(s + _CHUNK, n_items)) for s in range(0, n_items, _CHUNK)]
    if threads <= 1 or len(spans) <= 1:
        for span in spans:
            worker(*span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda sp: worker(*sp), spans))


def fit_dti_volume(dwi, scheme: GradientScheme, mask=None, threads: int = 1) -> DtiVolumeFit:
    """Fit every masked voxel of a 4-D series.

    Parameters
    ----------
    dwi : DwiVolume or (x, y, z, n) array
    scheme : GradientScheme
    mask : (x, y, z) bool array or None
        None fits every voxel.
    threads : int
        Size of the voxel-parallel pool; the result is identical for any
        value.

    Voxels outside the mask hold NaN and flag 0; voxels whose signals are
    all non-positive hold NaN and the FLAG_NO_SIGNAL bit.
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

    x = design_matrix(scheme)
    x_pinv = np.linalg.pinv(x)

    sig = np.ascontiguousarray(data[mask], dtype=np.float64)
    k = sig.shape[0]
    d6 = np.empty((k, 6))
    s0 = np.empty(k)
    fa = np.empty(k)
    md = np.empty(k)
    ad = np.empty(k)
    rd = np.empty(k)
    flags = np.zeros(k, dtype=np.uint8)

    def worker(start, stop):
        bd6, bs0, bflags, bvalid = _fit_dti_batch(sig[start:stop], x, x_pinv)
        lams = np.full((stop - start, 3), np.nan)
        vecs = np.zeros((stop - start, 3, 3))
        if np.any(bvalid):
            lams[bvalid], vecs[bvalid] = _eig3_batch(_d6_to_matrices(bd6[bvalid]))
        bfa, bmd, bad_, brd, bclamped = _metrics_from_lambdas(lams)
        bflags[bclamped & bvalid] |= FLAG_NEGATIVE_EIGENVALUE
        d6[start:stop] = bd6
        s0[start:stop] = bs0
        fa[start:stop] = np.where(bvalid, bfa, np.nan)
        md[start:stop] = np.where(bvalid, bmd, np.nan)
        ad[start:stop] = np.where(bvalid, bad_, np.nan)
        rd[start:stop] = np.where(bvalid, brd, np.nan)
        flags[start:stop] = bflags

    _run_chunked(k, worker, threads)

    def scatter(values, fill=np.nan, dtype=np.float64):
        vol = np.full(spatial + values.shape[1:], fill, dtype=dtype)
        vol[mask] = values
        return vol

    return DtiVolumeFit(
        tensor=scatter(d6),
        s0=scatter(s0),
        fa=scatter(fa),
        md=scatter(md),
        ad=scatter(ad),
        rd=scatter(rd),
        flags=scatter(flags, fill=0, dtype=np.uint8),
    )
