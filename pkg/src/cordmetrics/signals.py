"""Forward diffusion signal models and Rician noise.

Two single-shell models: the diffusion tensor (mono-exponential in the
quadratic form g'Dg) and Ball-and-Stick, an isotropic plus a perfectly
anisotropic compartment sharing one diffusivity d. The stick diffusivity d
is the intrinsic diffusivity (ID) metric; the ball weight 1 - f_stick is
the free water weight (FWW).

These are the oracles every fitter in the package is verified against.
All functions are pure; noise takes an explicit generator so callers own
determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# canonical order of the six unique tensor entries
TENSOR_COMPONENTS = ("Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz")


@dataclass
class Tensor:
    """Symmetric 3x3 diffusion tensor (mm^2/s) plus non-DW amplitude."""

    d6: np.ndarray
    s0: float = 1.0

    def __post_init__(self):
        self.d6 = np.asarray(self.d6, dtype=np.float64).reshape(6)
        self.s0 = float(self.s0)

    @property
    def matrix(self) -> np.ndarray:
        dxx, dxy, dxz, dyy, dyz, dzz = self.d6
        return np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])

    @classmethod
    def from_matrix(cls, m, s0: float = 1.0) -> "Tensor":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3) or not np.allclose(m, m.T, atol=0.0, rtol=0.0):
            raise ValueError("tensor matrix must be symmetric 3x3")
        return cls(
            d6=np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]]),
            s0=s0,
        )

    @classmethod
    def isotropic(cls, md: float, s0: float = 1.0) -> "Tensor":
        return cls(d6=np.array([md, 0.0, 0.0, md, 0.0, md]), s0=s0)

    @classmethod
    def cylinder(cls, fa: float, md: float, axis=(0.0, 0.0, 1.0), s0: float = 1.0) -> "Tensor":
        """Axially symmetric tensor with the requested FA and MD.

        Solving FA = sqrt(3) k / sqrt(1 + 2 k^2) for the eigenvalue spread
        k gives lambda_parallel = MD (1 + 2k), lambda_perp = MD (1 - k).
        """
        if not (0.0 <= fa < 1.0):
            raise ValueError(f"cylinder FA must be in [0, 1), got {fa}")
        if md <= 0:
            raise ValueError(f"cylinder MD must be > 0, got {md}")
        k = fa / np.sqrt(3.0 - 2.0 * fa**2)
        lam_par = md * (1.0 + 2.0 * k)
        lam_perp = md * (1.0 - k)
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        m = lam_perp * np.eye(3) + (lam_par - lam_perp) * np.outer(axis, axis)
        return cls.from_matrix(m, s0=s0)


@dataclass
class BallStick:
    """Ball-and-Stick parameters: shared diffusivity, stick fraction, axis."""

    f_stick: float
    d: float
    mu: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    s0: float = 1.0

    def __post_init__(self):
        self.f_stick = float(self.f_stick)
        self.d = float(self.d)
        self.s0 = float(self.s0)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        if not (0.0 <= self.f_stick <= 1.0):
            raise ValueError(f"f_stick = {self.f_stick} outside [0, 1]")
        if self.d < 0:
            raise ValueError(f"d = {self.d} negative")
        norm = np.linalg.norm(self.mu)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"|mu| = {norm} is not 1")


def dti_signal(tensor: Tensor, b, g) -> np.ndarray | float:
    """Mono-exponential tensor signal s0 * exp(-b g'Dg).

    Parameters
    ----------
    tensor : Tensor
    b : float or (n,) array
        b-values in s/mm^2.
    g : (3,) or (n, 3) array
        Unit directions (arbitrary where b = 0).
    """
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    scalar = g.ndim == 1
    g2 = np.atleast_2d(g)
    dxx, dxy, dxz, dyy, dyz, dzz = tensor.d6
    gx, gy, gz = g2[:, 0], g2[:, 1], g2[:, 2]
    quad = (
        dxx * gx**2 + dyy * gy**2 + dzz * gz**2
        + 2.0 * (dxy * gx * gy + dxz * gx * gz + dyz * gy * gz)
    )
    out = tensor.s0 * np.exp(-b * quad)
    return float(out[0]) if scalar and out.ndim else out


def ballstick_signal(model: BallStick, b, g) -> np.ndarray | float:
    """Ball-and-Stick signal.

    s0 * [ (1 - f) exp(-b d)  +  f exp(-b d (g.mu)^2) ]

    Invariant under mu -> -mu.
    """
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    scalar = g.ndim == 1
    g2 = np.atleast_2d(g)
    c = g2 @ model.mu
    f = model.f_stick
    out = model.s0 * (
        (1.0 - f) * np.exp(-b * model.d) + f * np.exp(-b * model.d * c**2)
    )
    return float(out[0]) if scalar and out.ndim else out


def signal_for_scheme(params, scheme) -> np.ndarray:
    """Evaluate either model over every measurement of a gradient scheme."""
    if isinstance(params, Tensor):
        return np.asarray(dti_signal(params, scheme.bvals, scheme.dirs))
    if isinstance(params, BallStick):
        return np.asarray(ballstick_signal(params, scheme.bvals, scheme.dirs))
    raise TypeError(f"unsupported model parameters: {type(params).__name__}")


def add_rician_noise(clean, sigma: float, rng: np.random.Generator):
    """Corrupt a magnitude signal with Rician noise of scale ``sigma``.

    Returns sqrt((clean + n1)^2 + n2^2) with n1, n2 independent N(0, sigma)
    draws from ``rng``; sigma = 0 returns the input unchanged. The output is
    always nonnegative.
    """
    if sigma < 0:
        raise ValueError(f"sigma = {sigma} negative")
    clean = np.asarray(clean, dtype=np.float64)
    if sigma == 0.0:
        return clean.copy()
    n1 = rng.normal(0.0, sigma, size=clean.shape)
    n2 = rng.normal(0.0, sigma, size=clean.shape)
    return np.sqrt((clean + n1) ** 2 + n2**2)
