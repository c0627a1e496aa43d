"""Gradient schemes and FSL-style bval/bvec text tables.

A scheme holds one b-value (s/mm^2) and one unit direction per measurement.
Directions of b=0 entries are arbitrary and conventionally zero. The default
acquisition is six b=0 measurements plus thirty non-collinear directions at
b=900 s/mm^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, ParseError, ZeroDirection

DEFAULT_B = 900.0
_UNIT_TOL = 1e-6


@dataclass
class GradientScheme:
    """Per-measurement b-values and unit directions."""

    bvals: np.ndarray
    dirs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.dirs = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        if self.dirs.shape[0] != self.bvals.shape[0]:
            raise CountMismatch(
                f"{self.bvals.shape[0]} b-values vs {self.dirs.shape[0]} directions"
            )
        if np.any(self.bvals < 0):
            raise ValueError("negative b-value")
        dw = self.bvals > 0
        norms = np.linalg.norm(self.dirs[dw], axis=1)
        if np.any(norms < 1e-12):
            raise ZeroDirection("zero direction vector paired with b > 0")
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise ValueError(
                "diffusion-weighted directions must be unit vectors "
                f"(worst |norm - 1| = {np.max(np.abs(norms - 1.0)):.3g})"
            )

    @property
    def n(self) -> int:
        return int(self.bvals.shape[0])

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals == 0

    @property
    def dw_mask(self) -> np.ndarray:
        return self.bvals > 0


def read_gradient_table(bval_path, bvec_path) -> GradientScheme:
    """Parse an FSL bval/bvec pair.

    The bval file is one whitespace-separated row of n numbers; the bvec
    file is three rows of n numbers. Directions with b > 0 are renormalized
    to unit length; zero vectors are only allowed where b = 0.

    Raises
    ------
    CountMismatch, ZeroDirection, ParseError
    """
    bvals = _parse_rows(bval_path, expect_rows=1)[0]
    rows = _parse_rows(bvec_path, expect_rows=3)
    n = len(bvals)
    if any(len(r) != n for r in rows):
        raise CountMismatch(
            f"bval declares {n} measurements, bvec rows have "
            f"{[len(r) for r in rows]}"
        )
    dirs = np.array(rows, dtype=np.float64).T
    bvals = np.array(bvals, dtype=np.float64)

    norms = np.linalg.norm(dirs, axis=1)
    dw = bvals > 0
    if np.any(dw & (norms == 0)):
        idx = int(np.argmax(dw & (norms == 0)))
        raise ZeroDirection(f"measurement {idx}: zero vector with b = {bvals[idx]:g}")
    nonzero = norms > 0
    dirs[nonzero] = dirs[nonzero] / norms[nonzero, None]
    dirs[~nonzero] = 0.0
    return GradientScheme(bvals=bvals, dirs=dirs)


def write_gradient_table(scheme: GradientScheme, bval_path, bvec_path) -> None:
    """Emit an FSL bval/bvec pair that reads back identically."""
    with open(bval_path, "w") as fh:
        fh.write(" ".join(f"{b:.17g}" for b in scheme.bvals) + "\n")
    with open(bvec_path, "w") as fh:
        for axis in range(3):
            fh.write(" ".join(f"{v:.17g}" for v in scheme.dirs[:, axis]) + "\n")


def default_scheme(n_dw: int = 30, b: float = DEFAULT_B, n_b0: int = 6) -> GradientScheme:
    """The default protocol: ``n_b0`` b=0 entries then ``n_dw`` DW directions.

    Directions are spread over the hemisphere with a golden-angle spiral,
    which guarantees a non-collinear, well-conditioned design.
    """
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dw, float(b))])
    dirs = np.vstack([np.zeros((n_b0, 3)), _hemisphere_spiral(n_dw)])
    return GradientScheme(bvals=bvals, dirs=dirs)


def _hemisphere_spiral(n: int) -> np.ndarray:
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    k = np.arange(n)
    # z in (0, 1]: strictly upper hemisphere keeps all directions non-collinear
    z = (k + 0.5) / n
    r = np.sqrt(1.0 - z**2)
    phi = 2.0 * np.pi * k / golden
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _parse_rows(path, expect_rows: int) -> list[list[float]]:
    with open(path) as fh:
        lines = [ln for ln in (ln.strip() for ln in fh) if ln]
    if len(lines) != expect_rows:
        raise ParseError(f"{path}: expected {expect_rows} row(s), found {len(lines)}")
    rows = []
    for ln in lines:
        try:
            rows.append([float(tok) for tok in ln.split()])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
    return rows
