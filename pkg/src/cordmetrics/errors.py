"""Exception hierarchy for cordmetrics.

Every error raised by the library derives from :class:`CordMetricsError`,
so callers (and the CLI) can catch one base class.
"""


class CordMetricsError(Exception):
    """Base class for all cordmetrics errors."""


# --- NIfTI I/O ---

class BadMagic(CordMetricsError):
    """File is not a single-file NIfTI-1 (bad magic or corrupt header)."""


class UnsupportedDatatype(CordMetricsError):
    """NIfTI datatype code outside the supported set."""


class TruncatedData(CordMetricsError):
    """File shorter than the extent declared in its header."""


class BigEndian(CordMetricsError):
    """Big-endian NIfTI files are not supported."""


class InvalidHeader(CordMetricsError):
    """Header fields violate the format invariants (e.g. zero extent)."""


class SizeMismatch(CordMetricsError):
    """Data length does not match the product of the header extents."""


# --- gradient tables ---

class CountMismatch(CordMetricsError):
    """bval and bvec files declare different measurement counts."""


class ZeroDirection(CordMetricsError):
    """Zero gradient vector paired with a nonzero b-value."""


class ParseError(CordMetricsError):
    """Malformed text input (gradient table or CSV)."""


# --- metric tables ---

class DuplicateKey(CordMetricsError):
    """Two rows share the (subject, session, level, metric) key."""


class UnknownLevel(CordMetricsError):
    """Level outside C1..C7, C1C7, C3C5."""


class UnknownMetric(CordMetricsError):
    """Metric outside FA, MD, AD, RD, ID, FWW."""


class InvalidValue(CordMetricsError):
    """Metric value violates its range (FA/FWW in [0,1], diffusivities >= 0)."""


# --- fitting ---

class DegenerateDesign(CordMetricsError):
    """Gradient scheme cannot support the fit (rank-deficient design)."""


class AllNonPositive(CordMetricsError):
    """Every signal in the voxel is <= 0; nothing to fit."""


class ShapeMismatch(CordMetricsError):
    """Volume shapes disagree (e.g. mask vs data grid)."""


# --- aggregation ---

class InsufficientWeight(CordMetricsError):
    """Effective weight of a level below the reporting threshold."""


class LevelAbsent(CordMetricsError):
    """Requested level does not occur in the atlas."""


class MissingLevel(CordMetricsError):
    """A constituent level of a pooled range is missing from the table."""


class TooFewSubjects(CordMetricsError):
    """Cross-subject statistics need at least two subjects."""


# --- agreement analysis ---

class TooFewPairs(CordMetricsError):
    """Bland-Altman needs at least three scan/rescan pairs."""


class SessionMismatch(CordMetricsError):
    """A subject/metric present in one session table but not the other."""


# --- phantom ---

class InvalidGeometry(CordMetricsError):
    """Phantom geometry is inconsistent (radii, grid, or slab layout)."""
