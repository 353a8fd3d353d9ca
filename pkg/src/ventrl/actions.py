"""Clinician bins, the restricted action space and factored Q-values.

Bin indices are 0-based. A dimension may carry a trailing null bin that
marks a setting inactive in the current ventilation mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .nn import DimensionError
from .schema import PCV, VCV

log = logging.getLogger(__name__)

# The action count quoted alongside these bins, kept for reports; the
# product of the bin counts below is larger.
QUOTED_ACTION_COUNT = 26880

DEFAULT_BIN_TABLE = """\
# name   left-inclusive edges (last edge closes the final bin)   [null]
mode  0 1 2
rr    5 10 15 20 25 30 35 60
vt    3 4 5 6 7 8 9 10 11 12
dp    0 6 10 14 18 22 26 40  null
peep  0 4 8 12 16 20 50  null
fio2  21 40 60 80 100
"""

METHODS = ("bin_mode", "gaussian_at_mode", "bin_mean", "uniform")


@dataclass(frozen=True)
class BinDim:
    name: str
    edges: tuple
    has_null: bool = False

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if len(e) < 2 or np.any(np.diff(e) <= 0):
            raise ValueError(f"{self.name}: edges must be strictly increasing")

    @property
    def n_value_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def n_bins(self) -> int:
        return self.n_value_bins + int(self.has_null)

    @property
    def null_index(self) -> int | None:
        return self.n_value_bins if self.has_null else None

    def bounds(self, b: int) -> tuple[float, float]:
        return float(self.edges[b]), float(self.edges[b + 1])


@dataclass(frozen=True)
class BinSpec:
    dims: tuple

    @classmethod
    def default(cls) -> "BinSpec":
        return cls.from_text(DEFAULT_BIN_TABLE)

    @classmethod
    def from_text(cls, text: str) -> "BinSpec":
        dims = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].split()
            if not line:
                continue
            has_null = line[-1] == "null"
            edges = tuple(float(x) for x in (line[1:-1] if has_null else line[1:]))
            dims.append(BinDim(line[0], edges, has_null))
        return cls(tuple(dims))

    @classmethod
    def load(cls, path) -> "BinSpec":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        rows = []
        for d in self.dims:
            edges = " ".join(format(x, "g") for x in d.edges)
            rows.append(f"{d.name} {edges}" + (" null" if d.has_null else ""))
        return "\n".join(rows) + "\n"

    @property
    def names(self) -> tuple:
        return tuple(d.name for d in self.dims)

    @property
    def sizes(self) -> tuple:
        return tuple(d.n_bins for d in self.dims)

    @property
    def width(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)

    @property
    def cardinality(self) -> int:
        return int(np.prod(self.sizes, dtype=np.int64))

    def index(self, name: str) -> int:
        return self.names.index(name)


def discretize(actions, spec: BinSpec | None = None, mask_inactive: bool = False) -> np.ndarray:
    """Map raw settings (..., n_dims) to bin indices with left-inclusive lookup.

    The top edge of the last bin is inclusive. With ``mask_inactive`` a
    setting not used by the row's mode goes to its dimension's null bin
    (driving pressure under VCV, tidal volume under PCV), when that
    dimension has one.
    """
    spec = spec or BinSpec.default()
    a = np.asarray(actions, dtype=np.float64)
    if a.shape[-1] != len(spec.dims):
        raise DimensionError(f"expected {len(spec.dims)} action columns, got {a.shape[-1]}")
    out = np.empty(a.shape, dtype=np.int64)
    for j, d in enumerate(spec.dims):
        x = a[..., j]
        edges = np.asarray(d.edges)
        bad = (x < edges[0]) | (x > edges[-1]) | np.isnan(x)
        if bad.any():
            raise ValueError(f"{d.name}: value {x[bad].flat[0]!r} outside [{edges[0]:g}, {edges[-1]:g}]")
        out[..., j] = np.minimum(np.searchsorted(edges, x, side="right") - 1, d.n_value_bins - 1)
    if mask_inactive and "mode" in spec.names:
        mode = out[..., spec.index("mode")]
        for name, when in (("dp", VCV), ("vt", PCV)):
            if name in spec.names and spec.dims[spec.index(name)].has_null:
                j = spec.index(name)
                out[..., j] = np.where(mode == when, spec.dims[j].null_index, out[..., j])
    return out


def onehot(bins, spec: BinSpec) -> np.ndarray:
    bins = np.asarray(bins, dtype=np.int64)
    out = np.zeros(bins.shape[:-1] + (spec.width,), dtype=np.float32)
    cols = bins + spec.offsets
    np.put_along_axis(out, cols, 1.0, axis=-1)
    return out


def _hist_mode(values, lo, hi, resolution=20) -> float:
    width = (hi - lo) / resolution
    counts = np.bincount(np.minimum(((values - lo) / width).astype(int), resolution - 1),
                         minlength=resolution)
    k = int(np.argmax(counts))  # first maximum: lowest value wins ties
    return lo + (k + 0.5) * width


@dataclass
class RestrictedActionSpace:
    """Distinct bin combinations observed in a dataset, plus per-bin value statistics."""

    spec: BinSpec
    combos: np.ndarray        # (K, n_dims) int
    bin_mode: list            # per dim: array over bins (nan where unobserved)
    bin_mean: list
    dim_mean: np.ndarray      # fallback for null bins

    def __post_init__(self):
        self.onehot = onehot(self.combos, self.spec)
        self._lookup = {tuple(int(v) for v in row): i for i, row in enumerate(self.combos)}

    @classmethod
    def build(cls, actions, spec: BinSpec | None = None, mask_inactive: bool = False):
        """From raw settings (N, n_dims)."""
        spec = spec or BinSpec.default()
        a = np.asarray(actions, dtype=np.float64)
        if a.size == 0:
            raise ValueError("cannot build an action space from an empty dataset")
        bins = discretize(a, spec, mask_inactive)
        combos = np.unique(bins, axis=0)
        modes, means = [], []
        for j, d in enumerate(spec.dims):
            m = np.full(d.n_bins, np.nan)
            mu = np.full(d.n_bins, np.nan)
            for b in range(d.n_value_bins):
                vals = a[bins[:, j] == b, j]
                if len(vals):
                    lo, hi = d.bounds(b)
                    m[b] = _hist_mode(vals, lo, hi)
                    mu[b] = vals.mean()
            modes.append(m)
            means.append(mu)
        return cls(spec, combos, modes, means, a.mean(axis=0))

    @property
    def size(self) -> int:
        return len(self.combos)

    def index_of(self, bins) -> np.ndarray:
        """Row index in the space of each bin combination; -1 when absent."""
        bins = np.asarray(bins, dtype=np.int64).reshape(-1, len(self.spec.dims))
        return np.array([self._lookup.get(tuple(int(v) for v in row), -1) for row in bins])

    def contains(self, bins) -> np.ndarray:
        return self.index_of(bins) >= 0

    def to_csv(self) -> str:
        lines = [",".join(self.spec.names)]
        lines += [",".join(str(int(v)) for v in row) for row in self.combos]
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def summary(self) -> dict:
        return {"restricted": self.size, "full": self.spec.cardinality, "quoted_full": QUOTED_ACTION_COUNT,
                "width": self.spec.width}


def factored_q_values(per_bin_q, space) -> np.ndarray:
    """Sum of the selected bin values for every combination: ``per_bin_q @ onehot.T``."""
    q = np.asarray(per_bin_q)
    table = space.onehot if isinstance(space, RestrictedActionSpace) else np.asarray(space)
    if q.shape[-1] != table.shape[1]:
        raise DimensionError(f"per-bin width {q.shape[-1]} != one-hot width {table.shape[1]}")
    return q @ table.T.astype(q.dtype)


def factored_q_grad(grad_q, space) -> np.ndarray:
    """Back-propagate a gradient on combination values to per-bin values."""
    table = space.onehot if isinstance(space, RestrictedActionSpace) else np.asarray(space)
    return np.asarray(grad_q) @ table.astype(np.asarray(grad_q).dtype)


def reconstruct(bins, method: str, space: RestrictedActionSpace, rng=None) -> np.ndarray:
    """Turn bin indices (N, n_dims) back into raw settings.

    The mode dimension passes through. Null bins get the dimension's
    overall mean. Bins without statistics fall back to their midpoint.
    """
    if method not in METHODS:
        raise ValueError(f"unknown reconstruction method {method!r}")
    bins = np.asarray(bins, dtype=np.int64)
    squeeze = bins.ndim == 1
    bins = np.atleast_2d(bins)
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = space.spec
    out = np.empty(bins.shape, dtype=np.float64)
    for j, d in enumerate(spec.dims):
        b = bins[:, j]
        if d.name == "mode":
            out[:, j] = b
            continue
        lo = np.asarray(d.edges, dtype=float)[np.minimum(b, d.n_value_bins - 1)]
        hi = np.asarray(d.edges, dtype=float)[np.minimum(b, d.n_value_bins - 1) + 1]
        null = b == d.null_index if d.has_null else np.zeros(len(b), bool)
        stat = space.bin_mean[j] if method == "bin_mean" else space.bin_mode[j]
        centre = stat[b]
        missing = np.isnan(centre) & ~null
        if missing.any():
            log.warning("%s: %d values in bins without statistics; using midpoints",
                        d.name, int(missing.sum()))
            centre = np.where(missing, (lo + hi) / 2, centre)
        if method in ("bin_mode", "bin_mean"):
            vals = centre
        elif method == "uniform":
            vals = rng.uniform(lo, hi)
        else:
            sigma = (hi - lo) / 4
            vals = truncnorm.rvs((lo - centre) / sigma, (hi - centre) / sigma, loc=centre,
                                 scale=sigma, random_state=rng)
        # keep samples strictly inside left-inclusive bins
        top = b == d.n_value_bins - 1
        vals = np.where(~top & (vals >= hi), np.nextafter(hi, lo), vals)
        out[:, j] = np.where(null, space.dim_mean[j], vals)
    return out[0] if squeeze else out


def bin_names(spec: BinSpec) -> list:
    """Human-readable label for every one-hot column."""
    out = []
    for d in spec.dims:
        for b in range(d.n_value_bins):
            lo, hi = d.bounds(b)
            out.append(f"{d.name}[{lo:g},{hi:g})")
        if d.has_null:
            out.append(f"{d.name}[null]")
    return out

