"""Initial-condition sampling over a box-shaped input domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridTooLarge, InvalidDomain

DEFAULT_GRID_CAP = 1_000_000


@dataclass(frozen=True)
class InputDomain:
    names: tuple
    bounds: np.ndarray  # (d, 2) rows of [low, high]

    def __post_init__(self):
        b = np.array(self.bounds, dtype=float).reshape(-1, 2)
        if len(self.names) != len(b):
            raise InvalidDomain(f"{len(self.names)} names but {len(b)} bound pairs")
        if not np.all(np.isfinite(b)):
            raise InvalidDomain("domain bounds must be finite")
        bad = np.nonzero(b[:, 0] > b[:, 1])[0]
        if bad.size:
            raise InvalidDomain(f"low > high for {[self.names[i] for i in bad]}")
        b.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "bounds", b)

    @classmethod
    def from_mapping(cls, names, mapping):
        """Build from ``{name: [low, high] | value}``; a scalar means a fixed state."""
        missing = [n for n in names if n not in mapping]
        extra = [k for k in mapping if k not in names]
        if missing or extra:
            raise InvalidDomain(f"domain keys mismatch: missing={missing} unknown={extra}")
        rows = []
        for n in names:
            v = mapping[n]
            if np.ndim(v) == 0:
                rows.append([float(v), float(v)])
            elif len(v) == 2:
                rows.append([float(v[0]), float(v[1])])
            else:
                raise InvalidDomain(f"bounds for {n!r} must be a value or [low, high]")
        return cls(tuple(names), np.array(rows))

    def to_mapping(self):
        return {n: [float(lo), float(hi)] for n, (lo, hi) in zip(self.names, self.bounds)}

    @property
    def dim(self):
        return len(self.names)

    @property
    def low(self):
        return self.bounds[:, 0]

    @property
    def high(self):
        return self.bounds[:, 1]

    @property
    def fixed(self):
        return self.bounds[:, 0] == self.bounds[:, 1]


def sm9_reference_domain():
    """Initial-condition box used for the 9th-order machine experiment."""
    from .components import SM_STATE_NAMES

    return InputDomain.from_mapping(
        SM_STATE_NAMES,
        {
            "delta": [-2.0, 2.0],
            "omega": [-1.0, 1.0],
            "e_q_prime": [0.9, 1.1],
            "e_d_prime": 0.0,
            "e_fd": 1.08,
            "r_f": 1.0,
            "v_r": 1.105,
            "p_m": 0.7048,
            "p_sv": 0.7048,
        },
    )


def _check_n(n):
    if int(n) != n or n < 1:
        raise InvalidDomain(f"sample count must be a positive integer, got {n}")
    return int(n)


def _dimension_rng(seed, dim):
    # Counter-based stream per dimension: independent of call order and threads.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(dim,))))


def lhs_sample(domain, n, seed, midpoint=False):
    """Latin Hypercube sample of ``n`` points.

    Each non-fixed dimension is cut into ``n`` equal strata and receives
    exactly one point per stratum (uniform within it, or at its centre with
    ``midpoint=True``); the strata are paired across dimensions by
    independent random permutations.
    """
    n = _check_n(n)
    out = np.empty((n, domain.dim))
    for j, (lo, hi) in enumerate(domain.bounds):
        if lo == hi:
            out[:, j] = lo
            continue
        rng = _dimension_rng(seed, j)
        strata = rng.permutation(n)
        offset = np.full(n, 0.5) if midpoint else rng.random(n)
        width = hi - lo
        x = lo + (strata + offset) / n * width
        # Guard the stratum boundaries against rounding.
        slipped = np.floor((x - lo) / width * n) != strata
        if np.any(slipped):
            x[slipped] = lo + (strata[slipped] + 0.5) / n * width
        out[:, j] = np.clip(x, lo, hi)
    return out


def random_sample(domain, n, seed):
    """I.i.d. uniform samples inside the domain."""
    n = _check_n(n)
    out = np.empty((n, domain.dim))
    for j, (lo, hi) in enumerate(domain.bounds):
        if lo == hi:
            out[:, j] = lo
        else:
            out[:, j] = _dimension_rng(seed, j).uniform(lo, hi, size=n)
    return out


def grid_sample(domain, points_per_dim, cap=DEFAULT_GRID_CAP):
    """Cartesian grid over the non-fixed dimensions (endpoints included)."""
    free = np.nonzero(~domain.fixed)[0]
    counts = np.broadcast_to(np.asarray(points_per_dim), (len(free),)) if len(free) else np.array([], int)
    if np.any(counts < 1):
        raise InvalidDomain("points_per_dim must be >= 1 for every non-fixed dimension")
    total = int(np.prod(counts, dtype=object)) if len(free) else 1
    if total > cap:
        raise GridTooLarge(f"grid would have {total} points, cap is {cap}")
    axes = []
    for j, k in zip(free, counts):
        lo, hi = domain.bounds[j]
        axes.append(np.array([(lo + hi) / 2.0]) if k == 1 else np.linspace(lo, hi, int(k)))
    out = np.tile(domain.low, (total, 1))
    if len(free):
        mesh = np.meshgrid(*axes, indexing="ij")
        for j, m in zip(free, mesh):
            out[:, j] = m.ravel()
    return out


SAMPLERS = {"lhs": lhs_sample, "random": random_sample}


def sample(domain, n, seed, method="lhs"):
    try:
        return SAMPLERS[method](domain, n, seed)
    except KeyError:
        raise InvalidDomain(f"unknown sampling method {method!r}") from None
