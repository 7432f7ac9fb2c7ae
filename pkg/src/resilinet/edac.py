"""Error detection and correction kernels applied to raw CONV/FC feature maps.

Both kernels take the physical feature map ``(N, P, ...)`` and return the
logical one ``(N, C, ...)``.  ``groups[k]`` lists the physical channels
that replicate logical channel ``k``.
"""

from __future__ import annotations

import numpy as np

ALL_CHANNELS = "all-channels"
DUPLICATED_ONLY = "duplicated-only"
SCOPES = (ALL_CHANNELS, DUPLICATED_ONLY)


def _bits(x: np.ndarray) -> np.ndarray:
    return x.view(np.uint32 if x.dtype == np.float32 else np.uint64)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _split_groups(groups):
    by_size: dict[int, tuple[list[int], list[list[int]]]] = {}
    for k, g in enumerate(groups):
        logical, phys = by_size.setdefault(len(g), ([], []))
        logical.append(k)
        phys.append(list(g))
    return {n: (np.asarray(l), np.asarray(p).T) for n, (l, p) in by_size.items()}


def _zero_nan(x: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(x), x.dtype.type(0), x)


def _inside(v, lo, up):
    # NaN bounds compare false, so a corrupted bound fails toward zeroing
    return (lo <= v) & (v <= up)


def edac_apply(
    raw: np.ndarray, groups, lower: np.ndarray, upper: np.ndarray, scope: str = ALL_CHANNELS
) -> np.ndarray:
    """Correct one feature map, elementwise.

    1. every NaN becomes 0;
    2. a duplicated pair (a, b) checked against [lower, upper]:
       both inside and bitwise equal -> a, both inside and different -> min,
       one inside -> that one, neither -> 0;
    3. a single channel outside its interval -> 0 when the scope is
       ``all-channels``, passed through under ``duplicated-only``.
    """
    x = _zero_nan(np.asarray(raw))
    zero = x.dtype.type(0)
    out = np.empty((x.shape[0], len(groups)) + x.shape[2:], dtype=x.dtype)
    lower = np.asarray(lower).astype(x.dtype, copy=False)
    upper = np.asarray(upper).astype(x.dtype, copy=False)
    with np.errstate(invalid="ignore"):
        for size, (logical, phys) in _split_groups(groups).items():
            lo = _channel_view(lower[logical], x.ndim)
            up = _channel_view(upper[logical], x.ndim)
            if size == 1:
                v = x[:, phys[0]]
                if scope == ALL_CHANNELS:
                    v = np.where(_inside(v, lo, up), v, zero)
                out[:, logical] = v
            elif size == 2:
                a, b = x[:, phys[0]], x[:, phys[1]]
                in_a, in_b = _inside(a, lo, up), _inside(b, lo, up)
                same = _bits(a) == _bits(b)
                both = np.where(same, a, np.minimum(a, b))
                out[:, logical] = np.where(in_a & in_b, both, np.where(in_a, a, np.where(in_b, b, zero)))
            else:
                raise ValueError(f"EDAC groups hold 1 or 2 replicas, got {size}")
    return out


def voter_apply(raw: np.ndarray, groups) -> np.ndarray:
    """Majority vote over replica groups; all-different -> minimum.

    NaNs are zeroed first, as in :func:`edac_apply`.  No intervals are used.
    """
    x = _zero_nan(np.asarray(raw))
    out = np.empty((x.shape[0], len(groups)) + x.shape[2:], dtype=x.dtype)
    for size, (logical, phys) in _split_groups(groups).items():
        reps = [x[:, phys[j]] for j in range(size)]
        if size == 1:
            out[:, logical] = reps[0]
            continue
        bits = [_bits(r) for r in reps]
        result = reps[0]
        for r in reps[1:]:
            result = np.minimum(result, r)
        # walk pairs from the last to the first so the earliest majority wins
        for j in range(size - 1, -1, -1):
            for m in range(size - 1, j, -1):
                result = np.where(bits[j] == bits[m], reps[j], result)
        out[:, logical] = result
    return out


def vote(values) -> float:
    """Scalar voter: the value seen at least twice, else the minimum."""
    vals = np.asarray(values, dtype=np.float32).reshape(1, -1)
    return float(voter_apply(vals, [list(range(vals.shape[1]))])[0, 0])
