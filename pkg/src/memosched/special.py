"""Digamma and trigamma for positive arguments, on top of ``scipy.special``.

The wrappers add the domain check (non-positive and NaN arguments raise
rather than returning inf/nan) and return a plain float for scalar input.
"""
from __future__ import annotations

import numpy as np
from scipy import special as _sp


def _prepare(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("digamma/trigamma need strictly positive arguments")
    return x


def _finish(out):
    return float(out) if np.ndim(out) == 0 else out


def digamma(x):
    return _finish(_sp.digamma(_prepare(x)))


def trigamma(x):
    return _finish(_sp.polygamma(1, _prepare(x)))
