"""Deterministic random sub-streams.

Every stream is derived from the user seed through ``numpy.random.SeedSequence``
with a four-component spawn key::

    (purpose, replicate, subject, component)

``purpose`` separates the study panels, the large-sample limit run and the
Fisher-information run; ``component`` separates the random effect, the
Brownian driver and the fractional driver of a single subject. Because each
subject owns its streams, the output does not depend on how subjects are
batched or which worker process generates them.
"""

from __future__ import annotations

import numpy as np

PANEL = 0
LIMITS = 1
FISHER = 2

EFFECT = 0
BROWNIAN = 1
FRACTIONAL = 2


def substream(seed: int, purpose: int, replicate: int, subject: int, component: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose, replicate, subject, component))
    return np.random.Generator(np.random.PCG64(ss))


def subject_normals(seed, purpose, replicate, subjects, component, size):
    """Stack ``size`` standard normals per subject, one row per subject index."""
    out = np.empty((len(subjects), size))
    for row, i in enumerate(subjects):
        out[row] = substream(seed, purpose, replicate, int(i), component).standard_normal(size)
    return out
