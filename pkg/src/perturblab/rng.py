"""Named, seed-derived random streams.

Every experiment draws all randomness from a single 64-bit seed.  The seed
is split into independent named streams (parameter init, batch shuffling,
perturbation draws, evaluation-time corruption, data generation) so that
two strategies trained from the same seed see identical data order and
identical initial parameters, and so evaluation corruption draws do not
depend on how much randomness training consumed.
"""

from __future__ import annotations

import numpy as np

_STREAM_IDS = {
    "init": 0,
    "shuffle": 1,
    "perturb": 2,
    "eval_corrupt": 3,
    "data": 4,
}


class RngStreams:
    """Factory for named ``np.random.Generator`` streams derived from one seed.

    ``stream(name)`` always returns a generator in the same initial state,
    so the caller owns its consumption.  ``substream(name, *key)`` derives a
    fresh counter-keyed generator, used where per-item independence matters
    (for example one stream per evaluated example, so parallel evaluation
    order cannot change results).
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = seed

    def stream(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._seq(name))

    def substream(self, name: str, *key: int) -> np.random.Generator:
        return np.random.default_rng(self._seq(name, *key))

    def child_seed(self, name: str, *key: int) -> int:
        """A derived integer seed, for APIs that take a seed rather than a stream."""
        return int(self._seq(name, *key).generate_state(1, dtype=np.uint64)[0])

    def _seq(self, name: str, *key: int) -> np.random.SeedSequence:
        if name not in _STREAM_IDS:
            raise ValueError(f"unknown rng stream {name!r}; expected one of {sorted(_STREAM_IDS)}")
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(_STREAM_IDS[name], *key))
