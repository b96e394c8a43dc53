"""Counter-based random streams.

Every consumer of randomness (each environment instance, the particle
filter, the policy sampler, parameter init, ...) owns an `RngStream`
keyed by ``(global seed, stream id)``. Each draw call advances a step
counter and opens a fresh Philox block at ``counter = step``, so the
sequence a stream produces depends only on the key and on how many
draws were made before — never on what other streams did in between.
"""
from __future__ import annotations

import numpy as np

# Fixed stream ids for the package's randomness consumers. Environment
# instance i uses ENV_BASE + i; everything else has a single stream.
PARAM_INIT = 1
BELIEF_INIT = 2
FILTER_NOISE = 3
RESAMPLE = 4
POLICY = 5
ENV_BASE = 1000


class RngStream:
    """A reproducible stream of random draws.

    Same ``(seed, stream_id)`` and same call sequence give bit-identical
    results regardless of what any other stream was asked for.
    """

    def __init__(self, seed: int, stream_id: int):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._key = np.random.SeedSequence([self.seed, self.stream_id]).generate_state(
            2, np.uint64
        )
        self.step = 0

    def generator(self) -> np.random.Generator:
        """Open the Philox block for the current step and advance."""
        bits = np.random.Philox(counter=self.step, key=self._key)
        self.step += 1
        return np.random.Generator(bits)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator().standard_normal(shape, dtype=dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
        out = self.generator().uniform(low, high, shape)
        return out.astype(dtype, copy=False)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream_id}, step={self.step})"
