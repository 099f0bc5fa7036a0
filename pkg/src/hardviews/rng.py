"""Named random substreams derived from one root seed.

Every source of randomness in a run (transforms, cutmix, kmeans, subset
sampling, ...) pulls from its own named generator so that enabling or
disabling one feature never perturbs the draws seen by another.  Stream
states are snapshot/restorable for checkpoint resume.
"""

from __future__ import annotations

import zlib

import numpy as np


class RngPool:
    """Lazily-created numpy Generators, one per stream name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            # crc32 keeps the (seed, name) -> entropy map stable across runs
            ss = np.random.SeedSequence(entropy=(self.seed, zlib.crc32(name.encode("utf-8"))))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[name] = gen
        return gen

    def state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in self._streams.items()}

    def restore(self, state: dict) -> None:
        for name, st in state.items():
            self.stream(name).bit_generator.state = st
