"""Per-trajectory random streams.

Trajectory ``i`` of a run with master seed ``s`` always draws from
``Generator(Philox(SeedSequence(s, spawn_key=(i,))))``.  Each simulation step
consumes a fixed number of uniforms (``slots``) from that stream, so a
trajectory's randomness does not depend on how trajectories are batched or
which worker runs them.
"""
from __future__ import annotations

import numpy as np


def trajectory_stream(master_seed: int, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(seq))


class UniformBlocks:
    """Uniform draws for a batch of trajectories, refilled in step chunks.

    ``draw(k)`` returns the ``(B, slots)`` uniforms for step ``k``; steps must
    be requested in increasing order.
    """

    def __init__(self, master_seed: int, indices, slots: int, chunk: int = 256):
        self.streams = [trajectory_stream(master_seed, i) for i in indices]
        self.slots = slots
        self.chunk = chunk
        self._start = 0
        self._buf = np.empty((len(self.streams), 0, slots))

    def draw(self, step: int) -> np.ndarray:
        offset = step - self._start
        if offset >= self._buf.shape[1]:
            self._start = step
            offset = 0
            self._buf = np.stack([g.random((self.chunk, self.slots)) for g in self.streams]) if self.streams else (
                np.empty((0, self.chunk, self.slots))
            )
        return self._buf[:, offset, :]
