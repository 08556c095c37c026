"""Keyed random substreams.

Every consumer of randomness asks for a stream keyed by
(root seed, module name, index).  The stream is a counter-based Philox
generator seeded through numpy's SeedSequence, so a given key always
yields the same numbers no matter which thread asks first, or in what
order.  This is what makes sampling, bootstrap resampling and grid search
order-independent.

Usage:
    streams = StreamFactory(seed=7)
    rng = streams.stream("metrics.bootstrap", replicate)
    noise = streams.row_normals("diffusion.sample", 0, n, (T, dim))
"""

import zlib
import numpy as np

# Samples are generated in fixed-size blocks for batching.  Randomness is
# keyed by sample index, not by block, so block size never changes output.
SAMPLE_BLOCK = 1024

def module_key(name: str) -> int:
    """Stable 32-bit integer for a module name."""
    return zlib.crc32(name.encode("utf-8"))

class StreamFactory:
    """Derives independent generators from a root seed."""

    def __init__(self, seed: int):
        assert seed >= 0, "seed must be non-negative"
        self.seed = int(seed)

    def stream(self, module: str, index: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed,
                                     spawn_key=(module_key(module), int(index)))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, module: str, index: int = 0) -> "StreamFactory":
        """A factory whose root seed is itself drawn from a keyed stream.
        Used to hand a whole sub-experiment (one grid point, one seed) its
        own independent family of streams."""
        rng = self.stream(module, index)
        return StreamFactory(int(rng.integers(0, 2**63 - 1)))

    def row_normals(self, module: str, start: int, stop: int, shape) -> np.ndarray:
        """Standard normals for rows start..stop-1.  Row i comes from its own
        Philox counter range under the module key, so it is identical
        whatever slice it is requested in.  Shape is (stop - start, *shape)."""
        shape = tuple(int(d) for d in np.atleast_1d(shape))
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(module_key(module),))
        key = seq.generate_state(2, np.uint64)
        out = np.empty((stop - start,) + shape)
        for i in range(start, stop):
            g = np.random.Generator(np.random.Philox(counter=[0, 0, 0, i], key=key))
            out[i - start] = g.standard_normal(shape)
        return out

def blocks(n: int, block: int = SAMPLE_BLOCK):
    """Yield (block_index, start, stop) covering range(n)."""
    for b, start in enumerate(range(0, n, block)):
        yield b, start, min(start + block, n)
