"""Named random substreams derived from one root seed."""
import zlib

import numpy as np

STREAMS = ("dataset", "target", "init_s1", "init_s2", "init_g", "latents", "fd_directions",
           "head_growth", "eval", "attacks", "proxy", "degrade")


def subseed(root: int, name: str) -> int:
    seq = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def substream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(subseed(root, name))
