"""Named, splittable seeds.

Every random stream in the package is derived from a master seed plus a
path of names / indices, so per-image and per-cell streams are identical
no matter how work is scheduled.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading

import numpy as np
import torch


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(master: int, *path) -> int:
    """63-bit seed for the stream named by ``path`` under ``master``."""
    ss = np.random.SeedSequence(int(master) & ((1 << 64) - 1), spawn_key=tuple(_word(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0]) >> 1


def numpy_rng(master: int, *path) -> np.random.Generator:
    """Counter-based (Philox) generator for ``path``."""
    return np.random.Generator(np.random.Philox(derive_seed(master, *path)))


def torch_gen(master: int, *path) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(master, *path))


def randn_like_seeded(ref: torch.Tensor, master: int, *path) -> torch.Tensor:
    return torch.randn(ref.shape, generator=torch_gen(master, *path), dtype=ref.dtype)


_INIT_LOCK = threading.RLock()


@contextlib.contextmanager
def seeded_init(seed: int):
    """Seed the global torch RNG for module construction, then restore it.

    Serialised with a lock: worker threads building modules concurrently
    would otherwise draw from each other's streams.
    """
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
