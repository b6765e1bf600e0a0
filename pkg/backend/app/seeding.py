"""seeding.py

All randomness flows from one master seed. A derived seed is the first four
bytes of sha256("<master>:<key1>:<key2>:...") so any (iteration, fold,
purpose) cell can be reproduced in isolation.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, *keys: str | int) -> int:
    text = ":".join([str(master_seed), *(str(k) for k in keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def derive_rng(master_seed: int, *keys: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *keys))
