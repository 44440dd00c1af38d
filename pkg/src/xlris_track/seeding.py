"""Child-seed derivation. Every random stream is ``hash(master, stage, index)``
so results never depend on scheduling order."""

import hashlib

import numpy as np


def child_seed(master: int, stage: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(master)}|{stage}|{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(master: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, stage, index))
