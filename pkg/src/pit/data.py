"""Byte-level corpus windows."""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CorpusNotFound


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("pit") / "data" / "corpus.txt"))


def load_corpus(path: str | None = None) -> np.ndarray:
    p = Path(path) if path else bundled_corpus_path()
    if not p.is_file():
        raise CorpusNotFound(f"corpus not found: {p}")
    return np.frombuffer(p.read_bytes(), dtype=np.uint8)


class WindowSampler:
    """Non-overlapping windows of ``context + 1`` bytes, reshuffled every epoch."""

    def __init__(self, data: np.ndarray, context: int, batch_size: int, seed: int = 0):
        n = len(data) // (context + 1)
        if n < 1:
            raise ValueError(f"corpus of {len(data)} bytes is shorter than one window")
        self.windows = np.asarray(data[: n * (context + 1)], dtype=np.int64).reshape(n, context + 1)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self.epoch = 0

    def _take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._order.size == 0:
                self._order = self.rng.permutation(len(self.windows))
                self.epoch += 1
            take = self._order[:k]
            self._order = self._order[k:]
            out.append(take)
            k -= take.size
        return np.concatenate(out)

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.windows[self._take(self.batch_size)]
        return w[:, :-1], w[:, 1:]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            yield self.next_batch()
