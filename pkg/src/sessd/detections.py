from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Detections:
    """Boxes (N, 7) with raw confidence logits (N,) and optional direction logits (N, 2)."""

    boxes: np.ndarray
    logits: np.ndarray
    dir_logits: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.logits):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.logits)} logits")
        if self.dir_logits is not None:
            self.dir_logits = np.asarray(self.dir_logits, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.logits)

    @property
    def scores(self) -> np.ndarray:
        return sigmoid(self.logits)

    def subset(self, idx) -> "Detections":
        idx = np.asarray(idx, dtype=np.int64)
        d = None if self.dir_logits is None else self.dir_logits[idx]
        return Detections(self.boxes[idx], self.logits[idx], d)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 7)), np.zeros(0))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
