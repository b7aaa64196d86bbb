"""Class labels. The index order is global: report columns and logits follow it."""
from __future__ import annotations

from enum import IntEnum

import numpy as np


class Family(IntEnum):
    REAL = 0
    GAN = 1
    DM = 2

    @classmethod
    def parse(cls, value: "str | int | Family") -> "Family":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown family {value!r}") from None
        return cls(int(value))


NUM_CLASSES = len(Family)


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out
