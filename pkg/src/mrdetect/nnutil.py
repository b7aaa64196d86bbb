"""Small torch helpers: seeding, deterministic chunked inference."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np
import torch

# Every inference batch is padded to this size so a sample's output bits do
# not depend on which other samples shared its batch.
INFER_CHUNK = 16


def configure_determinism(threads: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    if threads is not None:
        torch.set_num_threads(threads)


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under ``torch.manual_seed(seed)`` without leaking global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def run_chunked(fn: Callable[[torch.Tensor], torch.Tensor], x: np.ndarray, chunk: int = INFER_CHUNK) -> np.ndarray:
    """Apply ``fn`` to float32 batches of exactly ``chunk`` rows (zero padded)."""
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[0]
    outs = []
    with torch.no_grad():
        for start in range(0, n, chunk):
            part = x[start : start + chunk]
            k = part.shape[0]
            if k < chunk:
                pad = np.zeros((chunk - k,) + part.shape[1:], dtype=np.float32)
                part = np.concatenate([part, pad])
            out = fn(torch.from_numpy(np.ascontiguousarray(part)))
            outs.append(out[:k].cpu().numpy())
    if not outs:
        return np.zeros((0,), dtype=np.float32)
    return np.concatenate(outs)


def params_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def check_finite(value: float, what: str, exc: type[Exception]) -> None:
    if not np.isfinite(value):
        raise exc(f"{what} became non-finite ({value})")
