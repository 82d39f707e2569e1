"""Synthetic patch-grounding task.

Each example is an H x W grid of noisy symbol prototypes; the target response
reads the grid out in row-major order and ends with EOS. Examples are
generated lazily from counter-keyed RNG streams so any (split, index) pair is
reproducible without storing anything.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "IGNORE_LABEL", "DatasetConfig", "SyntheticExample",
    "symbol_prototypes", "generate_example", "make_batches", "split_size",
]

IGNORE_LABEL = -100

_SPLIT_CODES = {"train": 0, "eval": 1}

# Stream tag for the prototype table so it never collides with example streams.
_PROTO_STREAM = 999_331


@dataclass(frozen=True)
class DatasetConfig:
    grid: tuple[int, int] = (4, 4)
    patch_dim: int = 16
    num_symbols: int = 32
    noise_std: float = 0.1
    prompt_ids: tuple[int, ...] = ()
    train_size: int = 1024
    eval_size: int = 32
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"grid must be two positive ints, got {self.grid}")
        if self.num_symbols < 2:
            raise ValueError("need at least two symbols")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be nonnegative")
        if not self.prompt_ids:
            first = self.num_symbols + 1
            object.__setattr__(self, "prompt_ids", tuple(range(first, first + 4)))
        else:
            object.__setattr__(self, "prompt_ids", tuple(int(p) for p in self.prompt_ids))
        if min(self.train_size, self.eval_size) < 1:
            raise ValueError("split sizes must be positive")

    @property
    def eos_id(self) -> int:
        return self.num_symbols

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def response_len(self) -> int:
        return self.num_patches + 1

    @property
    def min_vocab(self) -> int:
        """Smallest vocabulary covering every id this data emits."""
        return max(self.eos_id, *self.prompt_ids) + 1


@dataclass(frozen=True)
class SyntheticExample:
    """One grounding instance; labels cover the language segment only.

    labels = (len(prompt_ids) - 1) ignore sentinels followed by response_ids,
    aligning label t with the position whose input is language token t.
    """

    patch_grid: Tensor
    prompt_ids: tuple[int, ...]
    response_ids: tuple[int, ...]
    labels: tuple[int, ...]


@functools.lru_cache(maxsize=None)
def symbol_prototypes(config: DatasetConfig) -> np.ndarray:
    """Per-symbol patch prototypes, rejection-sampled to stay separable.

    Prototypes are standard normal vectors redrawn until every pairwise
    distance exceeds 4 * noise_std, so noisy patches almost never cross
    symbol boundaries.
    """
    rng = np.random.default_rng([config.base_seed, _PROTO_STREAM])
    threshold = 4.0 * config.noise_std
    protos = np.empty((config.num_symbols, config.patch_dim))
    count = 0
    attempts = 0
    while count < config.num_symbols:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError("prototype sampling failed to separate; lower noise_std")
        candidate = rng.standard_normal(config.patch_dim)
        if count:
            dists = np.linalg.norm(protos[:count] - candidate, axis=1)
            if (dists <= threshold).any():
                continue
        protos[count] = candidate
        count += 1
    protos.setflags(write=False)
    return protos


def split_size(config: DatasetConfig, split: str) -> int:
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}, expected train or eval")
    return config.train_size if split == "train" else config.eval_size


def generate_example(config: DatasetConfig, split: str, index: int) -> SyntheticExample:
    size = split_size(config, split)
    if not 0 <= index < size:
        raise IndexError(f"example index {index} out of range for {split} split of {size}")
    protos = symbol_prototypes(config)
    rng = np.random.default_rng([config.base_seed, _SPLIT_CODES[split], index])
    h, w = config.grid
    symbols = rng.integers(0, config.num_symbols, size=h * w)
    noise = rng.normal(0.0, config.noise_std, size=(h * w, config.patch_dim))
    patches = (protos[symbols] + noise).reshape(h, w, config.patch_dim)
    response = tuple(int(s) for s in symbols) + (config.eos_id,)
    labels = (IGNORE_LABEL,) * (len(config.prompt_ids) - 1) + response
    return SyntheticExample(
        patch_grid=Tensor(patches),
        prompt_ids=config.prompt_ids,
        response_ids=response,
        labels=labels,
    )


def make_batches(config: DatasetConfig, split: str, batch_size: int):
    """Yield examples in fixed index order, final partial batch included."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    size = split_size(config, split)
    batch = []
    for index in range(size):
        batch.append(generate_example(config, split, index))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch
