"""Adam with bias correction, plus length-bucketed batch assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Moments are keyed by parameter name so optimizer state survives
    checkpoint round trips.
    """

    def __init__(self, params: dict[str, T.DiffValue], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, assert_bound: bool = False) -> None:
        """Apply one update in place; parameters without grads are skipped
        (their moments still decay toward zero via the zero-grad branch)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if assert_bound:
                limit = self.lr / (1.0 - self.beta1) + 1e-12
                assert np.all(np.abs(update) <= limit), \
                    f"Adam step for {name!r} exceeds lr/(1-beta1)"
            p.value -= update.astype(p.value.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = np.array(tensors[f"adam.m.{name}"])
            self.v[name] = np.array(tensors[f"adam.v.{name}"])
        self.step_count = step_count


@dataclass
class BatchPlan:
    batches: list[list[int]]        # item indices per batch
    max_padding_ratio: float        # worst padded/real frame ratio in any batch
    mean_padding_ratio: float


def _padding_stats(batches, lengths) -> tuple[float, float]:
    ratios = []
    for batch in batches:
        sizes = [lengths[i] for i in batch]
        padded = max(sizes) * len(sizes)
        ratios.append((padded - sum(sizes)) / padded)
    return max(ratios), sum(ratios) / len(ratios)


def make_batches(lengths: Sequence[int], batch_size: int, seed: int,
                 epoch: int = 0, bucket_batches: int = 2) -> BatchPlan:
    """Length-bucketed shuffled batches.

    Items are sorted by length, shuffled within buckets of
    ``bucket_batches * batch_size`` items, chunked, and the chunk order is
    shuffled; everything is driven by (seed, epoch) so epochs reshuffle
    deterministically.
    """
    if not lengths:
        raise ValueError("empty dataset")
    rng = np.random.default_rng((seed, epoch))
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    bucket = max(1, bucket_batches * batch_size)
    shuffled: list[int] = []
    for start in range(0, len(order), bucket):
        chunk = order[start:start + bucket]
        rng.shuffle(chunk)
        shuffled.extend(chunk)
    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    rng.shuffle(batches)
    return BatchPlan(batches, *_padding_stats(batches, lengths))


def random_batches(lengths: Sequence[int], batch_size: int, seed: int,
                   epoch: int = 0) -> BatchPlan:
    """Plain shuffled batching; reference point for the padding comparison."""
    rng = np.random.default_rng((seed, epoch, 104729))
    order = list(range(len(lengths)))
    rng.shuffle(order)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return BatchPlan(batches, *_padding_stats(batches, lengths))
