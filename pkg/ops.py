import hashlib
import os
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def finite_checks_enabled() -> bool:
    # test profile turns this on, training runs leave it off for speed
    return os.environ.get("ELASTRON_CHECK_FINITE", "0") == "1"


def check_finite(x: torch.Tensor, name: str):
    if finite_checks_enabled() and not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite value produced by {name}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor):
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul expects matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return check_finite(torch.matmul(a, b), "matmul")


def softmax(x: torch.Tensor, axis: int = -1):
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"axis {axis} out of range for shape {tuple(x.shape)}")
    # masked attention scores carry -inf on purpose, so only the output is checked
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return check_finite(torch.softmax(shifted, dim=axis), "softmax")


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5):
    if eps <= 0:
        raise ValueError(f"layer_norm eps should be positive: {eps}")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"gain/bias of shape {tuple(gain.shape)}/{tuple(bias.shape)} do not match last axis {x.shape[-1]}"
        )
    return check_finite(F.layer_norm(x, (x.shape[-1],), gain, bias, eps), "layer_norm")


def gelu(x: torch.Tensor):
    return F.gelu(x)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean"):
    """Mean over the batch of -log softmax(logits)[target].

    logits: [B, V], targets: integer vector of length B.
    """
    if logits.dim() != 2 or targets.dim() != 1 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy expects [B, V] and [B], got {tuple(logits.shape)} and {tuple(targets.shape)}")
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= logits.shape[1]):
        raise IndexError(f"target index out of range for vocabulary of {logits.shape[1]}")
    loss = F.cross_entropy(logits, targets.long(), reduction=reduction)
    return check_finite(loss, "cross_entropy")


def _derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


class Rng:
    """Seeded generator with independent named sub-streams.

    ``Rng(7).stream("init")`` always yields the same draws, no matter how many
    values were taken from the parent or from sibling streams.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        self.state = _derive_seed(self.seed, name)
        self.generator = torch.Generator().manual_seed(self.state)
        self._numpy: Optional[np.random.Generator] = None

    def stream(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.name}/{name}")

    @property
    def numpy(self) -> np.random.Generator:
        if self._numpy is None:
            self._numpy = np.random.default_rng(_derive_seed(self.seed, self.name + "#numpy"))
        return self._numpy

    def randint(self, high: int, size: Sequence[int]):
        return torch.randint(0, high, tuple(size), generator=self.generator)

    def normal(self, size: Sequence[int], std: float = 1.0):
        return torch.randn(tuple(size), generator=self.generator, dtype=DTYPE) * std

    def gumbel(self, size: Sequence[int]):
        u = torch.rand(tuple(size), generator=self.generator, dtype=DTYPE)
        return -torch.log(-torch.log(u.clamp(1e-12, 1.0 - 1e-12)))

    def permutation(self, n: int):
        return torch.randperm(n, generator=self.generator)

    def __repr__(self):
        return self.__class__.__name__ + f"(seed={self.seed}, name={self.name!r})"
