"""Named parameter sets, SGD with momentum, and the checkpoint format."""

from __future__ import annotations

import struct

import numpy as np

from .errors import GraphError, ShapeError
from .rng import SplitMix64, fnv1a64, mix64
from .tensor import Tensor

CHECKPOINT_MAGIC = b"BMLAB1"


class ParamSet:
    """Ordered map of parameter name -> Tensor(requires_grad=True).

    Each parameter is initialized from its own splitmix64 stream seeded by
    (set seed, name hash), so a parameter's initial values depend only on
    the seed and its name, never on creation order. That keeps shared
    sub-networks identically initialized across head variants, which the
    paired ablation comparisons rely on.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def add(self, name: str, shape, fan_in: int | None = None) -> Tensor:
        """Create one parameter. fan_in given: Kaiming-uniform; else zeros."""
        if name in self._params:
            raise GraphError(f"duplicate parameter name: {name}")
        if fan_in is None:
            data = np.zeros(shape)
        else:
            rng = SplitMix64(mix64(self.seed, fnv1a64(name)))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(shape, -bound, bound)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_conv(self, name: str, out_c: int, in_c: int, k: int):
        """Conv weight (O,I,K,K) plus zero bias (O,)."""
        w = self.add(name + ".w", (out_c, in_c, k, k), fan_in=in_c * k * k)
        b = self.add(name + ".b", (out_c,))
        return w, b

    def add_deconv(self, name: str, in_c: int, out_c: int):
        """2x2 transposed-conv weight (C_in, C_out, 2, 2), no bias."""
        return self.add(name + ".w", (in_c, out_c, 2, 2), fan_in=in_c * 4)

    def absorb(self, other: "ParamSet") -> "ParamSet":
        for name, t in other.items():
            if name in self._params:
                raise GraphError(f"duplicate parameter name: {name}")
            self._params[name] = t
        return self

    def clear_grads(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """v <- mu*v + g + wd*theta; theta <- theta - lr*v; grads cleared.

    Weight decay applies to ".w" parameters only, never to biases.
    """
    for name, p in params.items():
        if p.grad is None:
            raise GraphError(f"sgd_step: parameter {name} has no gradient")
        g = p.grad
        if weight_decay != 0.0 and name.endswith(".w"):
            g = g + weight_decay * p.data
        v = params._velocity.get(name)
        v = g if v is None else momentum * v + g
        params._velocity[name] = v
        p.data = p.data - lr * v
        p.grad = None


def save_checkpoint(params: ParamSet, path) -> None:
    """Flat binary container: magic, then (name, rank, extents, values) records.

    All integers are 64-bit little-endian unsigned; values are 64-bit
    little-endian floats.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            f.write(t.data.astype("<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not a checkpoint (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = 6

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ShapeError(f"{path}: truncated checkpoint while reading {what}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    while pos < len(blob):
        (nlen,) = struct.unpack("<Q", take(8, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        out[name] = values.reshape(shape).astype(np.float64)
    return out


def load_checkpoint(params: ParamSet, path) -> None:
    """Load values into an existing ParamSet; names and shapes must match."""
    stored = read_checkpoint(path)
    for name, t in params.items():
        if name not in stored:
            raise ShapeError(f"checkpoint {path} is missing parameter {name}")
        if stored[name].shape != t.data.shape:
            raise ShapeError(
                f"checkpoint parameter {name}: shape {stored[name].shape} "
                f"does not match expected {t.data.shape}")
        t.data = stored[name]
    extra = set(stored) - set(dict(params.items()))
    if extra:
        raise ShapeError(f"checkpoint {path} has unexpected parameter "
                         f"{sorted(extra)[0]}")
