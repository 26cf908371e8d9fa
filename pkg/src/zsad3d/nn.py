"""Parameter containers, basic layers and the checkpoint format."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_MAGIC = b"ZSAD3DCK"
CHECKPOINT_VERSION = 1


class Module:
    """Anything holding :class:`Tensor` parameters or child modules as attributes.

    Parameter order is attribute-definition order, which keeps checkpoints and
    optimizer state stable across runs.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, "
                           f"unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Pointwise stack of Linear -> LayerNorm -> GELU blocks.

    The first bias starts random: raw coordinates include exact zeros (patch
    centers), and LayerNorm of an all-zero projection has exploding gradients.
    """

    def __init__(self, widths, rng: np.random.Generator, norm: bool = True):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.layers[0].bias.data[:] = rng.normal(0.0, 0.5, size=widths[1])
        self.norms = [LayerNorm(b) for b in widths[1:]] if norm else []

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.norms:
                x = self.norms[i](x)
            x = ag.gelu(x)
        return x


def no_decay(name: str) -> bool:
    """Biases, norm gains and prompt/context vectors are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in {"bias", "gain", "ctx", "tau", "cls_token", "layer_logits"}


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path, state: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays as a header-described little-endian blob.

    The format is deterministic: identical states give identical bytes.
    """
    names = list(state)
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(state, meta)`` from a file written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return state, header["meta"]
