"""Small gated MLPs with hand-written reverse mode, Adam, and tensor checkpoints."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ContractError(RuntimeError):
    pass


class GradientTape:
    """Primal values recorded by :meth:`MLP.forward`, consumed by :meth:`MLP.backward`."""

    def __init__(self):
        self.inputs: list[np.ndarray] = []
        self.preacts: list[np.ndarray] = []
        self.raw: np.ndarray | None = None

    @property
    def recorded(self) -> bool:
        return self.raw is not None

    def clear(self):
        self.inputs.clear()
        self.preacts.clear()
        self.raw = None


class MLP:
    """ReLU MLP whose output is scaled by a learnable scalar gate.

    ``output = gate * head(x)``; with ``gate_init=0`` the network is exactly
    zero until the gate starts moving.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden=(64, 64), name: str = "mlp",
                 gate_init: float = 0.0, dtype=np.float32, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.widths = [int(in_dim), *[int(h) for h in hidden], int(out_dim)]
        self.dtype = np.dtype(dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype))
            self.biases.append(rng.uniform(-bound, bound, fan_out).astype(self.dtype))
        self.gate = np.full(1, gate_init, dtype=self.dtype)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def num_parameters(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:])) + 1

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{self.name}.w{i}"] = w
            params[f"{self.name}.b{i}"] = b
        params[f"{self.name}.gate"] = self.gate
        return params

    def astype(self, dtype) -> "MLP":
        self.dtype = np.dtype(dtype)
        self.weights = [w.astype(dtype) for w in self.weights]
        self.biases = [b.astype(dtype) for b in self.biases]
        self.gate = self.gate.astype(dtype)
        return self

    def forward(self, x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"{self.name}: expected input width {self.in_dim}, got {x.shape[-1]}")
        if tape is not None:
            tape.clear()
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if tape is not None:
                tape.inputs.append(h)
            z = h @ w + b
            if i < last:
                if tape is not None:
                    tape.preacts.append(z)
                h = np.maximum(z, 0)
            else:
                h = z
        if tape is not None:
            tape.raw = h
        return self.gate[0] * h

    __call__ = forward

    def backward(self, tape: GradientTape, gy: np.ndarray):
        """Return (input cotangent, {param name: gradient})."""
        if tape is None or not tape.recorded:
            raise ContractError(f"{self.name}: backward called without a recorded forward")
        gy = np.asarray(gy, dtype=self.dtype)
        grads = {f"{self.name}.gate": np.array([np.sum(gy * tape.raw)], dtype=self.dtype)}
        g = gy * self.gate[0]
        for i in range(len(self.weights) - 1, -1, -1):
            h = tape.inputs[i]
            h2 = h.reshape(-1, h.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[f"{self.name}.w{i}"] = h2.T @ g2
            grads[f"{self.name}.b{i}"] = g2.sum(0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (tape.preacts[i - 1] > 0)
        return g, grads


def forward(net: MLP, x, tape=None):
    return net.forward(x, tape)


def backward(net: MLP, tape: GradientTape, gy):
    return net.backward(tape, gy)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """In-place Adam update. Returns False (and leaves everything untouched) on a non-finite gradient."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ContractError("Adam state / gradient shape mismatch")
    if not np.all(np.isfinite(grad)):
        return False
    b1, b2 = betas
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)
    return True


class Adam:
    """Adam over a dict of named arrays, each with its own learning rate."""

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float], betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = eps
        self.state = {k: AdamState(np.zeros_like(p), np.zeros_like(p)) for k, p in params.items()}
        self.skipped = 0

    def step(self, grads: dict[str, np.ndarray]) -> bool:
        # all-or-nothing: one bad gradient skips the whole step
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
        for k, g in grads.items():
            lr = self.lrs.get(k, 0.0)
            if lr == 0.0:
                continue
            adam_step(self.params[k], g.astype(self.params[k].dtype, copy=False), self.state[k],
                      lr, self.betas, self.eps)
        return True

    def rebind(self, name: str, param: np.ndarray, src: np.ndarray | None = None):
        """Point ``name`` at a resized array. Rows come from ``src`` (-1 = fresh zero state)."""
        old = self.state.get(name)
        self.params[name] = param
        if old is None or src is None:
            self.state[name] = AdamState(np.zeros_like(param), np.zeros_like(param))
            return
        m = np.zeros_like(param)
        v = np.zeros_like(param)
        ok = src >= 0
        m[ok] = old.m[src[ok]]
        v[ok] = old.v[src[ok]]
        self.state[name] = AdamState(m, v, old.step)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, s in self.state.items():
            out[f"adam.m.{k}"] = s.m
            out[f"adam.v.{k}"] = s.v
            out[f"adam.t.{k}"] = np.array([s.step], dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for k in self.params:
            if f"adam.m.{k}" in tensors:
                self.state[k] = AdamState(tensors[f"adam.m.{k}"].copy(), tensors[f"adam.v.{k}"].copy(),
                                          int(tensors[f"adam.t.{k}"][0]))


# ---------------------------------------------------------------------------
# checkpoint container: little-endian, named tensors plus a JSON header

MAGIC = b"HSPK"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "<i4"}


def _dtype_code(dt: np.dtype) -> int:
    dt = np.dtype(dt)
    for code, s in _DTYPES.items():
        if np.dtype(s).kind == dt.kind and np.dtype(s).itemsize == dt.itemsize:
            return code
    raise ContractError(f"unsupported dtype {dt}")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    buf = io.BytesIO()
    header = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<HII", VERSION, len(tensors), len(header)))
    buf.write(header)
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _dtype_code(arr.dtype)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContractError(f"{path}: not a tensor container")
    version, count, hlen = struct.unpack_from("<HII", data, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")
    off = 14
    meta = json.loads(data[off:off + hlen].decode())
    off += hlen
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape).copy()
        off += n
    return out, meta
