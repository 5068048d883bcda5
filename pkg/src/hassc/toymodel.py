"""A small numpy network with a coarse head and a voxel refinement head.

Layout::

    features (V, D) -> tanh(affine) -> tanh(affine) = fine features h
    h -> affine -> coarse logits (V, C)
    h[selected] -> tanh(affine) -> affine -> refined logits (N, C)

All parameters live in one flat float64 vector; the per-layer arrays are views
into it, so ``net.params`` is what the optimiser, the EMA teacher and the
checkpoint codec operate on.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError, VersionError
from .grid import GridDims, ProbabilityVolume
from .losses import softmax

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HVMK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    dims: GridDims
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 4 or f.shape[:3] != self.dims.shape or f.shape[3] < 1:
            raise ShapeError(f"feature array {f.shape} does not match grid {self.dims.shape}")
        if not np.isfinite(f).all():
            raise ShapeError("non-finite feature values")
        object.__setattr__(self, "features", f)

    @property
    def d(self) -> int:
        return self.features.shape[-1]

    def flat(self) -> np.ndarray:
        return self.features.reshape(-1, self.d)


def _layout(d: int, c: int):
    return (
        ("enc_w1", (d, d)), ("enc_b1", (d,)),
        ("enc_w2", (d, d)), ("enc_b2", (d,)),
        ("coarse_w", (d, c)), ("coarse_b", (c,)),
        ("ref_w1", (d, d)), ("ref_b1", (d,)),
        ("ref_w2", (d, c)), ("ref_b2", (c,)),
    )


def param_count(d: int, c: int) -> int:
    return sum(int(np.prod(s)) for _, s in _layout(d, c))


@dataclass
class _Tape:
    x: np.ndarray
    a1: np.ndarray
    h: np.ndarray
    sample_idx: np.ndarray
    r1: np.ndarray


class ToyNet:
    def __init__(self, d: int, c: int, params=None, seed: int | None = 0):
        self.d, self.c = d, c
        n = param_count(d, c)
        if params is None:
            params = self._init_params(seed)
        params = np.array(params, dtype=np.float64, copy=True)
        if params.shape != (n,):
            raise ShapeError(f"expected {n} parameters for D={d}, C={c}, got {params.shape}")
        self.params = params
        self._tape = None

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        chunks = []
        for name, shape in _layout(self.d, self.c):
            if "_w" in name:
                bound = 1.0 / np.sqrt(shape[0])
                chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
            else:
                chunks.append(np.zeros(shape).ravel())
        return np.concatenate(chunks)

    def views(self, flat=None) -> dict:
        """Named array views into ``flat`` (defaults to the parameters)."""
        flat = self.params if flat is None else flat
        out, off = {}, 0
        for name, shape in _layout(self.d, self.c):
            size = int(np.prod(shape))
            out[name] = flat[off:off + size].reshape(shape)
            off += size
        return out

    def copy(self, params=None) -> "ToyNet":
        return ToyNet(self.d, self.c, self.params if params is None else params)

    # -- forward ---------------------------------------------------------

    def _check_features(self, x):
        if x.shape[-1] != self.d:
            raise ShapeError(f"feature width {x.shape[-1]} != network width {self.d}")

    def encode(self, x: np.ndarray) -> np.ndarray:
        self._check_features(x)
        p = self.views()
        return np.tanh(np.tanh(x @ p["enc_w1"] + p["enc_b1"]) @ p["enc_w2"] + p["enc_b2"])

    def coarse_logits(self, x: np.ndarray) -> np.ndarray:
        p = self.views()
        return self.encode(x) @ p["coarse_w"] + p["coarse_b"]

    def refine(self, sampled: np.ndarray) -> np.ndarray:
        """Refinement logits for ``(N, D)`` fine features (N may be 0)."""
        sampled = np.asarray(sampled, dtype=np.float64).reshape(-1, np.shape(sampled)[-1])
        self._check_features(sampled)
        p = self.views()
        return np.tanh(sampled @ p["ref_w1"] + p["ref_b1"]) @ p["ref_w2"] + p["ref_b2"]

    def forward(self, x: np.ndarray, sample_idx=None):
        """Training forward pass over flat features; records a tape for :meth:`backward`.

        Returns ``(coarse_logits, refined_logits)`` where the refinement head
        runs on the fine features at flat voxel indices ``sample_idx``.
        """
        x = np.asarray(x, dtype=np.float64)
        self._check_features(x)
        p = self.views()
        a1 = np.tanh(x @ p["enc_w1"] + p["enc_b1"])
        h = np.tanh(a1 @ p["enc_w2"] + p["enc_b2"])
        z = h @ p["coarse_w"] + p["coarse_b"]
        idx = np.zeros(0, dtype=np.int64) if sample_idx is None else np.asarray(sample_idx, dtype=np.int64)
        r1 = np.tanh(h[idx] @ p["ref_w1"] + p["ref_b1"])
        r = r1 @ p["ref_w2"] + p["ref_b2"]
        self._tape = _Tape(x, a1, h, idx, r1)
        return z, r

    def set_sample(self, sample_idx):
        """Run the refinement head on a new sample using the recorded encoder pass."""
        if self._tape is None:
            raise StateError("set_sample before forward")
        t, p = self._tape, self.views()
        idx = np.asarray(sample_idx, dtype=np.int64)
        t.sample_idx = idx
        t.r1 = np.tanh(t.h[idx] @ p["ref_w1"] + p["ref_b1"])
        return t.r1 @ p["ref_w2"] + p["ref_b2"]

    # -- backward --------------------------------------------------------

    def backward(self, grad_coarse=None, grad_refine=None) -> np.ndarray:
        """Flat parameter gradient given output gradients from the last :meth:`forward`."""
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        t, p = self._tape, self.views()
        grad = np.zeros_like(self.params)
        g = self.views(grad)
        dh = np.zeros_like(t.h)
        if grad_coarse is not None:
            gz = np.asarray(grad_coarse, dtype=np.float64).reshape(len(t.h), self.c)
            g["coarse_w"][...] = t.h.T @ gz
            g["coarse_b"][...] = gz.sum(0)
            dh += gz @ p["coarse_w"].T
        if grad_refine is not None and len(t.sample_idx):
            gr = np.asarray(grad_refine, dtype=np.float64).reshape(len(t.sample_idx), self.c)
            g["ref_w2"][...] = t.r1.T @ gr
            g["ref_b2"][...] = gr.sum(0)
            dr1 = (gr @ p["ref_w2"].T) * (1.0 - t.r1 ** 2)
            g["ref_w1"][...] = t.h[t.sample_idx].T @ dr1
            g["ref_b1"][...] = dr1.sum(0)
            np.add.at(dh, t.sample_idx, dr1 @ p["ref_w1"].T)
        dpre2 = dh * (1.0 - t.h ** 2)
        g["enc_w2"][...] = t.a1.T @ dpre2
        g["enc_b2"][...] = dpre2.sum(0)
        dpre1 = (dpre2 @ p["enc_w2"].T) * (1.0 - t.a1 ** 2)
        g["enc_w1"][...] = t.x.T @ dpre1
        g["enc_b1"][...] = dpre1.sum(0)
        return grad


def forward_coarse(net: ToyNet, f: FeatureVolume) -> ProbabilityVolume:
    probs = softmax(net.coarse_logits(f.flat()))
    return ProbabilityVolume(f.dims, probs.reshape(f.dims.shape + (net.c,)), check=False)


def refine(net: ToyNet, sampled_features) -> np.ndarray:
    return net.refine(sampled_features)


def backward(net: ToyNet, grad_coarse=None, grad_refine=None) -> np.ndarray:
    return net.backward(grad_coarse, grad_refine)


def sgd_step(net: ToyNet, grad, lr: float) -> tuple[ToyNet, bool]:
    """Return ``(updated_net, applied)``; a non-finite gradient leaves the net unchanged."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ShapeError(f"gradient {grad.shape} vs parameters {net.params.shape}")
    if not np.isfinite(grad).all():
        log.warning("non-finite gradient; SGD step refused")
        return net, False
    return net.copy(net.params - lr * grad), True


def save_checkpoint(path, params, step: int | None = None):
    """Header ``HVMK`` + u32 version + u64 count, then little-endian float64 params.

    Teacher checkpoints append the EMA step counter as a trailing u64.
    """
    params = np.asarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.size))
        fh.write(params.tobytes())
        if step is not None:
            fh.write(struct.pack("<Q", step))


def load_checkpoint(path, expected_count: int | None = None):
    """Return ``(params, step)``; ``step`` is None for student checkpoints."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise VersionError(f"{path}: truncated checkpoint header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise VersionError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if expected_count is not None and count != expected_count:
        raise VersionError(f"{path}: checkpoint holds {count} parameters, network needs {expected_count}")
    body = len(data) - _HEADER.size
    if body == 8 * count:
        step = None
    elif body == 8 * count + 8:
        (step,) = struct.unpack_from("<Q", data, _HEADER.size + 8 * count)
    else:
        raise VersionError(f"{path}: payload of {body} bytes does not match {count} parameters")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    return params, step
