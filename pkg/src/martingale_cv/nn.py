"""Fully connected ReLU networks with hand-written reverse-mode gradients.

A :class:`Network` holds ``n_nets`` independent networks of one architecture
as stacked arrays: weights have shape ``(n_nets, l_{k-1}, l_k)`` and inputs
``(n_nets, batch, l_0)``. The per-timestep networks of a solver are trained
and evaluated as a single stack, one batched matmul per layer. With
``n_nets == 1`` plain ``(batch, l_0)`` inputs are accepted too.

Optional batch normalisation sits on the raw input, before every hidden
activation and after the output layer.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mathcore import as_generator

__all__ = [
    "Network",
    "ForwardCache",
    "AdamState",
    "LearningRateSchedule",
    "TrainingAborted",
    "CheckpointError",
    "parameter_count",
    "init_network",
    "forward",
    "backward",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "martingale-cv-network"
CHECKPOINT_VERSION = 1


class TrainingAborted(FloatingPointError):
    """Non-finite loss or gradient during training."""


class CheckpointError(IOError):
    """Corrupted or unreadable checkpoint file."""


def parameter_count(layer_sizes: Sequence[int], batchnorm: bool = False) -> int:
    """Trainable parameters of one network: ``sum(l_{k-1} l_k + l_k)``.

    Each batch-norm site adds a scale and a shift per feature.
    """
    sizes = list(layer_sizes)
    count = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if batchnorm:
        count += 2 * sum(sizes)
    return count


@dataclass
class ForwardCache:
    version: int
    train: bool
    squeeze: bool
    inputs: list = field(default_factory=list)  # input of each linear layer
    masks: list = field(default_factory=list)
    bn: dict = field(default_factory=dict)


class Network:
    def __init__(
        self,
        layer_sizes: Sequence[int],
        batchnorm: bool = False,
        n_nets: int = 1,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
        extra_inputs: Sequence[str] = (),
    ):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if min(sizes) < 1:
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if n_nets < 1:
            raise ValueError("n_nets must be positive")
        self.layer_sizes = sizes
        self.batchnorm = bool(batchnorm)
        self.n_nets = int(n_nets)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.extra_inputs = tuple(extra_inputs)
        self.metadata: dict = {}
        S = self.n_nets
        self.weights = [np.zeros((S, a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [np.zeros((S, 1, b)) for b in sizes[1:]]
        widths = self.bn_widths
        self.gamma = [np.ones((S, 1, w)) for w in widths]
        self.beta = [np.zeros((S, 1, w)) for w in widths]
        self.running_mean = [np.zeros((S, 1, w)) for w in widths]
        self.running_var = [np.ones((S, 1, w)) for w in widths]
        self._version = 0

    # ------------------------------------------------------------------ #
    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def bn_widths(self) -> list:
        return list(self.layer_sizes) if self.batchnorm else []

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list:
        """Trainable arrays in canonical order: W1, b1, ..., WL, bL, then (gamma, beta) per site."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        for g, be in zip(self.gamma, self.beta):
            out += [g, be]
        return out

    def parameter_names(self) -> list:
        names = []
        for k in range(1, self.n_layers + 1):
            names += [f"W{k}", f"B{k}"]
        for s in range(len(self.gamma)):
            names += [f"gamma{s}", f"beta{s}"]
        return names

    def state_arrays(self) -> list:
        return self.running_mean + self.running_var

    def state_names(self) -> list:
        n = len(self.running_mean)
        return [f"running_mean{s}" for s in range(n)] + [f"running_var{s}" for s in range(n)]

    def n_parameters(self) -> int:
        return parameter_count(self.layer_sizes, self.batchnorm)

    def mark_updated(self) -> None:
        self._version += 1

    # ------------------------------------------------------------------ #
    def _like(self, n_nets: int) -> "Network":
        return Network(
            self.layer_sizes,
            self.batchnorm,
            n_nets,
            self.bn_momentum,
            self.bn_eps,
            self.extra_inputs,
        )

    def _assign(self, src_arrays: list, dst_arrays: list) -> None:
        for s, d in zip(src_arrays, dst_arrays):
            d[...] = s

    def copy(self) -> "Network":
        return self.select(range(self.n_nets))

    def select(self, indices) -> "Network":
        """New network holding copies of the sub-networks at ``indices``."""
        idx = np.atleast_1d(np.asarray(list(indices) if not np.isscalar(indices) else [indices]))
        out = self._like(len(idx))
        self._assign(
            [a[idx] for a in self.parameters() + self.state_arrays()],
            out.parameters() + out.state_arrays(),
        )
        out.metadata = dict(self.metadata)
        return out

    def set_member(self, index: int, other: "Network") -> None:
        """Overwrite sub-network ``index`` with the single network ``other``."""
        if other.n_nets != 1 or other.layer_sizes != self.layer_sizes:
            raise ValueError("incompatible network")
        for d, s in zip(self.parameters() + self.state_arrays(), other.parameters() + other.state_arrays()):
            d[index] = s[0]
        self.mark_updated()

    @classmethod
    def stack(cls, nets: Sequence["Network"]) -> "Network":
        first = nets[0]
        out = first._like(sum(n.n_nets for n in nets))
        arrays = [n.parameters() + n.state_arrays() for n in nets]
        for j, dst in enumerate(out.parameters() + out.state_arrays()):
            dst[...] = np.concatenate([a[j] for a in arrays], axis=0)
        out.metadata = dict(first.metadata)
        return out

    # ------------------------------------------------------------------ #
    def _bn_forward(self, z, site, train, update_stats, cache):
        g, b = self.gamma[site], self.beta[site]
        if train:
            n = z.shape[1]
            mu = z.mean(axis=1, keepdims=True)
            xhat = z - mu
            var = np.einsum("kni,kni->ki", xhat, xhat)[:, None, :] / n
            inv_std = 1.0 / np.sqrt(var + self.bn_eps)
            xhat *= inv_std
            if update_stats:
                m = self.bn_momentum
                unbiased = var * (n / (n - 1)) if n > 1 else var
                self.running_mean[site] *= 1.0 - m
                self.running_mean[site] += m * mu
                self.running_var[site] *= 1.0 - m
                self.running_var[site] += m * unbiased
        else:
            inv_std = 1.0 / np.sqrt(self.running_var[site] + self.bn_eps)
            xhat = (z - self.running_mean[site]) * inv_std
        cache.bn[site] = (xhat, inv_std)
        out = xhat * g
        out += b
        return out

    def forward(self, x, train: bool = False, update_stats: bool = True):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            if self.n_nets != 1:
                raise ValueError("2-d input is only accepted by a single network")
            x = x[None]
        if x.ndim != 3 or x.shape[0] != self.n_nets:
            raise ValueError(
                f"expected input of shape ({self.n_nets}, batch, {self.input_width}), got {x.shape}"
            )
        if x.shape[2] != self.input_width:
            raise ValueError(f"input width {x.shape[2]} does not match l0={self.input_width}")
        cache = ForwardCache(self._version, train, squeeze)
        h = x
        if self.batchnorm:
            h = self._bn_forward(h, 0, train, update_stats, cache)
        L = self.n_layers
        for k in range(L):
            cache.inputs.append(h)
            z = np.matmul(h, self.weights[k])
            z += self.biases[k]
            if self.batchnorm:
                z = self._bn_forward(z, k + 1, train, update_stats, cache)
            if k < L - 1:
                h = np.maximum(z, 0.0, out=z)
                cache.masks.append(h > 0)
            else:
                h = z
        return (h[0] if squeeze else h), cache

    def __call__(self, x):
        return self.forward(x, train=False)[0]

    def _bn_backward(self, dy, site, train, grads_g, grads_b):
        xhat, inv_std = self._cache_bn[site]
        dg = np.einsum("kni,kni->ki", dy, xhat)[:, None, :]
        db = dy.sum(axis=1, keepdims=True)
        grads_g[site], grads_b[site] = dg, db
        scale = self.gamma[site] * inv_std
        if not train:
            return dy * scale
        # gamma is constant per feature, so the batch sums reuse dg and db
        n = dy.shape[1]
        dx = xhat * (dg / n)
        np.subtract(dy, dx, out=dx)
        dx -= db / n
        dx *= scale
        return dx

    def backward(self, cache: ForwardCache, upstream):
        """Gradients of ``sum(upstream * output)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered as
        :meth:`parameters`.
        """
        if cache.version != self._version:
            raise RuntimeError("stale forward cache: parameters changed since the forward pass")
        dy = np.asarray(upstream, dtype=np.float64)
        if cache.squeeze:
            dy = dy[None]
        L = self.n_layers
        dW = [None] * L
        dB = [None] * L
        n_sites = len(self.gamma)
        dG = [None] * n_sites
        dBe = [None] * n_sites
        self._cache_bn = cache.bn
        try:
            for k in range(L - 1, -1, -1):
                if k < L - 1:
                    dy = dy * cache.masks[k]
                if self.batchnorm:
                    dy = self._bn_backward(dy, k + 1, cache.train, dG, dBe)
                h = cache.inputs[k]
                dW[k] = np.matmul(h.transpose(0, 2, 1), dy)
                dB[k] = dy.sum(axis=1, keepdims=True)
                dy = np.matmul(dy, self.weights[k].transpose(0, 2, 1))
            if self.batchnorm:
                dy = self._bn_backward(dy, 0, cache.train, dG, dBe)
        finally:
            del self._cache_bn
        grads = []
        for w, b in zip(dW, dB):
            grads += [w, b]
        for g, b in zip(dG, dBe):
            grads += [g, b]
        return grads, (dy[0] if cache.squeeze else dy)

    def input_gradient(self, x, train: bool = False) -> np.ndarray:
        """Jacobian-vector product with ones: d(sum of outputs)/d(input).

        For a scalar-output network this is the spatial gradient used by the
        automatic-differentiation route.
        """
        out, cache = self.forward(x, train=train, update_stats=False)
        _, dx = self.backward(cache, np.ones_like(out))
        return dx

    def __repr__(self):
        return (
            f"Network(layer_sizes={list(self.layer_sizes)}, batchnorm={self.batchnorm}, "
            f"n_nets={self.n_nets})"
        )


def init_network(
    layer_sizes: Sequence[int],
    batchnorm: bool = False,
    stream=0,
    n_nets: int = 1,
    extra_inputs: Sequence[str] = (),
) -> Network:
    """He-initialised network: ``W ~ N(0, 2/l_{k-1})``, zero biases."""
    net = Network(layer_sizes, batchnorm, n_nets, extra_inputs=extra_inputs)
    rng = as_generator(stream)
    for w in net.weights:
        w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
    return net


def forward(net: Network, batch, mode: str = "eval"):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return net.forward(batch, train=(mode == "train"))


def backward(net: Network, cache: ForwardCache, upstream_gradient):
    return net.backward(cache, upstream_gradient)


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LearningRateSchedule:
    """Piecewise-constant rate: ``initial`` for the first ``boundary`` updates."""

    initial: float = 1e-3
    decayed: float = 1e-4
    boundary: int = 10_000

    def __call__(self, step: int) -> float:
        return self.initial if step < self.boundary else self.decayed


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: LearningRateSchedule = field(default_factory=LearningRateSchedule)

    @classmethod
    def for_params(cls, params, schedule: Optional[LearningRateSchedule] = None) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            schedule=schedule or LearningRateSchedule(),
        )


def adam_step(params, grads, state: AdamState, lr: Optional[float] = None):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``lr`` overrides the schedule (solvers that share one schedule across
    several optimisers pass the global step's rate).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient at optimiser step {state.t}")
    rate = state.schedule(state.t) if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #


def save_checkpoint(net: Network, path, metadata: Optional[dict] = None) -> None:
    """Write a one-line JSON manifest, raw little-endian float64 blocks, and a
    trailing little-endian uint64 holding the payload length in bytes."""
    arrays = net.parameters() + net.state_arrays()
    names = net.parameter_names() + net.state_names()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    meta = dict(net.metadata)
    if metadata:
        meta.update(metadata)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "activation": "relu",
        "batchnorm": net.batchnorm,
        "bn_momentum": net.bn_momentum,
        "bn_eps": net.bn_eps,
        "n_nets": net.n_nets,
        "extra_inputs": list(net.extra_inputs),
        "metadata": meta,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    trailer = np.array([len(payload)], dtype="<u8").tobytes()
    Path(path).write_bytes(header + payload + trailer)


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing manifest")
    try:
        manifest = json.loads(raw[:nl])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a network checkpoint")
    body = raw[nl + 1 :]
    if len(body) < 8:
        raise CheckpointError(f"{path}: truncated file")
    payload, trailer = body[:-8], body[-8:]
    declared = int(np.frombuffer(trailer, dtype="<u8")[0])
    if declared != len(payload) or declared != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload length mismatch (found {len(payload)}, "
            f"expected {manifest['payload_bytes']})"
        )
    if zlib.crc32(payload) != manifest["crc32"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    net = Network(
        manifest["layer_sizes"],
        manifest["batchnorm"],
        manifest["n_nets"],
        manifest["bn_momentum"],
        manifest["bn_eps"],
        manifest["extra_inputs"],
    )
    net.metadata = manifest["metadata"]
    arrays = net.parameters() + net.state_arrays()
    if len(arrays) != len(manifest["blocks"]):
        raise CheckpointError(f"{path}: block count does not match the architecture")
    offset = 0
    for a, block in zip(arrays, manifest["blocks"]):
        if list(a.shape) != block["shape"]:
            raise CheckpointError(f"{path}: block {block['name']} has unexpected shape")
        nbytes = a.size * 8
        a[...] = np.frombuffer(payload, dtype="<f8", count=a.size, offset=offset).reshape(a.shape)
        offset += nbytes
    return net
