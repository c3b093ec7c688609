"""The deployable control-variate model and its gradient/value providers.

A :class:`ControlVariateModel` turns simulated paths into the discrete
martingale::

    M = sum_{k=0}^{N-1} D(t_0, t_k) theta_k(x_k) . sigma(t_k, x_k) dW_{k+1}

whose expectation is zero for any predictable integrand ``theta``. The
integrand comes from one of several providers: a stack of per-timestep
networks, a single network taking time as an input, the spatial gradient of
value networks, or the closed-form exchange-option delta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .market import ConfigurationError, PathBatch, TimeGrid, margrabe_delta
from .nn import Network, load_checkpoint, save_checkpoint

__all__ = [
    "StepNetworks",
    "TimeNetwork",
    "ValueGradient",
    "MargrabeGradient",
    "ControlVariateModel",
    "step_inputs",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "martingale-cv-model"
CHUNK_ELEMENTS = 2**22


def step_inputs(x: np.ndarray, extra: Optional[np.ndarray]) -> np.ndarray:
    """Append per-path extra features to states of shape ``(K, n, d)``."""
    if extra is None:
        return x
    e = np.broadcast_to(extra[None], (x.shape[0],) + extra.shape)
    return np.concatenate([x, e], axis=-1)


def time_inputs(x: np.ndarray, times: np.ndarray, extra: Optional[np.ndarray]) -> np.ndarray:
    """Flatten ``(K, n, d)`` states into ``(1, K*n, 1+d+e)`` rows led by the time."""
    K, n, _ = x.shape
    t = np.broadcast_to(np.asarray(times, dtype=np.float64)[:, None, None], (K, n, 1))
    rows = np.concatenate([t, step_inputs(x, extra)], axis=-1)
    return rows.reshape(1, K * n, -1)


@dataclass
class StepNetworks:
    """One network per grid node, stored as a single stack."""

    net: Network
    kind = "step_networks"

    def inputs(self, x, times, extra):
        return step_inputs(x, extra)

    def evaluate(self, x, times, extra=None, indices=None) -> np.ndarray:
        net = self.net
        if indices is not None and not np.array_equal(indices, np.arange(net.n_nets)):
            net = net.select(indices)
        elif x.shape[0] != net.n_nets:
            raise ConfigurationError(
                f"{x.shape[0]} time nodes given to a stack of {net.n_nets} networks"
            )
        return net(step_inputs(x, extra))


@dataclass
class TimeNetwork:
    """A single network taking ``(t, x)`` as input."""

    net: Network
    kind = "time_network"

    def inputs(self, x, times, extra):
        return time_inputs(x, times, extra)

    def evaluate(self, x, times, extra=None, indices=None) -> np.ndarray:
        K, n, _ = x.shape
        out = self.net(time_inputs(x, times, extra))
        return out.reshape(K, n, -1)


@dataclass
class ValueGradient:
    """Spatial gradient of value networks, obtained by reverse-mode differentiation."""

    value: object  # StepNetworks or TimeNetwork with scalar output
    d: int
    kind = "value_gradient"

    def evaluate(self, x, times, extra=None, indices=None) -> np.ndarray:
        K, n, d = x.shape
        src = self.value
        if isinstance(src, StepNetworks):
            if indices is None and src.net.n_nets != K:
                # value stacks may carry the terminal node; integrands use t_0..t_{K-1}
                indices = np.arange(K)
            net = src.net if indices is None else src.net.select(indices)
            dx = net.input_gradient(step_inputs(x, extra))
            return dx[..., :d]
        dx = src.net.input_gradient(time_inputs(x, times, extra))
        return dx.reshape(K, n, -1)[..., 1 : 1 + d]


@dataclass
class MargrabeGradient:
    """Closed-form exchange-option delta ``(Phi(d1), -Phi(d2))`` at remaining maturity."""

    sigma_bar: float
    maturity: float
    kind = "margrabe"

    def evaluate(self, x, times, extra=None, indices=None) -> np.ndarray:
        if x.shape[-1] != 2:
            raise ConfigurationError("the exchange-option delta needs d=2")
        tau = (self.maturity - np.asarray(times, dtype=np.float64))[:, None]
        return margrabe_delta(x[..., 0], x[..., 1], tau, self.sigma_bar)


@dataclass
class ControlVariateModel:
    """Gradient provider, optional value provider and the coefficient ``lambda``.

    Parameters
    ----------
    grid : TimeGrid
        Grid the integrand was trained on; evaluation paths must match it.
    gradient : provider
        Object with ``evaluate(x, times, extra, indices)`` returning ``theta``.
    d : int
        Asset count.
    value : provider, optional
        Value networks (output width 1), used for the direct price readout.
    lam : float
        Control-variate coefficient.
    """

    grid: TimeGrid
    gradient: object
    d: int
    value: Optional[object] = None
    lam: float = 1.0
    extra_inputs: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ValueError("lambda must be finite")
        self.lam = float(self.lam)
        self.extra_inputs = tuple(self.extra_inputs)

    def check_paths(self, paths: PathBatch) -> None:
        if not paths.grid.matches(self.grid):
            raise ConfigurationError(
                f"path grid {paths.grid!r} does not match the model grid {self.grid!r}"
            )
        if paths.d != self.d:
            raise ConfigurationError(f"model expects d={self.d}, paths have d={paths.d}")
        if tuple(paths.extra_names) != self.extra_inputs:
            raise ConfigurationError(
                f"model expects extra inputs {self.extra_inputs}, paths carry {paths.extra_names}"
            )

    def integrands(self, paths: PathBatch) -> np.ndarray:
        """``theta_k(x_k)`` for k = 0..N-1, shape (n, N, d)."""
        self.check_paths(paths)
        x = paths.assets[:, :-1, :].transpose(1, 0, 2)
        theta = self.gradient.evaluate(x, self.grid.times[:-1], paths.extra)
        return theta.transpose(1, 0, 2)

    def _chunk_rows(self) -> int:
        # keep each network activation near CHUNK_ELEMENTS floats
        nets = [getattr(p, "net", None) for p in (self.gradient, self.value)]
        width = max([self.d] + [max(n.layer_sizes) for n in nets if n is not None])
        return max(1, CHUNK_ELEMENTS // (self.grid.n_steps * width))

    def martingale_increments(self, paths: PathBatch) -> np.ndarray:
        """``D(t_0, t_k) theta_k . sigma dW_{k+1}``, shape (n, N); large batches run in row chunks."""
        rows = self._chunk_rows()
        if paths.n_paths > rows:
            return np.concatenate([
                self.martingale_increments(paths.select(slice(lo, lo + rows)))
                for lo in range(0, paths.n_paths, rows)
            ])
        theta = self.integrands(paths)
        disc = paths.discounts()[:, :-1]
        return disc * np.einsum("nkd,nkd->nk", theta, paths.vol_increments())

    def martingale_sum(self, paths: PathBatch) -> np.ndarray:
        return self.martingale_increments(paths).sum(axis=1)

    def value_readout(self, x0: np.ndarray, extra: Optional[np.ndarray] = None) -> np.ndarray:
        """Direct value-network price at ``t_0`` for initial states ``x0`` (n, d)."""
        if self.value is None:
            raise ConfigurationError("model has no value networks")
        x = np.asarray(x0, dtype=np.float64)[None]
        out = self.value.evaluate(x, self.grid.times[:1], extra, indices=[0])
        return out[0, :, 0]


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #


def _save_provider(provider, directory: Path, prefix: str) -> dict:
    if isinstance(provider, StepNetworks):
        files = []
        for k in range(provider.net.n_nets):
            name = f"{prefix}_{k:04d}.ckpt"
            save_checkpoint(provider.net.select([k]), directory / name, {"time_index": k})
            files.append(name)
        return {"type": provider.kind, "files": files}
    if isinstance(provider, TimeNetwork):
        name = f"{prefix}_joint.ckpt"
        save_checkpoint(provider.net, directory / name)
        return {"type": provider.kind, "files": [name]}
    if isinstance(provider, ValueGradient):
        return {"type": provider.kind, "source": "value"}
    if isinstance(provider, MargrabeGradient):
        return {
            "type": provider.kind,
            "sigma_bar": provider.sigma_bar,
            "maturity": provider.maturity,
        }
    raise TypeError(f"cannot save provider {type(provider).__name__}")


def save_model(cv: ControlVariateModel, directory, extra_manifest: Optional[dict] = None) -> Path:
    """Write per-network checkpoints and a ``model.json`` manifest tying them together."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MODEL_FORMAT,
        "d": cv.d,
        "grid": cv.grid.times.tolist(),
        "lambda": cv.lam,
        "extra_inputs": list(cv.extra_inputs),
        "metadata": cv.metadata,
        "gradient": _save_provider(cv.gradient, directory, "grad"),
        "value": None if cv.value is None else _save_provider(cv.value, directory, "value"),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    path = directory / "model.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_provider(entry: dict, directory: Path, d: int, value):
    kind = entry["type"]
    if kind == StepNetworks.kind:
        return StepNetworks(Network.stack([load_checkpoint(directory / f) for f in entry["files"]]))
    if kind == TimeNetwork.kind:
        return TimeNetwork(load_checkpoint(directory / entry["files"][0]))
    if kind == ValueGradient.kind:
        if value is None:
            raise ConfigurationError("gradient derives from value networks that are missing")
        return ValueGradient(value, d)
    if kind == MargrabeGradient.kind:
        return MargrabeGradient(entry["sigma_bar"], entry["maturity"])
    raise ConfigurationError(f"unknown provider type {kind!r}")


def load_model(path) -> ControlVariateModel:
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MODEL_FORMAT:
        raise ConfigurationError(f"{path} is not a control-variate model manifest")
    directory = path.parent
    d = int(manifest["d"])
    value = None
    if manifest.get("value"):
        value = _load_provider(manifest["value"], directory, d, None)
    gradient = _load_provider(manifest["gradient"], directory, d, value)
    return ControlVariateModel(
        TimeGrid(np.asarray(manifest["grid"])),
        gradient,
        d,
        value,
        manifest["lambda"],
        tuple(manifest["extra_inputs"]),
        manifest.get("metadata", {}),
    )
