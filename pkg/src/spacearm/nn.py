"""Minimal dense networks and optimizer state for the learning stack.

Everything is plain numpy: multilayer perceptrons with ReLU hidden
layers, reverse-mode gradients for both parameters and inputs, Adam, and
Polyak averaging for target networks.  Checkpoints are npz archives whose
loaded arrays round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointCorrupt,
    CheckpointMissing,
    DimensionMismatch,
    TauOutOfRange,
)


@dataclasses.dataclass
class Mlp:
    """Dense network with ReLU hidden layers.

    The output head is either "affine" (value estimates) or "bounded"
    (tanh scaled per component, for actions).  Weights are stored as
    (fan_in, fan_out) so a forward pass is a chain of right
    multiplications on row-vector batches.
    """

    weights: list
    biases: list
    output: str = "affine"
    output_scale: np.ndarray | float = 1.0

    @staticmethod
    def create(
        sizes,
        rng: np.random.Generator,
        output: str = "affine",
        output_scale=1.0,
        final_scale: float = 1.0,
    ) -> "Mlp":
        """Initialize with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer.

        final_scale shrinks the last layer's draw; policy networks use 0.1
        so initial actions start near zero inside their bounds.
        """
        if output not in ("affine", "bounded"):
            raise ValueError(f"unknown output head {output!r}")
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            bound = 1.0 / np.sqrt(sizes[k])
            if k == len(sizes) - 2:
                bound *= final_scale
            weights.append(rng.uniform(-bound, bound, (sizes[k], sizes[k + 1])))
            biases.append(rng.uniform(-bound, bound, sizes[k + 1]))
        return Mlp(
            weights=weights,
            biases=biases,
            output=output,
            output_scale=np.asarray(output_scale, dtype=float),
        )

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def _head(self, z: np.ndarray) -> np.ndarray:
        if self.output == "bounded":
            return self.output_scale * np.tanh(z)
        return z

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping activations for a later backward pass."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.weights[0].shape[0]:
            raise DimensionMismatch(
                f"input width {h.shape[1]} != {self.weights[0].shape[0]}"
            )
        acts, zs = [h], []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            zs.append(z)
            h = self._head(z) if k == last else np.maximum(z, 0.0)
            acts.append(h)
        out = h[0] if squeeze else h
        return out, (acts, zs, squeeze)

    def backward(self, cache, grad_out: np.ndarray):
        """Reverse-mode pass.

        grad_out holds the loss gradient at the network output (same
        shape).  Returns (parameter gradients in self.parameters() order,
        gradient with respect to the input batch).
        """
        acts, zs, squeeze = cache
        delta = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if self.output == "bounded":
            t = np.tanh(zs[-1])
            delta = delta * self.output_scale * (1.0 - t * t)
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * (zs[k - 1] > 0.0)
        grad_in = delta[0] if squeeze else delta
        return grads, grad_in

    def parameters(self) -> list:
        """Live parameter arrays, interleaved weight, bias per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            output=self.output,
            output_scale=np.array(self.output_scale, copy=True),
        )

    def state(self, prefix: str = "") -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{k}"] = w
            out[f"{prefix}b{k}"] = b
        return out

    def load_state(self, arrays: dict, prefix: str = "") -> None:
        for k in range(len(self.weights)):
            w = arrays[f"{prefix}w{k}"]
            b = arrays[f"{prefix}b{k}"]
            if w.shape != self.weights[k].shape or b.shape != self.biases[k].shape:
                raise DimensionMismatch(
                    f"layer {k}: stored {w.shape}/{b.shape}, "
                    f"expected {self.weights[k].shape}/{self.biases[k].shape}"
                )
            self.weights[k] = w.astype(float, copy=True)
            self.biases[k] = b.astype(float, copy=True)


class Adam:
    """Adam with per-array moment state, updating parameters in place."""

    def __init__(self, params: list, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list, grads: list) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise DimensionMismatch("optimizer state does not match parameter list")
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    """Polyak step target <- (1 - tau) target + tau source, in place."""
    if not 0.0 <= tau <= 1.0:
        raise TauOutOfRange(f"tau must lie in [0, 1], got {tau}")
    for tp, sp in zip(target.parameters(), source.parameters()):
        tp *= 1.0 - tau
        tp += tau * sp


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays plus a JSON metadata blob to an npz archive."""
    path = Path(path)
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, **payload)


def load_checkpoint(path):
    """Read back (arrays, meta); raises on absent or unreadable files."""
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(f"checkpoint not found: {path}")
    try:
        with np.load(path) as archive:
            arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
            meta = json.loads(bytes(archive["__meta__"]).decode())
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from None
    return arrays, meta


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()
