"""Feed-forward policy network with hand-written backpropagation.

The network maps a state ``s`` to an activation ``h`` through a ReLU
backbone and then to logits ``z = W h`` through the action-selection layer
``W`` (shape ``(k, d)``, no bias). When ``W`` is frozen it holds a simplex
ETF and never changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .etf import EtfMatrix

CHECKPOINT_SCHEMA = 1


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Forward:
    """Result of a forward pass, carrying what backward needs."""

    h: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    h_raw: np.ndarray
    clip_scale: np.ndarray | None
    version: int

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)


@dataclass
class GradientTape:
    grads: list[np.ndarray]
    loss: float = 0.0

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads) and np.isfinite(self.loss)

    def scale(self, c: float) -> "GradientTape":
        return GradientTape([g * c for g in self.grads], self.loss)

    def add(self, other: "GradientTape") -> "GradientTape":
        return GradientTape(
            [a + b for a, b in zip(self.grads, other.grads)], self.loss + other.loss
        )


def he_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class PolicyNet:
    """MLP backbone plus a linear action-selection layer.

    Parameters are kept in ``self.params`` as ``[W1, b1, ..., WL, bL, head]``.
    ``eh_clip`` rescales any activation with ``|h|^2 > eh_clip`` back onto
    the sphere of radius ``sqrt(eh_clip)``.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: list[int] | tuple[int, ...] = (64, 64),
        n_actions: int = 2,
        *,
        etf: EtfMatrix | None = None,
        rng: np.random.Generator | None = None,
        eh_clip: float | None = None,
    ):
        if not hidden:
            raise ShapeError("at least one hidden layer is required")
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim = int(in_dim)
        self.hidden = [int(w) for w in hidden]
        self.n_actions = int(n_actions)
        self.eh_clip = eh_clip
        self.etf = etf
        self.version = 0

        self.params: list[np.ndarray] = []
        fan_in = self.in_dim
        for width in self.hidden:
            self.params.append(he_uniform(rng, width, fan_in))
            self.params.append(np.zeros(width))
            fan_in = width

        d = self.hidden[-1]
        if etf is not None:
            if etf.k != self.n_actions or etf.d != d:
                raise ShapeError(
                    f"ETF is {etf.k}x{etf.d}, head needs {self.n_actions}x{d}"
                )
            head = np.array(etf.head, dtype=np.float64, copy=True)
            head.flags.writeable = False
        else:
            bound = np.sqrt(3.0 / d)  # E|w_k|^2 = 1, comparable to an E_W = 1 frame
            head = rng.uniform(-bound, bound, size=(self.n_actions, d))
        self.params.append(head)

    @property
    def frozen(self) -> bool:
        return self.etf is not None

    @property
    def head(self) -> np.ndarray:
        return self.params[-1]

    @property
    def n_layers(self) -> int:
        return len(self.hidden)

    def n_params(self, learnable_only: bool = True) -> int:
        ps = self.params[:-1] if (learnable_only and self.frozen) else self.params
        return sum(p.size for p in ps)

    def learnable(self) -> list[bool]:
        return [True] * (len(self.params) - 1) + [not self.frozen]

    # -- passes ---------------------------------------------------------

    def forward(self, states: np.ndarray) -> Forward:
        x = np.asarray(states, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"state has {x.shape[-1]} features, network expects {self.in_dim}")

        inputs, pre = [], []
        a = x
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(a)
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0)

        h_raw = a
        clip_scale = None
        h = h_raw
        if self.eh_clip is not None:
            sq = np.einsum("ij,ij->i", h_raw, h_raw)
            clip_scale = np.ones_like(sq)
            over = sq > self.eh_clip
            clip_scale[over] = np.sqrt(self.eh_clip / sq[over])
            h = h_raw * clip_scale[:, None]

        logits = h @ self.head.T
        return Forward(
            h=h,
            logits=logits,
            probs=softmax(logits),
            inputs=inputs,
            pre=pre,
            h_raw=h_raw,
            clip_scale=clip_scale,
            version=self.version,
        )

    def backward(self, fwd: Forward, dlogits: np.ndarray, loss: float = 0.0) -> GradientTape:
        """Backpropagate per-sample gradients of the loss w.r.t. the logits."""
        if fwd is None or fwd.version != self.version:
            raise StaleCacheError("forward cache does not match the current parameters")
        dz = np.asarray(dlogits, dtype=np.float64)
        if dz.shape != fwd.logits.shape:
            raise StaleCacheError(
                f"logit gradient shape {dz.shape} does not match forward batch {fwd.logits.shape}"
            )

        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        grads[-1] = np.zeros_like(self.head) if self.frozen else dz.T @ fwd.h
        dh = dz @ self.head

        if fwd.clip_scale is not None:
            s = fwd.clip_scale
            over = s < 1.0
            if np.any(over):
                hr = fwd.h_raw[over]
                radial = np.einsum("ij,ij->i", hr, dh[over]) / np.einsum("ij,ij->i", hr, hr)
                dh = dh.copy()
                dh[over] = s[over, None] * (dh[over] - radial[:, None] * hr)

        da = dh
        for i in reversed(range(self.n_layers)):
            dpre = da * (fwd.pre[i] > 0)
            grads[2 * i] = dpre.T @ fwd.inputs[i]
            grads[2 * i + 1] = dpre.sum(axis=0)
            if i > 0:
                da = dpre @ self.params[2 * i]
        return GradientTape(grads, float(loss))

    def act_probs(self, states: np.ndarray) -> np.ndarray:
        return self.forward(states).probs

    def activations(self, states: np.ndarray) -> np.ndarray:
        return self.forward(states).h

    # -- persistence ----------------------------------------------------

    def head_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.head).tobytes()).hexdigest()

    def copy(self) -> "PolicyNet":
        clone = object.__new__(PolicyNet)
        clone.__dict__.update(self.__dict__)
        clone.params = [p.copy() for p in self.params]
        if self.frozen:
            clone.params[-1].flags.writeable = False
        return clone

    def to_dict(self) -> dict:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "in_dim": self.in_dim,
            "hidden": self.hidden,
            "n_actions": self.n_actions,
            "eh_clip": self.eh_clip,
            "frozen": self.frozen,
            "etf": None if self.etf is None else {
                "k": self.etf.k, "d": self.etf.d, "energy": self.etf.energy, "seed": self.etf.seed,
            },
            "layers": [
                {"shape": list(p.shape), "values": p.ravel().tolist()} for p in self.params
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyNet":
        if data.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {data.get('schema')}")
        params = [
            np.asarray(layer["values"], dtype=np.float64).reshape(layer["shape"])
            for layer in data["layers"]
        ]
        etf = None
        if data["frozen"]:
            meta = data["etf"]
            etf = EtfMatrix(
                vectors=np.ascontiguousarray(params[-1].T),
                k=meta["k"], d=meta["d"], energy=meta["energy"], seed=meta["seed"],
            )
        net = cls(data["in_dim"], data["hidden"], data["n_actions"], etf=etf,
                  rng=np.random.default_rng(0), eh_clip=data["eh_clip"])
        expected = [p.shape for p in net.params]
        if [p.shape for p in params] != expected:
            raise ShapeError(f"checkpoint layer shapes {[p.shape for p in params]} != {expected}")
        net.params = params
        if net.frozen:
            net.params[-1].flags.writeable = False
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "PolicyNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- optimizers --------------------------------------------------------------


def _check_tape(net: PolicyNet, tape: GradientTape) -> None:
    if len(tape.grads) != len(net.params) or any(
        g.shape != p.shape for g, p in zip(tape.grads, net.params)
    ):
        raise ShapeError("gradient tape does not match network parameters")
    if not tape.is_finite():
        raise NonFiniteGradientError(
            f"non-finite gradient (loss={tape.loss}); step aborted"
        )


def clip_grad_norm(tape: GradientTape, max_norm: float) -> GradientTape:
    total = tape.norm()
    if total > max_norm:
        return tape.scale(max_norm / (total + 1e-12))
    return tape


def sgd_step(net: PolicyNet, tape: GradientTape, lr: float) -> PolicyNet:
    _check_tape(net, tape)
    for p, g, learn in zip(net.params, tape.grads, net.learnable()):
        if learn:
            p -= lr * g
    net.version += 1
    return net


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_net(cls, net: PolicyNet) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.params], [np.zeros_like(p) for p in net.params], 0)


def adam_step(
    net: PolicyNet,
    tape: GradientTape,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> PolicyNet:
    """One bias-corrected Adam update; ``state.t`` is advanced in place."""
    _check_tape(net, tape)
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g, learn) in enumerate(zip(net.params, tape.grads, net.learnable())):
        if not learn:
            continue
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    net.version += 1
    return net


class Optimizer:
    """Small wrapper so trainers can hold one object per network."""

    def __init__(self, net: PolicyNet, name: str = "adam", lr: float = 1e-3,
                 max_grad_norm: float | None = None):
        if name not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {name!r}")
        self.name = name
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.for_net(net) if name == "adam" else None

    def step(self, net: PolicyNet, tape: GradientTape) -> PolicyNet:
        if self.max_grad_norm is not None and tape.is_finite():
            tape = clip_grad_norm(tape, self.max_grad_norm)
        if self.name == "adam":
            return adam_step(net, tape, self.state, self.lr)
        return sgd_step(net, tape, self.lr)
