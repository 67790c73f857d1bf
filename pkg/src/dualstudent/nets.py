"""Feed-forward networks, SGD with momentum, EMA shadows and checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .ndgrad import ContractError, DimensionError, Node

ACTIVATIONS = ("relu", "tanh", "none")
HEADS = ("logits", "bounded")
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weights: Node
    bias: Node
    activation: str = "relu"
    norm: bool = False  # standardize x @ W over the batch before adding the bias

    @property
    def dims(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass
class Mlp:
    """Stack of affine layers.

    ``head="logits"`` networks (targets, students) emit raw logits. A
    ``head="bounded"`` network (the generator) ends in tanh, rescaled into the
    box ``[lo, hi]`` per output coordinate.
    """

    layers: list[Layer]
    head: str = "logits"
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.dims[1] != b.dims[0]:
                raise DimensionError(f"layer dims {a.dims} and {b.dims} do not chain")
        if self.head == "bounded":
            width = self.out_dim
            self.lo = np.broadcast_to(np.asarray(0.0 if self.lo is None else self.lo, float), (width,)).copy()
            self.hi = np.broadcast_to(np.asarray(1.0 if self.hi is None else self.hi, float), (width,)).copy()
            if np.any(self.hi < self.lo):
                raise ValueError("generator box needs lo <= hi")

    @property
    def in_dim(self) -> int:
        return self.layers[0].dims[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].dims[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.dims[1] for layer in self.layers]

    def parameters(self) -> list[Node]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def __call__(self, x) -> Node:
        return forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass returning a plain array."""
        return forward(self, np.asarray(x, dtype=np.float64)).value


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, size=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out) if size is None else size)


def init_mlp(
    dims: list[int],
    activation: str = "relu",
    seed: int = 0,
    head: str = "logits",
    lo=None,
    hi=None,
    norm: bool = False,
) -> Mlp:
    """Glorot-uniform weights, zero biases.

    Hidden layers use ``activation``; the last layer is linear for a logits
    head and tanh for a bounded head. ``norm`` turns on batch
    standardization in every layer.
    """
    if len(dims) < 2:
        raise ContractError(f"need at least input and output widths, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        act = ("tanh" if head == "bounded" else "none") if last else activation
        layers.append(
            Layer(
                nd.param(glorot(rng, fan_in, fan_out), name=f"W{i}"),
                nd.param(np.zeros(fan_out), name=f"b{i}"),
                act,
                norm,
            )
        )
    return Mlp(layers, head=head, lo=lo, hi=hi, seed=seed)


def forward(net: Mlp, x) -> Node:
    xv = x.value if isinstance(x, Node) else np.asarray(x)
    if xv.ndim != 2 or xv.shape[1] != net.in_dim:
        raise DimensionError(f"input shape {xv.shape} does not match network input width {net.in_dim}")
    h = x if isinstance(x, Node) else nd.const(xv)
    for layer in net.layers:
        if layer.norm:
            h = nd.add_bias(nd.batch_standardize(nd.matmul(h, layer.weights)), layer.bias)
        else:
            h = nd.affine(h, layer.weights, layer.bias)
        if layer.activation == "relu":
            h = nd.relu(h)
        elif layer.activation == "tanh":
            h = nd.tanh(h)
    if net.head == "bounded":
        half = (net.hi - net.lo) / 2
        mid = (net.lo + net.hi) / 2
        h = nd.affine(h, np.diag(half), mid)
        h = nd.clip(h, net.lo, net.hi)
    return h


def clone(net: Mlp) -> Mlp:
    """Deep copy with fresh parameter nodes and no gradients."""
    layers = [
        Layer(nd.param(l.weights.value.copy(), l.weights.name), nd.param(l.bias.value.copy(), l.bias.name), l.activation, l.norm)
        for l in net.layers
    ]
    return Mlp(layers, head=net.head, lo=None if net.lo is None else net.lo.copy(),
               hi=None if net.hi is None else net.hi.copy(), seed=net.seed)


def same_parameters(a: Mlp, b: Mlp) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return len(pa) == len(pb) and all(
        x.shape == y.shape and np.array_equal(x.value, y.value) for x, y in zip(pa, pb)
    )


# --- optimisation ---------------------------------------------------------------

@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def sgd_step(net: Mlp, state: SgdState) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; grads zeroed."""
    params = net.parameters()
    missing = [p.name for p in params if not p.has_grad]
    if len(missing) == len(params):
        raise ContractError("sgd_step called before backward populated any gradient")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.value) for p in params]
    if len(state.velocity) != len(params):
        raise ContractError("optimizer state does not match network parameters")
    for i, p in enumerate(params):
        g = p.grad + state.weight_decay * p.value
        v = state.momentum * state.velocity[i] + g
        state.velocity[i] = v
        p.value = p.value - state.lr * v
        p.zero_grad()


@dataclass
class EmaState:
    decay: float
    shadow: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def track(cls, net: Mlp, decay: float) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        return cls(decay, [p.value.copy() for p in net.parameters()])


def ema_update(ema: EmaState, net: Mlp) -> None:
    params = net.parameters()
    if len(params) != len(ema.shadow) or any(p.shape != s.shape for p, s in zip(params, ema.shadow)):
        raise ContractError("EMA shadow shapes do not mirror the network")
    d = ema.decay
    ema.shadow = [d * s + (1.0 - d) * p.value for s, p in zip(ema.shadow, params)]


def ema_apply(ema: EmaState, net: Mlp) -> Mlp:
    params = net.parameters()
    if len(params) != len(ema.shadow) or any(p.shape != s.shape for p, s in zip(params, ema.shadow)):
        raise ContractError("EMA shadow shapes do not mirror the network")
    out = clone(net)
    for p, s in zip(out.parameters(), ema.shadow):
        p.value = s.copy()
    return out


def grow_head(net: Mlp, rng: np.random.Generator, sgd: SgdState | None = None,
              ema: EmaState | None = None) -> None:
    """Add one output unit to a logits network in place.

    Existing weights are kept; the new column is Glorot-uniform scaled to the
    grown layer, its bias zero. Optimizer velocity and EMA shadow grow alongside.
    """
    if net.head != "logits":
        raise ContractError("only classifier heads can grow")
    last = net.layers[-1]
    fan_in, fan_out = last.dims
    col = glorot(rng, fan_in, fan_out + 1, size=(fan_in, 1))
    last.weights.value = np.hstack([last.weights.value, col])
    last.bias.value = np.append(last.bias.value, 0.0)
    last.weights.zero_grad()
    last.bias.zero_grad()
    if sgd is not None and sgd.velocity:
        sgd.velocity[-2] = np.hstack([sgd.velocity[-2], np.zeros((fan_in, 1))])
        sgd.velocity[-1] = np.append(sgd.velocity[-1], 0.0)
    if ema is not None:
        ema.shadow[-2] = np.hstack([ema.shadow[-2], col])
        ema.shadow[-1] = np.append(ema.shadow[-1], 0.0)


# --- checkpoints -------------------------------------------------------------------

def to_dict(net: Mlp) -> dict:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "seed": net.seed,
        "head": net.head,
        "layers": [
            {
                "in": l.dims[0],
                "out": l.dims[1],
                "activation": l.activation,
                "norm": l.norm,
                "weights": l.weights.value.tolist(),
                "bias": l.bias.value.tolist(),
            }
            for l in net.layers
        ],
    }
    if net.head == "bounded":
        doc["lo"] = net.lo.tolist()
        doc["hi"] = net.hi.tolist()
    return doc


def from_dict(doc: dict) -> Mlp:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    layers = []
    for i, spec in enumerate(doc["layers"]):
        w = nd.tensor(spec["weights"], (spec["in"], spec["out"]))
        b = nd.tensor(spec["bias"], (spec["out"],))
        layers.append(Layer(nd.param(w, f"W{i}"), nd.param(b, f"b{i}"), spec["activation"],
                            bool(spec.get("norm", False))))
    return Mlp(layers, head=doc["head"], lo=doc.get("lo"), hi=doc.get("hi"), seed=doc.get("seed"))


def save(net: Mlp, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(to_dict(net), indent=1) + "\n")


def load(path) -> Mlp:
    return from_dict(json.loads(Path(path).read_text()))


def perturbed(net: Mlp, scale: float, rng: np.random.Generator) -> Mlp:
    """Copy with Gaussian noise of std ``scale`` added to every weight matrix."""
    out = clone(net)
    for layer in out.layers:
        layer.weights.value = layer.weights.value + rng.normal(0.0, scale, layer.weights.shape)
    return out


__all__ = [
    "Layer", "Mlp", "SgdState", "EmaState", "init_mlp", "forward", "sgd_step",
    "ema_update", "ema_apply", "grow_head", "clone", "save", "load", "to_dict",
    "from_dict", "same_parameters", "perturbed",
]
