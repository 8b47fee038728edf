"""Spiking student: LIF/IF dynamics with direct coding and surrogate gradients."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _sigmoid_np
from .errors import ParseError, ShapeError
from .nets import DenseLayer, read_document, take_array
from .rng import stream

NEURON_MODELS = ("LIF", "IF")


@dataclass(frozen=True)
class LIFConfig:
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    steps: int = 4
    surrogate_alpha: float = 4.0
    neuron_model: str = "LIF"

    def __post_init__(self):
        if not self.tau >= 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not self.surrogate_alpha > 0:
            raise ValueError(f"surrogate_alpha must be positive, got {self.surrogate_alpha}")
        if self.neuron_model not in NEURON_MODELS:
            raise ValueError(f"neuron_model must be one of {NEURON_MODELS}, got {self.neuron_model!r}")


@dataclass
class LIFState:
    V: Tensor

    @classmethod
    def rest(cls, shape: tuple[int, ...], cfg: LIFConfig) -> "LIFState":
        return cls(Tensor(np.full(shape, float(cfg.v_reset))))


def surrogate_heaviside(x: Tensor, alpha: float, smooth: bool = False) -> Tensor:
    """Step 1(x >= 0) forward; ``alpha*σ(αx)(1-σ(αx))`` backward.

    ``smooth=True`` also uses ``σ(αx)`` in the forward pass, which makes the
    whole network differentiable for finite-difference checks.
    """
    ax = alpha * x.data
    e = np.exp(-np.abs(ax))
    slope = alpha * e / (1.0 + e) ** 2  # σ(αx)σ(-αx), even in x without cancellation
    out = _sigmoid_np(np.atleast_1d(ax)).reshape(x.shape) if smooth else (x.data >= 0.0).astype(np.float64)
    return ad.custom(out, (x,), lambda g: (g * slope,), "heaviside")


def lif_step(state: LIFState, x_t: Tensor, cfg: LIFConfig, smooth: bool = False):
    """One step of charge / fire / reset. Returns ``(spikes, new_state, H)``."""
    v = state.V
    if v.shape != x_t.shape:
        raise ShapeError(f"state {v.shape} and input {x_t.shape} disagree")
    if cfg.neuron_model == "IF":
        h = v + x_t
    else:
        h = v + ad.scalar_mul(x_t - ad.add_scalar(v, -cfg.v_reset), 1.0 / cfg.tau)
    s = surrogate_heaviside(ad.add_scalar(h, -cfg.v_th), cfg.surrogate_alpha, smooth)
    v_new = h * (1.0 - s)
    if cfg.v_reset != 0.0:
        v_new = v_new + ad.scalar_mul(s, cfg.v_reset)
    return s, LIFState(v_new), h


def simulate_constant(a: np.ndarray, cfg: LIFConfig, reset: bool = True):
    """Run one LIF layer on a constant input for ``cfg.steps`` steps.

    Returns ``(H, S)`` arrays of shape [T, *a.shape]. With ``reset=False`` the
    membrane keeps integrating after a spike (the subthreshold recursion).
    """
    a = np.asarray(a, dtype=np.float64)
    hs, ss = [], []
    with ad.no_grad():
        x = Tensor(a)
        state = LIFState.rest(a.shape, cfg)
        for _ in range(cfg.steps):
            s, new_state, h = lif_step(state, x, cfg)
            hs.append(h.data)
            ss.append(s.data)
            state = new_state if reset else LIFState(h)
    return np.stack(hs), np.stack(ss)


@dataclass
class StudentOutput:
    logits: Tensor
    features: list[Tensor]  # per tap, [T×B×C]
    spikes: list[np.ndarray] = field(default_factory=list)  # per layer, [T×B×C]


class StudentNet:
    """Dense layers followed by spiking neurons and a time-averaged readout."""

    def __init__(self, input_dim: int = 16, hidden: tuple[int, ...] = (64, 64), num_classes: int = 4,
                 seed: int = 0, init_gain: float = 1.0, taps=None):
        rng = stream(seed, "student.init")
        self.input_dim = input_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.num_classes = num_classes
        self.init_gain = float(init_gain)
        dims = (input_dim, *self.hidden)
        self.layers = [DenseLayer(dims[i], dims[i + 1], rng) for i in range(len(self.hidden))]
        self.head = DenseLayer(dims[-1], num_classes, rng)
        for layer in self.layers:
            layer.W.data *= self.init_gain
        self.taps = tuple(range(len(self.hidden))) if taps is None else tuple(taps)

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for layer in [*self.layers, self.head]:
            ps += [layer.W, layer.b]
        return ps

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.W"] = layer.W.data.copy()
            out[f"layers.{i}.b"] = layer.b.data.copy()
        out["head.W"] = self.head.W.data.copy()
        out["head.b"] = self.head.b.data.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.W.data = np.array(state[f"layers.{i}.W"], dtype=np.float64)
            layer.b.data = np.array(state[f"layers.{i}.b"], dtype=np.float64)
        self.head.W.data = np.array(state["head.W"], dtype=np.float64)
        self.head.b.data = np.array(state["head.b"], dtype=np.float64)


# counts forward passes that build pre-LIF features; tests read it to confirm
# the BN-only path never touches the student
FEATURE_BUILDS = {"count": 0}


def student_forward(net: StudentNet, batch: Tensor, cfg: LIFConfig, smooth: bool = False) -> StudentOutput:
    """Direct coding: the same input is presented at each of ``cfg.steps`` steps.

    Features are the pre-LIF input currents of the tapped layers. Logits are
    the head applied to time-averaged spikes, which equals the time average of
    per-step head outputs because the head is linear.
    """
    if batch.data.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"student expects [B×{net.input_dim}] input, got {batch.shape}")
    FEATURE_BUILDS["count"] += 1
    steps = cfg.steps
    layer_inputs: list[list[Tensor]] = []
    spikes_np: list[np.ndarray] = []
    outs: list[Tensor] = []
    # first layer input is the same tensor at every step
    inputs = [net.layers[0](batch)] * steps
    for li, layer in enumerate(net.layers):
        if li > 0:
            inputs = [layer(s) for s in outs]
        layer_inputs.append(inputs)
        state = LIFState.rest(inputs[0].shape, cfg)
        outs = []
        for t in range(steps):
            s, state, _ = lif_step(state, inputs[t], cfg, smooth)
            outs.append(s)
        spikes_np.append(np.stack([s.data for s in outs]))
    rate = outs[0] if steps == 1 else ad.mean(ad.stack(outs), axis=0)
    logits = net.head(rate)
    features = [ad.stack(layer_inputs[i]) for i in net.taps]
    return StudentOutput(logits, features, spikes_np)


def firing_rate(net: StudentNet, batch, cfg: LIFConfig) -> list[float]:
    """Mean spike rate per layer over time, batch and channels."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    with ad.no_grad():
        out = student_forward(net, x, cfg)
    return [float(s.mean()) for s in out.spikes]


def predict(net: StudentNet, inputs: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    with ad.no_grad():
        return student_forward(net, Tensor(inputs), cfg).logits.data.argmax(axis=1)


def accuracy(net: StudentNet, inputs: np.ndarray, labels: np.ndarray, cfg: LIFConfig) -> float:
    return float(np.mean(predict(net, inputs, cfg) == labels))


# ---- checkpoints ------------------------------------------------------------------
def save_student(net: StudentNet, cfg: LIFConfig, path) -> None:
    doc = {
        "schema_version": 1,
        "kind": "student",
        "arch": {"input_dim": net.input_dim, "hidden": list(net.hidden), "num_classes": net.num_classes,
                 "taps": list(net.taps)},
        "lif": asdict(cfg),
        "params": {k: v.reshape(-1).tolist() for k, v in net.state().items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_student(path) -> tuple[StudentNet, LIFConfig]:
    doc = read_document(path, "student")
    try:
        arch = doc["arch"]
        cfg = LIFConfig(**doc["lif"])
        net = StudentNet(int(arch["input_dim"]), tuple(arch["hidden"]), int(arch["num_classes"]), taps=arch["taps"])
        params = doc["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: missing or malformed field ({exc})") from exc
    for i, layer in enumerate(net.layers):
        layer.W.data = take_array(params, f"layers.{i}.W", layer.W.shape, "params")
        layer.b.data = take_array(params, f"layers.{i}.b", layer.b.shape, "params")
    net.head.W.data = take_array(params, "head.W", net.head.W.shape, "params")
    net.head.b.data = take_array(params, "head.b", net.head.b.shape, "params")
    return net, cfg


def first_spike_time(a: float, cfg: LIFConfig) -> int | None:
    """1-based step of the first spike for constant input ``a`` (None if silent)."""
    _, s = simulate_constant(np.array([a]), cfg)
    hits = np.nonzero(s[:, 0])[0]
    return int(hits[0]) + 1 if hits.size else None
