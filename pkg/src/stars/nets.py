"""ANN teacher: dense blocks with batch normalization, taps and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericalError, ParseError, ShapeError, VersionError
from .optim import SGD
from .rng import stream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        std = math.sqrt(2.0 / in_dim)
        w = rng.standard_normal((out_dim, in_dim)) * std if rng is not None else np.zeros((out_dim, in_dim))
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.W, self.b)

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


class BatchNormLayer:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {momentum}")
        self.gamma_bn = Tensor(np.ones(channels), requires_grad=True)
        self.beta_bn = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def train_forward(self, a: Tensor) -> Tensor:
        n = a.shape[0]
        mu = ad.mean(a, axis=0)
        centered = a - ad.expand_rows(mu, n)
        var = ad.mean(ad.square(centered), axis=0)
        inv = ad.power(ad.add_scalar(var, self.eps), -0.5)
        xhat = centered * ad.expand_rows(inv, n)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
        self.running_var = (1.0 - m) * self.running_var + m * var.data
        return xhat * ad.expand_rows(self.gamma_bn, n) + ad.expand_rows(self.beta_bn, n)

    def eval_forward(self, a: Tensor) -> Tensor:
        n = a.shape[0]
        inv = Tensor(1.0 / np.sqrt(self.running_var + self.eps))
        scale = self.gamma_bn * inv
        shift = self.beta_bn - scale * Tensor(self.running_mean)
        return a * ad.expand_rows(scale, n) + ad.expand_rows(shift, n)


@dataclass
class TeacherTrace:
    logits: Tensor
    pre_bn: list[Tensor]
    pre_act: list[Tensor]


class TeacherNet:
    """Dense→BN→ReLU blocks followed by a linear head."""

    def __init__(self, input_dim: int = 16, hidden: tuple[int, ...] = (64, 64), num_classes: int = 4,
                 seed: int = 0, bn_momentum: float = 0.1, bn_eps: float = 1e-5, taps=None):
        rng = stream(seed, "teacher.init")
        self.input_dim = input_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.num_classes = num_classes
        dims = (input_dim, *self.hidden)
        self.layers = [DenseLayer(dims[i], dims[i + 1], rng) for i in range(len(self.hidden))]
        self.bns = [BatchNormLayer(h, bn_momentum, bn_eps) for h in self.hidden]
        self.head = DenseLayer(dims[-1], num_classes, rng)
        self.taps = tuple(range(len(self.hidden))) if taps is None else tuple(taps)
        for t in self.taps:
            if not 0 <= t < len(self.hidden):
                raise ValueError(f"tap index {t} out of range for {len(self.hidden)} blocks")

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for layer, bn in zip(self.layers, self.bns):
            ps += [layer.W, layer.b, bn.gamma_bn, bn.beta_bn]
        return ps + [self.head.W, self.head.b]

    def forward(self, x: Tensor, train: bool = False) -> TeacherTrace:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"teacher expects [B×{self.input_dim}] input, got {x.shape}")
        if train and x.shape[0] < 2:
            raise ContractError("train-mode batch norm needs a batch of at least 2")
        h = x
        pre_bn, pre_act = [], []
        for layer, bn in zip(self.layers, self.bns):
            a = layer(h)
            y = bn.train_forward(a) if train else bn.eval_forward(a)
            pre_bn.append(a)
            pre_act.append(y)
            h = ad.relu(y)
        return TeacherTrace(self.head(h), pre_bn, pre_act)

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and running statistic, keyed by name."""
        out = {}
        for i, (layer, bn) in enumerate(zip(self.layers, self.bns)):
            out[f"layers.{i}.W"] = layer.W.data.copy()
            out[f"layers.{i}.b"] = layer.b.data.copy()
            out[f"bn.{i}.gamma"] = bn.gamma_bn.data.copy()
            out[f"bn.{i}.beta"] = bn.beta_bn.data.copy()
            out[f"bn.{i}.running_mean"] = bn.running_mean.copy()
            out[f"bn.{i}.running_var"] = bn.running_var.copy()
        out["head.W"] = self.head.W.data.copy()
        out["head.b"] = self.head.b.data.copy()
        return out


def forward_train(net: TeacherNet, batch: Tensor) -> Tensor:
    return net.forward(batch, train=True).logits


def forward_eval(net: TeacherNet, batch: Tensor) -> Tensor:
    return net.forward(batch, train=False).logits


def tap_pre_bn(net: TeacherNet, batch: Tensor, train: bool = False) -> list[Tensor]:
    return net.forward(batch, train=train).pre_bn


def tap_pre_activation(net: TeacherNet, batch: Tensor) -> list[Tensor]:
    """Post-BN, pre-ReLU features of the tapped blocks, each [B×C_l]."""
    trace = net.forward(batch, train=False)
    return [trace.pre_act[i] for i in net.taps]


def predict(net: TeacherNet, inputs: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return forward_eval(net, Tensor(inputs)).data.argmax(axis=1)


def accuracy(net, inputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(net, inputs) == labels))


# ---- training -----------------------------------------------------------------
@dataclass
class TeacherTrainConfig:
    epochs: int = 80
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64


@dataclass
class TrainReport:
    train_acc: float
    test_acc: float
    final_loss: float


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    return ad.scalar_mul(ad.sum(ad.log_softmax_rows(logits) * Tensor(onehot)), -1.0 / b)


def train_teacher(net: TeacherNet, train, test, cfg: TeacherTrainConfig, seed: int = 0) -> TrainReport:
    if train.num_classes < 2:
        raise ContractError("teacher training needs at least 2 classes")
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum)
    rng = stream(seed, "teacher.batches")
    n = len(train)
    loss_value = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            opt.zero_grad()
            loss = cross_entropy(forward_train(net, Tensor(train.inputs[idx])), train.labels[idx])
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericalError("teacher loss diverged", step=epoch, components={"cross_entropy": loss_value})
            ad.backward(loss)
            opt.step()
        log.debug("teacher epoch %d loss %.6f", epoch, loss_value)
    return TrainReport(accuracy(net, train.inputs, train.labels), accuracy(net, test.inputs, test.labels), loss_value)


# ---- checkpoints ---------------------------------------------------------------------
def _arch(net: TeacherNet) -> dict:
    return {
        "input_dim": net.input_dim,
        "hidden": list(net.hidden),
        "num_classes": net.num_classes,
        "taps": list(net.taps),
        "bn_momentum": net.bns[0].momentum if net.bns else 0.1,
        "bn_eps": net.bns[0].eps if net.bns else 1e-5,
    }


def teacher_document(net: TeacherNet) -> dict:
    state = net.state()
    running = {k: v.tolist() for k, v in state.items() if "running" in k}
    params = {k: v.reshape(-1).tolist() for k, v in state.items() if "running" not in k}
    return {"schema_version": SCHEMA_VERSION, "kind": "teacher", "arch": _arch(net),
            "params": params, "bn_running": running}


def save_checkpoint(net: TeacherNet, path) -> None:
    """Write a JSON checkpoint; floats use repr so they round-trip exactly."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(teacher_document(net), indent=1))


def read_document(path, kind: str) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed checkpoint at char {exc.pos}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: checkpoint root must be an object")
    if "schema_version" not in doc:
        raise ParseError(f"{path}: missing field 'schema_version'")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise VersionError(f"{path}: field 'schema_version' is {doc['schema_version']!r}, expected {SCHEMA_VERSION}")
    if doc.get("kind") != kind:
        raise ParseError(f"{path}: field 'kind' is {doc.get('kind')!r}, expected {kind!r}")
    return doc


def take_array(section: dict, name: str, shape: tuple[int, ...], where: str) -> np.ndarray:
    if name not in section:
        raise ParseError(f"missing field '{where}.{name}'")
    try:
        arr = np.array(section[name], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field '{where}.{name}' is not a float array") from exc
    if arr.size != int(np.prod(shape)):
        raise ParseError(f"field '{where}.{name}' has {arr.size} values, expected {int(np.prod(shape))}")
    return arr.reshape(shape)


def teacher_from_document(doc: dict) -> TeacherNet:
    try:
        arch = doc["arch"]
        params, running = doc["params"], doc["bn_running"]
        net = TeacherNet(int(arch["input_dim"]), tuple(arch["hidden"]), int(arch["num_classes"]),
                         bn_momentum=float(arch["bn_momentum"]), bn_eps=float(arch["bn_eps"]), taps=arch["taps"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"missing or malformed field {exc}") from exc
    for i, (layer, bn) in enumerate(zip(net.layers, net.bns)):
        layer.W.data = take_array(params, f"layers.{i}.W", layer.W.shape, "params")
        layer.b.data = take_array(params, f"layers.{i}.b", layer.b.shape, "params")
        bn.gamma_bn.data = take_array(params, f"bn.{i}.gamma", bn.gamma_bn.shape, "params")
        bn.beta_bn.data = take_array(params, f"bn.{i}.beta", bn.beta_bn.shape, "params")
        bn.running_mean = take_array(running, f"bn.{i}.running_mean", bn.running_mean.shape, "bn_running")
        bn.running_var = take_array(running, f"bn.{i}.running_var", bn.running_var.shape, "bn_running")
    net.head.W.data = take_array(params, "head.W", net.head.W.shape, "params")
    net.head.b.data = take_array(params, "head.b", net.head.b.shape, "params")
    return net


def load_checkpoint(path) -> TeacherNet:
    return teacher_from_document(read_document(path, "teacher"))
