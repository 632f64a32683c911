"""A one-layer attention classifier with hand-written gradients, trained by SGD
on a synthetic point-set task (ring versus Gaussian blob).

Architecture per set ``X`` (``d x N``)::

    H = X + s * Attn(W_q X, W_k X, W_v X)
    F = tanh(W_1 H + b_1)
    logits = W_c pool(F) + b_c

``s`` is ``N`` for ESP (its plan carries mass ``1/N`` per token) and 1 otherwise.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .annealing import AnnealSchedule, effective_mode
from .attention import KINDS, AttentionConfig, attention_backward, attention_forward
from .errors import DivergenceError, NonFiniteError, ParameterError, ShapeError, UnsupportedModeError

PARAM_NAMES = ("w_q", "w_k", "w_v", "w_1", "b_1", "w_c", "b_c")
REPORT_FIELDS = ("epoch", "loss", "accuracy", "temperature", "mode")


@dataclass(frozen=True)
class SyntheticTask:
    """Balanced binary task: class 0 sets lie on a unit ring, class 1 sets are
    isotropic Gaussian (``sigma = 0.4``) blobs. Both live in a 2-D plane
    embedded into ``dim`` dimensions by a fixed random linear map.
    """

    n_points: int = 16
    dim: int = 8
    n_train: int = 128
    n_test: int = 128
    seed: int = 0
    kind: str = "ring_vs_gaussian"
    ring_radius: float = 1.0
    gaussian_sigma: float = 0.4

    def __post_init__(self):
        if self.kind != "ring_vs_gaussian":
            raise ParameterError(f"unknown task kind {self.kind!r}")
        if self.n_train % 2 or self.n_test % 2:
            raise ParameterError("split sizes must be even to keep classes balanced")

    def embedding(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0])
        return rng.standard_normal((self.dim, 2)) / math.sqrt(2.0)

    def _sample(self, rng, label: int) -> np.ndarray:
        n = self.n_points
        if label == 0:
            angle = rng.uniform(0.0, 2.0 * math.pi, n)
            plane = self.ring_radius * np.vstack([np.cos(angle), np.sin(angle)])
        else:
            plane = self.gaussian_sigma * rng.standard_normal((2, n))
        return self.embedding() @ plane

    def split(self, which: Literal["train", "test"]) -> tuple[list[np.ndarray], np.ndarray]:
        size, stream = (self.n_train, 1) if which == "train" else (self.n_test, 2)
        rng = np.random.default_rng([self.seed, stream])
        labels = np.tile([0, 1], size // 2)
        return [self._sample(rng, int(y)) for y in labels], labels


@dataclass
class TinyModel:
    kind: str
    cfg: AttentionConfig
    params: dict[str, np.ndarray]
    pooling: Literal["mean", "max"] = "mean"
    seed: int = 0

    @classmethod
    def init(cls, kind: str = "esp", d: int = 8, m: int = 4, hidden: int = 16,
             cfg: AttentionConfig | None = None, pooling: str = "mean", seed: int = 0) -> TinyModel:
        if kind not in KINDS:
            raise ParameterError(f"unknown attention kind {kind!r}")
        if pooling not in ("mean", "max"):
            raise ParameterError(f"unknown pooling {pooling!r}")
        cfg = cfg or AttentionConfig(sort_temperature=0.1, inverse_temperature=1.0)
        rows = 2 * m if kind == "diff" else m
        rng = np.random.default_rng(seed)

        def w(shape, fan_in):
            return rng.standard_normal(shape) / math.sqrt(fan_in)

        params = {
            "w_q": w((rows, d), d),
            "w_k": w((rows, d), d),
            "w_v": 0.5 * w((d, d), d),
            "w_1": w((hidden, d), d),
            "b_1": np.zeros(hidden),
            "w_c": w((2, hidden), hidden),
            "b_c": np.zeros(2),
        }
        return cls(kind, cfg, params, pooling, seed)

    @property
    def dim(self) -> int:
        return self.params["w_v"].shape[0]

    def copy(self) -> TinyModel:
        return TinyModel(self.kind, self.cfg, {k: v.copy() for k, v in self.params.items()},
                         self.pooling, self.seed)

    def with_sorting(self, mode: str, temperature: float | None = None) -> TinyModel:
        cfg = self.cfg.with_(sort_mode=mode)
        if temperature is not None:
            cfg = cfg.with_(sort_temperature=temperature)
        return TinyModel(self.kind, cfg, self.params, self.pooling, self.seed)

    def uses_sorting(self) -> bool:
        return self.kind == "esp" or (self.kind == "diff" and self.cfg.inner == "esp")


@dataclass
class _SampleTape:
    x: np.ndarray
    h: np.ndarray
    f: np.ndarray
    pooled: np.ndarray
    probs: np.ndarray
    label: int
    attn: object
    pool_index: np.ndarray | None


@dataclass
class LossTape:
    model: TinyModel
    samples: list[_SampleTape]
    losses: np.ndarray


def _forward_one(model: TinyModel, x: np.ndarray, label: int) -> tuple[float, _SampleTape]:
    p = model.params
    if x.shape[0] != model.dim:
        raise ShapeError(f"sample has {x.shape[0]} features, model expects {model.dim}")
    n = x.shape[1]
    scale = n if model.kind == "esp" else 1.0
    out, cache = attention_forward(model.kind, p["w_q"] @ x, p["w_k"] @ x, p["w_v"] @ x, model.cfg)
    h = x + scale * out
    f = np.tanh(p["w_1"] @ h + p["b_1"][:, None])
    if model.pooling == "mean":
        pooled, idx = f.mean(axis=1), None
    else:
        idx = f.argmax(axis=1)
        pooled = f[np.arange(f.shape[0]), idx]
    logits = p["w_c"] @ pooled + p["b_c"]
    z = logits - logits.max()
    log_probs = z - math.log(np.exp(z).sum())
    loss = -float(log_probs[label])
    return loss, _SampleTape(x, h, f, pooled, np.exp(log_probs), label, cache, idx)


def forward_loss(model: TinyModel, batch) -> tuple[float, LossTape]:
    """Mean cross-entropy over ``batch = (samples, labels)``."""
    xs, ys = batch
    if len(xs) != len(ys) or not len(xs):
        raise ShapeError("batch needs matching, non-empty samples and labels")
    losses, tapes = [], []
    for x, y in zip(xs, ys):
        loss, tape = _forward_one(model, np.asarray(x, dtype=np.float64), int(y))
        losses.append(loss)
        tapes.append(tape)
    losses = np.array(losses)
    return float(losses.mean()), LossTape(model, tapes, losses)


def backward(tape: LossTape, attention_backward_fn: Callable = attention_backward) -> dict[str, np.ndarray]:
    """Gradients of the mean loss with respect to every parameter."""
    model = tape.model
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    b = len(tape.samples)
    for s in tape.samples:
        n = s.x.shape[1]
        scale = n if model.kind == "esp" else 1.0
        dlogits = s.probs.copy()
        dlogits[s.label] -= 1.0
        dlogits /= b
        grads["w_c"] += np.outer(dlogits, s.pooled)
        grads["b_c"] += dlogits
        dpooled = p["w_c"].T @ dlogits
        if s.pool_index is None:
            df = np.repeat(dpooled[:, None] / n, n, axis=1)
        else:
            df = np.zeros_like(s.f)
            df[np.arange(df.shape[0]), s.pool_index] = dpooled
        dz = df * (1.0 - s.f * s.f)
        grads["w_1"] += dz @ s.h.T
        grads["b_1"] += dz.sum(axis=1)
        dh = p["w_1"].T @ dz
        dq, dk, dv = attention_backward_fn(s.attn, scale * dh)
        grads["w_q"] += dq @ s.x.T
        grads["w_k"] += dk @ s.x.T
        grads["w_v"] += dv @ s.x.T
    return grads


def predict(model: TinyModel, xs: Sequence[np.ndarray]) -> np.ndarray:
    labels = np.zeros(len(xs), dtype=int)
    _, tape = forward_loss(model, (xs, labels))
    return np.array([int(np.argmax(s.probs)) for s in tape.samples])


def accuracy(model: TinyModel, xs, ys) -> float:
    return float(np.mean(predict(model, xs) == np.asarray(ys)))


def sgd_step(model: TinyModel, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, g in grads.items():
        model.params[name] -= lr * g
        if not np.all(np.isfinite(model.params[name])):
            raise DivergenceError(f"parameter {name} became non-finite")


@dataclass
class TrainingReport:
    rows: list[dict] = field(default_factory=list)
    fields: tuple[str, ...] = REPORT_FIELDS

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.fields), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k]) for k in self.fields})
        return buf.getvalue()

    @property
    def final(self) -> dict:
        return self.rows[-1]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def train(model: TinyModel, task: SyntheticTask, epochs: int = 200,
          schedule: AnnealSchedule | None = None, lr: float = 0.5, batch_size: int = 16,
          log_hard_eval: bool = False) -> TrainingReport:
    """Mini-batch SGD, deterministic given ``model.seed`` and ``task.seed``.

    Row ``e`` of the report holds the mean training loss of epoch ``e`` and the
    test accuracy at its end; row 0 describes the untrained model. With a
    schedule, epoch ``e`` trains at ``temperature_at(schedule, e)``.
    """
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    if not lr > 0:
        raise ParameterError("learning rate must be > 0")
    train_x, train_y = task.split("train")
    test_x, test_y = task.split("test")
    fields = REPORT_FIELDS + (("soft_accuracy", "hard_accuracy") if log_hard_eval else ())
    report = TrainingReport(fields=fields)
    rng = np.random.default_rng([model.seed, 7])

    def configure(epoch):
        if schedule is None or not model.uses_sorting():
            return model.cfg.sort_mode, model.cfg.sort_temperature
        return effective_mode(schedule, epoch, training=True)

    def log(epoch, loss, mode, temp):
        current = model.with_sorting(mode, temp)
        row = {"epoch": epoch, "loss": loss, "accuracy": accuracy(current, test_x, test_y),
               "temperature": temp, "mode": mode}
        if log_hard_eval:
            row["soft_accuracy"] = accuracy(model.with_sorting("soft", temp), test_x, test_y)
            row["hard_accuracy"] = accuracy(model.with_sorting("hard", temp), test_x, test_y)
        report.rows.append(row)

    mode, temp = configure(0)
    loss0, _ = forward_loss(model.with_sorting(mode, temp), (train_x, train_y))
    log(0, loss0, mode, temp)
    n = len(train_x)
    for epoch in range(1, epochs + 1):
        mode, temp = configure(epoch)
        if mode == "hard" and model.uses_sorting():
            raise UnsupportedModeError("cannot train through hard sorting; lower switch_to_hard_at")
        current = model.with_sorting(mode, temp)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, tape = forward_loss(current, ([train_x[i] for i in idx], train_y[idx]))
                    grads = backward(tape)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            sgd_step(model, grads, lr)
            total += loss * len(idx)
        log(epoch, total / n, mode, temp)
    return report


def _flat_loss(model: TinyModel, batch) -> float:
    return forward_loss(model, batch)[0]


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grads(model: TinyModel, batch, h: float = 1e-5, names=PARAM_NAMES) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        w = model.params[name]
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = _flat_loss(model, batch)
            w[idx] = orig - h
            down = _flat_loss(model, batch)
            w[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def grad_check(model: TinyModel, tolerance: float = 1e-3, batch=None, h: float = 1e-5,
               attention_backward_fn: Callable = attention_backward) -> GradCheckReport:
    """Compare analytic gradients against central differences on every parameter."""
    if model.uses_sorting() and model.cfg.sort_mode != "soft":
        raise UnsupportedModeError("gradient check needs soft sorting")
    if model.pooling != "mean":
        raise UnsupportedModeError("gradient check needs mean pooling")
    if batch is None:
        task = SyntheticTask(n_points=6, dim=model.dim, n_train=4, n_test=2, seed=model.seed)
        batch = task.split("train")
    _, tape = forward_loss(model, batch)
    analytic = backward(tape, attention_backward_fn)
    numeric = numeric_grads(model, batch, h)
    per = {name: rel_error(analytic[name], numeric[name]) for name in PARAM_NAMES}
    return GradCheckReport(max(per.values()), tolerance, per)
