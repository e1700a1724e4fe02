"""Quantized zeroth-order training.

Each query perturbs the integer weight codes in place by ``+delta``, runs a
forward, moves to ``-delta``, runs a second forward, and moves back.  Codes
live in a widened integer type and are only clamped when a forward reads them,
so the three moves cancel exactly.  The update then subtracts a stochastically
rounded step from the codes and saturates at the grid limits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np

from .data import Dataset, sample_batch
from .errors import ConfigurationError, IntegrityError, RunError
from .estimators import Perturbation
from .models import Model, Param, attach_lora
from .quant import QuantFormat, QuantScheme, QuantTensor, dequantize, quantize_stochastic
from .rng import RngStream, as_stream

OPTIMIZERS = ("quzo", "quzo-rge1", "ste-fo", "mezo-fp")
_STEP_FORMAT = QuantFormat("INT", 31)


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    epsilon: float = 1e-3
    queries: int = 1
    batch_size: int = 32
    weight_format: Optional[str] = "INT8"
    act_format: Optional[str] = "INT8"
    perturbation_format: Optional[str] = "INT8"
    optimizer: str = "quzo"
    accumulation_steps: int = 1
    seed: int = 0
    target: str = "full"
    lora_rank: int = 8
    lora_alpha: float = 1.0
    lora_format: Optional[str] = "INT8"
    weight_decay: float = 0.0
    headroom: float = 1.0
    eval_every: int = 100
    verify_recovery: bool = True
    spike_guard: float = 1e6

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.lr < 0 or self.epsilon <= 0:
            raise ConfigurationError("learning rate must be >= 0 and epsilon > 0")
        if self.queries < 1 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigurationError("queries, batch_size and accumulation_steps must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.target not in ("full", "lora"):
            raise ConfigurationError(f"unknown target {self.target!r}")
        for name in ("weight_format", "act_format", "perturbation_format", "lora_format"):
            v = getattr(self, name)
            if v is not None:
                QuantFormat.parse(v)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def fmt(self, name: str) -> Optional[QuantFormat]:
        v = getattr(self, name)
        return QuantFormat.parse(v) if v is not None else None

    def learning_rate(self, t: int) -> float:
        if self.lr_schedule == "linear" and self.steps > 0:
            return self.lr * (1.0 - t / self.steps)
        return self.lr


class AllocationTracker:
    """Counts the transient buffers the trainer allocates, in elements.

    ``peak`` is the largest number of simultaneously held elements and
    ``largest`` the largest single buffer.  Training never holds a buffer as
    large as the whole trainable parameter vector.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.largest = 0
        self.count = 0

    def hold(self, *arrays):
        n = sum(int(np.size(a)) for a in arrays)
        self.live += n
        self.count += len(arrays)
        self.peak = max(self.peak, self.live)
        self.largest = max([self.largest] + [int(np.size(a)) for a in arrays])
        return n

    def release(self, n: int):
        self.live -= n


class _NullTracker(AllocationTracker):
    def hold(self, *arrays):
        return 0


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    COLUMNS = ("step", "lr", "loss", "mu", "clamp_events", "saturated", "discarded",
               "eval_loss", "eval_acc")

    def append(self, rec: dict):
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([_fmt_cell(r.get(c)) for c in self.COLUMNS])
        return buf.getvalue()

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _checksum(params: List[Param]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in params:
        h.update(p.qt.codes.tobytes() if p.is_quantized else p.data.tobytes())
    return h.hexdigest()


def prepare_model(model: Model, config: TrainConfig) -> Model:
    """Quantize weights and attach adapters as the config asks; idempotent."""
    wf, af = config.fmt("weight_format"), config.fmt("act_format")
    model.quantize(wf, af, headroom=config.headroom)
    if config.target == "lora" and not any(l.lora for l in model.linear_layers()):
        attach_lora(model, config.lora_rank, config.lora_alpha, seed=config.seed,
                    fmt=config.fmt("lora_format"))
    if config.optimizer != "ste-fo":
        small = [p.name for p in model.trainable_params()
                 if p.is_quantized and config.epsilon <= 0.5 * np.min(p.qt.scheme.scale)]
        if small:
            warnings.warn(f"epsilon={config.epsilon} is below half a grid step for {small}; "
                          "those perturbations round to zero", RuntimeWarning, stacklevel=2)
    return model


def _delta_codes(p: Param, probe: np.ndarray, epsilon: float) -> np.ndarray:
    """Integer-code version of ``epsilon * probe`` on ``p``'s grid (nearest rounding)."""
    s = p.qt.scheme.scale_for(probe.ndim)
    return np.rint(epsilon * probe / s).astype(np.int64)


def quantized_update(w: QuantTensor, direction: np.ndarray, mu: float, eta: float, n: int,
                     rng, return_probs: bool = False, decay: Optional[np.ndarray] = None):
    """Subtract the stochastically rounded step ``(eta * mu / n) * direction`` from ``w``.

    INT weights: the step is divided by the weight scale, rounded to integer
    codes, subtracted, and the result saturates at the grid limits.
    Minifloat weights: the stepped value is stochastically rounded back onto
    the grid.  Returns ``(new QuantTensor, saturated element count)``.
    """
    step = (eta * mu / n) * np.asarray(direction, dtype=np.float64)
    if decay is not None:
        step = step + decay
    fmt = w.format
    scale = w.scheme.scale_for(step.ndim)
    if fmt.kind == "INT":
        sr = quantize_stochastic(step / scale, QuantScheme(_STEP_FORMAT, 1.0, rounding="stochastic"),
                                 rng, return_probs)
        raw = w.codes.astype(np.int64) - sr.codes
        lo, hi = w.clamp_bounds()
        saturated = int(np.count_nonzero((raw < lo) | (raw > hi)))
        out = QuantTensor(np.clip(raw, lo, hi), w.scheme, probs=sr.probs)
        return out, saturated
    target = dequantize(w) - step
    saturated = int(np.count_nonzero(np.abs(target / scale) > fmt.max_value))
    q = quantize_stochastic(target, w.scheme.with_rounding("stochastic"), rng, return_probs)
    return QuantTensor(q.codes, w.scheme, probs=q.probs), saturated


class _QueryRunner:
    """Perturb, probe, restore and update for one query, tensor by tensor."""

    def __init__(self, model: Model, config: TrainConfig, tracker: AllocationTracker):
        self.model = model
        self.config = config
        self.tracker = tracker
        self.params = model.trainable_params()
        self.layout = [(p.name, p.shape) for p in self.params]
        fmt = config.fmt("perturbation_format")
        self.pfmt = None if config.optimizer == "mezo-fp" else fmt
        self.float_snapshots = {}

    def perturbation(self, path: RngStream) -> Perturbation:
        return Perturbation(path, self.config.epsilon, self.pfmt, self.layout)

    def move(self, path: RngStream, k: int):
        """Shift every trainable tensor by ``k * epsilon * u1`` (codes for quantized tensors)."""
        pert = self.perturbation(path)
        clamps = 0
        for t, p in enumerate(self.params):
            u, u1, _, c = pert.tensor(t, with_u2=False)
            held = self.tracker.hold(u, u1)
            clamps += c
            if p.is_quantized:
                delta = _delta_codes(p, u1, self.config.epsilon)
                held += self.tracker.hold(delta)
                p.qt.codes += (k * delta).astype(p.qt.codes.dtype)
            else:
                if p.name not in self.float_snapshots:
                    # float tensors cannot be moved back exactly, so keep the original
                    self.float_snapshots[p.name] = p.data.copy()
                    self.tracker.hold(p.data)
                p.data = p.data + k * self.config.epsilon * u1
            self.tracker.release(held)
        return clamps

    def probe(self, path: RngStream, batches) -> tuple:
        """Sensitivity of the loss along the snapped ``u1``, averaged over micro-batches."""
        mus, losses, clamps = [], [], 0
        for batch in batches:
            clamps += self.move(path, +1)
            l1 = self.model.loss(batch)
            self.move(path, -2)
            l2 = self.model.loss(batch)
            self.restore(path)
            mus.append((l1 - l2) / (2.0 * self.config.epsilon))
            losses.append(l1)
        return float(np.mean(mus)), float(np.mean(losses)), clamps

    def restore(self, path: RngStream):
        """Move quantized tensors back by ``+delta``; float tensors come back from their snapshots."""
        if any(p.is_quantized for p in self.params):
            pert = self.perturbation(path)
            for t, p in enumerate(self.params):
                if not p.is_quantized:
                    continue
                u, u1, _, _ = pert.tensor(t, with_u2=False)
                held = self.tracker.hold(u, u1)
                delta = _delta_codes(p, u1, self.config.epsilon)
                held += self.tracker.hold(delta)
                p.qt.codes += delta.astype(p.qt.codes.dtype)
                self.tracker.release(held)
        for p in self.params:
            if p.name in self.float_snapshots:
                p.data = self.float_snapshots.pop(p.name)
                self.tracker.release(p.data.size)

    def update(self, path: RngStream, mu: float, eta: float):
        cfg = self.config
        pert = self.perturbation(path)
        saturated = 0
        for t, p in enumerate(self.params):
            rge1 = cfg.optimizer == "quzo-rge1"
            u, u1, u2, _ = pert.tensor(t, with_u2=not rge1)
            held = self.tracker.hold(u, u1) + (0 if rge1 else self.tracker.hold(u2))
            direction = u1 if rge1 else u2
            decay = (eta * cfg.weight_decay / cfg.queries) * p.value() if cfg.weight_decay else None
            if p.is_quantized:
                new, sat = quantized_update(p.qt, direction, mu, eta, cfg.queries,
                                            path.at(role="update", index=t), decay=decay)
                p.qt = new
                saturated += sat
            else:
                step = (eta * mu / cfg.queries) * direction
                p.data = p.data - (step if decay is None else step + decay)
            self.tracker.release(held)
        return saturated


def accumulate_and_step(model: Model, micro_batches, config: TrainConfig, t: int,
                        tracker: Optional[AllocationTracker] = None) -> dict:
    """One quantized ZO step whose sensitivities average over ``micro_batches``.

    Every micro-batch reuses the same perturbation seeds, so the weights are
    updated once per query with the mean sensitivity.  With a single
    micro-batch this is exactly :func:`quzo_step`.
    """
    if config.optimizer == "ste-fo":
        raise ConfigurationError("accumulate_and_step drives the ZO optimizers only")
    tracker = tracker or _NullTracker()
    runner = _QueryRunner(model, config, tracker)
    base = as_stream(config.seed)
    eta = config.learning_rate(t)
    losses, mus = [], []
    clamps = saturated = discarded = 0
    for i in range(config.queries):
        path = base.at(step=t, query=i)
        before = _checksum(runner.params) if config.verify_recovery else None
        mu, loss, c = runner.probe(path, micro_batches)
        clamps += c
        if before is not None and _checksum(runner.params) != before:
            raise IntegrityError(f"weights not recovered after query {i} of step {t}")
        if not math.isfinite(mu):
            raise RunError(f"non-finite sensitivity at step {t}, query {i}")
        losses.append(loss)
        if abs(mu) > config.spike_guard:
            discarded += 1
            continue
        mus.append(mu)
        saturated += runner.update(path, mu, eta)
    return {
        "step": t, "lr": eta, "loss": float(np.mean(losses)),
        "mu": float(np.mean(mus)) if mus else None,
        "clamp_events": clamps, "saturated": saturated, "discarded": discarded,
    }


def quzo_step(model: Model, batch, config: TrainConfig, t: int,
              tracker: Optional[AllocationTracker] = None) -> dict:
    """One step of quantized ZO training over ``config.queries`` queries."""
    return accumulate_and_step(model, [batch], config, t, tracker)


def ste_fo_step(model: Model, batch, config: TrainConfig, t: int) -> dict:
    """First-order baseline: straight-through gradients, quantized SGD update."""
    eta = config.learning_rate(t)
    loss, grads = model.loss_and_grad(batch)
    saturated = 0
    for i, p in enumerate(model.trainable_params()):
        g = grads[p.name]
        decay = eta * config.weight_decay * p.value() if config.weight_decay else None
        if p.is_quantized:
            p.qt, sat = quantized_update(p.qt, g, 1.0, eta, 1,
                                         as_stream(config.seed).at(step=t, role="update", index=i),
                                         decay=decay)
            saturated += sat
        else:
            p.data = p.data - eta * g - (0.0 if decay is None else decay)
    return {"step": t, "lr": eta, "loss": float(loss), "mu": None, "clamp_events": 0,
            "saturated": saturated, "discarded": 0}


def evaluate(model: Model, dataset: Dataset):
    batch = dataset.batch()
    return model.loss(batch), model.accuracy(batch)


def train(model: Model, dataset: Dataset, config: TrainConfig, eval_data: Optional[Dataset] = None,
          tracker: Optional[AllocationTracker] = None):
    """Run ``config.steps`` steps; returns ``(model, TrainLog)``.

    The model is prepared (quantized, adapters attached) according to the
    config and then mutated in place.
    """
    started = time.perf_counter()
    prepare_model(model, config)
    eval_data = eval_data or dataset
    log = TrainLog()
    base = as_stream(config.seed)
    total_elems = sum(p.size for p in model.trainable_params())
    for t in range(config.steps):
        if config.optimizer == "ste-fo":
            batch = sample_batch(dataset, config.batch_size, base.at(step=t, role="batch"))
            rec = ste_fo_step(model, batch, config, t)
        else:
            micro = [sample_batch(dataset, config.batch_size, base.at(step=t, query=k, role="batch"))
                     for k in range(config.accumulation_steps)]
            rec = accumulate_and_step(model, micro, config, t, tracker)
        if config.eval_every and ((t + 1) % config.eval_every == 0 or t + 1 == config.steps):
            rec["eval_loss"], rec["eval_acc"] = evaluate(model, eval_data)
        log.append(rec)
    final_loss, final_acc = evaluate(model, eval_data)
    n_rec = max(len(log.records), 1)
    log.summary = {
        "final_loss": final_loss,
        "final_acc": final_acc,
        "clamp_rate": sum(r["clamp_events"] for r in log.records)
                      / max(total_elems * n_rec * config.queries * config.accumulation_steps, 1),
        "saturation_rate": sum(r["saturated"] for r in log.records)
                           / max(total_elems * n_rec * config.queries, 1),
        "discarded_queries": sum(r["discarded"] for r in log.records),
        "wall_time": time.perf_counter() - started,
    }
    return model, log
