"""Measurement tools: estimator bias sweeps, per-layer datatype search,
outlier-aware INT8 storage, perturbation bit-width sweeps and memory accounting."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InputError
from .estimators import estimate_many
from .quant import (QuantFormat, QuantScheme, QuantTensor, dequantize, fit_scale,
                    quantize_nearest)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- bias sweep

@dataclass
class BiasRow:
    estimator: str
    bits: int
    n: int
    rel_l2_error: float
    clamp_rate: float


@dataclass
class BiasSweepResult:
    rows: List[BiasRow]
    wall_time: float = 0.0
    reference_norm: float = 0.0

    COLUMNS = ("estimator", "bits", "n", "rel_l2_error", "clamp_rate")

    def error(self, estimator: str, bits: int) -> float:
        for r in self.rows:
            if r.estimator == estimator and r.bits == bits:
                return r.rel_l2_error
        raise KeyError((estimator, bits))

    def to_csv(self) -> str:
        return _csv(self.COLUMNS, [(r.estimator, r.bits, r.n, r.rel_l2_error, r.clamp_rate)
                                   for r in self.rows])

    def to_long_csv(self) -> str:
        """One ``(series, x, y)`` row per point, ready for gnuplot or vega-lite."""
        return _csv(("series", "bits", "metric", "value"),
                    [(r.estimator, r.bits, m, getattr(r, m))
                     for r in self.rows for m in ("rel_l2_error", "clamp_rate")])

    def to_json(self) -> dict:
        return {"rows": [r.__dict__ for r in self.rows], "reference_norm": self.reference_norm,
                "wall_time": self.wall_time}


def bias_sweep(model, batch, bits_list=(3, 4, 8), n: int = 1000, epsilon: float = 1e-3,
               seed=0) -> BiasSweepResult:
    """Relative L2 distance of Q-RGE1 and Q-RGE2 means from the full-precision RGE mean.

    All three estimators share the same Gaussian draws, so the comparison
    isolates the error that quantizing the perturbation introduces.
    """
    started = time.perf_counter()
    if not bits_list:
        raise InputError("bits_list is empty")
    ref = estimate_many(model, batch, n, epsilon, None, seed, ("RGE",))["RGE"].vector
    norm = float(np.linalg.norm(ref))
    if norm == 0.0:
        raise InputError("reference gradient is zero; the loss is flat on this batch")
    rows = []
    for bits in bits_list:
        fmt = QuantFormat("INT", int(bits))
        est = estimate_many(model, batch, n, epsilon, fmt, seed, ("Q-RGE1", "Q-RGE2"))
        for kind in ("Q-RGE1", "Q-RGE2"):
            e = est[kind]
            rows.append(BiasRow(kind, int(bits), n, float(np.linalg.norm(e.vector - ref) / norm),
                                float(e.clamp_rate)))
    return BiasSweepResult(rows, time.perf_counter() - started, norm)


# ---------------------------------------------------------- datatype search

@dataclass
class LayerChoice:
    layer: str
    candidates: List[str]
    mse: Dict[str, float]
    chosen: str


@dataclass
class DatatypeReport:
    layers: List[LayerChoice]
    skipped: List[str] = field(default_factory=list)

    def chosen(self) -> Dict[str, str]:
        return {c.layer: c.chosen for c in self.layers}

    def to_csv(self) -> str:
        rows = [(c.layer, f, c.mse[f], int(f == c.chosen)) for c in self.layers for f in c.candidates]
        return _csv(("layer", "format", "mse", "chosen"), rows)

    def to_json(self) -> dict:
        return {"layers": [c.__dict__ for c in self.layers], "skipped": self.skipped}


def quantization_mse(w: np.ndarray, fmt: QuantFormat, granularity: str = "per-channel") -> float:
    """Round-trip MSE of nearest rounding after max-abs calibration."""
    w = np.asarray(w, dtype=np.float64)
    gran = granularity if w.ndim >= 2 else "per-tensor"
    q = quantize_nearest(w, fit_scale(w, fmt, gran, axis=0))
    return float(np.mean((w - dequantize(q)) ** 2))


def _weight_tensors(model):
    if isinstance(model, dict):
        return list(model.items())
    if isinstance(model, (list, tuple)):
        return [(f"layer{i}", w) for i, w in enumerate(model)]
    return [(lyr.name, lyr.weight.value()) for lyr in model.linear_layers()]


def datatype_search(model, candidates: Sequence, granularity: str = "per-channel") -> DatatypeReport:
    """Pick, for every weight matrix, the candidate format with the lowest round-trip MSE.

    ``model`` may be a :class:`~quzo.models.Model`, a ``{name: array}`` dict or a
    list of arrays.  Ties go to INT formats, then to the earlier candidate.
    """
    fmts = [c if isinstance(c, QuantFormat) else QuantFormat.parse(c) for c in candidates]
    if not fmts:
        raise InputError("no candidate formats")
    names = [f.name for f in fmts]
    out, skipped = [], []
    for name, w in _weight_tensors(model):
        w = np.asarray(w)
        if w.size == 0:
            skipped.append(name)
            continue
        mse = {f.name: quantization_mse(w, f, granularity) for f in fmts}
        best = min(range(len(fmts)), key=lambda i: (mse[names[i]], fmts[i].kind != "INT", i))
        out.append(LayerChoice(name, names, mse, names[best]))
    return DatatypeReport(out, skipped)


# ------------------------------------------------------- outlier quantization

RESERVED_CODE = -128
_E4M3 = QuantFormat.parse("E4M3")
_INT8 = QuantFormat("INT", 8)


@dataclass
class OutlierQuantTensor:
    """INT8 tensor whose code ``-128`` marks entries stored in an FP8 side-table."""

    base: QuantTensor
    indices: np.ndarray
    side: Optional[QuantTensor]

    @property
    def alpha(self) -> float:
        return self.indices.size / self.base.size

    def packed(self) -> np.ndarray:
        """Base codes as the int8 array a kernel would read."""
        return self.base.codes.astype(np.int8)

    def dequantize(self) -> np.ndarray:
        out = dequantize(self.base).ravel()
        if self.indices.size:
            out[self.indices] = dequantize(self.side)
        return out.reshape(self.base.shape)

    def to_json(self) -> dict:
        return {
            "shape": list(self.base.shape),
            "base_scheme": self.base.scheme.to_json(),
            "alpha": self.alpha,
            "indices": self.indices.tolist(),
            "side_scheme": None if self.side is None else self.side.scheme.to_json(),
            "side_codes": [] if self.side is None else self.side.codes.tolist(),
        }


def outlier_quantize(x, alpha_target: float = 0.01) -> OutlierQuantTensor:
    """INT8 with the largest ``alpha_target`` fraction of magnitudes moved to an E4M3 side-table.

    The threshold is the ``1 - alpha_target`` quantile of ``|x|``; entries
    strictly above it are outliers.  Inliers are calibrated on their own
    max-abs, outliers share one side-table scale.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot quantize an empty tensor")
    if not 0.0 <= alpha_target < 1.0:
        raise InputError("alpha_target must lie in [0, 1)")
    flat = x.ravel()
    mag = np.abs(flat)
    thresh = np.quantile(mag, 1.0 - alpha_target)
    outlier = mag > thresh
    idx = np.flatnonzero(outlier)
    inliers = np.where(outlier, 0.0, flat)
    base = quantize_nearest(inliers, fit_scale(inliers, _INT8))
    codes = base.codes.copy()
    codes[idx] = RESERVED_CODE
    side = None
    if idx.size:
        vals = flat[idx]
        side = quantize_nearest(vals, fit_scale(vals, _E4M3))
    return OutlierQuantTensor(QuantTensor(codes.reshape(x.shape), base.scheme), idx, side)


# ---------------------------------------------------- perturbation bit sweep

@dataclass
class BitSweepResult:
    rows: List[Tuple[int, float, float]]

    @property
    def spread(self) -> float:
        accs = [r[1] for r in self.rows]
        return max(accs) - min(accs)

    def to_csv(self) -> str:
        return _csv(("bits", "final_acc", "final_loss"), self.rows)

    def to_json(self) -> dict:
        return {"rows": [dict(zip(("bits", "final_acc", "final_loss"), r)) for r in self.rows],
                "spread": self.spread}


def perturbation_bit_sweep(model, dataset, bits_list=(2, 4, 8), config=None) -> BitSweepResult:
    """Train a fresh copy of ``model`` once per perturbation width; 32 means unquantized."""
    from dataclasses import replace

    from .trainer import TrainConfig, train
    config = config or TrainConfig()
    rows = []
    for bits in bits_list:
        pf = None if int(bits) >= 32 else f"INT{int(bits)}"
        _, log = train(model.copy(), dataset, replace(config, perturbation_format=pf))
        rows.append((int(bits), log.summary["final_acc"], log.summary["final_loss"]))
    return BitSweepResult(rows)


# --------------------------------------------------------- memory accounting

class Expr:
    def eval(self, layers) -> Fraction:
        raise NotImplementedError


@dataclass(frozen=True)
class Size(Expr):
    """``|w|`` or ``|a|``: FP32 bytes, summed over layers unless inside a per-layer operator."""

    what: str

    def __str__(self):
        return f"|{self.what}|"

    def eval(self, layers):
        return sum((Fraction(4 * (l[1] if self.what == "w" else l[2])) for l in layers), Fraction(0))


@dataclass(frozen=True)
class Div(Expr):
    arg: Expr
    k: int

    def __str__(self):
        return f"{self.arg}/{self.k}"

    def eval(self, layers):
        return self.arg.eval(layers) / self.k


@dataclass(frozen=True)
class Max(Expr):
    args: Tuple[Expr, ...]

    def __str__(self):
        return "max{" + ", ".join(map(str, self.args)) + "}"

    def eval(self, layers):
        return max(a.eval(layers) for a in self.args)


@dataclass(frozen=True)
class SumL(Expr):
    arg: Expr

    def __str__(self):
        return f"sum_l {self.arg}"

    def eval(self, layers):
        return sum((self.arg.eval([l]) for l in layers), Fraction(0))


@dataclass(frozen=True)
class MaxL(Expr):
    arg: Expr

    def __str__(self):
        return f"max_l {self.arg}"

    def eval(self, layers):
        return max((self.arg.eval([l]) for l in layers), default=Fraction(0))


W, A = Size("w"), Size("a")


def _scaled(e: Expr, k: int) -> Expr:
    return e if k == 1 else Div(e, k)


def _rows():
    rows = {}
    for name, k in (("FO-SGD", 1), ("FO(8-bit)", 4), ("FO(4-bit)", 8)):
        rows[name] = (_scaled(W, k), SumL(Max((_scaled(A, k), _scaled(W, k)))))
    rows["MeZO"] = (W, MaxL(W))
    for name, k in (("QuZO(8-bit)", 4), ("QuZO(4-bit)", 8)):
        rows[name] = (_scaled(W, k), MaxL(_scaled(W, k)))
    order = ("FO-SGD", "MeZO", "FO(8-bit)", "FO(4-bit)", "QuZO(8-bit)", "QuZO(4-bit)")
    return {n: rows[n] for n in order}


MEMORY_ROWS = _rows()


@dataclass
class MemoryReport:
    optimizer: str
    weight_expr: Expr
    dynamic_expr: Expr
    weight_bytes: Fraction
    dynamic_bytes: Fraction

    @property
    def total_bytes(self) -> Fraction:
        return self.weight_bytes + self.dynamic_bytes

    def row(self):
        return (self.optimizer, str(self.weight_expr), str(self.dynamic_expr),
                float(self.weight_bytes), float(self.dynamic_bytes), float(self.total_bytes))


def memory_report(model, optimizer: str, batch_elems: int = 1) -> MemoryReport:
    """Evaluate one optimizer's peak-memory expressions on ``model``.

    ``model`` is a Model (``layer_sizes`` is queried with ``batch_elems``) or a
    list of ``(name, weight elements, activation elements)`` tuples.
    """
    if optimizer not in MEMORY_ROWS:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}; expected one of {list(MEMORY_ROWS)}")
    layers = model if isinstance(model, (list, tuple)) else model.layer_sizes(batch_elems)
    w_expr, d_expr = MEMORY_ROWS[optimizer]
    return MemoryReport(optimizer, w_expr, d_expr, w_expr.eval(layers), d_expr.eval(layers))


def memory_table(model, batch_elems: int = 1) -> List[MemoryReport]:
    return [memory_report(model, k, batch_elems) for k in MEMORY_ROWS]


def memory_csv(reports: List[MemoryReport]) -> str:
    return _csv(("optimizer", "weight_mem", "dynamic_mem", "weight_bytes", "dynamic_bytes",
                 "total_bytes"), [r.row() for r in reports])


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)
