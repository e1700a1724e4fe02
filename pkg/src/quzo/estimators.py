"""Randomized zeroth-order gradient estimators.

* ``RGE``    probes and steps along the Gaussian direction ``u``.
* ``Q-RGE1`` probes and steps along one stochastic quantization of ``u``.
* ``Q-RGE2`` probes along ``u1`` and steps along ``u2``, two independently
  rounded copies of the same ``u``; since ``E[u1 u2^T | u] = u u^T`` the
  estimate stays unbiased.

Perturbations are never stored: each one is regenerated from its stream
coordinates ``(seed, step, query, role, tensor index)``.  The underlying
Gaussian uses role ``u``, the two rounding streams roles ``q1`` and ``q2``.
Each tensor's perturbation is calibrated separately (max-abs over that tensor
for that query).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import InputError, IntegrityError, RunError
from .quant import QuantFormat, QuantScheme, QuantTensor, dequantize, fit_scale, quantize_stochastic
from .rng import RngStream, as_stream

KINDS = ("RGE", "Q-RGE1", "Q-RGE2")


def sample_perturbation(seed_path: RngStream, d) -> np.ndarray:
    """``d`` i.i.d. standard normals (``d`` may be a shape), fixed by ``seed_path``."""
    shape = (d,) if np.isscalar(d) else tuple(d)
    if int(np.prod(shape)) < 1:
        raise InputError("perturbation dimension must be at least 1")
    return as_stream(seed_path).at(role="u").generator().standard_normal(shape)


def perturbation_scheme(u: np.ndarray, fmt: QuantFormat) -> QuantScheme:
    """Symmetric max-abs scheme for one freshly sampled perturbation."""
    return fit_scale(u, fmt, rounding="stochastic")


def quantize_perturbation_pair(u: np.ndarray, scheme: Union[QuantScheme, QuantFormat],
                               seed_path: RngStream, return_probs: bool = False):
    """Two conditionally independent stochastic roundings of the same ``u``.

    ``scheme`` may be a full scheme or just a format, in which case the scale
    is calibrated from ``u``.
    """
    if isinstance(scheme, QuantFormat):
        scheme = perturbation_scheme(u, scheme)
    elif scheme.rounding != "stochastic":
        scheme = scheme.with_rounding("stochastic")
    s = as_stream(seed_path)
    u1 = quantize_stochastic(u, scheme, s.at(role="q1"), return_probs)
    u2 = quantize_stochastic(u, scheme, s.at(role="q2"), return_probs)
    return u1, u2


def sensitivity(loss_fn, theta: np.ndarray, probe: np.ndarray, epsilon: float) -> float:
    """Central difference ``(L(theta + eps*probe) - L(theta - eps*probe)) / (2 eps)``."""
    lp = loss_fn(theta + epsilon * probe)
    lm = loss_fn(theta - epsilon * probe)
    mu = (lp - lm) / (2.0 * epsilon)
    if not np.isfinite(mu):
        raise RunError("sensitivity is not finite")
    return mu


@dataclass
class Perturbation:
    """Regenerable perturbation for one query over a parameter layout.

    ``fmt=None`` means the perturbation is not quantized (``u1 = u2 = u``).
    """

    seed_path: RngStream
    epsilon: float
    fmt: Optional[QuantFormat]
    layout: Sequence

    def tensor(self, t: int, with_u2: bool = True):
        """``(u, u1, u2, clamped elements)`` for tensor ``t`` of the layout, as real arrays.

        ``with_u2=False`` skips the second rounding and returns ``None`` in its place.
        """
        shape = self.layout[t][1]
        path = self.seed_path.at(index=t)
        u = sample_perturbation(path, shape)
        if self.fmt is None:
            return u, u, u, 0
        scheme = perturbation_scheme(u, self.fmt)
        y = np.abs(u / scheme.scale_for(u.ndim))
        clamped = int(np.count_nonzero(y > self.fmt.lmax * (1 + 1e-9)))
        if not with_u2:
            u1 = quantize_stochastic(u, scheme, path.at(role="q1"))
            return u, dequantize(u1), None, clamped
        q1, q2 = quantize_perturbation_pair(u, scheme, path)
        return u, dequantize(q1), dequantize(q2), clamped

    def dense(self):
        parts = [self.tensor(t) for t in range(len(self.layout))]
        cat = lambda k: np.concatenate([p[k].ravel() for p in parts])
        return cat(0), cat(1), cat(2), sum(p[3] for p in parts)


@dataclass
class ZoQuery:
    mu: float
    seed_path: RngStream


@dataclass
class GradientEstimate:
    kind: str
    n: int
    epsilon: float
    fmt: Optional[QuantFormat]
    layout: list
    vector: Optional[np.ndarray] = None
    queries: List[ZoQuery] = field(default_factory=list)
    clamp_rate: float = 0.0

    @property
    def d(self) -> int:
        return int(sum(np.prod(s) for _, s in self.layout))

    @property
    def compressed(self) -> bool:
        return self.vector is None


def _direction(kind: str, u, u1, u2):
    return {"RGE": u, "Q-RGE1": u1, "Q-RGE2": u2}[kind]


def _probe(kind: str, u, u1):
    return u if kind == "RGE" else u1


def estimate_many(model, batch, n: int, epsilon: float, fmt: Optional[QuantFormat], seed,
                  kinds=("Q-RGE1", "Q-RGE2"), compressed: bool = False, step: int = 0):
    """Run several estimators over the same ``n`` perturbations.

    Q-RGE1 and Q-RGE2 share their probe ``u1``, so a single pair of forwards
    per query serves both; RGE needs its own pair.  Returns ``{kind: GradientEstimate}``.
    """
    if n < 1:
        raise InputError("need at least one query")
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    for k in kinds:
        if k not in KINDS:
            raise InputError(f"unknown estimator {k!r}")
    base = as_stream(seed).at(step=step)
    layout = list(model.layout())
    theta = model.get_flat()
    loss_fn = lambda th: model.loss_flat(th, batch)
    d = theta.size
    acc = {k: np.zeros(d) for k in kinds}
    queries = {k: [] for k in kinds}
    clamped = 0
    for i in range(n):
        path = base.at(query=i)
        u, u1, u2, c = Perturbation(path, epsilon, fmt, layout).dense()
        clamped += c
        mus = {}
        for k in kinds:
            probe_key = "u" if k == "RGE" else "u1"
            if probe_key not in mus:
                mus[probe_key] = sensitivity(loss_fn, theta, _probe(k, u, u1), epsilon)
            mu = mus[probe_key]
            if compressed:
                queries[k].append(ZoQuery(mu, path))
            else:
                acc[k] += (mu / n) * _direction(k, u, u1, u2)
    rate = clamped / (n * d) if fmt is not None else 0.0
    return {
        k: GradientEstimate(k, n, epsilon, None if k == "RGE" else fmt, layout,
                            None if compressed else acc[k], queries[k],
                            0.0 if k == "RGE" else rate)
        for k in kinds
    }


def estimate_rge(model, batch, n: int, epsilon: float, seed, compressed: bool = False) -> GradientEstimate:
    """Full-precision central-difference RGE over ``n`` Gaussian directions."""
    return estimate_many(model, batch, n, epsilon, None, seed, ("RGE",), compressed)["RGE"]


def _fmt(scheme) -> Optional[QuantFormat]:
    if scheme is None or isinstance(scheme, QuantFormat):
        return scheme
    return scheme.format


def estimate_qrge1(model, batch, n: int, epsilon: float, scheme, seed,
                   compressed: bool = False) -> GradientEstimate:
    """Naive quantized RGE: the same rounded vector probes and steps."""
    return estimate_many(model, batch, n, epsilon, _fmt(scheme), seed, ("Q-RGE1",), compressed)["Q-RGE1"]


def estimate_qrge2(model, batch, n: int, epsilon: float, scheme, seed,
                   compressed: bool = False) -> GradientEstimate:
    """Dual-seed quantized RGE: probe along ``u1``, step along ``u2``."""
    return estimate_many(model, batch, n, epsilon, _fmt(scheme), seed, ("Q-RGE2",), compressed)["Q-RGE2"]


def densify(estimate: GradientEstimate, d: int) -> np.ndarray:
    """Expand a compressed estimate into ``sum_i (mu_i / n) * direction_i``."""
    if not estimate.compressed:
        return estimate.vector
    if d != estimate.d:
        raise IntegrityError(f"estimate was taken over {estimate.d} parameters, asked for {d}")
    out = np.zeros(d)
    for q in estimate.queries:
        u, u1, u2, _ = Perturbation(q.seed_path, estimate.epsilon, estimate.fmt, estimate.layout).dense()
        out += (q.mu / estimate.n) * _direction(estimate.kind, u, u1, u2)
    return out
