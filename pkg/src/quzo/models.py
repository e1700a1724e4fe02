"""Forward-only model zoo: quantized MLP and a small transformer encoder.

Every layer also implements a reverse pass.  The ZO trainer never calls it;
it exists for the straight-through first-order baseline and for gradient
checks.  Quantizers are treated as identity in that reverse pass.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import ConfigurationError, InputError, RunError
from .quant import (QuantFormat, QuantScheme, QuantTensor, dequantize, fit_scale,
                    qmatmul, quantize_nearest)
from .rng import RngStream, as_stream


class Param:
    """A named tensor held either as float64 or as a QuantTensor."""

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.data: Optional[np.ndarray] = np.asarray(data, dtype=np.float64)
        self.qt: Optional[QuantTensor] = None
        self.trainable = trainable

    @property
    def is_quantized(self) -> bool:
        return self.qt is not None

    @property
    def shape(self):
        return self.qt.shape if self.qt is not None else self.data.shape

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def value(self) -> np.ndarray:
        return dequantize(self.qt) if self.qt is not None else self.data

    def quantize(self, scheme: QuantScheme):
        self.qt = quantize_nearest(self.value(), scheme)
        self.data = None

    def __repr__(self):
        kind = self.qt.format.name if self.qt is not None else "FP32"
        return f"Param({self.name}, {self.shape}, {kind})"


class Context:
    """Per-forward state: activation format, value overrides, reverse-pass caches."""

    def __init__(self, act_format: Optional[QuantFormat] = None,
                 overrides: Optional[Dict[str, np.ndarray]] = None, record: bool = False):
        self.act_format = act_format
        self.overrides = overrides or {}
        self.record = record
        self.cache: dict = {}
        self.grads: Dict[str, np.ndarray] = {}

    def value(self, p: Param) -> np.ndarray:
        if p.name in self.overrides:
            return self.overrides[p.name]
        return p.value()

    def codes(self, p: Param) -> Optional[QuantTensor]:
        if p.name in self.overrides or p.qt is None:
            return None
        return p.qt

    def quantize_act(self, x: np.ndarray):
        if self.act_format is None:
            return None, x
        scheme = fit_scale(x, self.act_format)
        q = quantize_nearest(x, scheme)
        return q, dequantize(q)

    def add_grad(self, p: Param, g: np.ndarray):
        if p.name in self.grads:
            self.grads[p.name] = self.grads[p.name] + g
        else:
            self.grads[p.name] = g


def _check(y: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise RunError(f"non-finite activation produced by layer {where!r}")
    return y


class Layer:
    name = ""

    def params(self) -> List[Param]:
        return []

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def backward(self, dy, ctx: Context):
        raise NotImplementedError

    def weight_count(self) -> int:
        return sum(p.size for p in self.params())


class LoraAdapter:
    """Low-rank delta ``scaling * B @ A`` attached to a frozen Linear."""

    def __init__(self, name: str, d_in: int, d_out: int, rank: int, scaling: float, rng):
        if rank < 1 or rank > min(d_in, d_out):
            raise ConfigurationError(f"LoRA rank {rank} invalid for a {d_out}x{d_in} layer")
        g = as_stream(rng).generator()
        self.rank = rank
        self.scaling = float(scaling)
        self.A = Param(f"{name}.lora_A", g.standard_normal((rank, d_in)) / math.sqrt(rank))
        self.B = Param(f"{name}.lora_B", np.zeros((d_out, rank)))

    def params(self):
        return [self.A, self.B]


class Linear(Layer):
    def __init__(self, name: str, d_in: int, d_out: int, rng, bias: bool = True):
        self.name = name
        g = as_stream(rng).generator()
        self.weight = Param(f"{name}.weight", g.standard_normal((d_out, d_in)) / math.sqrt(d_in))
        self.bias = Param(f"{name}.bias", np.zeros(d_out)) if bias else None
        self.lora: Optional[LoraAdapter] = None
        self.d_in, self.d_out = d_in, d_out

    def params(self):
        ps = [self.weight] + ([self.bias] if self.bias is not None else [])
        if self.lora is not None:
            ps += self.lora.params()
        return ps

    def forward(self, x, ctx):
        if x.shape[-1] != self.d_in:
            raise InputError(f"{self.name}: expected last dim {self.d_in}, got {x.shape[-1]}")
        xq, xv = ctx.quantize_act(x)
        wq = ctx.codes(self.weight)
        if xq is not None and wq is not None:
            y = qmatmul(xq, wq.T)
        else:
            y = xv @ ctx.value(self.weight).T
        if self.bias is not None:
            y = y + ctx.value(self.bias)
        h = None
        if self.lora is not None:
            h = xv @ ctx.value(self.lora.A).T
            y = y + self.lora.scaling * (h @ ctx.value(self.lora.B).T)
        if ctx.record:
            ctx.cache[self] = (xv, h)
        return _check(y, self.name)

    def backward(self, dy, ctx):
        xv, h = ctx.cache[self]
        W = ctx.value(self.weight)
        x2 = xv.reshape(-1, self.d_in)
        d2 = dy.reshape(-1, self.d_out)
        ctx.add_grad(self.weight, d2.T @ x2)
        if self.bias is not None:
            ctx.add_grad(self.bias, d2.sum(axis=0))
        dx = dy @ W
        if self.lora is not None:
            s = self.lora.scaling
            A, B = ctx.value(self.lora.A), ctx.value(self.lora.B)
            h2 = h.reshape(-1, self.lora.rank)
            ctx.add_grad(self.lora.B, s * d2.T @ h2)
            dh = s * dy @ B
            ctx.add_grad(self.lora.A, dh.reshape(-1, self.lora.rank).T @ x2)
            dx = dx + dh @ A
        return dx


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x, ctx):
        if ctx.record:
            ctx.cache[self] = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy, ctx):
        return dy * ctx.cache[self]


_GELU_C = math.sqrt(2.0 / math.pi)


class GeLU(Layer):
    """tanh approximation."""

    def __init__(self, name="gelu"):
        self.name = name

    def forward(self, x, ctx):
        t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        if ctx.record:
            ctx.cache[self] = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy, ctx):
        x, t = ctx.cache[self]
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


class LayerNorm(Layer):
    def __init__(self, name: str, d: int, eps: float = 1e-5):
        self.name = name
        self.gain = Param(f"{name}.gain", np.ones(d))
        self.shift = Param(f"{name}.shift", np.zeros(d))
        self.eps = eps

    def params(self):
        return [self.gain, self.shift]

    def forward(self, x, ctx):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if ctx.record:
            ctx.cache[self] = (xhat, inv)
        return xhat * ctx.value(self.gain) + ctx.value(self.shift)

    def backward(self, dy, ctx):
        xhat, inv = ctx.cache[self]
        d = xhat.shape[-1]
        ctx.add_grad(self.gain, (dy * xhat).reshape(-1, d).sum(axis=0))
        ctx.add_grad(self.shift, dy.reshape(-1, d).sum(axis=0))
        dxhat = dy * ctx.value(self.gain)
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class SelfAttention(Layer):
    """Multi-head self-attention.  Scores and softmax stay in real arithmetic."""

    def __init__(self, name: str, d: int, heads: int, rng):
        if d % heads:
            raise ConfigurationError("model width must be divisible by the head count")
        s = as_stream(rng)
        self.name = name
        self.heads, self.d = heads, d
        self.q = Linear(f"{name}.q", d, d, s.child(0))
        self.k = Linear(f"{name}.k", d, d, s.child(1))
        self.v = Linear(f"{name}.v", d, d, s.child(2))
        self.o = Linear(f"{name}.o", d, d, s.child(3))

    def sublayers(self):
        return [self.q, self.k, self.v, self.o]

    def params(self):
        return [p for lyr in self.sublayers() for p in lyr.params()]

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x, ctx):
        q = self._split(self.q.forward(x, ctx))
        k = self._split(self.k.forward(x, ctx))
        v = self._split(self.v.forward(x, ctx))
        scale = 1.0 / math.sqrt(self.d // self.heads)
        p = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        mixed = (p @ v).transpose(0, 2, 1, 3).reshape(x.shape)
        if ctx.record:
            ctx.cache[self] = (q, k, v, p, scale)
        return self.o.forward(mixed, ctx)

    def backward(self, dy, ctx):
        q, k, v, p, scale = ctx.cache[self]
        dmixed = self.o.backward(dy, ctx)
        dctx = self._split(dmixed)
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(dy.shape)
        return (self.q.backward(merge(dq), ctx) + self.k.backward(merge(dk), ctx)
                + self.v.backward(merge(dv), ctx))


class EncoderBlock(Layer):
    """Pre-norm block: ``x + attn(ln(x))`` then ``h + ffn(ln(h))``."""

    def __init__(self, name: str, d: int, heads: int, ffn: int, rng):
        s = as_stream(rng)
        self.name = name
        self.ln1 = LayerNorm(f"{name}.ln1", d)
        self.attn = SelfAttention(f"{name}.attn", d, heads, s.child(0))
        self.ln2 = LayerNorm(f"{name}.ln2", d)
        self.fc1 = Linear(f"{name}.fc1", d, ffn, s.child(1))
        self.act = GeLU(f"{name}.gelu")
        self.fc2 = Linear(f"{name}.fc2", ffn, d, s.child(2))

    def sublayers(self):
        return [self.ln1, *self.attn.sublayers(), self.ln2, self.fc1, self.fc2]

    def params(self):
        return [p for lyr in (self.ln1, self.attn, self.ln2, self.fc1, self.fc2) for p in lyr.params()]

    def forward(self, x, ctx):
        h = x + self.attn.forward(self.ln1.forward(x, ctx), ctx)
        f = self.fc2.forward(self.act.forward(self.fc1.forward(self.ln2.forward(h, ctx), ctx), ctx), ctx)
        return h + f

    def backward(self, dy, ctx):
        df = self.fc2.backward(dy, ctx)
        df = self.fc1.backward(self.act.backward(df, ctx), ctx)
        dh = dy + self.ln2.backward(df, ctx)
        da = self.attn.backward(dh, ctx)
        return dh + self.ln1.backward(da, ctx)


class Embedding(Layer):
    """Token embedding plus learned absolute positions."""

    def __init__(self, name: str, vocab: int, seq_len: int, d: int, rng):
        g = as_stream(rng).generator()
        self.name = name
        self.vocab, self.seq_len = vocab, seq_len
        self.table = Param(f"{name}.tokens", g.standard_normal((vocab, d)))
        self.pos = Param(f"{name}.positions", 0.1 * g.standard_normal((seq_len, d)))

    def params(self):
        return [self.table, self.pos]

    def forward(self, tokens, ctx):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.seq_len:
            raise InputError(f"{self.name}: expected (batch, {self.seq_len}) token ids")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise InputError(f"{self.name}: token id out of range")
        if ctx.record:
            ctx.cache[self] = tokens
        return ctx.value(self.table)[tokens] + ctx.value(self.pos)[None]

    def backward(self, dy, ctx):
        tokens = ctx.cache[self]
        dt = np.zeros(self.table.shape)
        np.add.at(dt, tokens, dy)
        ctx.add_grad(self.table, dt)
        ctx.add_grad(self.pos, dy.sum(axis=0))
        return None


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.reshape(-1, logits.shape[-1])
    t = np.asarray(targets).reshape(-1)
    if t.min() < 0 or t.max() >= z.shape[1]:
        raise InputError("class label out of range")
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(t)), t].mean()
    g = np.exp(logp)
    g[np.arange(len(t)), t] -= 1.0
    return loss, (g / len(t)).reshape(logits.shape)


def mean_squared_error(pred: np.ndarray, targets: np.ndarray):
    pred = pred.reshape(np.shape(targets))
    r = pred - targets
    return float(np.mean(r ** 2)), 2.0 * r / r.size


class Model:
    """Ordered stack of layers plus a loss head.

    Parameters are addressed by ``"<layer>.<param>"`` names.  ``act_format``
    sets the activation quantization applied to every linear input.
    """

    kind = "base"

    def __init__(self, layers: List[Layer], loss: str = "cross-entropy",
                 act_format: Optional[QuantFormat] = None):
        if loss not in ("cross-entropy", "mse"):
            raise ConfigurationError(f"unknown loss {loss!r}")
        self.layers = layers
        self.loss_kind = loss
        self.act_format = act_format

    # ---- parameter registry
    def all_params(self) -> "OrderedDict[str, Param]":
        out = OrderedDict()
        for lyr in self.layers:
            for p in lyr.params():
                out[p.name] = p
        return out

    def trainable_params(self) -> List[Param]:
        return [p for p in self.all_params().values() if p.trainable]

    def param(self, name: str) -> Param:
        return self.all_params()[name]

    def layout(self):
        return [(p.name, p.shape) for p in self.trainable_params()]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.trainable_params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value().ravel() for p in self.trainable_params()])

    def unflatten(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        theta = np.asarray(theta)
        if theta.size != self.num_params:
            raise InputError(f"flat vector has {theta.size} entries, model has {self.num_params}")
        out, pos = {}, 0
        for p in self.trainable_params():
            out[p.name] = theta[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        return out

    # ---- forward / reverse
    def _forward(self, inputs, ctx):
        x = inputs
        for lyr in self.layers:
            x = lyr.forward(x, ctx)
        return x

    def output(self, inputs, overrides=None) -> np.ndarray:
        return self._forward(inputs, Context(self.act_format, overrides))

    def _loss(self, out, targets):
        if self.loss_kind == "cross-entropy":
            return cross_entropy(out, targets)
        return mean_squared_error(out, targets)

    def loss(self, batch, overrides=None) -> float:
        inputs, targets = batch
        out = self._forward(inputs, Context(self.act_format, overrides))
        value = float(self._loss(out, targets)[0])
        if not math.isfinite(value):
            raise RunError("loss is not finite")
        return value

    def loss_flat(self, theta: np.ndarray, batch) -> float:
        """Loss with the trainable parameters replaced by the real vector ``theta``."""
        return self.loss(batch, overrides=self.unflatten(theta))

    def loss_and_grad(self, batch, overrides=None):
        """Loss and straight-through gradients w.r.t. the dequantized trainable values."""
        inputs, targets = batch
        ctx = Context(self.act_format, overrides, record=True)
        out = self._forward(inputs, ctx)
        value, d = self._loss(out, targets)
        for lyr in reversed(self.layers):
            d = lyr.backward(d, ctx)
        grads = {}
        for p in self.trainable_params():
            g = ctx.grads.get(p.name, np.zeros(p.shape))
            if not np.all(np.isfinite(g)):
                raise RunError(f"non-finite gradient for {p.name}")
            grads[p.name] = g
        return float(value), grads

    def predict(self, inputs) -> np.ndarray:
        return np.argmax(self.output(inputs), axis=-1)

    def accuracy(self, batch) -> float:
        inputs, targets = batch
        return float(np.mean(self.predict(inputs) == np.asarray(targets)))

    # ---- quantization
    def quantize(self, weight_format: Optional[QuantFormat], act_format: Optional[QuantFormat] = None,
                 vector_format: QuantFormat = QuantFormat("INT", 8), headroom: float = 1.0,
                 include_frozen: bool = True):
        """Quantize weights in place.

        Matrices go to ``weight_format`` with one scale per output row; 1-D
        tensors (biases, norm parameters) go to ``vector_format`` per tensor.
        ``headroom`` widens the calibrated range so trained values can grow.
        """
        self.act_format = act_format
        if weight_format is None:
            return self
        for p in self.all_params().values():
            if p.is_quantized or (not include_frozen and not p.trainable):
                continue
            v = p.value()
            if v.ndim >= 2:
                sch = fit_scale(headroom * v, weight_format, "per-channel", axis=0)
            else:
                sch = fit_scale(headroom * v, vector_format, min_range=1.0)
            p.quantize(sch)
        return self

    def linear_layers(self) -> List[Linear]:
        out = []
        for lyr in self.layers:
            subs = lyr.sublayers() if hasattr(lyr, "sublayers") else [lyr]
            out += [s for s in subs if isinstance(s, Linear)]
        return out

    def layer_sizes(self, batch_elems: int):
        """``(name, weight elements, activation elements)`` per parameterised layer.

        ``batch_elems`` is the number of rows flowing through each layer
        (batch size, times sequence length for the encoder).
        """
        rows = []
        for lyr in self.layers:
            subs = lyr.sublayers() if hasattr(lyr, "sublayers") else [lyr]
            for s in subs:
                w = s.weight_count()
                if not w:
                    continue
                if isinstance(s, Linear):
                    width = s.d_out
                elif isinstance(s, Embedding):
                    width = s.table.shape[1]
                else:
                    width = s.gain.size
                rows.append((s.name, w, batch_elems * width))
        return rows

    def topology(self) -> dict:
        raise NotImplementedError

    def copy(self) -> "Model":
        return load_checkpoint_bytes(checkpoint_bytes(self))


class MLP(Model):
    kind = "mlp"

    def __init__(self, sizes: Iterable[int], activation: str = "relu", loss: str = "cross-entropy",
                 act_format: Optional[QuantFormat] = None, seed=0):
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least input and output sizes")
        s = as_stream(seed).at(role="init")
        layers: List[Layer] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(Linear(f"fc{i}", a, b, s.child(i)))
            if i < len(sizes) - 2:
                layers.append(ReLU(f"act{i}") if activation == "relu" else GeLU(f"act{i}"))
        super().__init__(layers, loss, act_format)
        self.sizes, self.activation, self.seed = sizes, activation, seed

    def topology(self):
        return {"kind": self.kind, "sizes": self.sizes, "activation": self.activation,
                "loss": self.loss_kind, "seed": int(as_stream(self.seed).master_seed)}


class _Head(Layer):
    def __init__(self, name, d, vocab, rng):
        self.name = name
        self.ln = LayerNorm(f"{name}.ln", d)
        self.proj = Linear(f"{name}.proj", d, vocab, rng)

    def sublayers(self):
        return [self.ln, self.proj]

    def params(self):
        return self.ln.params() + self.proj.params()

    def forward(self, x, ctx):
        return self.proj.forward(self.ln.forward(x, ctx), ctx)

    def backward(self, dy, ctx):
        return self.ln.backward(self.proj.backward(dy, ctx), ctx)


class TinyEncoder(Model):
    """Embedding, ``blocks`` pre-norm encoder blocks, per-position vocabulary head."""

    kind = "encoder"

    def __init__(self, vocab: int = 8, seq_len: int = 8, d_model: int = 64, heads: int = 4,
                 ffn: Optional[int] = None, blocks: int = 1, act_format: Optional[QuantFormat] = None,
                 seed=0):
        ffn = ffn or 2 * d_model
        s = as_stream(seed).at(role="init")
        layers: List[Layer] = [Embedding("embed", vocab, seq_len, d_model, s.child(0))]
        for b in range(blocks):
            layers.append(EncoderBlock(f"block{b}", d_model, heads, ffn, s.child(1 + b)))
        layers.append(_Head("head", d_model, vocab, s.child(100)))
        super().__init__(layers, "cross-entropy", act_format)
        self.cfg = dict(vocab=vocab, seq_len=seq_len, d_model=d_model, heads=heads, ffn=ffn, blocks=blocks)
        self.seed = seed

    def topology(self):
        return {"kind": self.kind, **self.cfg, "seed": int(as_stream(self.seed).master_seed)}


class QuadraticProbe:
    """``L(w) = 0.5 * ||w - target||^2``; exposes the flat-vector model interface."""

    def __init__(self, w0, target):
        self.w = np.array(w0, dtype=np.float64)
        self.target = np.array(target, dtype=np.float64)

    @property
    def num_params(self):
        return self.w.size

    def layout(self):
        return [("w", self.w.shape)]

    def get_flat(self):
        return self.w.copy()

    def loss_flat(self, theta, batch=None):
        r = theta - self.target
        return 0.5 * float(r @ r)

    def gradient(self, theta=None):
        theta = self.w if theta is None else theta
        return theta - self.target


class LinearProbe:
    """``L(w) = c . w``."""

    def __init__(self, w0, c):
        self.w = np.array(w0, dtype=np.float64)
        self.c = np.array(c, dtype=np.float64)

    @property
    def num_params(self):
        return self.w.size

    def layout(self):
        return [("w", self.w.shape)]

    def get_flat(self):
        return self.w.copy()

    def loss_flat(self, theta, batch=None):
        return float(self.c @ theta)


def attach_lora(model: Model, rank: int, scaling: float, layers: Optional[List[str]] = None,
                seed=0, fmt: Optional[QuantFormat] = None) -> Model:
    """Freeze every base parameter and add rank-``rank`` adapters to the named linears.

    With ``fmt`` the adapters are stored quantized; ``B`` starts at zero and
    borrows the scale of ``A`` so it has a usable grid.  The rank is capped at
    ``min(d_in, d_out)`` for narrow layers such as a classifier head.
    """
    s = as_stream(seed).at(role="init", step=1)
    for p in model.all_params().values():
        p.trainable = False
    targets = model.linear_layers()
    if layers is not None:
        targets = [lin for lin in targets if lin.name in layers]
        missing = set(layers) - {lin.name for lin in targets}
        if missing:
            raise ConfigurationError(f"no linear layer named {sorted(missing)}")
    for i, lin in enumerate(targets):
        r = min(rank, lin.d_in, lin.d_out)
        lin.lora = LoraAdapter(lin.name, lin.d_in, lin.d_out, r, scaling, s.child(i))
        if fmt is not None:
            a = lin.lora.A.value()
            sch = fit_scale(a, fmt)
            lin.lora.A.quantize(sch)
            lin.lora.B.quantize(fit_scale(lin.lora.B.value(), fmt, min_range=sch.scale * fmt.max_value))
    return model


def adapters(model: Model) -> List[LoraAdapter]:
    return [lin.lora for lin in model.linear_layers() if lin.lora is not None]


# ---- checkpoints: magic, u32 header length, JSON header, tensor payloads

_CKPT_MAGIC = b"QZM1"


def checkpoint_bytes(model: Model) -> bytes:
    entries, chunks, offset = [], [], 0
    for p in model.all_params().values():
        if p.is_quantized:
            raw = np.ascontiguousarray(p.qt.codes, dtype="<i4").tobytes()
            entry = {"name": p.name, "shape": list(p.shape), "dtype": "<i4",
                     "scheme": p.qt.scheme.to_json()}
        else:
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            entry = {"name": p.name, "shape": list(p.shape), "dtype": "<f8", "scheme": None}
        entry.update(offset=offset, nbytes=len(raw), trainable=p.trainable)
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    lora = [{"layer": lin.name, "rank": lin.lora.rank, "scaling": lin.lora.scaling}
            for lin in model.linear_layers() if lin.lora is not None]
    header = {
        "topology": model.topology(),
        "act_format": model.act_format.name if model.act_format else None,
        "lora": lora,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return _CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def build_model(topology: dict) -> Model:
    topo = dict(topology)
    kind = topo.pop("kind")
    if kind == "mlp":
        return MLP(topo["sizes"], topo.get("activation", "relu"), topo.get("loss", "cross-entropy"),
                   seed=topo.get("seed", 0))
    if kind == "encoder":
        return TinyEncoder(**topo)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def load_checkpoint_bytes(blob: bytes) -> Model:
    buf = io.BytesIO(blob)
    if buf.read(4) != _CKPT_MAGIC:
        raise InputError("not a model checkpoint")
    (n,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(n))
    payload = buf.read()
    model = build_model(header["topology"])
    model.act_format = QuantFormat.parse(header["act_format"]) if header["act_format"] else None
    lin_by_name = {lin.name: lin for lin in model.linear_layers()}
    for entry in header["lora"]:
        lin = lin_by_name[entry["layer"]]
        lin.lora = LoraAdapter(lin.name, lin.d_in, lin.d_out, entry["rank"], entry["scaling"], 0)
    params = model.all_params()
    for e in header["tensors"]:
        p = params[e["name"]]
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        if e["scheme"] is None:
            p.data, p.qt = arr.astype(np.float64), None
        else:
            p.qt, p.data = QuantTensor(arr.astype(np.int32), QuantScheme.from_json(e["scheme"])), None
        p.trainable = e["trainable"]
    return model


def save_checkpoint(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
