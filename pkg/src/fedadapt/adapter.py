"""Attention adapter over frozen embeddings, with a similarity logit head.

The only trainable model on each client: single-head attention and a ReLU
feedforward block, each wrapped in a residual connection so the randomly
initialized adapter starts as a near-identity on the pretrained features,
followed by a learned sigmoid gate and row-wise L2 normalization. Logits are
scaled cosine similarities against the frozen class prototypes, optionally
passed through the blockwise quantizer with a straight-through gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import qlora
from .encoder import ClassPrototypes
from .tensor import (
    Matrix,
    ShapeMismatch,
    add,
    add_bias,
    cross_entropy,
    exp,
    gather_rows,
    matmul,
    mul,
    normalize_rows,
    relu,
    scalar_mul,
    scale,
    sigmoid,
    softmax_rows,
    straight_through,
    transpose,
)

__all__ = [
    "AdapterConfig",
    "AdapterParams",
    "attention_forward",
    "ffn_forward",
    "refine",
    "adapter_forward",
    "logits",
    "adapter_loss",
]

PARAM_ORDER = ("wq", "wk", "wv", "w1", "b1", "w2", "b2", "wg", "bg", "log_s")


@dataclass(frozen=True)
class AdapterConfig:
    dim: int
    d_ff: int
    init_scale: float | None = None  # None -> 1/sqrt(dim)
    quantize_logits: bool = False
    sym_text_loss: bool = False
    logit_bits: int = 8
    logit_block: int = 64

    def __post_init__(self):
        if self.dim < 1 or self.d_ff < 1:
            raise ValueError(f"dim and d_ff must be positive, got {self.dim}, {self.d_ff}")
        if self.logit_bits not in (4, 8):
            raise ValueError(f"logit_bits must be 4 or 8, got {self.logit_bits}")

    @property
    def effective_init_scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 1.0 / math.sqrt(self.dim)

    @property
    def param_count(self) -> int:
        d, f = self.dim, self.d_ff
        return 3 * d * d + d * f + f + f * d + d + d * d + d + 1

    def shapes(self) -> list[tuple[str, int, int]]:
        d, f = self.dim, self.d_ff
        return [
            ("wq", d, d), ("wk", d, d), ("wv", d, d),
            ("w1", d, f), ("b1", 1, f),
            ("w2", f, d), ("b2", 1, d),
            ("wg", d, d), ("bg", 1, d),
            ("log_s", 1, 1),
        ]


@dataclass
class AdapterParams:
    """The adapter's weights; entries may be leaves or tracked expressions."""

    config: AdapterConfig
    wq: Matrix
    wk: Matrix
    wv: Matrix
    w1: Matrix
    b1: Matrix
    w2: Matrix
    b2: Matrix
    wg: Matrix
    bg: Matrix
    log_s: Matrix
    _: dataclass = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        for name, rows, cols in self.config.shapes():
            m = getattr(self, name)
            if m.shape != (rows, cols):
                raise ShapeMismatch(f"{name}: expected {(rows, cols)}, got {m.shape}")
        total = sum(m.data.size for m in (getattr(self, n) for n in PARAM_ORDER))
        assert total == self.config.param_count, (total, self.config.param_count)

    @classmethod
    def init(cls, config: AdapterConfig, seed: int, requires_grad: bool = False) -> "AdapterParams":
        """Uniform weights in +-init_scale, zero biases, log_s = ln(10)."""
        rng = np.random.default_rng([int(seed), 7177])
        s = config.effective_init_scale
        named = {}
        for name, rows, cols in config.shapes():
            if name.startswith("w"):
                data = rng.uniform(-s, s, (rows, cols)).astype(np.float32)
            elif name == "log_s":
                data = np.full((1, 1), math.log(10.0), dtype=np.float32)
            else:
                data = np.zeros((rows, cols), dtype=np.float32)
            named[name] = Matrix(data, requires_grad=requires_grad)
        return cls(config, **named)

    @classmethod
    def from_named(cls, config: AdapterConfig, named: dict[str, Matrix]) -> "AdapterParams":
        return cls(config, **{name: named[name] for name in PARAM_ORDER})

    def named(self) -> dict[str, Matrix]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def parameters(self) -> list[Matrix]:
        return [getattr(self, name) for name in PARAM_ORDER]

    def copy(self) -> "AdapterParams":
        return AdapterParams.from_named(self.config, {n: m.copy() for n, m in self.named().items()})

    def with_config(self, config: AdapterConfig) -> "AdapterParams":
        return AdapterParams.from_named(config, self.named())


def attention_forward(params: AdapterParams, x: Matrix) -> Matrix:
    """softmax(Q K^T / sqrt(dim)) V with Q, K, V projected from the batch."""
    d = params.config.dim
    if x.cols != d:
        raise ShapeMismatch(f"attention_forward: expected (*, {d}) input, got {x.shape}")
    q = matmul(x, params.wq)
    k = matmul(x, params.wk)
    v = matmul(x, params.wv)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), v)


def ffn_forward(params: AdapterParams, a: Matrix) -> Matrix:
    """ReLU(a W1 + b1) W2 + b2, row-vector convention."""
    if a.cols != params.config.dim:
        raise ShapeMismatch(f"ffn_forward: expected (*, {params.config.dim}) input, got {a.shape}")
    h = relu(add_bias(matmul(a, params.w1), params.b1))
    return add_bias(matmul(h, params.w2), params.b2)


def refine(params: AdapterParams, f: Matrix) -> Matrix:
    """sigmoid(f Wg + bg) gate multiplied elementwise onto f."""
    if f.cols != params.config.dim:
        raise ShapeMismatch(f"refine: expected (*, {params.config.dim}) input, got {f.shape}")
    gate = sigmoid(add_bias(matmul(f, params.wg), params.bg))
    return mul(gate, f)


def adapter_forward(params: AdapterParams, x: Matrix) -> Matrix:
    """Residual attention + residual FFN + gate, L2-normalized rows."""
    a = attention_forward(params, x)
    r1 = add(a, x)
    f = add(ffn_forward(params, r1), r1)
    return normalize_rows(refine(params, f))


def _prototype_matrix(prototypes) -> Matrix:
    if isinstance(prototypes, ClassPrototypes):
        return Matrix(prototypes.matrix)
    return prototypes if isinstance(prototypes, Matrix) else Matrix(prototypes)


def logits(params: AdapterParams, v_opt: Matrix, prototypes) -> Matrix:
    """Scaled similarities against class prototypes, optionally quantized."""
    u = _prototype_matrix(prototypes)
    if u.cols != v_opt.cols:
        raise ShapeMismatch(f"logits: prototype dim {u.cols} != feature dim {v_opt.cols}")
    raw = matmul(v_opt, transpose(u))
    cfg = params.config
    if cfg.quantize_logits:
        raw = straight_through(
            raw, lambda a: qlora.quantize_dequantize(a, cfg.logit_bits, cfg.logit_block)
        )
    return scalar_mul(raw, exp(params.log_s))


def adapter_loss(params: AdapterParams, logit: Matrix, labels) -> Matrix:
    """Cross-entropy over samples, plus the transposed class-side term if enabled.

    The text-side term treats the transposed logits as class-to-sample
    scores; each class row present in the batch is labeled with the first
    sample index bearing that class, and absent classes are skipped.
    """
    labels = np.asarray(labels)
    total = cross_entropy(logit, labels)
    if params.config.sym_text_loss:
        present = []
        first_index = []
        for c in range(logit.cols):
            hits = np.flatnonzero(labels == c)
            if hits.size:
                present.append(c)
                first_index.append(int(hits[0]))
        if present:
            t = transpose(logit)
            text = cross_entropy(gather_rows(t, np.asarray(present)), np.asarray(first_index))
            total = add(total, text)
    return total
