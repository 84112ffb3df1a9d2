"""Encoder-adapter and MLP heads (monotonic, standard, or none).

A monotone layer stores an unconstrained weight ``W`` and uses ``W * W``
in the forward pass, so its effective weight is non-negative whatever the
optimizer does to ``W``. Combined with leaky ReLU (non-decreasing) this
makes the head output componentwise non-decreasing in its input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

HeadKind = Literal["monotonic", "standard", "none"]
HEAD_KINDS = ("monotonic", "standard", "none")


@dataclass
class LayerParams:
    weight: np.ndarray  # in_dim x out_dim
    bias: np.ndarray  # 1 x out_dim
    monotone: bool = False
    activation: str = "leaky_relu"  # or "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def effective_weight(self) -> np.ndarray:
        return self.weight * self.weight if self.monotone else self.weight


@dataclass
class HeadConfig:
    d_enc: int
    d_hidden: int | None = None
    n_hidden_layers: int = 1
    kind: HeadKind = "monotonic"

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.d_hidden is None:
            self.d_hidden = 2 * self.d_enc
        if self.d_enc <= 0 or self.d_hidden <= 0 or self.n_hidden_layers < 1:
            raise ConfigError("head dimensions must be positive")


@dataclass
class ModelConfig:
    """Architecture of the whole network: adapter widths plus head."""

    d_in: int
    d_enc: int
    head: HeadKind = "monotonic"
    d_hidden: int | None = None
    n_hidden_layers: int = 1
    encoder_widths: tuple[int, ...] | None = None  # hidden widths before d_enc
    alpha: float = T.DEFAULT_ALPHA
    head_init_scale: float = 1.0

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.d_enc, self.d_hidden, self.n_hidden_layers, self.head)

    def encoder_dims(self) -> list[int]:
        # default adapter: d_in -> d_enc -> d_enc
        widths = (self.d_enc,) if self.encoder_widths is None else tuple(self.encoder_widths)
        return [self.d_in, *widths, self.d_enc]


@dataclass
class ModelParams:
    encoder_layers: list[LayerParams]
    head_layers: list[LayerParams]
    head_kind: HeadKind
    alpha: float = T.DEFAULT_ALPHA
    config: ModelConfig | None = field(default=None, compare=False)

    @property
    def d_enc(self) -> int:
        return self.encoder_layers[-1].out_dim

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameter arrays in declaration order (encoder first, weight before bias)."""
        out = []
        for prefix, layers in (("encoder", self.encoder_layers), ("head", self.head_layers)):
            for i, layer in enumerate(layers):
                out.append((f"{prefix}.{i}.weight", layer.weight))
                out.append((f"{prefix}.{i}.bias", layer.bias))
        return out

    def replace_arrays(self, arrays: list[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        enc = [LayerParams(next(it), next(it), l.monotone, l.activation) for l in self.encoder_layers]
        head = [LayerParams(next(it), next(it), l.monotone, l.activation) for l in self.head_layers]
        return ModelParams(enc, head, self.head_kind, self.alpha, self.config)

    def copy(self) -> "ModelParams":
        return self.replace_arrays([a.copy() for _, a in self.named_arrays()])


def _fan_in_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero biases.

    ``head_init_scale`` (<= 1) shrinks the head weights inside that bound.
    """
    dims = config.encoder_dims()
    if any(d <= 0 for d in dims):
        raise ConfigError(f"all layer widths must be positive, got {dims}")
    if not 0 < config.head_init_scale <= 1:
        raise ConfigError("head_init_scale must be in (0, 1]")
    hc = config.head_config()
    rng = np.random.default_rng(seed)

    encoder = []
    for i, (d0, d1) in enumerate(zip(dims[:-1], dims[1:])):
        encoder.append(LayerParams(_fan_in_uniform(rng, d0, d1), np.zeros((1, d1)),
                                   monotone=False, activation="leaky_relu"))

    head = []
    if hc.kind != "none":
        hdims = [hc.d_enc] + [hc.d_hidden] * hc.n_hidden_layers + [hc.d_enc]
        n = len(hdims) - 1
        for i, (d0, d1) in enumerate(zip(hdims[:-1], hdims[1:])):
            w = _fan_in_uniform(rng, d0, d1, config.head_init_scale)
            head.append(LayerParams(w, np.zeros((1, d1)), monotone=hc.kind == "monotonic",
                                    activation="identity" if i == n - 1 else "leaky_relu"))
    return ModelParams(encoder, head, hc.kind, config.alpha, config)


def _layer(h: Tensor, w: Tensor, b: Tensor, layer: LayerParams, alpha: float) -> Tensor:
    if h.shape[1] != layer.in_dim:
        raise DimensionError(f"layer expects width {layer.in_dim}, got input {h.shape}")
    w_eff = T.square(w) if layer.monotone else w
    out = T.add_row(T.matmul(h, w_eff), b)
    if layer.activation == "leaky_relu":
        out = T.leaky_relu(out, alpha)
    return out


def _run(h: Tensor, layers: list[LayerParams], leaves: list[Tensor], alpha: float) -> Tensor:
    for layer, (w, b) in zip(layers, zip(leaves[::2], leaves[1::2])):
        h = _layer(h, w, b, layer, alpha)
    return h


def param_leaves(params: ModelParams) -> list[Tensor]:
    """Fresh gradient-tracking leaves, aligned with ``params.named_arrays()``."""
    return [Tensor(a, requires_grad=True, _checked=True) for _, a in params.named_arrays()]


def forward_head(x, params: ModelParams, leaves: list[Tensor] | None = None) -> dict[str, Tensor]:
    """Head forward: returns ``raw`` and row-normalized ``normalized`` outputs.

    ``leaves`` (head parameters only) lets the caller collect gradients.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != params.d_enc:
        raise DimensionError(f"head expects width {params.d_enc}, got {x.shape}")
    if params.head_kind == "none":
        raw = x
    else:
        if leaves is None:
            leaves = [Tensor(a, _checked=True) for _, a in params.named_arrays()[2 * len(params.encoder_layers):]]
        raw = _run(x, params.head_layers, leaves, params.alpha)
    return {"raw": raw, "normalized": T.row_l2_normalize(raw)}


def forward_model(x, params: ModelParams, leaves: list[Tensor] | None = None) -> dict[str, Tensor]:
    """Adapter then head.

    Returns ``encoder_out``, ``head_raw`` and ``head_normalized``. With no
    head, ``head_raw`` is the encoder output and ``head_normalized`` its
    row-normalized version.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    first = params.encoder_layers[0]
    if x.shape[1] != first.in_dim:
        raise DimensionError(f"model expects input width {first.in_dim}, got {x.shape}")
    if leaves is None:
        leaves = [Tensor(a, _checked=True) for _, a in params.named_arrays()]
    n_enc = 2 * len(params.encoder_layers)
    enc = _run(x, params.encoder_layers, leaves[:n_enc], params.alpha)
    head = forward_head(enc, params, leaves[n_enc:])
    return {"encoder_out": enc, "head_raw": head["raw"], "head_normalized": head["normalized"]}


def embed(x: np.ndarray, params: ModelParams, which: str = "head_normalized",
          chunk: int = 4096) -> np.ndarray:
    """Evaluate one model output on a whole dataset, in fixed-size chunks."""
    x = np.asarray(x, dtype=np.float64)
    parts = [forward_model(x[i:i + chunk], params)[which].value for i in range(0, len(x), chunk)]
    return np.vstack(parts)


def _ordered_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # left-to-right over the inner index, identical for every row
    out = x[:, :1] * w[0]
    for j in range(1, w.shape[0]):
        out += x[:, j:j + 1] * w[j]
    return out


def head_raw_numpy(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Head raw output with a row-independent summation order.

    BLAS kernels may sum different rows in different orders, which can
    break exact ``<=`` comparisons between rows by one ulp.
    """
    h = np.asarray(x, dtype=np.float64)
    for layer in params.head_layers:
        h = _ordered_matmul(h, layer.effective_weight()) + layer.bias
        if layer.activation == "leaky_relu":
            h = np.where(h > 0, h, params.alpha * h)
    return h


def check_monotone(params: ModelParams, trials: int = 1000, dim: int | None = None,
                   seed: int = 0, scale: float = 1.0, report: list | None = None) -> bool:
    """Sample ordered pairs ``x <= x'`` and check ``raw(x) <= raw(x')`` componentwise.

    ``dim`` must equal the head width when given. On failure the first
    counterexample ``(x, x_prime, raw_x, raw_x_prime)`` is appended to
    ``report``.
    """
    if params.head_kind != "monotonic":
        raise ConfigError("check_monotone needs a monotonic head")
    d = params.d_enc if dim is None else dim
    if d != params.d_enc:
        raise DimensionError(f"dim {d} does not match head width {params.d_enc}")
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=scale, size=(trials, d))
    # sparse non-negative bumps, including exact zeros
    bump = rng.exponential(scale=scale, size=(trials, d)) * (rng.random((trials, d)) < 0.5)
    return monotone_pairs_ok(params, x, x + bump, report)


def monotone_pairs_ok(params: ModelParams, x: np.ndarray, x_prime: np.ndarray,
                      report: list | None = None) -> bool:
    lo, hi = head_raw_numpy(x, params), head_raw_numpy(x_prime, params)
    bad = np.any(lo > hi, axis=1)
    if bad.any():
        if report is not None:
            i = int(np.argmax(bad))
            report.append((x[i], x_prime[i], lo[i], hi[i]))
        return False
    return True
