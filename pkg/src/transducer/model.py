"""The Transducer: stacked residual kernel-attention layers over (input, output) pairs.

Every element of a batch carries two streams, an input representation ``v``
and an output representation ``u``. Context elements start from their known
outputs, queries from zero. Layer ``l`` computes

    v <- v + F_l(v)
    u~ = u + G_l(u)        (or u~ = u when G is disabled)
    u <- u~ + W_l [ sum_k a_j(v_k, v) V_j u~_k ]_j

where ``k`` ranges over context elements only and ``a_j`` is the normalized
score of head ``j``. The prediction for a query is its final ``u`` stream.
With ``G`` the identity, unrolling the recursion gives exactly the sum over
layers of kernel images of the context outputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .random_fields import RngStream

KERNELS = ("exp_dot", "rbf", "l2")

Params = dict[str, np.ndarray]


@dataclass
class ModelConfig:
    depth: int = 4
    heads: int = 32
    head_dim: int = 16
    value_dim: int = 16
    in_dim: int = 50
    out_dim: int = 50
    mlp_dim: int = 100
    kernel: str = "exp_dot"
    temperature: float | None = None
    tie_weights: bool = False
    use_G: bool = True
    self_attention: bool = True

    def __post_init__(self):
        for name in ("depth", "heads", "head_dim", "value_dim", "in_dim", "out_dim", "mlp_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def tau(self) -> float:
        if self.temperature is not None:
            return float(self.temperature)
        return float(np.sqrt(self.head_dim)) if self.kernel == "exp_dot" else float(self.head_dim)

    @property
    def n_layers(self) -> int:
        return 1 if self.tie_weights else self.depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def _ffn_shapes(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.ln_gain", (d,)), (f"{prefix}.ln_bias", (d,)),
            (f"{prefix}.W1", (d, hidden)), (f"{prefix}.b1", (hidden,)),
            (f"{prefix}.W2", (hidden, d)), (f"{prefix}.b2", (d,))]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in serialization order.

    Per-head maps are stacked along a leading head axis, so each layer's
    ``Q``, ``K``, ``V`` and ``W`` are head-major.
    """
    c = config
    out: list[tuple[str, tuple[int, ...]]] = []
    for layer in range(c.n_layers):
        p = f"layer{layer}"
        out += [(f"{p}.Q", (c.heads, c.in_dim, c.head_dim)),
                (f"{p}.K", (c.heads, c.in_dim, c.head_dim)),
                (f"{p}.V", (c.heads, c.out_dim, c.value_dim)),
                (f"{p}.W", (c.heads, c.value_dim, c.out_dim))]
        out += _ffn_shapes(f"{p}.F", c.in_dim, c.mlp_dim)
        if c.use_G:
            out += _ffn_shapes(f"{p}.G", c.out_dim, c.mlp_dim)
    return dict(out)


def param_count(config: ModelConfig) -> int:
    c = config
    attn = c.heads * (2 * c.in_dim * c.head_dim + 2 * c.out_dim * c.value_dim)

    def ffn(d):
        return 2 * d + 2 * d * c.mlp_dim + c.mlp_dim + d

    per_layer = attn + ffn(c.in_dim) + (ffn(c.out_dim) if c.use_G else 0)
    return c.n_layers * per_layer


def init_params(config: ModelConfig, rng: RngStream | int = 0) -> Params:
    """Gaussian weights with std ``1/sqrt(fan_in)``; zero biases; unit layer-norm gains.

    The fan-in of a head-stacked output map ``W`` counts every head, since
    the heads are summed into one output.
    """
    gen = (rng if isinstance(rng, RngStream) else RngStream(int(rng))).generator()
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "ln_gain":
            params[name] = np.ones(shape)
        elif leaf in ("ln_bias", "b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0] * shape[1] if leaf == "W" else shape[-2]
            params[name] = gen.standard_normal(shape) / np.sqrt(fan_in)
    return params


def kernel_score(kernel: str, q, k, tau: float = 1.0) -> float:
    """Unnormalized score between one query and one key vector."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if kernel == "exp_dot":
        return float(np.exp(q @ k / tau))
    d2 = float(((q - k) ** 2).sum())
    if kernel == "rbf":
        return float(np.exp(-d2 / tau))
    if kernel == "l2":
        return d2
    raise ValueError(f"unknown kernel {kernel!r}")


def attention_mask(n_total: int, n_context: int, self_attention: bool = True) -> np.ndarray:
    """Rows are all elements, columns are context keys."""
    mask = np.ones((n_total, n_context), dtype=bool)
    if not self_attention:
        idx = np.arange(n_context)
        mask[idx, idx] = False
    return mask


def _ffn(x: Value, p: dict[str, Value], prefix: str) -> Value:
    h = ad.layer_norm(x, p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"])
    h = ad.gelu(ad.add_bias(h @ p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    return x + ad.add_bias(h @ p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def _per_head(x: Value, w: Value) -> Value:
    """Apply a stacked ``(J, d, e)`` map to rows ``(r, d)``; returns ``(J, r, e)``."""
    J, d, e = w.shape
    r = x.shape[0]
    flat = w.transpose(1, 0, 2).reshape(d, J * e)
    return (x @ flat).reshape(r, J, e).transpose(1, 0, 2)


def kernel_attention(v: Value, u: Value, n_context: int, p: dict[str, Value], prefix: str,
                     config: ModelConfig, mask: np.ndarray) -> tuple[Value, Value]:
    """Return the ``u``-stream increment for every element and the attention weights."""
    if n_context < 1:
        raise ValueError("kernel attention needs at least one context element")
    n = v.shape[0]
    q = _per_head(v, p[f"{prefix}.Q"])
    k = _per_head(ad.rows(v, 0, n_context), p[f"{prefix}.K"])
    vals = _per_head(ad.rows(u, 0, n_context), p[f"{prefix}.V"])
    if config.kernel == "exp_dot":
        logits = (q @ k.transpose(0, 2, 1)) * (1.0 / config.tau)
        weights = ad.masked_normalize(ad.exp(ad.stabilize_logits(logits, mask)), mask)
    elif config.kernel == "rbf":
        logits = ad.pairwise_sqdist(q, k) * (-1.0 / config.tau)
        weights = ad.masked_normalize(ad.exp(ad.stabilize_logits(logits, mask)), mask)
    else:
        weights = ad.masked_normalize(ad.pairwise_sqdist(q, k), mask)
    heads = weights @ vals
    J, _, pv = heads.shape
    W = p[f"{prefix}.W"].reshape(J * pv, config.out_dim)
    return heads.transpose(1, 0, 2).reshape(n, J * pv) @ W, weights


def forward_tape(tape: Tape, p: dict[str, Value], config: ModelConfig, ctx_v, ctx_u, qry_v,
                 trace: list | None = None, qry_u=None) -> Value:
    """Record a forward pass on ``tape``; returns the ``(queries, out_dim)`` predictions.

    ``trace``, when given, collects each layer's attention weights and ``u`` stream.
    ``qry_u`` overrides the zero initialization of the query output streams;
    it exists to probe that queries never feed other elements.
    """
    ctx_v = np.asarray(ctx_v, dtype=np.float64)
    ctx_u = np.asarray(ctx_u, dtype=np.float64)
    qry_v = np.asarray(qry_v, dtype=np.float64)
    c, nq = len(ctx_v), len(qry_v)
    if c < 1:
        raise ValueError("context must be non-empty")
    if ctx_v.shape[1:] != (config.in_dim,) or qry_v.shape[1:] != (config.in_dim,) \
            or ctx_u.shape != (c, config.out_dim):
        raise ad.ShapeError(f"inputs {ctx_v.shape}/{ctx_u.shape}/{qry_v.shape} do not match "
                            f"in_dim={config.in_dim}, out_dim={config.out_dim}")
    v = tape.constant(np.vstack([ctx_v, qry_v]))
    qry_u = np.zeros((nq, config.out_dim)) if qry_u is None else np.asarray(qry_u, dtype=np.float64)
    u = tape.constant(np.vstack([ctx_u, qry_u]))
    mask = attention_mask(c + nq, c, config.self_attention)
    for layer in range(config.depth):
        prefix = f"layer{0 if config.tie_weights else layer}"
        v = _ffn(v, p, f"{prefix}.F")
        ut = _ffn(u, p, f"{prefix}.G") if config.use_G else u
        inc, weights = kernel_attention(v, ut, c, p, prefix, config, mask)
        u = ut + inc
        if trace is not None:
            trace.append({"weights": weights.data, "u": u.data})
    return ad.rows(u, c, c + nq)


def bind(tape: Tape, params: Params, trainable: bool = True) -> dict[str, Value]:
    if trainable:
        return {name: tape.param(name, arr) for name, arr in params.items()}
    return {name: tape.constant(arr) for name, arr in params.items()}


def predict(params: Params, config: ModelConfig, ctx_v, ctx_u, qry_v,
            trace: list | None = None, qry_u=None) -> np.ndarray:
    tape = Tape()
    return forward_tape(tape, bind(tape, params, trainable=False), config,
                        ctx_v, ctx_u, qry_v, trace, qry_u).data.copy()
