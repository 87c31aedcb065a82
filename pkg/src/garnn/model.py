"""Graph-attentive recurrent network for multivariate forecasting.

Every timestep gets its own complete graph with one node per variable
(self-loops included). Node inputs are per-variable embeddings of the raw
observation; one or more GAT / GATv2 layers mix them; the concatenated node
states feed a GRU, and an MLP on the last hidden state gives the forecast.

All functions accept leading batch dimensions, so the graph layers run over
every (example, timestep) pair at once and only the GRU loops over time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

VARIANTS = ("gat", "gatv2")
CHECKPOINT_FORMAT = "garnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_vars: int
    embed_dim: int = 8
    attn_dim: int = 8
    hidden_dim: int = 128
    mlp_hidden: int = 64
    n_layers: int = 1
    variant: str = "gatv2"
    alpha: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("n_vars", "embed_dim", "attn_dim", "hidden_dim", "mlp_hidden", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        N, E, A, D, M = self.n_vars, self.embed_dim, self.attn_dim, self.hidden_dim, self.mlp_hidden
        shapes: dict[str, tuple[int, ...]] = {"embed.w": (N, E), "embed.b": (N, E)}
        for l in range(self.n_layers):
            p = f"layers.{l}."
            if self.variant == "gat":
                shapes.update({p + "W_qk": (A, E), p + "b_qk": (A,), p + "a1": (A,), p + "a2": (A,)})
            else:
                shapes.update({p + "W1": (A, E), p + "b1": (A,), p + "W2": (A, E), p + "b2": (A,),
                               p + "a": (A,)})
            shapes.update({p + "W": (E, E), p + "b": (E,)})
        for g in "zrh":
            shapes[f"gru.W_{g}"] = (D, N * E)
        for g in "zrh":
            shapes[f"gru.U_{g}"] = (D, D)
        for g in "zrh":
            shapes[f"gru.b_{g}"] = (D,)
        shapes.update({"head.W1": (M, D), "head.b1": (M,), "head.W2": (1, M), "head.b2": (1,)})
        return shapes


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b")


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    for name, shape in config.param_shapes().items():
        if _is_bias(name):
            params[name] = np.zeros(shape)
            continue
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed.w":
            fan_in = 1
        elif leaf in ("a", "a1", "a2"):
            fan_in = shape[0]
        else:
            fan_in = shape[-1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# --- building blocks ----------------------------------------------------------

def embed_variable(x, w, b) -> Tensor:
    """relu(w * x + b); ``x`` broadcasts against the trailing embedding axis."""
    x = ad.as_tensor(x)
    if not np.isfinite(x.data).all():
        raise ad.NonFiniteError("embedding input contains non-finite values")
    return ad.relu(ad.add(ad.mul(ad.reshape(x, x.shape + (1,)), w), b))


def score_gat(q, k, a1, a2, alpha: float, return_preact: bool = False):
    """leaky_relu(a1.q + a2.k). Broadcasts over leading axes."""
    pre = ad.add(ad.matmul(q, a1), ad.matmul(k, a2))
    s = ad.leaky_relu(pre, alpha)
    return (s, pre) if return_preact else s


def score_gatv2(q, k, a, alpha: float, return_preact: bool = False):
    """a . leaky_relu(q + k), the activation applied before the attention vector."""
    m = ad.add(q, k)
    s = ad.matmul(ad.leaky_relu(m, alpha), a)
    return (s, m) if return_preact else s


@dataclass
class GraphAttentionLayer:
    """Parameters of one attention layer.

    For GAT the query and key transforms are one shared pair (``W1 is W2``);
    for GATv2 the two attention vectors are one shared vector (``a1 is a2``).
    """

    variant: str
    W1: object
    b1: object
    W2: object
    b2: object
    a1: object
    a2: object
    W: object
    b: object
    alpha: float = 0.2

    @classmethod
    def from_params(cls, params: Mapping, layer: int, variant: str, alpha: float):
        p = f"layers.{layer}."
        if variant == "gat":
            W1 = W2 = params[p + "W_qk"]
            b1 = b2 = params[p + "b_qk"]
            a1, a2 = params[p + "a1"], params[p + "a2"]
        else:
            W1, b1, W2, b2 = params[p + "W1"], params[p + "b1"], params[p + "W2"], params[p + "b2"]
            a1 = a2 = params[p + "a"]
        return cls(variant, W1, b1, W2, b2, a1, a2, params[p + "W"], params[p + "b"], alpha)

    def arrays(self) -> "GraphAttentionLayer":
        """Copy with every parameter as a plain ndarray."""
        def arr(v):
            return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        return GraphAttentionLayer(self.variant, arr(self.W1), arr(self.b1), arr(self.W2),
                                   arr(self.b2), arr(self.a1), arr(self.a2), arr(self.W),
                                   arr(self.b), self.alpha)


@dataclass
class TimestepAttention:
    """What one graph layer computed, for every leading batch index.

    ``scores[..., n, j]`` is the post-LeakyReLU, pre-softmax score from sender
    ``j`` to receiver ``n``; ``weights`` are their row-wise softmax.
    ``preact`` holds what went into LeakyReLU: a scalar per pair for GAT
    (shape ``[..., N, N]``) and a vector per pair for GATv2 (``[..., N, N, A]``).
    """

    variant: str
    alpha: float
    scores: np.ndarray
    weights: np.ndarray
    queries: np.ndarray
    keys: np.ndarray
    preact: np.ndarray
    inputs: np.ndarray
    a1: np.ndarray
    a2: np.ndarray


def _linear(x, W, b):
    return ad.add(ad.matmul(x, ad.transpose(ad.as_tensor(W))), b)


def graph_layer_forward(e, layer: GraphAttentionLayer):
    """One attention layer over complete graphs.

    ``e`` has shape ``[..., N, E]``. Returns the new node states (same shape)
    and the :class:`TimestepAttention` record.
    """
    e = ad.as_tensor(e)
    if e.ndim < 2 or e.shape[-2] == 0:
        raise ShapeError(f"graph layer needs at least one node, got input shape {e.shape}")
    N = e.shape[-2]
    lead = e.shape[:-2]
    q = _linear(e, layer.W1, layer.b1)
    k = q if layer.variant == "gat" else _linear(e, layer.W2, layer.b2)
    A = q.shape[-1]
    q_recv = ad.reshape(q, lead + (N, 1, A))
    k_send = ad.reshape(k, lead + (1, N, A))
    if layer.variant == "gat":
        scores, pre = score_gat(q_recv, k_send, layer.a1, layer.a2, layer.alpha, True)
    else:
        scores, pre = score_gatv2(q_recv, k_send, layer.a1, layer.alpha, True)
    weights = ad.softmax(scores, axis=-1)
    messages = _linear(e, layer.W, layer.b)
    out = ad.matmul(weights, messages)
    arrs = layer.arrays()
    record = TimestepAttention(layer.variant, layer.alpha, scores.data, weights.data, q.data,
                               k.data, pre.data, e.data, arrs.a1, arrs.a2)
    return out, record


def gru_cell(x_proj, h_prev, U_zr, U_h, hidden: int) -> Tensor:
    """GRU update given the input projections ``[W_z e + b_z; W_r e + b_r; W_h e + b_h]``.

    ``U_zr`` stacks the transposed recurrent weights of the update and reset
    gates as ``[D, 2D]``; ``U_h`` is the transposed candidate weight ``[D, D]``.
    """
    D = hidden
    gates = ad.sigmoid(ad.add(x_proj[..., :2 * D], ad.matmul(h_prev, U_zr)))
    z, r = gates[..., :D], gates[..., D:]
    cand = ad.tanh(ad.add(x_proj[..., 2 * D:], ad.matmul(ad.mul(r, h_prev), U_h)))
    # (1 - z) * h + z * cand
    return ad.add(h_prev, ad.mul(z, ad.sub(cand, h_prev)))


def _gru_weights(params: Mapping):
    W = ad.transpose(ad.concat([params["gru.W_z"], params["gru.W_r"], params["gru.W_h"]], axis=0))
    b = ad.concat([params["gru.b_z"], params["gru.b_r"], params["gru.b_h"]], axis=0)
    U_zr = ad.transpose(ad.concat([params["gru.U_z"], params["gru.U_r"]], axis=0))
    U_h = ad.transpose(ad.as_tensor(params["gru.U_h"]))
    return W, b, U_zr, U_h


def gru_step(e_t, h_prev, params: Mapping) -> Tensor:
    """h_t from input ``e_t`` (``[..., N*E]``) and previous state ``h_prev`` (``[..., D]``)."""
    W, b, U_zr, U_h = _gru_weights(params)
    D = ad.as_tensor(params["gru.U_h"]).shape[0]
    h_prev = ad.as_tensor(h_prev)
    if h_prev.shape[-1] != D:
        raise ShapeError(f"gru: hidden state shape {h_prev.shape} does not end in {D}")
    return gru_cell(ad.add(ad.matmul(e_t, W), b), h_prev, U_zr, U_h, D)


def mlp_head(h, params: Mapping) -> Tensor:
    hidden = ad.relu(_linear(h, params["head.W1"], params["head.b1"]))
    out = _linear(hidden, params["head.W2"], params["head.b2"])
    return ad.reshape(out, out.shape[:-1])


@dataclass
class ForwardResult:
    prediction: Tensor
    trace: list[TimestepAttention] | None = None


def model_forward(params: Mapping, config: ModelConfig, X, trace: bool = False) -> ForwardResult:
    """Predict from windows ``X`` of shape ``[B, N, T]`` (or a single ``[N, T]``).

    ``params`` maps names to Tensors (watched ones get gradients) or arrays.
    When ``trace`` is set, one :class:`TimestepAttention` per layer is kept;
    its arrays are indexed ``[B, T, ...]``.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != config.n_vars:
        raise ShapeError(f"windows must be [B, {config.n_vars}, T], got {X.shape}")
    B, N, T = X.shape
    params = {k: ad.as_tensor(v) for k, v in params.items()}
    E, D = config.embed_dim, config.hidden_dim

    x = X.transpose(0, 2, 1)  # [B, T, N]
    e = embed_variable(x, params["embed.w"], params["embed.b"])  # [B, T, N, E]
    records = []
    for l in range(config.n_layers):
        layer = GraphAttentionLayer.from_params(params, l, config.variant, config.alpha)
        e, rec = graph_layer_forward(e, layer)
        records.append(rec)

    seq = ad.reshape(e, (B, T, N * E))
    W, b, U_zr, U_h = _gru_weights(params)
    proj = ad.add(ad.matmul(seq, W), b)  # [B, T, 3D]
    h = Tensor(np.zeros((B, D)))
    for t in range(T):
        h = gru_cell(proj[:, t, :], h, U_zr, U_h, D)
    pred = mlp_head(h, params)
    if single:
        pred = ad.reshape(pred, ())
    return ForwardResult(pred, records if trace else None)


class GarnnModel:
    """A configuration plus its parameter arrays."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray],
                 meta: dict | None = None):
        expected = config.param_shapes()
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if np.shape(params[name]) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")
        self.config = config
        self.params = {k: np.array(params[k], dtype=np.float64) for k in expected}
        self.meta = dict(meta or {})

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "GarnnModel":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "GarnnModel":
        return cls(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})

    def copy(self) -> "GarnnModel":
        return GarnnModel(self.config, self.params, self.meta)

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def layer(self, l: int) -> GraphAttentionLayer:
        return GraphAttentionLayer.from_params(self.params, l, self.config.variant, self.config.alpha)

    def forward(self, X, trace: bool = False) -> ForwardResult:
        return model_forward(self.params, self.config, X, trace=trace)

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        """Raw (normalized-scale) predictions for windows ``[B, N, T]``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return self.forward(X).prediction.data
        if len(X) == 0:
            return np.zeros(0)
        return np.concatenate([self.forward(X[i:i + batch_size]).prediction.data
                               for i in range(0, len(X), batch_size)])

    # checkpoint -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "meta": self.meta,
            "params": {
                name: {"shape": list(v.shape), "data": [float(x).hex() for x in v.ravel()]}
                for name, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GarnnModel":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a garnn checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        config = ModelConfig(**doc["config"])
        params = {}
        for name, entry in doc["params"].items():
            flat = np.array([float.fromhex(s) for s in entry["data"]], dtype=np.float64)
            params[name] = flat.reshape(entry["shape"])
        return cls(config, params, doc.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "GarnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
