"""Sparse-interest encoder and the single-vector baseline encoder.

Every stage accepts arbitrary leading batch axes: ``X`` is ``(..., n, D)`` and
``mask`` is ``(..., n)``. Padding rows of ``X`` are zero because row 0 of the
item table is pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    num_items: int
    K: int = 4
    L: int = 50
    D: int = 128
    n: int = 20
    tau: float = 0.1
    lam: float = 0.5
    kind: str = "sine"   # "sine" or "baseline"

    def __post_init__(self):
        if self.kind not in ("sine", "baseline"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not 1 <= self.K <= self.L:
            raise ValueError(f"need 1 <= K <= L, got K={self.K}, L={self.L}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if min(self.num_items, self.D, self.n) < 1:
            raise ValueError("num_items, D and n must be positive")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: ad.parameter(t.data.copy(), k) for k, t in self.tensors.items()})


def init_params(config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> ModelParams:
    """Normal(0, std^2) weights, unit LayerNorm gains, zero biases, zero padding row."""
    D, K, L, n = config.D, config.K, config.L, config.n

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    H = normal(config.num_items + 1, D)
    H[0] = 0.0
    if config.kind == "sine":
        arrays = {
            "H": H,
            "C": normal(L, D),
            "W1": normal(D, D),
            "W2": normal(D),
            "W3_assign": normal(D, D),
            "Wk1": normal(K, D, D),
            "Wk2": normal(K, D),
            "pos": normal(n, D),
            "LN3_gain": np.ones(D),
            "LN3_bias": np.zeros(D),
            "W3_agg": normal(D, D),
            "W4": normal(D),
            "LN4_gain": np.ones(D),
            "LN4_bias": np.zeros(D),
        }
    else:
        arrays = {"H": H, "pos": normal(n, D), "W1": normal(D, D), "W2": normal(D), "Wo": normal(D, D)}
    return ModelParams(config, {k: ad.parameter(v, k) for k, v in arrays.items()})


@dataclass
class InterestBundle:
    """Forward-pass outputs; leading batch axes are kept when the input had them."""

    concept_indices: np.ndarray      # (..., K) prototype rows, descending score
    concept_scores: Tensor           # (..., L) s
    gated_prototypes: Tensor         # (..., K, D) C^u
    assignment: Tensor               # (..., n, K) P_{k|t}
    position_attention: Tensor       # (..., K, n) P_{t|k}
    interests: Tensor                # (..., K, D) Phi
    next_intention: Tensor | None    # (..., D) C_apt
    weights: Tensor | None           # (..., K) e
    user_vector: Tensor              # (..., D) v
    attention: Tensor | None = None  # (..., n) a (concept-activation pooling)


# -- stages -------------------------------------------------------------------------


def _pool_logits(X: Tensor, W_in: Tensor, w_out: Tensor) -> Tensor:
    """tanh(X W_in) w_out, shape X.shape[:-1]."""
    D = X.shape[-1]
    h = ad.tanh(ad.matmul(X, W_in))
    return ad.reshape(ad.matmul(h, ad.reshape(w_out, (D, 1))), X.shape[:-1])


def _weighted_rows(weights: Tensor, X: Tensor) -> Tensor:
    """sum_t weights[..., t] X[..., t, :]."""
    lead, n = weights.shape[:-1], weights.shape[-1]
    return ad.reshape(ad.matmul(ad.reshape(weights, lead + (1, n)), X), lead + (X.shape[-1],))


def virtual_concept(X: Tensor, mask, W1: Tensor, W2: Tensor) -> tuple[Tensor, Tensor]:
    """Self-attentive pooling of the behaviour sequence into one concept query."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("degenerate input: a sequence with every position masked")
    a = ad.softmax_rows(_pool_logits(X, W1, W2), mask=mask)
    return a, _weighted_rows(a, X)


def topk_indices(scores: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K largest scores along the last axis, ties to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :K]


def _take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    rows = np.arange(flat.shape[0])[:, None]
    picked = ad.take(flat, (rows, idx.reshape(flat.shape[0], -1)))
    return ad.reshape(picked, lead + (idx.shape[-1],))


def activate_concepts(z: Tensor, C: Tensor, K: int) -> tuple[np.ndarray, Tensor, Tensor]:
    """Score all prototypes against ``z``, keep the top K, gate rows by sigmoid(score).

    The index set is a hard choice; gradients reach ``C`` through the gathered
    rows and the gate.
    """
    L, D = C.shape
    if not 1 <= K <= L:
        raise ValueError(f"need 1 <= K <= L, got K={K}, L={L}")
    lead = z.shape[:-1]
    s = ad.reshape(ad.matmul(ad.reshape(z, lead + (1, D)), ad.transpose(C)), lead + (L,))
    idx = topk_indices(s.data, K)
    gate = ad.sigmoid(_take_last(s, idx))
    rows = ad.gather_rows(C, idx)
    C_u = ad.hadamard(rows, ad.reshape(gate, lead + (K, 1)))
    return idx, C_u, s


def assign_intentions(X: Tensor, C_u: Tensor, mask, W3: Tensor) -> Tensor:
    """P[t, k]: softmax over k of normalised(X_t W3) . normalised(C_u[k]); masked rows zero."""
    q = ad.layer_norm(ad.matmul(X, W3), eps=LN_EPS)
    c = ad.layer_norm(C_u, eps=LN_EPS)
    P = ad.softmax_rows(ad.matmul(q, ad.transpose(c)))
    keep = np.asarray(mask, dtype=np.float64)[..., None]
    return ad.hadamard(P, keep)


def position_attention(X_pos: Tensor, Wk1: Tensor, Wk2: Tensor, mask) -> Tensor:
    """One self-attentive distribution over positions per interest slot: ``(..., K, n)``."""
    K, D = Wk2.shape
    lead, n = X_pos.shape[:-2], X_pos.shape[-2]
    X4 = ad.reshape(X_pos, lead + (1, n, D))
    h = ad.tanh(ad.matmul(X4, Wk1))
    logits = ad.reshape(ad.matmul(h, ad.reshape(Wk2, (K, D, 1))), lead + (K, n))
    return ad.softmax_rows(logits, mask=np.asarray(mask, dtype=bool)[..., None, :])


def interest_embeddings(X: Tensor, P: Tensor, A: Tensor, gain: Tensor | None = None,
                        bias: Tensor | None = None) -> Tensor:
    weights = ad.hadamard(ad.transpose(P), A)
    return ad.layer_norm(ad.matmul(weights, X), gain, bias, eps=LN_EPS)


def aggregate(Phi: Tensor, P: Tensor, C_u: Tensor, mask, W3_agg: Tensor, W4: Tensor,
              gain: Tensor | None, bias: Tensor | None, tau: float) -> tuple[Tensor, Tensor, Tensor]:
    """Predict the next intention and blend the interests toward it.

    Returns ``(C_apt, e, v)``.
    """
    X_hat = ad.matmul(P, C_u)
    b = ad.softmax_rows(_pool_logits(X_hat, W3_agg, W4), mask=np.asarray(mask, dtype=bool))
    C_apt = ad.layer_norm(_weighted_rows(b, X_hat), gain, bias, eps=LN_EPS)
    lead, (K, D) = Phi.shape[:-2], Phi.shape[-2:]
    scores = ad.reshape(ad.matmul(Phi, ad.reshape(C_apt, lead + (D, 1))), lead + (K,))
    e = ad.softmax_rows(scores, temperature=tau)
    return C_apt, e, _weighted_rows(e, Phi)


def label_aware_aggregate(Phi: Tensor, target_embedding: Tensor | None) -> Tensor:
    """Pick the interest most similar to the target item (training only)."""
    if target_embedding is None:
        raise RuntimeError("label-aware aggregation needs a target; at inference use per-interest retrieval and merge")
    lead, (K, D) = Phi.shape[:-2], Phi.shape[-2:]
    sims = np.einsum("...kd,...d->...k", Phi.data, target_embedding.data)
    best = np.argmax(sims, axis=-1)
    flat = ad.reshape(Phi, (-1, K, D))
    rows = ad.take(flat, (np.arange(flat.shape[0]), best.reshape(-1)))
    return ad.reshape(rows, lead + (D,))


# -- composed forward passes ------------------------------------------------------------


def _positions(params: ModelParams, n: int) -> Tensor:
    """Positional rows aligned to the end of the window (the most recent item is last)."""
    total = params.config.n
    if n > total:
        raise ValueError(f"window of length {n} exceeds positional table of {total}")
    return ad.gather_rows(params["pos"], np.arange(total - n, total))


def encode(params: ModelParams, inputs: np.ndarray, mask: np.ndarray, *, mode: str = "adaptive",
           targets: np.ndarray | None = None, tau: float | None = None) -> InterestBundle:
    """Batched sparse-interest forward pass over ``inputs`` of shape ``(..., n)``."""
    cfg = params.config
    inputs = np.asarray(inputs, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    tau = cfg.tau if tau is None else tau
    n = inputs.shape[-1]
    X = ad.gather_rows(params["H"], inputs)

    a, z = virtual_concept(X, mask, params["W1"], params["W2"])
    idx, C_u, s = activate_concepts(z, params["C"], cfg.K)
    P = assign_intentions(X, C_u, mask, params["W3_assign"])
    X_pos = ad.add(X, _positions(params, n))
    A = position_attention(X_pos, params["Wk1"], params["Wk2"], mask)
    Phi = interest_embeddings(X, P, A, params["LN3_gain"], params["LN3_bias"])

    if mode == "adaptive":
        C_apt, e, v = aggregate(Phi, P, C_u, mask, params["W3_agg"], params["W4"],
                                params["LN4_gain"], params["LN4_bias"], tau)
    elif mode == "label_aware":
        target_emb = None if targets is None else ad.gather_rows(params["H"], np.asarray(targets))
        C_apt = e = None
        v = label_aware_aggregate(Phi, target_emb)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return InterestBundle(idx, s, C_u, P, A, Phi, C_apt, e, v, a)


def _real_suffix(mask: np.ndarray) -> int:
    m = int(mask.sum())
    if m == 0:
        raise ValueError("degenerate input: window with every position masked")
    if not mask[len(mask) - m:].all():
        raise ValueError("window must be left-padded (real items contiguous at the end)")
    return m


def forward(params: ModelParams, inputs, mask=None, **kwargs) -> InterestBundle:
    """Single-window forward pass.

    Padding is stripped before computing, so the outputs for real positions do
    not depend on how much padding surrounds them; the per-position outputs are
    re-expanded with exact zeros at the padded slots.
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    mask = inputs != 0 if mask is None else np.asarray(mask, dtype=bool)
    m = _real_suffix(mask)
    pad = len(inputs) - m
    if "targets" in kwargs and kwargs["targets"] is not None:
        kwargs["targets"] = np.asarray([kwargs["targets"]]).reshape(1)
    b = encode(params, inputs[None, pad:], np.ones((1, m), bool), **kwargs)
    K = params.config.K

    def first(t):
        return None if t is None else ad.reshape(t, t.shape[1:])

    P, A = first(b.assignment), first(b.position_attention)
    if pad:
        P = ad.concat([ad.constant(np.zeros((pad, K))), P], axis=0)
        A = ad.concat([ad.constant(np.zeros((K, pad))), A], axis=1)
    a = first(b.attention)
    if pad:
        a = ad.concat([ad.constant(np.zeros(pad)), a], axis=0)
    return InterestBundle(
        concept_indices=b.concept_indices[0],
        concept_scores=first(b.concept_scores),
        gated_prototypes=first(b.gated_prototypes),
        assignment=P,
        position_attention=A,
        interests=first(b.interests),
        next_intention=first(b.next_intention),
        weights=first(b.weights),
        user_vector=first(b.user_vector),
        attention=a,
    )


def baseline_encode(params: ModelParams, inputs: np.ndarray, mask: np.ndarray) -> Tensor:
    """Self-attentive single user vector over position-augmented embeddings."""
    inputs = np.asarray(inputs, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    X = ad.gather_rows(params["H"], inputs)
    X_pos = ad.add(X, _positions(params, inputs.shape[-1]))
    _, z = virtual_concept(X_pos, mask, params["W1"], params["W2"])
    D = z.shape[-1]
    lead = z.shape[:-1]
    return ad.reshape(ad.matmul(ad.reshape(z, lead + (1, D)), params["Wo"]), lead + (D,))


def baseline_forward(params: ModelParams, inputs, mask=None) -> Tensor:
    inputs = np.asarray(inputs, dtype=np.int64)
    mask = inputs != 0 if mask is None else np.asarray(mask, dtype=bool)
    m = _real_suffix(mask)
    v = baseline_encode(params, inputs[None, len(inputs) - m:], np.ones((1, m), bool))
    return ad.reshape(v, v.shape[1:])


def user_vectors(params: ModelParams, inputs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Inference-time user vectors ``(B, D)`` for either model kind (adaptive aggregation)."""
    if params.config.kind == "baseline":
        return baseline_encode(params, inputs, mask).data
    return encode(params, inputs, mask).user_vector.data


def interest_matrix(params: ModelParams, inputs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Inference-time interest embeddings ``(B, K, D)``."""
    return encode(params, inputs, mask).interests.data
