"""Exact maximum-inner-product retrieval over the item table."""

from __future__ import annotations

import numpy as np

from .data import pad_left
from .model import ModelParams, encode, user_vectors


class ItemIndex:
    """Frozen copy of the item embeddings (rows 1..M) for brute-force search."""

    def __init__(self, H, item_ids: list[str] | None = None):
        H = np.asarray(getattr(H, "data", H), dtype=np.float64)
        self.embeddings = H[1:].copy()
        self.embeddings.setflags(write=False)
        self.norms = np.linalg.norm(self.embeddings, axis=1)
        self.item_ids = list(item_ids) if item_ids is not None else None

    @property
    def num_items(self) -> int:
        return self.embeddings.shape[0]

    def scores(self, query) -> np.ndarray:
        return self.embeddings @ np.asarray(getattr(query, "data", query), dtype=np.float64)

    def top_n(self, query, N: int, exclude=()) -> list[tuple[int, float]]:
        """``N`` best ``(item, score)`` pairs by inner product; ties go to the lower index."""
        exclude = {int(j) for j in exclude if 1 <= int(j) <= self.num_items}
        if N < 0 or N > self.num_items - len(exclude):
            raise ValueError(f"cannot return {N} items from {self.num_items - len(exclude)} candidates")
        s = self.scores(query)
        order = np.argsort(-s, kind="stable") + 1
        out = []
        for j in order:
            if len(out) == N:
                break
            if int(j) not in exclude:
                out.append((int(j), float(s[j - 1])))
        return out

    def concept_neighbors(self, prototype, top: int) -> list[tuple[int, float]]:
        """Items by descending cosine similarity to a prototype vector."""
        p = np.asarray(getattr(prototype, "data", prototype), dtype=np.float64)
        denom = np.maximum(self.norms * np.linalg.norm(p), 1e-300)
        cos = (self.embeddings @ p) / denom
        order = np.argsort(-cos, kind="stable")[:top]
        return [(int(j) + 1, float(cos[j])) for j in order]


def concept_neighbors(C, concept: int, top: int, index: ItemIndex) -> list[tuple[int, float]]:
    C = np.asarray(getattr(C, "data", C))
    if not 0 <= concept < C.shape[0]:
        raise IndexError(f"concept {concept} out of range for {C.shape[0]} prototypes")
    return index.concept_neighbors(C[concept], top)


def merge_candidates(lists: list[list[tuple[int, float]]], N: int) -> list[tuple[int, float]]:
    """Union of per-interest lists, each item scored by its best score, re-sorted, first N."""
    best: dict[int, float] = {}
    for lst in lists:
        for j, s in lst:
            if j not in best or s > best[j]:
                best[j] = s
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:N]


def retrieve_for_user(params: ModelParams, sequence, N: int, index: ItemIndex | None = None,
                      mode: str = "adaptive") -> list[tuple[int, float]]:
    """Top-N unseen items for a behaviour sequence (the whole sequence is excluded)."""
    sequence = list(sequence)
    if not sequence:
        raise ValueError("empty behaviour sequence")
    index = index or ItemIndex(params["H"])
    inputs, mask = pad_left(sequence, params.config.n)
    seen = set(sequence)
    if mode == "adaptive":
        v = user_vectors(params, inputs[None], mask[None])[0]
        return index.top_n(v, N, seen)
    if mode == "label_aware":
        Phi = encode(params, inputs[None], mask[None]).interests.data[0]
        return merge_candidates([index.top_n(q, N, seen) for q in Phi], N)
    raise ValueError(f"unknown retrieval mode {mode!r}")
