"""Full-catalogue HR@N / NDCG@N and prototype-clustering NMI."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, UserSequence, pad_left
from .model import ModelParams, encode, user_vectors

NMI_VARIANT = "sqrt"  # I / sqrt(H(clusters) * H(labels)), natural log


@dataclass
class EvalReport:
    cutoffs: list[int]
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_users: int
    split: str = "test"
    nmi: float | None = None
    wall_seconds: float = 0.0
    ranks: np.ndarray | None = field(default=None, repr=False)

    def lines(self) -> list[str]:
        """Machine-readable ``metric=value`` block."""
        out = [f"split={self.split}", f"users={self.num_users}"]
        for N in self.cutoffs:
            out.append(f"HR@{N}={self.hr[N]:.6f}")
            out.append(f"NDCG@{N}={self.ndcg[N]:.6f}")
        if self.nmi is not None:
            out.append(f"NMI[{NMI_VARIANT}]={self.nmi:.6f}")
        return out

    def text(self) -> str:
        head = f"# evaluation on {self.num_users} users ({self.split} split)"
        return "\n".join([head, *self.lines()]) + "\n"


def hr_ndcg(rank: int, cutoffs) -> tuple[dict[int, float], dict[int, float]]:
    """Single-target hit rate and NDCG at each cutoff for a 1-based rank."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    hr = {N: 1.0 if rank <= N else 0.0 for N in cutoffs}
    ndcg = {N: 1.0 / math.log2(rank + 1) if rank <= N else 0.0 for N in cutoffs}
    return hr, ndcg


def rank_items(v: np.ndarray, H: np.ndarray, exclude=()) -> np.ndarray:
    """Item indices (1..M) by descending ``H[j] . v``, excluded items dropped, ties to lower index."""
    H = np.asarray(getattr(H, "data", H))
    scores = H[1:] @ np.asarray(getattr(v, "data", v))
    order = np.argsort(-scores, kind="stable") + 1
    if len(exclude):
        order = order[~np.isin(order, np.fromiter(exclude, dtype=np.int64))]
    return order


def target_ranks(scores: np.ndarray, targets: np.ndarray, exclude_mask: np.ndarray) -> np.ndarray:
    """1-based rank of each target among non-excluded items, ties broken by lower index.

    ``scores`` is ``(B, M+1)`` with column 0 the padding item.
    """
    B = len(targets)
    rows = np.arange(B)
    s = scores.copy()
    s[exclude_mask] = -np.inf
    s[:, PAD] = -np.inf
    t = s[rows, targets][:, None]
    cols = np.arange(s.shape[1])[None, :]
    ahead = (s > t) | ((s == t) & (cols < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def _split_batch(params: ModelParams, seqs: list[UserSequence], split: str, mode: str):
    n = params.config.n
    M1 = params["H"].shape[0]
    inputs = np.zeros((len(seqs), n), np.int64)
    masks = np.zeros((len(seqs), n), bool)
    targets = np.zeros(len(seqs), np.int64)
    exclude = np.zeros((len(seqs), M1), bool)
    for i, seq in enumerate(seqs):
        hist = seq.history(split)
        inputs[i], masks[i] = pad_left(hist, n)
        targets[i] = seq.target(split)
        exclude[i, hist] = True
    # only items the user has not interacted with compete with the target
    exclude[np.arange(len(seqs)), targets] = False
    H = params["H"].data
    if mode == "label_aware":
        Phi = encode(params, inputs, masks).interests.data          # (B, K, D)
        # merged per-interest top-N lists equal the top-N by best per-interest score
        scores = np.einsum("bkd,md->bkm", Phi, H).max(axis=1)
    else:
        scores = user_vectors(params, inputs, masks) @ H.T
    return target_ranks(scores, targets, exclude)


def evaluate(params: ModelParams, sequences: list[UserSequence], cutoffs, split: str = "test",
             mode: str = "adaptive", threads: int = 1, batch_size: int = 256,
             item_labels: dict[int, str] | None = None) -> EvalReport:
    """Rank the held-out item of every eligible user against the whole catalogue."""
    start = time.perf_counter()
    cutoffs = sorted(int(c) for c in cutoffs)
    users = [s for s in sequences if s.has_targets]
    chunks = [users[i:i + batch_size] for i in range(0, len(users), batch_size)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _split_batch(params, c, split, mode), chunks))
    else:
        parts = [_split_batch(params, c, split, mode) for c in chunks]
    ranks = np.concatenate(parts) if parts else np.zeros(0, np.int64)
    hr, ndcg = {}, {}
    for N in cutoffs:
        hit = ranks <= N
        hr[N] = float(hit.mean()) if len(ranks) else 0.0
        ndcg[N] = float(np.where(hit, 1.0 / np.log2(ranks + 1), 0.0).mean()) if len(ranks) else 0.0
    report = EvalReport(cutoffs, hr, ndcg, len(users), split, ranks=ranks)
    if item_labels and "C" in params.tensors:
        report.nmi = nmi(*cluster_assignment(params["H"].data, params["C"].data, item_labels))
    report.wall_seconds = time.perf_counter() - start
    return report


# -- clustering ---------------------------------------------------------------------------


def cluster_assignment(H: np.ndarray, C: np.ndarray, item_labels: dict[int, str]) -> tuple[list, list]:
    """Each labelled item's argmax-cosine prototype, paired with its label."""
    items = np.array(sorted(item_labels), dtype=np.int64)
    E = H[items]
    En = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-300)
    Cn = C / np.maximum(np.linalg.norm(C, axis=1, keepdims=True), 1e-300)
    clusters = np.argmax(En @ Cn.T, axis=1)
    return clusters.tolist(), [item_labels[int(j)] for j in items]


def _entropy(counts: np.ndarray, total: int) -> float:
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def nmi(clusters, labels) -> float:
    """Normalised mutual information, I / sqrt(H_c * H_l); 0 if either entropy is 0."""
    clusters, labels = list(clusters), list(labels)
    if len(clusters) != len(labels):
        raise ValueError("clusters and labels differ in length")
    total = len(clusters)
    if total < 2:
        raise ValueError("NMI needs at least two items")
    _, ci = np.unique(np.asarray(clusters, dtype=object).astype(str), return_inverse=True)
    _, li = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(table, (ci, li), 1.0)
    h_c = _entropy(table.sum(axis=1), total)
    h_l = _entropy(table.sum(axis=0), total)
    if h_c == 0.0 or h_l == 0.0:
        return 0.0
    pij = table / total
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / total ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return min(1.0, max(0.0, mi / math.sqrt(h_c * h_l)))
