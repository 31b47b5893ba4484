"""Interaction logs, leave-one-out splits, training windows and synthetic corpora.

Item index 0 is reserved for padding, so external items map to ``1..M``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = 0


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Per-user chronological item sequences plus the vocabularies."""

    user_ids: list[str]                      # dense user index -> external id
    item_ids: list[str]                      # dense item index - 1 -> external id
    sequences: list[list[int]]               # dense item indices (1..M) per user
    item_labels: dict[int, str] | None = None

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {it: i + 1 for i, it in enumerate(self.item_ids)}

    def item_id(self, index: int) -> str:
        if index == PAD:
            raise IndexError("padding index has no external id")
        return self.item_ids[index - 1]


@dataclass
class UserSequence:
    user_index: int
    items: list[int]

    @property
    def has_targets(self) -> bool:
        return len(self.items) >= 3

    @property
    def train_items(self) -> list[int]:
        return self.items[:-2] if self.has_targets else list(self.items)

    @property
    def valid_target(self) -> int | None:
        return self.items[-2] if self.has_targets else None

    @property
    def test_target(self) -> int | None:
        return self.items[-1] if self.has_targets else None

    def history(self, split: str) -> list[int]:
        """Encoder input for a split: training items, plus the validation item for test."""
        if split == "valid":
            return self.train_items
        if split == "test":
            return self.items[:-1]
        raise ValueError(f"unknown split {split!r}")

    def target(self, split: str) -> int | None:
        return {"valid": self.valid_target, "test": self.test_target}[split]


@dataclass
class TrainWindow:
    inputs: np.ndarray  # (n,) int, left-padded with PAD
    mask: np.ndarray    # (n,) bool
    target: int


@dataclass
class SyntheticSpec:
    num_users: int = 5000
    num_items: int = 2000
    num_latent_intents: int = 64
    intents_per_user: int = 4
    sequence_length: int = 40
    popularity_exponent: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.intents_per_user > self.num_latent_intents:
            raise DataError("intents_per_user exceeds num_latent_intents")
        if self.num_items < self.num_latent_intents:
            raise DataError("need at least one item per latent intent")
        if min(self.num_users, self.num_items, self.intents_per_user, self.sequence_length) < 1:
            raise DataError("synthetic sizes must be positive")


# -- loading -----------------------------------------------------------------------


def _split_line(line: str) -> list[str]:
    if "::" in line:
        parts = line.split("::")
        # MovieLens .dat rows: user::item::rating::timestamp
        return [parts[0], parts[1], parts[3]] if len(parts) == 4 else parts
    if "\t" in line:
        return line.split("\t")
    return next(csv.reader(io.StringIO(line)))


def read_records(path: str | Path) -> list[tuple[str, str, int]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in _split_line(line)]
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected user, item, timestamp; got {line!r}")
            try:
                ts = int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {parts[2]!r} is not an integer") from None
            records.append((parts[0], parts[1], ts))
    return records


def build_log(records, min_user_len: int = 3) -> InteractionLog:
    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, (user, item, ts) in enumerate(records):
        per_user.setdefault(user, []).append((ts, order, item))
    kept = {u: sorted(rs) for u, rs in per_user.items() if len(rs) >= min_user_len}
    if not kept:
        raise DataError("no users left after filtering")

    item_index: dict[str, int] = {}
    user_ids, sequences = [], []
    for user, rs in kept.items():
        user_ids.append(user)
        seq = []
        for _, _, item in rs:
            if item not in item_index:
                item_index[item] = len(item_index) + 1
            seq.append(item_index[item])
        sequences.append(seq)
    return InteractionLog(user_ids, list(item_index), sequences)


def load_interactions(path: str | Path, min_user_len: int = 3) -> InteractionLog:
    """Read a ``user, item, timestamp`` file (tab, comma or ``::`` separated)."""
    records = read_records(path)
    if not records:
        raise DataError(f"{path}: no interaction records")
    return build_log(records, min_user_len)


def load_item_labels(path: str | Path, log: InteractionLog) -> dict[int, str]:
    """Item labels keyed by dense index; items absent from the log are ignored."""
    index = log.item_index()
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in _split_line(line)]
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected item, label; got {line!r}")
            if parts[0] in index:
                labels[index[parts[0]]] = parts[1]
    return labels


def write_interactions(log: InteractionLog, path: str | Path, labels_path: str | Path | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        ts = 0
        for user, seq in zip(log.user_ids, log.sequences):
            for item in seq:
                fh.write(f"{user}\t{log.item_id(item)}\t{ts}\n")
                ts += 1
    if labels_path is not None and log.item_labels is not None:
        with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
            for item in sorted(log.item_labels):
                fh.write(f"{log.item_id(item)}\t{log.item_labels[item]}\n")


# -- splits and windows --------------------------------------------------------------------


def split_leave_one_out(log: InteractionLog) -> list[UserSequence]:
    if not log.sequences:
        raise DataError("empty interaction log")
    return [UserSequence(u, list(seq)) for u, seq in enumerate(log.sequences)]


def pad_left(items, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Last ``n`` items, left-padded with PAD, and the validity mask."""
    items = list(items)[-n:] if n > 0 else []
    inputs = np.zeros(n, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    if items:
        inputs[n - len(items):] = items
        mask[n - len(items):] = True
    return inputs, mask


def make_train_windows(seq: UserSequence, n: int) -> list[TrainWindow]:
    if n < 1:
        raise ValueError("window length n must be >= 1")
    train = seq.train_items
    windows = []
    for t in range(1, len(train)):
        inputs, mask = pad_left(train[:t], n)
        windows.append(TrainWindow(inputs, mask, train[t]))
    return windows


def window_arrays(sequences: list[UserSequence], n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All training windows stacked as ``(inputs, mask, targets)`` arrays."""
    inputs, masks, targets = [], [], []
    for seq in sequences:
        for w in make_train_windows(seq, n):
            inputs.append(w.inputs)
            masks.append(w.mask)
            targets.append(w.target)
    if not inputs:
        return np.zeros((0, n), np.int64), np.zeros((0, n), bool), np.zeros(0, np.int64)
    return np.stack(inputs), np.stack(masks), np.asarray(targets, dtype=np.int64)


# -- negatives ---------------------------------------------------------------------


def sample_negatives(target: int, count: int, num_items: int, rng: np.random.Generator) -> list[int]:
    """``count`` distinct items from ``1..num_items`` excluding ``target``, uniformly."""
    if count > num_items - 1 or count < 0:
        raise ValueError(f"cannot draw {count} negatives from {num_items - 1} candidates")
    draw = rng.choice(num_items - 1, size=count, replace=False) + 1
    draw[draw >= target] += 1
    return draw.tolist()


def sample_negatives_batch(targets: np.ndarray, count: int, num_items: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_negatives`: one row of distinct negatives per target.

    Rows with a repeated draw are redrawn whole, which keeps every row
    uniform over ordered distinct tuples.
    """
    if count > num_items - 1 or count < 0:
        raise ValueError(f"cannot draw {count} negatives from {num_items - 1} candidates")
    targets = np.asarray(targets, dtype=np.int64)
    out = np.empty((len(targets), count), dtype=np.int64)
    todo = np.arange(len(targets))
    while todo.size:
        draw = rng.integers(1, num_items, size=(todo.size, count))
        draw[draw >= targets[todo, None]] += 1
        srt = np.sort(draw, axis=1)
        ok = (srt[:, 1:] != srt[:, :-1]).all(axis=1) if count > 1 else np.ones(todo.size, bool)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


# -- synthetic corpora ---------------------------------------------------------------------


@dataclass
class SyntheticCorpus:
    log: InteractionLog
    item_intent: np.ndarray                 # dense item index -> intent (index 0 unused, -1)
    user_intents: list[np.ndarray] = field(default_factory=list)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Users with a sparse set of latent intents, clicking Zipf-popular items per intent."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    intent_of = rng.permutation(np.arange(spec.num_items) % spec.num_latent_intents)
    members = [np.flatnonzero(intent_of == c) for c in range(spec.num_latent_intents)]
    cdfs = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** spec.popularity_exponent
        cdfs.append(np.cumsum(w / w.sum()))

    must_cover = spec.sequence_length >= spec.intents_per_user
    records, user_intents = [], []
    ts = 0
    for u in range(spec.num_users):
        chosen = np.sort(rng.choice(spec.num_latent_intents, size=spec.intents_per_user, replace=False))
        while True:
            picks = rng.integers(0, spec.intents_per_user, size=spec.sequence_length)
            if not must_cover or len(np.unique(picks)) == spec.intents_per_user:
                break
        draws = rng.random(spec.sequence_length)
        for p, r in zip(picks, draws):
            c = chosen[p]
            rank = min(int(np.searchsorted(cdfs[c], r, side="right")), len(members[c]) - 1)
            records.append((f"u{u}", f"i{members[c][rank]}", ts))
            ts += 1
        user_intents.append(chosen)

    log = build_log(records, min_user_len=1)
    item_intent = np.full(log.num_items + 1, -1, dtype=np.int64)
    for j, ext in enumerate(log.item_ids, start=1):
        item_intent[j] = intent_of[int(ext[1:])]
    log.item_labels = {j: f"c{item_intent[j]}" for j in range(1, log.num_items + 1)}
    return SyntheticCorpus(log, item_intent, user_intents)
