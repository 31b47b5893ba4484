"""Likelihood and prototype-covariance losses, Adam, and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import UserSequence, sample_negatives_batch, window_arrays
from .evaluation import evaluate
from .model import ModelConfig, ModelParams, baseline_encode, encode, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.001
    negatives: int = 5
    epochs: int = 30
    lam: float = 0.5
    tau: float = 0.1
    K: int = 4
    L: int = 50
    D: int = 128
    n: int = 20
    seed: int = 0
    aggregation_mode: str = "adaptive"
    model: str = "sine"
    eval_every: int = 0          # steps between validations; 0 = once per epoch
    val_cutoff: int = 50
    patience: int = 5
    threads: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        for name in ("batch_size", "negatives", "epochs", "K", "L", "D", "n", "val_cutoff", "patience", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0 or not self.tau > 0:
            raise ValueError("learning_rate and tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.aggregation_mode not in ("adaptive", "label_aware"):
            raise ValueError(f"unknown aggregation_mode {self.aggregation_mode!r}")
        if self.model not in ("sine", "baseline"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(num_items=num_items, K=self.K, L=self.L, D=self.D, n=self.n,
                           tau=self.tau, lam=self.lam, kind=self.model)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- losses ------------------------------------------------------------------------------


def sampled_softmax_loss(v: Tensor, targets, negatives, H: Tensor) -> Tensor:
    """Mean negative log-likelihood of each target against its sampled negatives.

    ``v`` is ``(D,)`` or ``(B, D)``; ``targets`` a scalar or ``(B,)``;
    ``negatives`` ``(c,)`` or ``(B, c)``.
    """
    single = v.ndim == 1
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    negatives = np.asarray(negatives, dtype=np.int64)
    if single:
        v = ad.reshape(v, (1, v.shape[0]))
        negatives = negatives.reshape(1, -1)
    if (negatives == targets[:, None]).any():
        raise ValueError("a target appears among its own negatives")
    B, D = v.shape
    cand = np.concatenate([targets[:, None], negatives], axis=1)
    rows = ad.gather_rows(H, cand)                                   # (B, 1+c, D)
    logits = ad.reshape(ad.matmul(rows, ad.reshape(v, (B, D, 1))), cand.shape)
    logp = ad.log_softmax_rows(logits)
    return ad.scale(ad.mean(logp[:, 0]), -1.0)


def covariance_regularizer(C: Tensor) -> Tensor:
    """Half the squared off-diagonal mass of the prototype row covariance."""
    L, D = C.shape
    if L < 2:
        raise ValueError("covariance regulariser needs at least two prototypes")
    centred = ad.sub(C, ad.mean(C, axis=0, keepdims=True))
    M = ad.scale(ad.matmul(centred, ad.transpose(centred)), 1.0 / D)
    off = ad.hadamard(M, 1.0 - np.eye(L))
    return ad.scale(ad.sum(ad.hadamard(off, off)), 0.5)


def user_vector_for_training(params: ModelParams, inputs, mask, targets, mode: str) -> Tensor:
    if params.config.kind == "baseline":
        return baseline_encode(params, inputs, mask)
    return encode(params, inputs, mask, mode=mode, targets=targets).user_vector


def total_loss(params: ModelParams, inputs, mask, targets, negatives, lam: float,
               mode: str = "adaptive") -> Tensor:
    v = user_vector_for_training(params, inputs, mask, targets, mode)
    loss = sampled_softmax_loss(v, targets, negatives, params["H"])
    if lam and "C" in params.tensors:
        loss = ad.add(loss, ad.scale(covariance_regularizer(params["C"]), lam))
    return loss


# -- optimiser -------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update from the gradients left by backward()."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name == "H":
            g = g.copy()
            g[0] = 0.0
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if name == "H":
            p.data[0] = 0.0


# -- loop ----------------------------------------------------------------------------------------


LOG_FIELDS = ("step", "epoch", "train_loss", "val_HR@{N}", "val_NDCG@{N}", "wall_seconds")


@dataclass
class TrainResult:
    params: ModelParams
    log_lines: list[str]
    best_val_hr: float
    best_step: int
    steps: int


def format_log_line(step: int, epoch: int, loss: float, hr: float, ndcg: float, N: int,
                    wall: float | None) -> str:
    names = [f.format(N=N) for f in LOG_FIELDS]
    vals = [str(step), str(epoch), f"{loss:.10f}", f"{hr:.10f}", f"{ndcg:.10f}",
            "-" if wall is None else f"{wall:.3f}"]
    return "\t".join(f"{k}={v}" for k, v in zip(names, vals))


def train(config: TrainConfig, sequences: list[UserSequence], num_items: int,
          on_log=None) -> TrainResult:
    """Train SINE (or the baseline) and keep the parameters with the best validation HR.

    ``on_log`` receives each formatted log line as it is produced.
    """
    rng = np.random.default_rng(config.seed)
    params = init_params(config.model_config(num_items), rng)
    inputs, masks, targets = window_arrays(sequences, config.n)
    if len(targets) == 0:
        raise ValueError("no training windows: every user needs at least two training items")
    if config.negatives > num_items - 1:
        raise ValueError(f"{config.negatives} negatives requested but only {num_items - 1} candidates")

    state = AdamState()
    best = params.copy()
    best_hr, best_step, bad = -1.0, 0, 0
    lines: list[str] = []
    start = time.perf_counter()
    step = 0
    run_loss, run_count = 0.0, 0
    steps_per_epoch = -(-len(targets) // config.batch_size)
    every = config.eval_every or steps_per_epoch
    eval_mode = config.aggregation_mode if config.model == "sine" else "adaptive"

    def validate(epoch):
        nonlocal best, best_hr, best_step, bad, run_loss, run_count
        rep = evaluate(params, sequences, [config.val_cutoff], split="valid", mode=eval_mode,
                       threads=config.threads)
        hr, ndcg = rep.hr[config.val_cutoff], rep.ndcg[config.val_cutoff]
        wall = time.perf_counter() - start if config.record_wall_time else None
        line = format_log_line(step, epoch, run_loss / max(run_count, 1), hr, ndcg, config.val_cutoff, wall)
        lines.append(line)
        if on_log:
            on_log(line)
        log.info(line)
        run_loss, run_count = 0.0, 0
        if hr > best_hr:
            best, best_hr, best_step, bad = params.copy(), hr, step, 0
        else:
            bad += 1
        return bad >= config.patience

    stop = False
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(targets))
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            negs = sample_negatives_batch(targets[batch], config.negatives, num_items, rng)
            params.zero_grad()
            with Tape() as tape:
                loss = total_loss(params, inputs[batch], masks[batch], targets[batch], negs,
                                  config.lam, config.aggregation_mode)
            value = loss.item()
            if not np.isfinite(value):
                tape.backward(loss)
                gmax = max(float(np.nanmax(np.abs(p.grad))) for _, p in params.items() if p.grad is not None)
                raise TrainingDiverged(
                    f"non-finite loss at step {step + 1} (lr={config.learning_rate}, max |grad|={gmax:.3e})")
            tape.backward(loss)
            adam_step(params, state, config.learning_rate)
            step += 1
            run_loss += value
            run_count += 1
            if step % every == 0 and validate(epoch):
                stop = True
                break
        if stop:
            break
    if run_count:
        validate(epoch)
    return TrainResult(best, lines, best_hr, best_step, step)
