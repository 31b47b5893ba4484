"""Finite-difference check of the full training loss on a small instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelParams, encode, init_params
from .training import total_loss


@dataclass
class GradCheckResult:
    errors: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance

    def lines(self) -> list[str]:
        out = [f"{k}\t{v:.3e}" for k, v in self.errors.items()]
        name, err = self.worst
        out.append(f"worst={name}\trel_error={err:.3e}\ttolerance={self.tolerance:.0e}\t"
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def toy_instance(seed: int = 0, n: int = 4, K: int = 2, L: int = 4, M: int = 8, D: int = 6,
                 kind: str = "sine"):
    """Parameters and a small padded batch whose top-K choice is not near a tie.

    LayerNorm gains are drawn small so the aggregation softmax is not
    saturated; otherwise its gradients sink below finite-difference noise.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_items=M, K=K, L=L, D=D, n=n, tau=0.1, lam=0.5, kind=kind)
    inputs = np.array([[0, 1, 2, 3], [5, 6, 7, 8], [0, 0, 4, 2]])[:, -n:]
    mask = inputs != 0
    targets = np.array([4, 1, 6])
    negatives = np.array([[5, 6], [2, 3], [7, 1]])
    while True:
        params = init_params(cfg, rng, std=0.5)
        for name in ("LN3_gain", "LN4_gain"):
            if name in params.tensors:
                params[name].data[:] = rng.uniform(0.2, 0.5, D)
        for name in ("LN3_bias", "LN4_bias"):
            if name in params.tensors:
                params[name].data[:] = rng.normal(0.0, 0.1, D)
        if kind == "baseline" or _topk_margin(params, inputs, mask) > 1e-2:
            return params, inputs, mask, targets, negatives


def _topk_margin(params: ModelParams, inputs, mask) -> float:
    s = np.sort(encode(params, inputs, mask).concept_scores.data, axis=-1)[:, ::-1]
    K = params.config.K
    return float((s[:, K - 1] - s[:, K]).min()) if K < s.shape[1] else np.inf


def run_gradcheck(seed: int = 0, tolerance: float = 1e-4, step: float = 1e-4,
                  kind: str = "sine", mode: str = "adaptive") -> GradCheckResult:
    params, inputs, mask, targets, negatives = toy_instance(seed, kind=kind)
    lam = params.config.lam

    def f():
        return total_loss(params, inputs, mask, targets, negatives, lam, mode)

    return GradCheckResult(ad.grad_check(f, dict(params.items()), step=step), tolerance)
