"""Finite-difference checks for every trainable block and the full loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .recalibration import (
    ModelConfig,
    adapter_forward,
    aligner_layer,
    global_attention,
    init_params,
    recalibrate_tensors,
)
from .scorer import score_tensor
from .tensor import Tensor, float64_mode, grad_check, mse_loss, mul, sum_all


@dataclass
class GradcheckReport:
    block_errors: dict[str, float]
    full_error: float
    block_tol: float
    full_tol: float

    @property
    def passed(self) -> bool:
        return (all(e <= self.block_tol for e in self.block_errors.values())
                and self.full_error <= self.full_tol)

    def to_dict(self) -> dict:
        return {"blocks": self.block_errors, "full": self.full_error,
                "block_tol": self.block_tol, "full_tol": self.full_tol, "passed": self.passed}


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection so every output entry matters
    return sum_all(mul(out, Tensor(w)))


def run_gradcheck(d: int = 16, heads: int = 2, m: int = 2, d_prime: int = 16, n_word: int = 5,
                  n_bbox: int = 4, n_global: int = 3, seed: int = 0, max_entries: int | None = 24,
                  block_tol: float = 1e-5, full_tol: float = 1e-4) -> GradcheckReport:
    """Check adapters, global attention, one aligner layer, the score head and the full loss.

    Runs in float64. ``max_entries`` caps perturbed entries per tensor for the
    full-pipeline check only; the per-block checks perturb every entry.
    """
    with float64_mode():
        cfg = ModelConfig(d=d, n_head=heads, m=m, d_prime=d_prime, n_word=n_word)
        params = init_params(cfg, seed=seed)
        rng = np.random.default_rng(seed + 1)
        v = Tensor(rng.uniform(-1, 1, (n_bbox, d)))
        t = Tensor(rng.uniform(-1, 1, (n_word, d)))
        g = Tensor(rng.uniform(-1, 1, (n_global, d)))
        errs: dict[str, float] = {}

        wv = rng.uniform(-1, 1, (n_bbox, d))
        wt = rng.uniform(-1, 1, (n_word, d))
        ad = {k: params[k] for k in ("adapter.v.w1", "adapter.v.w2", "adapter.t.w1", "adapter.t.w2")}
        errs["adapters"] = grad_check(
            lambda: sum_all(mul(adapter_forward(v, ad["adapter.v.w1"], ad["adapter.v.w2"], cfg.alpha), Tensor(wv)))
            + _weighted(adapter_forward(t, ad["adapter.t.w1"], ad["adapter.t.w2"], cfg.beta_adapter), wt),
            {**ad, "boxes": v})

        ga = {k: p for k, p in params.items() if k.startswith("global.")}
        errs["global_attention"] = grad_check(
            lambda: _weighted(global_attention(v, g, params, heads), wv), {**ga, "boxes": v, "tokens": g})

        al = {k: p for k, p in params.items() if k.startswith("aligner.0.")}

        def layer():
            vo, to = aligner_layer(v, t, params, 0, heads)
            return _weighted(vo, wv) + _weighted(to, wt)

        errs["aligner_layer"] = grad_check(layer, {**al, "vision": v, "text": t})

        aff = Tensor(rng.uniform(-1, 1, (n_bbox, n_word)))
        sc = {k: p for k, p in params.items() if k.startswith("score.")}
        ws = rng.uniform(-1, 1, (1, n_bbox))
        errs["score_head"] = grad_check(lambda: _weighted(score_tensor(aff, params, heads), ws),
                                        {**sc, "affinity": aff})

        target = Tensor((rng.uniform(size=(1, n_bbox)) < 0.5).astype(float))
        full = grad_check(
            lambda: mse_loss(score_tensor(recalibrate_tensors(v, t, g, params, cfg), params, heads), target),
            params, max_entries=max_entries, seed=seed)
    return GradcheckReport(errs, full, block_tol, full_tol)
