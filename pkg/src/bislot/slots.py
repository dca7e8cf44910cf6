"""Iterative competitive slot decomposition of patch tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (GruParams, Rng, Tensor, clip, exp, gru_cell, layer_norm, parameter,
                     softmax)

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0
# guards a fully underflowed attention row; absorbed by rounding for any real row sum
RENORM_EPS = float(np.finfo(np.float64).tiny)


@dataclass
class SlotParams:
    mu: Tensor          # K x D
    log_sigma: Tensor   # K x D
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    gru: GruParams
    ln_input: tuple[Tensor, Tensor]
    ln_slot: tuple[Tensor, Tensor]

    @property
    def num_slots(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @classmethod
    def init(cls, num_slots: int, dim: int, rng: Rng) -> SlotParams:
        s = 1.0 / math.sqrt(dim)
        return cls(
            mu=parameter(rng.normal((num_slots, dim))),
            log_sigma=parameter(np.full((num_slots, dim), math.log(0.1))),
            w_q=parameter(rng.normal((dim, dim), s)),
            w_k=parameter(rng.normal((dim, dim), s)),
            w_v=parameter(rng.normal((dim, dim), s)),
            gru=GruParams.init(dim, rng),
            ln_input=(parameter(np.ones(dim)), parameter(np.zeros(dim))),
            ln_slot=(parameter(np.ones(dim)), parameter(np.zeros(dim))),
        )

    def tensors(self) -> list[Tensor]:
        return [self.mu, self.log_sigma, self.w_q, self.w_k, self.w_v, *self.gru.tensors(),
                *self.ln_input, *self.ln_slot]


@dataclass
class SlotState:
    slots: Tensor
    attn: list[np.ndarray] = field(default_factory=list)         # renormalized over tokens
    competition: list[np.ndarray] = field(default_factory=list)  # softmax over slots
    attn_tensors: list[Tensor] = field(default_factory=list)

    @property
    def iterations_run(self) -> int:
        return len(self.attn)


def init_slots(params: SlotParams, rng: Rng | None, batch: int | None = None,
               eps: np.ndarray | None = None) -> Tensor:
    """mu + exp(log_sigma) * eps, differentiable in mu and log_sigma.

    ``eps`` overrides the standard-normal draw from ``rng``.
    """
    if eps is None:
        shape = params.mu.shape if batch is None else (batch, *params.mu.shape)
        eps = rng.normal(shape)
    eps = Tensor(eps)
    sigma = exp(clip(params.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    return params.mu + sigma * eps


def project_tokens(tokens: Tensor, params: SlotParams) -> tuple[Tensor, Tensor]:
    t = layer_norm(tokens, *params.ln_input)
    return t @ params.w_k, t @ params.w_v


def slot_iteration(slots: Tensor, tokens: Tensor, params: SlotParams,
                   kv: tuple[Tensor, Tensor] | None = None):
    """One refinement step; returns ``(new_slots, attn_renorm, competition)``.

    ``competition`` is the slot-axis softmax ``a`` (columns sum to 1);
    ``attn_renorm`` is ``a`` normalized over tokens (rows sum to 1).
    """
    k, v = kv if kv is not None else project_tokens(tokens, params)
    q = layer_norm(slots, *params.ln_slot) @ params.w_q
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(params.dim))
    a = softmax(logits, axis=-2)
    a_tilde = a / (a.sum(axis=-1, keepdims=True) + RENORM_EPS)
    updates = a_tilde @ v
    return gru_cell(updates, slots, params.gru), a_tilde, a


def run(tokens: Tensor, params: SlotParams, iterations: int, rng: Rng,
        init: Tensor | None = None) -> SlotState:
    """Initialize slots and apply ``iterations`` refinement steps."""
    if iterations < 1:
        raise ValueError("slot attention needs at least one iteration")
    batch = tokens.shape[0] if tokens.ndim == 3 else None
    slots = init if init is not None else init_slots(params, rng, batch)
    kv = project_tokens(tokens, params)
    state = SlotState(slots=slots)
    for _ in range(iterations):
        slots, a_tilde, a = slot_iteration(slots, tokens, params, kv)
        state.attn.append(a_tilde.data)
        state.competition.append(a.data)
        state.attn_tensors.append(a_tilde)
    state.slots = slots
    return state


def argmax_masks(state: SlotState) -> np.ndarray:
    """Per-token slot index under the final competition softmax (lowest index on ties)."""
    if not state.competition:
        raise ValueError("no iterations recorded")
    return np.argmax(state.competition[-1], axis=-2)
