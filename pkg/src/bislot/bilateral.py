"""Cross-eye slot correspondence, reconstruction decoder, classifier and objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import slots as slot_mod
from .encoder import ConfigError, EncoderParams, encode, grid_side, patch_targets
from .tensor import (Rng, Tensor, bce_with_logits, concat, dropout, gelu, parameter, sigmoid,
                     softmax)

VARIANTS = ("full", "no_slots", "no_bilateral", "patch_cross_attn", "lambda_zero",
            "frozen_encoder")


# ---------------------------------------------------------------------------
# cross-attention


@dataclass
class CrossAttnParams:
    heads: int
    w_q: Tensor   # D x D, head h owns columns [h*Dh, (h+1)*Dh)
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor   # D x D

    @classmethod
    def init(cls, dim: int, heads: int, rng: Rng) -> CrossAttnParams:
        if heads < 1 or dim % heads:
            raise ConfigError(f"{heads} heads do not divide width {dim}")
        s = 1.0 / math.sqrt(dim)
        return cls(heads, *(parameter(rng.normal((dim, dim), s)) for _ in range(4)))

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


@dataclass
class CorrespondenceMatrix:
    per_head: np.ndarray   # (..., H, K, K); rows = querying eye's slots
    mean: np.ndarray       # (..., K, K)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    return x.swapaxes(-2, -3)


def cross_attend(s_q: Tensor, s_kv: Tensor, params: CrossAttnParams):
    """Multi-head attention of ``s_q`` rows over ``s_kv`` rows.

    Returns ``(refined, correspondence, attn_tensor)``; ``refined`` is the
    head-concatenated output projected by ``w_o`` (no residual).
    """
    d = s_q.shape[-1]
    h = params.heads
    if d % h:
        raise ConfigError(f"{h} heads do not divide width {d}")
    dh = d // h
    q = _split_heads(s_q @ params.w_q, h)
    k = _split_heads(s_kv @ params.w_k, h)
    v = _split_heads(s_kv @ params.w_v, h)
    attn = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    heads_out = (attn @ v).swapaxes(-2, -3)          # (..., K, H, Dh)
    merged = heads_out.reshape(*heads_out.shape[:-2], d)
    corr = CorrespondenceMatrix(per_head=attn.data, mean=attn.data.mean(axis=-3))
    return merged @ params.w_o, corr, attn


# ---------------------------------------------------------------------------
# classifier


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout_p: float = 0.1

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, in_dim: int, hidden: int, num_classes: int, rng: Rng,
             dropout_p: float = 0.1) -> HeadParams:
        if num_classes < 1:
            raise ConfigError("need at least one class")
        return cls(
            w1=parameter(rng.normal((in_dim, hidden), 1.0 / math.sqrt(in_dim))),
            b1=parameter(np.zeros(hidden)),
            w2=parameter(rng.normal((hidden, num_classes), 1.0 / math.sqrt(hidden))),
            b2=parameter(np.zeros(num_classes)),
            dropout_p=dropout_p,
        )

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def classify(z: Tensor, params: HeadParams, training: bool = False,
             rng: Rng | None = None) -> Tensor:
    hidden = dropout(gelu(z @ params.w1 + params.b1), params.dropout_p, training, rng)
    return hidden @ params.w2 + params.b2


def pool_and_classify(left: Tensor, right: Tensor, params: HeadParams, training: bool = False,
                      rng: Rng | None = None) -> Tensor:
    """Mean-pool each eye over its rows, concatenate, and run the MLP."""
    z = concat([left.mean(axis=-2), right.mean(axis=-2)], axis=-1)
    return classify(z, params, training, rng)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class DecoderParams:
    """Per-(slot, patch) decoder producing RGB logits (0-2) and a mask logit (3).

    With ``w_hidden`` absent the map is the purely linear
    ``(s_k + p_n) @ w_out + b_out``.  With a hidden layer the slot/position sum
    goes through one GELU layer first.
    """

    pos: Tensor            # N x D
    w_out: Tensor          # (D or hidden) x 4
    b_out: Tensor
    w_hidden: Tensor | None = None
    b_hidden: Tensor | None = None

    @classmethod
    def init(cls, num_tokens: int, dim: int, rng: Rng, hidden: int = 0) -> DecoderParams:
        pos = parameter(rng.normal((num_tokens, dim), 0.5))
        if hidden:
            return cls(pos=pos,
                       w_out=parameter(rng.normal((hidden, 4), 1.0 / math.sqrt(hidden))),
                       b_out=parameter(np.zeros(4)),
                       w_hidden=parameter(rng.normal((dim, hidden), 1.0 / math.sqrt(dim))),
                       b_hidden=parameter(np.zeros(hidden)))
        return cls(pos=pos, w_out=parameter(rng.normal((dim, 4), 1.0 / math.sqrt(dim))),
                   b_out=parameter(np.zeros(4)))

    def tensors(self) -> list[Tensor]:
        out = [self.pos, self.w_out, self.b_out]
        if self.w_hidden is not None:
            out += [self.w_hidden, self.b_hidden]
        return out


def decode_reconstruct(s: Tensor, params: DecoderParams):
    """Returns ``(x_hat (..., N, 3), pi (..., K, N))``."""
    # (s_k + p_n) W == s_k W + p_n W; broadcasting the two products avoids a K*N*D tensor
    first = params.w_hidden if params.w_hidden is not None else params.w_out
    pre = (s @ first).reshape(*s.shape[:-1], 1, first.shape[1]) + params.pos @ first
    if params.w_hidden is not None:
        out = gelu(pre + params.b_hidden) @ params.w_out + params.b_out
    else:
        out = pre + params.b_out
    rgb = sigmoid(out[..., :3])                       # (..., K, N, 3)
    pi = softmax(out[..., 3], axis=-2)                # (..., K, N)
    x_hat = (rgb * pi.reshape(*pi.shape, 1)).sum(axis=-3)
    return x_hat, pi


# ---------------------------------------------------------------------------
# losses


def loss_recon(x_hat: Tensor, target) -> Tensor:
    """Mean over patches (and batch) of the squared RGB distance."""
    diff = x_hat - Tensor(target)
    return (diff * diff).sum(axis=-1).mean()


def loss_cls(logits: Tensor, labels) -> Tensor:
    return bce_with_logits(logits, labels)


def loss_total(l_cls, l_recon, lam: float = 0.5):
    if lam < 0:
        raise ValueError("reconstruction weight must be non-negative")
    return l_cls + l_recon * lam


# ---------------------------------------------------------------------------
# whole model


@dataclass
class ModelConfig:
    variant: str = "full"
    num_slots: int = 8
    iterations: int = 3
    heads: int = 4
    dim: int = 64
    image_side: int = 64
    patch_size: int = 8
    num_classes: int = 4
    mlp_hidden: int = 64
    decoder_hidden: int = 32
    dropout: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")
        grid_side(self.image_side, self.patch_size)
        if self.num_slots < 1 or self.iterations < 1:
            raise ConfigError("num_slots and iterations must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    @property
    def num_tokens(self) -> int:
        return grid_side(self.image_side, self.patch_size) ** 2

    @property
    def uses_slots(self) -> bool:
        return self.variant not in ("no_slots", "patch_cross_attn")

    @property
    def effective_lambda(self) -> float:
        if self.variant == "lambda_zero" or not self.uses_slots:
            return 0.0
        return self.lam


@dataclass
class BilateralModel:
    config: ModelConfig
    encoder: EncoderParams
    slots: slot_mod.SlotParams | None
    cross: CrossAttnParams | None
    decoder: DecoderParams | None
    head: HeadParams

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> BilateralModel:
        rng = Rng(seed, stream_id=1)
        c = config
        encoder = EncoderParams.init(c.image_side, c.patch_size, c.dim, rng.child(0))
        slots = cross = decoder = None
        if c.uses_slots:
            slots = slot_mod.SlotParams.init(c.num_slots, c.dim, rng.child(1))
            decoder = DecoderParams.init(c.num_tokens, c.dim, rng.child(3), c.decoder_hidden)
        if c.variant not in ("no_slots", "no_bilateral"):
            cross = CrossAttnParams.init(c.dim, c.heads, rng.child(2))
        head = HeadParams.init(2 * c.dim, c.mlp_hidden, c.num_classes, rng.child(4), c.dropout)
        model = cls(c, encoder, slots, cross, decoder, head)
        if c.variant == "frozen_encoder":
            for t in (encoder.proj, encoder.pos_embed):
                t.requires_grad = False
                t.grad = None
        return model

    def encoder_tensors(self) -> list[Tensor]:
        return [t for t in self.encoder.tensors() if t.requires_grad]

    def module_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        if self.slots is not None:
            out += self.slots.tensors()
        if self.cross is not None:
            out += self.cross.tensors()
        if self.decoder is not None:
            out += self.decoder.tensors()
        return out + self.head.tensors()

    def tensors(self) -> list[Tensor]:
        return self.encoder_tensors() + self.module_tensors()

    def state_arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.encoder.tensors() + self.module_tensors()]

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        for t, a in zip(self.encoder.tensors() + self.module_tensors(), arrays):
            t.data = np.array(a, dtype=np.float64)


@dataclass
class PairOutput:
    logits: Tensor
    loss: Tensor
    l_cls: Tensor
    l_recon: Tensor | None
    pooled: np.ndarray                       # (..., 2D) classifier input
    states: tuple | None = None              # SlotState per eye
    corr: tuple | None = None                # CorrespondenceMatrix per eye (query side)
    recon: tuple | None = None               # x_hat per eye
    refined: tuple | None = None             # slot rows after exchange, per eye
    extras: dict = field(default_factory=dict)


def slot_noise(seed: int, indices, num_slots: int, dim: int, eye: int) -> np.ndarray:
    """Per-sample slot-init noise keyed by (seed, sample index, eye)."""
    return np.stack([Rng(seed, stream_id=7, _path=(int(i), eye)).normal((num_slots, dim))
                     for i in indices])


def forward_pair(model: BilateralModel, left, right, labels=None, *, training: bool = False,
                 rng: Rng | None = None, noise: tuple | None = None,
                 want_grounding: bool = False) -> PairOutput:
    """Full bilateral pipeline on a batch (or single pair) of images.

    ``left``/``right`` are ``(B, 3, S, S)`` or ``(3, S, S)`` arrays; ``noise``
    optionally supplies the slot-init draws for each eye.
    """
    c = model.config
    if want_grounding and not c.uses_slots:
        raise ConfigError(f"variant {c.variant!r} has no slots to ground")
    rng = rng if rng is not None else Rng(0, stream_id=9)
    tok_l = encode(left, model.encoder)
    tok_r = encode(right, model.encoder)
    out_extras: dict = {}

    if c.variant == "no_slots":
        logits = pool_and_classify(tok_l, tok_r, model.head, training, rng.child(2))
        states = corr = recon = refined = None
        l_recon = None
    elif c.variant == "patch_cross_attn":
        ref_l, corr_l, _ = cross_attend(tok_l, tok_r, model.cross)
        ref_r, corr_r, _ = cross_attend(tok_r, tok_l, model.cross)
        logits = pool_and_classify(ref_l, ref_r, model.head, training, rng.child(2))
        states = recon = None
        refined = (ref_l, ref_r)
        corr = (corr_l, corr_r)
        l_recon = None
    else:
        batch = tok_l.shape[0] if tok_l.ndim == 3 else None
        inits = [slot_mod.init_slots(model.slots, rng.child(10 + eye), batch,
                                     None if noise is None else noise[eye])
                 for eye in (0, 1)]
        st_l = slot_mod.run(tok_l, model.slots, c.iterations, rng, init=inits[0])
        st_r = slot_mod.run(tok_r, model.slots, c.iterations, rng, init=inits[1])
        states = (st_l, st_r)
        if model.cross is None:
            ref_l, ref_r = st_l.slots, st_r.slots
            corr = None
        else:
            ref_l, corr_l, a_l = cross_attend(st_l.slots, st_r.slots, model.cross)
            ref_r, corr_r, a_r = cross_attend(st_r.slots, st_l.slots, model.cross)
            corr = (corr_l, corr_r)
            out_extras["cross_attn"] = (a_l, a_r)
        refined = (ref_l, ref_r)
        logits = pool_and_classify(ref_l, ref_r, model.head, training, rng.child(2))
        xh_l, pi_l = decode_reconstruct(ref_l, model.decoder)
        xh_r, pi_r = decode_reconstruct(ref_r, model.decoder)
        recon = (xh_l, xh_r)
        out_extras["pi"] = (pi_l.data, pi_r.data)
        tgt_l = patch_targets(left, c.patch_size)
        tgt_r = patch_targets(right, c.patch_size)
        l_recon = (loss_recon(xh_l, tgt_l) + loss_recon(xh_r, tgt_r)) * 0.5

    pooled = np.concatenate([refined[0].data.mean(axis=-2), refined[1].data.mean(axis=-2)],
                            axis=-1) if refined is not None else np.concatenate(
        [tok_l.data.mean(axis=-2), tok_r.data.mean(axis=-2)], axis=-1)

    if labels is None:
        l_cls = Tensor(0.0)
    else:
        l_cls = loss_cls(logits, np.broadcast_to(labels, logits.shape))
    lam = c.effective_lambda
    loss = loss_total(l_cls, l_recon, lam) if l_recon is not None else l_cls
    return PairOutput(logits=logits, loss=loss, l_cls=l_cls, l_recon=l_recon, pooled=pooled,
                      states=states, corr=corr, recon=recon, refined=refined,
                      extras=out_extras)


def with_variant(config: ModelConfig, variant: str, **changes) -> ModelConfig:
    return replace(config, variant=variant, **changes)
