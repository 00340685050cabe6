"""Token-, beat- and rhythm-level objectives and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .data.tokenizer import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SPECIALS
from .tensor import Tensor, as_tensor, where

_NEG = -1e9


@dataclass
class LossBreakdown:
    l_lm: float
    l_local: float
    l_local_e2t: float
    l_local_t2e: float
    l_g: float
    l_g_e2t: float
    l_g_t2e: float
    total: float
    tau_learnable: float

    def as_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class AlignmentTrace:
    alpha: np.ndarray  # (n_sent, N_B) for the matched pair
    b_hat: np.ndarray  # (n_sent, D)
    z_matrix: np.ndarray | None = None  # (batch, batch)


# ---------------------------------------------------------------------------
# token level
# ---------------------------------------------------------------------------


def lm_loss(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Next-token NLL over non-PAD targets.

    ``mean`` averages over counted tokens; ``sum`` sums per report and averages
    over the batch.
    """
    targets = np.asarray(targets)
    mask = targets != PAD_ID
    if not mask.any():
        raise ValueError("lm_loss: every target position is PAD")
    if reduction == "mean":
        return F.cross_entropy(logits, targets, mask)
    return F.cross_entropy(logits, targets, mask, reduction="sum") * (1.0 / targets.shape[0])


def teacher_forcing(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split padded ``<bos> .. <eos>`` rows into decoder inputs and shifted targets."""
    if not np.all(ids[:, 0] == BOS_ID):
        raise ValueError("captioning prefixes must start with <bos>")
    return ids[:, :-1], ids[:, 1:]


def mask_tokens(ids: np.ndarray, rng: np.random.Generator, vocab_size: int,
                rate: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption of word tokens: of the selected 15%, 80% MASK, 10% random, 10% kept.

    Returns the corrupted ids and the boolean mask of selected positions.
    At least one word position is always selected.
    """
    words = ids >= len(SPECIALS)
    chosen = (rng.random(ids.shape) < rate) & words
    if not chosen.any():
        cand = np.argwhere(words)
        if len(cand) == 0:
            raise ValueError("no word tokens to mask")
        r, c = cand[rng.integers(len(cand))]
        chosen[r, c] = True
    u = rng.random(ids.shape)
    out = ids.copy()
    out[chosen & (u < 0.8)] = MASK_ID
    rand_pos = chosen & (u >= 0.8) & (u < 0.9)
    out[rand_pos] = rng.integers(len(SPECIALS), vocab_size, size=int(rand_pos.sum()))
    return out, chosen


def mlm_loss(logits: Tensor, original_ids: np.ndarray, masked: np.ndarray) -> Tensor:
    """Mean NLL of the original tokens at the masked positions only."""
    if not np.any(masked):
        raise ValueError("mlm_loss: no masked positions")
    return F.cross_entropy(logits, original_ids, masked)


# ---------------------------------------------------------------------------
# beat level
# ---------------------------------------------------------------------------


def beat_sentence_attention(B_proj: Tensor, S_proj: Tensor, tau1: float,
                            literal: bool = False) -> tuple[Tensor, Tensor]:
    """Sentence-to-beat attention weights and the attention-weighted beat per sentence.

    Shapes broadcast: ``B_proj (..., N_B, D)``, ``S_proj (..., n_sent, D)``;
    returns ``alpha (..., n_sent, N_B)`` and ``b_hat (..., n_sent, D)``.
    With ``literal`` the weights multiply the sentence embedding instead of
    the beats, which makes ``b_hat`` equal to ``S_proj``.
    """
    Bn = F.l2_normalize(B_proj)
    Sn = F.l2_normalize(S_proj)
    sim = Sn @ Bn.swapaxes(-1, -2)
    alpha = F.softmax(sim * (1.0 / tau1), axis=-1)
    if literal:
        b_hat = alpha.sum(axis=-1, keepdims=True) * S_proj
    else:
        b_hat = alpha @ B_proj
    return alpha, b_hat


def pair_similarity(b_hat: Tensor, S_proj: Tensor, tau2: float,
                    sent_mask: np.ndarray | None = None) -> Tensor:
    """``tau2 * logsumexp_l(cos(b_hat[l], S[l]) / tau2)`` over the (unmasked) sentences."""
    cos = F.cosine_similarity(b_hat, S_proj, axis=-1)
    logits = cos * (1.0 / tau2)
    if sent_mask is not None:
        logits = logits + np.where(sent_mask, 0.0, _NEG).astype(logits.dtype)
    return F.logsumexp(logits, axis=-1) * tau2


def _symmetric_ce(logits: Tensor) -> tuple[Tensor, Tensor]:
    n = logits.shape[0]
    target = np.arange(n)
    return F.cross_entropy(logits, target), F.cross_entropy(logits.T, target)


def local_contrastive(B_proj: Tensor, S_proj: Tensor, sent_mask: np.ndarray, tau1: float,
                      tau2: float, literal: bool = False) -> tuple[Tensor, Tensor, Tensor, AlignmentTrace]:
    """Beat-sentence contrastive loss over a batch.

    ``B_proj (B, N_B, D)``; ``S_proj (B, n_max, D)`` with ``sent_mask (B, n_max)``
    flagging real sentences (ragged reports).  Attention is recomputed for
    every (ECG i, report k) combination.  Returns (loss, e2t, t2e, trace).
    """
    b = B_proj.shape[0]
    if b < 2:
        raise ValueError("local contrastive loss needs a batch of at least 2")
    sent_mask = np.asarray(sent_mask, dtype=bool)
    # padded sentence rows are swapped for a constant so normalization stays defined
    S_safe = where(sent_mask[..., None], S_proj, 1.0)
    Bi = B_proj.reshape(b, 1, *B_proj.shape[1:])
    Sk = S_safe.reshape(1, *S_safe.shape)
    alpha, b_hat = beat_sentence_attention(Bi, Sk, tau1, literal)  # (B, B, n, N_B), (B, B, n, D)
    Z = pair_similarity(b_hat, Sk, tau2, sent_mask[None])  # (B, B)
    e2t, t2e = _symmetric_ce(Z * (1.0 / tau2))
    loss = (e2t + t2e) * 0.5
    diag = np.arange(b)
    trace = AlignmentTrace(alpha=alpha.data[diag, diag], b_hat=b_hat.data[diag, diag],
                           z_matrix=Z.data.copy())
    return loss, e2t, t2e, trace


# ---------------------------------------------------------------------------
# rhythm level
# ---------------------------------------------------------------------------


def global_contrastive(X_g: Tensor, T_g: Tensor, log_tau: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Symmetric InfoNCE over cosine similarities at temperature ``exp(log_tau)``."""
    if X_g.shape[0] < 2:
        raise ValueError("global contrastive loss needs a batch of at least 2")
    sims = F.l2_normalize(X_g) @ F.l2_normalize(T_g).T
    logits = sims * (-as_tensor(log_tau)).exp()
    e2t, t2e = _symmetric_ce(logits)
    return (e2t + t2e) * 0.5, e2t, t2e


def total_loss(l_g, l_lm, l_local, lambda_lm: float = 2.0, lambda_local: float = 0.2):
    """``l_g + lambda_lm * l_lm + lambda_local * l_local`` in that order."""
    return l_g + lambda_lm * l_lm + lambda_local * l_local


# ---------------------------------------------------------------------------
# full objective on a batch
# ---------------------------------------------------------------------------


def multiscale_loss(model, signals: np.ndarray, text) -> tuple[Tensor, LossBreakdown, AlignmentTrace | None]:
    """Forward a batch and combine the enabled objectives.

    Disabled objectives are skipped entirely and reported as 0.
    """
    cfg = model.cfg
    enabled = set(cfg.losses)
    zero = Tensor(np.zeros((), dtype=signals.dtype))
    e = model.forward_ecg(signals)
    t = model.forward_text(text, sentences="local" in enabled) if enabled & {"g", "local"} else None

    l_g = l_g_e2t = l_g_t2e = zero
    if "g" in enabled:
        l_g, l_g_e2t, l_g_t2e = global_contrastive(e["X_g"], t["T_g"], model.log_tau)

    l_lm = zero
    if "lm" in enabled:
        inp, tgt = teacher_forcing(text.ids)
        logits = model.caption_logits(e["E_tilde"], inp)
        l_lm = lm_loss(logits, tgt, cfg.lm_reduction)

    l_local = l_le2t = l_lt2e = zero
    trace = None
    if "local" in enabled:
        l_local, l_le2t, l_lt2e, trace = local_contrastive(
            e["B_proj"], t["S_proj"], text.sent_mask, cfg.tau1, cfg.tau2, cfg.eq2_literal)

    total = total_loss(l_g, l_lm, l_local, cfg.lambda_lm, cfg.lambda_local)
    br = LossBreakdown(
        l_lm=float(l_lm.data), l_local=float(l_local.data), l_local_e2t=float(l_le2t.data),
        l_local_t2e=float(l_lt2e.data), l_g=float(l_g.data), l_g_e2t=float(l_g_e2t.data),
        l_g_t2e=float(l_g_t2e.data), total=float(total.data), tau_learnable=model.tau,
    )
    return total, br, trace


