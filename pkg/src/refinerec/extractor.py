"""Self-attentive multi-interest extraction.

Attention logits are tanh(W1 H^T) projected to K heads; a row softmax over the
real history positions gives A, and V = A H aggregates the item embeddings into
K interest vectors. Padded positions carry attention weight exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import UsageError
from .numerics import Tensor

NEG_MASK = -1e9  # additive pre-softmax mask; exp() of it underflows to exactly 0


@dataclass
class ExtractorParams:
    """Item embedding table plus the two attention projections.

    Row 0 of the embedding table is the padding row; it starts at zero and never
    receives gradient, so it stays exactly zero through training.
    """

    embed: Tensor  # (n_items + 1, d)
    w1: Tensor     # (d_a, d)
    w2: Tensor     # (K, d_a)
    d: int
    d_a: int
    k: int

    @staticmethod
    def build(n_items: int, d: int, d_a: int, k: int, rng: np.random.Generator) -> "ExtractorParams":
        embed = nm.normal_init(rng, (n_items + 1, d))
        embed[0, :] = 0.0
        return ExtractorParams(
            embed=nm.param(embed),
            w1=nm.param(nm.uniform_init(rng, (d_a, d), fan_in=d)),
            w2=nm.param(nm.uniform_init(rng, (k, d_a), fan_in=d_a)),
            d=d, d_a=d_a, k=k,
        )

    def named(self):
        return [("extractor/embed", self.embed), ("extractor/w1", self.w1),
                ("extractor/w2", self.w2)]

    def trainable(self):
        return [t for _, t in self.named()]


@dataclass
class InterestOutput:
    attn: Tensor        # (K, T) attention weights, exactly 0 at padded positions
    interests: Tensor   # (K, d) interest vectors, A @ H over the real positions
    history: Tensor     # (n, d) embeddings of the real positions, in order
    real_positions: np.ndarray  # indices into the padded row where mask == 1
    length: int         # n, number of real positions


def extract(params: ExtractorParams, history_ids, mask) -> InterestOutput:
    """Interest vectors and attention weights for one padded history row.

    Only the real positions enter the computation, which makes the result
    independent of how much padding surrounds them; their softmax weights are
    scattered back into the padded layout with exact zeros elsewhere.
    """
    history_ids = np.asarray(history_ids, dtype=np.int64)
    mask = np.asarray(mask)
    real = np.nonzero(mask > 0)[0]
    if real.size == 0:
        raise UsageError("extract: history contains no real positions")
    T = history_ids.shape[0]

    H = nm.gather_rows(params.embed, history_ids[real])          # (n, d)
    logits = nm.matmul(params.w2, nm.tanh(nm.matmul(params.w1, nm.transpose(H))))  # (K, n)
    attn_real = nm.softmax_rows(logits)                           # (K, n)
    interests = nm.matmul(attn_real, H)                           # (K, d)
    attn = nm.scatter_cols(attn_real, real, T)                    # (K, T)
    return InterestOutput(attn=attn, interests=interests, history=H,
                          real_positions=real, length=int(real.size))


def extract_batch(params: ExtractorParams, histories, mask):
    """Batched extraction for training: (B,T) ids/mask -> (V3, A3, H3).

    Same math as `extract` but over the padded layout with an additive mask, so
    the whole batch goes through a handful of large tensor ops.
    """
    histories = np.asarray(histories, dtype=np.int64)
    mask_arr = np.asarray(mask, dtype=nm.default_dtype())
    B, T = histories.shape
    d, K = params.d, params.k

    flat = nm.gather_rows(params.embed, histories.reshape(-1))        # (B*T, d)
    hidden = nm.tanh(nm.matmul(flat, nm.transpose(params.w1)))        # (B*T, d_a)
    logits = nm.matmul(hidden, nm.transpose(params.w2))               # (B*T, K)
    logits = nm.transpose(nm.reshape(logits, (B, T, K)))              # (B, K, T)
    pad_mask = np.broadcast_to(((1.0 - mask_arr) * NEG_MASK)[:, None, :], (B, K, T))
    logits = nm.add(logits, nm.constant(np.ascontiguousarray(pad_mask)))
    A3 = nm.softmax_rows(logits)                                      # (B, K, T)
    H3 = nm.reshape(flat, (B, T, d))
    V3 = nm.bmm(A3, H3)                                               # (B, K, d)
    return V3, A3, H3


def select_interest(interest_rows: np.ndarray, target_vec: np.ndarray) -> int:
    """Index of the interest with the largest dot product against the target.

    Ties break toward the lowest index.
    """
    scores = np.asarray(interest_rows) @ np.asarray(target_vec).reshape(-1)
    return int(np.argmax(scores))
