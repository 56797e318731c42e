"""Interest refinement: noise schedule, forward corruption, pruned cross-attention
denoising, iterative reverse sampling, and coarse/fine fusion.

The schedule puts a linear ramp on the total corruption 1 - bar_alpha[t], scaled
by ``s``, so even the last step keeps most of the interest vector intact. The
denoiser estimates the clean vector directly (not the noise), conditioned on a
step embedding plus the most-attended history items.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError, UsageError
from .extractor import NEG_MASK
from .numerics import Tensor


@dataclass
class NoiseSchedule:
    """Per-step corruption levels. Arrays are float64, indexed 1..T; bar_alpha[0] = 1."""

    steps: int
    s: float
    alpha_min: float
    alpha_max: float
    bar_alpha: np.ndarray  # (T+1,)
    alpha: np.ndarray      # (T+1,), [0] unused
    beta: np.ndarray       # (T+1,), [0] unused


def build_schedule(steps: int, s: float, alpha_min: float, alpha_max: float) -> NoiseSchedule:
    if steps < 1:
        raise ConfigError(f"diffusion steps must be >= 1, got {steps}")
    if not (0.0 < alpha_min <= alpha_max):
        raise ConfigError(f"need 0 < alpha_min <= alpha_max, got {alpha_min} and {alpha_max}")
    if steps > 1 and alpha_min == alpha_max:
        raise ConfigError("alpha_min == alpha_max gives a flat (non-decreasing) schedule for T > 1")
    if s <= 0.0 or s * alpha_max >= 1.0:
        raise ConfigError(f"need 0 < s and s * alpha_max < 1, got s={s}, alpha_max={alpha_max}")

    if steps == 1:
        ramp = np.array([alpha_min], dtype=np.float64)
    else:
        ts = np.arange(1, steps + 1, dtype=np.float64)
        ramp = alpha_min + (ts - 1.0) / (steps - 1.0) * (alpha_max - alpha_min)
    bar = np.empty(steps + 1, dtype=np.float64)
    bar[0] = 1.0
    bar[1:] = 1.0 - s * ramp
    alpha = np.empty(steps + 1, dtype=np.float64)
    alpha[0] = np.nan
    alpha[1:] = bar[1:] / bar[:-1]
    beta = np.empty(steps + 1, dtype=np.float64)
    beta[0] = np.nan
    beta[1:] = 1.0 - alpha[1:]
    if np.any(np.diff(bar) >= 0.0) or np.any(alpha[1:] <= 0.0) or np.any(alpha[1:] >= 1.0):
        raise ConfigError("schedule is not strictly decreasing in bar_alpha with alpha in (0,1)")
    return NoiseSchedule(steps=steps, s=float(s), alpha_min=float(alpha_min),
                         alpha_max=float(alpha_max), bar_alpha=bar, alpha=alpha, beta=beta)


@dataclass
class RefinementConfig:
    """Fusion weight plus the variant switches.

    detach_v0=False is the no-detach variant: gradients flow freely through the
    forward corruption and the refined vector alone becomes the user vector.
    """

    eta: float = 0.4
    use_diffusion: bool = True
    use_transformer: bool = True
    use_pruning: bool = True
    detach_v0: bool = True
    detach_context: bool = True

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass
class DenoiserParams:
    """Step-embedding table plus one cross-attention transformer layer.

    When built with use_transformer=False the layer is replaced by a 3-layer
    perceptron over concat(noisy vector, step embedding, mean context).
    """

    kind: str              # "transformer" | "mlp"
    d: int
    heads: int
    d_ff: int
    gamma: float           # pruning ratio, fraction of real history kept as context
    step_embed: Tensor     # (T+1, d)
    weights: dict          # name -> Tensor, layout depends on kind

    @staticmethod
    def build(steps: int, d: int, heads: int, d_ff: int, gamma: float,
              rng: np.random.Generator, use_transformer: bool = True) -> "DenoiserParams":
        if not (0.0 < gamma < 1.0):
            raise ConfigError(f"pruning ratio gamma must lie in (0, 1), got {gamma}")
        step_embed = nm.param(nm.normal_init(rng, (steps + 1, d)))
        if use_transformer:
            if d % heads != 0:
                raise ConfigError(f"head count {heads} must divide dimension {d}")
            weights = {
                "wq": nm.param(nm.uniform_init(rng, (d, d), fan_in=d)),
                "wk": nm.param(nm.uniform_init(rng, (d, d), fan_in=d)),
                "wv": nm.param(nm.uniform_init(rng, (d, d), fan_in=d)),
                "wo": nm.param(nm.uniform_init(rng, (d, d), fan_in=d)),
                "ff1": nm.param(nm.uniform_init(rng, (d, d_ff), fan_in=d)),
                "ff1_b": nm.param(np.zeros(d_ff, dtype=nm.default_dtype())),
                "ff2": nm.param(nm.uniform_init(rng, (d_ff, d), fan_in=d_ff)),
                "ff2_b": nm.param(np.zeros(d, dtype=nm.default_dtype())),
                "ln1_g": nm.param(np.ones(d, dtype=nm.default_dtype())),
                "ln1_b": nm.param(np.zeros(d, dtype=nm.default_dtype())),
                "ln2_g": nm.param(np.ones(d, dtype=nm.default_dtype())),
                "ln2_b": nm.param(np.zeros(d, dtype=nm.default_dtype())),
            }
            kind = "transformer"
        else:
            weights = {
                "m1": nm.param(nm.uniform_init(rng, (3 * d, d_ff), fan_in=3 * d)),
                "m1_b": nm.param(np.zeros(d_ff, dtype=nm.default_dtype())),
                "m2": nm.param(nm.uniform_init(rng, (d_ff, d_ff), fan_in=d_ff)),
                "m2_b": nm.param(np.zeros(d_ff, dtype=nm.default_dtype())),
                "m3": nm.param(nm.uniform_init(rng, (d_ff, d), fan_in=d_ff)),
                "m3_b": nm.param(np.zeros(d, dtype=nm.default_dtype())),
            }
            kind = "mlp"
        return DenoiserParams(kind=kind, d=d, heads=heads, d_ff=d_ff, gamma=gamma,
                              step_embed=step_embed, weights=weights)

    def named(self):
        out = [("denoiser/step_embed", self.step_embed)]
        out.extend((f"denoiser/{k}", t) for k, t in sorted(self.weights.items()))
        return out

    def trainable(self):
        return [t for _, t in self.named()]


def _coef(sched: NoiseSchedule, t: int):
    if not (1 <= t <= sched.steps):
        raise UsageError(f"diffusion step {t} outside [1, {sched.steps}]")
    ab = sched.bar_alpha[t]
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def forward_diffuse(v0: Tensor, t: int, sched: NoiseSchedule, eps: np.ndarray,
                    detach: bool = True) -> Tensor:
    """v_t = sqrt(bar_alpha[t]) v0 + sqrt(1 - bar_alpha[t]) eps.

    With detach=True (the default) the corrupted vector carries no gradient back
    into whatever produced v0.
    """
    ca, cb = _coef(sched, t)
    base = v0.detach() if detach else v0
    eps = np.asarray(eps, dtype=base.values.dtype).reshape(base.values.shape)
    return nm.add(nm.scale(base, ca), nm.constant(eps * base.values.dtype.type(cb)))


def forward_diffuse_batch(v0: Tensor, t_ids: np.ndarray, sched: NoiseSchedule,
                          eps: np.ndarray, detach: bool = True) -> Tensor:
    t_ids = np.asarray(t_ids)
    if np.any(t_ids < 1) or np.any(t_ids > sched.steps):
        raise UsageError(f"diffusion steps outside [1, {sched.steps}]")
    dt = v0.values.dtype
    ab = sched.bar_alpha[t_ids]
    ca = np.sqrt(ab).astype(dt)[:, None]
    cb = np.sqrt(1.0 - ab).astype(dt)[:, None]
    base = v0.detach() if detach else v0
    ca_full = np.broadcast_to(ca, base.values.shape).copy()
    return nm.add(nm.mul(base, nm.constant(ca_full)),
                  nm.constant(np.asarray(eps, dtype=dt) * cb))


def prune_positions(attn_row: np.ndarray, n: int, gamma: float) -> np.ndarray:
    """Indices (ascending) of the max(1, floor(gamma*n)) largest attention weights.

    Ties break toward the earlier position; returned order preserves the
    original sequence order.
    """
    if not (0.0 < gamma < 1.0):
        raise UsageError(f"gamma must lie in (0, 1), got {gamma}")
    if n < 1:
        raise UsageError("need at least one real position")
    k = max(1, int(math.floor(gamma * n)))
    scores = np.asarray(attn_row, dtype=np.float64)[:n]
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order)


def prune_items(H: Tensor, attn_row: np.ndarray, n: int, gamma: float):
    """Context embeddings at the top attention positions; returns (C, positions)."""
    positions = prune_positions(attn_row, n, gamma)
    return nm.gather_rows(H, positions), positions


def _split_heads(x: Tensor, heads: int, dh: int):
    return [nm.slice_cols(x, h * dh, (h + 1) * dh) for h in range(heads)]


def denoise(dparams: DenoiserParams, v_t: Tensor, t: int, C: Tensor,
            return_attn: bool = False):
    """Estimate the clean vector from (v_t, t) conditioned on pruned context C.

    Cross-attention with query v_t over [e_t; C], then residual + layer norm,
    feed-forward, residual + layer norm. C arrives already detached (or not)
    per the caller's gradient policy.
    """
    if v_t.values.shape != (1, dparams.d):
        raise ShapeError(f"denoise: query must be (1, {dparams.d}), got {v_t.values.shape}")
    if C.values.ndim != 2 or C.values.shape[1] != dparams.d:
        raise ShapeError(f"denoise: context must be (k, {dparams.d}), got {C.values.shape}")
    e_t = nm.gather_rows(dparams.step_embed, [t])  # (1, d)

    if dparams.kind == "mlp":
        k = C.values.shape[0]
        mean_w = nm.constant(np.full((1, k), 1.0 / k, dtype=v_t.values.dtype))
        mean_c = nm.matmul(mean_w, C)
        x = nm.concat_cols(nm.concat_cols(v_t, e_t), mean_c)  # (1, 3d)
        w = dparams.weights
        h1 = nm.tanh(nm.bias_add(nm.matmul(x, w["m1"]), w["m1_b"]))
        h2 = nm.tanh(nm.bias_add(nm.matmul(h1, w["m2"]), w["m2_b"]))
        out = nm.bias_add(nm.matmul(h2, w["m3"]), w["m3_b"])
        return (out, None) if return_attn else out

    w = dparams.weights
    kv = nm.concat_rows(e_t, C)  # (k+1, d)
    q = nm.matmul(v_t, w["wq"])
    keys = nm.matmul(kv, w["wk"])
    vals = nm.matmul(kv, w["wv"])
    dh = dparams.d // dparams.heads
    heads_out, attn_list = [], []
    inv = 1.0 / math.sqrt(dh)
    for qh, kh, vh in zip(_split_heads(q, dparams.heads, dh),
                          _split_heads(keys, dparams.heads, dh),
                          _split_heads(vals, dparams.heads, dh)):
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), inv)  # (1, k+1)
        weights = nm.softmax_rows(scores)
        attn_list.append(weights.values.copy())
        heads_out.append(nm.matmul(weights, vh))
    merged = heads_out[0]
    for part in heads_out[1:]:
        merged = nm.concat_cols(merged, part)
    attn_out = nm.matmul(merged, w["wo"])
    h = nm.layer_norm(nm.add(v_t, attn_out), w["ln1_g"], w["ln1_b"])
    ff = nm.bias_add(nm.matmul(nm.tanh(nm.bias_add(nm.matmul(h, w["ff1"]), w["ff1_b"])), w["ff2"]), w["ff2_b"])
    out = nm.layer_norm(nm.add(h, ff), w["ln2_g"], w["ln2_b"])
    return (out, np.stack(attn_list)) if return_attn else out


def denoise_batch(dparams: DenoiserParams, v_t: Tensor, t_ids: np.ndarray,
                  context: Tensor, context_mask: np.ndarray) -> Tensor:
    """Batched denoiser: (B,d) queries over padded (B,kmax,d) contexts."""
    B, d = v_t.values.shape
    kmax = context.values.shape[1]
    dt = v_t.values.dtype
    e_rows = nm.reshape(nm.gather_rows(dparams.step_embed, t_ids), (B, 1, d))
    kv = nm.concat([e_rows, context], axis=-2)  # (B, kmax+1, d)

    if dparams.kind == "mlp":
        counts = context_mask.sum(axis=1, keepdims=True)
        mean_w = (context_mask / counts).astype(dt)[:, None, :]  # (B, 1, kmax)
        mean_c = nm.reshape(nm.bmm(nm.constant(np.ascontiguousarray(mean_w)), context), (B, d))
        x = nm.concat_cols(nm.concat_cols(v_t, nm.reshape(e_rows, (B, d))), mean_c)
        w = dparams.weights
        h1 = nm.tanh(nm.bias_add(nm.matmul(x, w["m1"]), w["m1_b"]))
        h2 = nm.tanh(nm.bias_add(nm.matmul(h1, w["m2"]), w["m2_b"]))
        return nm.bias_add(nm.matmul(h2, w["m3"]), w["m3_b"])

    w = dparams.weights
    S = kmax + 1
    kv_flat = nm.reshape(kv, (B * S, d))
    q = nm.matmul(v_t, w["wq"])                                  # (B, d)
    keys = nm.reshape(nm.matmul(kv_flat, w["wk"]), (B, S, d))
    vals = nm.reshape(nm.matmul(kv_flat, w["wv"]), (B, S, d))
    pad = np.concatenate([np.ones((B, 1)), context_mask], axis=1)  # e_t always real
    add_mask = ((1.0 - pad) * NEG_MASK).astype(dt)[:, None, :]     # (B, 1, S)
    dh = d // dparams.heads
    inv = 1.0 / math.sqrt(dh)
    heads_out = []
    for h_i in range(dparams.heads):
        qh = nm.reshape(nm.slice_cols(q, h_i * dh, (h_i + 1) * dh), (B, 1, dh))
        kh = nm.slice_cols(keys, h_i * dh, (h_i + 1) * dh)
        vh = nm.slice_cols(vals, h_i * dh, (h_i + 1) * dh)
        scores = nm.add(nm.scale(nm.bmm(qh, nm.transpose(kh)), inv),
                        nm.constant(np.ascontiguousarray(add_mask)))
        weights = nm.softmax_rows(scores)                          # (B, 1, S)
        heads_out.append(nm.bmm(weights, vh))                      # (B, 1, dh)
    merged = heads_out[0]
    for part in heads_out[1:]:
        merged = nm.concat_cols(merged, part)
    attn_out = nm.matmul(nm.reshape(merged, (B, d)), w["wo"])
    h = nm.layer_norm(nm.add(v_t, attn_out), w["ln1_g"], w["ln1_b"])
    ff = nm.bias_add(nm.matmul(nm.tanh(nm.bias_add(nm.matmul(h, w["ff1"]), w["ff1_b"])), w["ff2"]), w["ff2_b"])
    return nm.layer_norm(nm.add(h, ff), w["ln2_g"], w["ln2_b"])


def reverse_step(v_hat_t: np.ndarray, v0_tilde: np.ndarray, t: int,
                 sched: NoiseSchedule, eps: np.ndarray | None = None) -> np.ndarray:
    """Posterior-mean step from v_hat_t to v_hat_{t-1}; no noise on the final step."""
    if not (1 <= t <= sched.steps):
        raise UsageError(f"diffusion step {t} outside [1, {sched.steps}]")
    v_hat_t = np.asarray(v_hat_t)
    dt = v_hat_t.dtype
    ab_t = sched.bar_alpha[t]
    ab_prev = sched.bar_alpha[t - 1]
    alpha_t = sched.alpha[t]
    c1 = dt.type(math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t))
    c2 = dt.type(math.sqrt(ab_prev) * (1.0 - alpha_t) / (1.0 - ab_t))
    mu = c1 * v_hat_t + c2 * np.asarray(v0_tilde, dtype=dt)
    if t > 1 and eps is not None:
        sigma = dt.type(math.sqrt(sched.beta[t] * (1.0 - ab_prev) / (1.0 - ab_t)))
        mu = mu + sigma * np.asarray(eps, dtype=dt)
    return mu


def fuse(refined: Tensor, coarse: Tensor, eta: float) -> Tensor:
    """Z = eta * refined + (1 - eta) * coarse, with exact passthrough at the endpoints."""
    if eta == 0.0:
        return coarse
    if eta == 1.0:
        return refined
    return nm.add(nm.scale(refined, eta), nm.scale(coarse, 1.0 - eta))


def refine(v: Tensor, attn_row: np.ndarray, H: Tensor, n: int, sched: NoiseSchedule,
           dparams: DenoiserParams, cfg: RefinementConfig, rng, mode: str,
           denoise_fn=None):
    """One interest vector through the refinement pipeline; returns (estimate, Z).

    Train mode corrupts to a uniformly sampled step and denoises once; infer
    mode corrupts to step T and walks the full reverse chain. rng=None zeroes
    all sampling noise (deterministic inference).
    """
    if not cfg.use_diffusion:
        return None, v
    if mode not in ("train", "infer"):
        raise UsageError(f"unknown refine mode {mode!r}")
    d = v.values.shape[-1]

    if cfg.use_pruning:
        C, _ = prune_items(H, attn_row, n, dparams.gamma)
    else:
        C = nm.slice_rows(H, 0, n)
    if cfg.detach_context:
        C = C.detach()

    def run_denoiser(v_in: Tensor, t: int) -> Tensor:
        if denoise_fn is not None:
            return denoise_fn(v_in, t, C)
        return denoise(dparams, v_in, t, C)

    if mode == "train":
        t = int(rng.integers(1, sched.steps + 1)) if rng is not None else sched.steps
        eps = rng.standard_normal(d) if rng is not None else np.zeros(d)
        v_t = forward_diffuse(v, t, sched, eps, detach=cfg.detach_v0)
        estimate = run_denoiser(v_t, t)
        z = fuse(estimate, v, cfg.eta) if cfg.detach_v0 else estimate
        return estimate, z

    eps = rng.standard_normal(d) if rng is not None else np.zeros(d)
    v_hat = forward_diffuse(v, sched.steps, sched, eps, detach=True).values
    for t in range(sched.steps, 0, -1):
        estimate = run_denoiser(nm.constant(v_hat), t)
        eps_t = rng.standard_normal(d) if (rng is not None and t > 1) else None
        v_hat = reverse_step(v_hat, estimate.values, t, sched, eps_t)
    refined = nm.constant(v_hat)
    z = fuse(refined, v.detach(), cfg.eta) if cfg.detach_v0 else refined
    return refined, z
