"""Joint training of the extractor and the denoiser, plus checkpointing.

One step: extract interests for a sampled batch, activate the interest closest
to each target, corrupt and denoise it, fuse, then take one Adam step on the
sampled-softmax recommendation loss plus the weighted reconstruction loss. The
reconstruction target is always the detached coarse vector, so that loss can
never reshape the extractor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .config import RunConfig, config_from_flat
from .data import Dataset, next_train_batch
from .diffusion import (DenoiserParams, NoiseSchedule, RefinementConfig, build_schedule,
                        denoise_batch, forward_diffuse_batch, fuse, prune_positions)
from .errors import ConfigError, DataError, NumericError, UsageError
from .extractor import NEG_MASK, ExtractorParams, extract_batch
from .numerics import AdamState, RngHub, Tape, Tensor, adam_step, backward
from .retrieval import evaluate_split

FORMAT_VERSION = 1


@dataclass
class Model:
    extractor: ExtractorParams
    denoiser: DenoiserParams | None
    schedule: NoiseSchedule
    refine_cfg: RefinementConfig

    def named_params(self):
        out = list(self.extractor.named())
        if self.denoiser is not None:
            out.extend(self.denoiser.named())
        return out

    def trainable(self):
        return [t for _, t in self.named_params()]

    @staticmethod
    def build(n_items: int, rc: RunConfig, hub: RngHub) -> "Model":
        extractor = ExtractorParams.build(n_items, rc.d, rc.d_a, rc.k,
                                          hub.stream("init/extractor"))
        denoiser = None
        if rc.use_diffusion:
            denoiser = DenoiserParams.build(rc.steps, rc.d, rc.heads, rc.ff_mult * rc.d,
                                            rc.gamma, hub.stream("init/denoiser"),
                                            use_transformer=rc.use_transformer)
        schedule = build_schedule(rc.steps, rc.scale, rc.alpha_min, rc.alpha_max)
        cfg = RefinementConfig(eta=rc.eta, use_diffusion=rc.use_diffusion,
                               use_transformer=rc.use_transformer,
                               use_pruning=rc.use_pruning, detach_v0=rc.detach_v0,
                               detach_context=rc.detach_context)
        return Model(extractor=extractor, denoiser=denoiser, schedule=schedule,
                     refine_cfg=cfg)


def rec_loss(z: Tensor, targets: np.ndarray, negatives: np.ndarray,
             embed: Tensor) -> Tensor:
    """Sampled-softmax loss: -log softmax over [target logit; shared negative
    logits], negatives colliding with a row's own target masked out, batch mean."""
    targets = np.asarray(targets, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    n_rows = embed.values.shape[0]
    for name, ids in (("target", targets), ("negative", negatives)):
        if np.any(ids < 1) or np.any(ids >= n_rows):
            raise UsageError(f"rec_loss: {name} id outside [1, {n_rows - 1}]")
    B = z.values.shape[0]
    tgt = nm.gather_rows(embed, targets)                      # (B, d)
    pos = nm.row_sum(nm.mul(z, tgt))                          # (B, 1)
    neg = nm.gather_rows(embed, negatives)                    # (n_neg, d)
    neg_logits = nm.matmul(z, nm.transpose(neg))              # (B, n_neg)
    collide = negatives[None, :] == targets[:, None]
    if np.any(collide):
        mask = np.where(collide, NEG_MASK, 0.0).astype(z.values.dtype)
        neg_logits = nm.add(neg_logits, nm.constant(mask))
    logits = nm.concat_cols(pos, neg_logits)                  # (B, 1 + n_neg)
    per_row = nm.sub(nm.row_logsumexp(logits), pos)
    return nm.scale(nm.sum_all(per_row), 1.0 / B)


def recon_loss(v_estimate: Tensor, v_reference: Tensor) -> Tensor:
    """Euclidean distance between the estimate and the (detached) clean vector."""
    diff = nm.sub(v_estimate, v_reference.detach())
    return nm.sqrt(nm.sum_all(nm.mul(diff, diff)))


def _batch_context(model: Model, batch, attn_sel: np.ndarray, rc: RunConfig):
    """Pruned (or full) per-row context item ids, padded to the batch max width."""
    B, T = batch.histories.shape
    rows = []
    for b in range(B):
        n_b = int(batch.lengths[b])
        off = T - n_b  # histories are right-aligned
        if rc.use_pruning:
            pos = prune_positions(attn_sel[b, off:], n_b, model.denoiser.gamma)
        else:
            pos = np.arange(n_b)
        rows.append(batch.histories[b, off + pos])
    kmax = max(len(r) for r in rows)
    ctx_ids = np.zeros((B, kmax), dtype=np.int64)
    ctx_mask = np.zeros((B, kmax))
    for b, r in enumerate(rows):
        ctx_ids[b, :len(r)] = r
        ctx_mask[b, :len(r)] = 1.0
    return ctx_ids, ctx_mask


def train_step(model: Model, batch, rc: RunConfig, rng, adam: AdamState):
    """One optimization step; returns (L, L_S, L_dm) as floats."""
    ex = model.extractor
    B = batch.histories.shape[0]
    K, d = rc.k, rc.d
    with Tape() as tape:
        V3, A3, H3 = extract_batch(ex, batch.histories, batch.mask)

        tgt_vecs = ex.embed.values[batch.targets]                     # (B, d)
        scores = np.einsum("bkd,bd->bk", V3.values, tgt_vecs)
        sel = np.argmax(scores, axis=1)                               # (B,)
        flat = np.arange(B, dtype=np.int64) * K + sel
        v_sel = nm.gather_rows(nm.reshape(V3, (B * K, d)), flat)      # (B, d)

        if rc.use_diffusion:
            attn_sel = A3.values[np.arange(B), sel, :]                # (B, T)
            ctx_ids, ctx_mask = _batch_context(model, batch, attn_sel, rc)
            if rc.detach_context:
                context = nm.constant(ex.embed.values[ctx_ids])
            else:
                context = nm.reshape(nm.gather_rows(ex.embed, ctx_ids.reshape(-1)),
                                     (B, ctx_ids.shape[1], d))
            t_ids = rng.integers(1, rc.steps + 1, size=B)
            eps = rng.standard_normal((B, d))
            v_t = forward_diffuse_batch(v_sel, t_ids, model.schedule, eps,
                                        detach=rc.detach_v0)
            estimate = denoise_batch(model.denoiser, v_t, t_ids, context, ctx_mask)
            diff = nm.sub(estimate, v_sel.detach())
            l_dm = nm.scale(nm.sum_all(nm.sqrt(nm.row_sum(nm.mul(diff, diff)))), 1.0 / B)
            z = fuse(estimate, v_sel, rc.eta) if rc.detach_v0 else estimate
        else:
            l_dm = None
            z = v_sel

        l_s = rec_loss(z, batch.targets, batch.negatives, ex.embed)
        loss = l_s if l_dm is None else nm.add(l_s, nm.scale(l_dm, rc.loss_weight))

    total = float(loss.values.reshape(()))
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss on batch {batch.digest()}")
    backward(loss, tape)
    adam_step(model.trainable(), adam)
    l_dm_val = float(l_dm.values.reshape(())) if l_dm is not None else 0.0
    return total, float(l_s.values.reshape(())), l_dm_val


@dataclass
class Checkpoint:
    """Header metadata plus named float32 arrays, in manifest order."""

    meta: dict
    arrays: dict  # name -> np.ndarray

    @property
    def iteration(self) -> int:
        return self.meta["iteration"]

    def config(self) -> RunConfig:
        return config_from_flat(self.meta["config"])


def _flat_config(rc: RunConfig) -> dict:
    flat = rc.to_flat()
    flat["run.output_dir"] = None  # paths are run plumbing, not model state
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in flat.items()}


def make_checkpoint(model: Model, rc: RunConfig, ds: Dataset, iteration: int,
                    adam: AdamState | None = None, rng=None, best: dict | None = None,
                    best_metric=None, best_iteration=None, bad_rounds: int = 0) -> Checkpoint:
    meta = {
        "config": _flat_config(rc),
        "iteration": int(iteration),
        "n_items": ds.n_items,
        "n_users": ds.n_users,
        "user_digest": ds.digest()[:16],
        "item_digest": ds.digest()[16:32],
        "dataset_digest": ds.digest(),
        "adam_t": int(adam.t) if adam is not None else 0,
        "rng": nm.generator_state(rng) if rng is not None else None,
        "best_metric": best_metric,
        "best_iteration": best_iteration,
        "bad_rounds": int(bad_rounds),
    }
    arrays = {name: t.values for name, t in model.named_params()}
    if adam is not None:
        names = [name for name, _ in model.named_params()]
        for name, m in zip(names, adam.m):
            arrays[f"adam_m/{name}"] = m
        for name, v in zip(names, adam.v):
            arrays[f"adam_v/{name}"] = v
    if best is not None:
        for name, arr in best.items():
            arrays[f"best/{name}"] = arr
    return Checkpoint(meta=meta, arrays=arrays)


def save_checkpoint(ck: Checkpoint, path: str) -> None:
    chunks, manifest, offset = [], [], 0
    for name, arr in ck.arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": ck.meta,
        "manifest": manifest,
        "payload_bytes": len(payload),
        "digest": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path!r}: {exc}") from exc
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: checkpoint version {header.get('format_version')!r} "
                        f"unsupported (expected {FORMAT_VERSION})")
    if len(payload) != header["payload_bytes"]:
        raise DataError(f"{path}: truncated payload "
                        f"({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["digest"]:
        raise DataError(f"{path}: payload digest mismatch")
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(meta=header["meta"], arrays=arrays)


def model_from_checkpoint(ck: Checkpoint):
    """Rebuild a live Model (plus optional Adam/RNG state) from a checkpoint."""
    rc = ck.config()
    get = ck.arrays.__getitem__
    extractor = ExtractorParams(
        embed=nm.param(get("extractor/embed")),
        w1=nm.param(get("extractor/w1")),
        w2=nm.param(get("extractor/w2")),
        d=rc.d, d_a=rc.d_a, k=rc.k,
    )
    denoiser = None
    if rc.use_diffusion:
        kind = "transformer" if rc.use_transformer else "mlp"
        weight_names = [name.split("/", 1)[1] for name in ck.arrays
                        if name.startswith("denoiser/") and name != "denoiser/step_embed"]
        weights = {w: nm.param(get(f"denoiser/{w}")) for w in sorted(weight_names)}
        denoiser = DenoiserParams(kind=kind, d=rc.d, heads=rc.heads, d_ff=rc.ff_mult * rc.d,
                                  gamma=rc.gamma, step_embed=nm.param(get("denoiser/step_embed")),
                                  weights=weights)
    schedule = build_schedule(rc.steps, rc.scale, rc.alpha_min, rc.alpha_max)
    cfg = RefinementConfig(eta=rc.eta, use_diffusion=rc.use_diffusion,
                           use_transformer=rc.use_transformer, use_pruning=rc.use_pruning,
                           detach_v0=rc.detach_v0, detach_context=rc.detach_context)
    model = Model(extractor=extractor, denoiser=denoiser, schedule=schedule,
                  refine_cfg=cfg)

    adam = None
    if any(name.startswith("adam_m/") for name in ck.arrays):
        adam = AdamState(model.trainable(), lr=rc.lr)
        adam.t = ck.meta.get("adam_t", 0)
        names = [name for name, _ in model.named_params()]
        adam.m = [ck.arrays[f"adam_m/{n}"].astype(nm.default_dtype()) for n in names]
        adam.v = [ck.arrays[f"adam_v/{n}"].astype(nm.default_dtype()) for n in names]
    rng = nm.generator_from_state(ck.meta["rng"]) if ck.meta.get("rng") else None
    return model, rc, adam, rng


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    log: list = field(default_factory=list)


# run-control keys may change between a checkpoint and a resuming run
_RESUME_IGNORED_KEYS = {"train.max_iterations", "train.patience", "run.output_dir"}


def _resume_compatible(flat_a: dict, flat_b: dict) -> bool:
    keys = set(flat_a) | set(flat_b)
    return all(flat_a.get(k) == flat_b.get(k)
               for k in keys if k not in _RESUME_IGNORED_KEYS)


def fit(ds: Dataset, rc: RunConfig, resume_from: Checkpoint | None = None,
        progress=None) -> FitResult:
    """Train until patience runs out or the iteration cap; returns best and last.

    Validation Recall@50 is measured every eval_every iterations (with
    deterministic per-user inference noise), and the best parameters are kept.
    """
    if not ds.users_in("train"):
        raise ConfigError("dataset has no train split (run split_users first)")
    hub = RngHub(rc.seed)
    if resume_from is not None:
        model, ck_rc, adam, rng = model_from_checkpoint(resume_from)
        if not _resume_compatible(ck_rc.to_flat(), rc.to_flat()):
            raise ConfigError("resume checkpoint was produced under a different config")
        if resume_from.meta["dataset_digest"] != ds.digest():
            raise DataError("resume checkpoint does not match this dataset")
        if adam is None or rng is None:
            raise DataError("checkpoint lacks optimizer/rng state, cannot resume")
        iteration = resume_from.iteration
        best_metric = resume_from.meta.get("best_metric")
        best_iteration = resume_from.meta.get("best_iteration")
        bad_rounds = resume_from.meta.get("bad_rounds", 0)
        best = ({name[len("best/"):]: arr for name, arr in resume_from.arrays.items()
                 if name.startswith("best/")} or None)
    else:
        model = Model.build(ds.n_items, rc, hub)
        adam = AdamState(model.trainable(), lr=rc.lr)
        rng = hub.stream("train")
        iteration = 0
        best_metric, best_iteration, bad_rounds, best = None, None, 0, None

    log = []
    while iteration < rc.max_iterations:
        batch = next_train_batch(ds, rc.batch_size, rc.n_neg, rng, rc.target_policy)
        try:
            total, l_s, l_dm = train_step(model, batch, rc, rng, adam)
        except NumericError as exc:
            raise NumericError(f"iteration {iteration + 1}: {exc}") from exc
        iteration += 1
        if iteration % rc.eval_every == 0:
            report = evaluate_split(model, ds, "valid", 50, rc)
            entry = {"iteration": iteration, "loss": total, "rec_loss": l_s,
                     "recon_loss": l_dm, "valid_recall50": report.recall}
            log.append(entry)
            if progress is not None:
                progress(entry)
            if best_metric is None or report.recall > best_metric:
                best_metric = report.recall
                best_iteration = iteration
                bad_rounds = 0
                best = {name: t.values.copy() for name, t in model.named_params()}
            else:
                bad_rounds += 1
                if bad_rounds >= rc.patience:
                    break

    if best is None:  # no evaluation round ever ran
        best = {name: t.values.copy() for name, t in model.named_params()}
        best_iteration = iteration

    last = make_checkpoint(model, rc, ds, iteration, adam=adam, rng=rng, best=best,
                           best_metric=best_metric, best_iteration=best_iteration,
                           bad_rounds=bad_rounds)
    best_model_arrays = dict(best)
    best_ck = Checkpoint(
        meta={**last.meta, "iteration": int(best_iteration or iteration), "rng": None,
              "adam_t": 0, "bad_rounds": bad_rounds},
        arrays=best_model_arrays,
    )
    return FitResult(best=best_ck, last=last, log=log)
