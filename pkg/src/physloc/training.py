"""Deterministic training loop: batching, Adam, cosine schedule.

Everything that moves is seeded: parameter init from the model seed, the
per-epoch shuffle from (seed xor epoch), and signature anchors come frozen
from the cache, so two runs with the same inputs produce byte-identical
checkpoints. Reference mode is single-threaded; numpy reductions are the
only vectorization.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio as dio
from . import model as md
from . import numerics as nx
from . import objectives as obj
from .errors import ConfigError, ContractError, DataError, NumericError, ValidationError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model-shape settings for one run.

    warmup_steps, weight_decay, and grad_clip default to off; they change
    behavior only when set.
    """

    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-5
    lr_min: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    loss: obj.LossConfig = field(default_factory=obj.LossConfig)
    embed_dim: int = 64
    hidden_dim: int = 0
    patch_grid: int = 8
    max_len: int = 300
    min_count: int = 1
    split_ratio: float = 0.9
    split_seed: int = 0
    warmup_steps: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValidationError(
                f"batch_size must be >= 2 for contrastive losses, got {self.batch_size}"
            )
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.lr_min <= self.lr):
            raise ValidationError(f"need 0 <= lr_min <= lr, got {self.lr_min}")
        if self.checkpoint_every < 0 or self.warmup_steps < 0:
            raise ValidationError("cadence and warmup must be >= 0")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValidationError("weight_decay and grad_clip must be >= 0")
        if not (0 < self.split_ratio < 1):
            raise ValidationError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_min": self.lr_min,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "loss": self.loss.to_dict(),
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "patch_grid": self.patch_grid,
            "max_len": self.max_len,
            "min_count": self.min_count,
            "split_ratio": self.split_ratio,
            "split_seed": self.split_seed,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = obj.LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class OptimizerState:
    """Adam moment accumulators, keyed like the parameter registry."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: md.ModelParams) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(t) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
    )


def adam_step(
    params: md.ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    grad_clip: float = 0.0,
) -> tuple[md.ModelParams, OptimizerState]:
    """Standard bias-corrected Adam update, in place."""
    for name in params.tensors:
        if name not in grads:
            raise ContractError(f"gradient missing for parameter {name!r}")
        g = grads[name]
        if g.shape != params.tensors[name].shape:
            raise ContractError(
                f"gradient for {name!r} has shape {g.shape}, "
                f"parameter is {params.tensors[name].shape}"
            )
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    if grad_clip > 0.0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > grad_clip:
            scale = grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, theta in params.tensors.items():
        g = grads[name]
        state.m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
        state.v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        update = m_hat / (np.sqrt(v_hat) + EPS)
        if weight_decay > 0.0:
            update = update + weight_decay * theta
        params.tensors[name] = theta - lr * update
    return params, state


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr0 at step 0 to lr_min at total_steps."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    offset = cfg.warmup_steps
    return cosine_lr(step - offset, max(total_steps - offset, 1), cfg.lr, cfg.lr_min)


def _split_signature(vec: np.ndarray, sig_cfg, sid: str) -> dict[str, np.ndarray]:
    """Slice a cached vector into per-branch anchors, each a unit-sum row.

    The color slice concatenates three per-channel histograms and so sums
    to 3; the loss expects probability rows, and cosine similarity is
    scale-invariant, so dividing by the row sum changes nothing but the
    validated invariant.
    """
    c = 3 * sig_cfg.color_bins
    s = c + sig_cfg.orient_bins
    out = {}
    for branch, sl in (("color", vec[:c]), ("struc", vec[c:s]), ("tex", vec[s:])):
        total = float(sl.sum())
        if total <= 0:
            raise DataError(f"signature for id {sid!r} has empty {branch} slice")
        out[branch] = sl / total
    return out


@dataclass
class TrainData:
    """Preprocessed training arrays in train-manifest order."""

    ids: list[str]
    patch_x: np.ndarray
    token_ids: np.ndarray
    valid_lens: np.ndarray
    anchors: dict[str, np.ndarray]
    vocab: dio.Vocabulary
    sig_cfg: object


def prepare_data(manifest_path, cache_path, cfg: TrainConfig) -> TrainData:
    """Load, split, tokenize, and align signatures for the train side.

    Samples carrying split labels keep them; otherwise the seeded hash
    split is applied. The vocabulary sees train texts only.
    """
    manifest_path = Path(manifest_path)
    samples = dio.load_manifest(manifest_path)
    if any(s.split is None for s in samples):
        samples = dio.split_dataset(samples, ratio=cfg.split_ratio, seed=cfg.split_seed)
    train = [s for s in samples if s.split == "train"]
    if len(train) < 2:
        raise ValidationError(
            f"train split has {len(train)} samples; need at least 2"
        )
    entries, sig_cfg = dio.read_signature_cache(cache_path)
    by_id = dict(entries)
    missing = [s.id for s in train if s.id not in by_id]
    if missing:
        raise DataError(f"signature cache has no entry for id {missing[0]!r}")

    vocab = dio.build_vocab([s.text for s in train], min_count=cfg.min_count)
    toks = [dio.tokenize(s.text, vocab, cfg.max_len) for s in train]
    imgs = [dio.load_image(dio.resolve_image_path(manifest_path, s)) for s in train]
    patch_x = np.stack([md.patch_means(im, cfg.patch_grid) for im in imgs])
    sigs = [_split_signature(by_id[s.id], sig_cfg, s.id) for s in train]
    anchors = {
        b: np.stack([sig[b] for sig in sigs]) for b in obj.BRANCHES
    }
    return TrainData(
        ids=[s.id for s in train],
        patch_x=patch_x,
        token_ids=np.stack([t.ids for t in toks]),
        valid_lens=np.array([t.length for t in toks]),
        anchors=anchors,
        vocab=vocab,
        sig_cfg=sig_cfg,
    )


def _epoch_batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.size < 2:
            break
        yield idx


@dataclass
class TrainResult:
    params: md.ModelParams
    metrics: list[dict]
    checkpoint_path: Path
    checkpoint_hash: int
    vocab: dio.Vocabulary


def train(manifest_path, cache_path, cfg: TrainConfig, out_dir) -> TrainResult:
    """Full run: returns final parameters and writes checkpoint + metrics.

    The logged lr is the one applied to the epoch's first step. With the
    physical weight at zero the per-branch components are still computed
    and logged, but no gradient from them reaches the parameters.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(manifest_path, cache_path, cfg)
    n = len(data.ids)

    model_cfg = md.ModelConfig.for_signatures(
        data.sig_cfg,
        embed_dim=cfg.embed_dim,
        vocab_size=data.vocab.size,
        max_len=cfg.max_len,
        patch_grid=cfg.patch_grid,
        hidden_dim=cfg.hidden_dim,
        seed=cfg.seed,
    )
    params = md.init_params(model_cfg)
    state = init_optimizer(params)

    steps_per_epoch = sum(1 for _ in _epoch_batches(n, cfg.batch_size, np.arange(n)))
    if steps_per_epoch == 0:
        raise ValidationError("no usable batches; corpus too small for batch_size")
    total_steps = steps_per_epoch * cfg.epochs

    metrics: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.Generator(np.random.PCG64(cfg.seed ^ epoch))
        perm = rng.permutation(n)
        sums = {"total": 0.0, "itc": 0.0, "color": 0.0, "struc": 0.0, "tex": 0.0}
        batches = 0
        epoch_lr = None
        for idx in _epoch_batches(n, cfg.batch_size, perm):
            lr = _lr_at(step, total_steps, cfg)
            if epoch_lr is None:
                epoch_lr = lr
            try:
                with nx.GradientTape() as tape:
                    p = md.wrap_params(tape, params)
                    out = md.forward_batch(
                        p, data.patch_x[idx], data.token_ids[idx], data.valid_lens[idx]
                    )
                    feat = obj.BatchFeatures(
                        v=out.v_rows,
                        t=out.t_rows,
                        descriptors=out.descriptors,
                        anchors={b: data.anchors[b][idx] for b in obj.BRANCHES},
                    )
                    bundle = obj.compute_losses(
                        feat, p["log_temp"], p["log_temp_phy"], cfg.loss
                    )
                grads = nx.backward(tape, bundle.total)
            except NumericError as e:
                ids = [data.ids[i] for i in idx]
                raise NumericError(
                    f"non-finite value at epoch {epoch + 1} step {step}; batch {ids}"
                ) from e
            adam_step(params, grads, state, lr,
                      weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
            sums["total"] += float(bundle.total.data)
            sums["itc"] += float(bundle.itc.data)
            for b in obj.BRANCHES:
                sums[b] += float(bundle.branches[b].data)
            batches += 1
            step += 1
        metrics.append(
            {
                "epoch": epoch + 1,
                "lr": epoch_lr,
                "loss_total": sums["total"] / batches,
                "loss_itc": sums["itc"] / batches,
                "loss_color": sums["color"] / batches,
                "loss_struc": sums["struc"] / batches,
                "loss_tex": sums["tex"] / batches,
            }
        )
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            md.save_checkpoint(
                params, out_dir / f"checkpoint-epoch{epoch + 1:03d}.ckpt",
                vocab=data.vocab.to_dict(),
                extra={"train_config": cfg.to_dict(), "epoch": epoch + 1},
            )

    ckpt_path = out_dir / "checkpoint.ckpt"
    digest = md.save_checkpoint(
        params, ckpt_path,
        vocab=data.vocab.to_dict(),
        extra={"train_config": cfg.to_dict(), "epoch": cfg.epochs},
    )
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text(
        "".join(json.dumps(rec) + "\n" for rec in metrics), encoding="utf-8"
    )
    return TrainResult(
        params=params,
        metrics=metrics,
        checkpoint_path=ckpt_path,
        checkpoint_hash=digest,
        vocab=data.vocab,
    )
