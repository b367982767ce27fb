"""Adam training loop: warmup + linear decay, length filter, checkpoints.

Checkpoints are a custom binary container (header JSON + raw array bytes +
sha256 trailer) rather than npz: zip archives embed timestamps, which would
break byte-identical reruns.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention_lm import ModelConfig, ModelParams, batch_loss_graph, wrap_params
from .errors import CheckpointError, DataError, NumericError, ValidationError
from .linearizer import LinearizedFact

log = logging.getLogger(__name__)

CKPT_MAGIC = b"KGLMCKP1"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 5e-4
    warmup_frac: float = 0.06
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    dropout: float = 0.1
    seed: int = 0
    max_len: int = 30
    mask_mode: str = "strict_prefix"
    checkpoint_every: int = 500
    clip_norm: float = 1.0
    data_mix: tuple[int, int] = (0, 0)  # (triples, xlinks), recorded by train()

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValidationError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["data_mix"] = list(self.data_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["data_mix"] = tuple(d.get("data_mix", (0, 0)))
        return cls(**d)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear 0 -> base_lr over the warmup steps, then linear base_lr -> 0."""
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, math.ceil(warmup_frac * total_steps))
    if step <= warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


class AdamState:
    def __init__(self, arrays: dict[str, np.ndarray], beta1: float, beta2: float, eps: float):
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(
    params: ModelParams | dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[ModelParams | dict[str, np.ndarray], AdamState]:
    """Standard Adam with bias correction, no weight decay. Updates in place."""
    arrays = params.arrays if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r} at adam step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        arrays[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: dict | None
    step: int
    rng_state: dict | None
    tokenizer_sha256: str
    version: int = CKPT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    names = ckpt.params.names
    arrays = [ckpt.params.arrays[n] for n in names]
    header = {
        "format_version": ckpt.version,
        "model_config": ckpt.params.cfg.to_dict(),
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "tokenizer_sha256": ckpt.tokenizer_sha256,
        "arrays": [
            {"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
            for n, a in zip(names, arrays)
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for a in arrays:
        blob += np.ascontiguousarray(a).tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path, expected_tokenizer_sha256: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 8 + 32 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = len(CKPT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len
    if header["format_version"] != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header['format_version']}")
    if expected_tokenizer_sha256 is not None and header["tokenizer_sha256"] != expected_tokenizer_sha256:
        raise CheckpointError(
            f"{path}: checkpoint was built with a different tokenizer "
            f"({header['tokenizer_sha256'][:12]} != {expected_tokenizer_sha256[:12]})"
        )
    cfg = ModelConfig.from_dict(header["model_config"])
    arrays: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        n_bytes = dt.itemsize * int(np.prod(meta["shape"])) if meta["shape"] else dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=max(1, int(np.prod(meta["shape"]))), offset=off)
        arrays[meta["name"]] = arr.reshape(meta["shape"]).copy()
        off += n_bytes
    return Checkpoint(
        params=ModelParams(cfg, arrays),
        train_config=header["train_config"],
        step=header["step"],
        rng_state=header["rng_state"],
        tokenizer_sha256=header["tokenizer_sha256"],
    )


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    checkpoint_paths: list[Path]
    dropped_fraction: float
    final: Checkpoint


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    facts: Sequence[LinearizedFact],
    pad_id: int,
    tokenizer_sha256: str = "",
    out_dir: str | Path | None = None,
    init_params: ModelParams | None = None,
) -> TrainResult:
    """Train on a single mixed stream of linearized triples and xlinks."""
    kept = [f for f in facts if len(f) < cfg.max_len]
    dropped_fraction = 1.0 - (len(kept) / len(facts)) if facts else 1.0
    if dropped_fraction > 0:
        log.info("length filter dropped %.3f%% of facts", 100 * dropped_fraction)
    if not kept:
        raise DataError(f"no facts remain after the length-{cfg.max_len} filter")

    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "dropout": cfg.dropout, "mask_mode": cfg.mask_mode})
    params = init_params.copy() if init_params is not None else ModelParams.init(model_cfg, seed=cfg.seed)
    state = AdamState(params.arrays, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)

    n_mono = sum(1 for f in kept if f.kind == "mono")
    cfg.data_mix = (n_mono, len(kept) - n_mono)

    steps_per_epoch = math.ceil(len(kept) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_f = open(out_dir / "train_log.jsonl", "w", encoding="utf-8") if out_dir is not None else None

    losses: list[float] = []
    ckpt_paths: list[Path] = []
    step = 0

    def emit_checkpoint(tag: str) -> None:
        if out_dir is None:
            return
        ck = Checkpoint(
            params=params,
            train_config=cfg.to_dict(),
            step=step,
            rng_state=rng.bit_generator.state,
            tokenizer_sha256=tokenizer_sha256,
        )
        p = out_dir / f"ckpt_{tag}.bin"
        save_checkpoint(ck, p)
        ckpt_paths.append(p)

    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(kept))
            for start in range(0, len(kept), cfg.batch_size):
                batch = [kept[i] for i in order[start : start + cfg.batch_size]]
                step += 1
                lr = lr_at(step, total_steps, cfg.base_lr, cfg.warmup_frac)
                pt = wrap_params(params, requires_grad=True)
                loss = batch_loss_graph(pt, model_cfg, batch, pad_id, train_mode=True, rng=rng)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite training loss at step {step}")
                loss.backward()
                grads = {k: t.grad for k, t in pt.items()}
                clip_gradients(grads, cfg.clip_norm)
                adam_step(params, grads, state, lr)
                losses.append(float(loss.data))
                if log_f is not None:
                    log_f.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.data)}) + "\n")
                if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
                    emit_checkpoint(f"{step:07d}")
        emit_checkpoint("final")
    finally:
        if log_f is not None:
            log_f.close()

    final = Checkpoint(
        params=params,
        train_config=cfg.to_dict(),
        step=step,
        rng_state=rng.bit_generator.state,
        tokenizer_sha256=tokenizer_sha256,
    )
    return TrainResult(
        params=params,
        losses=losses,
        checkpoint_paths=ckpt_paths,
        dropped_fraction=dropped_fraction,
        final=final,
    )
