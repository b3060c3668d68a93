"""Single-threaded deterministic training loop with Adam and checkpointing.

Batch composition is a pure function of (seed, step), so a run can be
interrupted, reloaded from a checkpoint, and continued to produce bitwise
the same parameters as an uninterrupted run. Evaluation losses are pure in
(params, batch) and safe to farm out to worker processes, but the update
loop itself stays single-threaded to keep that reproducibility.

Checkpoints are a small versioned binary container: a JSON header naming
every tensor followed by the raw little-endian blobs in header order.
(A zip-based container was rejected because archive metadata timestamps
would break byte-for-byte reproducibility of training artifacts.)
"""

from __future__ import annotations

import json
import logging
import math
import random
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, ModelParams, loss, loss_and_grads, make_batch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NGCKPT1\n"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; .step records the offending update."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr_scale: float = 1.0
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    log_every: int = 50
    eval_batches: int = 8

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ValueError("steps >= 0, batch_size >= 1, warmup_steps >= 1 required")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def learning_rate(tcfg: TrainConfig, d_model: int, step: int) -> float:
    """Inverse-sqrt schedule with linear warmup; step is 1-based."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return (
        tcfg.lr_scale
        * d_model ** -0.5
        * min(step ** -0.5, step * tcfg.warmup_steps ** -1.5)
    )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(a) for k, a in params.items()},
        v={k: np.zeros_like(a) for k, a in params.items()},
    )


def adam_update(
    params: ModelParams, grads: ModelParams, state: AdamState, lr: float, tcfg: TrainConfig
) -> None:
    """One in-place Adam step with bias correction."""
    state.t += 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)


def batch_indices(n_examples: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Example indices for 1-based step; pure in its arguments.

    Each epoch is an independent shuffle keyed by (seed, epoch), cut into
    consecutive batches; the last batch of an epoch may be short.
    """
    if n_examples < 1:
        raise ValueError("empty dataset")
    per_epoch = -(-n_examples // batch_size)
    epoch, k = divmod(step - 1, per_epoch)
    order = list(range(n_examples))
    random.Random(f"{seed}:{epoch}").shuffle(order)
    return order[k * batch_size : (k + 1) * batch_size]


def _mean_loss(params, cfg, examples, tcfg) -> float:
    total = 0.0
    count = 0
    for start in range(0, len(examples), tcfg.batch_size):
        chunk = examples[start : start + tcfg.batch_size]
        batch = make_batch(cfg, chunk)
        n = batch.n_target_tokens
        total += loss(params, cfg, batch) * n
        count += n
        if start // tcfg.batch_size + 1 >= tcfg.eval_batches:
            break
    return total / max(count, 1)


def train(
    params: ModelParams,
    cfg: ModelConfig,
    examples: Sequence[tuple[list, list]],
    tcfg: TrainConfig,
    *,
    opt_state: AdamState | None = None,
    start_step: int = 0,
    val_examples: Sequence[tuple[list, list]] | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[AdamState, list[dict]]:
    """Run steps start_step+1 .. tcfg.steps, mutating params in place.

    Returns the optimizer state and a history of per-step records. Aborts
    with TrainingDivergedError the moment the batch loss stops being finite.
    """
    if not examples:
        raise ValueError("empty dataset")
    state = opt_state if opt_state is not None else init_adam(params)
    history: list[dict] = []
    for step in range(start_step + 1, tcfg.steps + 1):
        idxs = batch_indices(len(examples), tcfg.batch_size, tcfg.seed, step)
        batch = make_batch(cfg, [examples[i] for i in idxs])
        rng = np.random.default_rng((tcfg.seed, step)) if cfg.dropout > 0 else None
        value, grads = loss_and_grads(params, cfg, batch, rng)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        lr = learning_rate(tcfg, cfg.d_model, step)
        adam_update(params, grads, state, lr, tcfg)
        record = {"step": step, "loss": value, "lr": lr}
        if tcfg.log_every and (step % tcfg.log_every == 0 or step == tcfg.steps):
            if val_examples:
                record["val_loss"] = _mean_loss(params, cfg, val_examples, tcfg)
                log.info(
                    "step %d loss %.4f val %.4f", step, value, record["val_loss"]
                )
            else:
                log.info("step %d loss %.4f", step, value)
        history.append(record)
        if on_step is not None:
            on_step(record)
        if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, cfg, params, step=step, opt=state)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, cfg, params, step=tcfg.steps, opt=state)
    return state, history


# --- checkpoint container -----------------------------------------------------------

def _array_entries(tensors: dict[str, np.ndarray]):
    return [
        {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
        for k, v in tensors.items()
    ]


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, step: int = 0,
                    opt: AdamState | None = None) -> None:
    tensors = {f"p:{k}": v for k, v in sorted(params.items())}
    if opt is not None:
        tensors.update({f"m:{k}": v for k, v in sorted(opt.m.items())})
        tensors.update({f"v:{k}": v for k, v in sorted(opt.v.items())})
    header = {
        "config": cfg.to_dict(),
        "step": int(step),
        "adam_t": int(opt.t) if opt is not None else None,
        "arrays": _array_entries(tensors),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, expect_cfg: ModelConfig | None = None):
    """Returns (cfg, params, step, opt_state_or_None)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        if expect_cfg is not None and cfg != expect_cfg:
            raise CheckpointError(f"{path}: checkpoint config does not match")
        tensors: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dt = np.dtype(entry["dtype"])
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(n * dt.itemsize)
            if len(raw) != n * dt.itemsize:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = (
                np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
            )
    params = {k[2:]: v for k, v in tensors.items() if k.startswith("p:")}
    opt = None
    if header.get("adam_t") is not None:
        opt = AdamState(
            m={k[2:]: v for k, v in tensors.items() if k.startswith("m:")},
            v={k[2:]: v for k, v in tensors.items() if k.startswith("v:")},
            t=int(header["adam_t"]),
        )
    return cfg, params, int(header["step"]), opt
