"""Training loop with the staged affine schedule, checkpointing and a JSONL log."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import COMPONENTS, LossConfig, loss_total
from .nn import PIXELS_PER_UNIT, SGD, Network, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite; the last good state was saved."""


class ResumeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 0.1
    momentum: float = 0.9
    decay: float = 0.96
    seed: int = 0
    checkpoint_interval: int = 0     # steps between intermediate checkpoints, 0 = epoch ends only
    init_gain: float = 1.0
    output_gain: float = 0.1
    lr_scale: float = 2.0            # > 0: per-layer step factor lr_scale / fan_in; 0 = off
    microbatch: int = 16             # tuples per forward/backward chunk; does not change results
    dtype: str = "float32"

    def to_dict(self):
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainState:
    net: Network
    opt: SGD
    epoch: int = 0          # epoch the next step belongs to
    step_in_epoch: int = 0  # steps already done in that epoch
    global_step: int = 0


@dataclass
class TrainResult:
    net: Network
    opt: SGD
    records: list
    checkpoint: Path | None = None


def steps_per_epoch(count: int, batch_size: int) -> int:
    return count // batch_size


def epoch_permutation(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x5EED, epoch]).permutation(count)


def train_step(net: Network, patches, translations, affine, loss_cfg: LossConfig, epoch: int,
               microbatch: int = 16):
    """Forward + backward over one batch; gradients end up in ``net.params()``.

    Translations are given in pixels; the loss is evaluated in the
    network's half-patch output units.  The batch is processed in chunks of
    whole tuples and the per-chunk gradients are summed in a fixed order.
    """
    n = len(patches)
    translations = np.asarray(translations, dtype=np.float64) / PIXELS_PER_UNIT
    params = net.params()
    grads = [np.zeros_like(p.data) for p in params]
    totals = {c: 0.0 for c in COMPONENTS}
    total = 0.0
    for s in range(0, n, microbatch):
        e = min(s + microbatch, n)
        m = e - s
        x = patches[s:e].reshape(m * 5, 1, *patches.shape[-2:])
        out = net.forward(x, train=True)[:, :, 0, 0].reshape(m, 5, 2)
        res = loss_total(out, translations[s:e], affine[s:e], loss_cfg, epoch)
        # chunk mean -> batch mean
        w = m / n
        total += res.total * w
        for c in COMPONENTS:
            totals[c] += res.components[c] * w
        net.backward((res.grad * w).reshape(m * 5, 2))
        for g, p in zip(grads, params):
            g += p.grad
    for g, p in zip(grads, params):
        p.grad = g
    return total, totals


def _finite(net: Network) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in net.params())


def _meta(config: TrainConfig, state: TrainState, count: int) -> dict:
    return {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "loss_variant": config.loss.variant,
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "global_step": state.global_step,
        "tuple_count": count,
    }


def save_state(path, config: TrainConfig, state: TrainState, count: int):
    save_checkpoint(path, state.net, state.opt, _meta(config, state, count))


def initial_state(config: TrainConfig) -> TrainState:
    net = Network.create(config.seed, dtype=np.dtype(config.dtype), gain=config.init_gain,
                         output_gain=config.output_gain)
    opt = SGD(base_lr=config.lr, momentum=config.momentum, decay=config.decay)
    if config.lr_scale > 0:
        opt.multipliers = net.lr_multipliers(config.lr_scale)
    return TrainState(net, opt)


def run(data, config: TrainConfig, state: TrainState | None = None, checkpoint=None,
        log_path=None, stop_after: int | None = None) -> TrainResult:
    """Train (or continue training) on ``data`` (anything with ``batch``/``__len__``).

    ``stop_after`` stops after that many global steps (used to produce
    resumable mid-run checkpoints).
    """
    count = len(data)
    if config.batch_size < 1 or config.batch_size > count:
        raise ValueError(f"batch size {config.batch_size} must be in [1, {count}]")
    state = state or initial_state(config)
    per_epoch = steps_per_epoch(count, config.batch_size)
    checkpoint = Path(checkpoint) if checkpoint else None
    records = []
    logf = open(log_path, "a") if log_path else None
    last_good = [p.data.copy() for p in state.net.params()]
    last_good_vel = None
    t0 = time.perf_counter()
    try:
        while state.epoch < config.epochs:
            perm = epoch_permutation(config.seed, state.epoch, count)
            while state.step_in_epoch < per_epoch:
                if stop_after is not None and state.global_step >= stop_after:
                    if checkpoint:
                        save_state(checkpoint, config, state, count)
                    return TrainResult(state.net, state.opt, records, checkpoint)
                s = state.step_in_epoch * config.batch_size
                patches, trans, aff = data.batch(perm[s:s + config.batch_size])
                # overflow is caught by the finiteness guard below
                with np.errstate(over="ignore", invalid="ignore"):
                    total, comps = train_step(state.net, patches, trans, aff, config.loss,
                                              state.epoch, config.microbatch)
                grads_ok = all(np.all(np.isfinite(p.grad)) for p in state.net.params())
                if not (np.isfinite(total) and grads_ok):
                    _abort(state, last_good, last_good_vel, checkpoint, config, count,
                           f"non-finite loss {total} at epoch {state.epoch} step "
                           f"{state.global_step}")
                with np.errstate(over="ignore", invalid="ignore"):
                    state.opt.step(state.net.params())
                if not _finite(state.net):
                    _abort(state, last_good, last_good_vel, checkpoint, config, count,
                           f"non-finite parameters after step {state.global_step}")
                rec = {"epoch": state.epoch, "step": state.global_step, "lr": state.opt.lr,
                       "loss": total, **comps, "wall": round(time.perf_counter() - t0, 3)}
                records.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                state.step_in_epoch += 1
                state.global_step += 1
                for buf, p in zip(last_good, state.net.params()):
                    buf[...] = p.data
                last_good_vel = [v.copy() for v in state.opt.velocity]
                if (checkpoint and config.checkpoint_interval
                        and state.global_step % config.checkpoint_interval == 0):
                    save_state(checkpoint, config, state, count)
            state.opt.decay_lr()
            state.epoch += 1
            state.step_in_epoch = 0
            log.info("epoch %d done, lr now %.6g", state.epoch, state.opt.lr)
            if checkpoint:
                save_state(checkpoint, config, state, count)
    finally:
        if logf:
            logf.close()
    if checkpoint:
        save_state(checkpoint, config, state, count)
    return TrainResult(state.net, state.opt, records, checkpoint)


def _abort(state, last_good, last_good_vel, checkpoint, config, count, message):
    for buf, p in zip(last_good, state.net.params()):
        p.data[...] = buf
    state.opt.velocity = last_good_vel
    if checkpoint:
        save_state(checkpoint, config, state, count)
        message += f"; last good state written to {checkpoint}"
    raise TrainingDiverged(message)


def train(data, config: TrainConfig, checkpoint=None, log_path=None) -> TrainResult:
    return run(data, config, None, checkpoint, log_path)


def resume(checkpoint, data, config: TrainConfig, out_checkpoint=None, log_path=None
           ) -> TrainResult:
    """Continue a run from ``checkpoint``; the result matches an uninterrupted run."""
    net, opt, meta = load_checkpoint(checkpoint)
    if opt is None or "config" not in meta:
        raise ResumeError(f"{checkpoint}: not a training checkpoint")
    saved = TrainConfig.from_dict(meta["config"])
    # epochs may be extended; everything else must match for step-identical continuation
    if replace(saved, epochs=config.epochs, checkpoint_interval=config.checkpoint_interval
               ) != config:
        diff = [k for k, v in config.to_dict().items() if saved.to_dict()[k] != v]
        raise ResumeError(f"{checkpoint}: config differs from the saved run in {diff}")
    if meta["tuple_count"] != len(data):
        raise ResumeError(f"{checkpoint}: saved run used {meta['tuple_count']} tuples, "
                          f"archive has {len(data)}")
    state = TrainState(net, opt, meta["epoch"], meta["step_in_epoch"], meta["global_step"])
    return run(data, config, state, out_checkpoint or checkpoint, log_path)


def read_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
