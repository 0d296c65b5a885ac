"""Next-sample cross-entropy training with Adam and a step learning-rate schedule."""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import audio
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DataError, UsageError
from .model import ModelConfig, ModelParams, forward, init_params
from .numerics import ops
from .numerics.tensor import Tape

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class LrSchedule:
    lr_initial: float = 1e-4
    lr_final: float = 0.5e-5
    switch_step: int = 250_000

    def __post_init__(self):
        if not self.lr_initial > self.lr_final > 0:
            raise ValueError("need lr_initial > lr_final > 0")
        if self.switch_step < 0:
            raise ValueError("switch_step must be >= 0")


def lr_at(step: int, schedule: LrSchedule) -> float:
    return schedule.lr_initial if step < schedule.switch_step else schedule.lr_final


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        st = cls(**kw)
        for name, t in params.items():
            st.m[name] = np.zeros(t.shape, dtype=t.dtype)
            st.v[name] = np.zeros(t.shape, dtype=t.dtype)
        return st


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    missing = [k for k in params.names() if grads.get(k) is None]
    if missing:
        raise UsageError(f"missing gradients for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))


@dataclass
class TrainMetrics:
    step: int
    loss_nats: float
    lr: float
    wallclock_s: float = 0.0
    val_bits: Optional[float] = None

    @property
    def loss_bits(self) -> float:
        return self.loss_nats / LN2


def batch_gradients(contexts: np.ndarray, targets: np.ndarray, params: ModelParams,
                    rng: Optional[np.random.Generator], n_shards: int = 1,
                    training: bool = True) -> tuple[float, dict]:
    """Mean cross-entropy (nats) over the batch and its gradient per parameter.

    The batch is split into ``n_shards`` contiguous pieces, each with its own
    tape (and worker thread when ``n_shards > 1``); piece gradients are summed
    in shard order.
    """
    contexts = np.asarray(contexts)
    targets = np.asarray(targets, dtype=np.int64)
    if contexts.ndim != 2 or len(contexts) == 0:
        raise DataError("batch must be a non-empty (B, C) array of contexts")
    if len(targets) != len(contexts):
        raise DataError("one target per context required")
    n_shards = max(1, min(n_shards, len(contexts)))
    bounds = np.linspace(0, len(contexts), n_shards + 1).astype(int)
    if n_shards == 1:
        rngs = [rng]
    else:
        rngs = rng.spawn(n_shards) if rng is not None else [None] * n_shards
    weight = 1.0 / len(contexts)
    plist = list(params)

    def shard(i):
        lo, hi = bounds[i], bounds[i + 1]
        with Tape() as tape:
            logits = forward(contexts[lo:hi], params, training=training, rng=rngs[i])
            total = ops.softmax_xent(logits, targets[lo:hi], reduction="sum")
            loss = ops.scale(total, weight)
        return float(total.data) * weight, tape.gradients(loss, plist)

    if n_shards == 1:
        results = [shard(0)]
    else:
        with ThreadPoolExecutor(max_workers=n_shards) as pool:
            results = list(pool.map(shard, range(n_shards)))

    loss = 0.0
    grads = {name: None for name in params.names()}
    for shard_loss, shard_grads in results:
        loss += shard_loss
        for name, g in zip(params.names(), shard_grads):
            if g is None:
                continue
            grads[name] = g.copy() if grads[name] is None else grads[name] + g
    for name, t in params.items():
        if grads[name] is None:
            grads[name] = np.zeros(t.shape, dtype=t.dtype)
    return loss, grads


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(factor)
    return norm


def train_step(contexts, targets, params: ModelParams, state: AdamState,
               rng: Optional[np.random.Generator], schedule: LrSchedule,
               n_shards: int = 1, grad_clip: Optional[float] = None) -> TrainMetrics:
    """Forward + backward on one batch and an Adam update at ``lr_at(state.step)``.

    Any failure before the update leaves parameters and optimizer untouched.
    """
    t0 = time.perf_counter()
    step = state.step
    loss, grads = batch_gradients(contexts, targets, params, rng, n_shards)
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        raise FloatingPointError(f"non-finite loss or gradient at step {step}")
    if grad_clip:
        clip_by_global_norm(grads, grad_clip)
    lr = lr_at(step, schedule)
    adam_step(params, grads, state, lr)
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise FloatingPointError(f"parameter {name} became non-finite at step {step}")
    return TrainMetrics(step=step, loss_nats=loss, lr=lr, wallclock_s=time.perf_counter() - t0)


def evaluate_nll(params: ModelParams, clips: Sequence[audio.QuantizedClip], positions: Iterable,
                 context_len: int, batch_size: int = 64, return_nats: bool = False):
    """Mean ``-log2 p(target | context)`` over ``(clip id, target index)`` positions.

    Dropout is off.  With ``return_nats`` the result is ``(bits, nats)``.
    """
    positions = list(positions)
    if not positions:
        raise UsageError("evaluate_nll needs at least one position")
    total = 0.0
    for lo in range(0, len(positions), batch_size):
        ctx, tgt = audio.gather_windows(clips, positions[lo:lo + batch_size], context_len)
        logits = forward(ctx, params, training=False)
        per_item = ops.softmax_xent(logits, tgt, reduction="none").data
        total += float(per_item.sum(dtype=np.float64))
    nats = total / len(positions)
    bits = nats / LN2
    return (bits, nats) if return_nats else bits


def evaluate_batch(contexts, targets, params: ModelParams) -> float:
    """Mean NLL in bits of ready-made windows, dropout off."""
    logits = forward(np.asarray(contexts), params, training=False)
    nats = float(ops.softmax_xent(logits, np.asarray(targets, dtype=np.int64), reduction="none")
                 .data.sum(dtype=np.float64)) / len(targets)
    return nats / LN2


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Produce ``items`` from a background thread through a bounded queue, order preserved."""
    if depth <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    failure = []

    def fill():
        try:
            for it in items:
                q.put(it)
        except BaseException as exc:  # surfaced in the consumer
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=fill, daemon=True).start()
    while True:
        it = q.get()
        if it is done:
            break
        yield it
    if failure:
        raise failure[0]


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass
class TrainSettings:
    context_len: int = 128_000
    batch_size: int = 40
    max_steps: int = 1000
    positions_per_epoch: int = 0  # 0: every eligible position
    eval_every: int = 0
    eval_positions: int = 256
    checkpoint_every: int = 0
    seed: int = 0
    n_shards: int = 1
    grad_clip: float = 0.0
    prefetch: int = 0
    early_stop: bool = True
    plateau_patience: int = 3
    plateau_delta: float = 1e-3
    schedule: LrSchedule = field(default_factory=LrSchedule)


# streams derived from the root seed
INIT_STREAM, DATA_STREAM, DROPOUT_STREAM, EVAL_STREAM, SAMPLER_STREAM = range(5)


class Trainer:
    """Owns parameters, optimizer state and the deterministic batch stream.

    Batches and dropout masks are pure functions of ``(seed, step)``, so a
    run resumed from a checkpoint replays exactly what an uninterrupted run
    would have seen.
    """

    def __init__(self, config: ModelConfig, settings: TrainSettings,
                 train_clips: Sequence[audio.QuantizedClip],
                 valid_clips: Optional[Sequence[audio.QuantizedClip]] = None,
                 out_dir=None, params: Optional[ModelParams] = None):
        self.config = config
        self.settings = settings
        self.train_clips = list(train_clips)
        self.valid_clips = list(valid_clips) if valid_clips else []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.params = params or init_params(config, np.random.default_rng(derive_seed(settings.seed, INIT_STREAM)))
        self.state = AdamState.for_params(self.params)
        self.best_val = float("inf")
        self.evals_without_improvement = 0
        self.history: list[TrainMetrics] = []

        eligible = int(audio.eligible_positions(self.train_clips, settings.context_len).sum())
        if eligible == 0:
            raise DataError("no training position has a full context window")
        self.epoch_size = settings.positions_per_epoch or eligible
        if self.epoch_size > eligible:
            raise DataError(f"positions_per_epoch {self.epoch_size} exceeds {eligible} eligible positions")
        self.steps_per_epoch = max(1, self.epoch_size // settings.batch_size)
        self._plan_cache: dict[int, audio.EpochPlan] = {}
        self._valid_positions = None

    @property
    def step(self) -> int:
        return self.state.step

    def epoch_plan(self, epoch: int) -> audio.EpochPlan:
        if epoch not in self._plan_cache:
            self._plan_cache = {epoch: audio.plan_epoch(
                self.train_clips, self.epoch_size, self.settings.context_len,
                derive_seed(self.settings.seed, DATA_STREAM, epoch))}
        return self._plan_cache[epoch]

    def batch_pairs(self, step: int) -> list:
        epoch, k = divmod(step, self.steps_per_epoch)
        pairs = self.epoch_plan(epoch).pairs
        b = self.settings.batch_size
        chunk = pairs[k * b:(k + 1) * b]
        return chunk if chunk else pairs[:b]

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        return audio.gather_windows(self.train_clips, self.batch_pairs(step), self.settings.context_len)

    def dropout_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.settings.seed, DROPOUT_STREAM, step))

    def valid_positions(self) -> list:
        if self._valid_positions is None:
            clips = self.valid_clips or self.train_clips
            total = int(audio.eligible_positions(clips, self.settings.context_len).sum())
            n = min(self.settings.eval_positions, total)
            plan = audio.plan_epoch(clips, n, self.settings.context_len,
                                    derive_seed(self.settings.seed, EVAL_STREAM))
            self._valid_positions = plan.pairs
        return self._valid_positions

    def evaluate(self) -> float:
        clips = self.valid_clips or self.train_clips
        return evaluate_nll(self.params, clips, self.valid_positions(), self.settings.context_len)

    def _batches(self, start: int, stop: int):
        for s in range(start, stop):
            yield s, self.batch(s)

    def fit(self, steps: Optional[int] = None) -> list[TrainMetrics]:
        """Train until ``max_steps`` (or ``steps`` more steps) or a validation plateau."""
        st = self.settings
        stop = st.max_steps if steps is None else self.step + steps
        run_start = time.perf_counter()
        for s, (ctx, tgt) in prefetch(self._batches(self.step, stop), st.prefetch):
            m = train_step(ctx, tgt, self.params, self.state, self.dropout_rng(s), st.schedule,
                           n_shards=st.n_shards, grad_clip=st.grad_clip or None)
            m.wallclock_s = time.perf_counter() - run_start
            self.history.append(m)
            self._log(m.step, "train", m.loss_nats, m.lr, m.wallclock_s)
            done = self.step
            if st.eval_every and done % st.eval_every == 0:
                val = self.evaluate()
                m.val_bits = val
                self._log(m.step, "valid", val * LN2, m.lr, time.perf_counter() - run_start)
                if val < self.best_val - st.plateau_delta:
                    self.best_val = val
                    self.evals_without_improvement = 0
                    if self.out_dir is not None:
                        self.save(self.out_dir / "best.ckpt")
                else:
                    self.best_val = min(self.best_val, val)
                    self.evals_without_improvement += 1
            if st.checkpoint_every and done % st.checkpoint_every == 0 and self.out_dir is not None:
                self.save(self.out_dir / "latest.ckpt")
            if st.early_stop and self.evals_without_improvement >= st.plateau_patience:
                log.info("validation plateau after step %d", done)
                break
        if self.out_dir is not None:
            self.save(self.out_dir / "latest.ckpt")
        return self.history

    def _log(self, step: int, split: str, nats: float, lr: float, wall: float) -> None:
        line = f"{step}\t{split}\t{nats:.6f}\t{nats / LN2:.6f}\t{lr:.3e}\t{wall:.3f}"
        log.debug(line)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.tsv", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.arrays().items()},
            adam_m={k: v.copy() for k, v in self.state.m.items()},
            adam_v={k: v.copy() for k, v in self.state.v.items()},
            adam_step=self.state.step,
            step=self.state.step,
            best_val_bits=self.best_val,
            rng_states={"seed": self.settings.seed, "data_stream": DATA_STREAM,
                        "dropout_stream": DROPOUT_STREAM},
            extra={"evals_without_improvement": self.evals_without_improvement},
        )

    def save(self, path) -> None:
        save_checkpoint(path, self.to_checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config != self.config:
            raise UsageError("checkpoint configuration differs from the trainer's")
        self.params = ModelParams.from_arrays(self.config, ckpt.params)
        self.state = AdamState.for_params(self.params)
        if ckpt.adam_m:
            self.state.m = {k: np.array(v) for k, v in ckpt.adam_m.items()}
            self.state.v = {k: np.array(v) for k, v in ckpt.adam_v.items()}
        self.state.step = ckpt.adam_step
        self.best_val = ckpt.best_val_bits
        self.evals_without_improvement = int(ckpt.extra.get("evals_without_improvement", 0))

    def resume(self, path) -> None:
        self.restore(load_checkpoint(path))
