"""Training loop: a streaming replay buffer of generated samples feeding Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from poseact.datagen import GROUP_NAMES, SampleContext, generate_sample, sample_rng
from poseact.network import AdamState, TrainConfig, init_params, save_checkpoint, train_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreamConfig:
    buffer_size: int = 2048
    refresh_per_step: int = 6
    groups: tuple[str, ...] = GROUP_NAMES


class SampleStream:
    """Replay buffer over an endless sample stream.

    Sample ``i`` always comes from ``rng(seed, i)``, so the stream content is
    a pure function of the seed. Stacks are kept as float16 to bound memory.
    """

    def __init__(self, ctx: SampleContext, seed: int, cfg: StreamConfig = StreamConfig()):
        self.ctx = ctx
        self.seed = seed
        self.cfg = cfg
        n = ctx.patch_side
        self.stacks = np.empty((cfg.buffer_size, n, n, 8), dtype=np.float16)
        self.labels = np.empty(cfg.buffer_size, dtype=np.int64)
        self.produced = 0
        self.rng = np.random.default_rng([seed, 0x5A])
        for slot in range(cfg.buffer_size):
            self._fill(slot)

    def _fill(self, slot: int) -> None:
        i = self.produced
        group = self.cfg.groups[i % len(self.cfg.groups)]
        s = generate_sample(self.ctx, group, sample_rng(self.seed, i))
        self.stacks[slot] = s.stack
        self.labels[slot] = s.label
        self.produced += 1

    def refresh(self) -> None:
        for _ in range(self.cfg.refresh_per_step):
            self._fill(self.produced % self.cfg.buffer_size)

    def batch(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rng.integers(0, self.cfg.buffer_size, size)
        return self.stacks[idx].astype(np.float32), self.labels[idx]


def train_policy(ctx: SampleContext, steps: int, seed: int = 0,
                 cfg: TrainConfig = TrainConfig(), stream_cfg: StreamConfig = StreamConfig(),
                 checkpoint=None, log_every: int = 100, params: dict | None = None):
    """Train from scratch (or from ``params``); returns (params, loss history)."""
    t0 = time.perf_counter()
    stream = SampleStream(ctx, seed, stream_cfg)
    log.info("filled replay buffer with %d samples in %.1fs", stream_cfg.buffer_size,
             time.perf_counter() - t0)
    if params is None:
        params = init_params(np.random.default_rng([seed, 0x1A]))
    state = AdamState(params)
    history = []
    running = None
    for step in range(steps):
        params, loss = train_step(params, stream.batch(cfg.batch_size), cfg, step, state)
        stream.refresh()
        history.append(loss)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (avg %.4f) lr %.2e  %.1fs", step + 1, loss, running,
                     cfg.lr_at(step), time.perf_counter() - t0)
    if checkpoint is not None:
        save_checkpoint(checkpoint, params, {"steps": steps, "seed": seed,
                                             "batch_size": cfg.batch_size,
                                             "final_loss": history[-1] if history else None,
                                             "seconds": round(time.perf_counter() - t0, 1)})
    return params, history
