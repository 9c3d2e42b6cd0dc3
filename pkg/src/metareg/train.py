"""Training orchestration: pooled pretraining over source tasks, the
task-level meta stage, fine-tuning to a target task, and single-pair
inference.

Determinism: every stage derives its random stream from (config seed,
stage tag); per-task inner streams in the meta stage are derived from
(seed, tag, iteration, slot), so parallel and sequential execution of a
meta-batch produce identical results.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import fileio
from .data import DomainSpec, make_pair
from .errors import ConfigError
from .kernels import warp_bilinear
from .loss import LossConfig, total_loss
from .model import forward, backward
from .optim import adam_init, adam_step, reptile_outer

TAG_PRETRAIN = 101
TAG_META = 102
TAG_META_INNER = 103
TAG_FINETUNE = 104


@dataclass(frozen=True)
class TrainConfig:
    inner_lr: float = 1e-4
    meta_lr: float = 1e-4
    meta_batch: int = 3        # tasks per meta-batch
    inner_steps: int = 10      # updates per task inside the meta stage
    pretrain_steps: int = 2000
    meta_iterations: int = 1000
    finetune_epochs: int = 10
    seed: int = 0
    loss: LossConfig = dc_field(default_factory=LossConfig)
    fresh_pair_per_update: bool = True  # False reuses one pair for all inner updates
    outer_adam: bool = False   # route the outer pseudo-gradient through Adam
    pretrain_early_stop: bool = True

    def __post_init__(self):
        if self.meta_batch < 1 or self.inner_steps < 1:
            raise ConfigError("meta_batch and inner_steps must be >= 1")


@dataclass
class TaskSpec:
    """A sampleable registration task: either a synthetic domain or a
    directory written by `gentasks`. Pair i is deterministic given
    (seed, i), so the whole sample stream is reproducible."""
    task_id: str
    domain: DomainSpec = None
    directory: str = None
    seed: int = 0
    n_pairs: int = 60
    n_landmarks: int = 25
    indices: tuple = None  # optional remap onto a subset of the pair list
    _cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if (self.domain is None) == (self.directory is None):
            raise ConfigError(f"task {self.task_id!r}: exactly one of domain/directory")
        if self.directory is not None and self.indices is None:
            self.n_pairs = fileio.count_pairs(self.directory)
        if self.n_pairs < 1:
            raise ConfigError(f"task {self.task_id!r} has no pairs")

    @property
    def n(self):
        return self.n_pairs if self.indices is None else len(self.indices)

    def pair(self, i):
        if not 0 <= i < self.n:
            raise ConfigError(f"pair index {i} out of range for task {self.task_id!r}")
        raw = i if self.indices is None else int(self.indices[i])
        if raw not in self._cache:
            if self.domain is not None:
                pair_seed = int(np.random.SeedSequence([self.seed, raw]).generate_state(1)[0])
                self._cache[raw] = make_pair(self.domain, pair_seed, self.n_landmarks)
            else:
                self._cache[raw] = fileio.read_pair(self.directory, raw)
        return self._cache[raw]

    def subset(self, indices, suffix):
        base = self.indices if self.indices is not None else tuple(range(self.n_pairs))
        picked = tuple(int(base[i]) for i in indices)
        sub = replace(self, task_id=f"{self.task_id}{suffix}", indices=picked,
                      _cache=self._cache)
        return sub


def train_step(params, adam, sample, loss_cfg):
    """One unsupervised update on a single pair; returns (params', adam', loss)."""
    field, cache = forward(params, sample.moving, sample.fixed)
    loss_val, g_field = total_loss(sample.fixed, sample.moving, field, loss_cfg)
    grad = backward(cache, g_field)
    new_params, new_adam = adam_step(adam, params, grad)
    return new_params, new_adam, loss_val


def pretrain(tasks, cfg, params0, steps, log_rows=None):
    """Pooled unsupervised training: every step draws a task uniformly,
    then a pair from it. With pretrain_early_stop, stops once the 100-step
    running-mean loss improves by less than 0.1% over the previous
    window (checked every 100 steps, capped at the step budget)."""
    if not tasks:
        raise ConfigError("pretrain needs at least one task")
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    rng = np.random.default_rng([cfg.seed, TAG_PRETRAIN])
    params = params0
    adam = adam_init(params0, lr=cfg.inner_lr)
    losses = []
    for step in range(steps):
        task = tasks[int(rng.integers(len(tasks)))]
        sample = task.pair(int(rng.integers(task.n)))
        params, adam, loss_val = train_step(params, adam, sample, cfg.loss)
        losses.append(loss_val)
        if log_rows is not None:
            log_rows.append((step, "pretrain", task.task_id, loss_val))
        if cfg.pretrain_early_stop and (step + 1) % 100 == 0 and step + 1 >= 200:
            cur = float(np.mean(losses[-100:]))
            prev = float(np.mean(losses[-200:-100]))
            if (prev - cur) < 1e-3 * abs(prev):
                break
    return params


def _adapt_one(meta_params, task, cfg, iteration, slot):
    """k inner Adam updates from a fresh state on pairs from one task."""
    rng = np.random.default_rng([cfg.seed, TAG_META_INNER, iteration, slot])
    params = meta_params
    adam = adam_init(meta_params, lr=cfg.inner_lr)
    sample = task.pair(int(rng.integers(task.n)))
    losses = []
    for k in range(cfg.inner_steps):
        if cfg.fresh_pair_per_update and k > 0:
            sample = task.pair(int(rng.integers(task.n)))
        params, adam, loss_val = train_step(params, adam, sample, cfg.loss)
        losses.append(loss_val)
    return params, float(np.mean(losses))


def meta_train(params_pt, tasks, cfg, iterations=None, log_rows=None, workers=1):
    """Task-level training: per iteration, sample meta_batch tasks with
    replacement, adapt a copy of the meta parameters to each, then move
    the meta parameters toward the adapted average (or feed the average
    pseudo-gradient to an outer Adam when cfg.outer_adam is set)."""
    if not tasks:
        raise ConfigError("meta_train needs at least one task")
    if iterations is None:
        iterations = cfg.meta_iterations
    rng = np.random.default_rng([cfg.seed, TAG_META])
    meta = params_pt
    outer = adam_init(params_pt, lr=cfg.meta_lr) if cfg.outer_adam else None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for it in range(iterations):
            idxs = [int(rng.integers(len(tasks))) for _ in range(cfg.meta_batch)]
            jobs = [(meta, tasks[ti], cfg, it, slot) for slot, ti in enumerate(idxs)]
            if pool is None:
                results = [_adapt_one(*j) for j in jobs]
            else:
                results = list(pool.map(lambda j: _adapt_one(*j), jobs))
            adapted = [r[0] for r in results]
            mean_loss = float(np.mean([r[1] for r in results]))
            if outer is None:
                meta = reptile_outer(meta, adapted, cfg.meta_lr)
            else:
                mean_adapted = adapted[0]
                for p in adapted[1:]:
                    mean_adapted = mean_adapted.add(p)
                mean_adapted = mean_adapted.scale(1.0 / len(adapted))
                pseudo_grad = meta.sub(mean_adapted)
                meta, outer = adam_step(outer, meta, pseudo_grad)
            if log_rows is not None:
                task_ids = "|".join(tasks[ti].task_id for ti in idxs)
                log_rows.append((it, "meta", task_ids, mean_loss))
    finally:
        if pool is not None:
            pool.shutdown()
    return meta


def fine_tune(params, task, epochs, cfg, on_epoch=None, log_rows=None):
    """Adapt to one task: per epoch, one Adam step per pair in a seeded
    shuffled order. Returns (adapted params, per-epoch mean loss list);
    the input vector is never mutated."""
    if task.n < 1:
        raise ConfigError("fine_tune needs a non-empty task")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    rng = np.random.default_rng([cfg.seed, TAG_FINETUNE])
    cur = params.copy()
    adam = adam_init(cur, lr=cfg.inner_lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(task.n)
        ep_losses = []
        for i in order:
            cur, adam, loss_val = train_step(cur, adam, task.pair(int(i)), cfg.loss)
            ep_losses.append(loss_val)
        mean_loss = float(np.mean(ep_losses))
        history.append(mean_loss)
        if log_rows is not None:
            log_rows.append((epoch, "finetune", task.task_id, mean_loss))
        if on_epoch is not None:
            on_epoch(epoch + 1, cur, mean_loss)
    return cur, history


def register_pair(params, moving, fixed):
    """Inference only: returns (field, warped moving image)."""
    field, _ = forward(params, moving, fixed)
    warped = warp_bilinear(np.asarray(moving, dtype=field.dtype), field)
    return field, warped
