"""One-shot training of backbone weights and precision decisions.

Every iteration runs the quantized forward (decisions per layer, fake
quantization of activations and weights) and one backward pass; the
optimizer then updates the float32 masters.  Fake quantization produces new
arrays, so the masters change only through the optimizer.

Stages:

* soft: the agents output probabilities, each layer uses the mixture of
  fake-quantized operands and the objective ``loss - alpha * E[sum R]`` is
  differentiated end to end (pathwise term only).
* hard: actions are sampled; the backbone gets the straight-through gradient
  of ``loss`` and the agents get the score-function term
  ``grad log P(a) * (L - baseline)`` with ``L = loss - alpha * sum R``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .dataquality import Dataset
from .errors import ConfigError, NumericError
from .model import ACT_UNSIGNED, Model, build_backbone, forward
from .policy import HARD, SOFT, Decider, EmaBaseline, Policy, compute_rewards, expected_reward, policy_gradient
from .rng import Rng
from .sensitivity import assign_pools, hutchinson, ModelSurface

logger = logging.getLogger(__name__)

WARMUP = "warmup"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_start: float = 0.05
    lr_end: float = 0.001
    momentum: float = 0.9
    grad_clip: float = 1.0            # global gradient-norm clip per parameter group; 0 disables
    policy_lr: float = 0.5
    alpha: float = 0.5
    soft_fraction: float = 0.5       # share of epochs trained in the soft stage
    warmup_epochs: int = 3            # full-precision epochs (inside the soft share) before the first profile
    seed: int = 0
    refresh_every: int = 0            # soft-stage epochs between pool refreshes; 0 = one profile after warm-up
    trace_batch: int = 512
    trace_probes: int = 2
    pool_rule: str = "mean"           # rank layers by "sum" trace or per-parameter "mean" trace
    pools: Optional[list] = None      # fixed pools (one list for all layers, or one per layer)
    fixed_bits: Optional[int] = None  # fixed-precision baseline when set
    optimizer: str = "sgd"            # "sgd" or "none" (no parameter updates)
    rounding: bool = True
    act_mode: str = ACT_UNSIGNED
    temperature: float = 1.0
    granularity: str = "layer"
    stratify: bool = True             # one quality level per batch
    baseline_decay: float = 0.9
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigError("need lr_start >= lr_end > 0")
        if not 0.0 <= self.soft_fraction <= 1.0:
            raise ConfigError("soft_fraction must lie in [0, 1]")
        if self.optimizer not in ("sgd", "none"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.pool_rule not in ("sum", "mean"):
            raise ConfigError(f"unknown pool_rule {self.pool_rule!r}")
        if self.fixed_bits is not None and not 0 <= int(self.fixed_bits) <= 32:
            raise ConfigError("fixed_bits must lie in 0..32")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def soft_epochs(self) -> int:
        return int(round(self.epochs * self.soft_fraction))


@dataclass
class TrainRecord:
    iteration: int
    epoch: int
    stage: str
    level: int
    loss: float
    sum_reward: float
    alpha: float
    objective: float
    actions: list
    lr: float

    @classmethod
    def make(cls, iteration, epoch, stage, level, loss, sum_reward, alpha, actions, lr) -> "TrainRecord":
        loss, sum_reward, alpha = float(loss), float(sum_reward), float(alpha)
        return cls(iteration, epoch, stage, int(level), loss, sum_reward, alpha,
                   loss - alpha * sum_reward, [int(a) for a in actions], float(lr))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Sequence[T.Tensor], grads, lr: float, momentum: float = 0.9, velocity=None) -> list:
    """Classical momentum: ``v = mu * v + g; p -= lr * v``.  Returns the velocities."""
    if lr <= 0:
        raise ConfigError("lr must be positive")
    if velocity is None:
        velocity = [None] * len(params)
    out = []
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            out.append(v)
            continue
        v = g.astype(p.data.dtype, copy=True) if v is None else momentum * v + g
        p.data -= p.data.dtype.type(lr) * v
        out.append(v)
    return out


class SGD:
    def __init__(self, params: Sequence[T.Tensor], momentum: float = 0.9, clip: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.clip = clip
        self.velocity = [None] * len(self.params)

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        if self.clip > 0:
            norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))
            if norm > self.clip:
                k = self.clip / norm
                grads = [None if g is None else g * g.dtype.type(k) for g in grads]
        self.velocity = sgd_step(self.params, grads, lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def linear_lr(cfg: TrainConfig, iteration: int, total: int) -> float:
    if total <= 1:
        return cfg.lr_start
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * iteration / (total - 1)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def epoch_batches(ds: Dataset, batch_size: int, rng: Rng, stratify: bool = True) -> list:
    """Index arrays for one epoch; stratified batches hold one quality level each."""
    if not stratify:
        perm = rng.permutation(len(ds))
        return [perm[i:i + batch_size] for i in range(0, len(ds), batch_size)]
    batches = []
    for lvl in np.unique(ds.levels):
        idx = np.flatnonzero(ds.levels == lvl)
        idx = idx[rng.permutation(len(idx))]
        batches += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def _per_layer_pools(pools, n: int) -> list:
    if pools and isinstance(pools[0], (int, np.integer)):
        pools = [pools] * n
    if len(pools) != n:
        raise ConfigError(f"pools: need 1 or {n} entries, got {len(pools)}")
    return [tuple(int(b) for b in p) for p in pools]


def ranking_values(traces: Sequence[float], param_counts: Sequence[int], rule: str) -> list:
    if rule == "mean":
        return [t / n for t, n in zip(traces, param_counts)]
    return [float(t) for t in traces]


class Trainer:
    """Holds the model, the policy and optimizer state across steps.

    ``mode`` is ``"dqmq"`` (policy decisions), ``"fixed"`` (every layer at
    ``config.fixed_bits``) or ``"plain"`` (no quantization at all).
    """

    def __init__(self, model: Model, policy: Optional[Policy], config: TrainConfig, mode: Optional[str] = None):
        self.model, self.policy, self.cfg = model, policy, config
        if mode is None:
            mode = "fixed" if config.fixed_bits is not None else ("dqmq" if policy is not None else "plain")
        if mode == "dqmq" and policy is None:
            raise ConfigError("dqmq mode needs a policy")
        if mode == "fixed" and config.fixed_bits is None:
            raise ConfigError("fixed mode needs fixed_bits")
        self.mode = mode
        self.model_opt = SGD(model.parameters(), config.momentum, config.grad_clip)
        self.policy_opt = SGD(policy.parameters(), config.momentum, config.grad_clip) if mode == "dqmq" else None
        self.baseline = EmaBaseline(config.baseline_decay)
        self.sample_rng = Rng(config.seed, stream=0x5A)
        self.iteration = 0
        self._trace_sum = None
        self._trace_n = 0

    # -- one step ---------------------------------------------------------------
    def step(self, x, y, stage: str = SOFT, lr: Optional[float] = None, level: int = 0, epoch: int = 0) -> TrainRecord:
        cfg, model = self.cfg, self.model
        lr = cfg.lr_start if lr is None else lr
        counts = model.param_counts
        if self.mode == "plain" or stage == WARMUP:
            decide, actions = None, [32] * len(counts)
        elif self.mode == "fixed":
            bits = int(cfg.fixed_bits)
            decide, actions = (lambda i, s, h: bits), [bits] * len(counts)
        else:
            decider = Decider(self.policy, "soft" if stage == SOFT else "hard", self.sample_rng)
            decide = decider

        logits = forward(model, x, decide, rounding=cfg.rounding, act_mode=cfg.act_mode)
        loss = T.cross_entropy(logits, y)
        lval = loss.item()
        if not np.isfinite(lval):
            raise NumericError(f"non-finite loss at iteration {self.iteration}")

        if self.mode == "dqmq" and stage != WARMUP:
            actions = decider.action_list()
            if stage == SOFT:
                pools = [self.policy.pool_for(i) for i in range(len(counts))]
                er = expected_reward(counts, pools, [decider.probs[i] for i in range(len(counts))])
                sum_r = er.item()
                total = T.sub(loss, T.mul(er, cfg.alpha))
            else:
                rec = compute_rewards(counts, actions, cfg.alpha, lval)
                sum_r = rec.total_reward
                b = self.baseline.get(rec.objective)
                total = T.add(loss, policy_gradient(decider.log_probs, rec.objective, b))
                self.baseline.update(rec.objective)
        else:
            sum_r = compute_rewards(counts, actions, cfg.alpha, lval).total_reward
            total = loss

        self.model_opt.zero_grad()
        if self.policy_opt is not None:
            self.policy_opt.zero_grad()
        T.backward(total)
        if cfg.optimizer == "sgd":
            self.model_opt.step(lr)
            if self.policy_opt is not None and stage != WARMUP:
                self.policy_opt.step(cfg.policy_lr * lr / cfg.lr_start)
        record = TrainRecord.make(self.iteration, epoch, stage if self.mode == "dqmq" else self.mode,
                                  level, lval, sum_r, cfg.alpha, actions, lr)
        self.iteration += 1
        return record

    # -- sensitivity ------------------------------------------------------------
    def refresh_pools(self, ds: Dataset, rng: Rng) -> Optional[dict]:
        if self.mode != "dqmq" or self.cfg.pools is not None:
            return None
        cfg = self.cfg
        n = min(cfg.trace_batch, len(ds))
        idx = np.sort(rng.permutation(len(ds))[:n])
        surface = ModelSurface(self.model, (ds.images[idx], ds.labels[idx]))
        est = hutchinson(surface, cfg.trace_probes, seed=cfg.seed + 7919 * self.iteration, blockwise=True)
        traces = [est[s.name][0] for s in self.model.quantizable]
        # pools follow the running mean of all profiles so probe noise does not reshuffle them
        acc = np.asarray(traces, np.float64)
        self._trace_sum = acc if self._trace_sum is None else self._trace_sum + acc
        self._trace_n += 1
        averaged = (self._trace_sum / self._trace_n).tolist()
        values = ranking_values(averaged, self.model.param_counts, cfg.pool_rule)
        pools = assign_pools(values)
        self.policy.set_profile(pools, [max(v, 0.0) for v in values])
        if self.policy_opt is not None and self.policy.changed_units:
            heads = {id(self.policy.agents[u].params[k]) for u in self.policy.changed_units
                     for k in ("f2.weight", "f2.bias")}
            self.policy_opt.velocity = [None if id(p) in heads else v
                                        for p, v in zip(self.policy_opt.params, self.policy_opt.velocity)]
        return {"traces": traces, "averaged": averaged, "pools": [list(p) for p in pools]}


@dataclass
class FitResult:
    model: Model
    policy: Optional[Policy]
    history: list          # one dict per epoch
    records: list          # TrainRecord per iteration
    checkpoint: Optional[bytes] = None


def make_policy(model: Model, cfg: TrainConfig) -> Policy:
    n = len(model.quantizable)
    pools = _per_layer_pools(cfg.pools, n) if cfg.pools is not None else [(2, 4, 8)] * n
    return Policy(model.quantizable, pools, None, seed=cfg.seed, temperature=cfg.temperature,
                  granularity=cfg.granularity)


def fit(model: Optional[Model], policy: Optional[Policy], dataset: Dataset, config: TrainConfig,
        eval_set: Optional[Dataset] = None, out_dir=None, mode: Optional[str] = None,
        eval_every: int = 0) -> FitResult:
    """Run the stage schedule over ``dataset``.

    Pools are profiled before the first epoch and then every
    ``refresh_every`` epochs.  With ``eval_set`` and ``eval_every > 0`` the
    per-level accuracy is added to the epoch record at that cadence (and
    always after the last epoch).
    """
    from .report import evaluate

    cfg = config
    if model is None:
        model = build_backbone(cfg.model, seed=cfg.seed)
    if policy is None and mode in (None, "dqmq") and cfg.fixed_bits is None:
        policy = make_policy(model, cfg)
    trainer = Trainer(model, policy, cfg, mode)
    batch_rng = Rng(cfg.seed, stream=0xB0)
    trace_rng = Rng(cfg.seed, stream=0x7B)
    per_epoch = len(epoch_batches(dataset, cfg.batch_size, Rng(0), cfg.stratify))
    total = max(1, per_epoch * cfg.epochs)
    history, records = [], []
    # warm-up is capped by the soft share; a short run may have no warm-up at all
    warm = min(cfg.warmup_epochs, cfg.soft_epochs) if trainer.mode == "dqmq" else 0
    profile = None if warm else trainer.refresh_pools(dataset, trace_rng)
    try:
        for epoch in range(cfg.epochs):
            stage = WARMUP if epoch < warm else (SOFT if epoch < cfg.soft_epochs else HARD)
            if policy is not None:
                policy.stage = stage
            since = epoch - warm
            if epoch == warm and warm:
                profile = trainer.refresh_pools(dataset, trace_rng)
            elif since > 0 and stage == SOFT and cfg.refresh_every and since % cfg.refresh_every == 0:
                # pools stay fixed through the hard stage so sampled actions keep their meaning
                profile = trainer.refresh_pools(dataset, trace_rng)
            recs = []
            for idx in epoch_batches(dataset, cfg.batch_size, batch_rng, cfg.stratify):
                lr = linear_lr(cfg, trainer.iteration, total)
                lvl = int(dataset.levels[idx[0]])
                recs.append(trainer.step(dataset.images[idx], dataset.labels[idx], stage, lr, lvl, epoch))
            records += recs
            entry = _epoch_entry(epoch, stage, recs, trainer, profile)
            last = epoch == cfg.epochs - 1
            if eval_set is not None and (last or (eval_every and (epoch + 1) % eval_every == 0)):
                rep = evaluate(model, policy if trainer.mode == "dqmq" else None, eval_set,
                               bits=_fixed_bits(trainer), act_mode=cfg.act_mode)
                entry["eval"] = rep.to_dict()
            history.append(entry)
            logger.info("epoch %d %s loss=%.4f", epoch, stage, entry["loss"])
    except NumericError:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(out_dir) / "abort.ckpt", policy=policy,
                            metadata={"aborted_at": trainer.iteration})
        raise
    return FitResult(model, policy, history, records)


def _fixed_bits(trainer: Trainer):
    if trainer.mode == "fixed":
        return int(trainer.cfg.fixed_bits)
    if trainer.mode == "plain":
        return 32
    return None


def _epoch_entry(epoch, stage, recs, trainer, profile) -> dict:
    counts = {}
    for r in recs:
        for i, a in enumerate(r.actions):
            counts.setdefault(i, {}).setdefault(a, 0)
            counts[i][a] += 1
    names = [s.name for s in trainer.model.quantizable]
    entry = {
        "epoch": epoch,
        "stage": stage if trainer.mode == "dqmq" else trainer.mode,
        "iterations": len(recs),
        "loss": float(np.mean([r.loss for r in recs])) if recs else float("nan"),
        "sum_reward": float(np.mean([r.sum_reward for r in recs])) if recs else float("nan"),
        "objective": float(np.mean([r.objective for r in recs])) if recs else float("nan"),
        "decisions": {names[i]: {str(b): c for b, c in sorted(counts[i].items())} for i in sorted(counts)},
    }
    if profile is not None:
        entry["pools"] = {n: p for n, p in zip(names, profile["pools"])}
    return entry


def fixed_precision_baseline(model: Optional[Model], bits: int, dataset: Dataset, config: TrainConfig,
                             eval_set: Optional[Dataset] = None) -> FitResult:
    """The same loop with every layer frozen at ``bits``."""
    if not 0 <= int(bits) <= 32:
        raise ConfigError("bits must lie in 0..32")
    cfg = TrainConfig.from_dict({**config.to_dict(), "fixed_bits": int(bits)})
    return fit(model, None, dataset, cfg, eval_set=eval_set, mode="fixed")


def train_plain(model: Optional[Model], dataset: Dataset, config: TrainConfig,
                eval_set: Optional[Dataset] = None) -> FitResult:
    """Unquantized supervised training with the same batches and optimizer."""
    return fit(model, None, dataset, config, eval_set=eval_set, mode="plain")


def write_history(history: list, path) -> None:
    with open(path, "w") as f:
        for entry in history:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
