"""Precision decision agents: per-layer bit-width distributions.

Each decision unit (a quantizable layer, or a residual block when
``granularity="block"``) owns a tiny four-layer network: two stride-2 convs
over the unit's input features, global average pooling over space and batch,
then two fully-connected layers over ``[pooled features, log1p(h)]`` producing
one logit per pool candidate.  The last layer starts at zero, so fresh agents
are uniform over their pool.

Decisions are made once per batch, from the batch's own features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import LayerSpec, SoftDecision
from .quant import FULL_BITS
from .rng import Rng
from .tensor import Tensor

SOFT = "soft"
HARD = "hard"


class Agent:
    def __init__(self, in_channels: int, n_actions: int, rng: Rng, channels: int = 4, hidden: int = 8):
        def kaiming(shape, fan_in):
            b = np.sqrt(6.0 / fan_in)
            return Tensor(rng.uniform(shape, -b, b).astype(np.float32), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, np.float32), requires_grad=True)

        self.in_channels = in_channels
        self.n_actions = n_actions
        self.params = {
            "c1.weight": kaiming((channels, in_channels, 3, 3), in_channels * 9),
            "c1.bias": zeros(channels),
            "c2.weight": kaiming((channels, channels, 3, 3), channels * 9),
            "c2.bias": zeros(channels),
            "f1.weight": kaiming((hidden, channels + 1), channels + 1),
            "f1.bias": zeros(hidden),
            "f2.weight": zeros((n_actions, hidden)),
            "f2.bias": zeros(n_actions),
        }

    def reset_head(self) -> None:
        for k in ("f2.weight", "f2.bias"):
            self.params[k].data = np.zeros_like(self.params[k].data)

    def logits(self, x, h: float) -> Tensor:
        p = self.params
        x = x.detach() if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (x.shape[0], x.shape[1], 1, 1))
        z = T.relu(T.conv2d(x, p["c1.weight"], p["c1.bias"], stride=2, pad=1))
        z = T.relu(T.conv2d(z, p["c2.weight"], p["c2.bias"], stride=2, pad=1))
        feat = T.mean(z, axis=(0, 2, 3))
        hfeat = Tensor(np.array([np.log1p(max(h, 0.0))], dtype=feat.dtype))
        z = T.concat([feat, hfeat])
        z = T.relu(T.add(T.reshape(T.matmul(T.reshape(z, (1, -1)), _transpose(p["f1.weight"])), (-1,)),
                         p["f1.bias"]))
        out = T.matmul(T.reshape(z, (1, -1)), _transpose(p["f2.weight"]))
        return T.add(T.reshape(out, (-1,)), p["f2.bias"])


def _transpose(w: Tensor) -> Tensor:
    return T.custom_op(np.ascontiguousarray(w.data.T), (w,), lambda g: (g.T,))


def softmax_t(logits: Tensor, temperature: float) -> Tensor:
    return T.softmax(T.mul(logits, 1.0 / temperature))


def decide_soft(agent: Agent, x, h: float, temperature: float = 1.0) -> Tensor:
    """Differentiable probabilities over the agent's pool."""
    return softmax_t(agent.logits(x, h), temperature)


def decide_hard(agent: Agent, x, h: float, rng: Rng, temperature: float = 1.0):
    """Sample a pool index; returns ``(index, log_prob tensor)``."""
    logp = T.log_softmax(T.mul(agent.logits(x, h), 1.0 / temperature))
    idx = rng.categorical(np.exp(logp.data.astype(np.float64)))
    return idx, T.take(logp, idx)


class Policy:
    """All agents of one model plus their pools, traces and stage."""

    def __init__(self, layers: Sequence[LayerSpec], pools: Sequence[Sequence[int]], traces=None,
                 seed: int = 0, stage: str = SOFT, temperature: float = 1.0, granularity: str = "layer",
                 channels: int = 4, hidden: int = 8, _agents: Optional[list] = None):
        if granularity not in ("layer", "block"):
            raise ContractError(f"unknown granularity {granularity!r}")
        self.layers = list(layers)
        self.granularity = granularity
        self.units = _group(self.layers, granularity)
        self.unit_of = {i: u for u, members in enumerate(self.units) for i in members}
        self.channels, self.hidden = channels, hidden
        self.seed = seed
        self.stage = stage
        self.temperature = float(temperature)
        self.set_profile(pools, traces)
        if _agents is None:
            rng = Rng(seed, stream=0xA6E)
            _agents = [Agent(self.layers[m[0]].in_features, len(self.unit_pools[u]), rng, channels, hidden)
                       for u, m in enumerate(self.units)]
        self.agents = _agents

    def set_profile(self, pools, traces=None) -> None:
        pools = [tuple(int(b) for b in p) for p in pools]
        if len(pools) != len(self.layers):
            raise ContractError(f"need {len(self.layers)} pools, got {len(pools)}")
        sizes = {len(p) for p in pools}
        if hasattr(self, "agents") and sizes != {self.agents[0].n_actions}:
            raise ContractError("pool size cannot change after agents are built")
        self.pools = pools
        self.traces = [0.0] * len(pools) if traces is None else [float(t) for t in traces]
        # a block shares the highest pool of its members
        old = getattr(self, "unit_pools", None)
        self.unit_pools = [max((pools[i] for i in m), key=lambda p: (max(p), p)) for m in self.units]
        self.unit_traces = [max(self.traces[i] for i in m) for m in self.units]
        self.changed_units = [] if old is None else [u for u, (a, b) in enumerate(zip(old, self.unit_pools)) if a != b]
        if hasattr(self, "agents"):
            # an action index means a different bit-width in the new pool, so start that head uniform
            for u in self.changed_units:
                self.agents[u].reset_head()

    # -- decisions ----------------------------------------------------------
    def pool_for(self, layer_index: int) -> tuple:
        return self.unit_pools[self.unit_of[layer_index]]

    def logits(self, layer_index: int, x) -> Tensor:
        u = self.unit_of[layer_index]
        return self.agents[u].logits(x, self.unit_traces[u])

    def probs(self, layer_index: int, x) -> Tensor:
        return softmax_t(self.logits(layer_index, x), self.temperature)

    def soft(self, layer_index: int, x) -> SoftDecision:
        return SoftDecision(self.pool_for(layer_index), self.probs(layer_index, x))

    def sample(self, layer_index: int, x, rng: Rng):
        u = self.unit_of[layer_index]
        idx, lp = decide_hard(self.agents[u], x, self.unit_traces[u], rng, self.temperature)
        return self.unit_pools[u][idx], lp

    def mode(self, layer_index: int, x) -> int:
        with T.no_grad():
            lg = self.logits(layer_index, x).data
        return self.pool_for(layer_index)[int(np.argmax(lg))]

    def first_in_unit(self, layer_index: int) -> bool:
        return self.units[self.unit_of[layer_index]][0] == layer_index

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> list:
        return [t for a in self.agents for t in a.params.values()]

    def named_tensors(self) -> list:
        return [(f"pda{u}.{k}", f"pda{u}", t) for u, a in enumerate(self.agents) for k, t in a.params.items()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def manifest(self) -> dict:
        return {"layers": [s.to_dict() for s in self.layers], "pools": [list(p) for p in self.pools],
                "traces": self.traces, "seed": self.seed, "stage": self.stage,
                "temperature": self.temperature, "granularity": self.granularity,
                "channels": self.channels, "hidden": self.hidden}

    @classmethod
    def from_manifest(cls, m: dict, arrays: dict) -> "Policy":
        layers = [LayerSpec.from_dict(d) for d in m["layers"]]
        pol = cls(layers, m["pools"], m["traces"], m["seed"], m["stage"], m["temperature"],
                  m["granularity"], m["channels"], m["hidden"])
        for name, _, t in pol.named_tensors():
            t.data = np.array(arrays[name], dtype=np.float32)
        return pol

    def copy(self) -> "Policy":
        pol = Policy(self.layers, self.pools, self.traces, self.seed, self.stage, self.temperature,
                     self.granularity, self.channels, self.hidden)
        for (_, _, dst), (_, _, src) in zip(pol.named_tensors(), self.named_tensors()):
            dst.data = src.data.copy()
        return pol


class Decider:
    """``decide`` callback for :func:`dqmq.model.forward` that records what it chose.

    ``kind`` is ``"soft"`` (probability mixtures), ``"hard"`` (sampled, with
    log-probabilities kept for the score-function term) or ``"mode"``
    (argmax, used for evaluation and serving).  Units spanning several layers
    decide once, at their first layer, and the rest reuse that decision.
    """

    def __init__(self, policy: Policy, kind: str, rng: Optional[Rng] = None):
        if kind not in ("soft", "hard", "mode"):
            raise ContractError(f"unknown decision kind {kind!r}")
        if kind == "hard" and rng is None:
            raise ContractError("hard decisions need an rng")
        self.policy, self.kind, self.rng = policy, kind, rng
        self.actions = {}
        self.probs = {}
        self.log_probs = []
        self._units = {}

    def __call__(self, index: int, spec, x):
        pol = self.policy
        u = pol.unit_of[index]
        if u not in self._units:
            if self.kind == "soft":
                self._units[u] = pol.soft(index, x)
            elif self.kind == "hard":
                bits, lp = pol.sample(index, x, self.rng)
                self.log_probs.append(lp)
                self._units[u] = bits
            else:
                self._units[u] = pol.mode(index, x)
        d = self._units[u]
        if isinstance(d, SoftDecision):
            self.probs[index] = d.probs
            self.actions[index] = int(d.bits[int(np.argmax(d.probs.data))])
        else:
            self.actions[index] = int(d)
        return d

    def action_list(self) -> list:
        return [self.actions[i] for i in sorted(self.actions)]


def _group(layers, granularity) -> list:
    if granularity == "layer":
        return [[i] for i in range(len(layers))]
    groups = {}
    for i, s in enumerate(layers):
        groups.setdefault(s.block, []).append(i)
    return [groups[b] for b in sorted(groups)]


# ---------------------------------------------------------------------------
# rewards and the score-function estimator
# ---------------------------------------------------------------------------


@dataclass
class RewardRecord:
    rewards: list   # R_l, normalized model-size reduction per layer
    returns: list   # r_l = alpha * sum_{i >= l} R_i - loss
    alpha: float
    loss: float
    total_reward: float = field(init=False)
    objective: float = field(init=False)  # J = loss - alpha * sum R

    def __post_init__(self):
        self.total_reward = float(sum(self.rewards))
        self.objective = self.loss - self.alpha * self.total_reward


def reward_vector(param_counts: Sequence[int], layer: int, pool: Sequence[int]) -> np.ndarray:
    total = FULL_BITS * float(sum(param_counts))
    return np.array([param_counts[layer] * (FULL_BITS - b) / total for b in pool])


def compute_rewards(param_counts: Sequence[int], actions: Sequence[int], alpha: float, loss: float) -> RewardRecord:
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    if len(param_counts) != len(actions):
        raise ContractError("one action per layer required")
    total = FULL_BITS * float(sum(param_counts))
    R = [n * (FULL_BITS - int(a)) / total for n, a in zip(param_counts, actions)]
    tail = np.cumsum(R[::-1])[::-1]
    returns = [alpha * float(t) - loss for t in tail]
    return RewardRecord(R, returns, float(alpha), float(loss))


def expected_reward(param_counts: Sequence[int], pools: Sequence[Sequence[int]], probs: Sequence[Tensor]) -> Tensor:
    """``sum_l E_p[R_l]`` as a differentiable function of the probabilities."""
    acc = None
    for l, (pool, p) in enumerate(zip(pools, probs)):
        r = Tensor(reward_vector(param_counts, l, pool), dtype=p.dtype)
        term = T.sum(T.mul(p, r))
        acc = term if acc is None else T.add(acc, term)
    return acc


def policy_gradient(log_probs: Sequence[Tensor], objective, baseline: float = 0.0) -> Tensor:
    """Surrogate whose gradient is ``sum_l grad log P(a_l) * (objective - baseline)``.

    ``objective`` is ``L = loss - alpha * sum R`` for the sampled actions; it may
    be a per-sample array when each log-prob tensor holds many samples, in
    which case the surrogate averages over samples.
    """
    if not log_probs:
        raise ContractError("no log-probabilities recorded for this iteration")
    adv = np.asarray(objective, dtype=np.float64) - float(baseline)
    acc = None
    for lp in log_probs:
        if lp is None or not lp.requires_grad or (lp._node is not None and lp._node.consumed):
            raise ContractError("stale or missing log-probability")
        if adv.ndim == 0:
            term = T.sum(T.mul(lp, float(adv)))
        else:
            if lp.shape != adv.shape:
                raise ContractError(f"log-probs {lp.shape} vs objectives {adv.shape}")
            term = T.mul(T.sum(T.mul(lp, Tensor(adv, dtype=lp.dtype))), 1.0 / adv.size)
        acc = term if acc is None else T.add(acc, term)
    return acc


class EmaBaseline:
    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value: Optional[float] = None

    def get(self, fallback: float) -> float:
        return fallback if self.value is None else self.value

    def update(self, x: float) -> None:
        self.value = float(x) if self.value is None else self.decay * self.value + (1 - self.decay) * float(x)
