"""Intelligent scheduler: a DQN picks each link's RB block, an actor-critic
with generalized advantage estimation picks its transmit power.

One DQN and one actor-critic exist per slice; links of the same slice share
them but keep their own states, pending transitions and random streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .iec61850 import SLICE_ORDER, SliceId, SliceProfile
from .nn import DenseNet, GradientTape, OptimizerState, backward, forward, optimize_step
from .radio import EnvState, LinkAllocation, RadioEnv, StepMetrics
from .rng import stream


class ReplayNotReady(RuntimeError):
    """Replay memory holds fewer experiences than the requested batch."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, slot: int, link: str, components: Mapping[str, float]):
        self.slot = slot
        self.link = link
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at slot {slot}, link {link}: {parts}")


@dataclass
class TrainingConfig:
    gamma: float = 0.5
    gae_lambda: float = 0.95
    tau0: float = 5.0
    tau_min: float = 0.1
    decay_fraction: float = 0.6
    replay_capacity: int = 10_000
    batch_size: int = 64
    target_sync: int = 200
    beta: float = 0.5
    ac_period: int = 32
    hidden: tuple[int, ...] = (64, 64)
    dqn_lr: float = 1e-3
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    entropy_coef: float = 1e-3
    reward_scale: float = 0.1
    action_sizes: tuple[int, ...] = (1, 2, 4)
    log_std_bounds: tuple[float, float] = (-20.0, 1.0)

    def __post_init__(self) -> None:
        errors = []
        if not 0.0 <= self.gamma < 1.0:
            errors.append("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            errors.append("gae_lambda must lie in [0, 1]")
        if not (self.tau0 > 0 and self.tau_min > 0):
            errors.append("temperatures must be positive")
        if not 0.0 < self.decay_fraction <= 1.0:
            errors.append("decay_fraction must lie in (0, 1]")
        if self.batch_size <= 0 or self.replay_capacity < self.batch_size:
            errors.append("replay capacity must be at least the batch size")
        if self.target_sync <= 0 or self.ac_period <= 0:
            errors.append("target_sync and ac_period must be positive")
        if self.beta < 0:
            errors.append("beta cannot be negative")
        if not self.action_sizes or min(self.action_sizes) <= 0:
            errors.append("action sizes must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    def temperature(self, step: int, total_steps: int) -> float:
        """Exponential decay from tau0 reaching tau_min after decay_fraction of training."""
        horizon = max(1.0, self.decay_fraction * total_steps)
        frac = min(max(step, 0) / horizon, 1.0)
        return max(self.tau_min, self.tau0 * (self.tau_min / self.tau0) ** frac)


# exploration ---------------------------------------------------------------


def boltzmann_probabilities(q_values, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = np.asarray(q_values, dtype=np.float64)
    if q.ndim != 1 or not q.size or not np.isfinite(q).all():
        raise ValueError("q-values must be a nonempty finite vector")
    z = (q - q.max()) / tau
    p = np.exp(z)
    return p / p.sum()


def boltzmann_sample(q_values, tau: float, rng: np.random.Generator, size: int | None = None):
    """Draw action indices by inverting the cumulative Boltzmann distribution."""
    c = np.cumsum(boltzmann_probabilities(q_values, tau))
    if size is None:
        return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(c) - 1)
    idx = np.searchsorted(c, rng.random(size) * c[-1], side="right")
    return np.minimum(idx, len(c) - 1)


# replay --------------------------------------------------------------------


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: int
    power: float
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    powers: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayMemory:
    """FIFO ring buffer with uniform sampling without replacement."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.state_dim = state_dim
        self._s = np.zeros((capacity, state_dim))
        self._s2 = np.zeros((capacity, state_dim))
        self._a = np.zeros(capacity, dtype=np.int64)
        self._p = np.zeros(capacity)
        self._r = np.zeros(capacity)
        self._d = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, exp: Experience) -> None:
        if not math.isfinite(exp.reward):
            raise ValueError(f"reward must be finite, got {exp.reward}")
        s = np.asarray(exp.state, dtype=np.float64)
        s2 = np.asarray(exp.next_state, dtype=np.float64)
        if s.shape != (self.state_dim,) or s2.shape != (self.state_dim,):
            raise ValueError(f"states must have shape ({self.state_dim},)")
        i = self._next
        self._s[i] = s
        self._s2[i] = s2
        self._a[i] = exp.action
        self._p[i] = exp.power
        self._r[i] = exp.reward
        self._d[i] = exp.done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def items(self) -> list[Experience]:
        """Stored experiences, oldest first."""
        return [
            Experience(self._s[i].copy(), int(self._a[i]), float(self._p[i]), float(self._r[i]),
                       self._s2[i].copy(), bool(self._d[i]))
            for i in self._order()
        ]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self._size:
            raise ReplayNotReady(f"replay holds {self._size} experiences, batch needs {batch_size}")
        idx = self._order()[rng.choice(self._size, size=batch_size, replace=False)]
        return Batch(self._s[idx], self._a[idx], self._p[idx], self._r[idx], self._s2[idx], self._d[idx])


def replay_push(memory: ReplayMemory, exp: Experience) -> None:
    memory.push(exp)


def replay_sample(memory: ReplayMemory, batch_size: int, rng: np.random.Generator) -> Batch:
    return memory.sample(batch_size, rng)


# value learning --------------------------------------------------------------


def dqn_td_targets(rewards, next_q_target, dones, gamma: float) -> np.ndarray:
    """y = r + gamma * max_a' Q_target(s', a'), or y = r on terminal transitions."""
    r = np.asarray(rewards, dtype=np.float64)
    if not r.size:
        raise ValueError("batch must be nonempty")
    nq = np.asarray(next_q_target, dtype=np.float64).reshape(len(r), -1)
    d = np.asarray(dones, dtype=bool)
    return r + gamma * np.where(d, 0.0, nq.max(axis=1))


def dqn_loss(q_values, actions, targets) -> tuple[float, np.ndarray]:
    """Mean squared TD error on the taken actions and its gradient w.r.t. q_values."""
    q = np.asarray(q_values, dtype=np.float64)
    a = np.asarray(actions, dtype=np.int64)
    rows = np.arange(len(a))
    diff = q[rows, a] - np.asarray(targets, dtype=np.float64)
    grad = np.zeros_like(q)
    grad[rows, a] = 2.0 * diff / len(a)
    return float(np.mean(diff * diff)), grad


class DQNLearner:
    """Online Q-network, its target copy and optimizer."""

    def __init__(self, net: DenseNet, gamma: float, opt: OptimizerState, target_sync: int = 200):
        self.net = net
        self.target = net.copy()
        self.gamma = gamma
        self.opt = opt
        self.target_sync = target_sync
        self.updates = 0

    def update(self, batch: Batch) -> float:
        targets = dqn_td_targets(batch.rewards, self.target(batch.next_states), batch.dones, self.gamma)
        tape = GradientTape()
        q = forward(self.net, batch.states, tape)
        loss, grad = dqn_loss(q, batch.actions, targets)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite TD loss {loss}")
        optimize_step(self.net, backward(self.net, tape, grad), self.opt)
        self.updates += 1
        if self.updates % self.target_sync == 0:
            self.target.load_from(self.net)
        return loss


# advantage estimation ------------------------------------------------------


def gae_advantages(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """A_t = delta_t + gamma*lam*A_{t+1}, delta_t = r_t + gamma*V_{t+1} - V_t."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (len(r) + 1,):
        raise ValueError(f"values needs len(rewards) + 1 = {len(r) + 1} entries, got {v.shape}")
    adv = np.zeros(len(r))
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


# continuous power ------------------------------------------------------------


LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def squash_power(z: np.ndarray | float, lo: float, hi: float):
    return lo + 0.5 * (np.tanh(z) + 1.0) * (hi - lo)


def squashed_log_prob(z, mean, log_std, lo: float, hi: float):
    """log-density of the power obtained by squashing pre-activation ``z``."""
    z = np.asarray(z, dtype=np.float64)
    std = np.exp(log_std)
    gauss = -0.5 * ((z - mean) / std) ** 2 - log_std - LOG_SQRT_2PI
    # d power / d z = (hi - lo)/2 * (1 - tanh(z)^2), written stably
    log_jac = math.log(0.5 * (hi - lo)) + 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))
    return gauss - log_jac


def log_prob_output_gradient(z, raw_out: np.ndarray, log_std_bounds: tuple[float, float]) -> np.ndarray:
    """d log-prob / d actor output, for outputs ``[mean, raw log-std]`` (rows)."""
    raw = np.atleast_2d(raw_out)
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    mean = raw[:, 0]
    lo, hi = log_std_bounds
    log_std = np.clip(raw[:, 1], lo, hi)
    inside = (raw[:, 1] >= lo) & (raw[:, 1] <= hi)
    var = np.exp(2.0 * log_std)
    g = np.zeros_like(raw)
    g[:, 0] = (z - mean) / var
    g[:, 1] = ((z - mean) ** 2 / var - 1.0) * inside
    return g


@dataclass(frozen=True)
class PowerSample:
    power_dbm: float
    z: float
    log_prob: float
    mean: float
    log_std: float


def actor_sample_power(
    actor_input,
    actor: DenseNet,
    rng: np.random.Generator,
    bounds: tuple[float, float],
    log_std_bounds: tuple[float, float] = (-20.0, 1.0),
) -> PowerSample:
    """Draw a transmit power from the tanh-squashed Gaussian the actor outputs."""
    out = actor(np.asarray(actor_input, dtype=np.float64))
    return power_from_output(out, rng, bounds, log_std_bounds)


def power_from_output(out, rng, bounds, log_std_bounds=(-20.0, 1.0)) -> PowerSample:
    lo, hi = bounds
    mean = float(out[0])
    log_std = float(np.clip(out[1], *log_std_bounds))
    z = mean + math.exp(log_std) * float(rng.standard_normal())
    power = float(np.clip(squash_power(z, lo, hi), lo, hi))
    lp = float(squashed_log_prob(z, mean, log_std, lo, hi))
    return PowerSample(power, z, lp, mean, log_std)


# reward --------------------------------------------------------------------


def reward(own_se: float, interference_caused, beta: float, noise_w: float) -> float:
    """Own spectral efficiency minus the log-scaled interference put on victims."""
    if own_se < 0:
        raise ValueError("spectral efficiency cannot be negative")
    caused = np.asarray(interference_caused, dtype=np.float64)
    penalty = float(np.sum(np.log2(1.0 + caused / noise_w))) if caused.size else 0.0
    return float(own_se) - beta * penalty


# state encoding ------------------------------------------------------------


@dataclass(frozen=True)
class FeatureLayout:
    num_rbs: int
    deadline_features: bool = True

    @property
    def dim(self) -> int:
        return 1 + self.num_rbs + 3 + 3 + int(self.deadline_features) + 2 + 1 + self.num_rbs


@dataclass(frozen=True)
class LinkObservation:
    gain: float  # linear, to serving cell
    interference_w: np.ndarray  # per RB, last slot, excluding own
    noise_w: float
    slice_id: SliceId
    backlog_bits: float
    packet_bits: int
    head_slack_s: float | None  # deadline minus now for the head-of-line message
    latency_sla: float
    last_action: int | None
    num_actions: int
    last_power_dbm: float | None
    power_bounds: tuple[float, float]
    violation_ewma: float
    mask: np.ndarray  # bool per RB


def _clip(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def interference_feature(interference_w, noise_w: float) -> np.ndarray:
    return np.clip(np.log10(1.0 + np.asarray(interference_w) / noise_w) / 4.0, 0.0, 1.0)


def encode_state(obs: LinkObservation, layout: FeatureLayout) -> np.ndarray:
    mask = np.asarray(obs.mask, dtype=bool)
    gain_db = 10.0 * math.log10(obs.gain)
    parts = [np.array([_clip((gain_db + 110.0) / 50.0, -1.0, 1.0)])]
    parts.append(interference_feature(obs.interference_w, obs.noise_w) * mask)
    backlog = np.zeros(3)
    s = SLICE_ORDER.index(obs.slice_id)
    backlog[s] = math.tanh(obs.backlog_bits / (4.0 * obs.packet_bits))
    parts.append(backlog)
    onehot = np.zeros(3)
    onehot[s] = 1.0
    parts.append(onehot)
    if layout.deadline_features:
        slack = 0.0 if obs.head_slack_s is None else _clip(obs.head_slack_s / obs.latency_sla, -1.0, 1.0)
        parts.append(np.array([slack]))
    act = 0.0 if obs.last_action is None else (obs.last_action + 1) / obs.num_actions
    lo, hi = obs.power_bounds
    pw = 0.0 if obs.last_power_dbm is None else 2.0 * (obs.last_power_dbm - lo) / (hi - lo) - 1.0
    parts.append(np.array([act, _clip(pw, -1.0, 1.0), _clip(obs.violation_ewma, 0.0, 1.0)]))
    parts.append(mask.astype(np.float64))
    vec = np.concatenate(parts)
    assert vec.shape == (layout.dim,)
    return vec


def block_actions(mask, sizes: Sequence[int] = (1, 2, 4)) -> list[tuple[int, ...]]:
    """Contiguous RB blocks inside the mask, ordered by size then start."""
    m = np.asarray(mask, dtype=bool)
    out = []
    for size in sorted(set(sizes)):
        for start in range(len(m) - size + 1):
            if m[start:start + size].all():
                out.append(tuple(range(start, start + size)))
    return out


def decision_features(block: tuple[int, ...], num_rbs: int, max_size: int, interf_feat: np.ndarray) -> np.ndarray:
    start = block[0] / max(1, num_rbs - 1)
    return np.array([start, len(block) / max_size, float(np.mean(interf_feat[list(block)]))])


# agents ----------------------------------------------------------------------


@dataclass
class Pending:
    state: np.ndarray
    action: int
    power: float
    ac_input: np.ndarray
    z: float
    value: float
    reward: float | None = None


@dataclass
class ACStep:
    ac_input: np.ndarray
    z: float
    reward: float
    value: float
    next_value: float
    done: bool


class SliceAgent:
    """Shared DQN plus actor-critic for every link of one slice."""

    def __init__(self, slice_id: SliceId, mask, layout: FeatureLayout, cfg: TrainingConfig, seed: int):
        self.slice_id = slice_id
        self.mask = np.asarray(mask, dtype=bool)
        self.layout = layout
        self.cfg = cfg
        self.actions = block_actions(self.mask, cfg.action_sizes)
        if not self.actions:
            raise ValueError(f"slice {slice_id.value}: no RB block fits the admissible mask")
        self.max_size = max(len(a) for a in self.actions)
        tag = slice_id.value
        sizes = [layout.dim, *cfg.hidden]
        q_net = DenseNet.build([*sizes, len(self.actions)], stream(seed, "init", tag, "dqn"))
        self.dqn = DQNLearner(q_net, cfg.gamma, OptimizerState("adam", cfg.dqn_lr), cfg.target_sync)
        ac_sizes = [layout.dim + 3, *cfg.hidden]
        self.actor = DenseNet.build([*ac_sizes, 2], stream(seed, "init", tag, "actor"))
        self.critic = DenseNet.build([*ac_sizes, 1], stream(seed, "init", tag, "critic"))
        self.actor_opt = OptimizerState("adam", cfg.actor_lr)
        self.critic_opt = OptimizerState("adam", cfg.critic_lr)
        self.memory = ReplayMemory(cfg.replay_capacity, layout.dim)
        self.replay_rng = stream(seed, "replay", tag)
        self.segment: list[list[ACStep]] = []
        self.last_dqn_loss = float("nan")
        self.last_actor_loss = float("nan")
        self.last_critic_loss = float("nan")

    def greedy_action(self, state) -> int:
        return int(np.argmax(self.dqn.net(state)))

    def train_dqn(self) -> float | None:
        if len(self.memory) < self.cfg.batch_size:
            return None
        batch = self.memory.sample(self.cfg.batch_size, self.replay_rng)
        self.last_dqn_loss = self.dqn.update(batch)
        return self.last_dqn_loss

    def train_actor_critic(self) -> tuple[float, float] | None:
        chains = [c for c in self.segment if c]
        self.segment = []
        if not chains:
            return None
        cfg = self.cfg
        inputs, zs, advs, targets = [], [], [], []
        for chain in chains:
            # split each link's chain at terminal steps
            start = 0
            for i, st in enumerate(chain):
                if st.done or i == len(chain) - 1:
                    part = chain[start:i + 1]
                    values = [p.value for p in part] + [0.0 if st.done else st.next_value]
                    a = gae_advantages([p.reward for p in part], values, cfg.gamma, cfg.gae_lambda)
                    advs.extend(a)
                    targets.extend(a + np.asarray(values[:-1]))
                    inputs.extend(p.ac_input for p in part)
                    zs.extend(p.z for p in part)
                    start = i + 1
        x = np.asarray(inputs)
        z = np.asarray(zs)
        adv = np.asarray(advs)
        tgt = np.asarray(targets)
        n = len(adv)
        if n > 1 and adv.std() > 1e-8:
            adv = (adv - adv.mean()) / adv.std()

        tape = GradientTape()
        v = forward(self.critic, x, tape)[:, 0]
        diff = v - tgt
        critic_loss = float(np.mean(diff * diff))
        tape_a = GradientTape()
        out = forward(self.actor, x, tape_a)
        lo, hi = cfg.log_std_bounds
        log_std = np.clip(out[:, 1], lo, hi)
        logp = -0.5 * ((z - out[:, 0]) / np.exp(log_std)) ** 2 - log_std - LOG_SQRT_2PI
        entropy = log_std + 0.5 + LOG_SQRT_2PI
        actor_loss = float(-np.mean(logp * adv) - cfg.entropy_coef * np.mean(entropy))
        if not (math.isfinite(critic_loss) and math.isfinite(actor_loss)):
            raise FloatingPointError(f"actor loss {actor_loss}, critic loss {critic_loss}")
        optimize_step(self.critic, backward(self.critic, tape, (2.0 * diff / n)[:, None]), self.critic_opt)
        g = -adv[:, None] * log_prob_output_gradient(z, out, cfg.log_std_bounds) / n
        inside = (out[:, 1] >= lo) & (out[:, 1] <= hi)
        g[:, 1] -= cfg.entropy_coef * inside / n
        optimize_step(self.actor, backward(self.actor, tape_a, g), self.actor_opt)
        self.last_actor_loss, self.last_critic_loss = actor_loss, critic_loss
        return actor_loss, critic_loss


@dataclass
class LearningRecord:
    slot: int
    link_id: str
    reward: float
    dqn_loss: float
    actor_loss: float
    critic_loss: float
    temperature: float


@dataclass
class SlotView:
    """What a policy may look at when deciding one slot."""

    slot: int  # global slot index
    run_slot: int  # slot index since training began
    total_slots: int
    env: RadioEnv
    state: EnvState
    active: list[str]
    violation_ewma: Mapping[SliceId, float]
    profiles: Mapping[SliceId, SliceProfile]


class IrssPolicy:
    """Learning scheduler. ``act`` chooses blocks and powers, ``feedback`` learns."""

    name = "irss"

    def __init__(
        self,
        env: RadioEnv,
        pools: Mapping[SliceId, frozenset[int]],
        profiles: Mapping[SliceId, SliceProfile],
        cfg: TrainingConfig,
        seed: int,
        deadline_features: bool = True,
    ):
        self.env = env
        self.cfg = cfg
        self.profiles = profiles
        num_rbs = env.config.num_rbs
        self.layout = FeatureLayout(num_rbs, deadline_features)
        self.masks = {s: np.isin(np.arange(num_rbs), sorted(pools[s])) for s in SLICE_ORDER}
        used = {l.slice_id for l in env.links.values()}
        self.agents = {s: SliceAgent(s, self.masks[s], self.layout, cfg, seed) for s in SLICE_ORDER if s in used}
        self.explore_rng = {l: stream(seed, "explore", l) for l in env.link_order}
        self.power_rng = {l: stream(seed, "power", l) for l in env.link_order}
        self.last: dict[str, tuple[int, float]] = {}
        self.pending: dict[str, Pending] = {}
        self.chains: dict[str, list[ACStep]] = {l: [] for l in env.link_order}
        self.temperature = cfg.tau0
        self.frozen = False

    def power_bounds(self, link_id: str) -> tuple[float, float]:
        link = self.env.links[link_id]
        return self.env.config.min_power_dbm, self.env.topology.device(link.device_id).max_tx_power_dbm

    def observe(self, view: SlotView, link_id: str) -> LinkObservation:
        env, state = view.env, view.state
        link = env.links[link_id]
        profile = view.profiles[link.slice_id]
        queue = state.queues[link_id]
        now = env.slot_start(state.slot)
        last = self.last.get(link_id)
        agent = self.agents[link.slice_id]
        return LinkObservation(
            gain=state.channel.g(link.device_id, link.cell_id),
            interference_w=env.interference_seen(state, link_id),
            noise_w=env.noise_w,
            slice_id=link.slice_id,
            backlog_bits=float(sum(q.remaining_bits for q in queue)),
            packet_bits=profile.packet_bits,
            head_slack_s=(queue[0].message.deadline - now) if queue else None,
            latency_sla=profile.latency_sla,
            last_action=None if last is None else last[0],
            num_actions=len(agent.actions),
            last_power_dbm=None if last is None else last[1],
            power_bounds=self.power_bounds(link_id),
            violation_ewma=view.violation_ewma.get(link.slice_id, 0.0),
            mask=self.masks[link.slice_id],
        )

    def act(self, view: SlotView) -> dict[str, LinkAllocation]:
        self.temperature = self.cfg.temperature(view.run_slot, view.total_slots)
        by_slice: dict[SliceId, list[str]] = {}
        for lid in view.active:
            by_slice.setdefault(view.env.links[lid].slice_id, []).append(lid)
        out: dict[str, LinkAllocation] = {}
        for slice_id, lids in by_slice.items():
            agent = self.agents[slice_id]
            obs = [self.observe(view, l) for l in lids]
            states = np.stack([encode_state(o, self.layout) for o in obs])
            q = agent.dqn.net(states)
            if not np.isfinite(q).all():
                bad = lids[int(np.argmin(np.isfinite(q).all(axis=1)))]
                raise TrainingDivergedError(view.slot, bad, {"q_nonfinite": int((~np.isfinite(q)).sum())})
            choices = []
            for i, lid in enumerate(lids):
                if self.frozen:
                    choices.append(int(np.argmax(q[i])))
                else:
                    choices.append(boltzmann_sample(q[i], self.temperature, self.explore_rng[lid]))
            ac_in = np.stack([
                np.concatenate([
                    states[i],
                    decision_features(agent.actions[a], self.layout.num_rbs, agent.max_size,
                                      interference_feature(o.interference_w, o.noise_w)),
                ])
                for i, (o, a) in enumerate(zip(obs, choices))
            ])
            actor_out = agent.actor(ac_in)
            values = agent.critic(ac_in)[:, 0]
            if not (np.isfinite(actor_out).all() and np.isfinite(values).all()):
                raise TrainingDivergedError(view.slot, lids[0], {
                    "actor_nonfinite": int((~np.isfinite(actor_out)).sum()),
                    "critic_nonfinite": int((~np.isfinite(values)).sum()),
                })
            for i, lid in enumerate(lids):
                bounds = self.power_bounds(lid)
                if self.frozen:
                    ps = squash_power(actor_out[i, 0], *bounds)
                    sample = PowerSample(float(np.clip(ps, *bounds)), float(actor_out[i, 0]), 0.0, 0.0, 0.0)
                else:
                    sample = power_from_output(actor_out[i], self.power_rng[lid], bounds, self.cfg.log_std_bounds)
                a = choices[i]
                self._complete(lid, states[i], float(values[i]), done=False)
                self.pending[lid] = Pending(states[i], a, sample.power_dbm, ac_in[i], sample.z, float(values[i]))
                self.last[lid] = (a, sample.power_dbm)
                out[lid] = LinkAllocation(view.env.links[lid], agent.actions[a], sample.power_dbm)
        return out

    def _complete(self, lid: str, next_state: np.ndarray | None, next_value: float, done: bool) -> None:
        p = self.pending.pop(lid, None)
        if p is None or p.reward is None or self.frozen:
            return
        agent = self.agents[self.env.links[lid].slice_id]
        nxt = np.zeros(self.layout.dim) if next_state is None else next_state
        agent.memory.push(Experience(p.state, p.action, p.power, p.reward, nxt, done))
        self.chains[lid].append(ACStep(p.ac_input, p.z, p.reward, p.value, next_value, done))

    def feedback(self, view: SlotView, metrics: Sequence[StepMetrics]) -> list[LearningRecord]:
        records = []
        for m in metrics:
            p = self.pending.get(m.link_id)
            if p is None:
                continue
            r = reward(m.se_total, m.caused_w, self.cfg.beta, view.env.noise_w) * self.cfg.reward_scale
            if not math.isfinite(r):
                raise TrainingDivergedError(view.slot, m.link_id, {"se": m.se_total, "reward": r})
            p.reward = r
        if self.frozen:
            return records
        for slice_id, agent in self.agents.items():
            try:
                agent.train_dqn()
            except FloatingPointError as exc:
                raise TrainingDivergedError(view.slot, f"<{slice_id.value} net>", {"dqn_loss": str(exc)}) from exc
        if (view.slot + 1) % self.cfg.ac_period == 0:
            self._train_ac(view.slot)
        for m in metrics:
            agent = self.agents[m.slice_id]
            p = self.pending.get(m.link_id)
            if p is None:
                continue
            records.append(LearningRecord(
                view.slot, m.link_id, p.reward / self.cfg.reward_scale if self.cfg.reward_scale else p.reward,
                agent.last_dqn_loss, agent.last_actor_loss, agent.last_critic_loss, self.temperature,
            ))
        return records

    def _train_ac(self, slot: int) -> None:
        for lid, chain in self.chains.items():
            if chain:
                self.agents[self.env.links[lid].slice_id].segment.append(chain)
                self.chains[lid] = []
        for slice_id, agent in self.agents.items():
            try:
                agent.train_actor_critic()
            except FloatingPointError as exc:
                raise TrainingDivergedError(slot, f"<{slice_id.value} net>", {"actor_critic": str(exc)}) from exc

    def end_episode(self) -> None:
        for lid in list(self.pending):
            self._complete(lid, None, 0.0, done=True)
        self.last.clear()
