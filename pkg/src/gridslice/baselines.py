"""Non-learning reference schedulers."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .drl import LearningRecord, SlotView, block_actions
from .iec61850 import SliceId
from .radio import LinkAllocation, RadioEnv, StepMetrics


class _FixedPolicy:
    name = "fixed"

    def feedback(self, view: SlotView, metrics: Sequence[StepMetrics]) -> list[LearningRecord]:
        return []

    def end_episode(self) -> None:
        pass

    def _max_power(self, env: RadioEnv, link_id: str) -> float:
        return env.topology.device(env.links[link_id].device_id).max_tx_power_dbm


class RoundRobinPolicy(_FixedPolicy):
    """Per cell, RB r goes to candidate ``(turn + r) mod n``; turn advances every slot."""

    name = "baseline_rr"

    def __init__(self, env: RadioEnv, pools: Mapping[SliceId, frozenset[int]]):
        self.env = env
        self.pools = pools
        self.turn = {g.id: 0 for g in env.topology.gnodebs}

    def act(self, view: SlotView) -> dict[str, LinkAllocation]:
        env = self.env
        grants: dict[str, list[int]] = {l: [] for l in view.active}
        for cell in self.turn:
            in_cell = [l for l in view.active if env.links[l].cell_id == cell]
            if in_cell:
                turn = self.turn[cell]
                for r in range(env.config.num_rbs):
                    cands = [l for l in in_cell if r in self.pools[env.links[l].slice_id]]
                    if cands:
                        grants[cands[(turn + r) % len(cands)]].append(r)
            self.turn[cell] += 1
        return {
            l: LinkAllocation(env.links[l], tuple(rbs), self._max_power(env, l))
            for l, rbs in grants.items()
        }


def interference_free_rate(env: RadioEnv, link_id: str, block: Sequence[int], channel) -> float:
    link = env.links[link_id]
    pmax = 10.0 ** ((env.topology.device(link.device_id).max_tx_power_dbm - 30.0) / 10.0)
    snr = pmax * channel.g(link.device_id, link.cell_id) * env.rb_gain[list(block)] / env.noise_w
    se = np.log2(1.0 + snr)
    if env.config.se_cap is not None:
        se = np.minimum(se, env.config.se_cap)
    return float(env.config.rb_bandwidth_hz * se.sum())


class GreedyPolicy(_FixedPolicy):
    """Each link takes the admissible block with the best interference-free rate at max power."""

    name = "baseline_greedy"

    def __init__(self, env: RadioEnv, pools: Mapping[SliceId, frozenset[int]], sizes=(1, 2, 4)):
        self.env = env
        num_rbs = env.config.num_rbs
        self.actions = {
            s: block_actions(np.isin(np.arange(num_rbs), sorted(p)), sizes) for s, p in pools.items()
        }

    def act(self, view: SlotView) -> dict[str, LinkAllocation]:
        env = self.env
        out = {}
        for l in view.active:
            blocks = self.actions[env.links[l].slice_id]
            rates = [interference_free_rate(env, l, b, view.state.channel) for b in blocks]
            best = blocks[int(np.argmax(rates))]
            out[l] = LinkAllocation(env.links[l], best, self._max_power(env, l))
        return out
