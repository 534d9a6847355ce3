"""Probe heads: small perceptrons that read the LSTM hidden state and
predict discounted future milestones, reward sums, and the win.

Each head is an independent MLP over h (never c): hidden layer of 64,
final layer zero-initialized so untrained milestone/win heads output
exactly 0.5 (σ(0)) and reward heads exactly 0 — the analytic values the
bootstrap machinery expects before any training.

Supervision comes from the labeling module. During training, labels are
built per slice with the head's own boundary prediction as bootstrap;
offline (`posthoc_train`), whole episodes are available and the oracle
path with terminal bootstrap 0 is used instead.

By default gradients stop at the hidden state: probing must measure the
representation, not reshape it. A config flag lets them flow through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import EnvConfig
from .errors import ConfigError, DomainError, ShapeError
from .labeling import EventTrack, LabelSeries, RewardTrack, milestone_labels, reward_labels
from .nn import Tensor

MILESTONE, REWARD_SUM, WIN = "Milestone", "RewardSum", "Win"


@dataclass(frozen=True)
class ProbeHeadSpec:
    name: str
    target: str  # event field, optionally indexed: "tower_destroyed[0]"
    kind: str  # Milestone | RewardSum | Win
    gamma: float = 0.995  # paper-scale alternative 1 - 1/900
    hidden: int = 64

    def __post_init__(self):
        if self.kind not in (MILESTONE, REWARD_SUM, WIN):
            raise ConfigError(f"unknown probe kind {self.kind!r}")
        if self.kind == WIN and self.gamma != 1.0:
            raise ConfigError("win heads predict without decay (gamma must be 1)")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"probe gamma must be in (0, 1], got {self.gamma}")


def default_head_specs(env_config: EnvConfig, gamma: float = 0.995) -> list[ProbeHeadSpec]:
    specs = []
    for r in range(env_config.num_regions):
        specs.append(ProbeHeadSpec(f"reach_region_{r}", f"reach_region[{r}]", MILESTONE, gamma))
    for k in range(env_config.num_towers):
        specs.append(ProbeHeadSpec(f"tower_destroyed_{k}", f"tower_destroyed[{k}]",
                                   MILESTONE, gamma))
    specs.append(ProbeHeadSpec("base_attacked", "base_attacked_by_enemy", MILESTONE, gamma))
    specs.append(ProbeHeadSpec("kill", "kill", MILESTONE, gamma))
    specs.append(ProbeHeadSpec("death", "death", MILESTONE, gamma))
    specs.append(ProbeHeadSpec("win", "win", WIN, 1.0))
    specs.append(ProbeHeadSpec("gold_sum", "gold_gain", REWARD_SUM, gamma))
    specs.append(ProbeHeadSpec("kill_reward_sum", "kill_reward", REWARD_SUM, gamma))
    return specs


def extract_track(events: list, target: str):
    """Build the per-frame x_t track for one head target from a list of
    FrameEvents."""
    if "[" in target:
        base, idx = target[:-1].split("[")
        idx = int(idx)
        vals = np.array([float(getattr(ev, base)[idx]) for ev in events])
    else:
        vals = np.array([float(getattr(ev, target)) for ev in events])
    return vals


def track_for(spec: ProbeHeadSpec, events: list):
    vals = extract_track(events, spec.target)
    if spec.kind == REWARD_SUM:
        return RewardTrack(vals, spec.name)
    return EventTrack(vals, spec.name)


def labels_for(spec: ProbeHeadSpec, events: list, bootstrap: float) -> LabelSeries:
    track = track_for(spec, events)
    if spec.kind == REWARD_SUM:
        return reward_labels(track, bootstrap, spec.gamma)
    return milestone_labels(track, bootstrap, spec.gamma)


class ProbeBank:
    """All configured heads plus their optimizer. Parameters are named
    `probe/<head>/<layer>` so they serialize alongside policy tensors
    without collisions."""

    def __init__(self, specs: list[ProbeHeadSpec], hidden_width: int = 64,
                 learning_rate: float = 1e-3, seed: int = 0):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate probe head names")
        self.specs = list(specs)
        self.by_name = {s.name: s for s in specs}
        self.input_width = hidden_width
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for s in specs:
            w1 = rng.normal(size=(hidden_width, s.hidden)) / np.sqrt(hidden_width)
            self.params[f"probe/{s.name}/w1"] = Tensor(w1, requires_grad=True)
            self.params[f"probe/{s.name}/b1"] = Tensor(np.zeros(s.hidden), requires_grad=True)
            # zero-init final layer: milestone output 0.5, reward output 0
            self.params[f"probe/{s.name}/w2"] = Tensor(np.zeros((s.hidden, 1)),
                                                       requires_grad=True)
            self.params[f"probe/{s.name}/b2"] = Tensor(np.zeros(1), requires_grad=True)
        self.opt = nn.Adam(self.params, lr=learning_rate)

    def head_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def forward(self, h, heads: list[str] | None = None) -> dict[str, Tensor]:
        """h: (B, hidden) array or Tensor. Tensor input leaves gradient
        flow to the caller (flow-through mode); arrays are constants."""
        x = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
        if x.data.ndim != 2 or x.data.shape[1] != self.input_width:
            raise ShapeError(f"probe input must be (B, {self.input_width}), "
                             f"got {x.data.shape}")
        out = {}
        for s in self.specs:
            if heads is not None and s.name not in heads:
                continue
            p = self.params
            z1 = nn.tanh(nn.dense(x, p[f"probe/{s.name}/w1"], p[f"probe/{s.name}/b1"]))
            z2 = nn.reshape(nn.dense(z1, p[f"probe/{s.name}/w2"], p[f"probe/{s.name}/b2"]),
                            (x.data.shape[0],))
            out[s.name] = nn.sigmoid(z2) if s.kind in (MILESTONE, WIN) else z2
        return out

    def head_loss(self, spec: ProbeHeadSpec, output: Tensor, labels: np.ndarray) -> Tensor:
        if output.data.shape != labels.shape:
            raise ShapeError(f"head {spec.name}: output {output.data.shape} vs "
                             f"labels {labels.shape}")
        if spec.kind == REWARD_SUM:
            return nn.mean_squared_error(output, labels)
        return nn.soft_binary_cross_entropy(output, labels)

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine, theirs = set(self.params), set(arrays)
        if mine != theirs:
            raise ShapeError(f"probe parameter mismatch: missing {sorted(mine - theirs)}, "
                             f"unexpected {sorted(theirs - mine)}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].data.shape:
                raise ShapeError(f"probe parameter {k} shape {arr.shape} != "
                                 f"{self.params[k].data.shape}")
            self.params[k].data = arr.astype(np.float64).copy()


def batch_labels(bank: ProbeBank, slices: list) -> dict[str, np.ndarray]:
    """Per-head label matrix (B, S) for a list of same-length slices,
    using each slice's attached bootstraps."""
    out = {}
    for spec in bank.specs:
        rows = []
        for s in slices:
            if spec.name not in s.probe_bootstraps:
                raise DomainError(f"slice missing bootstrap for head {spec.name}")
            events = [t.events for t in s.transitions]
            rows.append(labels_for(spec, events, s.probe_bootstraps[spec.name]).values)
        out[spec.name] = np.stack(rows)
    return out


def probe_train_step(bank: ProbeBank, hiddens: np.ndarray,
                     labels: dict[str, np.ndarray]) -> dict[str, float]:
    """One gradient step for every head on (B, S, hidden) rollout states
    with (B, S) label matrices. Returns per-head losses. The hidden
    states are constants here: stop-gradient is structural."""
    B, S, H = hiddens.shape
    flat = hiddens.reshape(B * S, H)
    bank.opt.zero_grad()
    outputs = bank.forward(flat)
    losses = {}
    total = None
    for spec in bank.specs:
        y = labels[spec.name].reshape(B * S)
        loss = bank.head_loss(spec, outputs[spec.name], y)
        losses[spec.name] = float(loss.data)
        total = loss if total is None else total + loss
    total.backward()
    bank.opt.step()
    return losses


def posthoc_train(bank: ProbeBank, hidden_runs: list[np.ndarray],
                  event_runs: list[list], epochs: int = 5,
                  batch_frames: int = 4096, seed: int = 0) -> dict[str, float]:
    """Offline training over complete episodes: hidden_runs[i] is the
    (T_i, hidden) state sequence of episode i, event_runs[i] its frame
    events. Full-episode labels, terminal bootstrap 0. Returns final
    mean per-head loss."""
    if len(hidden_runs) != len(event_runs) or not hidden_runs:
        raise ShapeError("need matching, nonempty hidden/event runs")
    H = np.concatenate(hidden_runs, axis=0)
    labels = {}
    for spec in bank.specs:
        labels[spec.name] = np.concatenate(
            [labels_for(spec, events, 0.0).values for events in event_runs])
    n = H.shape[0]
    rng = np.random.default_rng(seed)
    last = {}
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_frames):
            idx = order[lo:lo + batch_frames]
            bank.opt.zero_grad()
            outputs = bank.forward(H[idx])
            total = None
            for spec in bank.specs:
                loss = bank.head_loss(spec, outputs[spec.name], labels[spec.name][idx])
                last[spec.name] = float(loss.data)
                total = loss if total is None else total + loss
            total.backward()
            bank.opt.step()
    return last
