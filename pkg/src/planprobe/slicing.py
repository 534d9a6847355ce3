"""Fixed-length transition slices cut from running episodes.

Episodes are not the optimization unit; slices are. A worker plays its
env with a snapshot of the policy, emits a slice every S frames without
waiting for the episode to finish, and carries the LSTM state across
the cut. Each slice records everything later stages need:

- packed per-frame arrays (observations, actions, log-probs, values,
  rewards, the rollout hidden states the probe heads train on);
- the LSTM state at slice entry (equal to the predecessor's boundary
  state) and the boundary observation/state just past the end;
- per-probe-head bootstraps and the boundary value estimate, attached
  by a forward pass at the boundary at packaging time;
- the parameter version the slice was produced with.

Terminal slices may be shorter than S and carry bootstraps forced to 0.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import Env, FrameEvents
from .errors import ShapeError, UsageError
from .nn import LstmState, Tensor


@dataclass
class Transition:
    obs_vec: np.ndarray
    type_ids: np.ndarray
    action: int
    log_prob: float
    value: float
    reward: float
    events: FrameEvents
    hidden: np.ndarray  # LSTM h after consuming obs_vec (what probes read)
    cell: np.ndarray  # matching LSTM c, carried into BPTT window recompute


@dataclass
class Slice:
    transitions: list[Transition]
    h0: np.ndarray
    c0: np.ndarray
    boundary_obs_vec: np.ndarray | None
    boundary_type_ids: np.ndarray | None
    boundary_h: np.ndarray | None  # state carried out of the last step
    boundary_c: np.ndarray | None
    parameter_version: int
    terminal: bool
    episode_id: int
    start_frame: int
    probe_bootstraps: dict[str, float] = field(default_factory=dict)
    boundary_value: float = 0.0
    advantages: np.ndarray | None = None
    value_targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    # packed views
    def obs(self) -> np.ndarray:
        return np.stack([t.obs_vec for t in self.transitions])

    def type_ids(self) -> np.ndarray:
        return np.stack([t.type_ids for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions], dtype=np.int64)

    def log_probs(self) -> np.ndarray:
        return np.array([t.log_prob for t in self.transitions])

    def values(self) -> np.ndarray:
        return np.array([t.value for t in self.transitions])

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions])

    def hiddens(self) -> np.ndarray:
        return np.stack([t.hidden for t in self.transitions])

    def cells(self) -> np.ndarray:
        return np.stack([t.cell for t in self.transitions])


@dataclass(frozen=True)
class ParameterSnapshot:
    """Immutable published copy of policy parameters."""

    version: int
    arrays: dict[str, np.ndarray]


class SnapshotSlot:
    """Single-slot publish/subscribe for parameter snapshots. The only
    mutable object shared between the optimizer and workers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snapshot: ParameterSnapshot | None = None

    def publish(self, snapshot: ParameterSnapshot) -> None:
        with self._lock:
            if self._snapshot is not None and snapshot.version < self._snapshot.version:
                raise UsageError("snapshot versions must not decrease")
            self._snapshot = snapshot

    def get(self) -> ParameterSnapshot:
        with self._lock:
            if self._snapshot is None:
                raise UsageError("no snapshot published yet")
            return self._snapshot


def run_worker(env: Env, snapshot_slot: SnapshotSlot, policy, slice_len: int,
               action_rng: np.random.Generator,
               episode_seed_fn=None, max_frames: int | None = None):
    """Generator of Slices. `policy` is this worker's private PolicyNet;
    its parameters are reloaded from the slot between slices. Recurrent
    state resets only at episode boundaries, never at slice cuts."""
    if slice_len < 1:
        raise UsageError("slice_len must be ≥ 1")
    episode_id = -1
    frames = 0
    obs = None
    state = None
    version = -1

    def refresh():
        nonlocal version
        snap = snapshot_slot.get()
        if snap.version != version:
            policy.load_parameter_arrays(snap.arrays)
            version = snap.version

    while max_frames is None or frames < max_frames:
        if obs is None:
            episode_id += 1
            seed = None if episode_seed_fn is None else episode_seed_fn(episode_id)
            obs = env.reset(episode_seed=seed)
            state = policy.initial_state(1)
        refresh()
        transitions = []
        slice_h0 = state.h.data[0].copy()
        slice_c0 = state.c.data[0].copy()
        start_frame = obs.frame_index
        terminal = False
        while len(transitions) < slice_len:
            action, logp, value, _, state = policy.act(
                obs.vector, obs.type_ids, state, rng=action_rng)
            res = env.step(action)
            frames += 1
            transitions.append(Transition(
                obs_vec=obs.vector, type_ids=obs.type_ids, action=action,
                log_prob=logp, value=value, reward=res.events.reward,
                events=res.events, hidden=state.h.data[0].copy(),
                cell=state.c.data[0].copy()))
            obs = res.observation
            if res.done:
                terminal = True
                break
        if terminal:
            yield Slice(transitions, slice_h0, slice_c0, None, None, None, None,
                        version, True, episode_id, start_frame)
            obs = None
            state = None
        else:
            yield Slice(transitions, slice_h0, slice_c0,
                        obs.vector, obs.type_ids,
                        state.h.data[0].copy(), state.c.data[0].copy(),
                        version, False, episode_id, start_frame)


def attach_bootstraps(slc: Slice, policy, probe_bank) -> Slice:
    """Run the boundary-frame forward pass and record each probe head's
    prediction plus the value estimate. Terminal slices get zeros."""
    if slc.terminal:
        slc.probe_bootstraps = {name: 0.0 for name in probe_bank.head_names()}
        slc.boundary_value = 0.0
        return slc
    with nn.no_grad():
        state = LstmState(Tensor(slc.boundary_h[None, :]), Tensor(slc.boundary_c[None, :]))
        logits, value, new_state = policy.forward_policy(
            slc.boundary_obs_vec[None, :], slc.boundary_type_ids[None, :], state)
        outputs = probe_bank.forward(new_state.h.data)
        slc.probe_bootstraps = {name: float(out.data[0]) for name, out in outputs.items()}
        slc.boundary_value = float(value.data[0])
    return slc


@dataclass
class SliceBatch:
    obs: np.ndarray  # (B, S, D)
    type_ids: np.ndarray  # (B, S, K)
    actions: np.ndarray  # (B, S)
    old_logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    hiddens: np.ndarray  # (B, S, hidden)
    cells: np.ndarray
    h0: np.ndarray  # (B, hidden)
    c0: np.ndarray
    slices: list[Slice]
    windows: list[tuple[int, int]]

    @property
    def num_windows(self) -> int:
        return len(self.windows)


def assemble_batch(slices: list[Slice], bptt_horizon: int = 16) -> SliceBatch:
    """Stack homogeneous slices and precompute BPTT window extents.
    Slices must all have the same length and attached advantages."""
    if not slices:
        raise UsageError("assemble_batch requires at least one slice")
    S = len(slices[0])
    if any(len(s) != S for s in slices):
        raise ShapeError(f"mixed slice lengths {sorted({len(s) for s in slices})}")
    if any(s.advantages is None for s in slices):
        raise UsageError("attach advantages (GAE) before assembling a batch")
    windows = [(lo, min(lo + bptt_horizon, S)) for lo in range(0, S, bptt_horizon)]
    return SliceBatch(
        obs=np.stack([s.obs() for s in slices]),
        type_ids=np.stack([s.type_ids() for s in slices]),
        actions=np.stack([s.actions() for s in slices]),
        old_logp=np.stack([s.log_probs() for s in slices]),
        rewards=np.stack([s.rewards() for s in slices]),
        values=np.stack([s.values() for s in slices]),
        advantages=np.stack([s.advantages for s in slices]),
        value_targets=np.stack([s.value_targets for s in slices]),
        hiddens=np.stack([s.hiddens() for s in slices]),
        cells=np.stack([s.cells() for s in slices]),
        h0=np.stack([s.h0 for s in slices]),
        c0=np.stack([s.c0 for s in slices]),
        slices=list(slices),
        windows=windows,
    )
