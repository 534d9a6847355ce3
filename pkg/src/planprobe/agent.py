"""Recurrent actor-critic and its clipped-PPO update.

The network: observation MLP encoder feeding one LSTM (hidden width 64,
the vector the probe heads read), a softmax action head, and a scalar
value head. Fixed actions (moves, noop) get ordinary linear scores;
ability actions are scored by the dot product between a projection of
the LSTM output and that ability's row in the shared embedding table,
which is what makes ability embeddings trainable and comparable.

PPO specifics: clipped surrogate with ratio clip ε, GAE(λ) advantages
normalized per batch, entropy bonus, value loss, Adam, global gradient
norm clip. Recurrent credit runs through truncated BPTT: the hidden
state is detached every `bptt_horizon` steps during recompute, so
gradients never cross window boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import NUM_ENTITY_TYPES, EnvConfig, num_entity_slots, observation_dim
from .errors import NumericError, ShapeError, UsageError
from .nn import LstmCellParams, LstmState, Tensor


@dataclass(frozen=True)
class PPOConfig:
    clip_epsilon: float = 0.2
    gamma_agent: float = 0.99  # paper-scale alternative 1 - 1/6300
    gae_lambda: float = 0.95
    epochs: int = 3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 1e-3
    bptt_horizon: int = 16
    max_grad_norm: float = 0.5
    hidden_width: int = 64
    embed_dim: int = 16
    # rewards enter GAE scaled down so value-loss gradients stay on the
    # same footing as the normalized-advantage policy gradients under the
    # shared global norm clip
    reward_scale: float = 0.1

    def validate(self) -> None:
        from .errors import ConfigError

        if not (0 < self.gamma_agent <= 1):
            raise ConfigError("gamma_agent must be in (0, 1]")
        if not (0 <= self.gae_lambda <= 1):
            raise ConfigError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ConfigError("clip_epsilon must be > 0")
        if self.bptt_horizon < 1:
            raise ConfigError("bptt_horizon must be ≥ 1")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale must be > 0")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # identical branches to nn.sigmoid so fast and taped paths agree bitwise
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _orthonormal_rows(rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal embedding rows when they fit (rows ≤ dim), so every
    pair starts at cosine exactly 0; gaussian fallback otherwise."""
    if rows <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return np.ascontiguousarray(q[:rows])
    m = rng.normal(size=(rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class PolicyNet:
    """Parameter container plus forward passes. All tensors float64."""

    def __init__(self, env_config: EnvConfig, ppo_config: PPOConfig, seed: int = 0):
        self.env_config = env_config
        self.ppo_config = ppo_config
        hid = ppo_config.hidden_width
        edim = ppo_config.embed_dim
        self.obs_dim = observation_dim(env_config)
        self.n_slots = num_entity_slots(env_config)
        self.n_abilities = env_config.num_abilities
        self.n_actions = env_config.num_actions
        self.n_fixed = self.n_actions - self.n_abilities
        enc_in = self.obs_dim + self.n_slots * edim
        rng = np.random.default_rng(seed)

        def he(shape):
            return Tensor(rng.normal(size=shape) / np.sqrt(shape[0]), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "embed": Tensor(_orthonormal_rows(env_config.embedding_rows, edim, rng),
                            requires_grad=True),
            "enc_w1": he((enc_in, hid)),
            "enc_b1": zeros((hid,)),
            "enc_w2": he((hid, hid)),
            "enc_b2": zeros((hid,)),
            "lstm_w_ih": he((hid, 4 * hid)),
            "lstm_w_hh": he((hid, 4 * hid)),
            "lstm_b": zeros((4 * hid,)),
            # zero-initialized heads: uniform policy, zero value at start
            "act_w": zeros((hid, self.n_fixed)),
            "act_b": zeros((self.n_fixed,)),
            "abil_proj_w": zeros((hid, edim)),
            "abil_proj_b": zeros((edim,)),
            "abil_b": zeros((self.n_abilities,)),
            "val_w": zeros((hid, 1)),
            "val_b": zeros((1,)),
        }

    # -- forward ----------------------------------------------------------------

    def initial_state(self, batch: int = 1) -> LstmState:
        return nn.zero_state(batch, self.ppo_config.hidden_width)

    def _lstm_params(self) -> LstmCellParams:
        p = self.params
        return LstmCellParams(p["lstm_w_ih"], p["lstm_w_hh"], p["lstm_b"])

    def forward_policy(self, obs_vec: np.ndarray, type_ids: np.ndarray,
                       state: LstmState) -> tuple[Tensor, Tensor, LstmState]:
        """One recurrent step over a batch. obs_vec (B, obs_dim),
        type_ids (B, n_slots). Returns (logits (B, A), value (B,), state')."""
        p = self.params
        B = obs_vec.shape[0]
        if obs_vec.shape != (B, self.obs_dim) or type_ids.shape != (B, self.n_slots):
            raise ShapeError(
                f"bad forward shapes {obs_vec.shape} / {type_ids.shape}, "
                f"expected (B, {self.obs_dim}) / (B, {self.n_slots})"
            )
        emb = nn.embedding_lookup(p["embed"], type_ids)
        emb_flat = nn.reshape(emb, (B, self.n_slots * self.ppo_config.embed_dim))
        x = nn.concat([Tensor(obs_vec), emb_flat], axis=1)
        h1 = nn.tanh(nn.dense(x, p["enc_w1"], p["enc_b1"]))
        h2 = nn.tanh(nn.dense(h1, p["enc_w2"], p["enc_b2"]))
        out, new_state = nn.lstm_cell(h2, state, self._lstm_params())
        fixed = nn.dense(out, p["act_w"], p["act_b"])
        proj = nn.dense(out, p["abil_proj_w"], p["abil_proj_b"])
        abil_rows = p["embed"][NUM_ENTITY_TYPES:, :]
        abil = nn.add(nn.matmul(proj, nn.transpose(abil_rows)), p["abil_b"])
        logits = nn.concat([fixed, abil], axis=1)
        value = nn.reshape(nn.dense(out, p["val_w"], p["val_b"]), (B,))
        return logits, value, new_state

    def step_arrays(self, obs_vec: np.ndarray, type_ids: np.ndarray,
                    h: np.ndarray, c: np.ndarray):
        """Tape-free single-frame forward on raw arrays, mirroring
        forward_policy operation-for-operation so results are bitwise
        identical (a test pins this). This is the rollout hot path.
        Returns (logits (A,), value, h', c')."""
        p = self.params
        hid = self.ppo_config.hidden_width
        emb = p["embed"].data[type_ids].reshape(1, -1)
        x = np.concatenate([obs_vec[None, :], emb], axis=1)
        h1 = np.tanh((x @ p["enc_w1"].data) + p["enc_b1"].data)
        h2 = np.tanh((h1 @ p["enc_w2"].data) + p["enc_b2"].data)
        gates = ((h2 @ p["lstm_w_ih"].data) + (h @ p["lstm_w_hh"].data)) + p["lstm_b"].data
        i = _np_sigmoid(gates[:, 0 * hid:1 * hid])
        f = _np_sigmoid(gates[:, 1 * hid:2 * hid])
        g = np.tanh(gates[:, 2 * hid:3 * hid])
        o = _np_sigmoid(gates[:, 3 * hid:4 * hid])
        c_new = (f * c) + (i * g)
        h_new = o * np.tanh(c_new)
        fixed = (h_new @ p["act_w"].data) + p["act_b"].data
        proj = (h_new @ p["abil_proj_w"].data) + p["abil_proj_b"].data
        abil = (proj @ np.ascontiguousarray(
            np.ascontiguousarray(p["embed"].data[NUM_ENTITY_TYPES:, :]).T)) + p["abil_b"].data
        logits = np.concatenate([fixed, abil], axis=1)
        value = (h_new @ p["val_w"].data) + p["val_b"].data
        if not (np.isfinite(logits).all() and np.isfinite(value).all()):
            raise NumericError("non-finite policy forward")
        return logits[0], float(value[0, 0]), h_new, c_new

    def act(self, obs_vec: np.ndarray, type_ids: np.ndarray, state: LstmState,
            rng: np.random.Generator | None = None,
            deterministic: bool = False):
        """Rollout-side single-frame action. Tape-free. Returns
        (action, log_prob, value, probs, state')."""
        logits, value, h_new, c_new = self.step_arrays(
            obs_vec, type_ids, state.h.data, state.c.data)
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        if deterministic or rng is None:
            action = int(np.argmax(p))
        else:
            action = int(np.searchsorted(np.cumsum(p), rng.random()))
            action = min(action, len(p) - 1)
        new_state = LstmState(Tensor(h_new), Tensor(c_new))
        return action, float(np.log(p[action])), value, p, new_state

    # -- parameter plumbing -------------------------------------------------------

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = set(self.params)
        theirs = set(arrays)
        if mine != theirs:
            raise ShapeError(
                f"parameter name mismatch: missing {sorted(mine - theirs)}, "
                f"unexpected {sorted(theirs - mine)}"
            )
        for k, arr in arrays.items():
            if arr.shape != self.params[k].data.shape:
                raise ShapeError(f"parameter {k} shape {arr.shape} != "
                                 f"{self.params[k].data.shape}")
            self.params[k].data = arr.astype(np.float64).copy()


def gae_advantages(rewards: np.ndarray, values: np.ndarray, boundary_value: float,
                   gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE(λ) over one slice; boundary_value bootstraps past the end
    (0 for terminal slices). Returns (advantages, value targets)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ShapeError(f"rewards {rewards.shape} vs values {values.shape}")
    T = len(rewards)
    adv = np.zeros(T)
    next_value = boundary_value
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_value = values[t]
    return adv, adv + values


@dataclass
class UpdateMetrics:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    grad_norm: float
    approx_kl: float


class Agent:
    """Owns the policy parameters and the optimizer; applies PPO updates
    to assembled slice batches."""

    def __init__(self, env_config: EnvConfig, ppo_config: PPOConfig, seed: int = 0):
        ppo_config.validate()
        self.net = PolicyNet(env_config, ppo_config, seed=seed)
        self.cfg = ppo_config
        self.opt = nn.Adam(self.net.params, lr=ppo_config.learning_rate)
        self.version = 0

    def _window_groups(self, batch):
        """Group BPTT windows by length so same-length windows run as one
        widened batch, with stored rollout states carried in as constants."""
        groups: dict[int, list[tuple[int, int]]] = {}
        for lo, hi in batch.windows:
            groups.setdefault(hi - lo, []).append((lo, hi))
        prepared = []
        for length, wins in sorted(groups.items(), reverse=True):
            obs = np.concatenate([batch.obs[:, lo:hi] for lo, hi in wins], axis=0)
            ids = np.concatenate([batch.type_ids[:, lo:hi] for lo, hi in wins], axis=0)
            h_in = np.concatenate(
                [batch.h0 if lo == 0 else batch.hiddens[:, lo - 1] for lo, hi in wins], axis=0)
            c_in = np.concatenate(
                [batch.c0 if lo == 0 else batch.cells[:, lo - 1] for lo, hi in wins], axis=0)

            def tmajor(arr, wins=wins):
                # (B, S) slices of the windows, stacked rows then
                # flattened time-major to match concatenated step outputs
                g = np.concatenate([arr[:, lo:hi] for lo, hi in wins], axis=0)
                return np.ascontiguousarray(g.T).reshape(-1)

            prepared.append((length, obs, ids, h_in, c_in, tmajor))
        return prepared

    def ppo_update(self, batch, probe_bank=None, probe_labels=None) -> UpdateMetrics:
        """One PPO update (cfg.epochs passes) over a SliceBatch, or over
        a list of SliceBatches sharing one optimizer step (used when the
        buffer holds slices of unequal lengths). Advantage normalization
        pools across everything in the step.

        Passing probe_bank + probe_labels enables flow-through probe
        training: head losses join the objective and their gradients
        reach the LSTM. The default stop-gradient path trains probes
        separately (see probes module)."""
        cfg = self.cfg
        batches = batch if isinstance(batch, list) else [batch]
        if not batches:
            raise UsageError("ppo_update needs at least one batch")
        if probe_labels is None:
            labels_list = [None] * len(batches)
        elif isinstance(probe_labels, list):
            labels_list = probe_labels
        else:
            labels_list = [probe_labels]
        if len(labels_list) != len(batches):
            raise UsageError("one probe label dict per batch required")
        N = sum(b.obs.shape[0] * b.obs.shape[1] for b in batches)
        flat_adv = np.concatenate([b.advantages.reshape(-1) for b in batches])
        mean, std = flat_adv.mean(), max(flat_adv.std(), 1e-8)
        norm_advs = [(b.advantages - mean) / std for b in batches]
        groups_list = [self._window_groups(b) for b in batches]

        metrics = None
        for _ in range(cfg.epochs):
            self.opt.zero_grad()
            if probe_bank is not None:
                probe_bank.opt.zero_grad()
            total = None
            stats = {"clip": 0, "ent": 0.0, "kl": 0.0, "vl": 0.0, "pl": 0.0}
            for b, norm_adv, groups, labels in zip(batches, norm_advs,
                                                   groups_list, labels_list):
                part, part_stats = self.epoch_loss(b, norm_adv, groups,
                                                   probe_bank, labels)
                total = part if total is None else total + part
                for k in stats:
                    stats[k] += part_stats[k]
            total = total * Tensor(np.float64(1.0 / N))
            if not np.isfinite(total.data):
                raise NumericError("non-finite PPO loss; aborting update")
            total.backward()
            grad_norm = nn.clip_grad_norm(self.net.params, cfg.max_grad_norm)
            self.opt.step()
            if probe_bank is not None:
                probe_bank.opt.step()
            metrics = UpdateMetrics(
                policy_loss=stats["pl"] / N,
                value_loss=stats["vl"] / N,
                entropy=stats["ent"] / N,
                clip_fraction=stats["clip"] / N,
                grad_norm=grad_norm,
                approx_kl=stats["kl"] / N,
            )
        self.version += 1
        return metrics

    def epoch_loss(self, batch, norm_adv=None, groups=None,
                   probe_bank=None, probe_labels=None):
        """Unnormalized PPO objective (sum over B*S frames) for one pass.
        Exposed so tests can gradient-check the exact training loss."""
        cfg = self.cfg
        if norm_adv is None:
            flat = batch.advantages.reshape(-1)
            norm_adv = (batch.advantages - flat.mean()) / max(flat.std(), 1e-8)
        if groups is None:
            groups = self._window_groups(batch)
        total = None
        stats = {"clip": 0, "ent": 0.0, "kl": 0.0, "vl": 0.0, "pl": 0.0}
        for length, obs_g, ids_g, h_in, c_in, tmajor in groups:
            state = LstmState(Tensor(h_in), Tensor(c_in))
            step_logits, step_values, step_h = [], [], []
            for t in range(length):
                logits, value, state = self.net.forward_policy(
                    obs_g[:, t], ids_g[:, t], state)
                step_logits.append(logits)
                step_values.append(nn.reshape(value, (value.data.shape[0], 1)))
                if probe_bank is not None:
                    step_h.append(state.h)
            logits_cat = nn.concat(step_logits, axis=0) if length > 1 else step_logits[0]
            values_cat = nn.reshape(
                nn.concat(step_values, axis=0) if length > 1 else step_values[0],
                (length * obs_g.shape[0],))

            actions = tmajor(batch.actions).astype(np.int64)
            old_logp = tmajor(batch.old_logp)
            adv_t = tmajor(norm_adv)
            vtarg = tmajor(batch.value_targets)

            logp_all = nn.log_softmax(logits_cat, axis=1)
            logp = nn.gather(logp_all, actions)
            ratio = nn.texp(logp - Tensor(old_logp))
            a_t = Tensor(adv_t)
            clipped = nn.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
            surrogate = nn.minimum(ratio * a_t, clipped * a_t)
            policy_loss_sum = -(surrogate.sum())
            v_err = values_cat - Tensor(vtarg)
            value_loss_sum = (v_err * v_err).sum()
            ent_per_row = -(nn.texp(logp_all) * logp_all).sum(axis=1)
            entropy_sum = ent_per_row.sum()
            part = (policy_loss_sum
                    + value_loss_sum * nn._const(cfg.value_coef)
                    + entropy_sum * nn._const(-cfg.entropy_coef))
            if probe_bank is not None:
                h_cat = nn.concat(step_h, axis=0) if length > 1 else step_h[0]
                outputs = probe_bank.forward(h_cat)
                for spec in probe_bank.specs:
                    y = tmajor(probe_labels[spec.name])
                    head_loss = probe_bank.head_loss(spec, outputs[spec.name], y)
                    part = part + head_loss * nn._const(obs_g.shape[0] * length)
            total = part if total is None else total + part
            with nn.no_grad():
                r = ratio.data
                stats["clip"] += int((np.abs(r - 1.0) > cfg.clip_epsilon).sum())
                stats["ent"] += float(ent_per_row.data.sum())
                stats["kl"] += float((old_logp - logp.data).sum())
                stats["vl"] += float(value_loss_sum.data)
                stats["pl"] += float(policy_loss_sum.data)
        return total, stats
