"""Synchronous training loop: slice workers feed a shared buffer; each
optimizer step consumes a batch of slices, refreshes the published
parameter snapshot, and trains probe heads on the same slices.

Everything is deterministic given (config, seed) with workers=1: all
randomness flows from derive_seed, and metrics contain no wallclock.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import Agent, PolicyNet, gae_advantages
from .config import RunConfig, derive_seed, write_resolved_config
from .env import Env
from .errors import UsageError
from .persistence import ReplayWriter, save_checkpoint
from .probes import ProbeBank, batch_labels, default_head_specs, probe_train_step
from .slicing import (ParameterSnapshot, SnapshotSlot, assemble_batch,
                      attach_bootstraps, run_worker)
from . import nn

EVAL_EVERY_UPDATES = 40
EVAL_EPISODES = 24
EARLY_STOP_WIN_RATE = 0.95
EARLY_STOP_STREAK = 2

METRIC_FIELDS = ["update", "version", "frames", "policy_loss", "value_loss",
                 "entropy", "clip_fraction", "grad_norm", "approx_kl",
                 "reward_per_frame", "train_episodes", "train_wins",
                 "probe_loss_mean", "win_head_loss", "eval_win_rate"]


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    checkpoint_paths: list
    frames: int
    updates: int
    final_version: int
    final_eval_win_rate: float


def play_episode(net: PolicyNet, env: Env, episode_seed: int,
                 rng=None, deterministic: bool = True):
    """Roll one episode. Returns (events per frame, hidden states (T, H),
    observations, actions, won flag)."""
    obs = env.reset(episode_seed=episode_seed)
    state = net.initial_state(1)
    events, hiddens, observations, actions = [], [], [], []
    won = False
    while True:
        action, logp, value, probs, state = net.act(
            obs.vector, obs.type_ids, state,
            rng=rng, deterministic=deterministic)
        res = env.step(action)
        observations.append(obs)
        actions.append(action)
        events.append(res.events)
        hiddens.append(state.h.data[0].copy())
        if res.events.win:
            won = True
        obs = res.observation
        if res.done:
            return events, np.stack(hiddens), observations, actions, won


def evaluate_win_rate(net: PolicyNet, env_cfg, episodes: int, seed: int) -> float:
    env = Env(env_cfg)
    wins = 0
    for i in range(episodes):
        _, _, _, _, won = play_episode(
            net, env, derive_seed(seed, "eval-episode", i), deterministic=True)
        wins += int(won)
    return wins / episodes


def _checkpoint_meta(cfg: RunConfig, version: int, frames: int, updates: int) -> dict:
    return {
        "model_version": version,
        "env_config_hash": cfg.env.content_hash(),
        "frames": frames,
        "updates": updates,
        "seed": cfg.seed,
        "probe_gamma": cfg.probes.gamma,
    }


def _save(cfg, out_dir, agent, bank, frames, updates) -> Path:
    arrays = dict(agent.net.parameter_arrays())
    arrays.update(bank.parameter_arrays())
    path = Path(out_dir) / f"ckpt_v{agent.version:06d}.pprb"
    save_checkpoint(path, arrays, _checkpoint_meta(cfg, agent.version, frames, updates))
    return path


def train_run(cfg: RunConfig, out_dir, total_frames: int = 2_000_000,
              checkpoint_every: int = 50, log=None,
              early_stop_win_rate: float = EARLY_STOP_WIN_RATE,
              min_frames: int = 0) -> TrainResult:
    """Train to total_frames, or early-stop once evaluation win rate holds
    above early_stop_win_rate on consecutive evals past the min_frames
    floor. Returns paths to everything written."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir)

    agent = Agent(cfg.env, cfg.agent, seed=derive_seed(cfg.seed, "agent"))
    bank = ProbeBank(default_head_specs(cfg.env, cfg.probes.gamma),
                     hidden_width=cfg.agent.hidden_width,
                     learning_rate=cfg.probes.learning_rate,
                     seed=derive_seed(cfg.seed, "probes"))
    slot = SnapshotSlot()
    slot.publish(ParameterSnapshot(0, agent.net.parameter_arrays()))

    workers = []
    for w in range(cfg.slicing.workers):
        env = Env(cfg.env)
        policy = PolicyNet(cfg.env, cfg.agent, seed=derive_seed(cfg.seed, "worker", w))
        gen = run_worker(
            env, slot, policy, cfg.slicing.slice_len,
            action_rng=np.random.default_rng(derive_seed(cfg.seed, "actions", w)),
            episode_seed_fn=lambda i, w=w: derive_seed(cfg.seed, f"episode-w{w}", i))
        workers.append(gen)

    checkpoints = [_save(cfg, out_dir, agent, bank, 0, 0)]
    buffer = []
    frames = 0
    updates = 0
    streak = 0
    target_frames = cfg.slicing.slices_per_batch * cfg.slicing.slice_len
    last_win_rate = 0.0
    batch_reward, batch_episodes, batch_wins = 0.0, 0, 0
    stop = total_frames == 0

    # streamed so a crashed or killed run still leaves its history behind
    metrics_path = out_dir / "metrics.csv"
    metrics_file = metrics_path.open("w", newline="", encoding="utf-8")
    writer = csv.DictWriter(metrics_file, fieldnames=METRIC_FIELDS)
    writer.writeheader()

    while not stop:
        for gen in workers:
            slc = next(gen)
            if agent.version - slc.parameter_version > cfg.slicing.staleness_bound:
                raise UsageError(
                    f"stale slice: version {slc.parameter_version} vs "
                    f"optimizer {agent.version}")
            attach_bootstraps(slc, agent.net, bank)
            slc.advantages, slc.value_targets = gae_advantages(
                slc.rewards() * cfg.agent.reward_scale, slc.values(),
                slc.boundary_value,
                cfg.agent.gamma_agent, cfg.agent.gae_lambda)
            buffer.append(slc)
            frames += len(slc)
            batch_reward += float(slc.rewards().sum())
            batch_episodes += int(slc.terminal)
            batch_wins += sum(t.events.win for t in slc.transitions)

        if sum(len(s) for s in buffer) < target_frames:
            continue

        consumed_frames = sum(len(s) for s in buffer)
        by_len = {}
        for s in buffer:
            by_len.setdefault(len(s), []).append(s)
        buffer = []
        batches = [assemble_batch(group, cfg.agent.bptt_horizon)
                   for _, group in sorted(by_len.items(), reverse=True)]
        labels = [batch_labels(bank, b.slices) for b in batches]

        if cfg.probes.mode == "flow-through":
            metrics = agent.ppo_update(batches, probe_bank=bank, probe_labels=labels)
            probe_losses = {}
        else:
            metrics = agent.ppo_update(batches)
            probe_losses = {}
            for b, lab in zip(batches, labels):
                for head, loss in probe_train_step(bank, b.hiddens, lab).items():
                    probe_losses.setdefault(head, []).append(loss)
        slot.publish(ParameterSnapshot(agent.version, agent.net.parameter_arrays()))
        updates += 1

        mean_losses = {k: float(np.mean(v)) for k, v in probe_losses.items()}
        batch_frames = consumed_frames if consumed_frames else 1
        row = {
            "update": updates,
            "version": agent.version,
            "frames": frames,
            "policy_loss": f"{metrics.policy_loss:.6f}",
            "value_loss": f"{metrics.value_loss:.6f}",
            "entropy": f"{metrics.entropy:.6f}",
            "clip_fraction": f"{metrics.clip_fraction:.6f}",
            "grad_norm": f"{metrics.grad_norm:.6f}",
            "approx_kl": f"{metrics.approx_kl:.6f}",
            "reward_per_frame": f"{batch_reward / batch_frames:.6f}",
            "train_episodes": batch_episodes,
            "train_wins": batch_wins,
            "probe_loss_mean": (f"{np.mean(list(mean_losses.values())):.6f}"
                                if mean_losses else ""),
            "win_head_loss": (f"{mean_losses['win']:.6f}"
                              if "win" in mean_losses else ""),
            "eval_win_rate": "",
        }

        if updates % EVAL_EVERY_UPDATES == 0:
            last_win_rate = evaluate_win_rate(
                agent.net, cfg.env, EVAL_EPISODES,
                derive_seed(cfg.seed, "eval", updates))
            row["eval_win_rate"] = f"{last_win_rate:.4f}"
            streak = streak + 1 if last_win_rate >= early_stop_win_rate else 0
            if log:
                log(f"update {updates} frames {frames} win_rate "
                    f"{last_win_rate:.3f} entropy {metrics.entropy:.3f}")
            if streak >= EARLY_STOP_STREAK and frames >= min_frames:
                stop = True
        writer.writerow(row)
        metrics_file.flush()
        batch_reward, batch_episodes, batch_wins = 0.0, 0, 0

        if updates % checkpoint_every == 0:
            checkpoints.append(_save(cfg, out_dir, agent, bank, frames, updates))
        if frames >= total_frames:
            stop = True

    if not checkpoints or checkpoints[-1].name != f"ckpt_v{agent.version:06d}.pprb":
        checkpoints.append(_save(cfg, out_dir, agent, bank, frames, updates))
    metrics_file.close()
    for gen in workers:
        gen.close()
    return TrainResult(
        out_dir=out_dir, metrics_path=metrics_path,
        checkpoint_paths=checkpoints, frames=frames, updates=updates,
        final_version=agent.version, final_eval_win_rate=last_win_rate)


def record_replays(net: PolicyNet, bank: ProbeBank, env_cfg, out_dir,
                   episodes: int, seed: int, deterministic: bool = False,
                   full_obs: bool = True, model_version: int = 0) -> list:
    """Play episodes and write replay logs with per-frame probe outputs
    and the win head's probability (the teacher-forcing substrate)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = Env(env_cfg)
    rng = np.random.default_rng(derive_seed(seed, "replay-actions"))
    paths = []
    for i in range(episodes):
        episode_seed = derive_seed(seed, "replay-episode", i)
        path = out_dir / f"replay_{i:04d}.jsonl"
        obs = env.reset(episode_seed=episode_seed)
        state = net.initial_state(1)
        with ReplayWriter(path, env_cfg, episode_seed, model_version,
                          full_obs=full_obs) as wr:
            while True:
                action, _, _, _, state = net.act(
                    obs.vector, obs.type_ids, state,
                    rng=rng, deterministic=deterministic)
                res = env.step(action)
                with nn.no_grad():
                    outputs = bank.forward(state.h.data)
                probes = {k: float(v.data[0]) for k, v in outputs.items()}
                wr.append_frame(obs.frame_index, obs, action,
                                res.events.reward, res.events,
                                probes=probes, win_prob=probes.get("win"))
                obs = res.observation
                if res.done:
                    break
        paths.append(path)
    return paths
