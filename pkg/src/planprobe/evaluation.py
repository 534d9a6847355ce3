"""Probe quality measurement: threshold selection with a matching
horizon derived from the label decay law, frame-level F1, earliest
true-positive lead times, and cross-checkpoint win-probability replay.

The matching rule: a positive prediction at frame t is correct when the
event lands within [t, t + H) where H = horizon_of(theta, gamma) — the
farthest distance whose ideal label still clears the threshold. An
oracle that outputs the ideal labels scores F1 = 1.0 under this rule,
which is the property pinning the convention.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import PolicyNet
from .config import derive_seed
from .env import Env, EnvConfig, observation_digest
from .errors import (CompatibilityError, DataError, DegenerateDataError,
                     DomainError, UsageError)
from .persistence import Replay, load_checkpoint
from .probes import ProbeBank, default_head_specs, extract_track
from . import nn


def horizon_of(theta: float, gamma: float) -> int:
    """Frames of lookahead implied by threshold theta under decay gamma."""
    if not (0.0 < theta < 1.0):
        raise DomainError(f"theta must be in (0, 1), got {theta}")
    if not (0.0 < gamma < 1.0):
        raise DomainError(f"gamma must be in (0, 1) for a finite horizon, "
                          f"got {gamma}")
    return math.ceil(math.log(theta) / math.log(gamma))


def window_truth(event_frames, length: int, horizon: int) -> np.ndarray:
    """truth[t] = 1 iff some event lands in [t, t + horizon)."""
    truth = np.zeros(length, dtype=bool)
    for e in event_frames:
        lo = max(0, e - horizon + 1)
        truth[lo:e + 1] = True
    return truth


def sustained_runs(above: np.ndarray, debounce: int) -> list:
    """[start, end) spans of consecutive True at least debounce long."""
    runs = []
    start = None
    for t, flag in enumerate(above):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            if t - start >= debounce:
                runs.append((start, t))
            start = None
    if start is not None and len(above) - start >= debounce:
        runs.append((start, len(above)))
    return runs


def _confusion(scores_by_ep, events_by_ep, theta, horizon):
    tp = fp = fn = 0
    for scores, events in zip(scores_by_ep, events_by_ep):
        truth = window_truth(events, len(scores), horizon)
        pred = scores > theta
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


@dataclass
class ThresholdReport:
    head: str
    theta: float
    horizon: int
    precision: float
    recall: float
    f1: float
    baseline_f1: float  # constant always-positive classifier on the same truth
    positive_rate: float
    eval_frames: int
    tp: int = 0
    fp: int = 0
    fn: int = 0


def select_threshold(scores_heldout, events_heldout, scores_eval, events_eval,
                     gamma: float, head: str = "", quantiles: int = 64,
                     horizon_cap: int = 150) -> ThresholdReport:
    """theta maximizing F1 on the held-out split, scanned over score
    quantiles; the report's metrics come from the disjoint eval split."""
    if len(scores_heldout) != len(events_heldout):
        raise UsageError("held-out scores/events length mismatch")
    if not any(len(e) > 0 for e in events_heldout):
        raise DegenerateDataError(
            f"head {head!r}: no positive events in held-out split")
    pool = np.concatenate([np.asarray(s) for s in scores_heldout])
    qs = np.linspace(0.0, 1.0, quantiles)
    cand = np.unique(np.clip(np.quantile(pool, qs), 1e-9, 1.0 - 1e-9))
    best = None
    for theta in cand:
        horizon = min(horizon_of(float(theta), gamma), horizon_cap)
        _, _, f1 = f1_from_counts(
            *_confusion(scores_heldout, events_heldout, theta, horizon))
        if best is None or f1 > best[0] + 1e-15:
            best = (f1, float(theta), horizon)
    _, theta, horizon = best
    tp, fp, fn = _confusion(scores_eval, events_eval, theta, horizon)
    precision, recall, f1 = f1_from_counts(tp, fp, fn)
    frames = int(sum(len(s) for s in scores_eval))
    positives = int(sum(window_truth(e, len(s), horizon).sum()
                        for s, e in zip(scores_eval, events_eval)))
    prior = positives / frames if frames else 0.0
    baseline_f1 = 2 * prior / (1 + prior) if prior > 0 else 0.0
    return ThresholdReport(head=head, theta=theta, horizon=horizon,
                           precision=precision, recall=recall, f1=f1,
                           baseline_f1=baseline_f1, positive_rate=prior,
                           eval_frames=frames, tp=tp, fp=fp, fn=fn)


def pool_reports(reports: list, head: str = "pooled") -> ThresholdReport:
    """Micro-pool per-head reports into one: confusion counts summed, the
    baseline recomputed from the pooled positive rate. Each constituent
    keeps its own theta; the pooled theta/horizon are reported as 0."""
    if not reports:
        raise UsageError("pool_reports needs at least one report")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    frames = sum(r.eval_frames for r in reports)
    positives = sum(round(r.positive_rate * r.eval_frames) for r in reports)
    precision, recall, f1 = f1_from_counts(tp, fp, fn)
    prior = positives / frames if frames else 0.0
    baseline_f1 = 2 * prior / (1 + prior) if prior > 0 else 0.0
    return ThresholdReport(head=head, theta=0.0, horizon=0,
                           precision=precision, recall=recall, f1=f1,
                           baseline_f1=baseline_f1, positive_rate=prior,
                           eval_frames=frames, tp=tp, fp=fp, fn=fn)


@dataclass
class LeadTimeDensity:
    head: str
    theta: float
    horizon: int
    leads: np.ndarray  # one entry per matched event, in frames
    matched: int
    unmatched: int

    def median(self) -> float:
        if self.matched == 0:
            return float("nan")
        return float(np.median(self.leads))


def leadtime_density(scores_by_ep, events_by_ep, theta: float, gamma: float,
                     head: str = "", debounce: int = 3,
                     horizon_cap: int = 150) -> LeadTimeDensity:
    """Lead time per event: event frame minus the first frame of the
    earliest sustained above-threshold run that covers it, capped at the
    horizon. Events no run covers are counted as unmatched."""
    horizon = min(horizon_of(theta, gamma), horizon_cap)
    leads = []
    unmatched = 0
    for scores, events in zip(scores_by_ep, events_by_ep):
        runs = sustained_runs(np.asarray(scores) > theta, debounce)
        for e in events:
            window_lo = e - horizon + 1
            hit = None
            for s, end in runs:
                if s <= e and end - 1 >= window_lo:
                    hit = s
                    break
            if hit is None:
                unmatched += 1
            else:
                leads.append(min(e - hit, horizon - 1))
    leads = np.array(leads, dtype=np.int64)
    return LeadTimeDensity(head=head, theta=theta, horizon=horizon,
                           leads=leads, matched=len(leads),
                           unmatched=unmatched)


def pooled_leadtime(traces, heads, gamma: float, horizon_cap: int = 150,
                    debounce: int = 3, head: str = "pooled") -> LeadTimeDensity:
    """Lead times pooled over several heads at the fixed operating point
    theta = gamma**horizon_cap (the label value of an event exactly
    horizon_cap frames out). An F1-optimal theta moves with each
    checkpoint's score distribution and drags the lead ceiling with it,
    so cross-checkpoint comparisons use this fixed theta instead."""
    theta = gamma ** horizon_cap
    parts = [leadtime_density([t.scores[name] for t in traces],
                              [t.event_frames[name] for t in traces],
                              theta, gamma, head=name, debounce=debounce,
                              horizon_cap=horizon_cap)
             for name in heads]
    leads = (np.concatenate([p.leads for p in parts]) if parts
             else np.array([], dtype=np.int64))
    return LeadTimeDensity(head=head, theta=theta, horizon=horizon_cap,
                           leads=leads, matched=int(sum(p.matched for p in parts)),
                           unmatched=int(sum(p.unmatched for p in parts)))


# -- episode generation for probe evaluation ---------------------------------------


@dataclass
class EpisodeTrace:
    """One evaluated episode: per-head score series and event frames."""

    scores: dict
    event_frames: dict
    won: bool
    frames: int
    hiddens: np.ndarray = field(repr=False, default=None)
    events: list = field(repr=False, default=None)


def run_probe_episodes(net: PolicyNet, bank: ProbeBank, env_cfg: EnvConfig,
                       episodes: int, seed: int, heads=None,
                       deterministic: bool = False,
                       keep_states: bool = False) -> list:
    """Self-play episodes scored by the probe bank. Hidden states are
    batched per episode through the bank, so scores are the same values
    the per-frame path would produce."""
    env = Env(env_cfg)
    rng = np.random.default_rng(derive_seed(seed, "probe-eval-actions"))
    heads = list(heads) if heads is not None else bank.head_names()
    traces = []
    for i in range(episodes):
        obs = env.reset(episode_seed=derive_seed(seed, "probe-eval-episode", i))
        state = net.initial_state(1)
        hiddens, events = [], []
        won = False
        while True:
            action, _, _, _, state = net.act(
                obs.vector, obs.type_ids, state,
                rng=rng, deterministic=deterministic)
            res = env.step(action)
            hiddens.append(state.h.data[0])
            events.append(res.events)
            won = won or bool(res.events.win)
            obs = res.observation
            if res.done:
                break
        H = np.stack(hiddens)
        with nn.no_grad():
            outputs = bank.forward(H, heads=heads)
        scores = {name: out.data.copy() for name, out in outputs.items()}
        spec_by_name = bank.by_name
        event_frames = {}
        for name in heads:
            track = extract_track(events, spec_by_name[name].target)
            event_frames[name] = np.nonzero(track)[0].tolist()
        traces.append(EpisodeTrace(
            scores=scores, event_frames=event_frames, won=won,
            frames=len(events), hiddens=H if keep_states else None,
            events=events if keep_states else None))
    return traces


def split_report(traces_heldout, traces_eval, head: str, gamma: float,
                 quantiles: int = 64, horizon_cap: int = 150) -> ThresholdReport:
    return select_threshold(
        [t.scores[head] for t in traces_heldout],
        [t.event_frames[head] for t in traces_heldout],
        [t.scores[head] for t in traces_eval],
        [t.event_frames[head] for t in traces_eval],
        gamma, head=head, quantiles=quantiles, horizon_cap=horizon_cap)


# -- checkpoint loading -----------------------------------------------------------


def build_from_checkpoint(path, env_cfg: EnvConfig = None):
    """Reconstruct (net, bank, meta) from a checkpoint file."""
    from .agent import PPOConfig

    data = load_checkpoint(path)
    if env_cfg is None:
        env_cfg = EnvConfig()
    if data.meta.get("env_config_hash") != env_cfg.content_hash():
        raise CompatibilityError(
            f"{path}: checkpoint env hash {data.meta.get('env_config_hash')!r} "
            f"does not match the requested env config")
    policy_arrays = {k: v for k, v in data.arrays.items()
                     if not k.startswith("probe/")}
    probe_arrays = {k: v for k, v in data.arrays.items()
                    if k.startswith("probe/")}
    net = PolicyNet(env_cfg, PPOConfig(), seed=0)
    net.load_parameter_arrays(policy_arrays)
    gamma = data.meta.get("probe_gamma", 0.995)
    bank = ProbeBank(default_head_specs(env_cfg, gamma),
                     hidden_width=net.ppo_config.hidden_width)
    bank.load_parameter_arrays(probe_arrays)
    return net, bank, data.meta


def sorted_checkpoints(checkpoint_dir) -> list:
    """Checkpoint paths ascending by model version."""
    paths = sorted(Path(checkpoint_dir).glob("*.pprb"))
    if not paths:
        raise DataError(f"no checkpoints in {checkpoint_dir}")
    versioned = []
    for p in paths:
        meta = load_checkpoint(p).meta
        versioned.append((meta.get("model_version", 0), p))
    versioned.sort(key=lambda t: t[0])
    return [p for _, p in versioned]


# -- win-probability replay ----------------------------------------------------------


def winprob_replay(checkpoint_paths, replay: Replay) -> dict:
    """Teacher-force a recorded game through each checkpoint: feed the
    logged observations to rebuild that checkpoint's hidden states and
    read its win head per frame. Returns {model_version: curve}."""
    header = replay.header
    if not header.get("full_obs"):
        raise DataError("replay lacks full observations; re-record with "
                        "full_obs for teacher-forcing")
    env_cfg = EnvConfig.from_dict(header["env_config"])
    curves = {}
    for path in checkpoint_paths:
        net, bank, meta = build_from_checkpoint(path, env_cfg)
        h = np.zeros((1, net.ppo_config.hidden_width))
        c = np.zeros_like(h)
        probs = []
        for rec in replay.frames:
            if rec.obs_vector is None:
                raise DataError(f"frame {rec.frame}: missing observation")
            vec = np.asarray(rec.obs_vector, dtype=np.float64)
            ids = np.asarray(rec.obs_type_ids, dtype=np.int64)
            if observation_digest(vec, ids) != rec.digest:
                raise DataError(f"frame {rec.frame}: observation digest "
                                "mismatch; replay corrupt or incompatible")
            _, _, h, c = net.step_arrays(vec, ids, h, c)
            # row-at-a-time so the curve is bitwise identical to what the
            # recorder logged for the generating checkpoint
            with nn.no_grad():
                out = bank.forward(h, heads=["win"])
            probs.append(float(out["win"].data[0]))
        curves[int(meta["model_version"])] = np.array(probs)
    return curves


def mad_to_final(curves_by_version: dict) -> list:
    """[(version, mean |curve - final curve|)] ascending by version; the
    final version's row is 0 by construction. Takes {version: [curves]}
    pooled over replays."""
    versions = sorted(curves_by_version)
    final = curves_by_version[versions[-1]]
    rows = []
    for v in versions:
        total = 0.0
        count = 0
        for cur, fin in zip(curves_by_version[v], final):
            total += float(np.abs(cur - fin).sum())
            count += len(cur)
        rows.append((v, total / count if count else 0.0))
    return rows


def brier_score(win_probs: np.ndarray, outcome: int) -> float:
    p = np.asarray(win_probs, dtype=np.float64)
    return float(np.mean((p - float(outcome)) ** 2))


def pooled_brier(curves: list, outcomes: list) -> float:
    num = 0.0
    den = 0
    for curve, outcome in zip(curves, outcomes):
        c = np.asarray(curve, dtype=np.float64)
        num += float(((c - float(outcome)) ** 2).sum())
        den += len(c)
    if den == 0:
        raise UsageError("no frames to score")
    return num / den
