"""Command-line entry points.

Exit codes: 0 success; 2 configuration or usage problems; 3 data,
compatibility, or integrity problems; 4 numeric failures.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn
from .charts import histogram, line_chart
from .config import (RunConfig, apply_seed_override, derive_seed, load_config,
                     write_resolved_config)
from .env import EnvConfig
from .errors import (CompatibilityError, ConfigError, DataError,
                     DegenerateDataError, DomainError, IntegrityError,
                     NumericError, ShapeError, UsageError)
from .evaluation import (build_from_checkpoint, leadtime_density, mad_to_final,
                         pooled_brier, run_probe_episodes, sorted_checkpoints,
                         pool_reports, pooled_leadtime, split_report,
                         winprob_replay)
from .persistence import load_checkpoint, load_replay, write_csv
from .similarity import default_pairs, load_pairs, trajectory, write_similarity_csv
from .trainer import record_replays, train_run

_CONFIG_EXIT = 2
_DATA_EXIT = 3
_NUMERIC_EXIT = 4


def _load_run_config(path) -> RunConfig:
    if path is None:
        return apply_seed_override(RunConfig())
    return load_config(path)


# -- train ------------------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.workers is not None:
        from dataclasses import replace

        cfg = RunConfig(seed=cfg.seed, env=cfg.env, agent=cfg.agent,
                        probes=cfg.probes,
                        slicing=replace(cfg.slicing, workers=args.workers),
                        eval=cfg.eval)
    res = train_run(cfg, args.out, total_frames=args.steps,
                    checkpoint_every=args.checkpoint_every,
                    log=lambda msg: print(msg),
                    min_frames=args.min_frames)
    print(f"trained {res.frames} frames over {res.updates} updates; "
          f"final version {res.final_version}; "
          f"last eval win rate {res.final_eval_win_rate:.3f}")
    print(f"metrics: {res.metrics_path}")
    print(f"checkpoints: {len(res.checkpoint_paths)} in {res.out_dir}")
    if args.replays > 0:
        net, bank, meta = build_from_checkpoint(res.checkpoint_paths[-1], cfg.env)
        paths = record_replays(net, bank, cfg.env, Path(args.out) / "replays",
                               args.replays, seed=derive_seed(cfg.seed, "replays"),
                               model_version=meta["model_version"])
        print(f"recorded {len(paths)} replays")
    return 0


# -- eval-probes ---------------------------------------------------------------------


def _pick_trend_checkpoints(paths, limit: int):
    if limit <= 0 or len(paths) <= limit:
        return list(paths)
    pool = paths[1:] if len(paths) > limit else paths  # drop cold start
    idx = np.linspace(0, len(pool) - 1, limit).round().astype(int)
    return [pool[i] for i in sorted(set(idx.tolist()))]


def _cmd_eval_probes(args) -> int:
    cfg = _load_run_config(args.config)
    episodes = args.episodes or cfg.eval.episodes
    heldout = args.heldout or cfg.eval.heldout_episodes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    paths = _pick_trend_checkpoints(sorted_checkpoints(args.checkpoints),
                                    args.max_checkpoints)
    rows, hist_rows = [], []
    trend_by_head = {}
    for path in paths:
        net, bank, meta = build_from_checkpoint(path, cfg.env)
        version = meta["model_version"]
        heads = args.head or [s.name for s in bank.specs if s.gamma < 1.0]
        held = run_probe_episodes(net, bank, cfg.env, heldout,
                                  derive_seed(cfg.seed, "heldout", version),
                                  heads=heads)
        ev = run_probe_episodes(net, bank, cfg.env, episodes,
                                derive_seed(cfg.seed, "eval", version),
                                heads=heads)
        reps = {}
        for head in heads:
            gamma = bank.by_name[head].gamma
            try:
                rep = split_report(held, ev, head, gamma,
                                   quantiles=cfg.eval.threshold_quantiles,
                                   horizon_cap=cfg.eval.horizon_cap)
            except DegenerateDataError as e:
                print(f"v{version} {head}: skipped ({e})")
                continue
            reps[head] = rep
            density = leadtime_density(
                [t.scores[head] for t in ev],
                [t.event_frames[head] for t in ev],
                rep.theta, gamma, head=head, debounce=cfg.eval.debounce,
                horizon_cap=cfg.eval.horizon_cap)
            med = density.median()
            rows.append({
                "version": version, "head": head,
                "theta": f"{rep.theta:.6f}", "horizon": rep.horizon,
                "precision": f"{rep.precision:.4f}",
                "recall": f"{rep.recall:.4f}", "f1": f"{rep.f1:.4f}",
                "baseline_f1": f"{rep.baseline_f1:.4f}",
                "median_lead": f"{med:.1f}",
                "matched": density.matched, "unmatched": density.unmatched,
            })
            for lead in density.leads:
                hist_rows.append({"version": version, "head": head,
                                  "lead": int(lead)})
            print(f"v{version} {head}: F1 {rep.f1:.3f} "
                  f"(baseline {rep.baseline_f1:.3f}) "
                  f"median lead {med:.1f} of horizon {rep.horizon}")
        # trend medians use the fixed label-law theta so versions share a ruler
        for head in heads:
            if head not in reps:
                continue
            gamma = bank.by_name[head].gamma
            fixed = pooled_leadtime(ev, [head], gamma,
                                    horizon_cap=cfg.eval.horizon_cap,
                                    debounce=cfg.eval.debounce, head=head)
            trend_by_head.setdefault(head, []).append((version, fixed.median()))
        towers = [h for h in heads if h.startswith("tower_destroyed") and h in reps]
        if towers:
            gamma = bank.by_name[towers[0]].gamma
            pooled_rep = pool_reports([reps[h] for h in towers], head="tower_pooled")
            pooled_lead = pooled_leadtime(ev, towers, gamma,
                                          horizon_cap=cfg.eval.horizon_cap,
                                          debounce=cfg.eval.debounce,
                                          head="tower_pooled")
            med = pooled_lead.median()
            trend_by_head.setdefault("tower_pooled", []).append((version, med))
            rows.append({
                "version": version, "head": "tower_pooled",
                "theta": f"{pooled_lead.theta:.6f}",
                "horizon": pooled_lead.horizon,
                "precision": f"{pooled_rep.precision:.4f}",
                "recall": f"{pooled_rep.recall:.4f}",
                "f1": f"{pooled_rep.f1:.4f}",
                "baseline_f1": f"{pooled_rep.baseline_f1:.4f}",
                "median_lead": f"{med:.1f}",
                "matched": pooled_lead.matched,
                "unmatched": pooled_lead.unmatched,
            })
            for lead in pooled_lead.leads:
                hist_rows.append({"version": version, "head": "tower_pooled",
                                  "lead": int(lead)})
            print(f"v{version} tower_pooled: F1 {pooled_rep.f1:.3f} "
                  f"(baseline {pooled_rep.baseline_f1:.3f}) "
                  f"median lead {med:.1f} at theta {pooled_lead.theta:.3f}")
    write_csv(out / "probe_metrics.csv", rows,
              ["version", "head", "theta", "horizon", "precision", "recall",
               "f1", "baseline_f1", "median_lead", "matched", "unmatched"])
    write_csv(out / "leadtime_hist.csv", hist_rows, ["version", "head", "lead"])
    series = {head: [(v, m) for v, m in pts if np.isfinite(m)]
              for head, pts in trend_by_head.items()}
    series = {k: v for k, v in series.items() if v}
    if series:
        line_chart(series, out / "leadtime_trend.svg",
                   "Median true-positive lead time by version",
                   x_label="model version", y_label="frames")
    final_leads = [r["lead"] for r in hist_rows
                   if r["version"] == rows[-1]["version"]] if rows else []
    if final_leads:
        histogram(final_leads, out / "leadtime_hist.svg",
                  "Lead-time density at final version", x_label="frames")
    return 0


# -- similarity ----------------------------------------------------------------------


def _cmd_similarity(args) -> int:
    cfg = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    pairs = load_pairs(args.pairs) if args.pairs else default_pairs(cfg.env)
    paths = sorted_checkpoints(args.checkpoints)
    traj = trajectory(paths, pairs, baseline_samples=args.baseline_samples,
                      seed=cfg.seed)
    write_similarity_csv(traj, out / "similarity.csv")
    series = {name: list(zip(traj.versions, traj.cosines[name]))
              for name in traj.pair_names}
    series["random baseline"] = list(zip(traj.versions, traj.baseline_mean))
    line_chart(series, out / "similarity.svg",
               "Embedding cosine similarity across training",
               x_label="model version", y_label="cosine")
    first, last = 0, len(traj.versions) - 1
    print(f"separation at v{traj.versions[first]}: {traj.separation(first):+.4f}")
    print(f"separation at v{traj.versions[last]}: {traj.separation(last):+.4f}")
    return 0


# -- annotate-replay -----------------------------------------------------------------


def _annotation_rows(bank, scores, theta_by_head, horizon):
    rows = []
    n = len(next(iter(scores.values()))) if scores else 0
    for t in range(n):
        for head, series in scores.items():
            s = float(series[t])
            theta = theta_by_head[head]
            if s <= theta:
                continue
            if head == "kill":
                kind = "fight"
            elif head == "death":
                kind = "flight"
            elif head.startswith("tower_destroyed"):
                kind = f"target:{head}"
            elif head.startswith("reach_region"):
                kind = f"target:{head}"
            else:
                kind = head
            rows.append({"frame": t, "head": head, "score": f"{s:.6f}",
                         "kind": kind, "horizon": horizon})
    return rows


def _cmd_annotate_replay(args) -> int:
    replay = load_replay(args.replay)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env_cfg = EnvConfig.from_dict(replay.header["env_config"])
    net, bank, meta = build_from_checkpoint(args.checkpoint, env_cfg)
    if not replay.header.get("full_obs"):
        raise DataError("replay lacks full observations; cannot recompute "
                        "probe outputs")
    h = np.zeros((1, net.ppo_config.hidden_width))
    c = np.zeros_like(h)
    per_frame = []
    from .env import observation_digest

    for rec in replay.frames:
        vec = np.asarray(rec.obs_vector, dtype=np.float64)
        ids = np.asarray(rec.obs_type_ids, dtype=np.int64)
        if observation_digest(vec, ids) != rec.digest:
            raise DataError(f"frame {rec.frame}: observation digest mismatch")
        _, _, h, c = net.step_arrays(vec, ids, h, c)
        # row-at-a-time forward so outputs are bitwise comparable to the
        # values the recorder logged
        with nn.no_grad():
            head_out = bank.forward(h)
        per_frame.append({k: float(v.data[0]) for k, v in head_out.items()})
    scores = {k: np.array([fr[k] for fr in per_frame])
              for k in per_frame[0]} if per_frame else {}

    generating = meta["model_version"] == replay.header.get("model_version")
    if generating and replay.frames and replay.frames[0].probes is not None:
        for i, rec in enumerate(replay.frames):
            for head, logged in rec.probes.items():
                got = float(scores[head][i])
                if got != logged:
                    raise DataError(
                        f"frame {rec.frame} head {head}: recomputed {got!r} "
                        f"!= logged {logged!r}")
        print("self-consistency: recomputed outputs match logged outputs "
              "exactly")

    horizon = args.horizon
    theta_by_head = {}
    for spec in bank.specs:
        theta_by_head[spec.name] = (spec.gamma ** horizon
                                    if spec.gamma < 1.0 else 0.5)
    rows = _annotation_rows(
        bank, {k: v for k, v in scores.items()
               if k in ("kill", "death") or k.startswith("tower_destroyed")
               or k.startswith("reach_region")},
        theta_by_head, horizon)
    write_csv(out / "annotations.csv", rows,
              ["frame", "head", "score", "kind", "horizon"])
    chart_heads = ["kill", "death", "win", "tower_destroyed_0"]
    series = {h2: list(enumerate(scores[h2])) for h2 in chart_heads
              if h2 in scores}
    line_chart(series, out / "annotations.svg",
               "Probe outputs over one replay", x_label="frame",
               y_label="probability")
    print(f"{len(rows)} annotation rows over {len(replay.frames)} frames "
          f"(horizon {horizon})")
    return 0


# -- winprob-replay ------------------------------------------------------------------


def _cmd_winprob_replay(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    replay_paths = sorted(Path(args.replays).glob("*.jsonl")) \
        if Path(args.replays).is_dir() else [Path(args.replays)]
    if not replay_paths:
        raise DataError(f"no replays found in {args.replays}")
    ckpts = sorted_checkpoints(args.checkpoints)
    curves_by_version = {}
    outcomes = []
    for rp in replay_paths:
        replay = load_replay(rp)
        outcome = int(any(fr.events.get("win", 0) for fr in replay.frames))
        outcomes.append(outcome)
        for version, curve in winprob_replay(ckpts, replay).items():
            curves_by_version.setdefault(version, []).append(curve)
    for version, curves in sorted(curves_by_version.items()):
        rows = []
        for ri, curve in enumerate(curves):
            for t, p in enumerate(curve):
                rows.append({"replay": ri, "frame": t, "win_prob": f"{p:.8f}"})
        write_csv(out / f"winprob_{version:06d}.csv", rows,
                  ["replay", "frame", "win_prob"])
    trend = mad_to_final(curves_by_version)
    write_csv(out / "winprob_trend.csv",
              [{"version": v, "mad_to_final": f"{m:.6f}"} for v, m in trend],
              ["version", "mad_to_final"])
    final_version = max(curves_by_version)
    brier = pooled_brier(curves_by_version[final_version], outcomes)
    line_chart({"MAD to final": trend}, out / "winprob_trend.svg",
               "Win-probability deviation from final checkpoint",
               x_label="model version", y_label="mean abs deviation")
    for v, m in trend:
        print(f"v{v}: MAD to final {m:.4f}")
    print(f"final-version Brier score: {brier:.4f} "
          f"(constant-0.5 baseline: 0.25)")
    return 0


# -- grad-check ----------------------------------------------------------------------


def _grad_check_suite():
    from .nn import LstmCellParams, LstmState, Tensor

    rng = np.random.default_rng(0)
    reports = []

    w = Tensor(rng.normal(size=(6, 4)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=(4,)) * 0.1, requires_grad=True)
    x = rng.normal(size=(3, 6))
    reports.append(nn.grad_check(
        lambda: nn.tanh(nn.dense(Tensor(x), w, b)).sum(),
        {"w": w, "b": b}, name="dense-tanh"))

    logits_w = Tensor(rng.normal(size=(5, 7)) * 0.5, requires_grad=True)
    y = rng.integers(0, 7, size=4)
    xs = rng.normal(size=(4, 5))

    def nll():
        lp = nn.log_softmax(nn.matmul(Tensor(xs), logits_w), axis=1)
        return -(nn.gather(lp, y).sum())

    reports.append(nn.grad_check(nll, {"w": logits_w}, name="softmax-nll"))

    hid = 5
    p = LstmCellParams(
        Tensor(rng.normal(size=(hid, 4 * hid)) * 0.4, requires_grad=True),
        Tensor(rng.normal(size=(hid, 4 * hid)) * 0.4, requires_grad=True),
        Tensor(rng.normal(size=(4 * hid,)) * 0.1, requires_grad=True))
    x_seq = rng.normal(size=(16, 2, hid))

    def lstm_cell_loss():
        state = LstmState(Tensor(np.zeros((2, hid))), Tensor(np.zeros((2, hid))))
        out, state = nn.lstm_cell(Tensor(x_seq[0]), state, p)
        return out.sum()

    reports.append(nn.grad_check(
        lstm_cell_loss, {"w_ih": p.w_ih, "w_hh": p.w_hh, "b": p.b},
        name="lstm-cell"))

    def bptt_window_loss():
        state = LstmState(Tensor(np.zeros((2, hid))), Tensor(np.zeros((2, hid))))
        total = None
        for t in range(16):
            out, state = nn.lstm_cell(Tensor(x_seq[t]), state, p)
            part = (out * out).sum()
            total = part if total is None else total + part
        return total

    reports.append(nn.grad_check(
        bptt_window_loss, {"w_ih": p.w_ih, "w_hh": p.w_hh, "b": p.b},
        name="bptt-16-window"))

    from .probes import ProbeBank, ProbeHeadSpec

    bank = ProbeBank([ProbeHeadSpec("m", "kill", "Milestone", 0.995),
                      ProbeHeadSpec("r", "gold_gain", "RewardSum", 0.995)],
                     hidden_width=hid, seed=1)
    for key, t in bank.params.items():
        t.data = rng.normal(size=t.data.shape) * 0.4
    hmat = rng.normal(size=(6, hid))
    ym = rng.uniform(0.1, 0.9, size=6)
    yr = rng.normal(size=6)

    def probe_loss():
        out = bank.forward(hmat)
        return (bank.head_loss(bank.by_name["m"], out["m"], ym)
                + bank.head_loss(bank.by_name["r"], out["r"], yr))

    reports.append(nn.grad_check(probe_loss, bank.params, name="probe-heads"))

    emb = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
    ids = rng.integers(0, 8, size=(4, 2))

    def embed_loss():
        e = nn.embedding_lookup(emb, ids)
        return (e * e).sum()

    reports.append(nn.grad_check(embed_loss, {"embed": emb},
                                 name="embedding-lookup"))
    return reports


def _cmd_grad_check(args) -> int:
    reports = _grad_check_suite()
    failed = 0
    for r in reports:
        print(r.line())
        failed += 0 if r.passed else 1
    if failed:
        raise NumericError(f"{failed} gradient check(s) failed")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="planprobe",
        description="Train a recurrent PPO agent on a lane-pushing "
                    "gridworld and decode its plans with hidden-state "
                    "probes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="JSON run config (defaults used if omitted)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--steps", type=int, default=2_000_000,
                   help="frame budget (0 writes only the version-0 checkpoint)")
    t.add_argument("--workers", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=50,
                   help="updates between checkpoints")
    t.add_argument("--replays", type=int, default=0,
                   help="record this many replays with the final model")
    t.add_argument("--min-frames", type=int, default=0,
                   help="keep training at least this many frames before the "
                        "win-rate early stop may fire")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval-probes", help="threshold/F1/lead-time reports")
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--heldout", type=int, default=None)
    e.add_argument("--head", action="append", default=None,
                   help="restrict to these heads (repeatable)")
    e.add_argument("--max-checkpoints", type=int, default=3,
                   help="evaluate at most this many versions (0 = all)")
    e.set_defaults(fn=_cmd_eval_probes)

    s = sub.add_parser("similarity", help="embedding cosine trajectories")
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--pairs", default=None, help="JSON pair list")
    s.add_argument("--baseline-samples", type=int, default=1000)
    s.set_defaults(fn=_cmd_similarity)

    a = sub.add_parser("annotate-replay",
                       help="mark fight/flight and predicted targets")
    a.add_argument("--replay", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--horizon", type=int, default=60,
                   help="annotation horizon in frames")
    a.set_defaults(fn=_cmd_annotate_replay)

    w = sub.add_parser("winprob-replay",
                       help="teacher-force replays across checkpoints")
    w.add_argument("--replays", required=True, help="replay file or directory")
    w.add_argument("--checkpoints", required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(fn=_cmd_winprob_replay)

    g = sub.add_parser("grad-check", help="finite-difference verification")
    g.set_defaults(fn=_cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _CONFIG_EXIT
    except (DataError, CompatibilityError, IntegrityError,
            DegenerateDataError, DomainError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _DATA_EXIT
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return _NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
