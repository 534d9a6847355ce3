"""Cosine-similarity trajectories of embedding-table rows across
training checkpoints, with a random-pair baseline.

The interesting comparison is relative: functionally-similar ability
pairs start indistinguishable from random pairs and should separate
from the baseline as training progresses.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import NUM_ENTITY_TYPES, EnvConfig
from .errors import CompatibilityError, ConfigError, DataError, DomainError
from .persistence import load_checkpoint, write_csv

SIMILAR, CONTROL = "similar", "control"


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


@dataclass(frozen=True)
class Pair:
    name: str
    row_a: int
    row_b: int
    group: str  # similar | control

    def validate(self, rows: int) -> None:
        for r in (self.row_a, self.row_b):
            if not (0 <= r < rows):
                raise ConfigError(f"pair {self.name!r}: row {r} outside "
                                  f"table of {rows} rows")
        if self.row_a == self.row_b:
            raise ConfigError(f"pair {self.name!r}: rows must differ")
        if self.group not in (SIMILAR, CONTROL):
            raise ConfigError(f"pair {self.name!r}: unknown group "
                              f"{self.group!r}")


@dataclass(frozen=True)
class PairList:
    pairs: tuple

    def validate(self, rows: int) -> None:
        names = [p.name for p in self.pairs]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate pair names")
        for p in self.pairs:
            p.validate(rows)

    def group(self, tag: str) -> list:
        return [p for p in self.pairs if p.group == tag]


def default_pairs(env_cfg: EnvConfig) -> PairList:
    """Ability pairs sharing a semantic class are ground-truth similar;
    cross-class pairs are controls."""
    by_class = {}
    for a in env_cfg.ability_set:
        by_class.setdefault(a.semantic_class, []).append(a)
    pairs = []
    for cls, members in sorted(by_class.items()):
        if cls == "noop-filler" or len(members) < 2:
            continue
        for a, b in zip(members, members[1:]):
            pairs.append(Pair(
                name=f"{cls}:{a.name}+{b.name}",
                row_a=NUM_ENTITY_TYPES + a.ability_id,
                row_b=NUM_ENTITY_TYPES + b.ability_id,
                group=SIMILAR))
    classes = [m for _, m in sorted(by_class.items())]
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            a, b = classes[i][0], classes[j][0]
            pairs.append(Pair(
                name=f"control:{a.name}+{b.name}",
                row_a=NUM_ENTITY_TYPES + a.ability_id,
                row_b=NUM_ENTITY_TYPES + b.ability_id,
                group=CONTROL))
    return PairList(tuple(pairs))


def load_pairs(path) -> PairList:
    import json

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read pair list {path}: {e}") from e
    if not isinstance(doc, list):
        raise ConfigError("pair list must be a JSON array")
    pairs = []
    for item in doc:
        extra = set(item) - {"name", "row_a", "row_b", "group"}
        if extra:
            raise ConfigError(f"unknown pair key {sorted(extra)[0]!r}")
        try:
            pairs.append(Pair(item["name"], int(item["row_a"]),
                              int(item["row_b"]), item.get("group", SIMILAR)))
        except KeyError as e:
            raise ConfigError(f"pair missing field {e}") from e
    return PairList(tuple(pairs))


@dataclass
class SimilarityTrajectory:
    versions: list
    pair_names: list
    pair_groups: dict
    cosines: dict  # pair name -> list aligned with versions
    baseline_mean: list
    baseline_std: list

    def separation(self, index: int) -> float:
        """mean(similar-pair cosines) - baseline mean at one version."""
        sim = [self.cosines[n][index] for n in self.pair_names
               if self.pair_groups[n] == SIMILAR]
        if not sim:
            raise DomainError("no similar pairs configured")
        return float(np.mean(sim) - self.baseline_mean[index])


def _baseline_index_pairs(rows: int, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.integers(0, rows, size=samples)
    b = rng.integers(0, rows - 1, size=samples)
    b = np.where(b >= a, b + 1, b)  # distinct partner, uniform
    return np.stack([a, b], axis=1)


def trajectory(checkpoint_paths, pairs: PairList, baseline_samples: int = 1000,
               seed: int = 0) -> SimilarityTrajectory:
    """Per-checkpoint cosines for every configured pair plus the
    mean/std over a fixed random sample of distinct row pairs. The same
    sampled pairs are reused at every version so the baseline is
    comparable across time."""
    paths = list(checkpoint_paths)
    if not paths:
        raise DataError("need at least one checkpoint")
    loaded = []
    for p in paths:
        data = load_checkpoint(p)
        if "embed" not in data.arrays:
            raise CompatibilityError(f"{p}: checkpoint has no embedding table")
        loaded.append((int(data.meta.get("model_version", 0)),
                       data.arrays["embed"]))
    loaded.sort(key=lambda t: t[0])
    rows = loaded[0][1].shape[0]
    pairs.validate(rows)
    idx = _baseline_index_pairs(rows, baseline_samples, seed)

    versions, base_mean, base_std = [], [], []
    cosines = {p.name: [] for p in pairs.pairs}
    for version, table in loaded:
        if table.shape[0] != rows:
            raise CompatibilityError("embedding table size changed across "
                                     "checkpoints")
        versions.append(version)
        for p in pairs.pairs:
            cosines[p.name].append(cosine(table[p.row_a], table[p.row_b]))
        norms = np.linalg.norm(table, axis=1)
        vals = []
        for a, b in idx:
            if norms[a] == 0.0 or norms[b] == 0.0:
                continue
            vals.append(float(np.dot(table[a], table[b]) / (norms[a] * norms[b])))
        vals = np.array(vals)
        base_mean.append(float(vals.mean()))
        base_std.append(float(vals.std()))
    return SimilarityTrajectory(
        versions=versions, pair_names=[p.name for p in pairs.pairs],
        pair_groups={p.name: p.group for p in pairs.pairs},
        cosines=cosines, baseline_mean=base_mean, baseline_std=base_std)


def write_similarity_csv(traj: SimilarityTrajectory, path) -> None:
    """One row per (version, pair) plus one baseline row per version."""
    rows = []
    for i, v in enumerate(traj.versions):
        for name in traj.pair_names:
            rows.append({"version": v, "pair": name,
                         "group": traj.pair_groups[name],
                         "cosine": f"{traj.cosines[name][i]:.10f}",
                         "baseline_std": ""})
        rows.append({"version": v, "pair": "random_baseline",
                     "group": "baseline",
                     "cosine": f"{traj.baseline_mean[i]:.10f}",
                     "baseline_std": f"{traj.baseline_std[i]:.10f}"})
    write_csv(path, rows, ["version", "pair", "group", "cosine", "baseline_std"])
