"""Deterministic lane-pushing gridworld.

One learning agent pushes a diagonal lane from its base toward the enemy
base, past scripted towers, while scripted enemy creeps march the other
way. Every frame emits binary milestone events (region entries, tower
kills, creep kills, deaths, the win) and scalar reward components; these
event tracks are the supervision source for the probe heads.

Rules summary:
- the enemy base is invulnerable while any tower stands, so every win
  passes through all tower kills;
- strikes auto-target the nearest enemy within range 4, which outranges
  towers (range 3): standing at exactly distance 4 is the safe sniping
  spot the agent has to discover;
- creeps block movement and chip at whatever is adjacent; dashes jump
  diagonally over them toward the enemy base;
- the agent's own base defends itself but slowly loses to unattended
  creep waves, and its destruction loses the episode.

Determinism: the only randomness is creep spawn-cell jitter, drawn from
a per-episode generator derived from (seed, episode index). Spawn frames
are periodic, so the draw sequence never depends on agent actions, and
identical (config, seed, actions) replays bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, UsageError

# action ids
NOOP, MOVE_N, MOVE_S, MOVE_E, MOVE_W = 0, 1, 2, 3, 4
ABILITY_BASE = 5  # action id of ability 0; abilities are contiguous

# embedding-table type ids; ability rows start after these
TYPE_AGENT_BASE, TYPE_ENEMY_BASE, TYPE_TOWER, TYPE_CREEP = 0, 1, 2, 3
NUM_ENTITY_TYPES = 4

_MOVE_DELTA = {MOVE_N: (0, 1), MOVE_S: (0, -1), MOVE_E: (1, 0), MOVE_W: (-1, 0)}


@dataclass(frozen=True)
class AbilityDef:
    ability_id: int
    name: str
    semantic_class: str  # heal | strike | dash | noop-filler
    magnitude: float
    cooldown: int


def default_abilities() -> tuple[AbilityDef, ...]:
    """Three functionally-similar pairs plus four inert fillers."""
    return (
        AbilityDef(0, "heal_small", "heal", 3.0, 16),
        AbilityDef(1, "heal_large", "heal", 8.0, 40),
        AbilityDef(2, "strike_weak", "strike", 1.0, 3),
        AbilityDef(3, "strike_strong", "strike", 3.0, 10),
        AbilityDef(4, "dash_short", "dash", 2.0, 8),
        AbilityDef(5, "dash_long", "dash", 4.0, 20),
        AbilityDef(6, "taunt", "noop-filler", 0.0, 1),
        AbilityDef(7, "ward", "noop-filler", 0.0, 1),
        AbilityDef(8, "glyph", "noop-filler", 0.0, 1),
        AbilityDef(9, "salute", "noop-filler", 0.0, 1),
    )


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 16
    num_towers: int = 3
    num_regions: int = 4
    max_episode_len: int = 1024
    respawn_delay: int = 20
    creep_spawn_period: int = 32
    rng_seed: int = 0
    ability_set: tuple[AbilityDef, ...] = field(default_factory=default_abilities)
    # combat tuning; all magnitudes documented in the config reference
    agent_max_hp: int = 20
    strike_range: int = 4
    tower_hp: int = 20
    tower_range: int = 3
    tower_damage: int = 1
    tower_attack_period: int = 2
    creep_hp: int = 2
    creep_damage: int = 1
    creep_attack_period: int = 2
    creep_move_period: int = 3
    creep_base_attack_period: int = 4
    creep_base_damage: int = 2
    max_live_creeps: int = 12
    agent_base_hp: int = 30
    enemy_base_hp: int = 24
    base_defense_range: int = 1
    base_defense_damage: int = 1
    # reward magnitudes; structural objectives must dominate creep farming
    # or the policy settles into defending its own base forever
    gold_per_damage: float = 0.1
    tower_bounty: float = 4.0
    base_bounty: float = 16.0
    creep_gold: float = 0.2
    creep_kill_reward: float = 0.1
    region_bounty: float = 1.0
    death_penalty: float = -2.0
    nearest_creeps_observed: int = 4

    def validate(self) -> None:
        if self.grid_size < 8:
            raise ConfigError("grid_size must be ≥ 8")
        if self.num_towers < 1:
            raise ConfigError("num_towers must be ≥ 1")
        if self.num_regions < 1:
            raise ConfigError("num_regions must be ≥ 1")
        if self.max_episode_len <= 256:
            raise ConfigError("max_episode_len must exceed 256 (4 default slices)")
        if self.respawn_delay < 1:
            raise ConfigError("respawn_delay must be ≥ 1")
        if self.creep_spawn_period < 1:
            raise ConfigError("creep_spawn_period must be ≥ 1")
        ids = [a.ability_id for a in self.ability_set]
        if ids != list(range(len(ids))):
            raise ConfigError("ability_set ids must be dense from 0")
        for a in self.ability_set:
            if a.cooldown < 1:
                raise ConfigError(f"ability {a.name} cooldown must be ≥ 1")

    @property
    def num_abilities(self) -> int:
        return len(self.ability_set)

    @property
    def num_actions(self) -> int:
        return ABILITY_BASE + self.num_abilities

    @property
    def embedding_rows(self) -> int:
        return NUM_ENTITY_TYPES + self.num_abilities

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "ability_set":
                v = [vars(a) for a in v]
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        kw = dict(d)
        if "ability_set" in kw:
            kw["ability_set"] = tuple(AbilityDef(**a) for a in kw["ability_set"])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def region_of(position: tuple[int, int], grid_size: int, num_regions: int) -> int:
    """Axis-aligned block partition. Perfect squares tile s×s; other
    counts fall back to vertical strips."""
    x, y = position
    s = math.isqrt(num_regions)
    if s * s == num_regions:
        block = grid_size / s
        return int(x // block) + s * int(y // block)
    strip = grid_size / num_regions
    return int(x // strip)


def _cheb(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


@dataclass
class FrameEvents:
    """Binary milestones and scalar reward components for one frame."""

    reach_region: np.ndarray
    tower_destroyed: np.ndarray
    base_destroyed: int = 0
    base_attacked_by_enemy: int = 0
    kill: int = 0
    death: int = 0
    win: int = 0
    gold_gain: float = 0.0
    kill_reward: float = 0.0
    death_penalty: float = 0.0

    @classmethod
    def empty(cls, num_regions: int, num_towers: int) -> "FrameEvents":
        return cls(np.zeros(num_regions), np.zeros(num_towers))

    @property
    def reward(self) -> float:
        return self.gold_gain + self.kill_reward + self.death_penalty

    def to_dict(self) -> dict:
        return {
            "reach_region": self.reach_region.astype(int).tolist(),
            "tower_destroyed": self.tower_destroyed.astype(int).tolist(),
            "base_destroyed": self.base_destroyed,
            "base_attacked_by_enemy": self.base_attacked_by_enemy,
            "kill": self.kill,
            "death": self.death,
            "win": self.win,
            "gold_gain": round(self.gold_gain, 9),
            "kill_reward": round(self.kill_reward, 9),
            "death_penalty": round(self.death_penalty, 9),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameEvents":
        return cls(
            reach_region=np.asarray(d["reach_region"], dtype=np.float64),
            tower_destroyed=np.asarray(d["tower_destroyed"], dtype=np.float64),
            base_destroyed=d["base_destroyed"],
            base_attacked_by_enemy=d["base_attacked_by_enemy"],
            kill=d["kill"],
            death=d["death"],
            win=d["win"],
            gold_gain=d["gold_gain"],
            kill_reward=d["kill_reward"],
            death_penalty=d["death_penalty"],
        )


@dataclass
class Observation:
    """Fixed-length frame snapshot: a float feature vector plus the
    embedding-table type ids for each observed entity slot."""

    vector: np.ndarray
    type_ids: np.ndarray
    agent_position: tuple[int, int] | None
    agent_hp: float
    agent_gold: float
    frame_index: int
    cooldowns: np.ndarray

    def digest(self) -> str:
        return observation_digest(self.vector, self.type_ids)


def observation_digest(vector: np.ndarray, type_ids: np.ndarray) -> str:
    """Stable frame fingerprint; replays store it so teacher-forcing can
    verify reconstructed observations byte-for-byte."""
    h = hashlib.sha256(np.asarray(vector, dtype=np.float64).tobytes())
    h.update(np.asarray(type_ids, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class StepResult:
    observation: Observation
    events: FrameEvents
    done: bool


class _Creep:
    __slots__ = ("pos", "hp", "move_cd", "attack_cd", "cid")

    def __init__(self, pos, hp, cid):
        self.pos = pos
        self.hp = hp
        self.move_cd = 0
        self.attack_cd = 0
        self.cid = cid


def _tower_positions(cfg: EnvConfig) -> list[tuple[int, int]]:
    """Evenly spaced along the base-to-base diagonal, clear of both bases."""
    g = cfg.grid_size - 1
    n = cfg.num_towers
    fracs = [0.6] if n == 1 else [0.33 + 0.52 * k / (n - 1) for k in range(n)]
    out = []
    for f in fracs:
        c = max(2, min(g - 2, round(g * f)))
        out.append((c, c))
    return out




class Env:
    """Single-agent lane game. Exclusively owned by one caller; create
    one instance per worker."""

    def __init__(self, config: EnvConfig, seed: int | None = None):
        config.validate()
        self.config = config
        self.seed = config.rng_seed if seed is None else int(seed)
        self.agent_base = (1, 1)
        self.enemy_base = (config.grid_size - 2, config.grid_size - 2)
        self.tower_home = _tower_positions(config)
        self._episode_count = 0
        self._needs_reset = True
        self._ability_by_action = {ABILITY_BASE + a.ability_id: a for a in config.ability_set}

    # -- episode control ------------------------------------------------------

    def reset(self, episode_seed: int | None = None) -> Observation:
        cfg = self.config
        if episode_seed is None:
            episode_seed = int(
                np.random.SeedSequence([self.seed, self._episode_count]).generate_state(1)[0]
            )
        self.episode_seed = int(episode_seed)
        self._rng = np.random.default_rng(self.episode_seed)
        self._episode_count += 1
        self._needs_reset = False
        self.frame = 0
        self.agent_pos: tuple[int, int] | None = (2, 1)
        self.agent_hp = float(cfg.agent_max_hp)
        self.agent_gold = 0.0
        self.respawn_timer = 0
        self.cooldowns = np.zeros(cfg.num_abilities, dtype=np.int64)
        self.tower_hp = [cfg.tower_hp] * cfg.num_towers
        self.agent_base_hp = float(cfg.agent_base_hp)
        self.enemy_base_hp = float(cfg.enemy_base_hp)
        self.creeps: list[_Creep] = []
        self._next_cid = 0
        self._base_defense_cd = 0
        self.won = False
        self.done = False
        self.current_region = region_of(self.agent_pos, cfg.grid_size, cfg.num_regions)
        self._entered_regions = {self.current_region}
        return self._observe()

    # -- helpers ---------------------------------------------------------------

    def _blocked(self, cell: tuple[int, int]) -> bool:
        x, y = cell
        g = self.config.grid_size
        if not (0 <= x < g and 0 <= y < g):
            return True
        if cell == self.agent_base or cell == self.enemy_base:
            return True
        for k, pos in enumerate(self.tower_home):
            if self.tower_hp[k] > 0 and pos == cell:
                return True
        return any(c.pos == cell for c in self.creeps)

    def _towers_alive(self) -> int:
        return sum(1 for hp in self.tower_hp if hp > 0)

    def _strike_target(self):
        """Nearest enemy within strike range; towers win distance ties,
        the base is targetable only once all towers are down."""
        assert self.agent_pos is not None
        best = None
        rng = self.config.strike_range
        for k, pos in enumerate(self.tower_home):
            if self.tower_hp[k] > 0:
                d = _cheb(self.agent_pos, pos)
                if d <= rng and (best is None or d < best[0]):
                    best = (d, 0, "tower", k)
        for c in sorted(self.creeps, key=lambda c: c.cid):
            d = _cheb(self.agent_pos, c.pos)
            if d <= rng and (best is None or (d, 1) < (best[0], best[1])):
                best = (d, 1, "creep", c)
        if self._towers_alive() == 0:
            d = _cheb(self.agent_pos, self.enemy_base)
            if d <= rng and (best is None or (d, 2) < (best[0], best[1])):
                best = (d, 2, "base", None)
        return best

    def _apply_strike(self, damage: float, ev: FrameEvents) -> None:
        cfg = self.config
        target = self._strike_target()
        if target is None:
            return
        _, _, kind, ref = target
        if kind == "tower":
            dealt = min(damage, self.tower_hp[ref])
            self.tower_hp[ref] -= dealt
            ev.gold_gain += cfg.gold_per_damage * dealt
            if self.tower_hp[ref] <= 0:
                ev.tower_destroyed[ref] = 1
                ev.gold_gain += cfg.tower_bounty
        elif kind == "creep":
            ref.hp -= damage
            if ref.hp <= 0:
                self.creeps.remove(ref)
                ev.kill = 1
                ev.gold_gain += cfg.creep_gold
                ev.kill_reward += cfg.creep_kill_reward
        else:
            dealt = min(damage, self.enemy_base_hp)
            self.enemy_base_hp -= dealt
            ev.gold_gain += cfg.gold_per_damage * dealt
            if self.enemy_base_hp <= 0:
                ev.base_destroyed = 1
                ev.win = 1
                ev.gold_gain += cfg.base_bounty
                self.won = True
                self.done = True

    def _apply_dash(self, cells: int) -> None:
        assert self.agent_pos is not None
        x, y = self.agent_pos
        ex, ey = self.enemy_base
        sx = 0 if ex == x else (1 if ex > x else -1)
        sy = 0 if ey == y else (1 if ey > y else -1)
        for k in range(cells, 0, -1):
            cand = (x + sx * k, y + sy * k)
            if not self._blocked(cand):
                self.agent_pos = cand
                return

    def _apply_action(self, action: int, ev: FrameEvents) -> None:
        cfg = self.config
        if action == NOOP:
            return
        if action in _MOVE_DELTA:
            dx, dy = _MOVE_DELTA[action]
            x, y = self.agent_pos
            cand = (x + dx, y + dy)
            if not self._blocked(cand):
                self.agent_pos = cand
            return
        ability = self._ability_by_action.get(action)
        if ability is None:
            raise UsageError(f"action id {action} out of range")
        if self.cooldowns[ability.ability_id] > 0:
            return  # on cooldown: acts as noop
        self.cooldowns[ability.ability_id] = ability.cooldown
        if ability.semantic_class == "heal":
            self.agent_hp = min(float(cfg.agent_max_hp), self.agent_hp + ability.magnitude)
        elif ability.semantic_class == "strike":
            self._apply_strike(ability.magnitude, ev)
        elif ability.semantic_class == "dash":
            self._apply_dash(int(ability.magnitude))

    def _spawn_creep(self) -> None:
        cfg = self.config
        if len(self.creeps) >= cfg.max_live_creeps:
            # keep the rng cadence fixed even when the cap bites
            self._rng.integers(0, 2)
            return
        g = cfg.grid_size
        jitter = int(self._rng.integers(0, 2))
        bx, by = self.enemy_base
        cands = [(bx - 1, by), (bx, by - 1)] if jitter == 0 else [(bx, by - 1), (bx - 1, by)]
        for cell in cands:
            if 0 <= cell[0] < g and 0 <= cell[1] < g and not self._blocked(cell):
                self.creeps.append(_Creep(cell, float(cfg.creep_hp), self._next_cid))
                self._next_cid += 1
                return

    def _creep_turn(self, ev: FrameEvents) -> None:
        cfg = self.config
        for c in self.creeps:
            if c.attack_cd > 0:
                c.attack_cd -= 1
            if c.move_cd > 0:
                c.move_cd -= 1
            if _cheb(c.pos, self.agent_base) <= 1:
                # siege first: the base outranks the agent as a target
                if c.attack_cd == 0:
                    self.agent_base_hp -= cfg.creep_base_damage
                    c.attack_cd = cfg.creep_base_attack_period
                    ev.base_attacked_by_enemy = 1
                continue
            if self.agent_pos is not None and _cheb(c.pos, self.agent_pos) <= 1:
                if c.attack_cd == 0:
                    self.agent_hp -= cfg.creep_damage
                    c.attack_cd = cfg.creep_attack_period
                continue
            if c.move_cd == 0:
                # greedy 8-dir step toward the agent base, detouring
                # around towers, other creeps, and the agent
                x, y = c.pos
                bx, by = self.agent_base
                sx = 0 if bx == x else (1 if bx > x else -1)
                sy = 0 if by == y else (1 if by > y else -1)
                for dx, dy in ((sx, sy), (sx, 0), (0, sy)):
                    if dx == 0 and dy == 0:
                        continue
                    cand = (x + dx, y + dy)
                    if cand != self.agent_pos and not self._blocked(cand):
                        c.pos = cand
                        c.move_cd = cfg.creep_move_period
                        break

    def _tower_turn(self) -> None:
        cfg = self.config
        if self.agent_pos is None:
            return
        for k, pos in enumerate(self.tower_home):
            if self.tower_hp[k] <= 0:
                continue
            if self.frame % cfg.tower_attack_period == 0 and \
                    _cheb(pos, self.agent_pos) <= cfg.tower_range:
                self.agent_hp -= cfg.tower_damage

    def _base_defense_turn(self) -> None:
        cfg = self.config
        if self._base_defense_cd > 0:
            self._base_defense_cd -= 1
            return
        best = None
        for c in self.creeps:
            d = _cheb(c.pos, self.agent_base)
            if d <= cfg.base_defense_range and (best is None or (d, c.cid) < best[:2]):
                best = (d, c.cid, c)
        if best is not None:
            c = best[2]
            c.hp -= cfg.base_defense_damage
            self._base_defense_cd = 1
            if c.hp <= 0:
                self.creeps.remove(c)

    # -- main transition --------------------------------------------------------

    def step(self, action: int) -> StepResult:
        if self._needs_reset or self.done:
            raise UsageError("step() called on a finished episode; call reset()")
        cfg = self.config
        ev = FrameEvents.empty(cfg.num_regions, cfg.num_towers)

        if self.agent_pos is None:
            self.respawn_timer -= 1
            if self.respawn_timer <= 0:
                for cand in [(2, 1), (1, 2), (2, 2), (0, 2), (2, 0)]:
                    if not self._blocked(cand):
                        self.agent_pos = cand
                        break
                self.agent_hp = float(cfg.agent_max_hp)
        else:
            self._apply_action(int(action), ev)

        if not self.done:
            if self.frame % cfg.creep_spawn_period == 0:
                self._spawn_creep()
            self._creep_turn(ev)
            self._tower_turn()
            self._base_defense_turn()

        if self.agent_pos is not None and self.agent_hp <= 0:
            ev.death = 1
            ev.death_penalty = cfg.death_penalty
            self.agent_pos = None
            self.respawn_timer = cfg.respawn_delay

        if self.agent_pos is not None:
            reg = region_of(self.agent_pos, cfg.grid_size, cfg.num_regions)
            if reg != self.current_region:
                ev.reach_region[reg] = 1
                self.current_region = reg
                if reg not in self._entered_regions:
                    self._entered_regions.add(reg)
                    ev.gold_gain += cfg.region_bounty

        self.frame += 1
        if self.agent_base_hp <= 0 or self.frame >= cfg.max_episode_len:
            self.done = True

        self.cooldowns = np.maximum(self.cooldowns - 1, 0)
        self.agent_gold += ev.gold_gain
        return StepResult(self._observe(), ev, self.done)

    # -- observation -------------------------------------------------------------

    def _observe(self) -> Observation:
        cfg = self.config
        g1 = cfg.grid_size - 1
        alive = self.agent_pos is not None
        anchor = self.agent_pos if alive else self.agent_base
        scalars = np.array([
            anchor[0] / g1 * 2 - 1,
            anchor[1] / g1 * 2 - 1,
            self.agent_hp / cfg.agent_max_hp if alive else 0.0,
            min(self.agent_gold, 30.0) / 30.0,
            1.0 if alive else 0.0,
            self.respawn_timer / cfg.respawn_delay if not alive else 0.0,
            self.frame / cfg.max_episode_len,
            self._towers_alive() / cfg.num_towers,
            1.0 if self._towers_alive() == 0 else 0.0,
            self.agent_base_hp / cfg.agent_base_hp,
        ])
        cds = np.array([self.cooldowns[a.ability_id] / a.cooldown for a in cfg.ability_set])

        records = []
        type_ids = []

        def record(present, pos, hp_frac, type_id):
            if present:
                dx = (pos[0] - anchor[0]) / g1
                dy = (pos[1] - anchor[1]) / g1
            else:
                dx = dy = 0.0
            records.append([1.0 if present else 0.0, dx, dy, hp_frac])
            type_ids.append(type_id)

        record(True, self.agent_base, self.agent_base_hp / cfg.agent_base_hp, TYPE_AGENT_BASE)
        record(self.enemy_base_hp > 0, self.enemy_base,
               max(self.enemy_base_hp, 0.0) / cfg.enemy_base_hp, TYPE_ENEMY_BASE)
        for k, pos in enumerate(self.tower_home):
            record(self.tower_hp[k] > 0, pos, max(self.tower_hp[k], 0) / cfg.tower_hp, TYPE_TOWER)
        near = sorted(self.creeps, key=lambda c: (_cheb(c.pos, anchor), c.cid))
        for i in range(cfg.nearest_creeps_observed):
            if i < len(near):
                c = near[i]
                record(True, c.pos, max(c.hp, 0.0) / cfg.creep_hp, TYPE_CREEP)
            else:
                record(False, anchor, 0.0, TYPE_CREEP)

        vector = np.concatenate([scalars, cds, np.asarray(records).ravel()])
        return Observation(
            vector=vector,
            type_ids=np.asarray(type_ids, dtype=np.int64),
            agent_position=self.agent_pos,
            agent_hp=self.agent_hp,
            agent_gold=self.agent_gold,
            frame_index=self.frame,
            cooldowns=self.cooldowns.copy(),
        )


def create_env(config: EnvConfig, seed: int | None = None) -> Env:
    """Build an env in reset-required state. Identical (config, seed)
    plus identical actions yield identical episodes."""
    return Env(config, seed)


def observation_dim(cfg: EnvConfig) -> int:
    n_records = 2 + cfg.num_towers + cfg.nearest_creeps_observed
    return 10 + cfg.num_abilities + 4 * n_records


def num_entity_slots(cfg: EnvConfig) -> int:
    return 2 + cfg.num_towers + cfg.nearest_creeps_observed


# -- scripted reference agent ---------------------------------------------------


def scripted_agent_action(env: Env) -> int:
    """Hand-written lane bot: snipe towers from outside their range,
    heal when hurt, dash down the lane. Wins the default config; used
    to validate the game is beatable and as a replay generator."""
    cfg = env.config
    if env.agent_pos is None:
        return NOOP
    abil = {a.name: ABILITY_BASE + a.ability_id for a in cfg.ability_set}
    cd = env.cooldowns

    def ready(name, aid):
        return name in abil and cd[aid] == 0

    if env.agent_hp <= cfg.agent_max_hp - 8 and ready("heal_large", 1):
        return abil["heal_large"]
    if env.agent_hp <= cfg.agent_max_hp - 4 and ready("heal_small", 0):
        return abil["heal_small"]

    # current objective: first alive tower, then the base
    target = None
    for k, pos in enumerate(env.tower_home):
        if env.tower_hp[k] > 0:
            target = pos
            break
    if target is None:
        target = env.enemy_base
    d = _cheb(env.agent_pos, target)

    adjacent_creep = any(_cheb(c.pos, env.agent_pos) <= 1 for c in env.creeps)
    if adjacent_creep and ready("strike_weak", 2):
        return abil["strike_weak"]

    if d <= cfg.strike_range:
        if d < cfg.strike_range and target != env.enemy_base:
            # too deep inside tower range: back off along the lane
            x, y = env.agent_pos
            for a in (MOVE_S, MOVE_W, MOVE_N, MOVE_E):
                dx, dy = _MOVE_DELTA[a]
                cand = (x + dx, y + dy)
                if not env._blocked(cand) and _cheb(cand, target) == cfg.strike_range:
                    return a
        if ready("strike_strong", 3):
            return abil["strike_strong"]
        if ready("strike_weak", 2):
            return abil["strike_weak"]
        return NOOP

    # travel: dash if it will not land inside tower range
    if d > cfg.strike_range + 4 and ready("dash_long", 5):
        return abil["dash_long"]
    if d > cfg.strike_range + 2 and ready("dash_short", 4):
        return abil["dash_short"]
    x, y = env.agent_pos
    tx, ty = target
    prefs = []
    if abs(tx - x) >= abs(ty - y):
        prefs = [MOVE_E if tx > x else MOVE_W, MOVE_N if ty > y else MOVE_S]
    else:
        prefs = [MOVE_N if ty > y else MOVE_S, MOVE_E if tx > x else MOVE_W]
    for a in prefs + [MOVE_N, MOVE_E, MOVE_S, MOVE_W]:
        dx, dy = _MOVE_DELTA[a]
        cand = (x + dx, y + dy)
        if not env._blocked(cand) and _cheb(cand, target) <= d:
            return a
    return NOOP
