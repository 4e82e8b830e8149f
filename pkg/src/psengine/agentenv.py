"""Episode API for agents: multihot observations and heuristic rewards.

Observation plane order (axis 0 of the tensor):

* ``0 .. n_objects-1``: presence of each atomic object id;
* ``n_objects + 5*L + k``: force ``k`` (up, down, left, right, action) on
  collision layer ``L``;
* last plane: cells stamped by the player's most recent input.

Each plane is ``height x width`` and row-major.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from psengine.compiler import GameDef
from psengine.engine import (
    DEFAULT_LIMITS,
    EngineLimits,
    GridState,
    StepOutcome,
    action_code,
    check_win,
    get_runtime,
    init_level,
    tick,
    win_masks,
)

DEFAULT_HORIZON = 1000


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class HeuristicConfig:
    include_player_term: bool = True
    unreachable_penalty: Optional[int] = None  # None -> width + height

    def __post_init__(self):
        if self.unreachable_penalty is not None and self.unreachable_penalty < 0:
            raise ValueError("unreachable_penalty must be >= 0")


# -- observations ----------------------------------------------------------------

def plane_count(game: GameDef) -> int:
    return game.num_objects + 5 * game.num_layers + 1


def _unpack(mask: int, n: int) -> np.ndarray:
    raw = np.frombuffer(mask.to_bytes((n + 7) // 8, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:n].astype(bool)


def _pack(plane: np.ndarray) -> int:
    bits = np.packbits(np.asarray(plane, dtype=bool).ravel(), bitorder="little")
    return int.from_bytes(bits.tobytes(), "little")


def observe(game: GameDef, state: GridState) -> np.ndarray:
    """Boolean tensor of shape (planes, height, width)."""
    n = state.n_cells
    masks = list(state.pos) + list(state.fpos) + [state.last_input]
    out = np.zeros((len(masks), n), dtype=bool)
    for i, m in enumerate(masks):
        if m:
            out[i] = _unpack(m, n)
    return out.reshape(len(masks), state.height, state.width)


def state_from_observation(game: GameDef, obs: np.ndarray, level_index: int = 0) -> GridState:
    planes, h, w = obs.shape
    if planes != plane_count(game):
        raise ValueError(f"expected {plane_count(game)} planes, got {planes}")
    n_obj = game.num_objects
    pos = [_pack(obs[i]) for i in range(n_obj)]
    fpos = [_pack(obs[n_obj + j]) for j in range(5 * game.num_layers)]
    cells = [0] * (w * h)
    moves = [0] * (w * h)
    for a, m in enumerate(pos):
        while m:
            low = m & -m
            cells[low.bit_length() - 1] |= 1 << a
            m ^= low
    for b, m in enumerate(fpos):
        while m:
            low = m & -m
            moves[low.bit_length() - 1] |= 1 << b
            m ^= low
    st = GridState(w, h, cells, moves, pos, fpos, _pack(obs[-1]), None, level_index)
    return st


def observation_to_bytes(obs: np.ndarray) -> bytes:
    """Flat export: little-endian uint32 planes, height, width, then the
    planes packed LSB-first in plane-major, row-major order."""
    p, h, w = obs.shape
    header = np.array([p, h, w], dtype="<u4").tobytes()
    return header + np.packbits(obs.ravel(), bitorder="little").tobytes()


def observation_from_bytes(data: bytes) -> np.ndarray:
    p, h, w = (int(v) for v in np.frombuffer(data[:12], dtype="<u4"))
    bits = np.unpackbits(np.frombuffer(data[12:], dtype=np.uint8), bitorder="little")
    return bits[: p * h * w].astype(bool).reshape(p, h, w)


def observation_to_json(game: GameDef, obs: np.ndarray) -> str:
    names = [o.name for o in game.object_table.objects]
    labels = list(names)
    for L in range(game.num_layers):
        labels += [f"layer{L}:{k}" for k in ("up", "down", "left", "right", "action")]
    labels.append("last_input")
    planes = {lab: obs[i].astype(int).tolist() for i, lab in enumerate(labels) if obs[i].any()}
    return json.dumps({"shape": list(obs.shape), "planes": planes})


# -- heuristic ---------------------------------------------------------------------

def _coords(mask: int, w: int) -> list:
    out = []
    while mask:
        low = mask & -mask
        i = low.bit_length() - 1
        out.append((i % w, i // w))
        mask ^= low
    return out


def _min_dist(src: list, dst: list) -> Optional[int]:
    best = None
    for x, y in src:
        for u, v in dst:
            d = abs(x - u) + abs(y - v)
            if best is None or d < best:
                best = d
                if d == 0:
                    return 0
    return best


def win_distance(game: GameDef, state: GridState, cfg: HeuristicConfig = HeuristicConfig()) -> int:
    """Distance-to-win: zero exactly when every win condition holds."""
    w = state.width
    penalty = cfg.unreachable_penalty if cfg.unreachable_penalty is not None else state.width + state.height
    total = 0
    participants = 0
    unsatisfied_on = False
    for kind, am, bm in win_masks(game, state):
        if kind == "all_on":
            loose = am & ~bm
            if not loose:
                continue
            unsatisfied_on = True
            targets = _coords(bm, w)
            for p in _coords(loose, w):
                d = _min_dist([p], targets)
                total += penalty if d is None else d
            participants |= loose | (bm & ~am)
        elif kind == "some_on":
            if am & bm:
                continue
            unsatisfied_on = True
            d = _min_dist(_coords(am, w), _coords(bm, w))
            total += penalty if d is None else d
            participants |= am | bm
        elif kind == "no_on":
            both = am & bm
            if not both:
                continue
            unsatisfied_on = True
            total += bin(both).count("1")
            participants |= both
        elif kind == "some":
            if not am:
                total += penalty
        else:
            total += bin(am).count("1")
    if cfg.include_player_term and unsatisfied_on and participants:
        rt = get_runtime(game)
        players = 0
        for a in rt.player_atoms:
            players |= state.pos[a]
        d = _min_dist(_coords(players, w), _coords(participants, w))
        if d is not None:
            total += d
    return total


# -- episodes ----------------------------------------------------------------------

@dataclass
class EnvState:
    game: GameDef
    level_index: int
    grid: GridState
    score: int
    steps: int = 0
    done: bool = False
    won: bool = False
    horizon: int = DEFAULT_HORIZON
    limits: EngineLimits = DEFAULT_LIMITS
    cfg: HeuristicConfig = field(default_factory=HeuristicConfig)


def env_reset(game: GameDef, level_index: int, seed: Optional[int] = None,
              limits: EngineLimits = DEFAULT_LIMITS, cfg: HeuristicConfig = HeuristicConfig(),
              horizon: int = DEFAULT_HORIZON):
    if seed is not None:
        limits = replace(limits, rng_seed=seed)
    grid, _ = init_level(game, level_index, limits)
    env = EnvState(game, level_index, grid, win_distance(game, grid, cfg), horizon=horizon,
                   limits=limits, cfg=cfg)
    return env, observe(game, grid)


def env_step(env: EnvState, action):
    """Returns ``(env, observation, reward, done, info)``; ``env`` is not mutated."""
    if env.done:
        raise EpisodeDone("step called on a finished episode; call env_reset")
    code = action_code(action)
    grid, outcome = tick(env.game, env.grid, code, env.limits)
    score = win_distance(env.game, grid, env.cfg)
    reward = env.score - score
    won = outcome.won
    steps = env.steps + 1
    done = won or steps >= env.horizon
    new = replace(env, grid=grid, score=score, steps=steps, done=done, won=won)
    info = {"outcome": outcome, "check_win": check_win(env.game, grid) if not won else True}
    return new, observe(env.game, grid), reward, done, info


__all__ = [
    "EnvState", "EpisodeDone", "HeuristicConfig", "StepOutcome", "env_reset", "env_step",
    "observe", "observation_from_bytes", "observation_to_bytes", "observation_to_json",
    "plane_count", "state_from_observation", "win_distance",
]
