"""Breadth-first search over game states, plus solution replay."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from psengine.agentenv import HeuristicConfig, win_distance
from psengine.compiler import GameDef
from psengine.engine import (
    ACTION,
    DEFAULT_LIMITS,
    EngineError,
    EngineLimits,
    GridState,
    action_code,
    check_win,
    init_level,
    state_digest,
    state_from_key,
    state_key,
    tick,
)

STATUSES = ("success", "compile_error", "runtime_error", "solution_error", "state_error")
SOLUTION_FORMAT = "psengine.solution/1"


class SolverError(Exception):
    pass


@dataclass(frozen=True)
class SearchLimits:
    max_env_steps: int = 1_000_000
    timeout: float = 60.0
    dedupe: bool = True

    def __post_init__(self):
        if self.max_env_steps <= 0 or self.timeout <= 0:
            raise ValueError("search limits must be positive")


@dataclass
class Solution:
    actions: list
    solved: bool
    env_steps: int
    nodes_expanded: int
    best_score: float
    elapsed: float
    terminal_digest: str
    level: int = 0
    game: str = ""
    stop_reason: str = ""  # won | steps | timeout | exhausted
    action_set: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": SOLUTION_FORMAT,
            "game": self.game,
            "level": self.level,
            "actions": list(self.actions),
            "solved": self.solved,
            "env_steps": self.env_steps,
            "nodes_expanded": self.nodes_expanded,
            "elapsed_s": round(self.elapsed, 6),
            "best_score": self.best_score,
            "terminal_digest": self.terminal_digest,
            "stop_reason": self.stop_reason,
            "action_set": list(self.action_set),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "Solution":
        actions = d.get("actions")
        if not isinstance(actions, list):
            raise ValueError("solution has no 'actions' list")
        return cls(
            actions=[action_code(a) for a in actions],
            solved=bool(d.get("solved", False)),
            env_steps=int(d.get("env_steps", 0)),
            nodes_expanded=int(d.get("nodes_expanded", 0)),
            best_score=d.get("best_score", 0),
            elapsed=float(d.get("elapsed_s", 0.0)),
            terminal_digest=str(d.get("terminal_digest", "")),
            level=int(d.get("level", 0)),
            game=str(d.get("game", "")),
            stop_reason=str(d.get("stop_reason", "")),
            action_set=list(d.get("action_set", [])),
        )


def load_solution(path) -> Solution:
    with open(path, encoding="utf-8") as fh:
        return Solution.from_dict(json.load(fh))


@dataclass
class ReplayReport:
    final_digest: str
    won: bool
    divergence_step: Optional[int] = None
    messages: list = field(default_factory=list)
    status: str = "success"
    steps_run: int = 0
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def default_action_set(game: GameDef) -> list:
    acts = [0, 1, 2, 3]
    if game.references_action() and not game.prelude.get("noaction"):
        acts.append(ACTION)
    return acts


def hash_state(state: GridState) -> str:
    return state_digest(state)


def _path(parents, acts, idx) -> list:
    out = []
    while idx > 0:
        out.append(acts[idx])
        idx = parents[idx]
    out.reverse()
    return out


def solve_bfs(game: GameDef, level_index: int, limits: SearchLimits = SearchLimits(),
              action_set: Optional[Sequence[int]] = None,
              engine_limits: EngineLimits = DEFAULT_LIMITS,
              heuristic: HeuristicConfig = HeuristicConfig()) -> Solution:
    """Shortest winning action sequence, or the best partial one on exhaustion.

    Children are generated in action-code order and tested for a win as they
    are generated.  Duplicate detection uses the exact encoded state (object
    layout plus checkpoint), so no two distinct states are ever merged.
    """
    if game.uses_randomness() and engine_limits.rng_seed is None:
        raise SolverError("game uses random rules; pass an rng seed to search it")
    actions = list(action_set) if action_set is not None else default_action_set(game)
    actions = [action_code(a) for a in actions]
    t0 = time.perf_counter()
    root, _ = init_level(game, level_index, engine_limits)
    w, h = root.width, root.height

    def finish(path, solved, end_state, env_steps, expanded, score, reason):
        return Solution(path, solved, env_steps, expanded, score, time.perf_counter() - t0,
                        state_digest(end_state), level_index, game.source_hash, reason, actions)

    if check_win(game, root):
        return finish([], True, root, 0, 0, 0, "won")
    root_key = state_key(game, root)
    keys = [root_key]
    parents = [-1]
    acts = [-1]
    seen = {root_key} if limits.dedupe else None
    best_score = win_distance(game, root, heuristic)
    best_idx = 0
    env_steps = 0
    expanded = 0
    head = 0
    deadline = t0 + limits.timeout
    reason = "exhausted"
    while head < len(keys):
        if env_steps >= limits.max_env_steps:
            reason = "steps"
            break
        if time.perf_counter() > deadline:
            reason = "timeout"
            break
        st = state_from_key(game, keys[head], w, h, level_index)
        expanded += 1
        for a in actions:
            child, out = tick(game, st, a, engine_limits)
            env_steps += 1
            if out.won:
                path = _path(parents, acts, head) + [a]
                return finish(path, True, child, env_steps, expanded, 0, "won")
            if not out.changed or out.cancelled:
                continue
            k = state_key(game, child)
            if seen is not None:
                if k in seen:
                    continue
                seen.add(k)
            keys.append(k)
            parents.append(head)
            acts.append(a)
            score = win_distance(game, child, heuristic)
            if score <= best_score:
                best_score = score
                best_idx = len(keys) - 1
        head += 1
    end = state_from_key(game, keys[best_idx], w, h, level_index)
    return finish(_path(parents, acts, best_idx), False, end, env_steps, expanded,
                  best_score, reason)


def replay(game: GameDef, level_index: int, actions: Sequence, expected_digest: Optional[str] = None,
           expected_trajectory: Optional[Sequence[str]] = None,
           engine_limits: EngineLimits = DEFAULT_LIMITS) -> ReplayReport:
    """Re-run an action list from the level start and classify the result.

    ``expected_trajectory`` (digest after each action) pinpoints the first
    divergent step; ``expected_digest`` checks only the end state.
    """
    codes = [action_code(a) for a in actions]
    try:
        st, _ = init_level(game, level_index, engine_limits)
    except EngineError as e:
        return ReplayReport("", False, 0, [], "runtime_error", 0, str(e))
    won = check_win(game, st) and not codes
    messages = []
    divergence = None
    steps = 0
    try:
        for i, a in enumerate(codes):
            st, out = tick(game, st, a, engine_limits)
            steps = i + 1
            messages.extend(out.messages)
            if (divergence is None and expected_trajectory is not None
                    and i < len(expected_trajectory) and expected_trajectory[i] != state_digest(st)):
                divergence = i
            if out.won:
                won = True
                break
    except EngineError as e:
        return ReplayReport(state_digest(st), False, steps, messages, "runtime_error", steps, str(e))
    digest = state_digest(st)
    if expected_digest and digest != expected_digest and divergence is None:
        divergence = steps
    if not won:
        status = "solution_error"
    elif expected_digest and digest != expected_digest:
        status = "state_error"
    else:
        status = "success"
    return ReplayReport(digest, won, divergence, messages, status, steps)
