"""Random-rollout profiling, frame rendering and corpus validation sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from psengine.compiler import GameDef, load_game
from psengine.engine import (
    DEFAULT_LIMITS,
    NONE,
    EngineError,
    EngineLimits,
    GridState,
    init_level,
    state_digest,
    tick,
)
from psengine.grammar import PuzzleScriptError
from psengine.solver import SearchLimits, Solution, default_action_set, replay, solve_bfs

CATEGORIES = ("success", "compile_error", "runtime_error", "solution_error", "state_error",
              "unvalidated")
DEFAULT_SWEEP = (1, 8, 64, 512)


# -- profiling ---------------------------------------------------------------------

@dataclass
class ThroughputReport:
    game: str
    level: int
    num_envs: int
    steps_per_env: int
    seed: int
    total_ticks: int
    elapsed: float
    fps: float
    workers: int = 1
    action_set: list = field(default_factory=list)
    content_digest: str = ""
    wins: int = 0
    series: list = field(default_factory=list)  # sweep mode: one dict per batch size

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["game", "level", "num_envs", "steps_per_env", "seed", "total_ticks",
                "elapsed", "fps", "workers", "content_digest"]
        w = csv.writer(buf)
        w.writerow(cols)
        rows = self.series or [self.to_dict()]
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])
        return buf.getvalue()


def env_rng(seed: int, index: int) -> random.Random:
    """Independent stream per environment, fixed by (seed, index)."""
    return random.Random(f"psengine:{seed}:{index}")


def _rollout_chunk(game: GameDef, level: int, indices, steps: int, seed: int,
                   actions, limits: EngineLimits):
    start, _ = init_level(game, level, limits)
    digests = []
    wins = 0
    for idx in indices:
        rng = env_rng(seed, idx)
        st = start
        for _ in range(steps):
            st, out = tick(game, st, actions[rng.randrange(len(actions))], limits)
            if out.won:
                wins += 1
                st = start
        digests.append(state_digest(st))
    return digests, wins


def _chunk_worker(args):
    source, level, indices, steps, seed, actions, limits = args
    game = load_game(source) if isinstance(source, str) else source
    return _rollout_chunk(game, level, indices, steps, seed, actions, limits)


def profile_random(game: GameDef, level_index: int, num_envs: int, steps: int, seed: int = 0,
                   workers: Optional[int] = None, limits: EngineLimits = DEFAULT_LIMITS,
                   name: Optional[str] = None) -> ThroughputReport:
    """Run ``num_envs`` uniform-random episodes of ``steps`` ticks each.

    Episodes reset to the level start when won.  Rollout content depends only
    on ``seed`` and the env index, not on how envs are split across workers.
    """
    if num_envs <= 0 or steps <= 0:
        raise ValueError("num_envs and steps must be positive")
    actions = default_action_set(game) + [NONE]
    if game.uses_randomness() and limits.rng_seed is None:
        limits = EngineLimits(**{**asdict(limits), "rng_seed": seed})
    if workers is None:
        workers = min(os.cpu_count() or 1, num_envs)
    workers = max(1, min(workers, num_envs))
    chunks = [list(range(num_envs))[i::workers] for i in range(workers)]
    t0 = time.perf_counter()
    if workers == 1:
        results = [_rollout_chunk(game, level_index, chunks[0], steps, seed, actions, limits)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chunk_worker, [
                (game, level_index, c, steps, seed, actions, limits) for c in chunks]))
    elapsed = time.perf_counter() - t0
    digests = [None] * num_envs
    wins = 0
    for chunk, (ds, nw) in zip(chunks, results):
        wins += nw
        for idx, d in zip(chunk, ds):
            digests[idx] = d
    content = hashlib.blake2b("".join(digests).encode(), digest_size=8).hexdigest()
    total = num_envs * steps
    return ThroughputReport(name or game.title, level_index, num_envs, steps, seed, total,
                            elapsed, total / elapsed if elapsed > 0 else float("inf"), workers,
                            actions, content, wins)


def profile_sweep(game: GameDef, level_index: int, batch_sizes: Sequence[int] = DEFAULT_SWEEP,
                  steps: int = 100, seed: int = 0, workers: Optional[int] = None,
                  limits: EngineLimits = DEFAULT_LIMITS, name: Optional[str] = None) -> ThroughputReport:
    series = []
    last = None
    for b in batch_sizes:
        last = profile_random(game, level_index, b, steps, seed, workers, limits, name)
        row = last.to_dict()
        row.pop("series")
        series.append(row)
    last.series = series
    return last


# -- rendering ---------------------------------------------------------------------

class _SpriteCache:
    def __init__(self, game: GameDef):
        self.tiles = []
        for obj in game.object_table.objects:
            colors = [c for c in obj.colors]
            rgb = np.zeros((5, 5, 3), dtype=np.uint8)
            mask = np.zeros((5, 5), dtype=bool)
            if obj.sprite is None:
                if colors and colors[0]:
                    rgb[:, :] = colors[0]
                    mask[:, :] = True
            else:
                for y, row in enumerate(obj.sprite):
                    for x, px in enumerate(row):
                        if px >= 0 and px < len(colors) and colors[px]:
                            rgb[y, x] = colors[px]
                            mask[y, x] = True
            self.tiles.append((rgb, mask))


def render_frame(game: GameDef, state: GridState, scale: int = 1) -> np.ndarray:
    """RGB image of shape (height*5*scale, width*5*scale, 3), dtype uint8."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    cache = getattr(game, "_sprites", None)
    if cache is None:
        cache = _SpriteCache(game)
        game._sprites = cache
    h, w = state.height, state.width
    img = np.zeros((h * 5, w * 5, 3), dtype=np.uint8)
    for layer in game.layer_table.layers:
        for a in layer:
            m = state.pos[a]
            if not m:
                continue
            rgb, mask = cache.tiles[a]
            while m:
                low = m & -m
                i = low.bit_length() - 1
                m ^= low
                y, x = divmod(i, w)
                tile = img[y * 5:(y + 1) * 5, x * 5:(x + 1) * 5]
                tile[mask] = rgb[mask]
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return img


def frame_filename(game_name: str, level: int, step: int) -> str:
    return f"{game_name}_{level}_{step}.png"


def save_png(img: np.ndarray, path) -> None:
    from matplotlib import image as mpimg
    mpimg.imsave(str(path), img)


def render_solution(game: GameDef, level_index: int, actions, out_dir, scale: int = 4,
                    game_name: Optional[str] = None, limits: EngineLimits = DEFAULT_LIMITS) -> list:
    """Write one PNG per step (step 0 is the initial state); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = game_name or slug(game.title)
    st, _ = init_level(game, level_index, limits)
    paths = []
    p = out_dir / frame_filename(name, level_index, 0)
    save_png(render_frame(game, st, scale), p)
    paths.append(p)
    for i, a in enumerate(actions, 1):
        st, out = tick(game, st, a, limits)
        p = out_dir / frame_filename(name, level_index, i)
        save_png(render_frame(game, st, scale), p)
        paths.append(p)
        if out.won:
            break
    return paths


def slug(text: str) -> str:
    out = "".join(c if c.isalnum() else "_" for c in text.lower()).strip("_")
    while "__" in out:
        out = out.replace("__", "_")
    return out or "game"


# -- corpus validation ----------------------------------------------------------------

@dataclass
class LedgerRow:
    game: str
    level: int  # -1 for whole-game rows (compile errors, I/O failures)
    status: str
    solved: bool = False
    actions: int = 0
    env_steps: int = 0
    elapsed: float = 0.0
    source: str = ""  # "search" or "fixture"
    detail: str = ""


@dataclass
class Ledger:
    rows: list = field(default_factory=list)

    def counts(self) -> dict:
        c = {k: 0 for k in CATEGORIES}
        for r in self.rows:
            c[r.status] += 1
        return c

    @property
    def total(self) -> int:
        return len(self.rows)

    def to_dict(self) -> dict:
        return {"total_levels": self.total, "counts": self.counts(),
                "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(LedgerRow.__dataclass_fields__)
        w = csv.writer(buf)
        w.writerow(cols)
        for r in self.rows:
            d = asdict(r)
            w.writerow([d[c] for c in cols])
        return buf.getvalue()

    def summary_table(self) -> str:
        c = self.counts()
        lines = [f"{'Total Levels':<22}{self.total:>6}"]
        labels = {"success": "Successful Solutions", "compile_error": "Compile Errors",
                  "runtime_error": "Runtime Errors", "solution_error": "Solution Errors",
                  "state_error": "State Errors", "unvalidated": "Unvalidated Levels"}
        for k in CATEGORIES:
            lines.append(f"{labels[k]:<22}{c[k]:>6}")
        return "\n".join(lines)


def _fixture_for(path: Path, level: int) -> Optional[Path]:
    cand = path.with_name(f"{path.stem}.level{level}.solution.json")
    return cand if cand.exists() else None


def _validate_game(path: Path, limits: SearchLimits, engine_limits: EngineLimits) -> list:
    name = path.stem
    try:
        game = load_game(path.read_text(encoding="utf-8"))
    except PuzzleScriptError as e:
        return [LedgerRow(name, -1, "compile_error", detail=str(e).splitlines()[0])]
    except (OSError, UnicodeDecodeError) as e:
        return [LedgerRow(name, -1, "compile_error", detail=f"read failed: {e}")]
    rows = []
    for li in game.playable_levels():
        fixture = _fixture_for(path, li)
        t0 = time.perf_counter()
        try:
            if fixture is not None:
                sol = Solution.from_dict(json.loads(fixture.read_text(encoding="utf-8")))
                src = "fixture"
            else:
                sol = solve_bfs(game, li, limits, engine_limits=engine_limits)
                src = "search"
        except (EngineError, RecursionError) as e:
            rows.append(LedgerRow(name, li, "runtime_error", elapsed=time.perf_counter() - t0,
                                  source="search", detail=str(e)))
            continue
        except (ValueError, OSError) as e:
            rows.append(LedgerRow(name, li, "solution_error", source="fixture", detail=str(e)))
            continue
        if src == "search" and not sol.solved:
            rows.append(LedgerRow(name, li, "unvalidated", False, len(sol.actions), sol.env_steps,
                                  time.perf_counter() - t0, src, f"search stopped: {sol.stop_reason}"))
            continue
        rep = replay(game, li, sol.actions, sol.terminal_digest or None, engine_limits=engine_limits)
        rows.append(LedgerRow(name, li, rep.status, sol.solved, len(sol.actions), sol.env_steps,
                              time.perf_counter() - t0, src, rep.error))
    return rows


def _validate_worker(args):
    path, limits, engine_limits = args
    return _validate_game(Path(path), limits, engine_limits)


def validate_corpus(game_paths: Sequence, limits: SearchLimits = SearchLimits(max_env_steps=100_000),
                    engine_limits: EngineLimits = DEFAULT_LIMITS, workers: int = 1) -> Ledger:
    """Compile, solve and replay every level of every game.

    A game that fails to compile yields one ``compile_error`` row.  A level
    whose search never wins has nothing to replay and is ``unvalidated``.
    A ``<stem>.level<N>.solution.json`` file next to a game replaces search
    for that level, so solutions recorded elsewhere can be checked.
    """
    paths = [Path(p) for p in game_paths]
    if workers > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_validate_worker, [(str(p), limits, engine_limits) for p in paths]))
    else:
        parts = [_validate_game(p, limits, engine_limits) for p in paths]
    return Ledger([r for part in parts for r in part])
