"""Command-line entry point: ``psengine <subcommand> ...``.

Exit codes: 0 success, 1 domain failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

from psengine.compiler import GameDef, load_game
from psengine.engine import (
    ACTION_CODES,
    EngineError,
    EngineLimits,
    check_win,
    init_level,
    state_digest,
    tick,
)
from psengine.grammar import PuzzleScriptError
from psengine.solver import SearchLimits, SolverError, load_solution, replay, solve_bfs

OUT_ENV = "PSENGINE_OUT_DIR"
NO_COLOR_ENV = "NO_COLOR"


class DomainError(Exception):
    pass


def _say(args, msg):
    print(msg, file=sys.stderr if getattr(args, "quiet", False) else sys.stdout)


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _load(path) -> GameDef:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DomainError(f"cannot read {path}: {e}") from None
    return load_game(text)


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _engine_limits(args) -> EngineLimits:
    seed = getattr(args, "seed", None)
    return EngineLimits(rng_seed=seed)


def _check_level(game: GameDef, level: int):
    if not 0 <= level < len(game.levels):
        raise DomainError(f"level {level} out of range (0..{len(game.levels) - 1})")
    if game.levels[level].is_message:
        raise DomainError(f"level {level} is a message entry; playable: {game.playable_levels()}")


def _stem(path) -> str:
    return Path(path).stem


# -- subcommands -------------------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        game = _load(args.file)
    except PuzzleScriptError as e:
        for d in e.diagnostics:
            print(str(d), file=sys.stderr)
        if args.json:
            print(json.dumps({"ok": False, "diagnostics": [d.to_dict() for d in e.diagnostics]}))
        return 1
    for w in game.warnings:
        print(str(w), file=sys.stderr)
    summary = (f"{game.num_objects} objects, {game.rule_line_count} rules -> "
               f"{game.variant_count} compiled variants")
    if args.json:
        print(json.dumps({"ok": True, "title": game.title, "objects": game.num_objects,
                          "layers": game.num_layers, "rules": game.rule_line_count,
                          "variants": game.variant_count,
                          "levels": len(game.playable_levels())}))
    else:
        _say(args, summary)
    return 0


def cmd_solve(args) -> int:
    game = _load(args.file)
    limits = SearchLimits(max_env_steps=args.max_steps, timeout=args.timeout,
                          dedupe=not args.no_dedupe)
    elimits = _engine_limits(args)
    if args.all:
        levels = game.playable_levels()
    else:
        _check_level(game, args.level)
        levels = [args.level]
    all_solved = True
    for li in levels:
        sol = solve_bfs(game, li, limits, engine_limits=elimits)
        all_solved &= sol.solved
        if args.out and not args.all:
            path = Path(args.out)
            path.parent.mkdir(parents=True, exist_ok=True)
        else:
            path = _out_dir(args) / f"{_stem(args.file)}.level{li}.solution.json"
        path.write_text(sol.dumps() + "\n", encoding="utf-8")
        _say(args, f"level {li}: {'solved' if sol.solved else 'unsolved'} "
                   f"len={len(sol.actions)} env_steps={sol.env_steps} "
                   f"time={sol.elapsed:.2f}s -> {path}")
    return 0 if all_solved else 1


def cmd_replay(args) -> int:
    game = _load(args.file)
    _check_level(game, args.level)
    try:
        sol = load_solution(args.solution)
    except (OSError, ValueError, json.JSONDecodeError) as e:
        raise DomainError(f"bad solution file: {e}") from None
    expected = args.expect_digest if args.expect_digest is not None else (sol.terminal_digest or None)
    rep = replay(game, args.level, sol.actions, expected, engine_limits=_engine_limits(args))
    print(json.dumps(rep.to_dict()))
    return 0 if rep.status == "success" else 1


def cmd_profile(args) -> int:
    from psengine.harness import profile_random, profile_sweep
    game = _load(args.file)
    _check_level(game, args.level)
    name = _stem(args.file)
    if args.sweep:
        sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [1, 8, 64, 512]
        rep = profile_sweep(game, args.level, sizes, args.steps, args.seed, args.workers, name=name)
    else:
        rep = profile_random(game, args.level, args.envs, args.steps, args.seed, args.workers,
                             name=name)
    out = _out_dir(args)
    base = out / f"{name}_level{args.level}_profile"
    base.with_suffix(".json").write_text(rep.to_json() + "\n", encoding="utf-8")
    base.with_suffix(".csv").write_text(rep.to_csv(), encoding="utf-8")
    if args.sweep:
        from psengine.plotting import plot_sweep
        plot_sweep(rep, base.with_suffix(".png"))
        for row in rep.series:
            _say(args, f"envs={row['num_envs']:>5} ticks={row['total_ticks']:>8} fps={row['fps']:.0f}")
    else:
        _say(args, f"{rep.total_ticks} ticks in {rep.elapsed:.2f}s, fps={rep.fps:.0f}, "
                   f"digest={rep.content_digest}")
    return 0


def cmd_render(args) -> int:
    from psengine.harness import render_solution
    game = _load(args.file)
    _check_level(game, args.level)
    actions = []
    if args.solution:
        try:
            actions = load_solution(args.solution).actions
        except (OSError, ValueError, json.JSONDecodeError) as e:
            raise DomainError(f"bad solution file: {e}") from None
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    paths = render_solution(game, args.level, actions, out, args.scale, _stem(args.file),
                            _engine_limits(args))
    _say(args, f"wrote {len(paths)} frames to {out}")
    return 0


def cmd_corpus(args) -> int:
    from psengine.harness import validate_corpus
    from psengine.plotting import plot_ledger
    root = Path(args.dir)
    if not root.is_dir():
        raise DomainError(f"not a directory: {root}")
    paths = sorted(root.glob("*.txt"))
    limits = SearchLimits(max_env_steps=args.max_steps, timeout=args.timeout)
    ledger = validate_corpus(paths, limits, workers=args.workers)
    out = _out_dir(args)
    (out / "ledger.json").write_text(ledger.to_json() + "\n", encoding="utf-8")
    (out / "ledger.csv").write_text(ledger.to_csv(), encoding="utf-8")
    plot_ledger(ledger, out / "ledger.png")
    _say(args, ledger.summary_table())
    return 0


# -- play --------------------------------------------------------------------------

_KEYS = {"\x1b[A": "up", "\x1b[B": "down", "\x1b[D": "left", "\x1b[C": "right",
         "w": "up", "s": "down", "a": "left", "d": "right", "x": "action",
         "up": "up", "down": "down", "left": "left", "right": "right", "action": "action",
         "z": "undo", "undo": "undo", "r": "restart", "restart": "restart",
         "q": "quit", "quit": "quit", ".": "none", "none": "none"}


def ascii_grid(game: GameDef, state) -> str:
    """Level rendered with legend glyphs: the glyph whose object set matches
    the cell best, preferring exact matches, else '?'."""
    glyphs = []
    for ch, (kind, ids) in game.legend_table.glyphs.items():
        if kind != "meta":
            glyphs.append((ch, frozenset(ids)))
    bg = game.background_id
    rows = []
    for y in range(state.height):
        row = []
        for x in range(state.width):
            here = frozenset(state.objects_at(x, y))
            core = here - {bg}
            ch = None
            for g, ids in glyphs:
                if ids == here or ids == core:
                    ch = g
                    break
            if ch is None:
                best = None
                for g, ids in glyphs:
                    if ids <= here and ids - {bg} and (best is None or len(ids) > len(best[1])):
                        best = (g, ids)
                ch = best[0] if best and len(core) == 1 else "?"
            row.append(ch)
        rows.append("".join(row))
    return "\n".join(rows)


def _read_key(stream) -> Optional[str]:
    if stream.isatty():
        import termios
        import tty
        fd = stream.fileno()
        old = termios.tcgetattr(fd)
        try:
            tty.setraw(fd)
            ch = os.read(fd, 1).decode(errors="ignore")
            if ch == "\x1b":
                ch += os.read(fd, 2).decode(errors="ignore")
        finally:
            termios.tcsetattr(fd, termios.TCSADRAIN, old)
        return ch.lower() if len(ch) == 1 else ch
    line = stream.readline()
    if not line:
        return None
    return line.strip().lower()


def cmd_play(args, stdin=None) -> int:
    stdin = stdin or sys.stdin
    game = _load(args.file)
    _check_level(game, args.level)
    limits = _engine_limits(args)
    st, _ = init_level(game, args.level, limits)
    history = []
    print(ascii_grid(game, st))
    while True:
        key = _read_key(stdin)
        if key is None:
            break
        cmd = _KEYS.get(key)
        if cmd is None:
            continue
        if cmd == "quit":
            break
        if cmd == "undo":
            if history:
                st = history.pop()
        elif cmd == "restart":
            history.append(st)
            st, _ = init_level(game, args.level, limits)
        else:
            history.append(st)
            st, out = tick(game, st, ACTION_CODES[cmd], limits)
            for m in out.messages:
                print(f"message: {m}")
            if out.won:
                print(ascii_grid(game, st))
                print(f"won  digest={state_digest(st)}")
                return 0
        print(ascii_grid(game, st))
        print(f"digest={state_digest(st)}  win={check_win(game, st)}")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psengine", description="PuzzleScript compiler, engine and solver")
    p.add_argument("--quiet", action="store_true", help="send human-readable text to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="parse and compile a game")
    v.add_argument("file")
    v.add_argument("--json", action="store_true")

    s = sub.add_parser("solve", help="breadth-first search for solutions")
    s.add_argument("file")
    grp = s.add_mutually_exclusive_group(required=True)
    grp.add_argument("--level", type=int)
    grp.add_argument("--all", action="store_true")
    s.add_argument("--max-steps", type=int, default=1_000_000)
    s.add_argument("--timeout", type=float, default=60.0)
    s.add_argument("--no-dedupe", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="solution path (single level)")
    s.add_argument("--out-dir")

    r = sub.add_parser("replay", help="replay a solution file")
    r.add_argument("file")
    r.add_argument("--level", type=int, required=True)
    r.add_argument("--solution", required=True)
    r.add_argument("--expect-digest")
    r.add_argument("--seed", type=int)

    pl = sub.add_parser("play", help="interactive terminal play (arrows, X action, Z undo, R restart)")
    pl.add_argument("file")
    pl.add_argument("--level", type=int, required=True)
    pl.add_argument("--seed", type=int)

    pr = sub.add_parser("profile", help="random-agent throughput")
    pr.add_argument("file")
    pr.add_argument("--level", type=int, required=True)
    pr.add_argument("--envs", type=int, default=1)
    pr.add_argument("--steps", type=int, default=100)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--workers", type=int)
    pr.add_argument("--sweep", action="store_true")
    pr.add_argument("--sizes", help="comma-separated batch sizes for --sweep")
    pr.add_argument("--out-dir")

    rd = sub.add_parser("render", help="write PNG frames of a solution")
    rd.add_argument("file")
    rd.add_argument("--level", type=int, required=True)
    rd.add_argument("--solution")
    rd.add_argument("--scale", type=int, default=4)
    rd.add_argument("--out")
    rd.add_argument("--seed", type=int)

    c = sub.add_parser("corpus", help="validation ledger over a directory of games")
    c.add_argument("dir")
    c.add_argument("--max-steps", type=int, default=100_000)
    c.add_argument("--timeout", type=float, default=60.0)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out-dir")
    return p


_HANDLERS = {"validate": cmd_validate, "solve": cmd_solve, "replay": cmd_replay,
             "play": cmd_play, "profile": cmd_profile, "render": cmd_render, "corpus": cmd_corpus}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and 2
    for name in ("max_steps", "timeout", "envs", "steps", "scale"):
        val = getattr(args, name, None)
        if val is not None and val <= 0:
            parser.print_usage(sys.stderr)
            print(f"psengine: error: --{name.replace('_', '-')} must be positive", file=sys.stderr)
            return 2
    try:
        return _HANDLERS[args.command](args)
    except PuzzleScriptError as e:
        _err(str(e))
        return 1
    except (DomainError, EngineError, SolverError, ValueError) as e:
        _err(str(e))
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
