"""PuzzleScript toolkit: parser, compiler, tick engine, agent API, BFS solver
and benchmarking harness."""
from importlib import resources

from psengine.compiler import GameDef, load_game, load_game_file
from psengine.engine import EngineLimits, GridState, StepOutcome, check_win, init_level, tick

__version__ = "0.1.0"


def bundled_games() -> dict:
    """Name -> path of the game files shipped with the package."""
    root = resources.files("psengine") / "games"
    return {p.name[:-4]: p for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".txt")}


def load_bundled(name: str) -> GameDef:
    return load_game(bundled_games()[name].read_text(encoding="utf-8"))


__all__ = ["EngineLimits", "GameDef", "GridState", "StepOutcome", "bundled_games", "check_win",
           "init_level", "load_bundled", "load_game", "load_game_file", "tick"]
