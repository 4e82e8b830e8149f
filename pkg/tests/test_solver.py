import itertools
import json

import pytest

from psengine import load_bundled
from psengine.engine import EngineLimits, init_level, state_digest, tick
from psengine.solver import (
    SearchLimits, Solution, SolverError, default_action_set, hash_state, load_solution,
    replay, solve_bfs,
)
from gamekit import soko


def brute_force_min(game, level, depth, actions=(0, 1, 2, 3)):
    """Shortest winning sequence length by plain enumeration, or None."""
    start, _ = init_level(game, level)

    def search(st, left):
        for a in actions:
            nxt, out = tick(game, st, a)
            if out.won:
                return True
            if left > 1 and search(nxt, left - 1):
                return True
        return False

    for n in range(1, depth + 1):
        if search(start, n):
            return n
    return None


PROBE = "#####\n#P..#\n#.*.#\n#..O#\n#####"


def test_one_step_exit():
    g = soko(".PO", rules="", wins="Some Player on Target")
    sol = solve_bfs(g, 0)
    assert sol.solved and sol.actions == [3]
    assert sol.nodes_expanded <= 5
    assert sol.stop_reason == "won"


def test_already_won():
    g = soko("P@", rules="")
    sol = solve_bfs(g, 0)
    assert sol.solved and sol.actions == [] and sol.env_steps == 0


def test_sokoban_basic_solved(sokoban):
    for level in sokoban.playable_levels():
        sol = solve_bfs(sokoban, level)
        assert sol.solved
        rep = replay(sokoban, level, sol.actions)
        assert rep.won and rep.final_digest == sol.terminal_digest
        assert len(sol.actions) <= sol.env_steps


def test_matches_brute_force_probe():
    g = soko(PROBE)
    sol = solve_bfs(g, 0)
    assert sol.solved
    assert len(sol.actions) == brute_force_min(g, 0, 8) == 5


def test_dedupe_off_same_length():
    g = soko(PROBE)
    a = solve_bfs(g, 0)
    b = solve_bfs(g, 0, SearchLimits(dedupe=False))
    assert a.solved and b.solved
    assert len(a.actions) == len(b.actions)
    assert b.env_steps >= a.env_steps


def test_budget_exhaustion_returns_partial():
    g = soko("#######\n#P*...#\n#....O#\n#######")
    sol = solve_bfs(g, 0, SearchLimits(max_env_steps=8))
    assert not sol.solved
    assert sol.stop_reason == "steps"
    assert sol.env_steps >= 8
    st, _ = init_level(g, 0)
    for a in sol.actions:
        st, _ = tick(g, st, a)
    assert state_digest(st) == sol.terminal_digest


def test_monotone_budget():
    g = soko(PROBE)
    full = solve_bfs(g, 0)
    for cap in (full.env_steps, full.env_steps + 50, 10 * full.env_steps):
        assert solve_bfs(g, 0, SearchLimits(max_env_steps=cap)).solved


def test_unsolvable_exhausts():
    g = soko("#####\n#P.*#\n#..O#\n#####")
    sol = solve_bfs(g, 0)
    assert not sol.solved and sol.stop_reason == "exhausted"


def test_search_deterministic(sokoban):
    a = solve_bfs(sokoban, 0)
    b = solve_bfs(sokoban, 0)
    assert (a.actions, a.env_steps, a.nodes_expanded, a.terminal_digest) == \
        (b.actions, b.env_steps, b.nodes_expanded, b.terminal_digest)


def test_default_action_set(lime):
    assert default_action_set(lime) == [0, 1, 2, 3]
    g = load_bundled("slidings")
    assert default_action_set(g) == [0, 1, 2, 3, 4]
    g = soko("P.", rules="[ action Player ] -> [ Crate ]", prelude="noaction")
    assert default_action_set(g) == [0, 1, 2, 3]


def test_random_game_needs_seed():
    g = soko("P..O", rules="random [ Player | no Crate ] -> [ Player | Crate ]", wins="Some Crate on Target")
    with pytest.raises(SolverError):
        solve_bfs(g, 0)
    sol = solve_bfs(g, 0, SearchLimits(max_env_steps=500), engine_limits=EngineLimits(rng_seed=1))
    assert sol.env_steps > 0


def test_hash_state_stable(sokoban):
    st, _ = init_level(sokoban, 0)
    assert hash_state(st) == hash_state(st.copy())
    assert len(hash_state(st)) == 16


def test_replay_truncated(sokoban):
    sol = solve_bfs(sokoban, 0)
    rep = replay(sokoban, 0, sol.actions[:-1])
    assert not rep.won and rep.status == "solution_error"


def test_replay_digest_mismatch(sokoban):
    sol = solve_bfs(sokoban, 0)
    rep = replay(sokoban, 0, sol.actions, expected_digest="0" * 16)
    assert rep.won and rep.status == "state_error"
    assert rep.divergence_step == len(sol.actions)


def test_replay_trajectory_divergence(sokoban):
    sol = solve_bfs(sokoban, 0)
    st, _ = init_level(sokoban, 0)
    traj = []
    for a in sol.actions:
        st, _ = tick(sokoban, st, a)
        traj.append(state_digest(st))
    traj[3] = "f" * 16
    rep = replay(sokoban, 0, sol.actions, expected_trajectory=traj)
    assert rep.divergence_step == 3


def test_replay_runtime_error():
    g = soko("P*.........#", rules="[ Crate ] -> [ right Crate ] again", wins="Some Target")
    rep = replay(g, 0, [5], engine_limits=EngineLimits(max_again_ticks=2))
    assert rep.status == "runtime_error" and rep.error


def test_replay_rejects_bad_codes(sokoban):
    with pytest.raises(ValueError):
        replay(sokoban, 0, [0, 7])


def test_solution_json_round_trip(tmp_path, sokoban):
    sol = solve_bfs(sokoban, 1)
    path = tmp_path / "s.json"
    path.write_text(sol.dumps())
    doc = json.loads(path.read_text())
    for key in ("game", "level", "actions", "solved", "env_steps", "nodes_expanded",
                "elapsed_s", "best_score", "terminal_digest"):
        assert key in doc
    back = load_solution(path)
    assert back.actions == sol.actions and back.terminal_digest == sol.terminal_digest
    assert isinstance(Solution.from_dict(doc), Solution)


@pytest.mark.parametrize("fixture", ["zen_walks.json", "notsnake_solution.json"])
def test_hard_levels_are_winnable(fixture):
    # the searches for these levels run out of budget; recorded move lists show
    # the levels themselves can be won
    from conftest import fixture_path
    data = json.load(open(fixture_path(fixture)))
    game = load_bundled(data["game"])
    assert sorted(int(k) for k in data["solutions"]) == game.playable_levels()
    for level, actions in data["solutions"].items():
        rep = replay(game, int(level), actions)
        assert rep.won and rep.steps_run == len(actions)
