"""Always-on property suites over the bundled games and generated micro-games."""
import random

import pytest

from psengine import bundled_games, load_bundled, load_game
from psengine.agentenv import env_reset, env_step
from psengine.engine import (
    EngineLimits, GridState, apply_rule_group, init_level, layer_violations, state_digest, tick,
)
from psengine.solver import SearchLimits, default_action_set, replay, solve_bfs
from gamekit import PUSH, soko_source

GAMES = sorted(bundled_games())
RANDOM_TICKS = 10_000
FIXPOINT_STATES = 1_000
MICRO_GAMES = 50
MICRO_DEPTH = 8


def rollout_states(game, n, seed, actions=None):
    """Yield (state, outcome) for n uniform-random ticks, cycling through the
    playable levels and resetting on win or every 200 ticks."""
    rng = random.Random(seed)
    levels = game.playable_levels()
    acts = actions or default_action_set(game) + [5]
    st = None
    for i in range(n):
        if st is None or i % 200 == 0:
            st, _ = init_level(game, rng.choice(levels))
        st, out = tick(game, st, rng.choice(acts))
        yield st, out
        if out.won:
            st = None


@pytest.mark.parametrize("name", GAMES)
def test_layers_exclusive_and_ticks_quiescent(name):
    game = load_bundled(name)
    bad = []
    for i, (st, _) in enumerate(rollout_states(game, RANDOM_TICKS, seed=k_seed(name))):
        if layer_violations(game, st) or st.has_forces():
            bad.append(i)
    assert bad == []


def random_cells(game, rng, n):
    """Any layer-consistent filling of n cells."""
    layers = [sorted(l) for l in game.layer_table.layers]
    cells = []
    for _ in range(n):
        c = 1 << game.background_id
        for ids in layers:
            if game.background_id not in ids and rng.random() < 0.5:
                c |= 1 << rng.choice(ids)
        cells.append(c)
    return cells


def stamped(game, w, h, cells, code):
    """State whose only forces are one input direction on every player object,
    which is what rule evaluation starts from in a real tick."""
    moves = [0] * len(cells)
    if code < 5:
        for i, c in enumerate(cells):
            for a in game.player_ids:
                if c >> a & 1:
                    L = game.layer_table.layer_of[a]
                    moves[i] |= 1 << (5 * L + code)
    return GridState.from_cells(w, h, cells, game.num_objects, game.num_layers, moves=moves)


def sampled_states(game, n, seed):
    """Half reachable states, half random fillings, each with a random input stamped."""
    rng = random.Random(seed)
    out = [stamped(game, st.width, st.height, st.cells, rng.randrange(6))
           for st, _ in rollout_states(game, n // 2, seed)]
    while len(out) < n:
        w, h = rng.randint(1, 5), rng.randint(1, 5)
        out.append(stamped(game, w, h, random_cells(game, rng, w * h), rng.randrange(6)))
    return out


@pytest.mark.parametrize("name", GAMES)
def test_rule_groups_idempotent(name):
    game = load_bundled(name)
    groups = [g for g in game.groups + game.late_groups if not g.is_random]
    if not groups:
        pytest.skip("no deterministic rule groups")
    bad = []
    for k, st in enumerate(sampled_states(game, FIXPOINT_STATES, seed=k_seed(name))):
        for g in groups:
            once, _ = apply_rule_group(game, st, g)
            twice, changed = apply_rule_group(game, once, g)
            if changed or twice != once:
                bad.append((k, g.line))
    assert bad == []


def k_seed(name):
    return sum(map(ord, name))


@pytest.mark.parametrize("name", GAMES)
def test_reward_telescopes(name):
    game = load_bundled(name)
    rng = random.Random(k_seed(name))
    acts = default_action_set(game) + [5]
    for level in game.playable_levels()[:3]:
        env, _ = env_reset(game, level, horizon=150)
        start = env.score
        total = 0
        while not env.done:
            env, _, r, _, _ = env_step(env, rng.choice(acts))
            total += r
        assert total == start - env.score
        if env.won:
            assert env.score == 0


@pytest.mark.parametrize("name", GAMES)
def test_replay_deterministic(name):
    game = load_bundled(name)
    rng = random.Random(k_seed(name) + 1)
    acts = default_action_set(game) + [5]
    level = game.playable_levels()[0]
    seq = [rng.choice(acts) for _ in range(200)]
    a = replay(game, level, seq)
    b = replay(game, level, seq)
    assert a.final_digest == b.final_digest and a.steps_run == b.steps_run


RANDOM_GAME = soko_source("P.*.\n....\n.*..", rules="[ stationary Crate ] -> [ randomdir Crate ]",
                          wins="Some Player on Target")


def test_random_game_same_seed_same_digest():
    game = load_game(RANDOM_GAME)
    seq = [3, 1, 5, 5, 2, 0, 5, 3] * 5
    digests = []
    for seed in (11, 11, 12):
        lim = EngineLimits(rng_seed=seed)
        digests.append(replay(game, 0, seq, engine_limits=lim).final_digest)
    assert digests[0] == digests[1]
    assert digests[0] != digests[2]


# -- BFS against exhaustive search on generated micro-games --------------------------

PULL = PUSH + "\n[ < Player | Crate ] -> [ < Player | < Crate ]"


def micro_game(rng):
    w, h = rng.randint(2, 4), rng.randint(2, 4)
    cells = ["#" if rng.random() < 0.2 else "." for _ in range(w * h)]
    free = [i for i, c in enumerate(cells) if c == "."]
    rng.shuffle(free)
    kind = rng.choice(["push", "push", "pull", "reach"])
    crates = 0 if kind == "reach" else rng.randint(1, 2)
    if len(free) < 2 + 2 * crates:
        return None
    cells[free.pop()] = "P"
    if kind == "reach":
        cells[free.pop()] = "O"
    for _ in range(crates):
        cells[free.pop()] = "*"
        cells[free.pop()] = "O"
    level = "\n".join("".join(cells[y * w:(y + 1) * w]) for y in range(h))
    rules = {"push": PUSH, "pull": PULL, "reach": ""}[kind]
    wins = "Some Player on Target" if kind == "reach" else "All Target on Crate"
    return load_game(soko_source(level, rules=rules, wins=wins)), level


def exhaustive_min(game, depth):
    """Shortest win within ``depth`` by depth-first enumeration of every action
    sequence; a transposition table skips states already explored with at
    least as many moves left."""
    start, _ = init_level(game, 0)
    best = [None]
    seen = {}

    def dfs(st, d):
        if best[0] is not None and d >= best[0]:
            return
        key = state_digest(st)
        left = depth - d
        if seen.get(key, -1) >= left:
            return
        seen[key] = left
        if left == 0:
            return
        for a in (0, 1, 2, 3):
            nxt, out = tick(game, st, a)
            if out.won:
                best[0] = d + 1
                return
            dfs(nxt, d + 1)

    dfs(start, 0)
    return best[0]


def micro_games(max_unsolvable=10):
    """Seeded micro-games, at most ``max_unsolvable`` without a short win."""
    rng = random.Random(2024)
    out = []
    dead = 0
    while len(out) < MICRO_GAMES:
        made = micro_game(rng)
        if made is None or init_level(made[0], 0)[1].won:
            continue
        want = exhaustive_min(made[0], MICRO_DEPTH)
        if want is None:
            if dead == max_unsolvable:
                continue
            dead += 1
        out.append(made + (want,))
    return out


MICRO = micro_games()


@pytest.mark.parametrize("idx", range(MICRO_GAMES))
def test_bfs_matches_exhaustive(idx):
    game, level, want = MICRO[idx]
    sol = solve_bfs(game, 0, SearchLimits(max_env_steps=200_000, timeout=30))
    assert sol.stop_reason in ("won", "exhausted")
    if want is None:
        assert not sol.solved or len(sol.actions) > MICRO_DEPTH, level
    else:
        assert sol.solved and len(sol.actions) == want, level
