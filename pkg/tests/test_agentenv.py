import json
import random

import numpy as np
import pytest

from psengine.agentenv import (
    EpisodeDone, HeuristicConfig, env_reset, env_step, observation_from_bytes,
    observation_to_bytes, observation_to_json, observe, plane_count,
    state_from_observation, win_distance,
)
from psengine.engine import (
    DOWN, LEFT, RIGHT, UP, check_win, init_level, level_state, state_digest, tick,
)
from gamekit import soko


def test_distance_worked_example():
    # target at (2,3), crate at (0,0), player at (0,1): 5 for the pair, 1 for the player
    g = soko("*...\nP...\n....\n..O.", rules="")
    st = level_state(g, 0)
    assert win_distance(g, st) == 6
    assert win_distance(g, st, HeuristicConfig(include_player_term=False)) == 5


def test_distance_zero_when_covered():
    g = soko("P@.@", rules="")
    assert win_distance(g, level_state(g, 0)) == 0


def test_distance_counts_for_no():
    g = soko("P****", rules="", wins="No Crate")
    assert win_distance(g, level_state(g, 0)) == 4


def test_distance_penalty_when_no_partner():
    g = soko("P..O", rules="")
    st = level_state(g, 0)
    assert win_distance(g, st, HeuristicConfig(include_player_term=False)) == 4 + 1
    assert win_distance(g, st, HeuristicConfig(include_player_term=False, unreachable_penalty=9)) == 9


def test_some_on_distance():
    g = soko("P*..O", rules="", wins="Some Crate on Target")
    st = level_state(g, 0)
    assert win_distance(g, st, HeuristicConfig(include_player_term=False)) == 3


def test_negative_penalty_rejected():
    with pytest.raises(ValueError):
        HeuristicConfig(unreachable_penalty=-1)


def test_reset_lime(lime):
    env, obs = env_reset(lime, 1)
    head = lime.object_table.lookup("playerhead1")
    assert obs.shape == (plane_count(lime), 15, 19)
    assert obs[head].sum() == 1
    env2, obs2 = env_reset(lime, 1)
    assert np.array_equal(obs, obs2)


def test_reset_message_rejected(lime):
    with pytest.raises(ValueError):
        env_reset(lime, 0)


def test_push_closer_rewards_one():
    g = soko("P*.O", rules="[ > Player | Crate ] -> [ > Player | > Crate ]")
    env, _ = env_reset(g, 0)
    env, obs, reward, done, info = env_step(env, RIGHT)
    assert reward == 1
    assert not done


def test_noop_rewards_zero():
    g = soko("#P*.O", rules="[ > Player | Crate ] -> [ > Player | > Crate ]")
    env, _ = env_reset(g, 0)
    env, obs, reward, done, info = env_step(env, LEFT)
    assert reward == 0
    assert not info["outcome"].changed


def test_winning_step_done():
    g = soko("P*O", rules="[ > Player | Crate ] -> [ > Player | > Crate ]")
    env, _ = env_reset(g, 0)
    env, obs, reward, done, info = env_step(env, RIGHT)
    assert done and env.won
    assert env.score == 0
    with pytest.raises(EpisodeDone):
        env_step(env, RIGHT)


def test_horizon_ends_episode():
    g = soko("P*..O", rules="")
    env, _ = env_reset(g, 0, horizon=3)
    for _ in range(3):
        env, _, _, done, _ = env_step(env, UP)
    assert done and not env.won


def test_step_does_not_mutate(sokoban):
    env, _ = env_reset(sokoban, 0)
    before = state_digest(env.grid)
    env_step(env, RIGHT)
    assert state_digest(env.grid) == before and env.steps == 0


def test_telescoping(all_games):
    rng = random.Random(11)
    for name, g in all_games.items():
        if g.uses_randomness():
            continue
        level = g.playable_levels()[0]
        env, _ = env_reset(g, level, horizon=10_000)
        start = env.score
        total = 0
        for _ in range(60):
            env, _, r, done, _ = env_step(env, rng.randrange(6))
            total += r
            if done:
                break
        assert total == start - env.score, name


def test_zero_distance_implies_win(all_games):
    rng = random.Random(3)
    for name, g in all_games.items():
        if not g.win_conditions or g.uses_randomness():
            continue
        for level in g.playable_levels()[:3]:
            st, _ = init_level(g, level)
            for _ in range(40):
                st, out = tick(g, st, rng.randrange(5))
                if win_distance(g, st) == 0:
                    assert check_win(g, st), name


def test_observation_round_trip(sokoban):
    env, obs = env_reset(sokoban, 0)
    env, obs, *_ = env_step(env, DOWN)
    back = state_from_observation(sokoban, obs)
    assert state_digest(back) == state_digest(env.grid)
    assert np.array_equal(observe(sokoban, back), obs)


def test_observation_bytes_round_trip(lime):
    _, obs = env_reset(lime, 1)
    data = observation_to_bytes(obs)
    assert np.frombuffer(data[:12], dtype="<u4").tolist() == list(obs.shape)
    assert np.array_equal(observation_from_bytes(data), obs)


def test_observation_json(sokoban):
    _, obs = env_reset(sokoban, 0)
    doc = json.loads(observation_to_json(sokoban, obs))
    assert doc["shape"] == list(obs.shape)
    assert "player" in doc["planes"]


def test_last_input_plane_marks_player(sokoban):
    env, _ = env_reset(sokoban, 0)
    env, obs, *_ = env_step(env, LEFT)
    assert obs[-1].sum() == 1
