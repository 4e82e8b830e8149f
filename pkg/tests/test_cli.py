import io
import json
import sys

import pytest

from psengine import bundled_games
from psengine.cli import ascii_grid, run_cli
from psengine.engine import init_level
from conftest import fixture_path
from gamekit import soko_source

LIME = str(bundled_games()["lime_rick"])
SOKO = str(bundled_games()["sokoban_basic"])


@pytest.fixture
def probe(tmp_path):
    p = tmp_path / "probe.txt"
    p.write_text(soko_source("#####\n#P*O#\n#####"))
    return str(p)


def test_validate_lime(capsys):
    assert run_cli(["validate", LIME]) == 0
    # hand count from the listing: 4 UP rules x1, 2 horizontal x2, 2 apple rules x1,
    # [ > Player ] x4, 2 DOWN rules x1
    assert "11 objects, 11 rules -> 16 compiled variants" in capsys.readouterr().out


def test_validate_json(capsys):
    assert run_cli(["validate", LIME, "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["ok"] and d["objects"] == 11 and d["variants"] == 16 and d["levels"] == 10


def test_validate_compile_error(capsys):
    assert run_cli(["validate", fixture_path("ledger/rigid.txt")]) == 1
    assert "rigid" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run_cli(["validate", LIME, "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    assert run_cli([]) == 2


def test_nonpositive_override_is_usage_error():
    assert run_cli(["solve", SOKO, "--level", "0", "--max-steps", "0"]) == 2


def test_missing_file_is_domain_error(capsys):
    assert run_cli(["validate", "/nonexistent/game.txt"]) == 1
    assert capsys.readouterr().err


def test_bad_level_is_domain_error(probe):
    assert run_cli(["solve", probe, "--level", "7"]) == 1


def test_solve_all_sokoban(tmp_path):
    assert run_cli(["--quiet", "solve", SOKO, "--all", "--out-dir", str(tmp_path)]) == 0
    files = sorted(tmp_path.glob("*.solution.json"))
    assert len(files) == 2
    assert all(json.loads(f.read_text())["solved"] for f in files)


def test_solve_then_replay(probe, tmp_path, capsys):
    sol = tmp_path / "sol.json"
    assert run_cli(["solve", probe, "--level", "0", "--out", str(sol)]) == 0
    assert json.loads(sol.read_text())["actions"] == [3]
    capsys.readouterr()
    assert run_cli(["replay", probe, "--level", "0", "--solution", str(sol)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["won"] and rep["status"] == "success"


def test_replay_corrupted_digest(probe, tmp_path, capsys):
    sol = tmp_path / "sol.json"
    run_cli(["solve", probe, "--level", "0", "--out", str(sol)])
    capsys.readouterr()
    code = run_cli(["replay", probe, "--level", "0", "--solution", str(sol),
                    "--expect-digest", "0000000000000000"])
    assert code == 1
    assert json.loads(capsys.readouterr().out)["status"] == "state_error"


def test_replay_losing_actions(probe, tmp_path, capsys):
    sol = tmp_path / "sol.json"
    sol.write_text(json.dumps({"actions": [2, 2]}))
    assert run_cli(["replay", probe, "--level", "0", "--solution", str(sol)]) == 1
    assert json.loads(capsys.readouterr().out)["status"] == "solution_error"


def test_replay_malformed_file(probe, tmp_path):
    sol = tmp_path / "sol.json"
    sol.write_text("{not json")
    assert run_cli(["replay", probe, "--level", "0", "--solution", str(sol)]) == 1
    sol.write_text(json.dumps({"actions": [9]}))
    assert run_cli(["replay", probe, "--level", "0", "--solution", str(sol)]) == 1


def test_profile_writes_reports(probe, tmp_path):
    assert run_cli(["--quiet", "profile", probe, "--level", "0", "--envs", "3", "--steps", "10",
                    "--workers", "1", "--out-dir", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "probe_level0_profile.json").read_text())
    assert d["total_ticks"] == 30
    assert (tmp_path / "probe_level0_profile.csv").exists()


def test_profile_sweep(probe, tmp_path):
    assert run_cli(["--quiet", "profile", probe, "--level", "0", "--steps", "5", "--sweep",
                    "--sizes", "1,2", "--workers", "1", "--out-dir", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "probe_level0_profile.json").read_text())
    assert [r["num_envs"] for r in d["series"]] == [1, 2]
    assert (tmp_path / "probe_level0_profile.png").exists()


def test_render(probe, tmp_path):
    sol = tmp_path / "sol.json"
    sol.write_text(json.dumps({"actions": [3]}))
    out = tmp_path / "frames"
    assert run_cli(["--quiet", "render", probe, "--level", "0", "--solution", str(sol),
                    "--scale", "2", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["probe_0_0.png", "probe_0_1.png"]


def test_corpus(tmp_path, capsys):
    assert run_cli(["corpus", fixture_path("ledger"), "--max-steps", "10000",
                    "--out-dir", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "ledger.json").read_text())
    assert d["total_levels"] == 6 and set(d["counts"].values()) == {1}
    assert "Total Levels" in capsys.readouterr().out


def test_corpus_not_a_directory():
    assert run_cli(["corpus", "/nonexistent/dir"]) == 1


def _play(monkeypatch, path, keys):
    monkeypatch.setattr(sys, "stdin", io.StringIO("".join(k + "\n" for k in keys)))
    return run_cli(["play", path, "--level", "0"])


def _digests(text):
    return [ln.split()[0].split("=")[1] for ln in text.splitlines() if ln.startswith("digest=")]


def test_play_win(monkeypatch, probe, capsys):
    assert _play(monkeypatch, probe, ["right"]) == 0
    assert "won" in capsys.readouterr().out


def test_play_undo_is_exact(monkeypatch, capsys):
    _play(monkeypatch, SOKO, ["up", "z", "up"])
    d = _digests(capsys.readouterr().out)
    assert d[0] == d[2]


def test_play_restart(monkeypatch, capsys):
    from psengine import load_game
    from psengine.engine import state_digest
    g = load_game(open(SOKO).read())
    start = state_digest(init_level(g, 0)[0])
    _play(monkeypatch, SOKO, ["up", "r", "q"])
    d = _digests(capsys.readouterr().out)
    assert d[0] != start and d[1] == start


def test_ascii_grid_uses_glyphs():
    from psengine import load_game
    g = load_game(soko_source("#####\n#P*O#\n#.@.#\n#####"))
    st, _ = init_level(g, 0)
    # glyphs are case-insensitive and stored folded
    assert ascii_grid(g, st).splitlines() == ["#####", "#p*o#", "#.@.#", "#####"]
