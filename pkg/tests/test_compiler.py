import json

import pytest

from psengine import bundled_games, load_bundled
from psengine.compiler import CompileError, load_game
from psengine.grammar import PuzzleScriptError, UnsupportedFeatureError
from gamekit import soko, soko_source


def ids(game, *names):
    return frozenset(game.object_table.lookup(n) for n in names)


def test_lime_tables(lime):
    assert lime.num_objects == 11
    assert lime.num_layers == 4
    assert lime.rule_line_count == 11
    assert lime.variant_count == 16
    heads = ids(lime, "playerhead1", "playerhead2", "playerhead3", "playerhead4")
    assert lime.player_ids == heads
    assert lime.legend_table.meta["obstacle"] == heads | ids(lime, "playerbodyh", "playerbodyv", "wall", "crate")


def test_lime_layers(lime):
    lt = lime.layer_table
    top = {lt.layer_of[i] for i in ids(lime, "playerhead1", "playerhead4", "wall", "crate")}
    assert top == {3}
    assert lt.layers[0] == (lime.background_id,)


def test_lime_first_level(lime):
    lv = lime.levels[1]
    assert (lv.width, lv.height) == (19, 15)
    assert lime.levels[0].is_message
    w = lime.win_conditions[0]
    assert w.kind == "some_on"
    assert w.a == lime.player_ids and w.b == ids(lime, "exit")


def test_glyph_binding(lime):
    assert lime.legend_table.glyphs["p"] == ("atom", ids(lime, "playerhead1"))


@pytest.mark.parametrize("line,expected", [
    ("[ > Player | Crate ] -> [ > Player | > Crate ]", ["up", "down", "left", "right"]),
    ("horizontal [ > Player | Crate ] -> [ > Player | > Crate ]", ["left", "right"]),
    ("up [ up Player ] -> [ Player ]", ["up"]),
    ("[ Player Target ] -> [ Player ]", ["up"]),
    ("vertical [ Crate ] -> [ ]", ["up"]),  # nothing directional: collapses
    ("vertical [ Crate | Target ] -> [ Crate | Target ]", ["up", "down"]),
])
def test_variant_counts(line, expected):
    g = soko("P.", rules=line)
    assert [r.direction for r in g.groups[0].rules] == expected


def test_relative_tokens_rotate():
    g = soko("P.", rules="[ > Player | < Crate | ^ Target | v Wall ] -> [ > Player | < Crate | ^ Target | v Wall ]")
    by_dir = {r.direction: r for r in g.groups[0].rules}
    quals = [c.entries[0].qualifier for c in by_dir["right"].lhs[0]]
    assert quals == ["right", "left", "up", "down"]
    quals = [c.entries[0].qualifier for c in by_dir["up"].lhs[0]]
    assert quals == ["up", "down", "left", "right"]


def test_plus_joins_group():
    g = soko("P.", rules="[ Crate ] -> [ ]\n+ [ Target ] -> [ ]")
    assert len(g.groups) == 1
    assert len(g.groups[0].rules) == 2


def test_late_partition_and_loops():
    rules = "\n".join([
        "[ Crate ] -> [ ]",
        "startloop",
        "[ Target ] -> [ ]",
        "[ Wall ] -> [ ]",
        "endloop",
        "late [ Player ] -> [ Player ]",
    ])
    g = soko("P.", rules=rules)
    assert [b.kind for b in g.blocks] == ["plain", "loop"]
    assert len(g.blocks[1].groups) == 2
    assert len(g.late_groups) == 1 and g.late_groups[0].is_late


def test_rigid_rejected():
    with pytest.raises(UnsupportedFeatureError) as exc:
        soko("P.", rules="[ > Player | Crate ] -> [ > Player | rigid Crate ]")
    assert "rigid" in str(exc.value)


def test_unbound_meta_on_rhs():
    with pytest.raises(CompileError):
        soko("P.", rules="[ Player ] -> [ Movable ]")


def test_aggregate_in_rule_rejected():
    src = soko_source("P.", rules="[ @ ] -> [ ]")
    with pytest.raises(PuzzleScriptError):
        load_game(src)


def test_unknown_level_glyph():
    with pytest.raises(PuzzleScriptError):
        soko("P.z")


def test_unknown_win_operand():
    with pytest.raises(PuzzleScriptError):
        soko("P.", wins="All Dragon on Target")


def test_layer_reassignment_warns():
    src = soko_source("P.").replace("Player, Wall, Crate", "Player, Wall, Crate\nTarget")
    g = load_game(src)
    assert g.layer_table.layer_of[g.object_table.lookup("target")] == 3
    assert any("target" in d.message.lower() for d in g.warnings)


def test_levels_one_atom_per_layer(all_games):
    for name, g in all_games.items():
        for lv in g.levels:
            if lv.is_message:
                continue
            for cell in lv.cells:
                layers = [g.layer_table.layer_of[i] for i in cell]
                assert len(layers) == len(set(layers)), name
                assert g.background_id in cell


def test_empty_rules_game():
    g = load_bundled("blocks")
    assert g.blocks == [] or all(not b.groups for b in g.blocks)
    assert g.variant_count == 0


def test_compile_deterministic():
    path = bundled_games()["lime_rick"]
    text = open(path, encoding="utf-8").read()
    assert load_game(text).dumps() == load_game(text).dumps()


def test_gamedef_json_versioned(lime):
    doc = json.loads(lime.dumps())
    assert doc["format"] == "psengine.gamedef/1"
    assert len(doc["objects"]) == 11


def test_every_bundled_game_compiles(all_games):
    assert len(all_games) == 13
