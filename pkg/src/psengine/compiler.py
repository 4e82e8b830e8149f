"""Turn a parsed :class:`~psengine.grammar.GameAst` into an executable GameDef.

Legend names are resolved to sets of atomic object ids, collision layers are
assigned, and every rule line is expanded into direction-specialized
variants.  Meta-objects (``or`` definitions) are *not* expanded into atomic
sub-rules; the engine binds the concrete object at match time.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Union

from psengine.colors import resolve_color
from psengine.grammar import (
    Diagnostic,
    GameAst,
    LoopMarker,
    PuzzleScriptError,
    RuleAst,
    SourceText,
    UnsupportedFeatureError,
    parse,
    preprocess,
)

FORMAT_VERSION = "psengine.gamedef/1"

DIRECTIONS = ("up", "down", "left", "right")
DIR_BITS = {"up": 1, "down": 2, "left": 4, "right": 8, "action": 16}
DELTAS = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0)}
OPPOSITE = {"up": "down", "down": "up", "left": "right", "right": "left"}

# relative token -> absolute qualifier, per rule direction
RELATIVE = {
    "up": {">": "up", "<": "down", "^": "left", "v": "right",
           "parallel": "vertical", "perpendicular": "horizontal"},
    "down": {">": "down", "<": "up", "^": "right", "v": "left",
             "parallel": "vertical", "perpendicular": "horizontal"},
    "left": {">": "left", "<": "right", "^": "down", "v": "up",
             "parallel": "horizontal", "perpendicular": "vertical"},
    "right": {">": "right", "<": "left", "^": "up", "v": "down",
              "parallel": "horizontal", "perpendicular": "vertical"},
}
RELATIVE_TOKENS = frozenset({">", "<", "^", "v", "parallel", "perpendicular"})

# qualifiers that match one of several directions and bind the one found
DIRECTION_SETS = {
    "moving": ("up", "down", "left", "right"),
    "horizontal": ("left", "right"),
    "vertical": ("up", "down"),
}
SINGLE_FORCES = ("up", "down", "left", "right", "action")

PREFIX_DIRECTIONS = {
    "up": ("up",), "down": ("down",), "left": ("left",), "right": ("right",),
    "horizontal": ("left", "right"), "vertical": ("up", "down"),
    "orthogonal": DIRECTIONS,
}


class CompileError(PuzzleScriptError):
    pass


def _err(section: str, line: int, message: str) -> Diagnostic:
    return Diagnostic("error", section, line, message)


# -- tables -------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectRecord:
    id: int
    name: str
    glyph: Optional[str]
    colors: tuple  # rgb triples; () for transparent
    sprite: Optional[tuple]  # 5x5 palette indices, -1 transparent


@dataclass
class ObjectTable:
    objects: tuple
    by_name: dict

    def __len__(self) -> int:
        return len(self.objects)

    def lookup(self, name: str) -> Optional[int]:
        return self.by_name.get(name.lower())

    def names(self, ids) -> list:
        return [self.objects[i].name for i in sorted(ids)]


@dataclass
class LegendTable:
    meta: dict  # name -> frozenset of ids (disjunctive)
    aggregate: dict  # name -> frozenset of ids (conjunctive)
    glyphs: dict  # char -> ("atom" | "meta" | "aggregate", frozenset)
    aliases: dict = field(default_factory=dict)  # name -> atomic id

    def resolve(self, name: str, objects: ObjectTable):
        """Return (kind, ids) for a name, kind in atom/meta/aggregate, or None."""
        i = objects.lookup(name)
        if i is not None:
            return ("atom", frozenset((i,)))
        if name in self.aliases:
            return ("atom", frozenset((self.aliases[name],)))
        if name in self.meta:
            ids = self.meta[name]
            return ("atom", ids) if len(ids) == 1 else ("meta", ids)
        if name in self.aggregate:
            ids = self.aggregate[name]
            return ("atom", ids) if len(ids) == 1 else ("aggregate", ids)
        if len(name) == 1 and name in self.glyphs:
            return self.glyphs[name]
        return None


@dataclass
class LayerTable:
    layer_of: tuple  # atomic id -> layer index (-1 when unassigned)
    layers: tuple  # tuple of tuples of atomic ids

    def __len__(self) -> int:
        return len(self.layers)


# -- rules --------------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    name: str
    ids: frozenset
    qualifier: Optional[str]  # None | no | stationary | up.. | action | moving | horizontal | vertical | randomdir
    is_meta: bool

    def to_json(self) -> list:
        return [self.qualifier, self.name]


@dataclass(frozen=True)
class CellPattern:
    entries: tuple = ()
    is_ellipsis: bool = False

    def to_json(self):
        return "..." if self.is_ellipsis else [e.to_json() for e in self.entries]


@dataclass(frozen=True)
class CompiledRule:
    direction: str
    lhs: tuple  # tuple of kernels, each a tuple of CellPattern
    rhs: tuple  # parallel to lhs, or ()
    commands: tuple
    is_late: bool
    is_random: bool
    line: int
    source: str = ""

    @property
    def lhs_kernels(self):
        return self.lhs

    @property
    def rhs_kernels(self):
        return self.rhs

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "lhs": [[c.to_json() for c in k] for k in self.lhs],
            "rhs": [[c.to_json() for c in k] for k in self.rhs],
            "commands": [list(c) for c in self.commands],
            "late": self.is_late,
            "random": self.is_random,
            "line": self.line,
        }


@dataclass
class RuleGroup:
    rules: list
    is_late: bool
    is_random: bool
    line: int

    def to_json(self) -> dict:
        return {"line": self.line, "late": self.is_late, "random": self.is_random,
                "rules": [r.to_json() for r in self.rules]}


@dataclass
class Block:
    kind: str  # "plain" | "loop"
    groups: list

    def to_json(self) -> dict:
        return {"kind": self.kind, "groups": [g.to_json() for g in self.groups]}


@dataclass(frozen=True)
class WinCondition:
    kind: str  # all_on | some_on | no_on | some | none
    a: frozenset
    b: Optional[frozenset] = None
    a_all: bool = False  # aggregate operand: every member must be present
    b_all: bool = False
    text: str = ""

    def to_json(self) -> dict:
        return {"kind": self.kind, "a": sorted(self.a), "b": sorted(self.b) if self.b else None,
                "a_all": self.a_all, "b_all": self.b_all}


@dataclass(frozen=True)
class LevelDef:
    width: int
    height: int
    cells: tuple  # row-major tuple of frozensets of atomic ids
    line: int

    is_message = False


@dataclass(frozen=True)
class MessageDef:
    text: str
    line: int

    is_message = True


@dataclass
class GameDef:
    object_table: ObjectTable
    legend_table: LegendTable
    layer_table: LayerTable
    blocks: list
    late_blocks: list
    win_conditions: list
    levels: list
    prelude: dict
    player_ids: frozenset
    background_id: int
    rule_line_count: int = 0
    warnings: list = field(default_factory=list)
    source_hash: str = ""

    def __getstate__(self):
        d = dict(self.__dict__)
        d.pop("_runtime", None)  # engine cache, rebuilt on demand
        return d

    @property
    def title(self) -> str:
        v = self.prelude.get("title")
        return v if isinstance(v, str) else "untitled"

    @property
    def late_groups(self) -> list:
        return [g for b in self.late_blocks for g in b.groups]

    @property
    def groups(self) -> list:
        return [g for b in self.blocks for g in b.groups]

    @property
    def num_objects(self) -> int:
        return len(self.object_table)

    @property
    def num_layers(self) -> int:
        return len(self.layer_table)

    @property
    def variant_count(self) -> int:
        return sum(len(g.rules) for g in self.groups + self.late_groups)

    def playable_levels(self) -> list:
        return [i for i, lv in enumerate(self.levels) if not lv.is_message]

    def uses_randomness(self) -> bool:
        for g in self.groups + self.late_groups:
            if g.is_random:
                return True
            for r in g.rules:
                for k in r.rhs:
                    for c in k:
                        if any(e.qualifier == "randomdir" for e in c.entries):
                            return True
        return False

    def references_action(self) -> bool:
        for g in self.groups + self.late_groups:
            for r in g.rules:
                for k in r.lhs:
                    for c in k:
                        if any(e.qualifier == "action" for e in c.entries):
                            return True
        return False

    def to_json(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "title": self.title,
            "objects": [{"id": o.id, "name": o.name, "glyph": o.glyph,
                         "layer": self.layer_table.layer_of[o.id]}
                        for o in self.object_table.objects],
            "layers": [list(layer) for layer in self.layer_table.layers],
            "player_ids": sorted(self.player_ids),
            "background_id": self.background_id,
            "blocks": [b.to_json() for b in self.blocks],
            "late_blocks": [b.to_json() for b in self.late_blocks],
            "win_conditions": [w.to_json() for w in self.win_conditions],
            "levels": [
                {"message": lv.text} if lv.is_message else
                {"width": lv.width, "height": lv.height,
                 "cells": [sorted(c) for c in lv.cells]}
                for lv in self.levels
            ],
            "prelude": {k: v for k, v in sorted(self.prelude.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


# -- object table -----------------------------------------------------------------

def build_objects(ast: GameAst) -> ObjectTable:
    objs = []
    by_name = {}
    diags = []
    for i, decl in enumerate(ast.objects):
        colors = tuple(resolve_color(c) or () for c in decl.colors)
        sprite = tuple(tuple(r) for r in decl.sprite) if decl.sprite else None
        objs.append(ObjectRecord(i, decl.name, decl.glyph, colors, sprite))
        if decl.name in by_name:
            diags.append(_err("objects", decl.line, f"duplicate object name '{decl.name}'"))
        by_name[decl.name] = i
    if diags:
        raise CompileError(diags)
    return ObjectTable(tuple(objs), by_name)


# -- legend -----------------------------------------------------------------------

def resolve_legend(ast: GameAst, objects: ObjectTable) -> LegendTable:
    defs = {}
    diags = []
    for decl in ast.legend:
        if objects.lookup(decl.name) is not None and not (
                decl.op is None and decl.items == [decl.name]):
            diags.append(_err("legend", decl.line, f"'{decl.name}' is already an object name"))
            continue
        if decl.name in defs:
            diags.append(_err("legend", decl.line, f"'{decl.name}' is defined twice"))
            continue
        defs[decl.name] = decl
    for obj in objects.objects:
        if obj.glyph and obj.glyph not in defs and objects.lookup(obj.glyph) is None:
            defs[obj.glyph] = None  # glyph declared on the object line

    resolved: dict = {}

    def resolve(name: str, line: int, stack: tuple):
        if objects.lookup(name) is not None:
            return ("atom", frozenset((objects.lookup(name),)))
        if name in resolved:
            return resolved[name]
        if name not in defs:
            raise CompileError([_err("legend", line, f"undefined name '{name}'")])
        if name in stack:
            raise CompileError([_err("legend", line, f"cyclic definition involving '{name}'")])
        decl = defs[name]
        if decl is None:
            obj = next(o for o in objects.objects if o.glyph == name)
            out = ("atom", frozenset((obj.id,)))
        else:
            parts = [resolve(item, decl.line, stack + (name,)) for item in decl.items]
            ids = frozenset().union(*(p[1] for p in parts))
            if decl.op is None:
                out = parts[0]
            elif decl.op == "or":
                if any(p[0] == "aggregate" for p in parts):
                    raise CompileError([_err("legend", decl.line,
                                             f"'{name}' mixes 'or' with an 'and' definition")])
                out = ("meta", ids)
            else:
                if any(p[0] == "meta" for p in parts):
                    raise CompileError([_err("legend", decl.line,
                                             f"'{name}' mixes 'and' with an 'or' definition")])
                out = ("aggregate", ids)
        resolved[name] = out
        return out

    for name, decl in defs.items():
        try:
            resolve(name, decl.line if decl else 0, ())
        except CompileError as e:
            diags.extend(e.diagnostics)
    if diags:
        raise CompileError(diags)

    meta, aggregate, aliases, glyphs = {}, {}, {}, {}
    for name, (kind, ids) in resolved.items():
        if kind == "meta":
            meta[name] = ids
        elif kind == "aggregate":
            aggregate[name] = ids
        else:
            aliases[name] = next(iter(ids))
        if len(name) == 1:
            glyphs[name] = (kind, ids)
    for obj in objects.objects:
        if obj.glyph:
            glyphs.setdefault(obj.glyph, ("atom", frozenset((obj.id,))))
    return LegendTable(meta, aggregate, glyphs, aliases)


# -- layers -----------------------------------------------------------------------

def build_layers(ast: GameAst, objects: ObjectTable, legend: LegendTable,
                 warnings: Optional[list] = None) -> LayerTable:
    layer_of = [-1] * len(objects)
    lines = []
    diags = []
    for li, (names, line) in enumerate(ast.collision_layers):
        members = []
        for name in names:
            r = legend.resolve(name, objects)
            if r is None:
                diags.append(_err("collisionlayers", line, f"unknown name '{name}'"))
                continue
            for i in sorted(r[1]):
                if layer_of[i] != -1 and layer_of[i] != li:
                    if warnings is not None:
                        warnings.append(Diagnostic(
                            "warning", "collisionlayers", line,
                            f"'{objects.objects[i].name}' reassigned from layer {layer_of[i]} to {li}"))
                layer_of[i] = li
                members.append(i)
        lines.append(members)
    if diags:
        raise CompileError(diags)
    layers = tuple(tuple(sorted({i for i in m if layer_of[i] == li})) for li, m in enumerate(lines))
    return LayerTable(tuple(layer_of), layers)


# -- rules -----------------------------------------------------------------------

def _rule_is_directional(rule: RuleAst) -> bool:
    for side in (rule.lhs, rule.rhs):
        for kernel in side:
            if len(kernel) > 1:
                return True
            for cell in kernel:
                for qual, _ in cell.entries:
                    if qual in RELATIVE_TOKENS:
                        return True
    return False


def _variant_directions(rule: RuleAst) -> tuple:
    dirs = []
    for p in rule.prefixes:
        for d in PREFIX_DIRECTIONS.get(p, ()):
            if d not in dirs:
                dirs.append(d)
    dirs = [d for d in DIRECTIONS if d in dirs] or list(DIRECTIONS)
    if not _rule_is_directional(rule):
        dirs = dirs[:1]
    return tuple(dirs)


def _resolve_qualifier(qual: Optional[str], direction: str) -> Optional[str]:
    if qual is None:
        return None
    if qual in RELATIVE_TOKENS:
        return RELATIVE[direction][qual]
    if qual == "orthogonal":
        return "moving"
    return qual


def compile_rule(rule: RuleAst, objects: ObjectTable, legend: LegendTable,
                 layers: LayerTable) -> RuleGroup:
    """Expand one rule line into its direction variants."""
    uses_rigid = "rigid" in rule.prefixes or any(
        "rigid" in (q, n) for side in (rule.lhs, rule.rhs) for k in side for c in k
        for q, n in c.entries)
    if uses_rigid:
        raise UnsupportedFeatureError([_err("rules", rule.line, "unsupported keyword 'rigid'")])

    def fail(msg):
        raise CompileError([_err("rules", rule.line, msg)])

    def cell(ast_cell, direction, rhs):
        if ast_cell.is_ellipsis:
            return CellPattern((), True)
        entries = []
        seen = set()
        for qual, name in ast_cell.entries:
            if qual == "random":
                raise UnsupportedFeatureError([_err("rules", rule.line,
                                                    "unsupported 'random' object spawning")])
            r = legend.resolve(name, objects)
            if r is None:
                fail(f"unknown name '{name}'")
            kind, ids = r
            if kind == "aggregate":
                fail(f"'{name}' is an 'and' definition and cannot be used in rules")
            q = _resolve_qualifier(qual, direction)
            if q == "randomdir" and not rhs:
                fail("'randomdir' is only allowed on the right-hand side")
            if name in seen:
                fail(f"'{name}' appears twice in one cell")
            seen.add(name)
            if q != "no":
                for i in ids:
                    if layers.layer_of[i] < 0:
                        fail(f"'{objects.objects[i].name}' is not assigned to a collision layer")
            entries.append(Entry(name, ids, q, kind == "meta"))
        return CellPattern(tuple(entries))

    variants = []
    for d in _variant_directions(rule):
        lhs = tuple(tuple(cell(c, d, False) for c in k) for k in rule.lhs)
        rhs = tuple(tuple(cell(c, d, True) for c in k) for k in rule.rhs)
        _check_bindings(lhs, rhs, fail)
        variants.append(CompiledRule(
            direction=d, lhs=lhs, rhs=rhs, commands=tuple(rule.commands),
            is_late="late" in rule.prefixes, is_random="random" in rule.prefixes,
            line=rule.line, source=rule.text))
    return RuleGroup(variants, "late" in rule.prefixes, "random" in rule.prefixes, rule.line)


def _check_bindings(lhs, rhs, fail):
    positive = {}
    set_qualified = []
    for k, kernel in enumerate(lhs):
        for j, c in enumerate(kernel):
            for e in c.entries:
                if e.qualifier != "no":
                    positive.setdefault(e.name, []).append((k, j))
                if e.qualifier in DIRECTION_SETS:
                    set_qualified.append((k, j, e.name))
    for k, kernel in enumerate(rhs):
        for j, c in enumerate(kernel):
            lhs_names = {e.name: e for e in lhs[k][j].entries}
            for e in c.entries:
                if e.qualifier == "no":
                    continue
                here = lhs_names.get(e.name)
                if e.is_meta:
                    bound_here = here is not None and here.qualifier != "no"
                    if not bound_here and len(positive.get(e.name, ())) != 1:
                        fail(f"unbound property '{e.name}' on the right-hand side")
                if e.qualifier in DIRECTION_SETS:
                    if not (here is not None and here.qualifier in DIRECTION_SETS) and len(set_qualified) != 1:
                        fail(f"'{e.qualifier}' on the right-hand side has no matching left-hand binding")


# -- game --------------------------------------------------------------------------

def _compile_win_conditions(ast, objects, legend) -> list:
    out = []
    for w in ast.win_conditions:
        ra = legend.resolve(w.a, objects)
        rb = legend.resolve(w.b, objects) if w.b else None
        if ra is None or (w.b and rb is None):
            missing = w.a if ra is None else w.b
            raise CompileError([_err("winconditions", w.line, f"unknown name '{missing}'")])
        if w.b:
            kind = {"all": "all_on", "some": "some_on", "no": "no_on"}[w.quantifier]
        else:
            kind = {"some": "some", "no": "none"}[w.quantifier]
        text = f"{w.quantifier} {w.a}" + (f" on {w.b}" if w.b else "")
        out.append(WinCondition(kind, ra[1], rb[1] if rb else None,
                                ra[0] == "aggregate", bool(rb and rb[0] == "aggregate"), text))
    return out


def _compile_levels(ast, objects, legend, layers, background_id) -> list:
    bg_layer = layers.layer_of[background_id]
    out = []
    for lv in ast.levels:
        if lv.is_message:
            out.append(MessageDef(lv.message, lv.line))
            continue
        cells = []
        for r, row in enumerate(lv.rows):
            for ch in row:
                g = legend.glyphs.get(ch)
                if g is None:
                    raise CompileError([_err("levels", lv.line + r, f"unknown glyph '{ch}'")])
                kind, ids = g
                if kind == "meta":
                    raise CompileError([_err("levels", lv.line + r,
                                             f"glyph '{ch}' is ambiguous ('or' definition)")])
                ids = set(ids)
                if not any(layers.layer_of[i] == bg_layer for i in ids):
                    ids.add(background_id)
                seen_layers = {}
                for i in ids:
                    li = layers.layer_of[i]
                    if li < 0:
                        raise CompileError([_err("levels", lv.line + r,
                                                 f"'{objects.objects[i].name}' has no collision layer")])
                    if li in seen_layers:
                        raise CompileError([_err(
                            "levels", lv.line + r,
                            f"glyph '{ch}' puts '{objects.objects[seen_layers[li]].name}' and "
                            f"'{objects.objects[i].name}' on the same collision layer")])
                    seen_layers[li] = i
                cells.append(frozenset(ids))
        out.append(LevelDef(len(lv.rows[0]), len(lv.rows), tuple(cells), lv.line))
    return out


def _build_blocks(ast, objects, legend, layers):
    early, late = [], []
    state = {"loop": False}
    cur = {"early": Block("plain", []), "late": Block("plain", [])}
    last_group = None
    count = 0

    def flush():
        for key, dest in (("early", early), ("late", late)):
            if cur[key].groups:
                dest.append(cur[key])
            cur[key] = Block("loop" if state["loop"] else "plain", [])

    for item in ast.rule_lines:
        if isinstance(item, LoopMarker):
            if item.kind == "startloop":
                if state["loop"]:
                    raise CompileError([_err("rules", item.line, "nested startloop")])
                flush()
                state["loop"] = True
                cur["early"].kind = cur["late"].kind = "loop"
            else:
                if not state["loop"]:
                    raise CompileError([_err("rules", item.line, "endloop without startloop")])
                state["loop"] = False
                flush()
            last_group = None
            continue
        count += 1
        group = compile_rule(item, objects, legend, layers)
        if "+" in item.prefixes:
            if last_group is None or last_group.is_late != group.is_late:
                raise CompileError([_err("rules", item.line, "'+' rule has no group to join")])
            last_group.rules.extend(group.rules)
            continue
        cur["late" if group.is_late else "early"].groups.append(group)
        last_group = group
    if state["loop"]:
        raise CompileError([_err("rules", 0, "startloop without endloop")])
    flush()
    return early, late, count


def compile_game(ast: GameAst) -> GameDef:
    warnings = list(ast.warnings)
    objects = build_objects(ast)
    legend = resolve_legend(ast, objects)
    layers = build_layers(ast, objects, legend, warnings)

    player = legend.resolve("player", objects)
    background = legend.resolve("background", objects)
    if player is None:
        raise CompileError([_err("legend", 0, "no 'player' object or legend entry")])
    if background is None:
        raise CompileError([_err("objects", 0, "no 'background' object")])
    background_id = min(background[1])
    if layers.layer_of[background_id] < 0:
        raise CompileError([_err("collisionlayers", 0, "'background' is not in a collision layer")])

    blocks, late_blocks, count = _build_blocks(ast, objects, legend, layers)
    wins = _compile_win_conditions(ast, objects, legend)
    levels = _compile_levels(ast, objects, legend, layers, background_id)

    prelude = {}
    for k, v in ast.prelude:
        prelude[k] = v if v is not None else True

    return GameDef(objects, legend, layers, blocks, late_blocks, wins, levels, prelude,
                   frozenset(player[1]), background_id, count, warnings)


def load_game(source: Union[str, SourceText]) -> GameDef:
    """Preprocess, parse and compile PuzzleScript source text."""
    game = compile_game(parse(preprocess(source)))
    raw = source.raw if isinstance(source, SourceText) else source
    game.source_hash = hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]
    return game


def load_game_file(path) -> GameDef:
    with open(path, encoding="utf-8") as fh:
        return load_game(fh.read())
