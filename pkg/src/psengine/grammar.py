"""Source normalization and parsing of PuzzleScript game files.

The format is line oriented: a prelude of ``key value`` pairs followed by
eight sections (objects, legend, sounds, collision layers, rules, win
conditions, levels).  :func:`preprocess` strips comments, canonicalizes case
and repairs two common rule-syntax quirks; :func:`parse` turns the result
into a :class:`GameAst`.  Line numbers always refer to the original text
because preprocessing never adds or removes newlines.
"""
from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from psengine.colors import resolve_color

SECTIONS = (
    "objects",
    "legend",
    "sounds",
    "collisionlayers",
    "rules",
    "winconditions",
    "levels",
)

PRELUDE_KEYS = frozenset({
    "title", "author", "homepage", "run_rules_on_level_start", "flickscreen",
    "zoomscreen", "background_color", "text_color", "again_interval",
    "realtime_interval", "noaction", "norepeat_action", "require_player_movement",
    "key_repeat_interval", "color_palette", "youtube", "noundo", "norestart",
    "throttle_movement", "scanline", "debug", "verbose_logging",
})

RULE_PREFIXES = frozenset({
    "+", "up", "down", "left", "right", "horizontal", "vertical", "orthogonal",
    "late", "random", "rigid",
})

QUALIFIERS = frozenset({
    "no", ">", "<", "^", "v", "up", "down", "left", "right", "moving",
    "stationary", "action", "randomdir", "horizontal", "vertical",
    "orthogonal", "perpendicular", "parallel", "random",
})

COMMANDS = frozenset({"win", "again", "restart", "cancel", "checkpoint", "message"})
SFX_RE = re.compile(r"^sfx(10|[0-9])$")
ELLIPSIS = "..."


# -- diagnostics ------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    section: str
    line: int
    message: str

    def to_dict(self) -> dict:
        return {"severity": self.severity, "section": self.section,
                "line": self.line, "message": self.message}

    def __str__(self) -> str:
        return f"line {self.line} [{self.section}] {self.severity}: {self.message}"


class PuzzleScriptError(Exception):
    """Raised when source text cannot be turned into a game.

    Carries the full list of diagnostics collected before giving up.
    """

    def __init__(self, diagnostics: Iterable[Diagnostic]):
        self.diagnostics = list(diagnostics)
        first = self.diagnostics[0] if self.diagnostics else None
        super().__init__(str(first) if first else "invalid game")


class UnsupportedFeatureError(PuzzleScriptError):
    pass


def diagnostics_to_json(diagnostics: Iterable[Diagnostic]) -> str:
    return json.dumps([d.to_dict() for d in diagnostics], indent=2)


# -- source text --------------------------------------------------------------

@dataclass(frozen=True)
class SourceText:
    raw: str
    line_index: tuple = ()

    @classmethod
    def from_text(cls, raw: str) -> "SourceText":
        starts = [0]
        for m in re.finditer("\n", raw):
            if m.end() < len(raw):
                starts.append(m.end())
        return cls(raw, tuple(starts))

    def line_of(self, offset: int) -> int:
        """1-based line number containing ``offset``."""
        return bisect.bisect_right(self.line_index, offset)

    def lines(self) -> list[str]:
        return self.raw.split("\n")


def _as_source(source: Union[str, SourceText]) -> SourceText:
    if isinstance(source, SourceText):
        return source
    return SourceText.from_text(source)


# -- preprocessing --------------------------------------------------------------

_STRAY_BAR = re.compile(r"\]\s*\|\s*\[")
_ELLIPSIS_GAP = re.compile(r"\]\s*\.\.\.\s*\[")
_EQUALS_LINE = re.compile(r"^=+$")


def _strip_comments(src: SourceText) -> str:
    out = []
    depth = 0
    opened_at = 0
    for i, ch in enumerate(src.raw):
        if ch == "(":
            if depth == 0:
                opened_at = i
            depth += 1
        elif ch == ")":
            if depth == 0:
                raise PuzzleScriptError([Diagnostic(
                    "error", "", src.line_of(i), "unbalanced ')' outside a comment")])
            depth -= 1
        elif depth == 0 or ch == "\n":
            out.append(ch)
    if depth:
        raise PuzzleScriptError([Diagnostic(
            "error", "", src.line_of(opened_at), "unterminated comment")])
    return "".join(out)


def _lower_keep_message(line: str) -> str:
    m = re.search(r"(?i)(^|\s)message(\s|$)", line)
    if not m:
        return line.lower()
    cut = m.end()
    return line[:cut].lower() + line[cut:]


def preprocess(source: Union[str, SourceText]) -> SourceText:
    """Strip comments, lower-case, and normalize rule-kernel quirks."""
    src = _as_source(source)
    text = _strip_comments(src)
    section = "prelude"
    out = []
    for line in text.split("\n"):
        key = line.strip().lower()
        if key in SECTIONS:
            section = key
        line = _lower_keep_message(line)
        if section == "rules":
            line = _STRAY_BAR.sub("] [", line)
            line = _ELLIPSIS_GAP.sub("| ... |", line)
        out.append(line)
    return SourceText.from_text("\n".join(out))


# -- AST ----------------------------------------------------------------------

@dataclass
class ObjectDecl:
    name: str
    line: int
    glyph: Optional[str] = None
    colors: list = field(default_factory=list)
    sprite: Optional[list] = None  # 5 rows of 5 ints, -1 = transparent


@dataclass
class LegendDecl:
    name: str
    op: Optional[str]  # None (alias), "or", "and"
    items: list
    line: int


@dataclass
class CellAst:
    entries: list  # (qualifier | None, name)
    is_ellipsis: bool = False


@dataclass
class RuleAst:
    line: int
    prefixes: list
    lhs: list  # kernels: list[list[CellAst]]
    rhs: list
    commands: list  # (command, argument | None)
    text: str = ""


@dataclass
class LoopMarker:
    kind: str  # "startloop" | "endloop"
    line: int


@dataclass
class WinConditionAst:
    quantifier: str  # "all" | "some" | "no"
    a: str
    b: Optional[str]
    line: int


@dataclass
class LevelAst:
    line: int
    rows: Optional[list] = None
    message: Optional[str] = None

    @property
    def is_message(self) -> bool:
        return self.message is not None


@dataclass
class GameAst:
    prelude: list = field(default_factory=list)
    objects: list = field(default_factory=list)
    legend: list = field(default_factory=list)
    sounds: list = field(default_factory=list)
    collision_layers: list = field(default_factory=list)  # (names, line)
    rule_lines: list = field(default_factory=list)  # RuleAst | LoopMarker
    win_conditions: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def rules(self) -> list:
        return [r for r in self.rule_lines if isinstance(r, RuleAst)]

    def prelude_value(self, key: str, default=None):
        for k, v in self.prelude:
            if k == key:
                return v if v is not None else True
        return default


# -- parsing --------------------------------------------------------------------

_RULE_TOKEN = re.compile(r"\[|\]|\||->|\.\.\.|[^\s\[\]\|]+")
_SPRITE_ROW = re.compile(r"^[.0-9]+$")


class _Parser:
    def __init__(self, src: SourceText):
        self.src = src
        self.diags: list[Diagnostic] = []
        self.ast = GameAst()
        self.section = "prelude"

    def error(self, line: int, message: str):
        self.diags.append(Diagnostic("error", self.section, line, message))

    def warn(self, line: int, message: str):
        self.ast.warnings.append(Diagnostic("warning", self.section, line, message))

    # section splitting
    def run(self) -> GameAst:
        lines = self.src.lines()
        buckets: dict[str, list] = {s: [] for s in ("prelude",) + SECTIONS}
        seen = set()
        n = len(lines)
        i = 0
        while i < n:
            raw = lines[i]
            stripped = raw.strip()
            if _EQUALS_LINE.match(stripped):
                nxt = lines[i + 1].strip() if i + 1 < n else ""
                after = lines[i + 2].strip() if i + 2 < n else ""
                if (nxt and nxt not in SECTIONS and _EQUALS_LINE.match(after)
                        and self.section != "levels"):
                    self.section = "prelude" if self.section == "prelude" else self.section
                    self.error(i + 2, f"malformed section header '{nxt}'")
                    i += 3
                    continue
                i += 1
                continue
            if stripped in SECTIONS:
                if stripped in seen:
                    self.error(i + 1, f"duplicate section header '{stripped}'")
                seen.add(stripped)
                self.section = stripped
                i += 1
                continue
            buckets[self.section].append((i + 1, raw))
            i += 1

        for name in ("prelude",) + SECTIONS:
            self.section = name
            getattr(self, f"_parse_{name}")(buckets[name])
        if self.diags:
            raise PuzzleScriptError(self.diags)
        return self.ast

    def _parse_prelude(self, lines):
        for ln, raw in lines:
            s = raw.strip()
            if not s:
                continue
            parts = s.split(None, 1)
            key = parts[0]
            value = parts[1] if len(parts) > 1 else None
            self.ast.prelude.append((key, value))

    def _parse_objects(self, lines):
        cur: Optional[ObjectDecl] = None
        stage = "name"
        names = set()

        def finish():
            nonlocal cur
            if cur is None:
                return
            if not cur.colors:
                self.error(cur.line, f"object '{cur.name}' has no colors")
            if cur.sprite == []:
                cur.sprite = None
            if cur.sprite is not None:
                if len(cur.sprite) != 5:
                    self.error(cur.line, f"sprite of '{cur.name}' must have 5 rows, found {len(cur.sprite)}")
                for row in cur.sprite:
                    for px in row:
                        if px >= len(cur.colors):
                            self.error(cur.line, f"sprite of '{cur.name}' uses color index {px} "
                                                 f"but only {len(cur.colors)} colors are declared")
                            break
            self.ast.objects.append(cur)
            cur = None

        for ln, raw in lines:
            s = raw.strip()
            if not s:
                if cur is not None and stage == "sprite" and cur.sprite:
                    finish()
                    stage = "name"
                continue
            if stage == "sprite" and _SPRITE_ROW.match(s):
                if len(s) != 5:
                    self.error(ln, f"sprite row of '{cur.name}' has {len(s)} columns, expected 5")
                    continue
                if len(cur.sprite) >= 5:
                    self.error(ln, f"sprite of '{cur.name}' has more than 5 rows")
                    continue
                cur.sprite.append([-1 if ch == "." else int(ch) for ch in s])
                continue
            if stage == "colors":
                colors = []
                for tok in s.split():
                    rgb = resolve_color(tok)
                    if rgb is None:
                        self.error(ln, f"unknown color '{tok}'")
                    colors.append(tok)
                cur.colors = colors
                cur.sprite = []
                stage = "sprite"
                continue
            finish()
            toks = s.split()
            name = toks[0]
            glyph = None
            for extra in toks[1:]:
                if len(extra) == 1 and glyph is None:
                    glyph = extra
                else:
                    self.error(ln, f"unexpected token '{extra}' after object name '{name}'")
            if name in names:
                self.error(ln, f"duplicate object name '{name}'")
            names.add(name)
            cur = ObjectDecl(name=name, line=ln, glyph=glyph)
            stage = "colors"
        finish()

    def _parse_legend(self, lines):
        for ln, raw in lines:
            s = raw.strip()
            if not s:
                continue
            if "=" not in s:
                self.error(ln, "legend line must have the form 'name = value'")
                continue
            name, _, rhs = s.partition("=")
            name = name.strip()
            toks = rhs.split()
            if not name or not toks:
                self.error(ln, "legend line must have the form 'name = value'")
                continue
            items = toks[0::2]
            ops = set(toks[1::2])
            if len(toks) % 2 == 0:
                self.error(ln, f"dangling operator in definition of '{name}'")
                continue
            if not ops <= {"or", "and"}:
                self.error(ln, f"expected 'and' or 'or' in definition of '{name}'")
                continue
            if len(ops) > 1:
                self.error(ln, f"definition of '{name}' mixes 'and' with 'or'")
                continue
            op = ops.pop() if ops else None
            self.ast.legend.append(LegendDecl(name, op, items, ln))

    def _parse_sounds(self, lines):
        self.ast.sounds = [raw.strip() for _, raw in lines if raw.strip()]

    def _parse_collisionlayers(self, lines):
        for ln, raw in lines:
            names = [t for t in re.split(r"[,\s]+", raw.strip()) if t]
            if names:
                self.ast.collision_layers.append((names, ln))

    def _parse_rules(self, lines):
        pending = None
        for ln, raw in lines:
            s = raw.strip()
            if pending is not None:
                if not s:
                    continue
                pending = (pending[0], pending[1] + " " + s)
                if s.endswith("->"):
                    continue
                self._parse_rule_line(*pending)
                pending = None
                continue
            if not s:
                continue
            if s in ("startloop", "endloop"):
                self.ast.rule_lines.append(LoopMarker(s, ln))
                continue
            if s.endswith("->"):
                pending = (ln, s)
                continue
            self._parse_rule_line(ln, s)
        if pending is not None:
            self.error(pending[0], "rule has no right-hand side")

    def _parse_rule_line(self, ln: int, text: str):
        msg_text = None
        m = re.search(r"(^|\s)message(\s|$)", text)
        if m:
            msg_text = text[m.end():].strip()
            text = text[:m.start()] + " message"
        toks = _RULE_TOKEN.findall(text)
        if "->" not in toks:
            self.error(ln, "rule has no '->'")
            return
        i = 0
        prefixes = []
        while i < len(toks) and toks[i] != "[":
            if toks[i] not in RULE_PREFIXES:
                self.error(ln, f"unknown rule prefix '{toks[i]}'")
                return
            prefixes.append(toks[i])
            i += 1
        lhs, i, ok = self._parse_kernels(toks, i, ln)
        if not ok:
            return
        if i >= len(toks) or toks[i] != "->":
            self.error(ln, "expected '->' after left-hand side")
            return
        i += 1
        rhs, i, ok = self._parse_kernels(toks, i, ln)
        if not ok:
            return
        commands = []
        for tok in toks[i:]:
            if tok == "message":
                commands.append(("message", msg_text or ""))
            elif tok in COMMANDS:
                commands.append((tok, None))
            elif SFX_RE.match(tok):
                commands.append((tok, None))
            else:
                self.error(ln, f"unknown rule command '{tok}'")
                return
        if not lhs:
            self.error(ln, "rule has an empty left-hand side")
            return
        if rhs:
            if len(rhs) != len(lhs):
                self.error(ln, f"left-hand side has {len(lhs)} kernels but right-hand side has {len(rhs)}")
                return
            for kl, kr in zip(lhs, rhs):
                if len(kl) != len(kr):
                    self.error(ln, f"kernel length mismatch: {len(kl)} cells on the left, {len(kr)} on the right")
                    return
                for cl, cr in zip(kl, kr):
                    if cl.is_ellipsis != cr.is_ellipsis:
                        self.error(ln, "'...' must occupy the same position on both sides")
                        return
        elif not commands:
            self.error(ln, "rule has neither a right-hand side nor commands")
            return
        self.ast.rule_lines.append(RuleAst(ln, prefixes, lhs, rhs, commands, text.strip()))

    def _parse_kernels(self, toks, i, ln):
        kernels = []
        while i < len(toks) and toks[i] == "[":
            i += 1
            cells = [[]]
            while i < len(toks) and toks[i] != "]":
                if toks[i] == "|":
                    cells.append([])
                elif toks[i] in ("[", "->"):
                    self.error(ln, "unterminated kernel")
                    return kernels, i, False
                else:
                    cells[-1].append(toks[i])
                i += 1
            if i >= len(toks):
                self.error(ln, "unterminated kernel")
                return kernels, i, False
            i += 1
            kernel = []
            for cell_toks in cells:
                cell = self._parse_cell(cell_toks, ln)
                if cell is None:
                    return kernels, i, False
                kernel.append(cell)
            kernels.append(kernel)
        return kernels, i, True

    def _parse_cell(self, toks, ln) -> Optional[CellAst]:
        if toks == [ELLIPSIS]:
            return CellAst([], is_ellipsis=True)
        entries = []
        qual = None
        for j, tok in enumerate(toks):
            if tok == ELLIPSIS:
                self.error(ln, "'...' must be alone in its cell")
                return None
            if tok in QUALIFIERS and j + 1 < len(toks) and qual is None:
                qual = tok
                continue
            entries.append((qual, tok))
            qual = None
        if qual is not None:
            self.error(ln, f"qualifier '{qual}' is not followed by an object")
            return None
        return CellAst(entries)

    def _parse_winconditions(self, lines):
        for ln, raw in lines:
            toks = raw.split()
            if not toks:
                continue
            q = toks[0]
            if q == "any":
                q = "some"
            if q not in ("all", "some", "no"):
                self.error(ln, f"unknown win condition quantifier '{toks[0]}'")
                continue
            if len(toks) == 2:
                if q == "all":
                    self.error(ln, "'all X' needs an 'on' clause")
                    continue
                self.ast.win_conditions.append(WinConditionAst(q, toks[1], None, ln))
            elif len(toks) == 4 and toks[2] == "on":
                self.ast.win_conditions.append(WinConditionAst(q, toks[1], toks[3], ln))
            else:
                self.error(ln, "malformed win condition")

    def _parse_levels(self, lines):
        bg = self._background_glyph()
        cur: Optional[LevelAst] = None

        def close():
            nonlocal cur
            if cur is None:
                return
            width = max(len(r) for r in cur.rows)
            if any(len(r) != width for r in cur.rows):
                if bg is None:
                    self.error(cur.line, "ragged level rows and no background glyph to pad with")
                cur.rows = [r + (bg or ".") * (width - len(r)) for r in cur.rows]
            self.ast.levels.append(cur)
            cur = None

        for ln, raw in lines:
            s = raw.strip()
            if not s:
                close()
                continue
            if s.lower().startswith("message") and (len(s) == 7 or s[7].isspace()):
                close()
                self.ast.levels.append(LevelAst(ln, message=s[7:].strip()))
                continue
            if cur is None:
                cur = LevelAst(ln, rows=[])
            cur.rows.append(s)
        close()

    def _background_glyph(self) -> Optional[str]:
        for decl in self.ast.legend:
            if len(decl.name) == 1 and decl.op is None and decl.items == ["background"]:
                return decl.name
        for obj in self.ast.objects:
            if obj.name == "background" and obj.glyph:
                return obj.glyph
        return None


def parse(source: Union[str, SourceText]) -> GameAst:
    """Parse preprocessed source into a :class:`GameAst`.

    Raises :class:`PuzzleScriptError` carrying every diagnostic found.
    """
    return _Parser(_as_source(source)).run()


def parse_game(text: str) -> GameAst:
    return parse(preprocess(text))


def render_level_rows(level: LevelAst) -> str:
    return "\n".join(level.rows)
