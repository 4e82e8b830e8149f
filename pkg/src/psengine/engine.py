"""Deterministic tick engine.

State layout
------------
A :class:`GridState` stores the level twice, in two synchronized forms:

* cell-major: ``cells[i]`` is a bitmask of atomic object ids present in cell
  ``i`` (row-major index), ``moves[i]`` packs 5 force bits per collision
  layer (bit ``5*layer + k`` with k = up, down, left, right, action);
* plane-major bitboards: ``pos[a]`` has bit ``i`` set when object ``a`` is in
  cell ``i``; ``fpos[5*layer + k]`` likewise for force bits.

Rule matching works on the bitboards (one shift/and per pattern cell gives
every anchor at once); rule application and movement work on cells and keep
the bitboards in sync through :func:`_write`.
"""
from __future__ import annotations

import hashlib
import random
import struct
import sys
from array import array
from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Union

from psengine.compiler import DIR_BITS, DIRECTION_SETS, GameDef

ACTIONS = ("up", "down", "left", "right", "action", "none")
ACTION_CODES = {name: i for i, name in enumerate(ACTIONS)}
UP, DOWN, LEFT, RIGHT, ACTION, NONE = range(6)

_K = {"up": 0, "down": 1, "left": 2, "right": 3, "action": 4}
_STEP = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}


class EngineError(Exception):
    pass


class EngineLoopError(EngineError):
    """A rule group, loop or again chain exceeded its iteration cap."""


class EngineDefect(EngineError):
    """An internal invariant was violated."""


@dataclass(frozen=True)
class EngineLimits:
    max_rule_applications_per_group: int = 10000
    max_group_sweeps_per_block: int = 10000
    max_loop_iterations: int = 200
    max_again_ticks: int = 1000
    rng_seed: Optional[int] = None
    trace: bool = False
    debug_checks: bool = False

    def __post_init__(self):
        for name in ("max_rule_applications_per_group", "max_group_sweeps_per_block",
                     "max_loop_iterations", "max_again_ticks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


DEFAULT_LIMITS = EngineLimits()


@dataclass
class StepOutcome:
    won: bool = False
    restarted: bool = False
    cancelled: bool = False
    changed: bool = False
    messages: list = field(default_factory=list)
    again_ticks_used: int = 0
    rule_trace: Optional[list] = None

    def to_dict(self) -> dict:
        return {"won": self.won, "restarted": self.restarted, "cancelled": self.cancelled,
                "changed": self.changed, "messages": list(self.messages),
                "again_ticks_used": self.again_ticks_used}


def action_code(action: Union[int, str, None]) -> int:
    if action is None:
        return NONE
    if isinstance(action, str):
        try:
            return ACTION_CODES[action.lower()]
        except KeyError:
            raise ValueError(f"unknown action '{action}'") from None
    if not 0 <= int(action) <= 5:
        raise ValueError(f"action code out of range: {action}")
    return int(action)


# -- state -----------------------------------------------------------------------

class GridState:
    __slots__ = ("width", "height", "cells", "moves", "pos", "fpos",
                 "last_input", "checkpoint", "level_index")

    def __init__(self, width, height, cells, moves, pos, fpos,
                 last_input=0, checkpoint=None, level_index=0):
        self.width = width
        self.height = height
        self.cells = cells
        self.moves = moves
        self.pos = pos
        self.fpos = fpos
        self.last_input = last_input
        self.checkpoint = checkpoint
        self.level_index = level_index

    @classmethod
    def from_cells(cls, width, height, cells, n_atoms, n_layers, level_index=0,
                   checkpoint=None, moves=None):
        cells = list(cells)
        moves = list(moves) if moves is not None else [0] * len(cells)
        pos = [0] * n_atoms
        fpos = [0] * (5 * n_layers)
        for i, c in enumerate(cells):
            bit = 1 << i
            while c:
                low = c & -c
                pos[low.bit_length() - 1] |= bit
                c ^= low
            mv = moves[i]
            while mv:
                low = mv & -mv
                fpos[low.bit_length() - 1] |= bit
                mv ^= low
        return cls(width, height, cells, moves, pos, fpos, 0, checkpoint, level_index)

    def copy(self) -> "GridState":
        return GridState(self.width, self.height, self.cells[:], self.moves[:],
                         self.pos[:], self.fpos[:], self.last_input, self.checkpoint,
                         self.level_index)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def objects_at(self, x: int, y: int) -> list:
        c = self.cells[y * self.width + x]
        return [a for a in range(len(self.pos)) if c >> a & 1]

    def has_forces(self) -> bool:
        return any(self.fpos)

    def presence_equal(self, other: "GridState") -> bool:
        return self.cells == other.cells

    def __eq__(self, other):
        if not isinstance(other, GridState):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.cells == other.cells and self.moves == other.moves
                and self.last_input == other.last_input and self.checkpoint == other.checkpoint)

    def __repr__(self):
        return f"GridState({self.width}x{self.height}, digest={state_digest(self)})"


def state_digest(state: GridState) -> str:
    """Stable 64-bit digest of a state's object layout, as 16 hex digits.

    Byte layout hashed with BLAKE2b (8-byte digest):
    ``b"PSD1"``, then little-endian uint32 width, height and object count,
    then for every object id in ascending order its presence plane packed
    little-endian, bit ``y*width + x`` = presence at (x, y), padded to
    ``ceil(width*height/8)`` bytes.  Force planes are not included.
    """
    nbytes = (state.width * state.height + 7) // 8
    h = hashlib.blake2b(digest_size=8)
    h.update(b"PSD1" + struct.pack("<III", state.width, state.height, len(state.pos)))
    for plane in state.pos:
        h.update(plane.to_bytes(nbytes, "little"))
    return h.hexdigest()


# -- runtime tables ----------------------------------------------------------------

class _CellMatch:
    __slots__ = ("req", "anyof", "forb", "fchecks", "empty")

    def __init__(self, req, anyof, forb, fchecks):
        self.req = req
        self.anyof = anyof
        self.forb = forb
        self.fchecks = fchecks
        self.empty = not (req or anyof or forb or fchecks)


class _Slot:
    __slots__ = ("kernel", "cell", "ids", "kind", "allowed")

    def __init__(self, kernel, cell, ids, kind, allowed):
        self.kernel = kernel
        self.cell = cell
        self.ids = ids
        self.kind = kind  # 0 any, 1 stationary, 2 force in allowed
        self.allowed = allowed


class _CellWrite:
    __slots__ = ("static_clear", "dyn_clear", "fclear_static", "fclear_dyn", "adds")

    def __init__(self, static_clear, dyn_clear, fclear_static, fclear_dyn, adds):
        self.static_clear = static_clear
        self.dyn_clear = dyn_clear
        self.fclear_static = fclear_static
        self.fclear_dyn = fclear_dyn
        self.adds = adds


class _Kernel:
    __slots__ = ("segments", "seg_lengths", "writes", "n_cells")

    def __init__(self, segments, writes):
        self.segments = segments
        self.seg_lengths = tuple(len(s) for s in segments)
        self.writes = writes
        self.n_cells = sum(self.seg_lengths)


class _Variant:
    __slots__ = ("rule", "k", "dx", "dy", "kernels", "slots", "has_rhs", "commands",
                 "need_atoms", "needs_force")

    def __init__(self, rule, k, kernels, slots, commands, need_atoms, needs_force):
        self.rule = rule
        self.k = k
        self.dx, self.dy = _STEP[k]
        self.kernels = kernels
        self.slots = slots
        self.has_rhs = bool(rule.rhs)
        self.commands = commands
        self.need_atoms = need_atoms
        self.needs_force = needs_force


class _Runtime:
    def __init__(self, game: GameDef):
        self.game = game
        n = game.num_objects
        self.n_atoms = n
        self.n_layers = game.num_layers
        self.layer = list(game.layer_table.layer_of)
        self.layer_mask = [sum(1 << a for a in members) for members in game.layer_table.layers]
        self.player_atoms = tuple(sorted(game.player_ids))
        self.dir_bits = tuple(5 * L + k for L in range(self.n_layers) for k in range(4))
        self.groups = {}
        self.blocks = [(b.kind, [self._group(g) for g in b.groups]) for b in game.blocks]
        self.late_blocks = [(b.kind, [self._group(g) for g in b.groups]) for b in game.late_blocks]
        self.geom = {}
        self.wins = [(w.kind, tuple(sorted(w.a)), w.a_all,
                      tuple(sorted(w.b)) if w.b else (), w.b_all) for w in game.win_conditions]
        self.random = game.uses_randomness()
        self.require_player_movement = bool(game.prelude.get("require_player_movement"))

    def _group(self, group):
        variants = [self._variant(r) for r in group.rules]
        return (group, variants)

    # compile one rule variant into matching and writing tables
    def _variant(self, rule) -> _Variant:
        slots = []
        slot_index = {}

        def slot_for(k, j, entry):
            key = (k, j, entry.name)
            if key not in slot_index:
                q = entry.qualifier
                if q is None:
                    kind, allowed = 0, 0
                elif q == "stationary":
                    kind, allowed = 1, 0
                elif q in DIRECTION_SETS:
                    kind, allowed = 2, sum(DIR_BITS[d] for d in DIRECTION_SETS[q])
                else:
                    kind, allowed = 2, DIR_BITS[q]
                slot_index[key] = len(slots)
                slots.append(_Slot(k, j, tuple(sorted(entry.ids)), kind, allowed))
            return slot_index[key]

        positives = {}
        set_qualified = []
        for k, kernel in enumerate(rule.lhs):
            j = 0
            for cell in kernel:
                if cell.is_ellipsis:
                    continue
                for e in cell.entries:
                    if e.qualifier != "no":
                        positives.setdefault(e.name, []).append((k, j, e))
                    if e.qualifier in DIRECTION_SETS:
                        set_qualified.append((k, j, e))
                j += 1

        need_atoms = set()
        needs_force = False
        kernels = []
        for k, kernel in enumerate(rule.lhs):
            segments = [[]]
            writes = []
            rhs_kernel = rule.rhs[k] if rule.rhs else None
            j = 0
            for ci, cell in enumerate(kernel):
                if cell.is_ellipsis:
                    segments.append([])
                    continue
                cm = self._cell_match(cell)
                if any(not stationary for _, _, stationary in cm.fchecks):
                    needs_force = True
                need_atoms.update(cm.req)
                segments[-1].append(cm)
                if rhs_kernel is not None:
                    writes.append(self._cell_write(k, j, cell, rhs_kernel[ci], positives,
                                                   set_qualified, slot_for))
                else:
                    writes.append(None)
                j += 1
            kernels.append(_Kernel([tuple(s) for s in segments], writes))
        commands = tuple(rule.commands)
        return _Variant(rule, _K[rule.direction], kernels, slots, commands,
                        tuple(sorted(need_atoms)), needs_force)

    def _cell_match(self, cell) -> _CellMatch:
        req, anyof, forb, fchecks = [], [], [], []
        for e in cell.entries:
            ids = tuple(sorted(e.ids))
            q = e.qualifier
            if q == "no":
                forb.extend(ids)
                continue
            if q is None:
                if e.is_meta:
                    anyof.append(ids)
                else:
                    req.extend(ids)
                continue
            if not e.is_meta:
                req.extend(ids)
            by_layer = {}
            for a in ids:
                by_layer.setdefault(self.layer[a], []).append(a)
            groups = tuple((tuple(v), 5 * L) for L, v in sorted(by_layer.items()))
            if q == "stationary":
                fchecks.append((groups, (), True))
            elif q in DIRECTION_SETS:
                fchecks.append((groups, tuple(_K[d] for d in DIRECTION_SETS[q]), False))
            else:
                fchecks.append((groups, (_K[q],), False))
        return _CellMatch(tuple(sorted(set(req))), tuple(anyof), tuple(sorted(set(forb))),
                          tuple(fchecks))

    def _cell_write(self, k, j, lcell, rcell, positives, set_qualified, slot_for) -> _CellWrite:
        rhs_pos = {e.name: e for e in rcell.entries if e.qualifier != "no"}
        lhs_by_name = {e.name: e for e in lcell.entries}
        static_clear = 0
        dyn_clear = []
        fclear_static = 0
        fclear_dyn = []
        adds = []
        for e in lcell.entries:
            if e.qualifier == "no":
                continue
            if e.name not in rhs_pos:
                moving = e.qualifier not in (None, "stationary")
                if e.is_meta:
                    dyn_clear.append(slot_for(k, j, e))
                    if moving:
                        fclear_dyn.append(slot_for(k, j, e))
                else:
                    for a in e.ids:
                        static_clear |= 1 << a
                        if moving:
                            # a replacement on the same layer must not inherit it
                            fclear_static |= 31 << (5 * self.layer[a])
            elif e.qualifier not in (None, "stationary") and rhs_pos[e.name].qualifier is None:
                if e.is_meta:
                    fclear_dyn.append(slot_for(k, j, e))
                else:
                    for a in e.ids:
                        fclear_static |= 31 << (5 * self.layer[a])
        for e in rcell.entries:
            if e.qualifier == "no":
                for a in e.ids:
                    static_clear |= 1 << a
                continue
            here = lhs_by_name.get(e.name)
            atom, slot = -1, -1
            if e.is_meta:
                if here is not None and here.qualifier != "no":
                    slot = slot_for(k, j, here)
                else:
                    (bk, bj, be), = positives[e.name]
                    slot = slot_for(bk, bj, be)
            else:
                atom = next(iter(e.ids))
            q = e.qualifier
            if q is None:
                fkind, fval = 0, 0
            elif q == "stationary":
                fkind, fval = 2, 0
            elif q == "randomdir":
                fkind, fval = 4, 0
            elif q in DIRECTION_SETS:
                if here is not None and here.qualifier in DIRECTION_SETS:
                    src = slot_for(k, j, here)
                else:
                    (bk, bj, be), = set_qualified
                    src = slot_for(bk, bj, be)
                fkind, fval = 3, src
            else:
                fkind, fval = 1, DIR_BITS[q]
            adds.append((atom, slot, fkind, fval))
        return _CellWrite(static_clear, tuple(dyn_clear), fclear_static, tuple(fclear_dyn),
                          tuple(adds))

    # geometry caches per grid size
    def geometry(self, w, h):
        g = self.geom.get((w, h))
        if g is None:
            g = _Geometry(w, h)
            self.geom[(w, h)] = g
        return g


class _Geometry:
    def __init__(self, w, h):
        self.w = w
        self.h = h
        self.n = w * h
        self.full = (1 << self.n) - 1
        self.valid = {}
        self.neighbor = []
        for k in range(4):
            dx, dy = _STEP[k]
            row = []
            for i in range(self.n):
                x, y = i % w + dx, i // w + dy
                row.append(y * w + x if 0 <= x < w and 0 <= y < h else -1)
            self.neighbor.append(row)

    def valid_anchors(self, k, length):
        key = (k, length)
        m = self.valid.get(key)
        if m is None:
            dx, dy = _STEP[k]
            m = 0
            for y in range(self.h):
                for x in range(self.w):
                    ex, ey = x + (length - 1) * dx, y + (length - 1) * dy
                    if 0 <= ex < self.w and 0 <= ey < self.h:
                        m |= 1 << (y * self.w + x)
            self.valid[key] = m
        return m


def get_runtime(game: GameDef) -> _Runtime:
    rt = getattr(game, "_runtime", None)
    if rt is None:
        rt = _Runtime(game)
        game._runtime = rt
    return rt


# -- low-level writes ----------------------------------------------------------------

def _write(st: GridState, i: int, c: int, mv: int):
    bit = 1 << i
    old = st.cells[i]
    if c != old:
        diff = old ^ c
        pos = st.pos
        while diff:
            low = diff & -diff
            pos[low.bit_length() - 1] ^= bit
            diff ^= low
        st.cells[i] = c
    old = st.moves[i]
    if mv != old:
        diff = old ^ mv
        fpos = st.fpos
        while diff:
            low = diff & -diff
            fpos[low.bit_length() - 1] ^= bit
            diff ^= low
        st.moves[i] = mv


def _cell_mask(cm: _CellMatch, st: GridState, full: int) -> int:
    pos = st.pos
    m = full
    for a in cm.req:
        m &= pos[a]
        if not m:
            return 0
    for ids in cm.anyof:
        u = 0
        for a in ids:
            u |= pos[a]
        m &= u
        if not m:
            return 0
    for a in cm.forb:
        m &= ~pos[a]
    if cm.fchecks:
        fpos = st.fpos
        for groups, ks, stationary in cm.fchecks:
            u = 0
            for atoms, base in groups:
                present = 0
                for a in atoms:
                    present |= pos[a]
                if stationary:
                    f = fpos[base] | fpos[base + 1] | fpos[base + 2] | fpos[base + 3] | fpos[base + 4]
                    u |= present & ~f
                else:
                    f = 0
                    for kk in ks:
                        f |= fpos[base + kk]
                    u |= present & f
            m &= u
            if not m:
                return 0
    return m


def _segment_anchors(seg, st, geo, k, stride):
    """Bitmask of anchor cells where every cell of the segment matches."""
    m = geo.valid_anchors(k, len(seg))
    full = geo.full
    for j, cm in enumerate(seg):
        if cm.empty:
            continue
        cmask = _cell_mask(cm, st, full)
        off = j * stride
        if off > 0:
            cmask >>= off
        elif off < 0:
            cmask = (cmask << -off) & full
        m &= cmask
        if not m:
            return 0
    return m


def _iter_bits(m):
    while m:
        low = m & -m
        yield low.bit_length() - 1
        m ^= low


def _kernel_matches(kern: _Kernel, st: GridState, geo, k, dx, dy):
    """List of matches in scan order; each match is a tuple of cell indices."""
    stride = dx + dy * geo.w
    segs = kern.segments
    if len(segs) == 1:
        m = _segment_anchors(segs[0], st, geo, k, stride)
        if not m:
            return []
        offs = tuple(j * stride for j in range(len(segs[0])))
        if len(offs) == 1:
            return [(a,) for a in _iter_bits(m)]
        return [tuple(a + o for o in offs) for a in _iter_bits(m)]
    masks = []
    for seg in segs:
        m = _segment_anchors(seg, st, geo, k, stride) if seg else geo.full
        if not m:
            return []
        masks.append(m)
    w, h = geo.w, geo.h
    out = []
    lengths = kern.seg_lengths

    def extend(si, x, y, acc):
        # (x, y): first free cell after segment si-1
        if si == len(segs):
            out.append(tuple(acc))
            return
        ln = lengths[si]
        gap_x, gap_y = x, y
        while 0 <= gap_x < w and 0 <= gap_y < h:
            idx = gap_y * w + gap_x
            if masks[si] >> idx & 1:
                extend(si + 1, gap_x + ln * dx, gap_y + ln * dy,
                       acc + [idx + j * stride for j in range(ln)])
            gap_x += dx
            gap_y += dy

    ln0 = lengths[0]
    for a in _iter_bits(masks[0]):
        x, y = a % w, a // w
        extend(1, x + ln0 * dx, y + ln0 * dy, [a + j * stride for j in range(ln0)])
    return out


# -- rule application ----------------------------------------------------------------

class _Ctx:
    """Per-tick mutable context: command queue, trace and rng."""
    __slots__ = ("rt", "limits", "commands", "messages", "trace", "rng", "phase", "block")

    def __init__(self, rt, limits, rng):
        self.rt = rt
        self.limits = limits
        self.commands = {}
        self.messages = []
        self.trace = [] if limits.trace else None
        self.rng = rng
        self.phase = "early"
        self.block = 0

    def queue(self, commands):
        for cmd, arg in commands:
            if cmd == "message":
                if arg not in self.messages:
                    self.messages.append(arg)
            elif not cmd.startswith("sfx"):
                self.commands[cmd] = True


def _bind(slot: _Slot, st: GridState, i: int, layer):
    c = st.cells[i]
    mv = st.moves[i]
    for a in slot.ids:
        if c >> a & 1:
            f = (mv >> (5 * layer[a])) & 31
            if slot.kind == 0 or (slot.kind == 1 and f == 0) or (slot.kind == 2 and f & slot.allowed):
                return a, f
    raise EngineDefect("binding failed for a matched cell")


def _compute_writes(rt: _Runtime, v: _Variant, st: GridState, combo, ctx) -> dict:
    layer = rt.layer
    layer_mask = rt.layer_mask
    binds = [_bind(s, st, combo[s.kernel][s.cell], layer) for s in v.slots] if v.slots else ()
    overlay = {}
    cells, moves = st.cells, st.moves
    for kern, positions in zip(v.kernels, combo):
        for p, cw in zip(positions, kern.writes):
            if p in overlay:
                c, mv = overlay[p]
            else:
                c, mv = cells[p], moves[p]
            c2 = c & ~cw.static_clear
            for s in cw.dyn_clear:
                c2 &= ~(1 << binds[s][0])
            mv2 = mv & ~cw.fclear_static
            for s in cw.fclear_dyn:
                mv2 &= ~(31 << (5 * layer[binds[s][0]]))
            for atom, slot, fkind, fval in cw.adds:
                a = atom if atom >= 0 else binds[slot][0]
                L = layer[a]
                sh = 5 * L
                c2 = (c2 & ~layer_mask[L]) | (1 << a)
                if fkind == 1:
                    mv2 = (mv2 & ~(31 << sh)) | (fval << sh)
                elif fkind == 2:
                    mv2 &= ~(31 << sh)
                elif fkind == 3:
                    mv2 = (mv2 & ~(31 << sh)) | (binds[fval][1] << sh)
                elif fkind == 4:
                    if ctx.rng is None:
                        raise EngineError("'randomdir' requires an rng seed")
                    mv2 = (mv2 & ~(31 << sh)) | (1 << ctx.rng.randrange(4)) << sh
            if mv2:
                for L in range(rt.n_layers):
                    if (mv2 >> (5 * L)) & 31 and not c2 & layer_mask[L]:
                        mv2 &= ~(31 << (5 * L))
            overlay[p] = (c2, mv2)
    return overlay


def _effective(st, overlay) -> bool:
    cells, moves = st.cells, st.moves
    for p, (c, mv) in overlay.items():
        if cells[p] != c or moves[p] != mv:
            return True
    return False


def _commit(rt, st, overlay, ctx):
    for p, (c, mv) in overlay.items():
        _write(st, p, c, mv)
    if ctx.limits.debug_checks:
        bad = layer_violations(rt.game, st)
        if bad:
            raise EngineDefect(f"collision layer violated at cells {bad[:5]}")


def _variant_feasible(v: _Variant, st: GridState) -> bool:
    pos = st.pos
    for a in v.need_atoms:
        if not pos[a]:
            return False
    if v.needs_force and not any(st.fpos):
        return False
    return True


def _variant_combos(rt, v, st, geo):
    lists = []
    for kern in v.kernels:
        ms = _kernel_matches(kern, st, geo, v.k, v.dx, v.dy)
        if not ms:
            return None
        lists.append(ms)
    return lists


def _apply_variant(rt, v, st, geo, ctx, budget, trace_key) -> int:
    """Apply one variant until it has no effect; returns number of applications."""
    applied = 0
    while True:
        if not _variant_feasible(v, st):
            return applied
        lists = _variant_combos(rt, v, st, geo)
        if lists is None:
            return applied
        if v.commands:
            ctx.queue(v.commands)
        if not v.has_rhs:
            return applied
        hit = False
        combos = ([(m,) for m in lists[0]] if len(lists) == 1 else product(*lists))
        for combo in combos:
            overlay = _compute_writes(rt, v, st, combo, ctx)
            if _effective(st, overlay):
                _commit(rt, st, overlay, ctx)
                applied += 1
                if ctx.trace is not None:
                    ctx.trace.append({"phase": ctx.phase, "block": ctx.block, "group": trace_key,
                                      "direction": v.rule.direction, "cell": combo[0][0]})
                if applied > budget:
                    raise EngineLoopError(
                        f"rule at line {v.rule.line} exceeded "
                        f"{ctx.limits.max_rule_applications_per_group} applications")
                hit = True
                break
        if not hit:
            return applied


def _apply_random_group(rt, variants, st, geo, ctx) -> bool:
    if ctx.rng is None:
        raise EngineError("random rules require an rng seed")
    candidates = []
    for v in variants:
        if not _variant_feasible(v, st):
            continue
        lists = _variant_combos(rt, v, st, geo)
        if lists is None:
            continue
        for combo in product(*lists):
            if not v.has_rhs:
                candidates.append((v, combo, None))
                continue
            overlay = _compute_writes(rt, v, st, combo, ctx)
            if _effective(st, overlay):
                candidates.append((v, combo, overlay))
    if not candidates:
        return False
    v, combo, overlay = candidates[ctx.rng.randrange(len(candidates))]
    if v.commands:
        ctx.queue(v.commands)
    if overlay is None:
        return False
    _commit(rt, st, overlay, ctx)
    return True


def _apply_group(rt, group_entry, st, ctx) -> bool:
    group, variants = group_entry
    geo = rt.geometry(st.width, st.height)
    if group.is_random:
        return _apply_random_group(rt, variants, st, geo, ctx)
    budget = ctx.limits.max_rule_applications_per_group
    total = 0
    sweeps = 0
    changed = False
    while True:
        pass_changed = False
        for v in variants:
            n = _apply_variant(rt, v, st, geo, ctx, budget - total, group.line)
            if n:
                total += n
                pass_changed = True
        if not pass_changed:
            return changed
        changed = True
        if len(variants) == 1:
            # the lone variant already ran to its own fixpoint
            return changed
        sweeps += 1
        if sweeps > ctx.limits.max_group_sweeps_per_block:
            raise EngineLoopError(f"rule group at line {group.line} did not settle")


def _run_blocks(rt, blocks, st, ctx) -> bool:
    changed = False
    for bi, (kind, groups) in enumerate(blocks):
        ctx.block = bi
        if kind == "plain":
            for g in groups:
                if _apply_group(rt, g, st, ctx):
                    changed = True
            continue
        iterations = 0
        while True:
            any_change = False
            for g in groups:
                if _apply_group(rt, g, st, ctx):
                    any_change = True
            if not any_change:
                break
            changed = True
            iterations += 1
            if iterations > ctx.limits.max_loop_iterations:
                line = groups[0][0].line if groups else 0
                raise EngineLoopError(f"loop starting at line {line} did not settle")
    return changed


def _resolve_movement(rt: _Runtime, st: GridState) -> bool:
    geo = rt.geometry(st.width, st.height)
    neighbor = geo.neighbor
    layer_mask = rt.layer_mask
    nl = rt.n_layers
    cells, moves, fpos = st.cells, st.moves, st.fpos
    moved_any = False
    while True:
        moving = 0
        for b in rt.dir_bits:
            moving |= fpos[b]
        if not moving:
            break
        moved = False
        for i in _iter_bits(moving):
            for L in range(nl):
                sh = 5 * L
                f = (moves[i] >> sh) & 15
                if not f:
                    continue
                dest = neighbor[(f & -f).bit_length() - 1][i]
                lm = layer_mask[L]
                if dest < 0 or cells[dest] & lm:
                    continue
                obj = cells[i] & lm
                _write(st, i, cells[i] & ~lm, moves[i] & ~(31 << sh))
                _write(st, dest, cells[dest] | obj, moves[dest])
                moved = True
        if not moved:
            break
        moved_any = True
    return moved_any


def _clear_forces(st: GridState):
    if not any(st.fpos):
        return
    for i, mv in enumerate(st.moves):
        if mv:
            st.moves[i] = 0
    st.fpos = [0] * len(st.fpos)


def _player_cells(rt, st) -> int:
    m = 0
    for a in rt.player_atoms:
        m |= st.pos[a]
    return m


def _stamp_input(rt, st, code):
    if code == NONE:
        return
    k = code  # up..action map to force index 0..4
    layer = rt.layer
    stamped = 0
    for i in _iter_bits(_player_cells(rt, st)):
        c = st.cells[i]
        mv = st.moves[i]
        for a in rt.player_atoms:
            if c >> a & 1:
                sh = 5 * layer[a]
                mv = (mv & ~(31 << sh)) | (1 << (sh + k))
        _write(st, i, c, mv)
        stamped |= 1 << i
    st.last_input = stamped


def _rng_for(game, rt, st, code, limits, rng):
    if rng is not None or not rt.random:
        return rng
    if limits.rng_seed is None:
        raise EngineError("this game uses random rules; supply EngineLimits.rng_seed")
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<qB", limits.rng_seed, code))
    h.update(state_key(game, st))
    return random.Random(int.from_bytes(h.digest(), "little"))


def _single_pass(rt, st, code, ctx):
    """Input, rules, movement, late rules.  Mutates ``st``."""
    players_before = None
    _stamp_input(rt, st, code)
    if rt.require_player_movement and code < 4:
        players_before = [st.pos[a] for a in rt.player_atoms]
    ctx.phase = "early"
    _run_blocks(rt, rt.blocks, st, ctx)
    if "cancel" in ctx.commands:
        return
    _resolve_movement(rt, st)
    ctx.phase = "late"
    _run_blocks(rt, rt.late_blocks, st, ctx)
    if players_before is not None and players_before == [st.pos[a] for a in rt.player_atoms]:
        ctx.commands["cancel"] = True


# -- public operations ----------------------------------------------------------------

def level_state(game: GameDef, level_index: int) -> GridState:
    if not 0 <= level_index < len(game.levels):
        raise IndexError(f"level index {level_index} out of range (0..{len(game.levels) - 1})")
    lv = game.levels[level_index]
    if lv.is_message:
        raise ValueError(f"level {level_index} is a message, not a playable level")
    cells = [sum(1 << a for a in ids) for ids in lv.cells]
    return GridState.from_cells(lv.width, lv.height, cells, game.num_objects, game.num_layers,
                                level_index)


def init_level(game: GameDef, level_index: int, limits: EngineLimits = DEFAULT_LIMITS):
    """Build the start state of a level; runs one input-free tick when the
    game sets ``run_rules_on_level_start``."""
    st = level_state(game, level_index)
    if game.prelude.get("run_rules_on_level_start"):
        st, outcome = tick(game, st, NONE, limits)
        return st, outcome
    return st, StepOutcome()


def _restart_state(game, st):
    if st.checkpoint is not None:
        rt = get_runtime(game)
        fresh = GridState.from_cells(st.width, st.height, st.checkpoint, rt.n_atoms,
                                     rt.n_layers, st.level_index, st.checkpoint)
        return fresh
    fresh = level_state(game, st.level_index)
    return fresh


def tick(game: GameDef, state: GridState, action=NONE, limits: EngineLimits = DEFAULT_LIMITS,
         rng: Optional[random.Random] = None):
    """Advance one input.  Returns ``(new_state, StepOutcome)``; ``state`` is
    never modified."""
    rt = get_runtime(game)
    code = action_code(action)
    outcome = StepOutcome(rule_trace=[] if limits.trace else None)
    cur = state.copy()
    cur.last_input = 0
    rng = _rng_for(game, rt, state, code, limits, rng)
    again = True
    first = True
    while again:
        again = False
        st = cur.copy()
        ctx = _Ctx(rt, limits, rng)
        _single_pass(rt, st, code if first else NONE, ctx)
        if outcome.rule_trace is not None:
            outcome.rule_trace.extend(ctx.trace)
        cmds = ctx.commands
        outcome.messages.extend(m for m in ctx.messages if m not in outcome.messages)
        if "cancel" in cmds:
            if first:
                outcome.cancelled = True
                return state.copy(), outcome
            break
        if "restart" in cmds:
            cur = _restart_state(game, st)
            outcome.restarted = True
            outcome.changed = True
            return cur, outcome
        _clear_forces(st)
        if "checkpoint" in cmds:
            st.checkpoint = tuple(st.cells)
        if not first:
            if st.cells == cur.cells:
                break
            outcome.again_ticks_used += 1
        cur = st
        if "win" in cmds:
            outcome.won = True
            break
        if check_win(game, cur):
            outcome.won = True
            break
        if "again" in cmds:
            if outcome.again_ticks_used >= limits.max_again_ticks:
                raise EngineLoopError(f"more than {limits.max_again_ticks} again ticks")
            again = True
        first = False
    outcome.changed = cur.cells != state.cells
    if limits.debug_checks:
        bad = layer_violations(game, cur)
        if bad or cur.has_forces():
            raise EngineDefect("tick left forces or layer violations behind")
    return cur, outcome


def apply_rule_group(game: GameDef, state: GridState, group, limits: EngineLimits = DEFAULT_LIMITS,
                     rng=None):
    """Apply one compiled :class:`RuleGroup` to fixpoint on a copy of ``state``."""
    rt = get_runtime(game)
    entry = None
    for _, groups in rt.blocks + rt.late_blocks:
        for g in groups:
            if g[0] is group:
                entry = g
    if entry is None:
        entry = rt._group(group)
    st = state.copy()
    ctx = _Ctx(rt, limits, rng)
    changed = _apply_group(rt, entry, st, ctx)
    return st, changed


def resolve_movement(game: GameDef, state: GridState):
    rt = get_runtime(game)
    st = state.copy()
    moved = _resolve_movement(rt, st)
    return st, moved


def _match_mask(pos, ids, conj, full):
    if conj:
        m = full
        for a in ids:
            m &= pos[a]
        return m
    m = 0
    for a in ids:
        m |= pos[a]
    return m


def win_masks(game: GameDef, state: GridState):
    """Per win condition: (kind, A-cell bitmask, B-cell bitmask or None)."""
    rt = get_runtime(game)
    full = (1 << state.n_cells) - 1
    out = []
    for kind, a, a_all, b, b_all in rt.wins:
        am = _match_mask(state.pos, a, a_all, full)
        bm = _match_mask(state.pos, b, b_all, full) if b else None
        out.append((kind, am, bm))
    return out


def check_win(game: GameDef, state: GridState) -> bool:
    rt = get_runtime(game)
    if not rt.wins:
        return False
    for kind, am, bm in win_masks(game, state):
        if kind == "all_on":
            ok = not am & ~bm
        elif kind == "some_on":
            ok = bool(am & bm)
        elif kind == "no_on":
            ok = not am & bm
        elif kind == "some":
            ok = bool(am)
        else:
            ok = not am
        if not ok:
            return False
    return True


def layer_violations(game: GameDef, state: GridState) -> list:
    """Cells breaking layer exclusivity or holding forces without an occupant."""
    rt = get_runtime(game)
    bad = []
    for i, (c, mv) in enumerate(zip(state.cells, state.moves)):
        for L, lm in enumerate(rt.layer_mask):
            occ = c & lm
            if occ & (occ - 1):
                bad.append(i)
                break
            if (mv >> (5 * L)) & 31 and not occ:
                bad.append(i)
                break
    return bad


# -- keys and conversions ----------------------------------------------------------------

def _typecode(n_atoms):
    if n_atoms <= 8:
        return "B"
    if n_atoms <= 16:
        return "H"
    if n_atoms <= 32:
        return "I" if array("I").itemsize == 4 else "L"
    if n_atoms <= 64:
        return "Q"
    return None


def state_key(game: GameDef, state: GridState) -> bytes:
    """Compact exact encoding of presence (plus checkpoint) for deduplication."""
    tc = _typecode(game.num_objects)
    if tc is None:
        nb = (game.num_objects + 7) // 8
        body = b"".join(c.to_bytes(nb, "little") for c in state.cells)
    else:
        body = array(tc, state.cells).tobytes()
    if state.checkpoint is not None:
        ck = array(tc, state.checkpoint).tobytes() if tc else b"".join(
            c.to_bytes((game.num_objects + 7) // 8, "little") for c in state.checkpoint)
        return body + b"|" + ck
    return body


_BIT_TABLES = [bytes(0x31 if v >> b & 1 else 0x30 for v in range(256)) for b in range(8)]


def _planes_from_bytes(body: bytes, isz: int, n_atoms: int) -> list:
    """Per-atom position bitboards from little-endian packed cell words."""
    lanes = [body] if isz == 1 else [body[j::isz] for j in range(isz)]
    pos = []
    for a in range(n_atoms):
        lane = lanes[a >> 3]
        s = lane.translate(_BIT_TABLES[a & 7])[::-1]
        pos.append(int(s, 2) if b"1" in s else 0)
    return pos


def state_from_key(game: GameDef, key: bytes, width: int, height: int, level_index: int = 0):
    """Inverse of :func:`state_key`."""
    tc = _typecode(game.num_objects)
    n = width * height
    isz = _itemsize(game)
    blen = n * isz
    body = key[:blen]

    def decode(raw):
        if tc is None:
            return [int.from_bytes(raw[i * isz:(i + 1) * isz], "little") for i in range(n)]
        return array(tc, raw).tolist()

    cells = decode(body)
    checkpoint = tuple(decode(key[blen + 1:])) if len(key) > blen else None
    if tc is None or sys.byteorder != "little":
        return GridState.from_cells(width, height, cells, game.num_objects, game.num_layers,
                                    level_index, checkpoint)
    pos = _planes_from_bytes(body, isz, game.num_objects)
    return GridState(width, height, cells, [0] * n, pos, [0] * (5 * game.num_layers), 0,
                     checkpoint, level_index)


def _itemsize(game):
    tc = _typecode(game.num_objects)
    if tc is None:
        return (game.num_objects + 7) // 8
    return array(tc).itemsize
