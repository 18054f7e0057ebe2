"""Extended-XYZ reading and writing.

A frame is an atom count line, a ``key=value`` comment line and one body
line per atom: ``symbol x y z`` optionally followed by force components.
Recognised header keys are ``energy``, ``dipole`` (three floats) and
``polarizability`` (nine floats, row-major); a ``Properties`` key selects
per-atom columns (``forces:R:3``, ``shielding:R:9``).
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from tensornet.geometry import AtomicSystem, GeometryError

__all__ = ["ELEMENTS", "Dataset", "ExtXYZError", "parse_extxyz", "parse_extxyz_text",
           "write_extxyz", "format_extxyz", "atomic_number"]

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
_Z = {s: k + 1 for k, s in enumerate(ELEMENTS)}

_COLUMN_WIDTH = {"species": 1, "pos": 3, "forces": 3, "shielding": 9}


class ExtXYZError(ValueError):
    """Malformed extended-XYZ input; the message names the offending line."""


@dataclass
class Dataset:
    systems: list
    energy_unit: str = "unknown"
    length_unit: str = "angstrom"
    path: str | None = None

    def __post_init__(self):
        if not self.systems:
            raise ValueError("a dataset needs at least one system")

    def __len__(self):
        return len(self.systems)

    def __iter__(self):
        return iter(self.systems)

    def __getitem__(self, k):
        return self.systems[k]


def atomic_number(symbol: str) -> int:
    try:
        return _Z[symbol]
    except KeyError:
        # tolerate case variants such as "CL"
        fixed = symbol[:1].upper() + symbol[1:].lower()
        if fixed in _Z:
            return _Z[fixed]
        raise KeyError(symbol) from None


def _parse_header(line: str, lineno: int) -> dict[str, str]:
    try:
        tokens = shlex.split(line, posix=True)
    except ValueError as exc:
        raise ExtXYZError(f"line {lineno}: cannot tokenize header ({exc})") from None
    out = {}
    for tok in tokens:
        if "=" not in tok:
            continue  # bare words are free-form comments
        key, value = tok.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out


def _floats(text: str, n: int, what: str, lineno: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise ExtXYZError(f"line {lineno}: {what} needs {n} values, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise ExtXYZError(f"line {lineno}: malformed float in {what}: {text!r}") from None


def _columns(header: dict, lineno: int) -> list[tuple[str, int]] | None:
    props = header.get("properties")
    if props is None:
        return None
    fields = props.split(":")
    if len(fields) % 3:
        raise ExtXYZError(f"line {lineno}: Properties must be name:type:count triples")
    cols = []
    for k in range(0, len(fields), 3):
        name, _, count = fields[k:k + 3]
        try:
            width = int(count)
        except ValueError:
            raise ExtXYZError(f"line {lineno}: bad column count {count!r}") from None
        cols.append((name.lower(), width))
    names = [c[0] for c in cols]
    if names[:2] != ["species", "pos"]:
        raise ExtXYZError(f"line {lineno}: Properties must start with species and pos")
    for name, width in cols:
        if name in _COLUMN_WIDTH and width != _COLUMN_WIDTH[name]:
            raise ExtXYZError(f"line {lineno}: column {name} must have width {_COLUMN_WIDTH[name]}")
    return cols


def parse_extxyz_text(text: str, path: str | None = None) -> list[AtomicSystem]:
    lines = text.splitlines()
    systems = []
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        count_line = k + 1
        try:
            n = int(lines[k].split()[0])
        except ValueError:
            raise ExtXYZError(f"line {count_line}: expected an atom count, got {lines[k]!r}") from None
        if n < 1 or len(lines[k].split()) != 1:
            raise ExtXYZError(f"line {count_line}: expected a positive atom count, got {lines[k]!r}")
        if k + 1 >= len(lines):
            raise ExtXYZError(f"line {count_line + 1}: missing header line")
        header_no = k + 2
        header = _parse_header(lines[k + 1], header_no)
        cols = _columns(header, header_no)
        body = lines[k + 2:k + 2 + n]
        if len(body) < n or any(not b.strip() for b in body):
            short = k + 2 + next((q for q, b in enumerate(body) if not b.strip()), len(body)) + 1
            raise ExtXYZError(
                f"line {short}: frame starting at line {count_line} declares {n} atoms "
                f"but has {sum(1 for b in body if b.strip())} body lines")
        z = np.zeros(n, dtype=np.int64)
        pos = np.zeros((n, 3))
        per_atom: dict[str, np.ndarray] = {}
        for q, raw in enumerate(body):
            lineno = k + 3 + q
            parts = raw.split()
            widths = cols if cols is not None else (
                [("species", 1), ("pos", 3)] + ([("forces", 3)] if len(parts) == 7 else []))
            if len(parts) != sum(w for _, w in widths):
                raise ExtXYZError(f"line {lineno}: expected {sum(w for _, w in widths)} columns, "
                                  f"got {len(parts)}")
            try:
                z[q] = atomic_number(parts[0])
            except KeyError:
                raise ExtXYZError(f"line {lineno}: unknown element symbol {parts[0]!r}") from None
            at = 1
            for name, width in widths[1:]:
                vals = _floats(" ".join(parts[at:at + width]), width, name, lineno)
                at += width
                if name == "pos":
                    pos[q] = vals
                else:
                    per_atom.setdefault(name, np.zeros((n, width)))[q] = vals
        labels = {}
        if "energy" in header:
            labels["energy"] = float(_floats(header["energy"], 1, "energy", header_no)[0])
        if "dipole" in header:
            labels["dipole"] = _floats(header["dipole"], 3, "dipole", header_no)
        if "polarizability" in header:
            labels["polarizability"] = _floats(header["polarizability"], 9, "polarizability",
                                               header_no).reshape(3, 3)
        if "forces" in per_atom:
            labels["forces"] = per_atom["forces"]
        if "shielding" in per_atom:
            labels["shielding"] = per_atom["shielding"].reshape(n, 3, 3)
        try:
            systems.append(AtomicSystem(z, pos, **labels))
        except GeometryError as exc:
            raise ExtXYZError(f"line {count_line}: {exc}") from None
        k += 2 + n
    if not systems:
        raise ExtXYZError(f"{path or '<text>'}: no frames found")
    return systems


def parse_extxyz(path, energy_unit: str = "unknown", length_unit: str = "angstrom") -> Dataset:
    path = Path(path)
    systems = parse_extxyz_text(path.read_text(), str(path))
    return Dataset(systems, energy_unit, length_unit, str(path))


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest string that round-trips exactly


def format_extxyz(systems: Sequence[AtomicSystem]) -> str:
    out = []
    for s in systems:
        props = "species:S:1:pos:R:3"
        if s.forces is not None:
            props += ":forces:R:3"
        if s.shielding is not None:
            props += ":shielding:R:9"
        head = [f"Properties={props}"]
        if s.energy is not None:
            head.append(f"energy={_fmt(s.energy)}")
        if s.dipole is not None:
            head.append('dipole="' + " ".join(_fmt(v) for v in s.dipole) + '"')
        if s.polarizability is not None:
            head.append('polarizability="' + " ".join(_fmt(v) for v in s.polarizability.ravel()) + '"')
        out.append(str(len(s)))
        out.append(" ".join(head))
        for q in range(len(s)):
            row = [ELEMENTS[s.atomic_numbers[q] - 1]] + [_fmt(v) for v in s.positions[q]]
            if s.forces is not None:
                row += [_fmt(v) for v in s.forces[q]]
            if s.shielding is not None:
                row += [_fmt(v) for v in s.shielding[q].ravel()]
            out.append(" ".join(row))
    return "\n".join(out) + "\n"


def write_extxyz(path, systems: Sequence[AtomicSystem]):
    Path(path).write_text(format_extxyz(list(systems)))
