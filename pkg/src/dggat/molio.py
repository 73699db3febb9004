"""Molecule ingestion: JSONL and SDF V2000 parsing, featurisation, splits, scaling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}
# deuterium / tritium labels occasionally appear in SDF atom blocks
ATOMIC_NUMBER.update({"D": 1, "T": 1})


class ParseError(ValueError):
    """Malformed molecular input.

    Attributes:
        line: 1-based line number in the source text, when known.
        record: 0-based record index (SDF only), when known.
    """

    def __init__(self, message: str, line: Optional[int] = None, record: Optional[int] = None):
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.record = record


class FeaturizationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    z: int
    pos: tuple[float, float, float]


@dataclass(frozen=True)
class Molecule:
    id: str
    atoms: tuple[Atom, ...]
    bonds: tuple[tuple[int, int, int], ...]
    targets: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        problem = validate_molecule(self.atoms, self.bonds)
        if problem:
            raise ValueError(problem)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.pos for a in self.atoms], dtype=np.float64).reshape(-1, 3)

    @property
    def atomic_numbers(self) -> list[int]:
        return [a.z for a in self.atoms]

    def with_positions(self, positions: np.ndarray) -> "Molecule":
        atoms = tuple(Atom(a.z, tuple(float(c) for c in p)) for a, p in zip(self.atoms, positions))
        return Molecule(self.id, atoms, self.bonds, dict(self.targets))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "atoms": [{"z": a.z, "pos": list(a.pos)} for a in self.atoms],
            "bonds": [list(b) for b in self.bonds],
            "targets": dict(self.targets),
        }


def validate_molecule(atoms: Sequence[Atom], bonds: Sequence[tuple[int, int, int]]) -> Optional[str]:
    """Return a description of the first invariant violation, or None."""
    if not atoms:
        return "molecule has no atoms"
    for k, a in enumerate(atoms):
        if not 1 <= a.z <= len(ELEMENTS):
            return f"atom {k}: atomic number {a.z} out of range"
        if len(a.pos) != 3 or not all(math.isfinite(c) for c in a.pos):
            return f"atom {k}: position must be 3 finite floats"
    seen = set()
    n = len(atoms)
    for i, j, order in bonds:
        if not (0 <= i < n and 0 <= j < n):
            return f"bond ({i}, {j}) index out of range for {n} atoms"
        if i == j:
            return f"bond ({i}, {j}) is a self-bond"
        if order not in (1, 2, 3, 4):
            return f"bond ({i}, {j}) order {order} not in 1..4"
        key = (min(i, j), max(i, j))
        if key in seen:
            return f"duplicate bond ({i}, {j})"
        seen.add(key)
    return None


@dataclass
class Dataset:
    molecules: list[Molecule]
    target_names: list[str]
    element_vocab: list[int]

    @classmethod
    def from_molecules(cls, molecules: Sequence[Molecule]) -> "Dataset":
        molecules = list(molecules)
        if not molecules:
            raise DatasetError("dataset is empty")
        common = set(molecules[0].targets)
        for m in molecules[1:]:
            common &= set(m.targets)
        vocab = sorted({z for m in molecules for z in m.atomic_numbers})
        return cls(molecules, sorted(common), vocab)

    def __len__(self) -> int:
        return len(self.molecules)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset.from_molecules([self.molecules[i] for i in indices])

    def targets(self, name: str, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        if name not in self.target_names:
            raise DatasetError(f"unknown target {name!r}; available: {self.target_names}")
        mols = self.molecules if indices is None else [self.molecules[i] for i in indices]
        return np.array([m.targets[name] for m in mols], dtype=np.float64)


# ---------------------------------------------------------------------------
# JSONL


def _record_to_molecule(rec, line: int) -> Molecule:
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", line=line)
    for key in ("id", "atoms", "bonds", "targets"):
        if key not in rec:
            raise ParseError(f"missing field {key!r}", line=line)
    try:
        atoms = []
        for a in rec["atoms"]:
            z = a["z"]
            if isinstance(z, bool) or not isinstance(z, int):
                raise ParseError(f"atomic number {z!r} is not an integer", line=line)
            pos = tuple(float(c) for c in a["pos"])
            atoms.append(Atom(z, pos))
        bonds = []
        for b in rec["bonds"]:
            if len(b) != 3 or not all(isinstance(v, int) and not isinstance(v, bool) for v in b):
                raise ParseError(f"bond {b!r} must be [i, j, order] integers", line=line)
            bonds.append((b[0], b[1], b[2]))
        targets = {str(k): float(v) for k, v in rec["targets"].items()}
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed record: {exc}", line=line) from None
    problem = validate_molecule(atoms, bonds)
    if problem:
        raise ParseError(problem, line=line)
    return Molecule(str(rec["id"]), tuple(atoms), tuple(bonds), targets)


def parse_jsonl(text: str) -> Dataset:
    """Parse the native one-object-per-line format into a :class:`Dataset`."""
    molecules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
        molecules.append(_record_to_molecule(rec, lineno))
    if not molecules:
        raise ParseError("no records")
    return Dataset.from_molecules(molecules)


def serialize_jsonl(molecules: Iterable[Molecule]) -> str:
    lines = [json.dumps(m.to_record(), separators=(",", ":")) for m in molecules]
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# SDF V2000


def _int_fields(line: str, count: int) -> Optional[list[int]]:
    """Leading integer fields, whitespace-separated first, 3-wide columns as fallback."""
    tokens = line.split()
    try:
        vals = [int(t) for t in tokens[:count]]
        if len(vals) == count and all(len(t) <= 3 for t in tokens[:count]):
            return vals
    except ValueError:
        pass
    try:
        vals = [int(line[3 * k : 3 * k + 3]) for k in range(count)]
    except ValueError:
        return None
    return vals


def _parse_atom_row(line: str) -> Optional[tuple[float, float, float, str]]:
    tokens = line.split()
    if len(tokens) >= 4:
        try:
            return float(tokens[0]), float(tokens[1]), float(tokens[2]), tokens[3]
        except ValueError:
            pass
    if len(line) >= 34:
        try:
            return float(line[0:10]), float(line[10:20]), float(line[20:30]), line[31:34].strip()
        except ValueError:
            return None
    return None


def _parse_sdf_record(lines: list[str], first_line: int, record: int) -> Molecule:
    def err(msg, offset):
        return ParseError(msg, line=first_line + offset, record=record)

    if len(lines) < 4:
        raise err("truncated header: expected 3 header lines and a counts line", len(lines))
    title = lines[0].strip()
    counts_line = lines[3]
    if "V3000" in counts_line:
        raise err("V3000 molblocks are not supported", 3)
    counts = _int_fields(counts_line, 2)
    if counts is None or counts[0] < 1 or counts[1] < 0:
        raise err(f"bad counts line {counts_line!r}", 3)
    n_atoms, n_bonds = counts
    atom_end = 4 + n_atoms
    bond_end = atom_end + n_bonds
    if len(lines) < bond_end:
        raise err(
            f"truncated block: counts line declares {n_atoms} atoms and {n_bonds} bonds",
            len(lines),
        )
    atoms = []
    for k in range(4, atom_end):
        row = _parse_atom_row(lines[k])
        if row is None:
            raise err(f"bad atom row {lines[k]!r}", k)
        x, y, z, sym = row
        if sym not in ATOMIC_NUMBER:
            raise err(f"unknown element symbol {sym!r}", k)
        if not all(math.isfinite(c) for c in (x, y, z)):
            raise err("non-finite coordinate", k)
        atoms.append(Atom(ATOMIC_NUMBER[sym], (x, y, z)))
    bonds = []
    for k in range(atom_end, bond_end):
        vals = _int_fields(lines[k], 3)
        if vals is None:
            raise err(f"bad bond row {lines[k]!r}", k)
        i, j, order = vals
        bonds.append((i - 1, j - 1, order))
        problem = validate_molecule(atoms, bonds)
        if problem:
            raise err(problem, k)

    targets = {}
    k = bond_end
    while k < len(lines) and not lines[k].startswith("M  END"):
        k += 1
    k += 1
    while k < len(lines):
        line = lines[k]
        if line.startswith(">") and "<" in line and ">" in line[line.index("<") :]:
            name = line[line.index("<") + 1 : line.index(">", line.index("<"))]
            value = lines[k + 1].strip() if k + 1 < len(lines) else ""
            try:
                v = float(value)
            except ValueError:
                v = None
            if v is not None and math.isfinite(v):
                targets[name] = v
            k += 2
            continue
        k += 1
    return Molecule(title or f"mol{record}", tuple(atoms), tuple(bonds), targets)


def parse_sdf_v2000(text: str) -> list[Molecule]:
    """Parse ``$$$$``-separated V2000 molblocks.

    Numeric data items (``> <name>`` followed by a value line) become targets.
    """
    lines = text.splitlines()
    molecules = []
    start = 0
    record = 0
    for k, line in enumerate(lines + ["$$$$"]):
        if line.strip() != "$$$$":
            continue
        block = lines[start:k]
        if any(b.strip() for b in block):
            molecules.append(_parse_sdf_record(block, start + 1, record))
            record += 1
        start = k + 1
    if not molecules:
        raise ParseError("no records")
    return molecules


def load_dataset(path: str, fmt: Optional[str] = None) -> Dataset:
    fmt = fmt or ("sdf" if str(path).lower().endswith((".sdf", ".mol", ".sd")) else "jsonl")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if fmt == "sdf":
        return Dataset.from_molecules(parse_sdf_v2000(text))
    if fmt == "jsonl":
        return parse_jsonl(text)
    raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------------------
# features, splits, scaling


def featurize_nodes(m: Molecule, vocab: Sequence[int]) -> np.ndarray:
    """One-hot atomic number rows, ``[n_atoms, len(vocab)]``."""
    column = {z: k for k, z in enumerate(vocab)}
    X = np.zeros((m.n_atoms, len(vocab)), dtype=np.float64)
    for i, z in enumerate(m.atomic_numbers):
        if z not in column:
            sym = ELEMENTS[z - 1] if 1 <= z <= len(ELEMENTS) else str(z)
            raise FeaturizationError(f"element {sym} (Z={z}) of molecule {m.id!r} not in vocab {list(vocab)}")
        X[i, column[z]] = 1.0
    return X


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, ...]
    test: tuple[int, ...]
    val: tuple[int, ...]

    def __post_init__(self):
        parts = (self.train, self.test, self.val)
        if any(len(p) == 0 for p in parts):
            raise DatasetError("every split must be nonempty")
        seen = set()
        for p in parts:
            if seen.intersection(p) or len(set(p)) != len(p):
                raise DatasetError("splits overlap")
            seen.update(p)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "test": list(self.test), "val": list(self.val)}

    @classmethod
    def from_dict(cls, d: Mapping, n: Optional[int] = None) -> "SplitSpec":
        split = cls(tuple(int(i) for i in d["train"]), tuple(int(i) for i in d["test"]),
                    tuple(int(i) for i in d["val"]))
        if n is not None and any(not 0 <= i < n for p in (split.train, split.test, split.val) for i in p):
            raise DatasetError(f"split index out of range for {n} molecules")
        return split


def split_dataset(d: Dataset, sizes: Sequence[int], seed: int) -> SplitSpec:
    """Seeded shuffle, then consecutive train / test / validation blocks."""
    n_train, n_test, n_val = (int(s) for s in sizes)
    if min(n_train, n_test, n_val) < 1:
        raise DatasetError(f"split sizes must be positive, got {tuple(sizes)}")
    if n_train + n_test + n_val > len(d):
        raise DatasetError(f"split sizes {tuple(sizes)} exceed dataset size {len(d)}")
    perm = np.random.default_rng(seed).permutation(len(d)).tolist()
    return SplitSpec(
        tuple(perm[:n_train]),
        tuple(perm[n_train : n_train + n_test]),
        tuple(perm[n_train + n_test : n_train + n_test + n_val]),
    )


@dataclass(frozen=True)
class TargetScaler:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DatasetError(f"scaler std must be positive, got {self.std}")

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_scaler(d: Dataset, split: SplitSpec, target: str) -> TargetScaler:
    """Mean / population std of ``target`` over the training split only."""
    y = d.targets(target, split.train)
    std = float(y.std())
    if std < 1e-12:
        raise DatasetError(f"target {target!r} is constant on the training split")
    return TargetScaler(float(y.mean()), std)
