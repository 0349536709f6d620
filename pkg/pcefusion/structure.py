"""Crystal structures and their text formats.

Two formats are understood: the native structure record (one JSON object with ``lattice``, ``frac_coords``,
``atomic_numbers`` and ``formula``) and a small CIF subset (cell lengths/angles and an ``_atom_site_`` loop with
fractional coordinates).
"""
import collections
import json
import re
from logging import getLogger
from typing import Dict, List, Sequence, Tuple

import numpy as np
from ase.data import atomic_numbers as ATOMIC_NUMBERS
from ase.data import chemical_symbols as CHEMICAL_SYMBOLS
from ase.geometry import cellpar_to_cell

from pcefusion.component import Component
from pcefusion.errors import ParseError

logger = getLogger(__name__)

MAX_ATOMIC_NUMBER = 118

CELL_KEYS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)


class CrystalStructure(Component):
    """A periodic crystal: a unit cell and the atoms inside it.

    Attributes:
        lattice (np.ndarray): A 3x3 matrix whose rows are the lattice vectors in angstroms.
        frac_coords (np.ndarray): An Nx3 array of fractional coordinates wrapped into [0, 1).
        atomic_numbers (np.ndarray): N atomic numbers in [1, 118].
        formula (str): A formula label.
    """

    def __init__(self, lattice, frac_coords, atomic_numbers, formula: str = ""):
        self.lattice: np.ndarray = np.asarray(lattice, dtype=np.float64).reshape(3, 3)
        self.frac_coords: np.ndarray = wrap_fractional(np.asarray(frac_coords, dtype=np.float64).reshape(-1, 3))
        self.atomic_numbers: np.ndarray = np.asarray(atomic_numbers, dtype=np.int64).reshape(-1)
        self.formula: str = formula or reduced_formula(self.atomic_numbers)

    @property
    def num_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def cart_coords(self) -> np.ndarray:
        """Cartesian coordinates in angstroms."""
        return self.frac_coords @ self.lattice

    @property
    def volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice)))

    @property
    def symbols(self) -> List[str]:
        return [CHEMICAL_SYMBOLS[z] for z in self.atomic_numbers]

    def to_dict(self) -> dict:
        """Convert this object into a native structure record."""
        return dict(
            lattice=self.lattice.reshape(-1).tolist(),
            frac_coords=self.frac_coords.tolist(),
            atomic_numbers=self.atomic_numbers.tolist(),
            formula=self.formula,
        )

    def to_string(self) -> str:
        """Convert this object into a string."""
        return f"<CrystalStructure, formula: {self.formula}, #atoms: {self.num_atoms}, volume: {self.volume:.3f}>"


def wrap_fractional(frac_coords: np.ndarray) -> np.ndarray:
    """Wrap fractional coordinates into [0, 1)."""
    wrapped = frac_coords - np.floor(frac_coords)
    # x - floor(x) can round up to exactly 1.0 for tiny negative x.
    wrapped[wrapped >= 1.0] = 0.0
    return wrapped


def reduced_formula(numbers: Sequence[int]) -> str:
    """Build a formula label such as "CsPbI3", listing elements in order of first appearance."""
    counts = collections.Counter(int(z) for z in numbers)
    return "".join(f"{CHEMICAL_SYMBOLS[z]}{n if n > 1 else ''}" for z, n in counts.items())


def symbol_to_number(symbol: str, line: int = 0) -> int:
    """Map an element symbol to its atomic number.

    Raises:
        ParseError: If the symbol is not a chemical element.
    """
    number = ATOMIC_NUMBERS.get(symbol, 0)
    if not 1 <= number <= MAX_ATOMIC_NUMBER:
        raise ParseError(f"unknown element symbol {symbol!r}", line)
    return number


def parse_structure(source: str) -> CrystalStructure:
    """Parse a native structure record or a CIF-subset document.

    Args:
        source: The text of the structure. Text starting with "{" is read as a native record.

    Returns:
        A :class:`CrystalStructure`.

    Raises:
        ParseError: On missing cell parameters, unknown element symbols, or a non-invertible lattice.
    """
    if source.lstrip().startswith("{"):
        try:
            record = json.loads(source)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed structure record: {e.msg}", e.lineno)
        return JsonStructureBuilder.build(record)
    return CifStructureBuilder.build(source)


def _check_lattice(lattice: np.ndarray, line: int = 0) -> None:
    if not np.all(np.isfinite(lattice)) or abs(np.linalg.det(lattice)) < 1e-8:
        raise ParseError("lattice is not invertible", line)


class JsonStructureBuilder:
    @classmethod
    def build(cls, record: dict) -> CrystalStructure:
        for key in ("lattice", "frac_coords", "atomic_numbers"):
            if key not in record:
                raise ParseError(f"structure record is missing {key!r}")
        lattice = np.asarray(record["lattice"], dtype=np.float64)
        if lattice.size != 9:
            raise ParseError(f"lattice must hold 9 reals, got {lattice.size}")
        lattice = lattice.reshape(3, 3)
        _check_lattice(lattice)
        frac_coords = np.asarray(record["frac_coords"], dtype=np.float64).reshape(-1, 3)
        numbers = np.asarray(record["atomic_numbers"], dtype=np.int64).reshape(-1)
        if len(numbers) != len(frac_coords) or len(numbers) == 0:
            raise ParseError(f"{len(numbers)} atomic numbers for {len(frac_coords)} sites")
        if np.any(numbers < 1) or np.any(numbers > MAX_ATOMIC_NUMBER):
            raise ParseError(f"atomic numbers must lie in [1, {MAX_ATOMIC_NUMBER}]")
        return CrystalStructure(lattice, frac_coords, numbers, record.get("formula", ""))


class CifStructureBuilder:
    """Reads the CIF subset: cell lengths/angles, ``_chemical_formula_sum``, and an atom-site loop."""

    _label_pat = re.compile(r"^([A-Z][a-z]?)")

    @classmethod
    def build(cls, source: str) -> CrystalStructure:
        logger.debug("Create a CrystalStructure from CIF text.")
        lines = source.splitlines()
        cellpar: Dict[str, float] = {}
        formula = ""
        sites: List[Tuple[int, List[str], Dict[str, int]]] = []

        i = 0
        while i < len(lines):
            tokens = cls._tokenize(lines[i])
            if not tokens:
                i += 1
                continue
            key = tokens[0].lower()
            if key in CELL_KEYS:
                if len(tokens) < 2:
                    raise ParseError(f"{key} has no value", i + 1)
                cellpar[key] = cls._number(tokens[1], i + 1)
            elif key == "_chemical_formula_sum" and len(tokens) > 1:
                formula = "".join("".join(tokens[1:]).split())
            elif key == "loop_":
                loop_line = i + 1
                i, columns, rows = cls._read_loop(lines, i + 1)
                # Site loops carry fractional coordinates; _atom_site_aniso_* loops and the like are skipped.
                if any(c.startswith("_atom_site_fract_") for c in columns):
                    sites.extend((line_no, row, columns) for line_no, row in rows)
                elif any(c.startswith("_atom_site_cartn_") for c in columns):
                    raise ParseError("atom-site loop has cartesian but no fractional coordinates", loop_line)
                continue
            i += 1

        missing = [k for k in CELL_KEYS if k not in cellpar]
        if missing:
            raise ParseError(f"missing cell parameters {missing}", len(lines))
        lattice = cellpar_to_cell([cellpar[k] for k in CELL_KEYS])
        _check_lattice(lattice, len(lines))
        if not sites:
            raise ParseError("no atom sites found", len(lines))

        numbers, frac_coords = [], []
        for line_no, row, columns in sites:
            number, xyz = cls._read_site(row, columns, line_no)
            numbers.append(number)
            frac_coords.append(xyz)
        structure = CrystalStructure(lattice, frac_coords, numbers, formula)
        logger.debug(f"Successfully created {structure}.")
        return structure

    @staticmethod
    def _tokenize(line: str) -> List[str]:
        line = line.split("#", 1)[0].strip()
        if not line:
            return []
        # Quoted values such as 'Cs Pb I3' are single tokens.
        return [a or b for a, b in re.findall(r"'([^']*)'|(\S+)", line)]

    @staticmethod
    def _number(token: str, line: int) -> float:
        # Drop standard uncertainties: 5.8230(4) -> 5.8230.
        try:
            return float(token.split("(", 1)[0])
        except ValueError:
            raise ParseError(f"expected a number, got {token!r}", line)

    @classmethod
    def _read_loop(cls, lines: List[str], start: int) -> Tuple[int, Dict[str, int], List[Tuple[int, List[str]]]]:
        columns: Dict[str, int] = {}
        i = start
        while i < len(lines):
            tokens = cls._tokenize(lines[i])
            if tokens and tokens[0].startswith("_"):
                columns[tokens[0].lower()] = len(columns)
                i += 1
            else:
                break
        rows: List[Tuple[int, List[str]]] = []
        while i < len(lines):
            tokens = cls._tokenize(lines[i])
            if not tokens:
                if rows:
                    break
                i += 1
                continue
            if tokens[0].startswith("_") or tokens[0].lower() in {"loop_"} or tokens[0].startswith("data_"):
                break
            rows.append((i + 1, tokens))
            i += 1
        return i, columns, rows

    @classmethod
    def _read_site(cls, row: List[str], columns: Dict[str, int], line: int) -> Tuple[int, List[float]]:
        for axis in "xyz":
            if f"_atom_site_fract_{axis}" not in columns:
                raise ParseError(f"atom-site loop lacks _atom_site_fract_{axis}", line)
        if len(row) < len(columns):
            raise ParseError(f"atom-site row has {len(row)} fields, expected {len(columns)}", line)
        if "_atom_site_type_symbol" in columns:
            match = cls._label_pat.match(row[columns["_atom_site_type_symbol"]])
        elif "_atom_site_label" in columns:
            match = cls._label_pat.match(row[columns["_atom_site_label"]])
        else:
            raise ParseError("atom-site loop lacks both _atom_site_type_symbol and _atom_site_label", line)
        symbol = match.group(1) if match else row[columns.get("_atom_site_type_symbol", 0)]
        number = symbol_to_number(symbol, line)
        xyz = [cls._number(row[columns[f"_atom_site_fract_{axis}"]], line) for axis in "xyz"]
        return number, xyz
