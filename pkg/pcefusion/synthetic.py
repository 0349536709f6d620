"""Synthetic device datasets with known ground truth.

The generated PCE of a device is

    PCE* = base + structure_weight * f(structure) + sum of layer qualities + interaction term

where ``f`` combines the mean nearest-neighbor distance and the mean atomic number of the absorber, and the
interaction term couples those structure descriptors with the HTL and ETL qualities. The observed value adds
heteroscedastic Gaussian noise of standard deviation ``sigma(x)`` in [0.5, 3.0] (times ``noise_scale``) and is
clipped to [0, 30].
"""
from logging import getLogger
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from ase.data import atomic_numbers as ATOMIC_NUMBERS
from pydantic import BaseModel, validator

from pcefusion.crystal_graph import build_graph
from pcefusion.dataset import DeviceRecord
from pcefusion.structure import CrystalStructure
from pcefusion.text_encoder import LAYER_ROLES, LayerText

logger = getLogger(__name__)

PCE_MIN = 0.0
PCE_MAX = 30.0
SIGMA_MIN = 0.5
SIGMA_MAX = 3.0

A_SITES = ("Cs", "Rb", "K")
B_SITES = ("Pb", "Sn", "Ge")
X_SITES = ("I", "Br", "Cl")
# Approximate octahedral B-X bond lengths decide the cubic lattice constant.
_B_RADII = dict(Pb=1.19, Sn=1.10, Ge=0.73)
_X_RADII = dict(I=2.20, Br=1.96, Cl=1.81)
MOTIFS = ("cubic", "supercell", "fcc")

LAYER_CATALOGS: Dict[str, Dict[str, float]] = {
    "substrate": {"SLG | FTO": 0.6, "SLG | ITO": 1.0, "PET | ITO": -0.8, "Quartz | ITO": 0.2, "FTO": 0.3},
    "etl": {"TiO2-c | TiO2-mp": 1.5, "SnO2-np": 1.2, "PCBM-60": 0.3, "ZnO-c": -0.5, "TiO2-c": 0.6, "C60 | BCP": 0.0},
    "htl": {"Spiro-MeOTAD": 1.5, "PTAA": 1.2, "PEDOT:PSS": -0.5, "NiO-c": 0.2, "CuSCN": 0.0, "none": -2.0},
    "back_contact": {"Au": 1.0, "Ag": 0.6, "Carbon": -0.5, "Al": -0.2, "MoO3 | Ag": 0.3},
}


class SyntheticSpec(BaseModel):
    """Settings of the synthetic generator.

    Attributes:
        num_devices: The number of device records.
        num_structures: The size of the absorber structure pool shared by the devices.
        seed: The generator seed.
        num_configurations: When set, devices are drawn from this many material configurations (an absorber
            structure plus four layer strings), so that groups of devices share a configuration. When None, every
            device draws its structure and layers independently.
        base_pce: The constant term of PCE*.
        structure_weight: The weight of the structure term; 0 makes PCE* depend on layer strings only.
        layer_weight: The weight of each layer quality.
        interaction_strength: The weight of the structure-layer interaction term.
        noise_scale: Multiplies sigma(x); 0 gives noise-free observations.
        noise_offset: Shifts the logit of sigma(x) down; larger values make low-noise devices more common.
        perturbation: The maximum fractional displacement applied to perturbed structures.
    """

    num_devices: int = 2000
    num_structures: int = 60
    seed: int = 42
    num_configurations: Optional[int] = None
    base_pce: float = 15.0
    structure_weight: float = 3.5
    layer_weight: float = 2.5
    interaction_strength: float = 2.0
    noise_scale: float = 1.0
    noise_offset: float = 1.0
    perturbation: float = 0.03

    class Config:
        extra = "forbid"

    @validator("num_devices", "num_structures", "num_configurations")
    def check_positive(cls, v):
        if v is not None and v < 1:
            raise ValueError("must be positive")
        return v

    @validator("noise_scale", "perturbation")
    def check_nonnegative(cls, v):
        if v < 0:
            raise ValueError("must be nonnegative")
        return v


def cubic_perovskite(a_site: str, b_site: str, x_site: str, lattice_constant: float) -> CrystalStructure:
    """The five-atom cubic ABX3 cell: A at the corner, B at the body center, X at the face centers."""
    numbers = [ATOMIC_NUMBERS[s] for s in (a_site, b_site, x_site, x_site, x_site)]
    frac = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]
    return CrystalStructure(np.eye(3) * lattice_constant, frac, numbers)


def rocksalt(a_site: str, x_site: str, lattice_constant: float) -> CrystalStructure:
    """The eight-atom conventional cell of an AX rock-salt (two interpenetrating FCC lattices)."""
    fcc = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
    frac = np.concatenate([fcc, fcc + [0.5, 0.0, 0.0]])
    numbers = [ATOMIC_NUMBERS[a_site]] * 4 + [ATOMIC_NUMBERS[x_site]] * 4
    return CrystalStructure(np.eye(3) * lattice_constant, frac, numbers)


def mixed_supercell(a_site: str, b_sites: Tuple[str, str], x_site: str, lattice_constant: float) -> CrystalStructure:
    """A 2x1x1 supercell of the cubic cell whose two B sites hold different metals."""
    cell = cubic_perovskite(a_site, b_sites[0], x_site, lattice_constant)
    frac = np.concatenate([cell.frac_coords * [0.5, 1.0, 1.0], cell.frac_coords * [0.5, 1.0, 1.0] + [0.5, 0, 0]])
    numbers = np.concatenate([cell.atomic_numbers, cell.atomic_numbers])
    numbers[6] = ATOMIC_NUMBERS[b_sites[1]]
    lattice = np.diag([2 * lattice_constant, lattice_constant, lattice_constant])
    return CrystalStructure(lattice, frac, numbers)


def structure_descriptors(s: CrystalStructure) -> Tuple[float, float]:
    """The mean nearest-neighbor distance (angstroms) and the mean atomic number of ``s``."""
    g = build_graph(s)
    nearest = np.full(s.num_atoms, np.inf)
    np.minimum.at(nearest, g.src, g.distances)
    return float(np.mean(nearest)), float(np.mean(s.atomic_numbers))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def observe(truth: np.ndarray, sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw observed PCE values ``clip(truth + sigma * z)`` with standard-normal ``z``."""
    return np.clip(truth + sigma * rng.standard_normal(np.shape(truth)), PCE_MIN, PCE_MAX)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[List[DeviceRecord], Dict[str, CrystalStructure], pd.DataFrame]:
    """See :class:`SyntheticDatasetBuilder`."""
    return SyntheticDatasetBuilder.build(spec)


class SyntheticDatasetBuilder:
    @classmethod
    def build(cls, spec: SyntheticSpec) -> Tuple[List[DeviceRecord], Dict[str, CrystalStructure], pd.DataFrame]:
        """Generate device records, their structure store, and the ground-truth table.

        The table has one row per device with columns device_id, structure_term, layer_term, interaction_term,
        pce_true (clipped PCE*), sigma, and pce (the observed value).
        """
        logger.debug(f"Create a synthetic dataset of {spec.num_devices} devices.")
        rng = np.random.default_rng(spec.seed)
        store = cls._structure_pool(spec, rng)
        refs = list(store)

        descriptors = np.array([structure_descriptors(store[ref]) for ref in refs])
        spread = descriptors.std(axis=0)
        z_desc = (descriptors - descriptors.mean(axis=0)) / np.where(spread > 0, spread, 1.0)

        names = {role: sorted(LAYER_CATALOGS[role]) for role in LAYER_ROLES}
        draws = spec.num_configurations or spec.num_devices
        structure_index = rng.integers(0, len(refs), size=draws)
        choices = {role: rng.integers(0, len(names[role]), size=draws) for role in LAYER_ROLES}
        if spec.num_configurations:
            configuration = rng.integers(0, spec.num_configurations, size=spec.num_devices)
            structure_index = structure_index[configuration]
            choices = {role: choices[role][configuration] for role in LAYER_ROLES}
        quality = {
            role: np.array([LAYER_CATALOGS[role][names[role][i]] for i in choices[role]]) for role in LAYER_ROLES
        }
        z_nn, z_z = z_desc[structure_index, 0], z_desc[structure_index, 1]

        structure_term = spec.structure_weight * (z_nn - 0.75 * z_z)
        layer_term = spec.layer_weight * sum(quality[role] for role in LAYER_ROLES)
        interaction_term = spec.interaction_strength * (z_nn * quality["htl"] - z_z * quality["etl"])
        truth = np.clip(spec.base_pce + structure_term + layer_term + interaction_term, PCE_MIN, PCE_MAX)
        noise_logit = 1.5 * z_z - quality["substrate"] - 0.5 * quality["htl"] - spec.noise_offset
        sigma = spec.noise_scale * (SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * _sigmoid(noise_logit))
        pce = observe(truth, sigma, rng)

        records = []
        for i in range(spec.num_devices):
            ref = refs[structure_index[i]]
            layers = [LayerText(role, names[role][choices[role][i]]) for role in LAYER_ROLES]
            records.append(DeviceRecord(f"dev-{i:05d}", store[ref].formula, ref, layers, float(pce[i])))
        truth_table = pd.DataFrame(
            dict(
                device_id=[r.device_id for r in records],
                structure_term=structure_term,
                layer_term=layer_term,
                interaction_term=interaction_term,
                pce_true=truth,
                sigma=sigma,
                pce=pce,
            )
        )
        logger.debug(f"Successfully created {len(records)} devices over {len(store)} structures.")
        return records, store, truth_table

    @staticmethod
    def _structure_pool(spec: SyntheticSpec, rng: np.random.Generator) -> Dict[str, CrystalStructure]:
        store: Dict[str, CrystalStructure] = {}
        for i in range(spec.num_structures):
            motif = MOTIFS[rng.integers(len(MOTIFS))]
            a_site = A_SITES[rng.integers(len(A_SITES))]
            b_site = B_SITES[rng.integers(len(B_SITES))]
            x_site = X_SITES[rng.integers(len(X_SITES))]
            a = 2.0 * (_B_RADII[b_site] + _X_RADII[x_site]) * rng.uniform(0.98, 1.02)
            if motif == "cubic":
                s = cubic_perovskite(a_site, b_site, x_site, a)
            elif motif == "supercell":
                other = B_SITES[(B_SITES.index(b_site) + 1 + rng.integers(2)) % len(B_SITES)]
                s = mixed_supercell(a_site, (b_site, other), x_site, a)
            else:
                s = rocksalt(a_site, x_site, 1.1 * a)
            if spec.perturbation > 0 and rng.random() < 0.5:
                shift = rng.uniform(-spec.perturbation, spec.perturbation, size=s.frac_coords.shape)
                s = CrystalStructure(s.lattice, s.frac_coords + shift, s.atomic_numbers)
            store[f"syn-{i:04d}"] = s
        return store


def save_ground_truth(table: pd.DataFrame, path: str) -> None:
    table.to_csv(path, index=False, float_format="%.10g")
