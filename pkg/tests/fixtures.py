"""Small structures, devices and model settings shared by the tests."""
import os
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from pcefusion import tensor as T
from pcefusion.dataset import DeviceRecord
from pcefusion.model import ModelConfig
from pcefusion.structure import CrystalStructure
from pcefusion.synthetic import cubic_perovskite
from pcefusion.tensor import Tensor
from pcefusion.text_encoder import LAYER_ROLES, LayerText

here = os.path.abspath(os.path.dirname(__file__))

SLOW = os.environ.get("PCEFUSION_SLOW") == "1"

GRAPH_PARAMS = dict(cutoff=6.0, max_neighbors=6, d_min=0.0, d_max=6.0, num_centers=6, width=0.5)

LAYER_SETS = [
    ("SLG | FTO", "TiO2-c | TiO2-mp", "Spiro-MeOTAD", "Au"),
    ("SLG | ITO", "SnO2-np", "PTAA", "Ag"),
    ("PET | ITO", "PCBM-60", "PEDOT:PSS", "Carbon"),
    ("SLG | FTO", "ZnO-c", "CuSCN", "Al"),
]


def cspbi3(a: float = 6.3) -> CrystalStructure:
    return cubic_perovskite("Cs", "Pb", "I", a)


def random_structure(rng: np.random.Generator, num_atoms: int, min_separation: float = 1.0) -> CrystalStructure:
    """A random triclinic cell whose sites are at least ``min_separation`` angstroms apart."""
    lattice = np.diag(rng.uniform(5.5, 6.5, size=3)) + rng.uniform(-0.3, 0.3, size=(3, 3))
    frac: List[np.ndarray] = []
    while len(frac) < num_atoms:
        candidate = rng.random(3)
        if all(_periodic_distance(lattice, candidate, f) >= min_separation for f in frac):
            frac.append(candidate)
    numbers = rng.choice([8, 17, 35, 50, 53, 55, 82], size=num_atoms)
    return CrystalStructure(lattice, np.array(frac), numbers)


def _periodic_distance(lattice: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    delta = a - b
    delta -= np.round(delta)
    return float(np.linalg.norm(delta @ lattice))


def make_records(structures: Dict[str, CrystalStructure], refs: Sequence[str], seed: int = 0) -> List[DeviceRecord]:
    """One device per entry of ``refs``, cycling through :data:`LAYER_SETS`."""
    rng = np.random.default_rng(seed)
    records = []
    for i, ref in enumerate(refs):
        texts = LAYER_SETS[i % len(LAYER_SETS)]
        layers = [LayerText(role, text) for role, text in zip(LAYER_ROLES, texts)]
        records.append(DeviceRecord(f"dev-{i:03d}", structures[ref].formula, ref, layers, float(rng.uniform(5, 25))))
    return records


def tiny_model_config(**kwargs) -> ModelConfig:
    settings = dict(
        d_node=8,
        d_edge=GRAPH_PARAMS["num_centers"],
        num_conv_layers=1,
        d_bert=8,
        text_heads=2,
        max_tokens=8,
        d_model=8,
        num_heads=2,
        num_layers=1,
        mlp_dims=[8, 2],
        dropout=0.0,
    )
    settings.update(kwargs)
    return ModelConfig(**settings)


def weighted_sum(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """A scalar loss ``sum(fn(*inputs) * w)`` with fixed random weights ``w``."""
    with T.no_grad():
        shape = fn(*inputs).shape
    w = Tensor(np.random.default_rng(seed).normal(size=shape))
    return lambda: T.sum(fn(*inputs) * w)


def rotation(axis: Tuple[float, float, float], angle: float) -> np.ndarray:
    """The proper rotation matrix about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=np.float64)
    k /= np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
