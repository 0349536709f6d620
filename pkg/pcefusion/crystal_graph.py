"""Periodic crystal graphs and the gated graph-convolution encoder that turns them into per-atom features."""
import itertools
from logging import getLogger
from typing import List, Optional, Sequence

import numpy as np

from pcefusion import tensor as T
from pcefusion.component import Component
from pcefusion.errors import ContractError, DimensionError, GeometryError
from pcefusion.nn import Linear, Module
from pcefusion.structure import MAX_ATOMIC_NUMBER, CrystalStructure
from pcefusion.tensor import Tensor

logger = getLogger(__name__)

DEFAULT_CUTOFF = 8.0
DEFAULT_MAX_NEIGHBORS = 12
DEFAULT_D_MIN = 0.0
DEFAULT_D_MAX = 8.0
DEFAULT_NUM_CENTERS = 40
DEFAULT_WIDTH = 0.5

_COINCIDENT_TOL = 1e-8
# Distances are rounded before tie-breaking; symmetric neighbors tie exactly.
_TIE_DECIMALS = 10


def gaussian_expand(
    d,
    d_min: float = DEFAULT_D_MIN,
    d_max: float = DEFAULT_D_MAX,
    num_centers: int = DEFAULT_NUM_CENTERS,
    width: float = DEFAULT_WIDTH,
) -> np.ndarray:
    """Expand distances on a grid of Gaussians.

    Component ``k`` is ``exp(-(d - mu_k)^2 / width^2)`` with ``mu_k`` evenly spaced on ``[d_min, d_max]``.

    Args:
        d: A distance or an array of distances.

    Returns:
        An array of shape ``np.shape(d) + (num_centers,)``.
    """
    if d_max <= d_min or width <= 0 or num_centers < 1:
        raise ContractError(f"invalid Gaussian grid: [{d_min}, {d_max}], {num_centers} centers, width {width}")
    centers = np.linspace(d_min, d_max, num_centers)
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-((d[..., None] - centers) ** 2) / width**2)


class CrystalGraph(Component):
    """A crystal graph with periodic neighbor edges.

    Edge ``e`` points from center atom ``src[e]`` to neighbor ``dst[e]`` shifted by the lattice translation
    ``images[e]``; node features are looked up from ``atomic_numbers`` by the encoder.

    Attributes:
        num_atoms (int): The number of atoms.
        atomic_numbers (np.ndarray): Atomic numbers of the atoms.
        src (np.ndarray): Center atom index per edge.
        dst (np.ndarray): Neighbor atom index per edge.
        distances (np.ndarray): Edge lengths in angstroms.
        images (np.ndarray): An Ex3 integer array of periodic shifts.
        edge_features (np.ndarray): An E x d_edge Gaussian expansion of ``distances``.
        cutoff (float): The cutoff radius used to build the graph.
    """

    def __init__(
        self,
        atomic_numbers: np.ndarray,
        src: np.ndarray,
        dst: np.ndarray,
        distances: np.ndarray,
        images: np.ndarray,
        edge_features: np.ndarray,
        cutoff: float,
    ):
        self.num_atoms: int = len(atomic_numbers)
        self.atomic_numbers: np.ndarray = atomic_numbers
        self.src: np.ndarray = src
        self.dst: np.ndarray = dst
        self.distances: np.ndarray = distances
        self.images: np.ndarray = images
        self.edge_features: np.ndarray = edge_features
        self.cutoff: float = cutoff

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def neighbor_counts(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.num_atoms)

    def edges(self) -> List[tuple]:
        """Edges as (src, dst, distance, image) tuples."""
        return [
            (int(s), int(d), float(r), tuple(int(x) for x in img))
            for s, d, r, img in zip(self.src, self.dst, self.distances, self.images)
        ]

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(
            num_atoms=self.num_atoms,
            atomic_numbers=self.atomic_numbers.tolist(),
            edges=[dict(src=s, dst=d, distance=r, image=list(img)) for s, d, r, img in self.edges()],
            cutoff=self.cutoff,
        )

    def to_string(self) -> str:
        """Convert this object into a string."""
        return f"<CrystalGraph, #atoms: {self.num_atoms}, #edges: {self.num_edges}, cutoff: {self.cutoff}>"


def build_graph(
    s: CrystalStructure,
    cutoff: float = DEFAULT_CUTOFF,
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS,
    d_min: float = DEFAULT_D_MIN,
    d_max: float = DEFAULT_D_MAX,
    num_centers: int = DEFAULT_NUM_CENTERS,
    width: float = DEFAULT_WIDTH,
) -> CrystalGraph:
    """Build the periodic neighbor graph of a structure. See :class:`CrystalGraphBuilder`."""
    return CrystalGraphBuilder.build(s, cutoff, max_neighbors, d_min, d_max, num_centers, width)


class CrystalGraphBuilder:
    @classmethod
    def build(
        cls,
        s: CrystalStructure,
        cutoff: float = DEFAULT_CUTOFF,
        max_neighbors: int = DEFAULT_MAX_NEIGHBORS,
        d_min: float = DEFAULT_D_MIN,
        d_max: float = DEFAULT_D_MAX,
        num_centers: int = DEFAULT_NUM_CENTERS,
        width: float = DEFAULT_WIDTH,
    ) -> CrystalGraph:
        """Connect every atom to all periodic images within ``cutoff``, keeping the ``max_neighbors`` nearest.

        Ties in distance are broken by neighbor index and then by the image shift, lexicographically.

        Raises:
            GeometryError: If two distinct sites coincide.
        """
        if cutoff <= 0:
            raise ContractError(f"cutoff must be positive, got {cutoff}")
        if max_neighbors < 1:
            raise ContractError(f"max_neighbors must be positive, got {max_neighbors}")

        shifts = cls._image_shifts(s.lattice, cutoff)
        cart = s.cart_coords
        # disp[i, j, k] = r_j + shift_k - r_i
        disp = cart[None, :, None, :] + (shifts @ s.lattice)[None, None, :, :] - cart[:, None, None, :]
        dist = np.sqrt(np.sum(disp * disp, axis=-1))

        zero_shift = int(np.flatnonzero(np.all(shifts == 0, axis=1))[0])
        is_self = np.zeros(dist.shape, dtype=bool)
        is_self[np.arange(s.num_atoms), np.arange(s.num_atoms), zero_shift] = True
        coincident = (dist < _COINCIDENT_TOL) & ~is_self
        if coincident.any():
            i, j, _ = np.argwhere(coincident)[0]
            raise GeometryError(f"sites {i} and {j} of {s.formula} coincide")

        src, dst, k = np.nonzero((dist <= cutoff) & ~is_self)
        distances = dist[src, dst, k]
        images = shifts[k]

        order = np.lexsort(
            (images[:, 2], images[:, 1], images[:, 0], dst, np.round(distances, _TIE_DECIMALS), src)
        )
        src, dst, distances, images = src[order], dst[order], distances[order], images[order]
        rank = np.arange(len(src)) - np.searchsorted(src, src, side="left")
        keep = rank < max_neighbors
        src, dst, distances, images = src[keep], dst[keep], distances[keep], images[keep]

        graph = CrystalGraph(
            atomic_numbers=s.atomic_numbers.copy(),
            src=src.astype(np.int64),
            dst=dst.astype(np.int64),
            distances=distances,
            images=images.astype(np.int64),
            edge_features=gaussian_expand(distances, d_min, d_max, num_centers, width).reshape(-1, num_centers),
            cutoff=cutoff,
        )
        logger.debug(f"Successfully created {graph}.")
        return graph

    @staticmethod
    def _image_shifts(lattice: np.ndarray, cutoff: float) -> np.ndarray:
        """All integer shifts that can hold a neighbor within ``cutoff``.

        The spacing between lattice planes of family ``i`` is ``1 / |column i of inv(lattice)|``; fractional
        differences lie in (-1, 1), hence the extra image.
        """
        spacing = 1.0 / np.linalg.norm(np.linalg.inv(lattice), axis=0)
        reach = [int(np.floor(cutoff / h)) + 1 for h in spacing]
        return np.array(
            list(itertools.product(*(range(-r, r + 1) for r in reach))),
            dtype=np.int64,
        )


class GatedConv(Module):
    """One gated graph-convolution update.

    ``h_i <- h_i + sum_j sigmoid(z_ij W_f + b_f) * softplus(z_ij W_s + b_s)`` with ``z_ij = [h_i; h_j; e_ij]``.
    """

    def __init__(self, rng: np.random.Generator, d_node: int, d_edge: int):
        self.filter = Linear(rng, 2 * d_node + d_edge, d_node)
        self.core = Linear(rng, 2 * d_node + d_edge, d_node)

    def __call__(self, h: Tensor, src: np.ndarray, dst: np.ndarray, edge_features: Tensor) -> Tensor:
        z = T.concat([T.take(h, src), T.take(h, dst), edge_features], axis=-1)
        messages = T.sigmoid(self.filter(z)) * T.softplus(self.core(z))
        return h + T.scatter_add(messages, src, h.shape[0])


class GraphEncoder(Module):
    """Atom embeddings followed by a stack of :class:`GatedConv` layers.

    Attributes:
        atom_embedding (Tensor): A 119 x d_node table indexed by atomic number.
        convs (List[GatedConv]): The convolution layers.
    """

    def __init__(self, rng: np.random.Generator, d_node: int, d_edge: int, num_conv_layers: int):
        self.atom_embedding = Tensor(rng.normal(0.0, 1.0, size=(MAX_ATOMIC_NUMBER + 1, d_node)), requires_grad=True)
        self.convs: List[GatedConv] = [GatedConv(rng, d_node, d_edge) for _ in range(num_conv_layers)]
        self._d_edge = d_edge

    @property
    def d_node(self) -> int:
        return self.atom_embedding.shape[1]

    def __call__(
        self, atomic_numbers: np.ndarray, src: np.ndarray, dst: np.ndarray, edge_features: np.ndarray
    ) -> Tensor:
        edge_features = np.asarray(edge_features, dtype=np.float64).reshape(len(src), -1)
        if edge_features.shape[1] != self._d_edge:
            raise DimensionError(f"encoder expects {self._d_edge} edge features, got {edge_features.shape[1]}")
        h = T.take(self.atom_embedding, atomic_numbers)
        e = Tensor(edge_features)
        for conv in self.convs:
            h = conv(h, src, dst, e)
        return h


def encode_graph(g: CrystalGraph, encoder: GraphEncoder) -> Tensor:
    """Encode one crystal graph into its N x d_node per-atom feature sequence (no pooling)."""
    return encoder(g.atomic_numbers, g.src, g.dst, g.edge_features)


def union_graphs(graphs: Sequence[CrystalGraph]) -> tuple:
    """Merge graphs into one disconnected graph.

    Returns:
        A tuple of (atomic_numbers, src, dst, edge_features, graph_index) where ``graph_index[n]`` is the position of
        the graph that owns merged node ``n``.
    """
    offsets = np.cumsum([0] + [g.num_atoms for g in graphs])
    d_edge: Optional[int] = graphs[0].edge_features.shape[1] if graphs else 0
    return (
        np.concatenate([g.atomic_numbers for g in graphs]),
        np.concatenate([g.src + off for g, off in zip(graphs, offsets)]),
        np.concatenate([g.dst + off for g, off in zip(graphs, offsets)]),
        np.concatenate([g.edge_features.reshape(-1, d_edge) for g in graphs], axis=0),
        np.repeat(np.arange(len(graphs)), [g.num_atoms for g in graphs]),
    )
