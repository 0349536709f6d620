import os
from logging import getLogger
from typing import List, Tuple

import graphviz

from pcefusion.crystal_graph import CrystalGraph
from pcefusion.structure import CrystalStructure

logger = getLogger(__name__)


def make_image(structure: CrystalStructure, graph: CrystalGraph, output: str, with_distance: bool = True):
    """Visualize a crystal graph.

    Args:
        structure (CrystalStructure): The structure the graph was built from.
        graph (CrystalGraph): A crystal graph.
        output (str): Path to an output file. The file extension must be '.svg'.
        with_distance (bool): If true, bonds are labeled with their lengths.
    """
    output, ext = os.path.splitext(output)
    assert ext == ".svg", 'the extension of the output file must be ".svg"'

    g = graphviz.Graph("G", format="svg")
    g.attr("graph", label=structure.formula, labelloc="t", margin="0", pad="0.2")
    for index, symbol in enumerate(structure.symbols):
        node = Node(index, symbol)
        g.node(name=node.name, label=node.to_string(), shape="circle")
    for bond in unique_bonds(graph):
        edge = Edge(*bond)
        g.edge(edge.head_node_name, edge.tail_node_name, label=edge.to_string(with_distance))

    output_dir = os.path.abspath(os.path.dirname(output))
    if not os.path.exists(output_dir):
        os.makedirs(output_dir)

    logger.debug("Render an image")
    g.render(output, cleanup=True)

    logger.debug("Successfully constructed visualization")


def unique_bonds(graph: CrystalGraph) -> List[Tuple[int, int, float, Tuple[int, int, int]]]:
    """Collapse directed edges into undirected bonds.

    The edge i -> j + image and the edge j -> i - image describe the same bond; each bond is reported once as
    (i, j, distance, image) with i <= j.
    """
    bonds = {}
    for src, dst, distance, image in graph.edges():
        if src > dst or (src == dst and image < tuple(-x for x in image)):
            src, dst, image = dst, src, tuple(-x for x in image)
        bonds.setdefault((src, dst, image), distance)
    return [(i, j, d, image) for (i, j, image), d in sorted(bonds.items())]


class Node:
    def __init__(self, index: int, symbol: str):
        self.index = index
        self.symbol = symbol

    @property
    def name(self) -> str:
        """The name of this node."""
        return f"atom_{self.index}"

    def to_string(self) -> str:
        """Return the string."""
        return f"{self.symbol}{self.index}"


class Edge:
    def __init__(self, head: int, tail: int, distance: float, image: Tuple[int, int, int]):
        self.head = head
        self.tail = tail
        self.distance = distance
        self.image = image

    @property
    def head_node_name(self) -> str:
        return Node(self.head, "").name

    @property
    def tail_node_name(self) -> str:
        return Node(self.tail, "").name

    def to_string(self, with_distance: bool) -> str:
        """Return the string."""
        label = f"{self.distance:.2f}" if with_distance else ""
        if any(self.image):
            label += " (" + ",".join(str(x) for x in self.image) + ")"
        return label
