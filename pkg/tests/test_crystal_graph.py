import collections
import itertools
import json
import os
import unittest

import ase.io
import numpy as np
from parameterized import parameterized

from pcefusion import tensor as T
from pcefusion.crystal_graph import GraphEncoder, build_graph, encode_graph, gaussian_expand, union_graphs
from pcefusion.errors import ContractError, DimensionError, GeometryError, ParseError
from pcefusion.structure import CrystalStructure, parse_structure
from pcefusion.utils import check_gradients
from pcefusion.visualizer import make_image, unique_bonds
from tests.fixtures import GRAPH_PARAMS, cspbi3, random_structure, rotation, weighted_sum

here = os.path.abspath(os.path.dirname(__file__))


def brute_force_neighbors(s: CrystalStructure, cutoff: float):
    """Per-atom sorted neighbor distances found by scanning a 5x5x5 block of periodic images."""
    cart = s.cart_coords
    found = [[] for _ in range(s.num_atoms)]
    for shift in itertools.product(range(-2, 3), repeat=3):
        offset = np.array(shift) @ s.lattice
        for i in range(s.num_atoms):
            for j in range(s.num_atoms):
                if i == j and shift == (0, 0, 0):
                    continue
                d = np.linalg.norm(cart[j] + offset - cart[i])
                if d <= cutoff:
                    found[i].append(d)
    return [np.sort(ds) for ds in found]


def per_atom_distances(g, num_atoms):
    return [np.sort(g.distances[g.src == i]) for i in range(num_atoms)]


class TestCrystalGraph(unittest.TestCase):
    """Tests building and encoding crystal graphs."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_gaussian_expand(self):
        e = gaussian_expand(2.0, d_min=0.0, d_max=8.0, num_centers=5, width=0.5)
        assert e.shape == (5,)
        assert np.isclose(e[1], 1.0)
        assert np.isclose(e[2], np.exp(-16.0))
        assert gaussian_expand(np.ones((3, 2))).shape == (3, 2, 40)
        with self.assertRaises(ContractError):
            gaussian_expand(1.0, d_min=2.0, d_max=1.0)

    def test_cubic_perovskite_neighbors(self):
        g = build_graph(cspbi3(6.3), cutoff=3.2, max_neighbors=12)
        assert g.neighbor_counts().tolist() == [0, 6, 2, 2, 2]
        assert np.allclose(g.distances, 3.15)
        assert set(g.dst[g.src == 1].tolist()) == {2, 3, 4}

    def test_corner_site_sees_twelve_halides(self):
        g = build_graph(cspbi3(6.3), cutoff=4.5, max_neighbors=12)
        cs = g.distances[g.src == 0]
        assert len(cs) == 12
        assert np.allclose(cs, 6.3 / np.sqrt(2))

    @parameterized.expand([(0, 5.0), (1, 4.0), (2, 6.0)])
    def test_matches_brute_force(self, seed, cutoff):
        s = random_structure(np.random.default_rng(seed), 8)
        g = build_graph(s, cutoff=cutoff, max_neighbors=1000)
        expected = brute_force_neighbors(s, cutoff)
        for got, want in zip(per_atom_distances(g, s.num_atoms), expected):
            assert len(got) == len(want)
            assert np.allclose(got, want, atol=1e-9)

    def test_truncation_keeps_nearest(self):
        s = random_structure(self.rng, 6)
        full = build_graph(s, cutoff=6.0, max_neighbors=1000)
        kept = build_graph(s, cutoff=6.0, max_neighbors=3)
        assert np.all(kept.neighbor_counts() <= 3)
        for i in range(s.num_atoms):
            assert np.allclose(np.sort(kept.distances[kept.src == i]), np.sort(full.distances[full.src == i])[:3])

    def test_edges_sorted_by_distance(self):
        g = build_graph(random_structure(self.rng, 5), cutoff=6.0, max_neighbors=8)
        for i in range(g.num_atoms):
            d = g.distances[g.src == i]
            assert np.all(np.diff(d) >= -1e-9)

    def test_rigid_motion_invariance(self):
        s = random_structure(self.rng, 6)
        R = rotation((1.0, 2.0, -0.5), 0.7)
        moved = CrystalStructure(s.lattice @ R.T, s.frac_coords + [0.13, -0.42, 0.77], s.atomic_numbers)
        a, b = build_graph(s, cutoff=5.0), build_graph(moved, cutoff=5.0)
        for x, y in zip(per_atom_distances(a, s.num_atoms), per_atom_distances(b, s.num_atoms)):
            assert np.allclose(x, y, atol=1e-9)

    def test_permutation_invariance(self):
        s = random_structure(self.rng, 7)
        perm = self.rng.permutation(s.num_atoms)
        shuffled = CrystalStructure(s.lattice, s.frac_coords[perm], s.atomic_numbers[perm])

        def bonds(structure):
            g = build_graph(structure, cutoff=5.0, max_neighbors=1000)
            z = structure.atomic_numbers
            return collections.Counter(
                (int(z[i]), int(z[j]), round(float(d), 8)) for i, j, d in zip(g.src, g.dst, g.distances)
            )

        assert bonds(s) == bonds(shuffled)

    def test_single_atom_sees_own_images(self):
        s = CrystalStructure(np.eye(3) * 4.0, [[0.0, 0.0, 0.0]], [29])
        g = build_graph(s, cutoff=4.1, max_neighbors=12)
        assert g.num_edges == 6
        assert np.all(g.dst == 0)
        assert np.allclose(g.distances, 4.0)

    def test_coincident_sites(self):
        s = CrystalStructure(np.eye(3) * 5.0, [[0.1, 0.1, 0.1], [1.1, 0.1, 0.1]], [11, 17])
        with self.assertRaises(GeometryError):
            build_graph(s)

    def test_invalid_arguments(self):
        with self.assertRaises(ContractError):
            build_graph(cspbi3(), cutoff=0.0)
        with self.assertRaises(ContractError):
            build_graph(cspbi3(), max_neighbors=0)

    def test_to_dict(self):
        g = build_graph(cspbi3(6.3), cutoff=3.2)
        d = g.to_dict()
        assert d["num_atoms"] == 5
        assert len(d["edges"]) == 12
        assert json.loads(json.dumps(d)) == d

    def test_union_graphs(self):
        a = build_graph(cspbi3(), **GRAPH_PARAMS)
        b = build_graph(random_structure(self.rng, 3), **GRAPH_PARAMS)
        numbers, src, dst, edge_features, graph_index = union_graphs([a, b])
        assert len(numbers) == 8
        assert graph_index.tolist() == [0] * 5 + [1] * 3
        assert np.all(src[a.num_edges :] >= 5)
        assert edge_features.shape == (a.num_edges + b.num_edges, GRAPH_PARAMS["num_centers"])

    def test_encoder_shape(self):
        encoder = GraphEncoder(self.rng, 4, GRAPH_PARAMS["num_centers"], 2)
        g = build_graph(cspbi3(), **GRAPH_PARAMS)
        assert encode_graph(g, encoder).shape == (5, 4)
        with self.assertRaises(DimensionError):
            encoder(g.atomic_numbers, g.src, g.dst, np.ones((g.num_edges, 3)))

    def test_encoder_is_equivariant(self):
        encoder = GraphEncoder(self.rng, 4, GRAPH_PARAMS["num_centers"], 2)
        s = random_structure(self.rng, 5)
        perm = np.array([3, 0, 4, 1, 2])
        shuffled = CrystalStructure(s.lattice, s.frac_coords[perm], s.atomic_numbers[perm])
        with T.no_grad():
            h = encode_graph(build_graph(s, **GRAPH_PARAMS), encoder).data
            h_shuffled = encode_graph(build_graph(shuffled, **GRAPH_PARAMS), encoder).data
        assert np.allclose(h[perm], h_shuffled, atol=1e-9)

    def test_encoder_gradients(self):
        encoder = GraphEncoder(self.rng, 4, GRAPH_PARAMS["num_centers"], 2)
        g = build_graph(cspbi3(), **GRAPH_PARAMS)
        loss = weighted_sum(lambda: encode_graph(g, encoder), [])
        assert check_gradients(loss, encoder.parameters(), num_entries=40) < 1e-6
        T.clear_graph()


class TestStructure(unittest.TestCase):
    """Tests reading crystal structures."""

    @parameterized.expand([("CsPbI3.cif",), ("triclinic.cif",)])
    def test_cif_matches_ase(self, file_name):
        path = os.path.join(here, "cif_files", file_name)
        with open(path) as f:
            s = parse_structure(f.read())
        atoms = ase.io.read(path)
        assert np.allclose(s.lattice, atoms.cell.array, atol=1e-8)
        assert s.atomic_numbers.tolist() == atoms.numbers.tolist()
        delta = s.frac_coords - atoms.get_scaled_positions(wrap=True)
        assert np.allclose(delta - np.round(delta), 0.0, atol=1e-8)

    def test_cif_values(self):
        with open(os.path.join(here, "cif_files", "CsPbI3.cif")) as f:
            s = parse_structure(f.read())
        assert s.formula == "Cs1Pb1I3"
        assert s.symbols == ["Cs", "Pb", "I", "I", "I"]
        assert np.allclose(np.diag(s.lattice), 6.2894)

    def test_cif_with_aniso_loop(self):
        with open(os.path.join(here, "cif_files", "CsPbI3.cif")) as f:
            text = f.read()
        aniso = "\n".join(
            ["loop_", "_atom_site_aniso_label", "_atom_site_aniso_U_11", "_atom_site_aniso_U_22"]
            + [f"{label} 0.021(2) 0.021(2)" for label in ("Cs1", "Pb1", "I1", "I2", "I3")]
        )
        s = parse_structure(text.rstrip("\n") + "\n" + aniso + "\n")
        assert s.symbols == ["Cs", "Pb", "I", "I", "I"]
        assert np.allclose(s.frac_coords, parse_structure(text).frac_coords)

    def test_cif_with_cartesian_sites_only(self):
        with open(os.path.join(here, "cif_files", "CsPbI3.cif")) as f:
            text = f.read().replace("_atom_site_fract_", "_atom_site_Cartn_")
        with self.assertRaises(ParseError):
            parse_structure(text)

    def test_unknown_element(self):
        with open(os.path.join(here, "cif_files", "CsPbI3.cif")) as f:
            text = f.read().replace("Pb1 Pb 0.5", "Xx1 Xx 0.5")
        with self.assertRaises(ParseError) as cm:
            parse_structure(text)
        assert cm.exception.line == 18

    def test_missing_cell(self):
        with open(os.path.join(here, "cif_files", "CsPbI3.cif")) as f:
            text = "\n".join(line for line in f.read().splitlines() if not line.startswith("_cell_angle_beta"))
        with self.assertRaises(ParseError):
            parse_structure(text)

    def test_native_record(self):
        s = cspbi3(6.3)
        parsed = parse_structure(json.dumps(s.to_dict()))
        assert np.allclose(parsed.lattice, s.lattice)
        assert np.allclose(parsed.frac_coords, s.frac_coords)
        assert parsed.atomic_numbers.tolist() == [55, 82, 53, 53, 53]
        assert parsed.formula == "CsPbI3"

    @parameterized.expand(
        [
            ('{"lattice": [1, 0, 0, 0, 1, 0, 0, 0, 0], "frac_coords": [[0, 0, 0]], "atomic_numbers": [1]}',),
            ('{"lattice": [1, 0, 0, 0, 1, 0, 0, 0, 1], "frac_coords": [[0, 0, 0]], "atomic_numbers": [119]}',),
            ('{"lattice": [1, 0, 0, 0, 1, 0, 0, 0, 1], "frac_coords": [[0, 0, 0]]}',),
            ('{"lattice": [1, 0, 0, 0, 1, 0, 0, 0, 1], "frac_coords": [[0, 0, 0]], "atomic_numbers": [1, 2]}',),
            ('{"lattice": [1, 0, 0',),
        ]
    )
    def test_bad_native_record(self, source):
        with self.assertRaises(ParseError):
            parse_structure(source)

    def test_wraps_fractional_coordinates(self):
        s = CrystalStructure(np.eye(3), [[1.25, -0.25, 2.0]], [1])
        assert np.allclose(s.frac_coords, [[0.25, 0.75, 0.0]])


class TestVisualizer(unittest.TestCase):
    """Tests drawing crystal graphs."""

    def test_unique_bonds(self):
        s = cspbi3(6.3)
        bonds = unique_bonds(build_graph(s, cutoff=3.2))
        assert len(bonds) == 6
        assert all(i == 1 and j in {2, 3, 4} for i, j, _, _ in bonds)

    def test_self_image_bonds(self):
        s = CrystalStructure(np.eye(3) * 4.0, [[0.0, 0.0, 0.0]], [29])
        assert len(unique_bonds(build_graph(s, cutoff=4.1))) == 3

    def test_extension(self):
        s = cspbi3()
        with self.assertRaises(AssertionError):
            make_image(s, build_graph(s), "graph.png")
