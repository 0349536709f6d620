"""Device records, structure stores, dataset splits, and batch assembly.

Device records are stored one JSON object per line::

    {"device_id": "dev-00001", "perovskite_formula": "CsPbI3", "structure_ref": "syn-0007",
     "layers": {"substrate": "SLG | FTO", "etl": "TiO2-c", "htl": "Spiro-MeOTAD", "back_contact": "Au"},
     "pce": 17.2}

and structures one native structure record per line with an extra ``structure_ref`` key (a ``cif`` key holding
CIF-subset text may replace the native fields).
"""
import json
import math
from logging import getLogger
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from pcefusion.component import Component
from pcefusion.crystal_graph import CrystalGraph, build_graph, union_graphs
from pcefusion.errors import ContractError, DataError, PCEFusionError
from pcefusion.structure import CrystalStructure, JsonStructureBuilder, parse_structure
from pcefusion.text_encoder import DEFAULT_MAX_TOKENS, LayerText, Vocabulary, canonical_layers

logger = getLogger(__name__)

SPLIT_POLICIES = ("random_80_10_10", "group_by_materials")
PARTS = ("train", "val", "test")
_FRACTIONS = dict(train=0.8, val=0.1, test=0.1)


class DeviceRecord(Component):
    """One solar-cell device.

    Attributes:
        device_id (str): A unique identifier.
        perovskite_formula (str): The absorber formula.
        structure_ref (str): The key of the absorber structure in the structure store.
        layer_texts (List[LayerText]): The four context layers in canonical role order.
        pce (float, optional): The measured power conversion efficiency in percent; None when unknown.
    """

    def __init__(
        self,
        device_id: str,
        perovskite_formula: str,
        structure_ref: str,
        layer_texts: Sequence[LayerText],
        pce: Optional[float] = None,
    ):
        if pce is not None and not 0.0 <= pce <= 100.0:
            raise ContractError(f"{device_id}: pce {pce} is outside [0, 100]")
        self.device_id: str = device_id
        self.perovskite_formula: str = perovskite_formula
        self.structure_ref: str = structure_ref
        self.layer_texts: List[LayerText] = canonical_layers(layer_texts)
        self.pce: Optional[float] = pce

    @property
    def layer_strings(self) -> List[str]:
        return [layer.text for layer in self.layer_texts]

    @property
    def material_key(self) -> Tuple[str, ...]:
        """The material configuration: the absorber formula and the four layer strings."""
        return (self.perovskite_formula, *self.layer_strings)

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        record = dict(
            device_id=self.device_id,
            perovskite_formula=self.perovskite_formula,
            structure_ref=self.structure_ref,
            layers={layer.role: layer.text for layer in self.layer_texts},
        )
        if self.pce is not None:
            record["pce"] = self.pce
        return record

    def to_string(self) -> str:
        """Convert this object into a string."""
        return f"<DeviceRecord, device_id: {self.device_id}, formula: {self.perovskite_formula}, pce: {self.pce}>"

    @classmethod
    def from_dict(cls, record: dict) -> "DeviceRecord":
        for key in ("device_id", "perovskite_formula", "structure_ref", "layers"):
            if key not in record:
                raise ContractError(f"device record is missing {key!r}")
        layers = record["layers"]
        if not isinstance(layers, dict):
            raise ContractError("'layers' must map roles to strings")
        pce = record.get("pce")
        return cls(
            device_id=str(record["device_id"]),
            perovskite_formula=str(record["perovskite_formula"]),
            structure_ref=str(record["structure_ref"]),
            layer_texts=[LayerText(role, str(text)) for role, text in layers.items()],
            pce=None if pce is None else float(pce),
        )


def _read_jsonl(path: str) -> Iterator[Tuple[int, dict]]:
    try:
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    yield line_no, json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}: record {line_no} is not valid JSON ({e.msg})")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}")


def load_devices(path: str) -> List[DeviceRecord]:
    """Read device records.

    Raises:
        DataError: On a malformed record (with its line number) or a duplicate device id.
    """
    records: List[DeviceRecord] = []
    seen = set()
    for line_no, obj in _read_jsonl(path):
        try:
            record = DeviceRecord.from_dict(obj)
        except (PCEFusionError, AttributeError, TypeError, ValueError) as e:
            raise DataError(f"{path}: record {line_no}: {e}")
        if record.device_id in seen:
            raise DataError(f"{path}: record {line_no}: duplicate device_id {record.device_id!r}")
        seen.add(record.device_id)
        records.append(record)
    return records


def load_structures(path: str) -> Dict[str, CrystalStructure]:
    """Read a structure store keyed by ``structure_ref``."""
    store: Dict[str, CrystalStructure] = {}
    for line_no, obj in _read_jsonl(path):
        ref = obj.get("structure_ref") if isinstance(obj, dict) else None
        if not ref:
            raise DataError(f"{path}: record {line_no} has no structure_ref")
        if ref in store:
            raise DataError(f"{path}: record {line_no}: duplicate structure_ref {ref!r}")
        try:
            store[ref] = parse_structure(obj["cif"]) if "cif" in obj else JsonStructureBuilder.build(obj)
        except (PCEFusionError, TypeError, ValueError) as e:
            raise DataError(f"{path}: record {line_no} ({ref}): {e}")
    return store


def resolve_records(
    records: Sequence[DeviceRecord], store: Dict[str, CrystalStructure]
) -> Tuple[List[DeviceRecord], List[DeviceRecord]]:
    """Split records into those whose structure reference resolves and those whose does not."""
    resolved = [r for r in records if r.structure_ref in store]
    unresolved = [r for r in records if r.structure_ref not in store]
    for record in unresolved:
        logger.warning(f"Drop {record.device_id}: structure {record.structure_ref!r} is not in the store.")
    return resolved, unresolved


def load_dataset(devices_path: str, structures_path: str) -> Tuple[List[DeviceRecord], Dict[str, CrystalStructure]]:
    """Load device records and the structure store, dropping records whose structure does not resolve.

    Raises:
        DataError: On malformed input, duplicate ids, or when no record survives.
    """
    store = load_structures(structures_path)
    records, dropped = resolve_records(load_devices(devices_path), store)
    logger.info(f"Loaded {len(records)} devices and {len(store)} structures ({len(dropped)} devices dropped).")
    if not records:
        raise DataError(f"no device in {devices_path} resolves to a structure in {structures_path}")
    return records, store


def save_devices(records: Sequence[DeviceRecord], path: str) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(record.to_json() + "\n")


def save_structures(store: Dict[str, CrystalStructure], path: str) -> None:
    with open(path, "w") as f:
        for ref, structure in store.items():
            f.write(json.dumps(dict(structure_ref=ref, **structure.to_dict())) + "\n")


class DatasetSplit(Component):
    """A train/val/test partition of device ids.

    Attributes:
        train (List[str]): Training device ids.
        val (List[str]): Validation device ids.
        test (List[str]): Test device ids.
        policy (str): "random_80_10_10" or "group_by_materials".
        seed (int): The shuffling seed.
    """

    def __init__(self, train: List[str], val: List[str], test: List[str], policy: str, seed: int):
        assert policy in SPLIT_POLICIES
        self.train: List[str] = train
        self.val: List[str] = val
        self.test: List[str] = test
        self.policy: str = policy
        self.seed: int = seed

    def part(self, name: str) -> List[str]:
        if name not in PARTS:
            raise ContractError(f"unknown split part {name!r}; expected one of {PARTS}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(policy=self.policy, seed=self.seed, train=self.train, val=self.val, test=self.test)

    def to_string(self) -> str:
        """Convert this object into a string."""
        return (
            f"<DatasetSplit, policy: {self.policy}, seed: {self.seed}, "
            f"#train: {len(self.train)}, #val: {len(self.val)}, #test: {len(self.test)}>"
        )

    @classmethod
    def load(cls, path: str) -> "DatasetSplit":
        try:
            with open(path) as f:
                obj = json.load(f)
            return cls(obj["train"], obj["val"], obj["test"], obj["policy"], int(obj["seed"]))
        except (OSError, KeyError, ValueError, AssertionError) as e:
            raise DataError(f"cannot read split {path}: {e!r}")


def make_split(records: Sequence[DeviceRecord], policy: str, seed: int) -> DatasetSplit:
    """Partition records into train/val/test.

    The random policy shuffles device ids and cuts 10% (floor) for validation and for testing, leaving the rest for
    training. The group policy keys devices by :attr:`DeviceRecord.material_key`, shuffles the distinct keys, and
    hands whole groups to whichever part is furthest below its 80/10/10 device-count target, reserving groups so
    that no part ends empty.
    """
    if policy not in SPLIT_POLICIES:
        raise ContractError(f"unknown split policy {policy!r}; expected one of {SPLIT_POLICIES}")
    if len(records) < 10:
        raise ContractError(f"a split needs at least 10 records, got {len(records)}")
    rng = np.random.default_rng(seed)
    ids = [r.device_id for r in records]

    if policy == "random_80_10_10":
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_val = n_test = len(ids) // 10
        n_train = len(ids) - n_val - n_test
        return DatasetSplit(order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :], policy, seed)

    groups: Dict[Tuple[str, ...], List[str]] = {}
    for record in records:
        groups.setdefault(record.material_key, []).append(record.device_id)
    if len(groups) < 3:
        raise ContractError(f"a group split needs at least 3 material configurations, got {len(groups)}")
    keys = sorted(groups)
    keys = [keys[i] for i in rng.permutation(len(keys))]

    targets = {part: _FRACTIONS[part] * len(ids) for part in PARTS}
    parts: Dict[str, List[str]] = {part: [] for part in PARTS}
    for i, key in enumerate(keys):
        empty = [part for part in PARTS if not parts[part]]
        candidates = empty if len(keys) - i <= len(empty) else list(PARTS)
        chosen = max(candidates, key=lambda p: (targets[p] - len(parts[p]), -PARTS.index(p)))
        parts[chosen].extend(groups[key])
    split = DatasetSplit(parts["train"], parts["val"], parts["test"], policy, seed)
    logger.debug(f"Successfully created {split} from {len(keys)} material configurations.")
    return split


class DeviceBatch:
    """Model inputs for a list of devices.

    Attributes:
        device_ids (List[str]): The devices, in batch order.
        atomic_numbers (np.ndarray, optional): Atomic numbers of the merged crystal graph.
        src (np.ndarray): Edge centers of the merged graph.
        dst (np.ndarray): Edge neighbors of the merged graph.
        edge_features (np.ndarray): Edge features of the merged graph.
        node_positions (np.ndarray): For every merged node, its flat index into a B x N_max layout.
        node_mask (np.ndarray): A B x N_max 0/1 array marking real atoms.
        token_ids (np.ndarray): B x 4 x max_tokens token ids in canonical role order.
        targets (np.ndarray, optional): Measured PCE values, when every device has one.
    """

    def __init__(
        self,
        device_ids: List[str],
        atomic_numbers: Optional[np.ndarray],
        src: np.ndarray,
        dst: np.ndarray,
        edge_features: np.ndarray,
        node_positions: np.ndarray,
        node_mask: np.ndarray,
        token_ids: np.ndarray,
        targets: Optional[np.ndarray],
    ):
        self.device_ids = device_ids
        self.atomic_numbers = atomic_numbers
        self.src = src
        self.dst = dst
        self.edge_features = edge_features
        self.node_positions = node_positions
        self.node_mask = node_mask
        self.token_ids = token_ids
        self.targets = targets

    def __len__(self) -> int:
        return len(self.device_ids)

    def __repr__(self) -> str:
        return f"<DeviceBatch, #devices: {len(self)}, max #atoms: {self.node_mask.shape[1]}>"


class DeviceBatchBuilder:
    """Assembles :class:`DeviceBatch` objects, caching one crystal graph per structure reference.

    Args:
        records: The device records, looked up by id.
        store: The structure store.
        vocab: The vocabulary used to tokenize layer strings.
        max_tokens: The number of token positions per layer string.
        graph_params: Keyword arguments of :func:`build_graph`.
    """

    def __init__(
        self,
        records: Sequence[DeviceRecord],
        store: Dict[str, CrystalStructure],
        vocab: Vocabulary,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        graph_params: Optional[dict] = None,
    ):
        self.records: Dict[str, DeviceRecord] = {r.device_id: r for r in records}
        self.store = store
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.graph_params = graph_params or {}
        self._graphs: Dict[str, CrystalGraph] = {}

    def graph(self, structure_ref: str) -> CrystalGraph:
        if structure_ref not in self._graphs:
            if structure_ref not in self.store:
                raise DataError(f"structure {structure_ref!r} is not in the store")
            self._graphs[structure_ref] = build_graph(self.store[structure_ref], **self.graph_params)
        return self._graphs[structure_ref]

    def build(self, ids: Sequence[str]) -> DeviceBatch:
        if not ids:
            raise ContractError("cannot build an empty batch")
        missing = [i for i in ids if i not in self.records]
        if missing:
            raise DataError(f"unknown device ids {missing[:5]}")
        records = [self.records[i] for i in ids]
        graphs = [self.graph(r.structure_ref) for r in records]
        atomic_numbers, src, dst, edge_features, _ = union_graphs(graphs)

        counts = np.array([g.num_atoms for g in graphs])
        n_max = int(counts.max())
        node_mask = (np.arange(n_max)[None, :] < counts[:, None]).astype(np.float64)
        node_positions = np.concatenate([b * n_max + np.arange(n) for b, n in enumerate(counts)])

        token_ids = np.array(
            [[self.vocab.tokenize(text, self.max_tokens) for text in r.layer_strings] for r in records],
            dtype=np.int64,
        )
        pces = [r.pce for r in records]
        targets = None if any(p is None for p in pces) else np.array(pces, dtype=np.float64)
        return DeviceBatch(
            [r.device_id for r in records],
            atomic_numbers,
            src,
            dst,
            edge_features,
            node_positions,
            node_mask,
            token_ids,
            targets,
        )

    def batches(self, ids: Sequence[str], batch_size: int) -> Iterator[DeviceBatch]:
        """Yield batches of consecutive ids, in order."""
        if batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {batch_size}")
        for start in range(0, len(ids), batch_size):
            yield self.build(ids[start : start + batch_size])

    def num_batches(self, ids: Sequence[str], batch_size: int) -> int:
        return math.ceil(len(ids) / batch_size)


def build_batch(
    ids: Sequence[str],
    records: Sequence[DeviceRecord],
    store: Dict[str, CrystalStructure],
    vocab: Vocabulary,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    graph_params: Optional[dict] = None,
) -> DeviceBatch:
    """Assemble one batch for ``ids``. See :class:`DeviceBatchBuilder`."""
    return DeviceBatchBuilder(records, store, vocab, max_tokens, graph_params).build(ids)


def corpus_of(records: Sequence[DeviceRecord]) -> List[str]:
    """All layer strings of ``records``, in role order."""
    return [text for r in records for text in r.layer_strings]

