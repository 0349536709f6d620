"""A collection of CLI scripts."""
import argparse
import json
import os
from logging import DEBUG, INFO, basicConfig, getLogger
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from pcefusion.coattention import BLOCKS
from pcefusion.config import (
    CALIBRATION_FILE,
    CHECKPOINT_FILE,
    COMPARISON_FILE,
    DEVICES_FILE,
    GROUND_TRUTH_FILE,
    METRICS_FILE,
    PREDICTIONS_FILE,
    SPLIT_FILE,
    STRUCTURES_FILE,
    RunConfig,
    build_config,
    load_config,
)
from pcefusion.crystal_graph import build_graph
from pcefusion.dataset import (
    DatasetSplit,
    DeviceBatchBuilder,
    DeviceRecord,
    load_dataset,
    load_devices,
    load_structures,
    make_split,
    resolve_records,
    save_devices,
    save_structures,
)
from pcefusion.errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from pcefusion.metrics import (
    MetricsReport,
    calibration_frame,
    calibration_table,
    pce_tercile_mae,
    picp,
    significance,
    stars,
    summarize_runs,
)
from pcefusion.synthetic import generate_synthetic, save_ground_truth
from pcefusion.trainer import Trainer, evaluate, load_model
from pcefusion.visualizer import make_image

logger = getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def cmd_generate(config: RunConfig, out: Optional[str] = None) -> None:
    """Write devices.jsonl, structures.jsonl and ground_truth.csv for the synthetic section of ``config``."""
    data_dir = out or config.data.data_dir
    os.makedirs(data_dir, exist_ok=True)
    records, store, truth = generate_synthetic(config.synthetic)
    save_devices(records, os.path.join(data_dir, DEVICES_FILE))
    save_structures(store, os.path.join(data_dir, STRUCTURES_FILE))
    save_ground_truth(truth, os.path.join(data_dir, GROUND_TRUTH_FILE))
    logger.info(f"Wrote {len(records)} devices and {len(store)} structures to {data_dir}.")


def _load_split(config: RunConfig, records: Sequence[DeviceRecord]) -> DatasetSplit:
    path = config.run.path(SPLIT_FILE)
    if os.path.exists(path):
        return DatasetSplit.load(path)
    return make_split(records, config.data.split_policy, config.data.split_seed)


def cmd_train(config: RunConfig) -> Trainer:
    """Train on the train part, validate on the val part, and keep the best checkpoint in the run directory."""
    records, store = load_dataset(config.data.path(DEVICES_FILE), config.data.path(STRUCTURES_FILE))
    split = make_split(records, config.data.split_policy, config.data.split_seed)
    logger.info(f"Split: {split}.")
    trainer = Trainer(config, records, store, split, config.run.seed)
    log = trainer.fit(config.run.out_dir)
    logger.info(f"Finished training: {log}.")
    return trainer


def _load_model_for(config: RunConfig, checkpoint: Optional[str]):
    try:
        return load_model(checkpoint or config.run.path(CHECKPOINT_FILE), config.model)
    except DimensionError as e:
        raise ConfigError(f"checkpoint does not match model configuration: {e}")


def cmd_eval(
    config: RunConfig, checkpoint: Optional[str] = None, part: str = "test", out: Optional[str] = None
) -> MetricsReport:
    """Evaluate a checkpoint on one split part; writes metrics.json and predictions.csv."""
    records, store = load_dataset(config.data.path(DEVICES_FILE), config.data.path(STRUCTURES_FILE))
    model, vocab = _load_model_for(config, checkpoint)
    known = {r.device_id for r in records}
    ids = [i for i in _load_split(config, records).part(part) if i in known]
    if not ids:
        raise DataError(f"the {part} part is empty")
    builder = DeviceBatchBuilder(records, store, vocab, model.config.max_tokens, config.data.graph_params)
    result = evaluate(model, builder, ids, config.data.batch_size)
    if result.y is None:
        raise DataError(f"some devices of the {part} part have no pce value")
    report = MetricsReport.compute(result.y, result.mu, result.sigma)
    logger.info(f"{part}: {report}")
    terciles = pce_tercile_mae(result.y, result.mu) if len(ids) >= 3 else []
    for name, n, value in terciles:
        logger.info(f"{part} MAE for {name}-PCE devices (n={n}): {value:.4f}")

    out_dir = out or config.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, METRICS_FILE), "w") as f:
        summary = dict(part=part, **report.to_dict(), mae_by_tercile={name: v for name, _, v in terciles})
        json.dump(summary, f, indent=2)
    pd.DataFrame(dict(device_id=result.device_ids, y_true=result.y, mu=result.mu, sigma=result.sigma)).to_csv(
        os.path.join(out_dir, PREDICTIONS_FILE), index=False, float_format="%.10g"
    )
    return report


def attention_frame(builder: DeviceBatchBuilder, maps: List) -> pd.DataFrame:
    """Flatten recorded fusion attention maps into rows of device_id, layer, block, head, query, key, weight.

    Rows whose query or key is a padded atom position are omitted.
    """
    rows: Dict[str, list] = {k: [] for k in ("device_id", "layer", "block", "head", "query", "key", "weight")}
    for device_ids, records in maps:
        num_atoms = [builder.graph(builder.records[i].structure_ref).num_atoms for i in device_ids]
        for record in records or []:
            if record["block"] not in BLOCKS:
                continue
            weights = record["weights"]
            for b, device_id in enumerate(device_ids):
                n_q = num_atoms[b] if record["block"].startswith("graph") else weights.shape[2]
                n_k = num_atoms[b] if record["block"] in ("graph_self", "text_cross") else weights.shape[3]
                head, query, key = np.meshgrid(
                    np.arange(weights.shape[1]), np.arange(n_q), np.arange(n_k), indexing="ij"
                )
                rows["device_id"].extend([device_id] * head.size)
                rows["layer"].extend([record["layer"]] * head.size)
                rows["block"].extend([record["block"]] * head.size)
                rows["head"].extend(head.reshape(-1).tolist())
                rows["query"].extend(query.reshape(-1).tolist())
                rows["key"].extend(key.reshape(-1).tolist())
                rows["weight"].extend(weights[b, :, :n_q, :n_k].reshape(-1).tolist())
    return pd.DataFrame(rows)


def cmd_predict(
    config: RunConfig,
    devices_path: str,
    checkpoint: Optional[str] = None,
    out: Optional[str] = None,
    dump_attention: Optional[str] = None,
) -> pd.DataFrame:
    """Predict (mu, sigma) for every device of ``devices_path`` whose structure resolves."""
    store = load_structures(config.data.path(STRUCTURES_FILE))
    records, unresolved = resolve_records(load_devices(devices_path), store)
    for record in unresolved:
        logger.error(f"Cannot predict {record.device_id}: unknown structure {record.structure_ref!r}.")
    if not records:
        raise DataError(f"no device of {devices_path} resolves to a structure")
    model, vocab = _load_model_for(config, checkpoint)
    builder = DeviceBatchBuilder(records, store, vocab, model.config.max_tokens, config.data.graph_params)
    maps: Optional[list] = [] if dump_attention else None
    result = evaluate(model, builder, [r.device_id for r in records], config.data.batch_size, maps)
    frame = pd.DataFrame(dict(device_id=result.device_ids, mu=result.mu, sigma=result.sigma))
    frame.to_csv(out or config.run.path(PREDICTIONS_FILE), index=False, float_format="%.10g")
    if dump_attention:
        attention_frame(builder, maps).to_csv(dump_attention, index=False, float_format="%.10g")
        logger.info(f"Wrote attention maps to {dump_attention}.")
    return frame


def cmd_calibrate(predictions_path: str, num_bins: int = 10, out: Optional[str] = None) -> pd.DataFrame:
    """Write the quantile-bin calibration table of a predictions CSV and report the overall PICP."""
    try:
        frame = pd.read_csv(predictions_path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read {predictions_path}: {e}")
    for column in ("y_true", "mu", "sigma"):
        if column not in frame.columns:
            raise DataError(f"{predictions_path} has no {column!r} column")
    try:
        bins = calibration_table(frame["y_true"], frame["mu"], frame["sigma"], num_bins)
    except ContractError as e:
        raise ConfigError(f"--bins {num_bins}: {e}")
    table = calibration_frame(bins)
    out = out or os.path.join(os.path.dirname(predictions_path), CALIBRATION_FILE)
    table.to_csv(out, index=False, float_format="%.10g")
    coverage = picp(frame["y_true"], frame["mu"], frame["sigma"])
    inside = sum(b.theory_in_ci for b in bins)
    logger.info(f"Theory line inside the 95% CI for {inside} of {len(bins)} bins.")
    print(f"picp_95 = {coverage:.4f}")
    return table


def _variant(config: RunConfig, name: str, seed: int) -> RunConfig:
    settings = config.dict()
    settings["run"]["seed"] = seed
    if name == "mse":
        settings["model"].update(architecture="coattention", head="mse")
        settings["model"]["mlp_dims"] = settings["model"]["mlp_dims"][:-1] + [1]
    else:
        settings["model"]["architecture"] = name
    return build_config(settings)


def cmd_compare(config: RunConfig, out: Optional[str] = None) -> dict:
    """Train every architecture of ``run.compare`` over ``run.seeds`` and compare test metrics."""
    records, store = load_dataset(config.data.path(DEVICES_FILE), config.data.path(STRUCTURES_FILE))
    split = make_split(records, config.data.split_policy, config.data.split_seed)
    runs: Dict[str, Dict[str, List[float]]] = {}
    for name in config.run.compare:
        runs[name] = {"mae": [], "r2": [], "spearman_rho": [], "picp_95": []}
        for seed in config.run.seeds:
            variant = _variant(config, name, seed)
            trainer = Trainer(variant, records, store, split, seed)
            trainer.fit()
            result = evaluate(trainer.model, trainer.builder, split.test, variant.data.batch_size)
            report = MetricsReport.compute(result.y, result.mu, result.sigma)
            logger.info(f"{name}, seed {seed}: {report}")
            for metric in runs[name]:
                runs[name][metric].append(getattr(report, metric))

    reference = "coattention" if "coattention" in runs else next(iter(runs))
    summary = {}
    for name, metrics in runs.items():
        summary[name] = {}
        for metric, values in metrics.items():
            mean, std = summarize_runs(values)
            entry = dict(mean=mean, std=std, values=values)
            if name != reference and len(values) > 1:
                t, p = significance(runs[reference][metric], values)
                entry.update(t=t, p=p, stars=stars(p))
            summary[name][metric] = entry
            logger.info(f"{name:>12s} {metric:>12s}: {mean:.4f} ± {std:.4f} {entry.get('stars', '')}")
    report = dict(reference=reference, seeds=list(config.run.seeds), split=split.policy, results=summary)
    path = out or config.run.path(COMPARISON_FILE)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
    return report


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="pcefusion")
    parser.add_argument("--verbose", "-v", action="store_true", help="log debug messages")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=None, help="path to a config file")
    common.add_argument("--seed", type=int, default=None, help="override run.seed (synthetic.seed for generate)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("generate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", "-o", default=None, help="output directory (default: data.data_dir)")
    p = subparsers.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--out", "-o", default=None, help="run directory (default: run.out_dir)")
    p = subparsers.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split part")
    p.add_argument("--checkpoint", default=None, help="path to a checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split part")
    p.add_argument("--out", "-o", default=None, help="output directory (default: run.out_dir)")
    p = subparsers.add_parser("predict", parents=[common], help="predict PCE distributions")
    p.add_argument("DEVICES", help="path to a devices file")
    p.add_argument("--checkpoint", default=None, help="path to a checkpoint")
    p.add_argument("--out", "-o", default=None, help="path to the predictions CSV")
    p.add_argument("--dump-attention", default=None, help="path to a CSV of fusion attention weights")
    p = subparsers.add_parser("calibrate", help="quantile-bin calibration of a predictions CSV")
    p.add_argument("PREDICTIONS", help="path to a predictions CSV with y_true, mu and sigma")
    p.add_argument("--bins", type=int, default=10, help="number of quantile bins")
    p.add_argument("--out", "-o", default=None, help="path to the calibration CSV")
    p = subparsers.add_parser("compare", parents=[common], help="compare architectures over seeds")
    p.add_argument("--out", "-o", default=None, help="path to the comparison JSON")
    args = parser.parse_args(argv)

    basicConfig(format=LOG_FORMAT, level=DEBUG if args.verbose else INFO)

    try:
        if args.command == "calibrate":
            cmd_calibrate(args.PREDICTIONS, args.bins, args.out)
            return 0
        overrides = {"synthetic.seed" if args.command == "generate" else "run.seed": args.seed}
        if args.command == "train":
            overrides["run.out_dir"] = args.out
        config = load_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(config, args.out)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "eval":
            cmd_eval(config, args.checkpoint, args.split, args.out)
        elif args.command == "predict":
            cmd_predict(config, args.DEVICES, args.checkpoint, args.out, args.dump_attention)
        elif args.command == "compare":
            cmd_compare(config, args.out)
    except (ConfigError, DataError, NumericError) as e:
        logger.error(str(e))
        return e.exit_code
    return 0


def viz():
    parser = argparse.ArgumentParser()
    parser.add_argument("STRUCTURES", help="path to a structures file")
    parser.add_argument("OUT", help="path to output")
    parser.add_argument("--ref", required=True, help="structure_ref of the structure to draw")
    parser.add_argument("--cutoff", type=float, default=8.0, help="neighbor cutoff radius in angstroms")
    parser.add_argument("--max-neighbors", type=int, default=12, help="maximum number of neighbors per atom")
    parser.add_argument("--exclude-distance", action="store_true", help="exclude bond lengths")
    args = parser.parse_args()

    basicConfig(format=LOG_FORMAT)

    store = load_structures(args.STRUCTURES)
    if args.ref not in store:
        parser.error(f"{args.ref!r} is not in {args.STRUCTURES}")
    structure = store[args.ref]
    graph = build_graph(structure, cutoff=args.cutoff, max_neighbors=args.max_neighbors)
    make_image(structure, graph, args.OUT, with_distance=not args.exclude_distance)
