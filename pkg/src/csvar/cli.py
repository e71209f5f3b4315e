"""Command-line entry point: ``csvar <command> ...``.

Exit codes: 0 success, 1 internal error, 2 usage or input error. Every
command reads and validates its inputs before writing any output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from csvar.attacks import obfuscation_report, report_json
from csvar.datasets import encode_pnm, generate_epoch_variants, heatmap_pixels, read_image
from csvar.errors import InputError
from csvar.experiments import (
    ExperimentConfig,
    attack,
    fingerprint,
    load_experiment_data,
    load_variants,
    mia_cohorts,
    simulate,
)
from csvar.fl import ModelParams, TrainConfig, accuracy, init_model, normalize
from csvar.shuffler import MODES, ShuffleConfig, csvar_shuffle, derive_region_seed, gaussian_obfuscate
from csvar.tensor import partition_regions, reflect_pad_to_multiple, region_size, variance_map

log = logging.getLogger("csvar")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_outputs(outputs: dict[Path, bytes | str]) -> None:
    """Write pre-rendered outputs; nothing is written until all are ready."""
    for path, content in outputs.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, str):
            path.write_text(content)
        else:
            path.write_bytes(content)


def _load_padded(path) -> np.ndarray:
    img = read_image(path)
    s = region_size(*img.shape[:2])
    return reflect_pad_to_multiple(img, s)


def cmd_variance_map(args) -> None:
    img = _load_padded(args.image)
    s = region_size(*img.shape[:2])
    grid = partition_regions(img, s)
    vmap = variance_map(img, grid)
    pixels = heatmap_pixels(vmap)
    if args.scale > 1:
        pixels = np.kron(pixels, np.ones((args.scale, args.scale), np.uint8))
    stats = {"S": s, "rows": grid.rows, "cols": grid.cols, "median": vmap.median,
             "min": float(vmap.values.min()), "max": float(vmap.values.max())}
    out = Path(args.out)
    stats_path = Path(args.stats) if args.stats else out.with_suffix(".json")
    _write_outputs({out: encode_pnm(pixels[:, :, None]), stats_path: _dump(stats)})
    print(_dump(stats), end="")


def cmd_shuffle(args) -> None:
    img = _load_padded(args.image)
    if args.dp_sigma is not None:
        if args.block_size is not None:
            raise InputError("--block-size only applies to shuffling")
        seed = derive_region_seed(args.seed, args.image_id, args.epoch, 0, 0, 0)
        out = gaussian_obfuscate(img, args.dp_sigma, seed)
    else:
        cfg = ShuffleConfig(args.seed, args.epoch, mode=args.mode, block_size_override=args.block_size)
        out = csvar_shuffle(img, cfg, args.image_id)
    _write_outputs({Path(args.out): encode_pnm(out)})


def _experiment_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        raw = ExperimentConfig.load(args.config).to_json()
    for key in ("train_images", "train_labels", "test_images", "test_labels", "train_limit", "test_limit",
                "subset_seed", "variants_dir", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    for key in ("cifar_train", "cifar_test"):
        value = getattr(args, key, None)
        if value:
            raw[key] = value
    for key in _TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if getattr(args, "iid", False):
        raw["alpha"] = None
    return ExperimentConfig.from_json(raw).with_defaults()


def cmd_generate(args) -> None:
    cfg = _experiment_config(args)
    data = load_experiment_data(cfg)
    shuffle_cfg = ShuffleConfig(args.seed, 0, mode=args.mode, block_size_override=args.block_size)
    out = Path(args.out)
    manifest = generate_epoch_variants(data.train, shuffle_cfg, args.epochs, out, source=fingerprint(data.train.images))
    subset = {"train_indices": data.train_indices.tolist(), "config": cfg.to_json()}
    _write_outputs({out / "subset.json": _dump(subset)})
    print(f"wrote {len(manifest.files)} variant files and {out / 'manifest.json'}")


def _rounds_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "accuracy", "mean_loss"])
    for r in reports:
        writer.writerow([r.round, repr(r.accuracy), repr(r.mean_loss)])
    return buf.getvalue()


def cmd_simulate(args) -> None:
    cfg = _experiment_config(args)
    tc = cfg.train_config()
    data = load_experiment_data(cfg)
    variants = load_variants(cfg, data)
    if tc.protection == "csvar" and variants is not None and variants.mode != tc.shuffle_mode:
        raise InputError(f"variants were shuffled with mode {variants.mode!r}, config asks for {tc.shuffle_mode!r}")
    input_dim = int(np.prod(data.train.shape))
    init = init_model(input_dim, tc.hidden, data.train.num_classes, tc.master_seed)
    x_test = normalize(data.test.images) if data.test is not None else None
    initial_acc = accuracy(init, x_test, data.test.labels) if x_test is not None else None
    reports, params, _, part = simulate(cfg, data, variants)
    out = Path(cfg.out_dir)
    summary = {
        "protection": tc.protection,
        "rounds": tc.rounds,
        "clients": tc.clients,
        "train_samples": len(data.train),
        "test_samples": len(data.test) if data.test is not None else 0,
        "initial_accuracy": initial_acc,
        "final_accuracy": reports[-1].accuracy if reports else initial_acc,
        "final_mean_loss": reports[-1].mean_loss if reports else None,
    }
    members = {"train_indices": data.train_indices.tolist(), "config": cfg.to_json()}
    _write_outputs({
        out / "config.json": _dump(cfg.to_json()),
        out / "rounds.csv": _rounds_csv(reports),
        out / "rounds.json": _dump([r.to_json() for r in reports]),
        out / "summary.json": _dump(summary),
        out / "members.json": _dump(members),
        out / "model.bin": params.to_bytes(),
    })
    print(_dump(summary), end="")


def cmd_attack_mia(args) -> None:
    params = ModelParams.load(args.model)
    try:
        members_info = json.loads(Path(args.members).read_text())
        cfg = ExperimentConfig.from_json(members_info["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{args.members}: not a members file ({exc})") from exc
    data = load_experiment_data(cfg)
    if data.test is None:
        raise InputError("the run has no held-out test split to draw non-members from")
    if params.W1.shape[0] != int(np.prod(data.train.shape)):
        raise InputError("model input size does not match the dataset")
    members, nonmembers = mia_cohorts(data.train, data.test, args.cohort_size, args.seed)
    report = attack(params, members, nonmembers)
    out = Path(args.out)
    _write_outputs({out / "roc.csv": report.roc_csv(), out / "mia.json": report_json(report)})
    print(report_json(report), end="")


def cmd_metrics(args) -> None:
    original = read_image(args.original)
    transformed = read_image(args.transformed)
    if original.shape != transformed.shape:
        # shuffled outputs are padded; compare against the padded original
        original = reflect_pad_to_multiple(original, region_size(*original.shape[:2]))
    report = report_json(obfuscation_report(original, transformed))
    if args.out:
        _write_outputs({Path(args.out): report})
    print(report, end="")


_TRAIN_FLAGS = {f.name: f for f in fields(TrainConfig)}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override config file)")
    g.add_argument("--rounds", type=int)
    g.add_argument("--clients", type=int)
    g.add_argument("--local-epochs", dest="local_epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--protection", choices=["none", "dp", "csvar"])
    g.add_argument("--dp-sigma", dest="dp_sigma", type=float)
    g.add_argument("--shuffle-mode", dest="shuffle_mode", choices=MODES)
    g.add_argument("--variant-epochs", dest="variant_epochs", type=int)
    g.add_argument("--master-seed", dest="master_seed", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--alpha", type=float, help="Dirichlet concentration for non-IID shards")
    g.add_argument("--iid", action="store_true", help="uniform random client split")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data (defaults to the bundled MNIST)")
    g.add_argument("--config", help="flat JSON experiment config")
    g.add_argument("--train-images", dest="train_images")
    g.add_argument("--train-labels", dest="train_labels")
    g.add_argument("--test-images", dest="test_images")
    g.add_argument("--test-labels", dest="test_labels")
    g.add_argument("--cifar-train", dest="cifar_train", nargs="+")
    g.add_argument("--cifar-test", dest="cifar_test", nargs="+")
    g.add_argument("--train-limit", dest="train_limit", type=int)
    g.add_argument("--test-limit", dest="test_limit", type=int)
    g.add_argument("--subset-seed", dest="subset_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csvar", description="Variance-guided image shuffling and FL experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("variance-map", help="region-variance heatmap of one image")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="heatmap PGM path")
    p.add_argument("--stats", help="JSON stats path (default: next to the heatmap)")
    p.add_argument("--scale", type=int, default=1, help="enlarge each region to NxN pixels")
    p.set_defaults(func=cmd_variance_map)

    p = sub.add_parser("shuffle", help="shuffle (or noise) one image")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--image-id", dest="image_id", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="channel-wise")
    p.add_argument("--block-size", dest="block_size", type=int, help="fixed block size, bypassing the variance rule")
    p.add_argument("--dp-sigma", dest="dp_sigma", type=float, help="Gaussian-noise baseline instead of shuffling")
    p.set_defaults(func=cmd_shuffle)

    p = sub.add_parser("generate", help="pre-generate shuffled epoch variants of a dataset")
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="channel-wise")
    p.add_argument("--block-size", dest="block_size", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="run federated training")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--variants", dest="variants_dir", help="directory written by 'csvar generate'")
    p.add_argument("--out", dest="out_dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack-mia", help="loss-threshold membership inference on a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--members", required=True, help="members.json written by 'csvar simulate'")
    p.add_argument("--cohort-size", dest="cohort_size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for roc.csv and mia.json")
    p.set_defaults(func=cmd_attack_mia)

    p = sub.add_parser("metrics", help="obfuscation metrics of a transformed image")
    p.add_argument("original")
    p.add_argument("transformed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (InputError, OSError) as exc:
        print(f"csvar: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"csvar: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
