"""Command-line pipeline: synth, select-bands, train, predict, evaluate.

Every subcommand is driven by one JSON config (--config) with --set
overrides, echoes the resolved config into the output directory, and
writes delimited reports plus rendered figures.  Exit codes: 0 success,
1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import figures
from .config import UsageError, echo_config, load_config, resolve_clusters
from .graph import NumericalError, build_similarity, normalize_adjacency, spectral_cluster
from .hsi import (
    FormatError,
    SplitSpec,
    band_entropy,
    difference_image,
    extract_patches,
    read_cube,
    read_labels,
    split,
    write_change_map,
    write_csv_report,
    write_cube,
    write_labels,
)
from .network import EcdbsModel, load_checkpoint, save_checkpoint
from .training import (
    LossConfig,
    TrainConfig,
    evaluate,
    metrics,
    predict_full,
    restore_state,
    synth_generate,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _workers() -> int:
    raw = os.environ.get("ECDBS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _out_dir(config) -> Path:
    out = Path(config["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_paths(config, *keys):
    for key in keys:
        if not config["paths"].get(key):
            raise UsageError(f"config paths.{key} is required for this command")


def _load_difference(config):
    t1 = read_cube(config["paths"]["t1"])
    t2 = read_cube(config["paths"]["t2"])
    if t1.shape != t2.shape:
        raise FormatError(f"cube shapes disagree: {t1.shape} vs {t2.shape}")
    return difference_image(t1, t2)


def _informative_list(config):
    value = config["synth"]["informative"]
    if value is None:
        return None
    if isinstance(value, int):
        bands = config["synth"]["bands"]
        return [int(b) for b in np.linspace(0, bands, value, endpoint=False)]
    return [int(v) for v in value]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(config) -> int:
    synth = config["synth"]
    if not 0.0 <= synth["change_fraction"] < 0.5:
        raise UsageError(
            f"synth.change_fraction must be in [0,0.5), got {synth['change_fraction']}"
        )
    out = _out_dir(config)
    t1, t2, labels, informative = synth_generate(
        config["seed"],
        bands=synth["bands"],
        height=synth["height"],
        width=synth["width"],
        informative_bands=_informative_list(config),
        change_fraction=synth["change_fraction"],
        noise_sigma=synth["noise_sigma"],
    )
    write_cube(t1, out / "t1.hsic")
    write_cube(t2, out / "t2.hsic")
    write_labels(labels, out / "labels.hsil")
    write_csv_report(["band"], [[b] for b in informative], out / "truth_bands.csv")
    echo_config(config, out / "effective_config.json")
    print(f"synth: wrote {len(informative)}-informative-band scene to {out}")
    return EXIT_OK


def _cluster_difference(config, diff, seed):
    clusters = resolve_clusters(config, diff.bands)
    sim = build_similarity(diff, k=config["bands"]["knn"])
    assignment = spectral_cluster(sim, clusters, seed=seed)
    return sim, normalize_adjacency(sim), assignment


def cmd_select_bands(config, checkpoint=None) -> int:
    _require_paths(config, "t1", "t2")
    out = _out_dir(config)
    diff = _load_difference(config)
    sim, _, assignment = _cluster_difference(config, diff, config["seed"])
    entropy = band_entropy(diff)
    labels = assignment.labels()
    selected = []
    if checkpoint:
        model = load_checkpoint(checkpoint)
        if model.bands != diff.bands:
            raise FormatError(
                f"checkpoint was trained on {model.bands} bands, cubes have {diff.bands}"
            )
        _, selected = model.hardened_selection()
    header = ["band", "cluster", "entropy"] + (["selected"] if selected else [])
    rows = []
    for b in range(diff.bands):
        row = [b, int(labels[b]), entropy[b]]
        if selected:
            row.append(1 if b in selected else 0)
        rows.append(row)
    write_csv_report(header, rows, out / "bands.csv")
    write_csv_report(
        ["band"] + [str(j) for j in range(diff.bands)],
        [[i] + [sim.values[i, j] for j in range(diff.bands)] for i in range(diff.bands)],
        out / "similarity.csv",
    )
    figures.save_band_report(entropy, labels, selected, out / "bands.png")
    echo_config(config, out / "effective_config.json")
    print(f"select-bands: {assignment.clusters} clusters over {diff.bands} bands -> {out}")
    if selected:
        print(f"select-bands: hardened picks {selected}")
    return EXIT_OK


def _build_model_and_splits(config):
    diff = _load_difference(config)
    labels = read_labels(config["paths"]["labels"])
    if (labels.height, labels.width) != (diff.height, diff.width):
        raise FormatError(
            f"label mask {labels.height}x{labels.width} does not match cubes "
            f"{diff.height}x{diff.width}"
        )
    patches = extract_patches(diff, labels, config["network"]["patch_size"])
    spec = SplitSpec(
        train_fraction=config["train"]["train_fraction"],
        val_fraction=config["train"]["val_fraction"],
        seed=config["seed"],
    )
    spec.validate()
    train_set, val_set, test_set = split(patches, spec)
    _, a_hat, assignment = _cluster_difference(config, diff, config["seed"])
    model = EcdbsModel(
        bands=diff.bands,
        clusters=assignment.clusters,
        a_hat=a_hat,
        assignment=assignment.values,
        expansion=config["bands"]["expansion"],
        patch_size=config["network"]["patch_size"],
        hidden=config["network"]["hidden"],
        knn=config["bands"]["knn"],
        seed=config["seed"],
        similarity_metric=config["bands"]["similarity_metric"],
    )
    return diff, labels, model, (train_set, val_set, test_set)


def cmd_train(config) -> int:
    _require_paths(config, "t1", "t2", "labels")
    if not 0 < config["train"]["train_fraction"] < 1:
        raise UsageError(
            f"train.train_fraction must be in (0,1), got {config['train']['train_fraction']}"
        )
    out = _out_dir(config)
    _, _, model, (train_set, val_set, _) = _build_model_and_splits(config)
    train_cfg = TrainConfig(
        epochs=config["train"]["epochs"],
        batch_size=config["train"]["batch_size"],
        learning_rate=config["train"]["learning_rate"],
        beta1=config["train"]["beta1"],
        beta2=config["train"]["beta2"],
        adam_eps=config["train"]["adam_eps"],
        seed=config["seed"],
        tau_start=config["train"]["tau_start"],
        tau_end=config["train"]["tau_end"],
    )
    loss_cfg = LossConfig(
        alpha=config["loss"]["alpha"],
        weight_changed=config["loss"]["weight_changed"],
        weight_unchanged=config["loss"]["weight_unchanged"],
    )
    print(
        f"train: {len(train_set)} train / {len(val_set)} val patches, "
        f"{model.bands} bands -> {model.clusters} clusters, {model.count_parameters()} parameters"
    )
    result = train(model, train_set, val_set, train_cfg, loss_cfg)
    bands = model.bands
    weight_cols = [f"w_{b}" for b in range(bands)]
    write_csv_report(
        ["epoch", "tau", "train_loss", "val_oa", "val_kappa"] + weight_cols,
        [
            [r.epoch, r.tau, r.train_loss, r.val_oa, r.val_kappa] + list(r.weights)
            for r in result.log
        ],
        out / "training_log.csv",
    )
    write_csv_report(
        ["epoch"] + weight_cols + [f"selected_{i}" for i in range(model.clusters)],
        [[r.epoch] + list(r.weights) + list(r.selected) for r in result.log],
        out / "weight_trajectory.csv",
    )
    if result.log:
        epochs = [r.epoch for r in result.log]
        figures.save_weight_trajectory(
            epochs, np.stack([r.weights for r in result.log]), out / "weight_trajectory.png"
        )
        figures.save_training_curves(
            epochs,
            [r.train_loss for r in result.log],
            [r.val_kappa for r in result.log],
            [r.tau for r in result.log],
            out / "training_curves.png",
        )
    echo_config(config, out / "effective_config.json")
    if result.diverged:
        restore_state(model, result.last_good_state)
        save_checkpoint(model, out / "checkpoint.ecdb")
        raise NumericalError(
            "training loss became non-finite; last-good checkpoint written"
        )
    restore_state(model, result.best_state)
    save_checkpoint(model, out / "checkpoint.ecdb")
    best = result.log[result.best_epoch]
    print(
        f"train: checkpoint from epoch {result.best_epoch} "
        f"(val OA {best.val_oa:.4f}, val kappa {best.val_kappa:.4f}) -> {out / 'checkpoint.ecdb'}"
    )
    print(f"train: selected bands {best.selected}")
    return EXIT_OK


def _load_model_for(config, checkpoint, bands):
    if not checkpoint:
        raise UsageError("--checkpoint is required for this command")
    model = load_checkpoint(
        checkpoint, similarity_metric=config["bands"]["similarity_metric"]
    )
    if model.bands != bands:
        raise FormatError(
            f"checkpoint was trained on {model.bands} bands, cubes have {bands}"
        )
    return model


def cmd_predict(config, checkpoint) -> int:
    _require_paths(config, "t1", "t2")
    out = _out_dir(config)
    diff = _load_difference(config)
    model = _load_model_for(config, checkpoint, diff.bands)
    prediction = predict_full(model, diff, workers=_workers())
    write_change_map(prediction, out / "change_map.pgm")
    figures.save_change_maps(prediction, out / "change_map.png")
    echo_config(config, out / "effective_config.json")
    print(f"predict: {int(prediction.sum())} changed pixels of {prediction.size} -> {out}")
    return EXIT_OK


def cmd_evaluate(config, checkpoint) -> int:
    _require_paths(config, "t1", "t2", "labels")
    out = _out_dir(config)
    diff = _load_difference(config)
    labels = read_labels(config["paths"]["labels"])
    model = _load_model_for(config, checkpoint, diff.bands)
    patches = extract_patches(diff, labels, model.patch_size)
    spec = SplitSpec(
        train_fraction=config["train"]["train_fraction"],
        val_fraction=config["train"]["val_fraction"],
        seed=config["seed"],
    )
    _, _, test_set = split(patches, spec)
    report, cm, _ = evaluate(model, test_set, workers=_workers())
    prediction = predict_full(model, diff, workers=_workers())
    write_change_map(prediction, out / "change_map.pgm")
    figures.save_change_maps(
        prediction, out / "change_map.png", reference=(labels.values == 1).astype(np.uint8)
    )
    rows = [
        ["oa", report.oa],
        ["kappa", report.kappa],
        ["f1", report.f1],
        ["precision", report.precision],
        ["recall", report.recall],
        ["tp", cm.tp],
        ["tn", cm.tn],
        ["fp", cm.fp],
        ["fn", cm.fn],
        ["degenerate", int(report.degenerate)],
    ]
    write_csv_report(["metric", "value"], rows, out / "metrics.csv")
    text = (
        f"test pixels : {cm.total}\n"
        f"OA          : {report.oa:.6f}\n"
        f"Kappa       : {report.kappa:.6f}\n"
        f"F1          : {report.f1:.6f}\n"
        f"precision   : {report.precision:.6f}\n"
        f"recall      : {report.recall:.6f}\n"
    )
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    echo_config(config, out / "effective_config.json")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecdbs",
        description="hyperspectral change detection with learned band selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic bitemporal scene"),
        ("select-bands", "cluster bands of the difference image and report diagnostics"),
        ("train", "train the detector end to end"),
        ("predict", "write a full change map from a checkpoint"),
        ("evaluate", "score a checkpoint on the held-out test split"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config entry (dotted key, JSON value)",
        )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        config = load_config(args.config, args.set)
        if args.seed is not None:
            config["seed"] = int(args.seed)
        if args.out is not None:
            config["paths"]["out"] = args.out
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "select-bands":
            return cmd_select_bands(config, args.checkpoint)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "predict":
            return cmd_predict(config, args.checkpoint)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoint)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
