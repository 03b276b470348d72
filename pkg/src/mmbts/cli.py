"""Command line interface.

Subcommands:
    synth-data   generate a directory of synthetic correlated subjects
    train        train one model from a config file / flags
    evaluate     run a checkpoint over all 15 availability patterns
    report       merge result CSVs into the 15-row comparison table
    hist         joint intensity histogram of two modalities (+ plot)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics, pipeline
from .correlation import joint_intensity_histogram, save_histogram
from .errors import MmbtsError
from .network import NetworkConfig
from .pipeline import RunConfig
from .volumes import Modality, PhantomSpec, generate_phantom, save_subject

# Published full-modality Dice reference (WT/TC/ET) from the BraTS 2018
# benchmark; printed for context in reports, never asserted.
REFERENCE_FULL_MODALITY_DSC = (86.6, 85.8, 76.9)


def _load_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _deep_update(base: dict, update: dict) -> dict:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _build_run_config(args) -> RunConfig:
    config = RunConfig().to_dict()
    if args.config:
        _deep_update(config, _load_config_file(Path(args.config)))
    for key in ("ablation", "seed", "batch_size", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    if getattr(args, "epochs", None) is not None:
        config["max_epochs"] = args.epochs
    for key in ("levels", "base_filters"):
        value = getattr(args, key, None)
        if value is not None:
            config["network"][key] = value
    if getattr(args, "shape", None) is not None:
        config["network"]["input_shape"] = _shape3(args.shape)
    return RunConfig.from_dict(config)


def _shape3(values) -> tuple[int, int, int]:
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise ValueError("--shape takes 1 or 3 integers")


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(args.seed).spawn(args.count)
    shape = _shape3(args.shape)
    for i, child in enumerate(children):
        seed = int(child.generate_state(1)[0])
        spec = PhantomSpec(
            shape=shape,
            tumor_count=args.tumor_count,
            tumor_radius=tuple(args.radius),
            latent_count=args.latents,
            noise_sigma=args.noise_sigma,
            seed=seed,
        )
        volume, labels = generate_phantom(spec)
        save_subject(volume, labels, out / f"sub-{i:04d}")
    print(f"wrote {args.count} subjects to {out}")
    return 0


def cmd_train(args) -> int:
    config = _build_run_config(args)
    out_dir = Path(args.out)
    result = pipeline.train(config, args.data, out_dir)
    (out_dir / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2))
    print(f"checkpoint: {result['checkpoint']}")
    print(f"log:        {result['log']}")
    print(f"best validation loss: {result['best_val']:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    table = pipeline.evaluate(args.checkpoint, args.data, name=args.name or "")
    if args.out_csv:
        table.to_csv(args.out_csv)
        print(f"wrote {args.out_csv}")
    print(table.format_text("dsc"))
    print()
    print(table.format_text("hd"))
    return 0


def cmd_report(args) -> int:
    tables = []
    for path in args.inputs:
        name = Path(path).stem
        tables.append(metrics.ResultTable.from_csv(path, name=name))
    for table in tables:
        print(table.format_text("dsc"))
        print()
        print(table.format_text("hd"))
        print()
    if len(tables) > 1:
        print("mean AVG Dice across the 15 patterns:")
        for table in tables:
            print(f"  {table.name:>12}: {100 * table.mean_avg('dsc'):5.1f}")
        print()
    wt, tc, et = REFERENCE_FULL_MODALITY_DSC
    print(
        "Reference (published BraTS 2018 full-modality Dice, for context only, "
        f"not asserted): WT {wt} / TC {tc} / ET {et}"
    )
    if args.out_csv:
        _write_merged_csv(tables, Path(args.out_csv))
        print(f"wrote {args.out_csv}")
    return 0


def _write_merged_csv(tables, path: Path) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["run", "pattern", "region", "dsc", "hd"])
        for table in tables:
            for row in table.rows:
                for region in metrics.REGIONS:
                    hd = row.hd[region]
                    writer.writerow(
                        [
                            table.name,
                            row.pattern.to_int(),
                            region.value,
                            f"{row.dsc[region]:.6f}",
                            "" if hd != hd else f"{hd:.6f}",
                        ]
                    )


def cmd_hist(args) -> int:
    from .volumes import load_subject

    volume, _ = load_subject(args.subject)
    vol_a = volume.get(Modality(args.mod_a))
    vol_b = volume.get(Modality(args.mod_b))
    counts, edges_a, edges_b, r = joint_intensity_histogram(vol_a, vol_b, bins=args.bins)
    csv_path, json_path = save_histogram(counts, edges_a, edges_b, r, args.out)
    print(f"wrote {csv_path} and {json_path} (pearson r = {r:.4f})")
    if not args.no_plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.imshow(
            np.log1p(counts).T,
            origin="lower",
            aspect="auto",
            extent=(edges_a[0], edges_a[-1], edges_b[0], edges_b[-1]),
        )
        ax.set_xlabel(args.mod_a)
        ax.set_ylabel(args.mod_b)
        ax.set_title(f"joint intensity (r = {r:.3f})")
        png_path = Path(args.out).with_suffix(".png")
        fig.savefig(png_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        print(f"wrote {png_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmbts")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate synthetic subjects")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--shape", type=int, nargs="+", default=[32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tumor-count", type=int, default=1)
    p.add_argument("--radius", type=float, nargs=2, default=[6.0, 10.0])
    p.add_argument("--latents", type=int, default=3)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--ablation", choices=("baseline", "fe_g", "fe_g_cc"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--levels", type=int)
    p.add_argument("--base-filters", type=int, dest="base_filters")
    p.add_argument("--shape", type=int, nargs="+")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on all patterns")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--name", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge result CSVs into comparison tables")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("hist", help="joint intensity histogram of two modalities")
    p.add_argument("--subject", required=True)
    p.add_argument("--mod-a", default="flair")
    p.add_argument("--mod-b", default="t2")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--out", required=True, help="base path for .csv/.json/.png")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MmbtsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
