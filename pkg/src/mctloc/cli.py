"""``mctloc`` command line: gen, train, maps, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, encoder, gradcheck, inference, studies, tensorio, train
from . import maps as M
from .config import load_configs
from .errors import ConfigError, FormatError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

MAP_KINDS = inference.ALL_KINDS
REPORT_COLUMNS = ("kind", "k", "tau", "miou", "fp", "fn", "piou", "pxap")

log = logging.getLogger("mctloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def _kinds(kind: str) -> tuple[str, ...]:
    return MAP_KINDS if kind == "all" else (kind,)


# -- subcommands --------------------------------------------------------------------


def cmd_gen(args) -> None:
    spec = data.load_spec(_existing(args.spec) if args.spec else None)
    out = Path(args.out)
    for split in ("train", "eval"):
        data.save(data.generate(spec, split), out / split)
    print(f"wrote {spec.num_samples} train and {spec.eval_samples} eval samples to {out}")


def cmd_train(args) -> None:
    model_cfg, train_cfg = load_configs(_existing(args.config) if args.config else None)
    if args.epochs is not None:
        train_cfg = train_cfg.replace(epochs=args.epochs)
    dataset = data.load(data.resolve_split(_existing(args.data), "train"))
    if model_cfg.num_classes != dataset.num_classes:
        log.info("num_classes taken from the dataset (%d)", dataset.num_classes)
        model_cfg = model_cfg.replace(num_classes=dataset.num_classes)
    result = train.train(dataset, model_cfg, train_cfg, seed=args.seed)
    out = Path(args.out)
    encoder.save_checkpoint(out, model_cfg, result.params)
    train.save_curve(result, out / "curve.csv")
    print(f"final epoch mean loss {result.epoch_means()[-1][0]:.4f}; checkpoint in {out}")


def _eval_data(path: str) -> data.Dataset:
    return data.load(data.resolve_split(_existing(path), "eval"))


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1], scaled by 255."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def cmd_maps(args) -> None:
    config, params = encoder.load_checkpoint(_existing(args.checkpoint))
    dataset = _eval_data(args.data)
    n = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    filt = dataset.labels[:n] if args.use_labels else None
    res = inference.localize(dataset.images[:n], config, params, filt, args.k, args.iterations)
    out = Path(args.out)
    size = dataset.images.shape[-2:]
    for kind in _kinds(args.kind):
        folder = out / kind
        folder.mkdir(parents=True, exist_ok=True)
        grid = res[kind].maps
        tensorio.save(out / f"{kind}.mct1", grid)
        pixels = M.upsample_maps(grid, size)
        for i in range(n):
            for c in range(config.num_classes):
                write_pgm(folder / f"{i:04d}_class{c}.pgm", pixels[i, c])
    print(f"wrote maps for {n} images to {out}")


def format_table(rows: list[dict], columns) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)


def cmd_eval(args) -> None:
    config, params = encoder.load_checkpoint(_existing(args.checkpoint))
    dataset = _eval_data(args.data)
    reports = inference.evaluate(dataset, config, params, _kinds(args.kind), tau=args.tau, k=args.k,
                                 iterations=args.iterations)
    rows = [reports[kind].row() for kind in reports]
    columns = list(REPORT_COLUMNS) + [f"iou_{i}" for i in range(config.num_classes + 1)]
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(studies.rows_to_csv([{c: r[c] for c in columns} for r in rows]))
    print(format_table(rows, REPORT_COLUMNS))


def cmd_ablate(args) -> None:
    model_cfg, train_cfg = load_configs(_existing(args.config) if args.config else None)
    if args.epochs is not None:
        train_cfg = train_cfg.replace(epochs=args.epochs)
    if args.data:
        train_data = data.load(data.resolve_split(_existing(args.data), "train"))
        eval_data = _eval_data(args.data)
    else:
        spec = data.DatasetSpec()
        train_data, eval_data = data.generate(spec, "train"), data.generate(spec, "eval")
    model_cfg = model_cfg.replace(num_classes=train_data.num_classes)
    setup = studies.StudySetup(train_data, eval_data, model_cfg, train_cfg, args.seed)
    rows = studies.run(args.study, setup)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(studies.rows_to_csv(rows))
    print(format_table(rows, list(rows[0])))


def cmd_gradcheck(args) -> int:
    model_cfg, _ = load_configs(_existing(args.config) if args.config else None)
    report = gradcheck.model_gradient_report(model_cfg, seed=args.seed, coords_per_param=args.coords)
    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    ok = worst < gradcheck.TOLERANCE
    print(f"{len(report)} parameters checked; max relative error {worst:.3e} ({worst_name}): "
          f"{'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mctloc", description="Multi-class-token transformer localization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate the synthetic dataset (train/ and eval/ splits)")
    p.add_argument("--spec", help="key=value dataset spec file (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus curve.csv")
    p.add_argument("--data", required=True, help="dataset root from `gen` or a split directory")
    p.add_argument("--config", help="key=value model/training config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("maps", help="export localization maps as PGM and MCT1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=MAP_KINDS + ("all",), default="all")
    p.add_argument("--k", type=int, help="number of fused layers (config default when omitted)")
    p.add_argument("--iterations", type=int, help="affinity refinement iterations")
    p.add_argument("--limit", type=int, help="only the first N images")
    p.add_argument("--use-labels", action="store_true",
                   help="filter classes with ground-truth labels instead of class-token predictions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("eval", help="seed-quality metrics on the eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=MAP_KINDS + ("all",), default="all")
    p.add_argument("--tau", type=float, default=inference.DEFAULT_TAU)
    p.add_argument("--k", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--report", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation study end to end")
    p.add_argument("--study", required=True, choices=studies.STUDIES)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--data", help="dataset root (default synthetic dataset when omitted)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=2, help="probed coordinates per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mctloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"mctloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"mctloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
