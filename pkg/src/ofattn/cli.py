"""``ofattn`` command-line harness.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import netpbm
from .data import (
    BACKGROUNDS, SyntheticSpec, four_patch_example, generate_dataset, load_dataset, sample_seed, shuffle_patches,
    swap_background, write_dataset,
)
from .engine import ContractError, NonFiniteError, Tape
from .grid import GridError
from .metrics import compute_map
from .model import VitConfig, forward, gradcheck_tiny, load_checkpoint, prepare_patches, save_checkpoint
from .ofa import OfaConfig
from .pam import adjacency_stats, build_pam
from .training import MODES, TrainConfig, effective_config, fit, predict, prepare

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("ofattn")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval run needs. ``seed`` has no default on purpose."""
    seed: int | None = None
    mode: str = "ofa"
    alpha: float = 0.7
    ofa_layers: tuple[int, ...] = (1, 3, 6)
    ofa_decay: float = 0.9
    depth: int = 6
    dim: int = 64
    heads: int = 2
    patch_size: int = 8
    scales: tuple[int, ...] = (64,)
    mlp_ratio: int = 4
    mae_ratio: float = 0.5
    epochs: int = 16
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    mae_steps: int = 1000
    mae_batch_size: int = 32
    holdout: int = 0
    subsample: float = 1.0
    data: str | None = None
    out: str | None = None

    def model_config(self, n_classes: int) -> VitConfig:
        return VitConfig(depth=self.depth, dim=self.dim, heads=self.heads, patch_size=self.patch_size,
                         scales=self.scales, n_classes=n_classes, mlp_ratio=self.mlp_ratio,
                         ofa=OfaConfig(self.alpha, self.ofa_layers, self.ofa_decay), mae_ratio=self.mae_ratio)

    def train_config(self) -> TrainConfig:
        return TrainConfig(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, seed=self.seed, mae_steps=self.mae_steps,
                           mae_batch_size=self.mae_batch_size)


def parse_layers(text, depth: int | None = None) -> tuple[int, ...]:
    """``"1,3,6"`` -> (1, 3, 6); ``"all"`` -> 1..depth; ``""`` -> ()."""
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    text = str(text).strip()
    if text == "all":
        if depth is None:
            raise UsageError("'all' layers needs a known depth")
        return tuple(range(1, depth + 1))
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad layer list {text!r}") from None


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    try:
        if path.suffix == ".json":
            d = json.loads(raw)
        else:
            d = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise UsageError(f"bad config {path}: {e}") from None
    return {k.replace("-", "_"): v for k, v in d.items()}


def build_run_config(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    names = {f.name for f in fields(RunConfig)}
    values = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        unknown = set(file_values) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    depth = int(values.get("depth", RunConfig.depth))
    if "ofa_layers" in values:
        values["ofa_layers"] = parse_layers(values["ofa_layers"], depth)
    if "scales" in values:
        values["scales"] = parse_layers(values["scales"])
    cfg = RunConfig(**values)
    if cfg.seed is None:
        raise UsageError("a seed is required (--seed or 'seed' in the config file)")
    if cfg.mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    if not 0 < cfg.subsample <= 1:
        raise UsageError("--subsample must be in (0, 1]")
    return cfg


# ----------------------------------------------------------------------------
# data helpers


def _load(data_dir):
    if data_dir is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(data_dir)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load dataset {data_dir}: {e}") from None


def split(ds, holdout: int):
    """Last ``holdout`` samples for evaluation; everything before for training."""
    n = len(ds)
    if holdout < 0 or (holdout and holdout >= n):
        raise UsageError(f"--holdout {holdout} leaves no training data ({n} samples)")
    if holdout == 0:
        return ds, ds
    return ds.subset(range(n - holdout)), ds.subset(range(n - holdout, n))


def parse_corruption(text: str):
    kind, _, arg = text.partition(":")
    if kind == "shuffle":
        try:
            return "shuffle", int(arg)
        except ValueError:
            raise UsageError(f"shuffle level must be an integer, got {arg!r}") from None
    if kind == "bg-swap":
        if arg != "all" and arg not in BACKGROUNDS:
            raise UsageError(f"bg-swap class must be one of {BACKGROUNDS} or 'all'")
        return "bg-swap", arg
    raise UsageError(f"unknown corruption {text!r}; use shuffle:K or bg-swap:CLASS")


def corrupt_images(ds, kind: str, arg, seed: int, patch_size: int = 8) -> np.ndarray:
    """Corrupted copy of ``ds.images``; per-sample seeds derive from ``seed``.

    Shuffles move whole model patches, so the grid has ``canvas // patch_size`` blocks per side.
    """
    grid_n = ds.images.shape[1] // patch_size
    out = ds.images.copy()
    for i in range(len(ds)):
        s = sample_seed(seed, i)
        if kind == "shuffle":
            out[i], _ = shuffle_patches(ds.images[i], grid_n, seed=s, k=arg)
        else:
            out[i] = swap_background(ds.sample(i), arg, s).image
    return out


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.example == "four-patch":
        spec, sample = four_patch_example()
        write_dataset(spec, [sample], 0, args.out)
        print(json.dumps({"out": str(args.out), "n": 1}))
        return
    if args.n is None or args.seed is None:
        raise UsageError("gen-data needs --n and --seed")
    spec = SyntheticSpec(canvas=args.canvas, n_classes=args.n_classes, min_objects=args.min_objects,
                         max_objects=args.max_objects, min_size=args.min_size, max_size=args.max_size,
                         position_step=args.position_step, bg_correlation=args.bg_correlation)
    generate_dataset(spec, args.n, args.seed, args.out)
    print(json.dumps({"out": str(args.out), "n": args.n}))


def _train(run: RunConfig, ds, out_dir: Path | None):
    t0 = time.perf_counter()
    cfg = run.model_config(ds.spec.n_classes)
    tcfg = run.train_config()
    train_ds, test_ds = split(ds, run.holdout)
    if run.subsample < 1:
        train_ds = train_ds.subset(range(max(1, int(round(run.subsample * len(train_ds))))))
    data = prepare(train_ds, cfg, with_pam=run.mode in ("ofa", "mae+ofa"))
    log_fh = open(out_dir / "log.jsonl", "w") if out_dir else None

    def write_log(rec):
        if log_fh:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        params, history = fit(data, cfg, tcfg, log=write_log)
    finally:
        if log_fh:
            log_fh.close()
    eff = effective_config(cfg, run.mode)
    report = compute_map(predict(params, eff, prepare_patches(test_ds.images, eff)), test_ds.labels)
    metrics = {
        "config": asdict(run),
        "mAP": report.mAP,
        "per_class": report.to_json()["per_class"],
        "excluded": report.excluded,
        "eval_samples": len(test_ds),
        "loss_curve": [{k: r[k] for k in ("step", "task", "ofa_total", "total")} for r in history],
        "wall_clock_s": time.perf_counter() - t0,
    }
    if out_dir:
        save_checkpoint(out_dir / "model.ofa", {"model": eff.to_json()}, params)
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return params, eff, metrics


def cmd_train(args):
    run = build_run_config(args)
    if run.out is None:
        raise UsageError("--out is required")
    ds = _load(run.data)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _, _, metrics = _train(run, ds, out)
    print(json.dumps({"mAP": metrics["mAP"], "checkpoint": str(out / "model.ofa")}))


def _load_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    try:
        config, params = load_checkpoint(path)
        return VitConfig.from_json(config["model"]), params
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from None


def eval_report(cfg, params, ds, corrupt: str | None, corrupt_seed: int) -> dict:
    if corrupt is None:
        variants = {"clean": ds.images}
    else:
        kind, arg = parse_corruption(corrupt)
        if kind == "bg-swap" and arg == "all":
            variants = {f"bg-swap:{b}": corrupt_images(ds, kind, b, corrupt_seed, cfg.patch_size)
                        for b in BACKGROUNDS}
        else:
            variants = {corrupt: corrupt_images(ds, kind, arg, corrupt_seed, cfg.patch_size)}
    results = {}
    for name, images in variants.items():
        r = compute_map(predict(params, cfg, prepare_patches(images, cfg)), ds.labels)
        results[name] = {"mAP": r.mAP, "per_class": r.to_json()["per_class"], "excluded": r.excluded}
    report = {"corruption": corrupt, "variants": results, "samples": len(ds),
              "mAP": float(np.mean([v["mAP"] for v in results.values()]))}
    return report


def cmd_eval(args):
    t0 = time.perf_counter()
    cfg, params = _load_checkpoint(args.checkpoint)
    ds = _load(args.data)
    if args.holdout:
        ds = split(ds, args.holdout)[1]
    if ds.spec.n_classes != cfg.n_classes:
        raise DataError(f"dataset has {ds.spec.n_classes} classes, checkpoint {cfg.n_classes}")
    report = eval_report(cfg, params, ds, args.corrupt, args.corrupt_seed)
    report["wall_clock_s"] = time.perf_counter() - t0
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_corrupt(args):
    ds = _load(args.data)
    kind, arg = parse_corruption(args.corrupt)
    if kind == "bg-swap" and arg == "all":
        raise UsageError("corrupt writes one dataset; pick a single background class")
    images = corrupt_images(ds, kind, arg, args.corrupt_seed, args.patch_size)
    samples = []
    for i in range(len(ds)):
        s = ds.sample(i)
        s.image = images[i]
        samples.append(s)
    write_dataset(ds.spec, samples, args.corrupt_seed, args.out)
    print(json.dumps({"out": str(args.out), "n": len(samples), "corruption": args.corrupt}))


def cmd_pam_stats(args):
    ds = _load(args.data)
    scales = VitConfig(depth=1, dim=8, heads=1, patch_size=args.patch_size,
                       scales=parse_layers(args.scales) if args.scales else (ds.spec.canvas,),
                       ofa=OfaConfig(ofa_layers=())).scale_set
    per_sample = []
    restricted = full = 0
    for m in ds.region_maps:
        pam = build_pam(m, scales)
        s = adjacency_stats(pam.B, pam.object_rows)
        per_sample.append(s)
        restricted += s["restricted_edges"]
        full += s["full_edges"]
    out = {
        "samples": len(per_sample),
        "restricted_edges": restricted,
        "full_edges": full,
        "retained_fraction": restricted / full,
        "mean_sample_fraction": float(np.mean([s["retained_fraction"] for s in per_sample])),
    }
    if args.per_sample:
        out["per_sample"] = per_sample
    print(json.dumps(out, indent=2, sort_keys=True))


def attention_maps(cfg: VitConfig, params, image: np.ndarray, layers) -> dict:
    """Per layer: head-mean CLS->patch row and row-mean patch->patch attention
    over the base-scale tokens, as ``rows x cols`` arrays."""
    spec = cfg.scale_set.specs[0]
    n = spec.n_patches
    tape = Tape(grad=False)
    out = forward(tape, prepare_patches(image[None], cfg), params, cfg, capture=layers)
    maps = {}
    for layer in layers:
        A = np.mean([a.value[0] for a in out.traces[layer].A], axis=0)
        cls_row = A[0, 1:1 + n]
        row_mean = A[1:1 + n, 1:1 + n].mean(axis=0)
        maps[layer] = {"cls": cls_row.reshape(spec.rows, spec.cols), "rowmean": row_mean.reshape(spec.rows, spec.cols)}
    return maps


def heatmap(values: np.ndarray, patch_size: int) -> np.ndarray:
    """Scale by the max to [0, 255] and upsample each cell to a patch."""
    peak = values.max()
    scaled = np.zeros_like(values) if peak <= 0 else values / peak * 255.0
    gray = np.rint(scaled).astype(np.uint8)
    return np.kron(gray, np.ones((patch_size, patch_size), dtype=np.uint8))


def cmd_export_attn(args):
    cfg, params = _load_checkpoint(args.checkpoint)
    ds = _load(args.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index must be in [0, {len(ds)})")
    layers = parse_layers(args.layers, cfg.depth) if args.layers else tuple(range(1, cfg.depth + 1))
    if any(not 1 <= l <= cfg.depth for l in layers):
        raise UsageError(f"layers must be within 1..{cfg.depth}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for layer, m in attention_maps(cfg, params, ds.images[args.index], layers).items():
        for kind, values in m.items():
            path = out / f"sample{args.index:05d}_layer{layer}_{kind}.pgm"
            netpbm.write_pgm(path, heatmap(values, cfg.patch_size))
            written.append(str(path))
    print(json.dumps({"written": written}))


def cmd_gradcheck(args):
    err = float(gradcheck_tiny(args.seed))
    ok = err < 1e-4
    print(json.dumps({"max_rel_err": err, "threshold": 1e-4, "ok": ok}))
    return 0 if ok else EXIT_NUMERIC


def cmd_ablate(args):
    run = build_run_config(args)
    ds = _load(run.data)
    sets = [s.strip() for s in args.layer_sets.split(";") if s.strip()]
    rows = []
    for text in sets:
        layers = parse_layers(text, run.depth)
        r = replace(run, mode="ofa", ofa_layers=layers, out=None)
        _, _, metrics = _train(r, ds, None)
        rows.append({"layers": text, "ofa_layers": list(layers), "mAP": metrics["mAP"]})
        log.info("layers %s: mAP %.4f", text, metrics["mAP"])
    table = ["| OFA layers | mAP |", "|---|---|"] + [f"| [{r['layers']}] | {r['mAP']:.4f} |" for r in rows]
    result = {"config": asdict(run), "rows": rows, "table": "\n".join(table)}
    if run.out:
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        (out / "ablation.md").write_text(result["table"] + "\n")
    print(result["table"])


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_flags(p, with_out=True):
    p.add_argument("--config", help="TOML or JSON file with run settings; flags override it")
    p.add_argument("--data", help="dataset directory")
    if with_out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="run seed (required here or in the config)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--alpha", type=float, help="OFA loss weight")
    p.add_argument("--ofa-layers", dest="ofa_layers", help="comma-separated 1-based layers, or 'all'")
    p.add_argument("--ofa-decay", dest="ofa_decay", type=float, help="per-layer weight decay factor")
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--scales", help="comma-separated square image sizes, largest first")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--mae-steps", dest="mae_steps", type=int)
    p.add_argument("--mae-ratio", dest="mae_ratio", type=float)
    p.add_argument("--holdout", type=int, help="evaluate on the last N samples and train on the rest")
    p.add_argument("--subsample", type=float, help="train on this leading fraction of the training split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ofattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    d = SyntheticSpec()
    p.add_argument("--canvas", type=int, default=d.canvas)
    p.add_argument("--n-classes", dest="n_classes", type=int, default=d.n_classes)
    p.add_argument("--min-objects", dest="min_objects", type=int, default=d.min_objects)
    p.add_argument("--max-objects", dest="max_objects", type=int, default=d.max_objects)
    p.add_argument("--min-size", dest="min_size", type=int, default=d.min_size)
    p.add_argument("--max-size", dest="max_size", type=int, default=d.max_size)
    p.add_argument("--position-step", dest="position_step", type=int, default=d.position_step)
    p.add_argument("--bg-correlation", dest="bg_correlation", type=float, default=d.bg_correlation)
    p.add_argument("--example", choices=["four-patch"], help="write a fixed hand-made example instead")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint, metrics and loss log")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (optionally on corrupted images)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int, default=0, help="evaluate only the last N samples")
    p.add_argument("--corrupt", help="shuffle:K or bg-swap:CLASS (CLASS may be 'all')")
    p.add_argument("--corrupt-seed", dest="corrupt_seed", type=int, default=0)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corrupt", required=True, help="shuffle:K or bg-swap:CLASS")
    p.add_argument("--corrupt-seed", dest="corrupt_seed", type=int, default=0)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=8, help="shuffle block size in pixels")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("pam-stats", help="attention-graph edge statistics of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=8)
    p.add_argument("--scales", help="comma-separated square sizes (default: the canvas)")
    p.add_argument("--per-sample", dest="per_sample", action="store_true")
    p.set_defaults(func=cmd_pam_stats)

    p = sub.add_parser("export-attn", help="write attention heatmaps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layers", help="comma-separated layers (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train one OFA model per layer set and tabulate mAP")
    _run_flags(p)
    p.add_argument("--layer-sets", dest="layer_sets", default="6;1;1,6;1,3,6;all",
                   help="semicolon-separated layer lists")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as e:
        print(f"ofattn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, netpbm.NetpbmError, FileNotFoundError) as e:
        print(f"ofattn: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as e:
        print(f"ofattn: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, GridError, ValueError) as e:
        print(f"ofattn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
