"""Batch command-line entry point: ``bandreg <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
Every run writes ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Pair, gen_bulleye, make_labels
from .dualnet import TrainConfig, TrainingDiverged, predict, train
from .fileio import (FormatError, load_dataset, load_image, load_label_pgm, load_weights,
                     save_dataset, save_deformation, save_freq_field, save_image,
                     save_label_pgm, save_weights)
from .metrics import config_hash, dice, evaluate_predictions, read_csv, write_csv
from .registration import EnergyDiverged, RegConfig, register
from .shooting import IntegrationDiverged, det_jacobian, shoot, to_deformation, warp, warp_labels

log = logging.getLogger("bandreg")


class UsageError(Exception):
    pass


# --- config handling ----------------------------------------------------------

def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc


def _build(cls, values: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown {what} keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what}: {exc}") from exc


def reg_config(args, extra: dict | None = None) -> RegConfig:
    raw = read_config(args.config) if args.config else {}
    values = {k: v for k, v in raw.items() if k != "train"}
    values.update(extra or {})
    if args.seed is not None:
        values["seed"] = args.seed
    return _build(RegConfig, values, "registration config")


def train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(read_config(args.config).get("train", {}))
    if args.train_config:
        values.update(read_config(args.train_config))
    for key in ("epochs", "batch", "lr", "lam", "optimizer", "input_mode"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if args.seed is not None:
        values["seed"] = args.seed
    return _build(TrainConfig, values, "training config")


def write_manifest(out: Path, args, configs: dict, extra: dict | None = None):
    configs = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in configs.items()}
    import scipy

    manifest = {
        "command": args.command,
        "argv": [a for a in sys.argv[1:]],
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k != "func"},
        "configs": configs,
        "config_hash": config_hash(configs),
        "seed": args.seed,
        "versions": {"bandreg": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    if path.exists():
        existing = json.loads(path.read_text())
        if existing.get("format") == "bandreg-dataset":
            # a dataset directory keeps its own manifest; the run record rides along
            existing["run"] = manifest
            manifest = existing
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _dump(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


# --- plots --------------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_registration(out: Path, S, T, warped, detjac, trace=None):
    plt = _plt()
    n = 5 if trace is not None else 4
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2))
    for ax, img, title in zip(axes, (S, T, warped), ("source", "target", "warped source")):
        ax.imshow(img.T, origin="lower", cmap="gray", vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    im = axes[3].imshow(detjac.T, origin="lower", cmap="coolwarm")
    axes[3].set_title("DetJac")
    axes[3].axis("off")
    fig.colorbar(im, ax=axes[3], fraction=0.046)
    if trace is not None:
        axes[4].plot(trace)
        axes[4].set_xlabel("iteration")
        axes[4].set_title("energy")
    fig.tight_layout()
    fig.savefig(out / "registration.png", dpi=80)
    plt.close(fig)


def plot_losses(out: Path, hist):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(hist.train_loss, label="train")
    if hist.val_loss:
        ax.semilogy(hist.val_loss, label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per example")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=80)
    plt.close(fig)


# --- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.grid < 4:
        raise UsageError("--grid must be >= 4")
    seed = 0 if args.seed is None else args.seed
    images, masks, params = gen_bulleye(args.n, seed, args.grid, args.blur)
    out = args.out
    entries = []
    for i, (img, mask) in enumerate(zip(images, masks)):
        img_rel, mask_rel = f"images/{i:05d}.{args.format}", f"labels/{i:05d}_mask.pgm"
        save_image(out / img_rel, img)
        save_label_pgm(out / mask_rel, mask)
        entries.append({"index": i, "image": img_rel, "mask": mask_rel,
                        "params": {"a_in": params[i].a_in, "b_in": params[i].b_in,
                                   "a_out": params[i].a_out, "b_out": params[i].b_out}})
    # same disjoint pairing as data.make_pairs with this seed
    order = np.random.default_rng(seed + 1).permutation(args.n)
    pair_list = [{"pair_id": k, "source": entries[order[2 * k]]["image"],
                  "target": entries[order[2 * k + 1]]["image"],
                  "source_mask": entries[order[2 * k]]["mask"],
                  "target_mask": entries[order[2 * k + 1]]["mask"]}
                 for k in range(args.n // 2)]
    _dump(out / "pairs.json", {"grid": args.grid, "pairs": pair_list})
    _dump(out / "images.json", {"grid": args.grid, "blur": args.blur, "images": entries})
    write_manifest(out, args, {"synth": {"n": args.n, "grid": args.grid, "blur": args.blur, "seed": seed}})
    log.info("wrote %d images and %d pairs to %s", args.n, len(pair_list), out)
    return 0


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pgm":
        if not path.exists():
            raise FileNotFoundError(f"mask not found: {path}")
        return load_label_pgm(path)
    return np.rint(load_image(path)).astype(np.int64)


def _load_pair(args):
    S, T = load_image(args.source), load_image(args.target)
    if S.shape != T.shape:
        raise UsageError(f"source {S.shape} and target {T.shape} differ in shape")
    return S, T


def _mask_dice(args, psi):
    if not (args.source_mask and args.target_mask):
        return None
    sm, tm = load_mask(args.source_mask), load_mask(args.target_mask)
    return dice(warp_labels(sm, psi, int(max(sm.max(), tm.max())) + 1), tm).to_dict()


def cmd_register(args) -> int:
    S, T = _load_pair(args)
    cfg = reg_config(args, {"grid": list(S.shape), "dim": S.ndim})
    res = register(S, T, cfg)
    psi = to_deformation(shoot(res.v_opt, cfg.operator(), cfg.steps).displacement, S.shape)
    out = args.out
    save_freq_field(out / "fields/v0.blff", res.v_opt)
    save_deformation(out / "fields/deformation.spdf", psi)
    warped = warp(S, psi)
    save_image(out / "images/warped.spim", warped)
    result = res.diagnostics() | {
        "energy_trace": res.energy_trace,
        "velocity": "fields/v0.blff", "deformation": "fields/deformation.spdf",
        "warped": "images/warped.spim", "dice": _mask_dice(args, psi),
    }
    _dump(out / "result.json", result)
    if S.ndim == 2 and not args.no_plots:
        plot_registration(out, S, T, warped, det_jacobian(psi), res.energy_trace)
    write_manifest(out, args, {"reg": cfg})
    log.info("register: ssd %.4g -> %.4g in %d iterations", res.initial_ssd, res.final_ssd, res.iterations)
    return 0


def _read_pairs(path: Path) -> list:
    if not path.exists():
        raise UsageError(f"pairs manifest not found: {path}")
    doc = json.loads(path.read_text())
    root = path.parent
    pairs = []
    for entry in doc["pairs"]:
        masks = [load_mask(root / entry[k]) if k in entry else None
                 for k in ("source_mask", "target_mask")]
        pairs.append(Pair(load_image(root / entry["source"]), load_image(root / entry["target"]),
                          *masks, pair_id=int(entry["pair_id"])))
    if not pairs:
        raise UsageError(f"{path} lists no pairs")
    return pairs


def cmd_make_labels(args) -> int:
    pairs = _read_pairs(args.pairs_manifest)
    if args.limit is not None:
        pairs = pairs[: args.limit]
    grid = pairs[0].source.shape
    cfg = reg_config(args, {"grid": list(grid), "dim": len(grid)})
    workers = args.workers or args.threads or 1
    ds = make_labels(pairs, cfg, workers=workers, seed=cfg.seed, n_test=args.n_test, n_val=args.n_val)
    save_dataset(args.out, ds)
    _dump(args.out / "failures.json", ds.provenance["rejected"])
    write_manifest(args.out, args, {"reg": cfg}, {"accepted": len(ds.examples),
                                                  "rejected": len(ds.provenance["rejected"])})
    log.info("labeled %d of %d pairs", len(ds.examples), len(pairs))
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    tcfg = train_config(args)
    tr, val = ds.subset("train"), ds.subset("val")
    if not tr:
        raise UsageError(f"{args.dataset} has an empty train split")
    w, hist = train(tr, tcfg, val or None)
    meta = {"train_config": tcfg.to_dict(), "reg_config": ds.provenance.get("reg_config"),
            "final_train_loss": hist.train_loss[-1],
            "final_val_loss": hist.val_loss[-1] if hist.val_loss else None,
            "epochs": tcfg.epochs, "seed": tcfg.seed, "n_train": len(tr)}
    save_weights(args.out / "weights.dfw", w, meta)
    _dump(args.out / "history.json", {"train_loss": hist.train_loss, "val_loss": hist.val_loss,
                                      "wall_s": hist.wall_s})
    if not args.no_plots:
        plot_losses(args.out, hist)
    write_manifest(args.out, args, {"train": tcfg})
    log.info("trained %d epochs, final loss %.4g", tcfg.epochs, hist.train_loss[-1])
    return 0


def _weights_reg_config(args, weights_path: Path, grid) -> RegConfig:
    side = Path(str(weights_path) + ".json")
    stored = {}
    if side.exists():
        stored = json.loads(side.read_text()).get("meta", {}).get("reg_config") or {}
    values = dict(stored)
    if args.config:
        values.update({k: v for k, v in read_config(args.config).items() if k != "train"})
    if grid is not None:
        values.update(grid=list(grid), dim=len(grid))
    if args.seed is not None:
        values["seed"] = args.seed
    return _build(RegConfig, values, "registration config")


def cmd_predict(args) -> int:
    S, T = _load_pair(args)
    w = load_weights(args.weights)
    cfg = _weights_reg_config(args, args.weights, S.shape)
    pred = predict(S, T, w, cfg)
    out = args.out
    save_freq_field(out / "fields/v0.blff", pred.v_pre)
    save_deformation(out / "fields/deformation.spdf", pred.deformation)
    warped = warp(S, pred.deformation)
    save_image(out / "images/warped.spim", warped)
    disp = pred.deformation.displacement
    result = {"ssd_before": pred.ssd_before, "ssd_after": pred.ssd_after,
              "min_detjac": pred.min_detjac, "wall_s": pred.wall_s,
              "velocity_norm": float(np.sqrt(np.sum(np.abs(pred.v_pre.coeffs) ** 2))),
              "max_displacement": float(np.abs(disp).max()),
              "velocity": "fields/v0.blff", "deformation": "fields/deformation.spdf",
              "warped": "images/warped.spim", "dice": _mask_dice(args, pred.deformation)}
    _dump(out / "result.json", result)
    if S.ndim == 2 and not args.no_plots:
        plot_registration(out, S, T, warped, det_jacobian(pred.deformation))
    write_manifest(out, args, {"reg": cfg})
    log.info("predict: ssd %.4g -> %.4g", pred.ssd_before, pred.ssd_after)
    return 0


def summarize(rows: list) -> dict:
    def mean(key):
        vals = [float(r[key]) for r in rows if r.get(key) not in (None, "")]
        return float(np.mean(vals)) if vals else None

    out = {"n": len(rows)}
    for key in ("initial_ssd", "final_ssd", "dice_mean", "dice_1", "dice_2", "min_detjac", "wall_ms"):
        out[f"mean_{key}"] = mean(key)
    if out["mean_initial_ssd"]:
        out["ssd_reduction"] = 1.0 - out["mean_final_ssd"] / out["mean_initial_ssd"]
    out["frac_positive_detjac"] = float(np.mean([float(r["min_detjac"]) > 0 for r in rows])) if rows else None
    out["median_wall_ms"] = float(np.median([float(r["wall_ms"]) for r in rows])) if rows else None
    return out


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    w = load_weights(args.weights)
    examples = ds.subset(args.split)
    if not examples:
        raise UsageError(f"split {args.split!r} of {args.dataset} is empty")
    grid = examples[0].source.shape
    cfg = _weights_reg_config(args, args.weights, grid)
    rows = evaluate_predictions(examples, w, cfg)
    opt_rows = []
    for ex in examples:
        d = ex.diagnostics
        row = {"pair_id": ex.pair_id, "method": "optimizer", "wall_ms": 1e3 * d.get("wall_s", float("nan")),
               "initial_ssd": d.get("initial_ssd"), "final_ssd": d.get("final_ssd"),
               "min_detjac": d.get("min_detjac")}
        if ex.source_mask is not None and ex.v_opt is not None:
            psi = to_deformation(shoot(ex.v_opt, cfg.operator(), cfg.steps).displacement, grid)
            rep = dice(warp_labels(ex.source_mask, psi, 3), ex.target_mask, labels=(1, 2))
            row["dice_mean"] = rep.mean
            row.update({f"dice_{k}": v for k, v in rep.per_label.items()})
        opt_rows.append(row)
    if args.timing_pairs:
        for ex in examples[: args.timing_pairs]:
            res = register(ex.source, ex.target, cfg)
            opt_rows.append({"pair_id": ex.pair_id, "method": "register", "wall_ms": 1e3 * res.wall_s,
                             "initial_ssd": res.initial_ssd, "final_ssd": res.final_ssd,
                             "min_detjac": res.min_detjac})
    all_rows = rows + opt_rows
    write_csv(args.out / "report.csv", all_rows)
    summary = {m: summarize([r for r in all_rows if r["method"] == m])
               for m in ("predict", "optimizer", "register") if any(r["method"] == m for r in all_rows)}
    _dump(args.out / "summary.json", summary)
    _dump(args.out / "dice.json", [{k: r.get(k) for k in ("pair_id", "method", "dice_mean", "dice_1", "dice_2")}
                                   for r in all_rows if "dice_mean" in r])
    write_manifest(args.out, args, {"reg": cfg})
    p = summary["predict"]
    log.info("evaluate: %d pairs, mean dice %s, ssd reduction %.3f", p["n"], p["mean_dice_mean"],
             p.get("ssd_reduction", float("nan")))
    return 0


def cmd_report(args) -> int:
    merged, table = [], []
    for run in args.runs:
        csv_path = run / "report.csv"
        if not csv_path.exists():
            raise UsageError(f"no report.csv in {run}")
        rows = read_csv(csv_path)
        for r in rows:
            r["run"] = str(run)
        merged += rows
        for method in sorted({r["method"] for r in rows}):
            sub = [r for r in rows if r["method"] == method]
            table.append({"run": str(run), "method": method, "n": len(sub),
                          "median_wall_ms": float(np.median([float(r["wall_ms"]) for r in sub])),
                          "mean_final_ssd": float(np.mean([float(r["final_ssd"]) for r in sub])),
                          "min_detjac": float(np.min([float(r["min_detjac"]) for r in sub]))})
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    import csv

    with (out / "summary.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(table[0]))
        wr.writeheader()
        wr.writerows(table)
    cols = list(table[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in cols) + " |"
              for r in table]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    write_csv(out / "report.csv", merged)
    if not args.no_plots:
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 3.5))
        labels = [f"{Path(r['run']).name}:{r['method']}" for r in table]
        ax.bar(range(len(table)), [r["median_wall_ms"] for r in table])
        ax.set_xticks(range(len(table)), labels, rotation=30, ha="right")
        ax.set_yscale("log")
        ax.set_ylabel("median wall time (ms)")
        fig.tight_layout()
        fig.savefig(out / "timing.png", dpi=80)
        plt.close(fig)
    write_manifest(out, args, {})
    print((out / "summary.md").read_text(), end="")
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config files)")
    glob.add_argument("--config", type=Path, default=None, help="JSON or TOML config file")
    glob.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    glob.add_argument("--threads", type=int, default=None, help="worker pool size for batch commands")
    glob.add_argument("--verbose", "-v", action="count", default=0)
    glob.add_argument("--no-plots", action="store_true", help="skip PNG output")

    p = argparse.ArgumentParser(prog="bandreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bandreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[glob], help="generate bull-eye phantoms and a pair list")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--grid", type=int, default=100)
    s.add_argument("--blur", type=float, default=1.0)
    s.add_argument("--format", choices=("spim", "pgm"), default="spim")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("register", cmd_register, "optimize an initial velocity for one pair"),
                                 ("predict", cmd_predict, "predict an initial velocity with a trained network")):
        r = sub.add_parser(name, parents=[glob], help=helptext)
        r.add_argument("--source", type=Path, required=True)
        r.add_argument("--target", type=Path, required=True)
        r.add_argument("--source-mask", type=Path, default=None)
        r.add_argument("--target-mask", type=Path, default=None)
        if name == "predict":
            r.add_argument("--weights", type=Path, required=True)
        r.set_defaults(func=func)

    m = sub.add_parser("make-labels", parents=[glob], help="label a pair list with the optimizer")
    m.add_argument("--pairs-manifest", type=Path, required=True)
    m.add_argument("--workers", type=int, default=None)
    m.add_argument("--n-test", type=int, default=None)
    m.add_argument("--n-val", type=int, default=None)
    m.add_argument("--limit", type=int, default=None, help="label only the first N pairs")
    m.set_defaults(func=cmd_make_labels)

    t = sub.add_parser("train", parents=[glob], help="train the twin network on a labeled dataset")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--train-config", type=Path, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--lam", type=float, default=None)
    t.add_argument("--optimizer", choices=("sgd", "momentum"), default=None)
    t.add_argument("--input-mode", choices=("planes", "stacked"), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[glob], help="score predictions on a dataset split")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--weights", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--timing-pairs", type=int, default=0,
                   help="rerun the optimizer on this many pairs for wall-clock comparison")
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", parents=[glob], help="merge evaluate outputs into a summary")
    rp.add_argument("--runs", type=Path, nargs="+", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bandreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, EnergyDiverged, IntegrationDiverged, TrainingDiverged,
            ValueError, KeyError) as exc:
        print(f"bandreg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
