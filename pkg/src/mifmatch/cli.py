"""Command-line entry point: train, match, evaluate, ablate."""
import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .evaluation import (
    RemoteProtocolConfig,
    RetinalProtocolConfig,
    manifest_pairs,
    match_pair,
    perturbation_for,
    plot_matches,
    run_benchmark,
)
from .exceptions import MifError
from .geometry import HomographyConfig, estimate_homography, homography_to_list
from .io import read_image
from .training import TrainConfig, load_model, train

log = logging.getLogger("mifmatch")

AXES = {"lambda": "lambda_lfa", "k": "gmm_k", "layers": "layers", "rotation": None}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(d, key, value):
    parts = key.split(".")
    target = d
    for p in parts[:-1]:
        if not isinstance(target.get(p), dict):
            raise UsageError(f"unknown config key: {key!r}")
        target = target[p]
    if parts[-1] not in target:
        raise UsageError(f"unknown config key: {key!r}")
    target[parts[-1]] = value


def load_config(path=None, overrides=(), seed=None):
    """File values, then MIFMATCH_SEED, then ``key=value`` overrides, then ``--seed``."""
    d = TrainConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                for sub, v in value.items():
                    _apply_override(d, f"{key}.{sub}", v)
            else:
                _apply_override(d, key, value)
    env_seed = os.environ.get("MIFMATCH_SEED")
    if env_seed is not None:
        try:
            d["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"MIFMATCH_SEED must be an integer, got {env_seed!r}") from None
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        _apply_override(d, key.strip(), _parse_value(value))
    if seed is not None:
        d["seed"] = seed
    try:
        return TrainConfig.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("MIFMATCH_SEED")
    return int(env) if env is not None else 0


def _load_checkpoint(path):
    if path is None or not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, cfg, _, _ = load_model(path)
    return model, cfg


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


# --------------------------------------------------------------------------- commands


def cmd_train(args):
    cfg = load_config(args.config, args.set, args.seed)
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out / "train_log.jsonl"
    _write_json(out / "config.json", cfg.to_dict())
    train(args.manifest, cfg, out_dir=out, resume=args.resume, log_path=log_path)
    print(out / "model.ckpt")
    return 0


def cmd_match(args):
    seed = _resolve_seed(args.seed)
    if args.base_only:
        model, matcher, provider_kw = None, "base_knn", {"max_kpts": args.max_kpts, "nms_radius": args.nms_radius}
    else:
        model, cfg = _load_checkpoint(args.checkpoint)
        matcher, provider_kw = "mif", cfg.provider_kwargs()
    img_a = read_image(args.image_a)
    img_b = read_image(args.image_b)
    pm = match_pair(img_a, img_b, matcher, model, provider_kw, ratio=args.ratio)
    idx = np.array([(i, j) for i, j, _ in pm.matches], dtype=np.int64).reshape(-1, 2)
    h, mask = estimate_homography(pm.kpts_a[idx[:, 0]], pm.kpts_b[idx[:, 1]], rng_state=seed)
    doc = {
        "matcher": matcher,
        "seed": seed,
        "homography": homography_to_list(h),
        "n_inliers": int(mask.sum()),
        "matches": [[i, j, round(float(s), 8)] for i, j, s in pm.matches],
        "inliers": mask.astype(int).tolist(),
        "kpts_a": np.round(pm.kpts_a, 4).tolist(),
        "kpts_b": np.round(pm.kpts_b, 4).tolist(),
    }
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    _write_json(f"{prefix}.json", doc)
    plot_matches(f"{prefix}.png", img_a, img_b, pm)
    print(f"{len(pm.matches)} matches, {int(mask.sum())} inliers")
    return 0


def _protocol_cfg(protocol):
    return RetinalProtocolConfig() if protocol == "retinal" else RemoteProtocolConfig()


def _evaluate(args, model, matcher, provider_kw, seed, out=None, plots=None, rotation=None):
    perturbation = perturbation_for(args.protocol, rotation if rotation is not None else args.rotation_range)
    pairs = manifest_pairs(args.manifest, perturbation, args.pseudo_modality, seed=seed)
    return run_benchmark(
        pairs, args.protocol, matcher, model, provider_kw, seed, _protocol_cfg(args.protocol), out=out, plots=plots,
        jobs=args.jobs, meta={"pseudo_modality": args.pseudo_modality, "rotation_range": args.rotation_range},
        rmse_thresholds=args.rmse_thresholds,
    )


def cmd_evaluate(args):
    seed = _resolve_seed(args.seed)
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    if args.matcher == "mif":
        model, cfg = _load_checkpoint(args.checkpoint)
        provider_kw = cfg.provider_kwargs()
    else:
        model, provider_kw = None, {"max_kpts": args.max_kpts, "nms_radius": args.nms_radius}
    _, summary = _evaluate(args, model, args.matcher, provider_kw, seed, out=args.out, plots=args.plots)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _ablation_row(value, summary):
    return {"value": value, "srr": summary.get("srr"), "rmse": summary.get("mean_rmse"), "ms": summary.get("ms")}


def cmd_ablate(args):
    cfg = load_config(args.config, args.set, args.seed)
    for path in (args.manifest, args.test_manifest):
        if not Path(path).is_file():
            raise UsageError(f"manifest not found: {path}")
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    if args.axis == "rotation":
        for v in values:
            try:
                HomographyConfig((-float(v), float(v)))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad rotation value {v!r}: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_args = argparse.Namespace(
        protocol=args.protocol, rotation_range=args.rotation_range, pseudo_modality=args.pseudo_modality,
        manifest=args.test_manifest, jobs=args.jobs, rmse_thresholds=(1, 3, 5, 10),
    )
    rows = []
    shared = None
    for value in values:
        try:
            if args.axis == "rotation":
                if shared is None:
                    shared = train(args.manifest, cfg)
                model, run_cfg, rotation = shared, cfg, float(value)
            else:
                d = cfg.to_dict()
                d[AXES[args.axis]] = value
                run_cfg = TrainConfig.from_dict(d)
                model, rotation = train(args.manifest, run_cfg), None
            _, summary = _evaluate(eval_args, model, "mif", run_cfg.provider_kwargs(), cfg.seed, rotation=rotation)
            rows.append(_ablation_row(value, summary))
        except (MifError, ValueError) as exc:
            log.warning("ablation value %r failed: %s", value, exc)
            rows.append({"value": value, "srr": None, "rmse": None, "ms": None})
    with open(out / f"ablate_{args.axis}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "srr", "rmse", "ms"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    _plot_ablation(out / f"ablate_{args.axis}.png", args.axis, rows)
    print(out / f"ablate_{args.axis}.csv")
    return 0


def _plot_ablation(path, axis, rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r["value"] for r in rows if r["srr"] is not None]
    ys = [r["srr"] for r in rows if r["srr"] is not None]
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("SRR")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------- parser


def _thresholds(text):
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    p = _Parser(prog="mifmatch", description="Keypoint matching across imaging modalities.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="self-supervised training on a manifest of single images")
    t.add_argument("--manifest", required=True, help="JSON-lines manifest of training images")
    t.add_argument("--config", help="JSON file with training settings")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting, dotted keys reach nested ones (repeatable)")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and the step log")
    t.add_argument("--seed", type=int, help="seed (wins over config and MIFMATCH_SEED)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="JSON-lines step log (default OUT_DIR/train_log.jsonl)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="match one image pair and estimate a homography")
    m.add_argument("image_a")
    m.add_argument("image_b")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained model checkpoint")
    src.add_argument("--base-only", action="store_true", help="use raw patch descriptors with a ratio test")
    m.add_argument("--out-prefix", required=True, help="writes PREFIX.json and PREFIX.png")
    m.add_argument("--seed", type=int, help="RANSAC seed")
    m.add_argument("--ratio", type=float, default=0.75, help="ratio-test threshold for --base-only")
    m.add_argument("--max-kpts", type=int, default=512, help="keypoint cap for --base-only")
    m.add_argument("--nms-radius", type=int, default=4, help="suppression radius for --base-only")
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("evaluate", help="score a corpus under a registration protocol")
    _eval_flags(e)
    e.add_argument("--checkpoint", help="trained model checkpoint (needed for --matcher mif)")
    e.add_argument("--matcher", choices=["mif", "base_knn"], default="mif")
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--plots", help="directory for match and ratio-histogram plots")
    e.add_argument("--rmse-thresholds", type=_thresholds, default=(1.0, 3.0, 5.0, 10.0),
                   help="comma-separated RMSE thresholds for the SRR sweep")
    e.add_argument("--seed", type=int, help="pair synthesis and RANSAC seed")
    e.add_argument("--max-kpts", type=int, default=512, help="keypoint cap for base_knn")
    e.add_argument("--nms-radius", type=int, default=4, help="suppression radius for base_knn")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate once per value of one setting")
    a.add_argument("--axis", required=True, choices=sorted(AXES))
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--manifest", required=True, help="training manifest")
    a.add_argument("--test-manifest", required=True, help="evaluation manifest")
    a.add_argument("--config", help="JSON file with base training settings")
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a base setting")
    a.add_argument("--out-dir", required=True, help="writes ablate_AXIS.csv and ablate_AXIS.png")
    a.add_argument("--seed", type=int)
    a.add_argument("--protocol", choices=["retinal", "remote"], default="retinal")
    a.add_argument("--pseudo-modality", choices=["none", "invert_gamma", "blur_noise"], default="invert_gamma")
    a.add_argument("--rotation-range", type=float, default=None, help="test rotation half-range in degrees")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def _eval_flags(e):
    e.add_argument("--manifest", required=True, help="JSON-lines manifest of images or image pairs")
    e.add_argument("--protocol", choices=["retinal", "remote"], default="retinal")
    e.add_argument("--pseudo-modality", choices=["none", "invert_gamma", "blur_noise"], default="invert_gamma",
                   help="appearance change applied to synthesised partners")
    e.add_argument("--rotation-range", type=float, default=None,
                   help="test rotation half-range in degrees for synthesised pairs")
    e.add_argument("--jobs", type=int, default=1, help="pairs evaluated concurrently")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MifError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
