"""Command-line surface: decode, loss, gradcheck, experiment, metrics, simulate.

All commands take a JSON run configuration (--config); unknown keys are
rejected and every omitted field is filled with its documented default, so
the effective config is fully explicit. Exit codes: 0 success, 1 check
failed, 2 input/config error, 3 degenerate distribution, 4 numeric
divergence during training.

STAR_KIT_THREADS caps how many models the experiment runner trains
concurrently (default 1).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import gradients, losses, metrics, synthetic
from .errors import (
    ConfigError,
    DegenerateDistribution,
    NonFiniteLoss,
    ShapeMismatch,
    StarkitError,
)
from .heatmap import Grid, read_heatmap_csv, soft_argmax
from .moments import anisotropy_ratio, covariance_unbiased, eigen2x2

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_DEGENERATE = 3
EXIT_NONFINITE = 4

DEFAULT_CONFIG = {
    "seed": 0,
    "grid": {"width": 36, "height": 36},
    "loss": {
        "distance": {"kind": "smooth_l1", "s": 0.01, "omega": 10.0, "epsilon": 2.0},
        "restriction": {"mode": "value", "w": 1.0},
        "dr_weight": 0.0,
        "dr_sigma": 1.0,
        "lambda_floor": 1e-5,
    },
    "synthetic": {
        "contour": {
            "kind": "ellipse",
            "center": [17.5, 17.5],
            "semi_axes": [7.0, 5.0],
            "curvature": 0.1,
            "half_width": 7.0,
            "landmark_count": 8,
        },
        "noise": {
            "sigma_tangent": 2.0,
            "sigma_normal": 0.5,
            "ambiguous": [True, False, True, False, True, False, True, False],
        },
        "n_train": 120,
        "n_test": 40,
        "n_models": 5,
        "optimizer": {
            "kind": "adam",
            "learning_rate": 0.01,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "epochs": 48,
            "batch_size": 64,
            "seed": 100,
            "init_sigma": 2.5,
        },
    },
    "metrics": {
        "normalizer": {"kind": "constant", "i": 0, "j": 1, "value": 1.0},
        "fr_threshold": 0.10,
        "auc_threshold": 0.10,
        "resolution": 1000,
    },
}


def _merge_with_defaults(defaults, user, path=""):
    """Fill omitted keys from defaults; reject keys not in the schema."""
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    merged = {}
    for key, default_value in defaults.items():
        if key in user:
            given = user[key]
            if isinstance(default_value, dict):
                merged[key] = _merge_with_defaults(default_value, given, f"{path}{key}.")
            else:
                merged[key] = given
        else:
            merged[key] = copy.deepcopy(default_value)
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under {path or '<root>'}")
    return merged


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    """Read, validate, and materialize a run configuration."""
    if path is None:
        user = {}
    else:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = _merge_with_defaults(DEFAULT_CONFIG, user)
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


def parse_distance(section: dict) -> losses.DistanceKind:
    kind = section["kind"]
    if kind == "l1":
        return losses.L1()
    if kind == "l2":
        return losses.L2()
    if kind == "smooth_l1":
        return losses.SmoothL1(s=float(section["s"]))
    if kind == "wing":
        return losses.Wing(omega=float(section["omega"]), epsilon=float(section["epsilon"]))
    raise ConfigError(f"unknown distance kind {kind!r}")


def parse_restriction(section: dict) -> losses.RestrictionMode:
    mode = section["mode"]
    if mode == "value":
        return losses.ValueRestriction(w=float(section["w"]))
    if mode == "detach":
        return losses.DetachRestriction()
    if mode == "none":
        return losses.NoRestriction()
    raise ConfigError(f"unknown restriction mode {mode!r}")


def parse_loss_config(cfg: dict) -> losses.LossConfig:
    section = cfg["loss"]
    try:
        return losses.LossConfig(
            distance=parse_distance(section["distance"]),
            restriction=parse_restriction(section["restriction"]),
            dr_weight=float(section["dr_weight"]),
            dr_sigma=float(section["dr_sigma"]),
            lambda_floor=float(section["lambda_floor"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad loss config: {exc}") from exc


def parse_grid(cfg: dict) -> Grid:
    try:
        return Grid(width=int(cfg["grid"]["width"]), height=int(cfg["grid"]["height"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid config: {exc}") from exc


def parse_synthetic(cfg: dict) -> tuple[synthetic.DatasetConfig, synthetic.OptimizerConfig, int]:
    section = cfg["synthetic"]
    c = section["contour"]
    try:
        contour = synthetic.ContourSpec(
            kind=c["kind"],
            center=tuple(float(v) for v in c["center"]),
            semi_axes=tuple(float(v) for v in c["semi_axes"]) if c["kind"] == "ellipse" else None,
            curvature=float(c["curvature"]) if c["kind"] == "parabola" else None,
            half_width=float(c["half_width"]) if c["kind"] == "parabola" else None,
            landmark_count=int(c["landmark_count"]),
        )
        n = section["noise"]
        noise = synthetic.NoiseModel(
            sigma_tangent=float(n["sigma_tangent"]),
            sigma_normal=float(n["sigma_normal"]),
            ambiguous=tuple(bool(v) for v in n["ambiguous"]),
        )
        o = section["optimizer"]
        opt = synthetic.OptimizerConfig(
            kind=o["kind"],
            learning_rate=float(o["learning_rate"]),
            beta1=float(o["beta1"]),
            beta2=float(o["beta2"]),
            eps=float(o["eps"]),
            epochs=int(o["epochs"]),
            batch_size=int(o["batch_size"]),
            seed=int(o["seed"]),
            init_sigma=float(o["init_sigma"]),
        )
        dataset_cfg = synthetic.DatasetConfig(
            contour=contour,
            noise=noise,
            grid=parse_grid(cfg),
            n_train=int(section["n_train"]),
            n_test=int(section["n_test"]),
            seed=int(cfg["seed"]),
        )
        return dataset_cfg, opt, int(section["n_models"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad synthetic config: {exc}") from exc


def parse_normalizer(cfg: dict) -> metrics.Normalizer:
    section = cfg["metrics"]["normalizer"]
    try:
        return metrics.Normalizer(
            kind=section["kind"],
            i=int(section["i"]),
            j=int(section["j"]),
            value=float(section["value"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad normalizer config: {exc}") from exc


def _threads() -> int:
    raw = os.environ.get("STAR_KIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _print_json(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _write_json(doc: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# ---------------------------------------------------------------------------
# subcommands

def cmd_decode(args) -> int:
    h = read_heatmap_csv(args.heatmap)
    mu = soft_argmax(h)
    sigma = covariance_unbiased(h, mu)  # may raise DegenerateDistribution
    eig = eigen2x2(sigma)
    _print_json(
        {
            "mu": [mu[0], mu[1]],
            "sigma_ub": {"xx": sigma.xx, "xy": sigma.xy, "yy": sigma.yy},
            "lambda1": eig.lambda1,
            "lambda2": eig.lambda2,
            "v1": eig.v1.tolist(),
            "v2": eig.v2.tolist(),
            "anisotropy_ratio": anisotropy_ratio(eig),
        }
    )
    return EXIT_OK


def cmd_loss(args) -> int:
    cfg = load_config(args.config, args.seed)
    loss_cfg = parse_loss_config(cfg)
    h = read_heatmap_csv(args.heatmap)
    loss, parts = losses.heatmap_objective(h, (args.target_x, args.target_y), loss_cfg)
    _print_json({"loss": loss, "parts": parts})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed)
    loss_cfg = parse_loss_config(cfg)
    grid = parse_grid(cfg)
    report = gradients.grad_check(loss_cfg, grid, seeds=args.seeds, tolerance=args.tolerance)
    _print_json(report.to_dict())
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed)
    dataset_cfg, _, _ = parse_synthetic(cfg)
    ds = synthetic.generate_dataset(
        dataset_cfg.contour, dataset_cfg.noise, dataset_cfg.n_train, dataset_cfg.grid,
        dataset_cfg.seed,
    )
    header = (
        ["landmark", "sample", "ambiguous", "true_x", "true_y", "ann_x", "ann_y",
         "tangent_x", "tangent_y"]
        + [f"f{i}" for i in range(synthetic.FEATURE_DIM)]
    )
    rows = []
    for k, group in enumerate(ds.samples):
        for i, s in enumerate(group):
            rows.append(
                [k, i, ds.noise.ambiguous[k], s.true_point[0], s.true_point[1],
                 s.annotation[0], s.annotation[1], s.tangent[0], s.tangent[1]]
                + list(s.feature)
            )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "dataset.csv")
        _write_csv(path, header, rows)
        _print_json({"written": path, "landmarks": ds.landmark_count,
                     "samples_per_landmark": ds.samples_per_landmark})
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(_csv_cell(v) for v in row))
    return EXIT_OK


def _history_rows(history: synthetic.TrainHistory) -> list[list]:
    return [
        [e, history.loss[e], history.mean_lambda1[e], history.mean_lambda2[e]]
        for e in range(len(history.loss))
    ]


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, args.seed)
    loss_cfg = parse_loss_config(cfg)
    dataset_cfg, opt, n_models = parse_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    threads = _threads()

    if args.kind == "stability":
        if n_models < 2:
            raise ConfigError("stability needs n_models >= 2")
        rep_star, _ = synthetic.stability_experiment(
            dataset_cfg, loss_cfg, opt, n_models=n_models, objective="star",
            threads=threads,
        )
        rep_base, _ = synthetic.stability_experiment(
            dataset_cfg, loss_cfg, opt, n_models=n_models, objective="regression",
            threads=threads,
        )
        header = ["loss", "landmark", "ambiguous", "mean_tangential", "median_tangential",
                  "mean_normal", "median_normal", "mean_total", "median_total"]
        rows = []
        for name, rep in (("star", rep_star), ("baseline", rep_base)):
            for entry in rep.per_landmark_summary():
                rows.append([name] + list(entry.values()))
        _write_csv(os.path.join(args.out, "stability.csv"), header, rows)
        star_med = rep_star.median_tangential(ambiguous_only=True)
        base_med = rep_base.median_tangential(ambiguous_only=True)
        summary = {
            "kind": "stability",
            "n_models": n_models,
            "median_tangential_ambiguous": {"star": star_med, "baseline": base_med},
            "star_lower": star_med < base_med,
            "star_at_least_10pct_lower": star_med <= 0.9 * base_med,
        }
    elif args.kind == "anisotropy":
        train_ds = synthetic.generate_dataset(
            dataset_cfg.contour, dataset_cfg.noise, dataset_cfg.n_train, dataset_cfg.grid,
            dataset_cfg.seed,
        )
        test_ds = synthetic.generate_dataset(
            dataset_cfg.contour, dataset_cfg.noise, dataset_cfg.n_test, dataset_cfg.grid,
            dataset_cfg.seed + 1,
        )
        model, _ = synthetic.train(train_ds, loss_cfg, opt, objective="regression")
        rep = synthetic.anisotropy_experiment(model, test_ds)
        rows = [
            [k, bool(rep.ambiguous[k]), rep.mean_ratio[k], int(rep.excluded[k])]
            for k in range(len(rep.mean_ratio))
        ]
        _write_csv(
            os.path.join(args.out, "anisotropy.csv"),
            ["landmark", "ambiguous", "mean_ratio", "excluded"],
            rows,
        )
        amb, iso = rep.group_means()
        summary = {
            "kind": "anisotropy",
            "mean_ratio": {"ambiguous": amb, "isotropic": iso},
            "excluded_samples": int(rep.excluded.sum()),
            "ambiguous_exceeds_isotropic": amb > iso,
            "factor": amb / iso,
        }
    elif args.kind == "restriction":
        rep = synthetic.restriction_experiment(dataset_cfg, loss_cfg, opt)
        rows = []
        for name, hist in (("none", rep.history_none), ("value", rep.history_value)):
            for row in _history_rows(hist):
                rows.append([name] + row)
        _write_csv(
            os.path.join(args.out, "restriction.csv"),
            ["restriction", "epoch", "loss", "mean_lambda1", "mean_lambda2"],
            rows,
        )
        summary = {
            "kind": "restriction",
            "final_mean_lambda1": {
                "no_restriction": rep.final_lambda1_none,
                "value_restriction": rep.final_lambda1_value,
            },
            "no_restriction_exceeds": rep.inflation_confirmed,
        }
    else:
        raise ConfigError(f"unknown experiment kind {args.kind!r}")

    _write_json(summary, os.path.join(args.out, "summary.json"))
    _print_json(summary)
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = load_config(args.config, args.seed)
    norm = parse_normalizer(cfg)
    section = cfg["metrics"]
    preds = metrics.read_annotations(args.pred)
    gts = metrics.read_annotations(args.gt)
    report = metrics.evaluate(
        preds, gts, norm,
        threshold=float(section["fr_threshold"]),
        resolution=int(section["resolution"]),
    )
    _print_json(report.to_dict())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(report.to_dict(), os.path.join(args.out, "metrics.json"))
        _write_csv(
            os.path.join(args.out, "ced.csv"),
            ["threshold", "fraction"],
            [[t, f] for t, f in report.ced],
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="starkit",
        description="Heatmap landmark toolkit: decoding, adaptive losses, "
        "gradient checks, synthetic ambiguity experiments, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="moments and eigen summary of a heatmap CSV")
    p.add_argument("heatmap")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("loss", help="objective parts for a heatmap CSV and target")
    p.add_argument("heatmap")
    p.add_argument("target_x", type=float)
    p.add_argument("target_y", type=float)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run a synthetic experiment")
    p.add_argument("kind", choices=["stability", "anisotropy", "restriction"])
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("metrics", help="NME/FR/AUC for prediction vs ground truth JSON")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("simulate", help="dump a synthetic dataset as CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DegenerateDistribution as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, ShapeMismatch, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except StarkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
