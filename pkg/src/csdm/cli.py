"""Command-line entry point.

Settings resolve in increasing priority: built-in defaults, a flat JSON config
file (``--config``), ``CSDM_*`` environment variables, then explicit flags.
Every artifact of a run lands in ``<out>/<config-hash>-seed<seed>/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from csdm import numcore as nc
from csdm.backbones import KINDS, BackboneModel, make_batch, predict, train_step
from csdm.data import OLD, CacheFormatError, DatasetEmptyError, ParseError, ProtocolError, read_cache, split_summary, write_cache
from csdm.diffusion import DiffusionStack, combined_step, subsequence
from csdm.warmup import (
    ExperimentConfig,
    load_data,
    plot_data,
    pretrain,
    results_csv,
    run_experiment,
    train_csdm,
    write_back,
    write_results,
    ExperimentResult,
)

log = logging.getLogger("csdm")

ENV_PREFIX = "CSDM_"
PATH_KEYS = ("data_dir", "out")
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    data_dir: Path | None
    out: Path
    echo: dict

    @property
    def run_dir(self) -> Path:
        return self.out / self.experiment.run_id

    @property
    def cache_path(self) -> Path:
        return self.run_dir / "splits.bin"


# --------------------------------------------------------------------------- config resolution


def _coerce(key: str, raw, kind):
    if isinstance(raw, str):
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
            return low in ("1", "true", "yes")
        try:
            return kind(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc
    if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
        return float(raw)
    if kind is bool and not isinstance(raw, bool):
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind in (int, float) and isinstance(raw, bool):
        raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if not isinstance(raw, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(raw).__name__}")
    return raw


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(ExperimentConfig)}


def env_overrides(environ) -> dict:
    """``CSDM_<KEY>`` variables mapped onto config keys (case-insensitive)."""
    known = {k.lower(): k for k in (*ExperimentConfig.keys(), *PATH_KEYS)}
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = known.get(name[len(ENV_PREFIX) :].lower())
        if key is None:
            raise ConfigError(f"unknown configuration variable {name}")
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    merged: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a flat JSON object")
        merged.update(loaded)
    merged.update(env_overrides(environ))
    flag_map = {"seed": args.seed, "backbone": args.backbone, "rho": args.rho, "s": args.s, "data_dir": args.data_dir, "out": args.out}
    merged.update({k: v for k, v in flag_map.items() if v is not None})
    if args.synthetic:
        merged["source"] = "synthetic"

    types = _field_types()
    unknown = set(merged) - set(types) - set(PATH_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    exp_values = {k: _coerce(k, v, types[k]) for k, v in merged.items() if k in types}
    try:
        if exp_values.get("source") == "synthetic":
            exp = ExperimentConfig.synthetic(**exp_values)
        else:
            exp = ExperimentConfig(**exp_values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    data_dir = merged.get("data_dir")
    if exp.source == "movielens":
        if data_dir is None or not Path(data_dir).is_dir():
            raise ConfigError(f"MovieLens data directory not found: {data_dir!r} (pass --data-dir or --synthetic)")
    out = Path(merged.get("out") or "runs")
    return RunConfig(exp, Path(data_dir) if data_dir else None, out, merged)


# --------------------------------------------------------------------------- helpers


def _manifest(rc: RunConfig, extra: dict | None = None) -> None:
    rc.run_dir.mkdir(parents=True, exist_ok=True)
    body = {"run_id": rc.experiment.run_id, "config": rc.experiment.to_dict(), "config_input": {k: str(v) if isinstance(v, Path) else v for k, v in rc.echo.items()}}
    body.update(extra or {})
    (rc.run_dir / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True))


def _load_or_prepare(rc: RunConfig):
    if rc.cache_path.is_file():
        data, splits, _ = read_cache(rc.cache_path)
        return data, splits
    data, splits, _ = _prepare(rc)
    return data, splits


def _prepare(rc: RunConfig):
    exp = rc.experiment
    data, splits = load_data(exp, rc.data_dir)
    rc.run_dir.mkdir(parents=True, exist_ok=True)
    params = {"source": exp.source, "seed": exp.seed, "N": exp.threshold, "K": exp.k}
    if exp.source == "synthetic":
        params.update(side_weight=exp.synth_side_weight, n_instances=exp.synth_n_instances)
    digest = write_cache(rc.cache_path, data, splits, params)
    return data, splits, digest


def _ratio_line(summary: dict) -> str:
    old, new = summary["old_items"], summary["new_items"]
    frac = summary["new_fraction"]
    return f"items: old={old} new={new} new:old={10 * frac:.1f}:{10 * (1 - frac):.1f}"


# --------------------------------------------------------------------------- subcommands


def cmd_prepare_data(rc: RunConfig) -> int:
    data, splits, digest = _prepare(rc)
    summary = split_summary(data, splits)
    print(_ratio_line(summary))
    print("groups: " + " ".join(f"{k}={summary[k]}" for k in ("old_train", "warm_a", "warm_b", "warm_c", "test", "excluded")))
    print(f"cache: {rc.cache_path} sha256={digest}")
    return EXIT_OK


def cmd_pretrain(rc: RunConfig) -> int:
    data, splits = _load_or_prepare(rc)
    model, losses = pretrain(rc.experiment, data, splits)
    model.save(rc.run_dir / "backbone")
    (rc.run_dir / "pretrain_losses.json").write_text(json.dumps(losses))
    print(f"backbone: {rc.run_dir / 'backbone'} sha256={model.digest()}")
    if losses:
        print(f"loss: first={losses[0]:.4f} last={losses[-1]:.4f} steps={len(losses)}")
    return EXIT_OK


def cmd_train_diffusion(rc: RunConfig) -> int:
    data, splits = _load_or_prepare(rc)
    ckpt = rc.run_dir / "backbone"
    if not (ckpt / "manifest.json").is_file():
        model, _ = pretrain(rc.experiment, data, splits)
        model.save(ckpt)
    model = BackboneModel.load(ckpt)
    stack, curves = train_csdm(model, rc.experiment, data, splits)
    stack.save(rc.run_dir / "diffusion")
    np.savetxt(rc.run_dir / "diffusion_curves.csv", curves, delimiter=",", header="L,L_ctr,L_diff", comments="", fmt="%.8g")
    from csdm.plotting import plot_loss_curves

    plot_loss_curves(curves, rc.run_dir / "diffusion_curves.png")
    if len(curves):
        print(f"L_diff: first={curves[0, 2]:.4f} last={curves[-1, 2]:.4f} steps={len(curves)}")
    return EXIT_OK


def cmd_run_all(rc: RunConfig, n_seeds: int = 1) -> int:
    from csdm.plotting import plot_loss_curves, plot_stage_auc

    results: list[ExperimentResult] = []
    base_seed = rc.experiment.seed
    for i in range(n_seeds):
        exp = ExperimentConfig(**{**rc.experiment.to_dict(), "seed": base_seed + i})
        run = RunConfig(exp, rc.data_dir, rc.out, rc.echo)
        data, splits = _load_or_prepare(run)
        print(f"[{exp.run_id}] generation steps: {len(subsequence(exp.T, exp.s))} (s={exp.s})")
        res = run_experiment(exp, data, splits)
        paths = write_results(run.run_dir, [res])
        plot_stage_auc(plot_data([res]), run.run_dir / "stage_auc.png")
        plot_loss_curves(res.diffusion_curves, run.run_dir / "diffusion_curves.png")
        _manifest(run, {"checkpoint_sha256": res.checkpoint_digest})
        results.append(res)
        print(f"[{exp.run_id}] results: {paths['csv']}")
    if n_seeds > 1:
        summary_dir = rc.out / f"{rc.experiment.digest()}-seeds{base_seed}-{base_seed + n_seeds - 1}"
        paths = write_results(summary_dir, results)
        plot_stage_auc(plot_data(results), summary_dir / "stage_auc.png")
        print(f"summary: {paths['csv']}")
    sys.stdout.write(results_csv(results))
    return EXIT_OK


def _time_calls(fn, n: int) -> np.ndarray:
    out = np.empty(n)
    for i in range(n):
        t0 = time.perf_counter()
        fn(i)
        out[i] = time.perf_counter() - t0
    return out


def cmd_bench(rc: RunConfig, n_batches: int = 20) -> int:
    from csdm.plotting import plot_timings

    exp = rc.experiment
    data, splits = _load_or_prepare(rc)
    rng = np.random.default_rng(exp.seed)
    rows = splits.old_train
    batches = [make_batch(data, rng.choice(rows, size=min(exp.batch_size, len(rows)), replace=False)) for _ in range(n_batches)]
    counts = splits.counts_through(data, OLD)

    model = BackboneModel(exp.backbone, data.schema, dim=exp.dim, seed=exp.seed)
    opt = nc.Adam(model.parameters(), exp.lr)
    train_step(model, batches[0], opt)  # warm caches before timing
    measures = [("backbone_step", "", _time_calls(lambda i: train_step(model, batches[i], opt), n_batches))]

    frozen = model.copy().freeze()
    for s in (5, 10):
        cfg = ExperimentConfig(**{**exp.to_dict(), "s": s})
        stack = DiffusionStack(data.schema, cfg.diffusion_config(), emb_dim=exp.dim, gate_threshold=exp.threshold, seed=exp.seed)
        sopt = nc.Adam(stack.parameters(), exp.lr)
        srng = np.random.default_rng(exp.seed)
        combined_step(stack, frozen, data, batches[0], counts, sopt, srng)
        measures.append(("csdm_step", str(s), _time_calls(lambda i: combined_step(stack, frozen, data, batches[i], counts, sopt, srng), n_batches)))
        items = np.arange(data.n_items)
        measures.append(("generation", str(s), _time_calls(lambda i: write_back(stack, frozen, data, counts, items), 3)))

    test = splits.test
    predict(frozen, data, test)
    before = _time_calls(lambda i: predict(frozen, data, test), 5)
    warmed = write_back(stack, frozen, data, counts)
    after = _time_calls(lambda i: predict(warmed, data, test), 5)
    measures += [("inference_before_writeback", "", before), ("inference_after_writeback", "", after)]

    rc.run_dir.mkdir(parents=True, exist_ok=True)
    lines = ["measure,s,mean_seconds,cv,n"]
    for name, s, t in measures:
        cv = float(t.std() / t.mean()) if t.mean() > 0 else 0.0
        lines.append(f"{name},{s},{t.mean():.6f},{cv:.4f},{len(t)}")
    (rc.run_dir / "bench.csv").write_text("\n".join(lines) + "\n")
    step_rows = [(f"{n} s={s}" if s else n, t.mean()) for n, s, t in measures if n.endswith("_step")]
    plot_timings([r[0] for r in step_rows], [r[1] for r in step_rows], rc.run_dir / "bench.png")
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file with experiment settings")
    common.add_argument("--data-dir", help="directory holding ratings.dat, users.dat and movies.dat")
    common.add_argument("--out", help="output root (default: runs)")
    common.add_argument("--seed", type=int)
    common.add_argument("--synthetic", action="store_true", help="use the generated stand-in dataset")
    common.add_argument("--backbone", choices=KINDS)
    common.add_argument("--rho", type=float, help="weight of the diffusion loss")
    common.add_argument("--s", type=int, help="sub-sequence stride used for generation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="csdm", description="Cold-start item embedding warm-up with a supervised diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare-data", parents=[common], help="encode the dataset and write the splits cache")
    sub.add_parser("pretrain", parents=[common], help="train and freeze the backbone")
    sub.add_parser("train-diffusion", parents=[common], help="train the diffusion stack on a frozen backbone")
    p = sub.add_parser("run-all", parents=[common], help="full pipeline with staged evaluation")
    p.add_argument("--n-seeds", type=int, default=1, help="repeat with seeds seed..seed+n-1")
    b = sub.add_parser("bench", parents=[common], help="per-batch timing of backbone vs diffusion steps")
    b.add_argument("--n-batches", type=int, default=20)
    return parser


def main(argv: Sequence[str] | None = None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args, environ)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "prepare-data":
            return cmd_prepare_data(rc)
        if args.command == "pretrain":
            return cmd_pretrain(rc)
        if args.command == "train-diffusion":
            return cmd_train_diffusion(rc)
        if args.command == "run-all":
            if args.n_seeds < 1:
                print("error: --n-seeds must be at least 1", file=sys.stderr)
                return EXIT_USAGE
            return cmd_run_all(rc, args.n_seeds)
        return cmd_bench(rc, args.n_batches)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, DatasetEmptyError, ProtocolError, CacheFormatError, nc.TrainingError, RuntimeError, ValueError) as exc:
        print(f"error during {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
