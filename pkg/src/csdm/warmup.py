"""End-to-end pipeline: pretrain, diffusion training, write-back and staged evaluation.

Both the no-warm-up baseline and CSDM start from the same frozen checkpoint and
the same splits, so per-stage comparisons are paired. The evaluation walks the
stages cold -> warm_a -> warm_b -> warm_c; at each warm stage only the item ID
rows are fine-tuned on that stage's interactions, and the test rows are scored.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from csdm import numcore as nc
from csdm.backbones import KINDS, BackboneModel, ContractError, finetune_item_rows, make_batch, predict, train_step
from csdm.data import (
    OLD,
    WARM_A,
    WARM_B,
    WARM_C,
    DatasetSplits,
    EncodedDataset,
    ProtocolError,
    encode_movielens,
    load_movielens,
    split_cold_warm,
    synth_dataset,
)
from csdm.diffusion import DiffusionConfig, DiffusionStack, combined_step, subsequence
from csdm.metrics import auc, logloss, rela_impr

log = logging.getLogger(__name__)

STAGES = ("cold", "warm_a", "warm_b", "warm_c")
STAGE_GROUPS = {"warm_a": WARM_A, "warm_b": WARM_B, "warm_c": WARM_C}
CSV_HEADER = ("run_id", "method", "backbone", "stage", "auc", "relaimpr", "logloss", "seconds")
SOURCES = ("movielens", "synthetic")


@dataclass
class ExperimentConfig:
    """Flat experiment settings; defaults follow the MovieLens-1M setup."""

    backbone: str = "deepfm"
    dim: int = 16
    pretrain_epochs: int = 3
    diffusion_epochs: int = 3
    warm_passes: int = 10
    lr: float = 1e-3
    batch_size: int = 2048
    T: int = 100
    beta: float = 1e-5
    rho: float = 0.1
    s: int = 10
    threshold: int = 200
    k: int = 20
    seed: int = 0
    source: str = "movielens"
    synth_side_weight: float = 0.9
    synth_n_instances: int = 60_000
    record_timings: bool = True

    def __post_init__(self):
        if self.backbone not in KINDS:
            raise ValueError(f"backbone must be one of {KINDS}, got {self.backbone!r}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        for name in ("dim", "batch_size", "threshold", "k", "T", "s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_epochs", "diffusion_epochs", "warm_passes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.rho < 0:
            raise ValueError("lr must be positive and rho non-negative")
        if self.s > self.T:
            raise ValueError("s must not exceed T")

    @classmethod
    def synthetic(cls, **overrides) -> "ExperimentConfig":
        """Defaults sized for the synthetic stand-in dataset."""
        base = dict(source="synthetic", threshold=150, k=10, pretrain_epochs=10, diffusion_epochs=10)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything except the seed, which is appended to run ids separately."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("record_timings")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def run_id(self) -> str:
        return f"{self.digest()}-seed{self.seed}"

    def diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(rho=self.rho, s=self.s, T=self.T, beta=self.beta, hidden_dim=self.dim)


@dataclass
class StageReport:
    stage: str
    auc: float
    rela_impr_vs_baseline: float
    logloss: float
    wall_clock_seconds: float

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC out of range: {self.auc}")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    baseline: list[StageReport]
    csdm: list[StageReport]
    pretrain_losses: list[float] = field(repr=False)
    diffusion_curves: np.ndarray = field(repr=False)
    checkpoint_digest: str = ""


# --------------------------------------------------------------------------- data


def load_data(config: ExperimentConfig, data_dir=None) -> tuple[EncodedDataset, DatasetSplits]:
    if config.source == "synthetic":
        data = synth_dataset(config.seed, side_weight=config.synth_side_weight, n_instances=config.synth_n_instances)
    else:
        if data_dir is None:
            raise FileNotFoundError("MovieLens source needs a data directory")
        data = encode_movielens(load_movielens(data_dir))
    return data, split_cold_warm(data, config.threshold, config.k)


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("pretrain", "diffusion", "warm_base", "warm_csdm", "refresh")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _batches(rows: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(rows)
    for i in range(0, len(perm), batch_size):
        yield perm[i : i + batch_size]


# --------------------------------------------------------------------------- stages


def pretrain(
    config: ExperimentConfig,
    data: EncodedDataset,
    splits: DatasetSplits,
    rng: np.random.Generator | None = None,
) -> tuple[BackboneModel, list[float]]:
    """Train the backbone on old_train and freeze it. Returns the model and per-step losses."""
    rng = rng if rng is not None else _rngs(config.seed)["pretrain"]
    rows = splits.old_train
    if len(rows) == 0:
        raise ProtocolError("old_train is empty")
    model = BackboneModel(config.backbone, data.schema, dim=config.dim, seed=config.seed)
    opt = nc.Adam(model.parameters(), config.lr)
    losses: list[float] = []
    for epoch in range(config.pretrain_epochs):
        for rows_b in _batches(rows, config.batch_size, rng):
            loss = train_step(model, make_batch(data, rows_b), opt)
            if not np.isfinite(loss):
                raise nc.TrainingError(f"non-finite pretraining loss at step {len(losses)}")
            losses.append(loss)
        model.epoch = epoch + 1
    return model.freeze(), losses


def _diffusion_pass(stack, backbone, data, rows, counts, opt, rng, batch_size, curves):
    for rows_b in _batches(rows, batch_size, rng):
        out = combined_step(stack, backbone, data, make_batch(data, rows_b), counts, opt, rng)
        if not np.all(np.isfinite(out)):
            raise nc.TrainingError(f"non-finite diffusion loss at step {len(curves)}")
        curves.append(out)


def train_csdm(
    backbone: BackboneModel,
    config: ExperimentConfig,
    data: EncodedDataset,
    splits: DatasetSplits,
    rng: np.random.Generator | None = None,
) -> tuple[DiffusionStack, np.ndarray]:
    """Fit the diffusion stack against the frozen backbone.

    Returns the stack and an ``[steps, 3]`` array of ``(L, L_ctr, L_diff)``.
    """
    if not backbone.frozen:
        raise ContractError("train_csdm requires a frozen backbone")
    rng = rng if rng is not None else _rngs(config.seed)["diffusion"]
    stack = DiffusionStack(data.schema, config.diffusion_config(), emb_dim=config.dim, gate_threshold=config.threshold, seed=config.seed)
    counts = splits.counts_through(data, OLD)
    opt = nc.Adam(stack.parameters(), config.lr)
    curves: list[tuple[float, float, float]] = []
    for _ in range(config.diffusion_epochs):
        _diffusion_pass(stack, backbone, data, splits.old_train, counts, opt, rng, config.batch_size, curves)
    return stack, np.asarray(curves, dtype=np.float64).reshape(-1, 3)


def write_back(stack: DiffusionStack, backbone: BackboneModel, data: EncodedDataset, counts: np.ndarray, items=None) -> BackboneModel:
    """Copy of ``backbone`` whose item rows are replaced by gated generated embeddings."""
    items = np.arange(data.n_items) if items is None else np.asarray(items)
    out = backbone.copy()
    table = out.item_table.data
    table[items] = stack.warm_embeddings(data, items, table[items], counts[items])
    return out


def _finetune_stage(model: BackboneModel, data, rows, config, rng) -> None:
    table = model.item_table
    nc.reset_moments([table])
    opt = nc.Adam([table], config.lr)
    for _ in range(config.warm_passes):
        for rows_b in _batches(rows, config.batch_size, rng):
            finetune_item_rows(model, make_batch(data, rows_b), opt)


def _score(model: BackboneModel, data: EncodedDataset, test: np.ndarray) -> tuple[float, float]:
    p = predict(model, data, test)
    y = data.label[test]
    return auc(p, y), logloss(p, y)


def staged_eval(
    config: ExperimentConfig,
    data: EncodedDataset,
    splits: DatasetSplits,
    backbone: BackboneModel,
    stack: DiffusionStack,
    rngs: dict[str, np.random.Generator] | None = None,
) -> tuple[list[StageReport], list[StageReport]]:
    """Paired cold/warm evaluation. Returns ``(baseline_reports, csdm_reports)``."""
    rngs = rngs if rngs is not None else _rngs(config.seed)
    test = splits.test
    if len(test) == 0:
        raise ProtocolError("test split is empty")
    for name, g in STAGE_GROUPS.items():
        if len(splits.rows(g)) == 0:
            raise ProtocolError(f"stage {name} has no interactions")
    # moments live on the parameters, so this continues the training run
    opt = nc.Adam(stack.parameters(), config.lr)
    log.info("generation uses %d reverse states (s=%d)", len(subsequence(config.T, config.s)), config.s)

    base_model = backbone.copy()
    csdm_model = None
    raw: dict[str, list[tuple[str, float, float, float]]] = {"baseline": [], "csdm": []}
    for stage in STAGES:
        t0 = time.perf_counter()
        if stage != "cold":
            _finetune_stage(base_model, data, splits.rows(STAGE_GROUPS[stage]), config, rngs["warm_base"])
        a, ll = _score(base_model, data, test)
        raw["baseline"].append((stage, a, ll, time.perf_counter() - t0))

        t0 = time.perf_counter()
        if stage == "cold":
            csdm_model = write_back(stack, backbone, data, splits.counts_through(data, OLD))
        else:
            g = STAGE_GROUPS[stage]
            rows = splits.rows(g)
            _finetune_stage(csdm_model, data, rows, config, rngs["warm_csdm"])
            csdm_model.freeze()
            _diffusion_pass(stack, csdm_model, data, rows, splits.counts_through(data, g), opt, rngs["refresh"], config.batch_size, [])
            csdm_model = write_back(stack, csdm_model, data, splits.counts_through(data, g))
        a, ll = _score(csdm_model, data, test)
        raw["csdm"].append((stage, a, ll, time.perf_counter() - t0))

    def reports(method: str) -> list[StageReport]:
        out = []
        for (stage, a, ll, sec), (_, b, _, _) in zip(raw[method], raw["baseline"]):
            sec = sec if config.record_timings else 0.0
            out.append(StageReport(stage, a, rela_impr(a, b), ll, sec))
        return out

    return reports("baseline"), reports("csdm")


def run_experiment(config: ExperimentConfig, data: EncodedDataset | None = None, splits: DatasetSplits | None = None, data_dir=None) -> ExperimentResult:
    if data is None or splits is None:
        data, splits = load_data(config, data_dir)
    rngs = _rngs(config.seed)
    backbone, losses = pretrain(config, data, splits, rngs["pretrain"])
    digest = backbone.digest()
    stack, curves = train_csdm(backbone, config, data, splits, rngs["diffusion"])
    if backbone.digest() != digest:
        raise ContractError("diffusion training modified the frozen backbone")
    base, csdm = staged_eval(config, data, splits, backbone, stack, rngs)
    return ExperimentResult(config, base, csdm, losses, curves, digest)


# --------------------------------------------------------------------------- output


def results_rows(result: ExperimentResult) -> list[tuple]:
    cfg = result.config
    rows = []
    for method, reports in (("baseline", result.baseline), ("csdm", result.csdm)):
        for r in reports:
            rows.append((cfg.run_id, method, cfg.backbone, r.stage, f"{r.auc:.6f}", f"{r.rela_impr_vs_baseline:.4f}", f"{r.logloss:.6f}", f"{r.wall_clock_seconds:.4f}"))
    return rows


def results_csv(results: list[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for res in results:
        w.writerows(results_rows(res))
    return buf.getvalue()


def plot_data(results: list[ExperimentResult]) -> dict:
    """Stage -> AUC series per method, averaged over runs and also listed per run."""
    out: dict = {"stages": list(STAGES), "runs": {}, "mean": {}}
    for method in ("baseline", "csdm"):
        per_run = {r.config.run_id: [s.auc for s in getattr(r, method)] for r in results}
        out["runs"][method] = per_run
        out["mean"][method] = np.mean(list(per_run.values()), axis=0).tolist() if per_run else []
    return out


def write_results(directory, results: list[ExperimentResult]) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"csv": d / "results.csv", "plot_data": d / "plot_data.json"}
    paths["csv"].write_text(results_csv(results), encoding="utf-8")
    paths["plot_data"].write_text(json.dumps(plot_data(results), indent=1, sort_keys=True))
    return paths
