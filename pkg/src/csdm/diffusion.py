"""Supervised diffusion between item ID embeddings and side information.

The forward marginal is ``z_t = sqrt(a_t) z0 + sqrt(c_t) h + sqrt(1 - a_t) eps``
where ``a_t`` decays from 1 and ``c_t`` grows to exactly 1 at ``t = T``, so the
chain drifts from the (projected) ID embedding towards the side-information
state ``h``. Generation runs the deterministic non-Markovian reverse update
along a strided sub-sequence of steps.

Numeric helpers accept numpy arrays or :class:`~csdm.numcore.Tensor` objects;
the arithmetic is written so both work, which lets training and generation
share one implementation of each formula.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from csdm import numcore as nc
from csdm.backbones import Batch, BackboneModel, ContractError, load_blob
from csdm.data import EncodedDataset, FeatureSchema
from csdm.numcore import Dense, Parameter, Tensor

EpsModel = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Schedule:
    """``alphas[t]`` and ``cs[t]`` for t = 0..T with ``alphas[0] = 1``, ``cs[0] = 0``."""

    T: int
    beta: float
    alphas: np.ndarray = field(repr=False)
    cs: np.ndarray = field(repr=False)


def build_schedule(T: int = 100, beta: float = 1e-5) -> Schedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    steps = np.arange(1, T + 1, dtype=np.float64)
    alphas = np.concatenate([[1.0], (1.0 - beta) ** steps])
    # sqrt(a_t / a_k) summed over k: the sqrt(a_t) factor cancels in the ratio
    partial = np.cumsum(alphas[1:] ** -0.5)
    cs = np.concatenate([[0.0], partial / partial[-1]])
    cs[-1] = 1.0
    return Schedule(int(T), float(beta), alphas, cs)


def _check_t(schedule: Schedule, t, low: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < low) or np.any(t > schedule.T):
        raise ValueError(f"time step out of range [{low}, {schedule.T}]: {t}")
    return t


def _col(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    v = values[t]
    return v[:, None] if v.ndim == 1 else v


def time_encoding(t, dim: int) -> np.ndarray:
    """Sinusoidal position encoding of integer steps, ``[n] -> [n, dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# --------------------------------------------------------------------------- config


@dataclass
class DiffusionConfig:
    rho: float = 0.1
    s: int = 10
    T: int = 100
    beta: float = 1e-5
    dropout_p: float = 0.5
    hidden_dim: int = 16
    time_dim: int = 16
    mlp_width: int = 64
    sigma: tuple[float, ...] | None = None  # per step t = 0..T; None means all zero

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if not 1 <= self.s <= self.T:
            raise ValueError(f"s must lie in [1, T], got {self.s}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    def sigmas(self) -> np.ndarray:
        if self.sigma is None:
            return np.zeros(self.T + 1)
        sig = np.asarray(self.sigma, dtype=np.float64)
        if sig.shape != (self.T + 1,) or np.any(sig < 0):
            raise ValueError("sigma must hold T + 1 non-negative entries")
        return sig


# --------------------------------------------------------------------------- networks


class DenoiserNet:
    """Noise predictor: two dense layers over ``[z_t, time_encoding(t)]``."""

    def __init__(self, rng: np.random.Generator, hidden_dim: int = 16, time_dim: int = 16, width: int = 64, dropout_p: float = 0.0):
        self.hidden_dim = hidden_dim
        self.time_dim = time_dim
        self.dropout_p = dropout_p
        self.l1 = Dense(rng, hidden_dim + time_dim, width, "denoiser.l1")
        self.l2 = Dense(rng, width, hidden_dim, "denoiser.l2")

    def parameters(self) -> list[Parameter]:
        return self.l1.parameters() + self.l2.parameters()

    def forward(self, z_t, t, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        te = time_encoding(np.broadcast_to(t, (z_t.shape[0],)), self.time_dim)
        x = nc.relu(self.l1(nc.concat([z_t, te], axis=1)))
        x = nc.dropout(x, self.dropout_p, training, rng)
        return self.l2(x)

    def __call__(self, z_t: np.ndarray, t) -> np.ndarray:
        return self.forward(Tensor(z_t), t).data


class SideEncoder:
    """Embedding map for side information plus the three projections.

    ``encode`` yields the side hidden state ``h``; ``project`` maps a backbone
    ID embedding into the diffusion space; ``head`` maps back.
    """

    def __init__(self, rng: np.random.Generator, schema: FeatureSchema, emb_dim: int = 16, hidden_dim: int = 16):
        self.side_fields = schema.side_fields
        if not self.side_fields:
            raise ValueError("schema declares no side-information fields")
        self.tables = [
            Parameter(rng.uniform(-0.01, 0.01, size=(schema.fields[i].vocab_size, emb_dim)), f"side.emb.{schema.fields[i].name}")
            for i in self.side_fields
        ]
        self.side_proj = Dense(rng, emb_dim, hidden_dim, "side.proj")
        self.id_proj = Dense(rng, emb_dim, hidden_dim, "id.proj")
        self.head = Dense(rng, hidden_dim, emb_dim, "out.head")

    def parameters(self) -> list[Parameter]:
        return list(self.tables) + self.side_proj.parameters() + self.id_proj.parameters() + self.head.parameters()

    def encode(self, side: Sequence[tuple[np.ndarray, np.ndarray]]) -> Tensor:
        if len(side) != len(self.tables):
            raise ContractError("side information missing for one or more side fields")
        pooled = None
        for table, (idx, w) in zip(self.tables, side):
            e = nc.embedding_bag(table, idx, w)
            pooled = e if pooled is None else pooled + e
        return self.side_proj(pooled * (1.0 / len(self.tables)))

    def project(self, emb) -> Tensor:
        return self.id_proj(emb)


# --------------------------------------------------------------------------- formulas


def forward_sample(z0, h, t, schedule: Schedule, rng: np.random.Generator | None, training: bool = False, dropout_p: float = 0.5, eps=None):
    """Draw ``z_t`` from the closed-form marginal; returns ``(z_t, eps)``.

    In training mode ``h`` passes through inverted dropout first.
    """
    t = _check_t(schedule, t)
    shape = z0.shape
    if eps is None:
        eps = rng.standard_normal(shape)
    if np.ndim(t) == 0:
        t = np.full(shape[0], int(t))
    sa = np.sqrt(_col(schedule.alphas, t))
    sc = np.sqrt(_col(schedule.cs, t))
    sn = np.sqrt(1.0 - _col(schedule.alphas, t))
    if training and dropout_p > 0:
        h_in = nc.dropout(h, dropout_p, True, rng)
        if not isinstance(h, Tensor):
            h_in = h_in.data
    else:
        h_in = h
    return z0 * sa + h_in * sc + eps * sn, eps


def posterior_coeffs(schedule: Schedule, t: int, sigma_t: float = 0.0, t_prev: int | None = None) -> tuple[float, float, float]:
    """``(kappa, lambda, nu)`` of the reverse conditional mean; ``t_prev`` defaults to t - 1."""
    t_prev = t - 1 if t_prev is None else t_prev
    if not 1 <= t <= schedule.T or not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    a, a_prev = schedule.alphas[t], schedule.alphas[t_prev]
    rad = 1.0 - a_prev - sigma_t**2
    if rad < 0:
        raise ValueError(f"sigma_t^2 = {sigma_t**2} exceeds 1 - alpha_prev = {1 - a_prev}")
    kappa = np.sqrt(rad / (1.0 - a))
    lam = np.sqrt(a_prev) - np.sqrt(a) * kappa
    nu = np.sqrt(schedule.cs[t_prev]) - np.sqrt(schedule.cs[t]) * kappa
    return float(kappa), float(lam), float(nu)


def predict_z0_from_eps(eps_hat, z_t, h, t, schedule: Schedule):
    """Denoised estimate ``(z_t - sqrt(c_t) h - sqrt(1 - a_t) eps_hat) / sqrt(a_t)``."""
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(z_t.shape[0], int(t))
    sa = np.sqrt(_col(schedule.alphas, t))
    sc = np.sqrt(_col(schedule.cs, t))
    sn = np.sqrt(1.0 - _col(schedule.alphas, t))
    return (z_t - h * sc - eps_hat * sn) * (1.0 / sa)


def predict_z0(denoiser: EpsModel, z_t: np.ndarray, t: int, h: np.ndarray, schedule: Schedule) -> np.ndarray:
    _check_t(schedule, t)
    return predict_z0_from_eps(denoiser(z_t, t), z_t, h, t, schedule)


def reverse_step(
    denoiser: EpsModel,
    z_t: np.ndarray,
    t: int,
    t_prev: int,
    h: np.ndarray,
    schedule: Schedule,
    sigma_t: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if t_prev >= t:
        raise ValueError(f"reverse step must go backwards, got {t} -> {t_prev}")
    _check_t(schedule, t)
    eps_hat = denoiser(z_t, t)
    g = predict_z0_from_eps(eps_hat, z_t, h, t, schedule)
    if t_prev == 0:
        return g
    a_prev = schedule.alphas[t_prev]
    rad = 1.0 - a_prev - sigma_t**2
    if rad < 0:
        raise ValueError(f"sigma_t^2 = {sigma_t**2} exceeds 1 - alpha_prev = {1 - a_prev}")
    out = np.sqrt(a_prev) * g + np.sqrt(rad) * eps_hat + np.sqrt(schedule.cs[t_prev]) * h
    if sigma_t > 0:
        out = out + sigma_t * rng.standard_normal(z_t.shape)
    return out


def subsequence(T: int, s: int) -> list[int]:
    """Generation steps ``[T, T - s, ..., smallest positive, 0]``."""
    if not 1 <= s <= T:
        raise ValueError(f"need 1 <= s <= T, got s={s}, T={T}")
    return list(range(T, 0, -s)) + [0]


def generate(
    denoiser: EpsModel,
    h: np.ndarray,
    z_start: np.ndarray,
    schedule: Schedule,
    s: int = 1,
    sigmas: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run the reverse chain from ``z_T = sqrt(a_T) z_start + sqrt(c_T) h``."""
    T = schedule.T
    z = np.sqrt(schedule.alphas[T]) * z_start + np.sqrt(schedule.cs[T]) * h
    steps = subsequence(T, s)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        sig = 0.0 if sigmas is None else float(sigmas[t])
        z = reverse_step(denoiser, z, t, t_prev, h, schedule, sig, rng)
    return z


def diffusion_loss(denoiser: DenoiserNet, z0, h, schedule: Schedule, rng: np.random.Generator, dropout_p: float = 0.5, training: bool = True):
    """Noise-regression loss at one uniformly drawn step per row.

    Returns ``(loss, t, z_t, eps_hat)`` so callers can reuse the sample.
    """
    n = z0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    z_t, eps = forward_sample(z0, h, t, schedule, rng, training=training, dropout_p=dropout_p)
    eps_hat = denoiser.forward(z_t, t, training=training, rng=rng)
    return nc.mse(eps_hat, eps), t, z_t, eps_hat


def frequency_gate(counts, threshold: float) -> np.ndarray:
    n = np.asarray(counts, dtype=np.float64)
    return n / (n + float(threshold))


# --------------------------------------------------------------------------- stack


class DiffusionStack:
    """Everything trained in the diffusion stage, plus the fixed schedule."""

    def __init__(self, schema: FeatureSchema, config: DiffusionConfig, emb_dim: int = 16, gate_threshold: float = 200.0, seed: int = 0):
        self.schema = schema
        self.config = config
        self.emb_dim = emb_dim
        self.gate_threshold = float(gate_threshold)
        self.seed = seed
        self.schedule = build_schedule(config.T, config.beta)
        rng = np.random.default_rng(seed)
        self.side = SideEncoder(rng, schema, emb_dim, config.hidden_dim)
        self.denoiser = DenoiserNet(rng, config.hidden_dim, config.time_dim, config.mlp_width, config.dropout_p)

    def parameters(self) -> list[Parameter]:
        return self.side.parameters() + self.denoiser.parameters()

    def hidden_side(self, data: EncodedDataset, items: np.ndarray) -> Tensor:
        return self.side.encode(data.side_info(items))

    def generate_z0(self, data: EncodedDataset, items: np.ndarray, cold: np.ndarray) -> np.ndarray:
        h = self.hidden_side(data, items).data
        z_start = self.side.project(Tensor(cold)).data
        return generate(self.denoiser, h, z_start, self.schedule, self.config.s, self.config.sigmas())

    def warm_embeddings(self, data: EncodedDataset, items: np.ndarray, cold: np.ndarray, counts: np.ndarray) -> np.ndarray:
        """Frequency-gated blend of the current rows and the generated embeddings."""
        z0_hat = self.generate_z0(data, items, cold)
        gen = self.side.head(Tensor(z0_hat)).data
        gamma = frequency_gate(counts, self.gate_threshold)[:, None]
        return gamma * cold + (1.0 - gamma) * gen

    def manifest(self) -> dict:
        cfg = asdict(self.config)
        cfg["sigma"] = None if self.config.sigma is None else list(self.config.sigma)
        return {
            "schema": self.schema.to_json(),
            "schema_hash": self.schema.digest(),
            "config": cfg,
            "schedule": {"T": self.schedule.T, "beta": self.schedule.beta},
            "emb_dim": self.emb_dim,
            "gate_threshold": self.gate_threshold,
            "seed": self.seed,
            "params": [{"name": p.name, "shape": list(p.shape)} for p in self.parameters()],
        }

    def state_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in self.parameters())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        (d / "params.bin").write_bytes(self.state_bytes())

    @classmethod
    def load(cls, directory) -> "DiffusionStack":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        cfg = dict(man["config"])
        if cfg.get("sigma") is not None:
            cfg["sigma"] = tuple(cfg["sigma"])
        stack = cls(FeatureSchema.from_json(man["schema"]), DiffusionConfig(**cfg), man["emb_dim"], man["gate_threshold"], man["seed"])
        load_blob(stack.parameters(), man["params"], (d / "params.bin").read_bytes())
        return stack


def combined_step(
    stack: DiffusionStack,
    backbone: BackboneModel,
    data: EncodedDataset,
    batch: Batch,
    counts: np.ndarray,
    optimizer: nc.Adam,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """One Adam update of the diffusion stack on ``L_ctr + rho * L_diff``.

    The backbone must be frozen: it only scores the batch with the item ID
    embedding replaced by the gated one-step denoised embedding.
    """
    if not backbone.frozen:
        raise ContractError("combined_step requires a frozen backbone")
    cfg = stack.config
    items = batch.item
    cold = backbone.item_table.data[items]
    z0 = stack.side.project(Tensor(cold))
    h = stack.hidden_side(data, items)
    l_diff, t, z_t, eps_hat = diffusion_loss(stack.denoiser, z0, h, stack.schedule, rng, cfg.dropout_p)
    g = predict_z0_from_eps(eps_hat, z_t, h, t, stack.schedule)
    gamma = frequency_gate(counts[items], stack.gate_threshold)[:, None]
    w = stack.side.head(g) * (1.0 - gamma) + cold * gamma
    l_ctr = backbone.loss(batch, item_embedding=w)
    total = l_ctr + l_diff * cfg.rho
    total.backward()
    optimizer.step()
    return float(total.data), float(l_ctr.data), float(l_diff.data)
