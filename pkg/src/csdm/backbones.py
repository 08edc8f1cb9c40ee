"""Embedding & MLP CTR scorers: DeepFM, Wide&Deep and DCN.

All three share one embedding layer (one ``[vocab, d]`` table per field) so the
item ID rows can be swapped out by the warm-up machinery without touching the
rest of the network.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from csdm import numcore as nc
from csdm.data import EncodedDataset, FeatureSchema
from csdm.numcore import Dense, Parameter, Tensor

KINDS = ("deepfm", "widedeep", "dcn")


class ContractError(RuntimeError):
    pass


@dataclass
class Batch:
    fields: list[tuple[np.ndarray, np.ndarray]]
    label: np.ndarray
    user: np.ndarray
    item: np.ndarray

    def __len__(self) -> int:
        return len(self.label)


def make_batch(data: EncodedDataset, rows: np.ndarray) -> Batch:
    rows = np.asarray(rows)
    users, items = data.user[rows], data.item[rows]
    fields = [data.field_indices(i, users, items) for i in range(len(data.schema.fields))]
    return Batch(fields, data.label[rows].astype(np.float64), users, items)


def _lookup(table: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    if idx.shape[1] == 1:
        return nc.embedding_bag(table, idx[:, 0])
    return nc.embedding_bag(table, idx, w)


def fm_second_order(field_embs: Tensor) -> Tensor:
    """Sum of pairwise inner products over fields, ``[n, F, d] -> [n]``."""
    if field_embs.shape[1] < 2:
        raise ValueError("FM interaction needs at least two fields")
    summed = nc.reduce_sum(field_embs, axis=1)
    sq_of_sum = nc.reduce_sum(nc.square(summed), axis=1)
    sum_of_sq = nc.reduce_sum(nc.reduce_sum(nc.square(field_embs), axis=2), axis=1)
    return (sq_of_sum - sum_of_sq) * 0.5


class BackboneModel:
    def __init__(
        self,
        kind: str,
        schema: FeatureSchema,
        dim: int = 16,
        hidden: Sequence[int] = (16, 16),
        n_cross: int = 2,
        seed: int = 0,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown backbone {kind!r}; choose from {KINDS}")
        self.kind = kind
        self.schema = schema
        self.dim = dim
        self.hidden = tuple(hidden)
        self.n_cross = n_cross
        self.seed = seed
        self.frozen = False
        self.epoch = 0
        rng = np.random.default_rng(seed)

        self.embeddings = [
            Parameter(rng.uniform(-0.01, 0.01, size=(f.vocab_size, dim)), f"emb.{f.name}") for f in schema.fields
        ]
        n_fields = len(schema.fields)
        flat = n_fields * dim
        self.mlp: list[Dense] = []
        width = flat
        for i, h in enumerate(self.hidden):
            self.mlp.append(Dense(rng, width, h, f"mlp{i}"))
            width = h
        self.first_order: list[Parameter] = []
        self.cross: list[tuple[Parameter, Parameter]] = []
        self.bias = Parameter(np.zeros(1), "bias")
        if kind in ("deepfm", "widedeep"):
            self.first_order = [Parameter(np.zeros((f.vocab_size, 1)), f"lin.{f.name}") for f in schema.fields]
            self.head = Dense(rng, width, 1, "head")
        else:
            for i in range(n_cross):
                w = Parameter(nc.glorot_uniform(rng, flat, 1), f"cross{i}.w")
                self.cross.append((w, Parameter(np.zeros(flat), f"cross{i}.b")))
            self.head = Dense(rng, flat + width, 1, "head")

    # parameters -----------------------------------------------------------

    @property
    def item_table(self) -> Parameter:
        return self.embeddings[self.schema.item_field]

    def parameters(self) -> list[Parameter]:
        ps = list(self.embeddings) + list(self.first_order)
        for layer in self.mlp:
            ps += layer.parameters()
        for w, b in self.cross:
            ps += [w, b]
        ps += self.head.parameters() + [self.bias]
        return ps

    def freeze(self) -> "BackboneModel":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False
        return self

    @contextlib.contextmanager
    def item_rows_trainable(self):
        """Temporarily let gradients reach only the item ID embedding table."""
        table = self.item_table
        table.requires_grad = True
        try:
            yield table
        finally:
            table.requires_grad = not self.frozen

    def copy(self) -> "BackboneModel":
        clone = BackboneModel(self.kind, self.schema, self.dim, self.hidden, self.n_cross, self.seed)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.data[...] = src.data
        clone.epoch = self.epoch
        if self.frozen:
            clone.freeze()
        return clone

    # forward --------------------------------------------------------------

    def embed(self, batch: Batch, item_embedding: Tensor | np.ndarray | None = None) -> Tensor:
        """Field embeddings ``[n, F, d]``; ``item_embedding`` replaces the item ID rows."""
        parts = []
        for pos, (idx, w) in enumerate(batch.fields):
            if pos == self.schema.item_field and item_embedding is not None:
                parts.append(nc._wrap(item_embedding))
            else:
                parts.append(_lookup(self.embeddings[pos], idx, w))
        return nc.stack(parts, axis=1)

    def _first_order(self, batch: Batch) -> Tensor:
        terms = [_lookup(t, idx, w) for t, (idx, w) in zip(self.first_order, batch.fields)]
        return nc.reduce_sum(nc.concat(terms, axis=1), axis=1)

    def _deep(self, x: Tensor) -> Tensor:
        for layer in self.mlp:
            x = nc.relu(layer(x))
        return x

    def logits(self, batch: Batch, item_embedding=None) -> Tensor:
        v = self.embed(batch, item_embedding)
        n = v.shape[0]
        flat = nc.reshape(v, (n, -1))
        if self.kind == "deepfm":
            out = self._first_order(batch) + fm_second_order(v) + nc.reshape(self.head(self._deep(flat)), (n,))
        elif self.kind == "widedeep":
            out = self._first_order(batch) + nc.reshape(self.head(self._deep(flat)), (n,))
        else:
            x = flat
            for w, b in self.cross:
                x = flat * nc.matmul(x, w) + b + x
            out = nc.reshape(self.head(nc.concat([x, self._deep(flat)], axis=1)), (n,))
        return out + self.bias

    def forward(self, batch: Batch, item_embedding=None) -> np.ndarray:
        return nc.sigmoid(self.logits(batch, item_embedding)).data

    def loss(self, batch: Batch, item_embedding=None) -> Tensor:
        return nc.bce_with_logits(self.logits(batch, item_embedding), batch.label)

    # persistence ----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "schema": self.schema.to_json(),
            "schema_hash": self.schema.digest(),
            "dim": self.dim,
            "hidden": list(self.hidden),
            "n_cross": self.n_cross,
            "seed": self.seed,
            "epoch": self.epoch,
            "frozen": self.frozen,
            "params": [{"name": p.name, "shape": list(p.shape)} for p in self.parameters()],
        }

    def state_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in self.parameters())

    def digest(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        (d / "params.bin").write_bytes(self.state_bytes())

    @classmethod
    def load(cls, directory) -> "BackboneModel":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        model = cls(man["kind"], FeatureSchema.from_json(man["schema"]), man["dim"], man["hidden"], man["n_cross"], man["seed"])
        if model.schema.digest() != man["schema_hash"]:
            raise ValueError("checkpoint schema hash mismatch")
        load_blob(model.parameters(), man["params"], (d / "params.bin").read_bytes())
        model.epoch = man["epoch"]
        if man["frozen"]:
            model.freeze()
        return model


def load_blob(params: Sequence[Parameter], layout: list[dict], blob: bytes) -> None:
    off = 0
    if [s["name"] for s in layout] != [p.name for p in params]:
        raise ValueError("checkpoint parameter order does not match the model")
    for p, s in zip(params, layout):
        if list(p.shape) != s["shape"]:
            raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {s['shape']}")
        n = int(np.prod(s["shape"]))
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(p.shape)
        off += 8 * n
    if off != len(blob):
        raise ValueError("checkpoint blob has trailing bytes")


def train_step(model: BackboneModel, batch: Batch, optimizer: nc.Adam) -> float:
    """One Adam update on mean BCE; returns the loss before the update."""
    if model.frozen:
        raise ContractError("cannot train a frozen backbone")
    loss = model.loss(batch)
    loss.backward()
    optimizer.step()
    return float(loss.data)


def finetune_item_rows(model: BackboneModel, batch: Batch, optimizer: nc.Adam) -> float:
    """Update only the item ID embedding table; every other parameter stays fixed."""
    with model.item_rows_trainable():
        loss = model.loss(batch)
        loss.backward()
        optimizer.step()
    return float(loss.data)


def predict(model: BackboneModel, data: EncodedDataset, rows: np.ndarray, batch_size: int = 8192) -> np.ndarray:
    out = [model.forward(make_batch(data, rows[i : i + batch_size])) for i in range(0, len(rows), batch_size)]
    return np.concatenate(out) if out else np.empty(0)
