from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from csdm.data import split_cold_warm, synth_dataset


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def write_movielens(directory: Path, ratings, users=None, movies=None) -> Path:
    """Write a tiny MovieLens-format dataset; ``ratings`` are (user, movie, rating, ts) tuples."""
    directory.mkdir(parents=True, exist_ok=True)
    ratings = list(ratings)
    if users is None:
        uids = sorted({r[0] for r in ratings})
        users = [(u, "M" if u % 2 else "F", (1, 18, 25, 35)[u % 4], u % 21, "00000") for u in uids]
    if movies is None:
        mids = sorted({r[1] for r in ratings})
        genres = ("Action", "Comedy|Drama", "Children's|Animation|Comedy", "Sci-Fi")
        movies = [(m, f"Movie {m} ({1950 + 7 * (m % 7)})", genres[m % 4]) for m in mids]
    (directory / "ratings.dat").write_text("\n".join("::".join(map(str, r)) for r in ratings) + "\n", encoding="latin-1")
    (directory / "users.dat").write_text("\n".join("::".join(map(str, u)) for u in users) + "\n", encoding="latin-1")
    (directory / "movies.dat").write_text("\n".join("::".join(map(str, m)) for m in movies) + "\n", encoding="latin-1")
    return directory


@pytest.fixture(scope="session")
def synth():
    data = synth_dataset(0, n_instances=20_000)
    return data, split_cold_warm(data, 50, 5)


@pytest.fixture(scope="session")
def tiny_synth():
    data = synth_dataset(1, n_users=80, n_items=60, n_instances=4_000)
    return data, split_cold_warm(data, 60, 5)
