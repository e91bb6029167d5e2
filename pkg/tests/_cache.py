"""Disk cache for expensive test fixtures, keyed by params and package source."""

import hashlib
import os
import pickle
from pathlib import Path

import modsplit

CACHE_DIR = Path(__file__).parent / ".cache"
_SRC = Path(modsplit.__file__).parent

# fixtures depend on each other, so key them all on every behavior-bearing module
ALL_DEPS = ("data", "models", "analysis", "ga", "grad", "composer", "bench")


def _source_hash(dep_modules) -> str:
    h = hashlib.sha256()
    for mod in sorted(dep_modules):
        h.update((_SRC / f"{mod}.py").read_bytes())
    return h.hexdigest()


def cached(name: str, params: str, dep_modules, builder):
    """Build-or-load a pickled fixture; invalidates when any dep module changes."""
    digest = hashlib.sha256(f"{params}|{_source_hash(dep_modules)}".encode()).hexdigest()[:20]
    path = CACHE_DIR / f"{name}-{digest}.pkl"
    if path.exists():
        with open(path, "rb") as f:
            return pickle.load(f)
    value = builder()
    CACHE_DIR.mkdir(exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as f:
        pickle.dump(value, f)
    os.replace(tmp, path)
    return value
