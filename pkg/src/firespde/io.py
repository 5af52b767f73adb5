"""File helpers shared by the command-line steps: chains, designs, predictions, manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .mcmc import Chain, read_chain_csv, write_chain_csv

__all__ = [
    "save_chain",
    "load_chain",
    "write_design_csv",
    "read_design_csv",
    "cell_ids",
    "read_prediction_csv",
    "file_digest",
    "write_manifest",
]


def _paths(prefix):
    prefix = str(prefix)
    return Path(prefix + "_chain.csv"), Path(prefix + "_latent.csv"), Path(prefix + "_meta.json")


def save_chain(chain: Chain, prefix) -> list:
    """Scalar CSV, latent CSV and a JSON sidecar for ``meta``; returns the paths."""
    scalar, latent, meta = _paths(prefix)
    write_chain_csv(chain, scalar, latent if chain.vectors else None)
    meta.write_text(json.dumps(chain.meta, sort_keys=True))
    return [p for p in (scalar, latent, meta) if p.exists()]


def load_chain(prefix) -> Chain:
    scalar, latent, meta = _paths(prefix)
    chain = read_chain_csv(scalar, latent if latent.exists() else None)
    chain.meta = json.loads(meta.read_text()) if meta.exists() else {}
    return chain


def chain_exists(prefix) -> bool:
    return _paths(prefix)[0].exists()


def write_design_csv(design, pixel_ids, path, names=None) -> None:
    design = np.asarray(design, dtype=float)
    names = names or [f"x{j}" for j in range(design.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pixel_id", *names])
        for pid, row in zip(pixel_ids, design):
            w.writerow([pid, *(repr(float(x)) for x in row)])


def read_design_csv(path, pixel_ids=None) -> np.ndarray:
    """Design rows, reordered to ``pixel_ids`` when given."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [(row[0], [float(x) for x in row[1:]]) for row in r]
    if pixel_ids is None:
        return np.array([v for _, v in rows])
    lookup = {k: v for k, v in rows}
    return np.array([lookup[str(p)] for p in pixel_ids])


def cell_ids(panel, cells) -> list:
    """``pixel:year-month`` identifiers of flat cell indices."""
    pix, per = np.divmod(np.asarray(cells, dtype=int), panel.T)
    return [f"{panel.pixel_ids[i]}:{panel.period_labels[t][0]}-{panel.period_labels[t][1]:02d}"
            for i, t in zip(pix, per)]


def read_prediction_csv(path):
    """Inverse of :func:`firespde.bivariate.write_prediction_csv`: ids and an (n, U) array."""
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["obs_id"], {})[int(row["threshold_index"])] = float(row["cdf_value"])
    ids = list(rows)
    U = max((len(v) for v in rows.values()), default=0)
    return ids, np.array([[rows[i][j] for j in range(U)] for i in ids]).reshape(len(ids), U)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command, seed, config_digest, inputs, outputs) -> None:
    """JSON record of what produced a step's outputs."""
    payload = {
        "command": command,
        "seed": seed,
        "config_sha256": config_digest,
        "versions": {"firespde": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {Path(p).name: file_digest(p) for p in inputs},
        "outputs": {Path(p).name: file_digest(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
