"""Building blocks shared by the MCMC samplers.

Includes sign-constrained normal draws for probit data augmentation,
logit-scale random-walk proposals for bounded scalars, the chain driver
with thinning and checkpointing, and chain CSV serialization.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

from .exceptions import AssemblyError, ChainAbortError, NotPositiveDefiniteError

__all__ = [
    "make_rng",
    "sample_signed_normal",
    "BoundedWalk",
    "gaussian_logpdf_prec",
    "Chain",
    "drive",
    "run_sampler",
    "save_checkpoint",
    "load_checkpoint",
    "write_chain_csv",
    "read_chain_csv",
]

TARGET_ACCEPT = 0.44


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox stream; identical seeds give identical chains."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def sample_signed_normal(mean, sd, sign, rng):
    """Normal draws constrained to ``x > 0`` (sign 1), ``x < 0`` (sign -1) or free (sign 0).

    Uses the inverse CDF on the log scale, so means many standard
    deviations on the wrong side of zero still give valid draws.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)
    sign = np.broadcast_to(np.asarray(sign), mean.shape)
    u = rng.random(mean.shape)
    free = sign == 0
    c = np.where(free, 1.0, sign).astype(float)
    with np.errstate(divide="ignore"):
        logp = np.log(u) + np.where(free, 0.0, log_ndtr(c * mean / sd))
    w = ndtri_exp(logp)
    x = mean - c * sd * w
    # guard exact zeros produced by rounding at the truncation point
    bad = ~free & (c * x <= 0)
    if np.any(bad):
        x = np.where(bad, c * np.finfo(float).tiny, x)
    return x


@dataclass
class BoundedWalk:
    """Random walk on the logit scale for a scalar in ``(lo, hi)``.

    The proposal SD adapts toward 44% acceptance while ``adapt`` is true
    and is frozen afterwards.
    """

    lo: float
    hi: float
    sd: float = 0.3
    accepted: int = 0
    proposed: int = 0
    _adapt_steps: int = 0

    def to_free(self, x):
        return math.log((x - self.lo) / (self.hi - x))

    def from_free(self, y):
        return self.lo + (self.hi - self.lo) / (1.0 + math.exp(-y))

    def log_jacobian(self, x):
        return math.log(x - self.lo) + math.log(self.hi - x)

    def propose(self, x, rng):
        y = self.to_free(x) + self.sd * rng.standard_normal()
        cand = self.from_free(y)
        # saturated logits land on the bounds; push back inside
        eps = 1e-12 * (self.hi - self.lo)
        return min(max(cand, self.lo + eps), self.hi - eps)

    def accept(self, log_ratio, rng, adapt=False):
        """Metropolis decision; ``log_ratio`` must already include the Jacobian terms."""
        self.proposed += 1
        ok = bool(np.log(rng.random()) < log_ratio)
        self.accepted += ok
        if adapt:
            self._adapt_steps += 1
            gain = self._adapt_steps ** -0.6
            self.sd = float(np.clip(self.sd * math.exp(gain * ((1.0 if ok else 0.0) - TARGET_ACCEPT)), 1e-4, 10.0))
        return ok

    @property
    def rate(self):
        return self.accepted / self.proposed if self.proposed else float("nan")

    def state(self):
        return {"sd": self.sd, "accepted": self.accepted, "proposed": self.proposed, "adapt_steps": self._adapt_steps}

    def load(self, s):
        self.sd = s["sd"]
        self.accepted = s["accepted"]
        self.proposed = s["proposed"]
        self._adapt_steps = s["adapt_steps"]


def gaussian_logpdf_prec(x, logdet_prec, quad, scale=1.0):
    """Sum over columns of ``log N(x; 0, scale * P^-1)``.

    ``quad`` is ``sum_t x_t' P x_t``; ``logdet_prec`` is ``log|P|``.
    """
    x = np.asarray(x)
    n, T = (x.shape[0], 1) if x.ndim == 1 else x.shape
    return T * (0.5 * logdet_prec - 0.5 * n * math.log(2 * math.pi * scale)) - 0.5 * quad / scale


@dataclass
class Chain:
    """Thinned post-burn-in draws keyed by parameter name."""

    scalars: dict = field(default_factory=dict)
    vectors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def append(self, **values):
        for k, v in values.items():
            if np.ndim(v) == 0:
                self.scalars.setdefault(k, []).append(float(v))
            else:
                self.vectors.setdefault(k, []).append(np.array(v, dtype=float, copy=True))

    def __getitem__(self, key):
        if key in self.scalars:
            return np.asarray(self.scalars[key])
        return np.asarray(self.vectors[key])

    def __contains__(self, key):
        return key in self.scalars or key in self.vectors

    def __len__(self):
        for v in self.scalars.values():
            return len(v)
        for v in self.vectors.values():
            return len(v)
        return 0

    def to_json(self):
        return {
            "scalars": self.scalars,
            "vectors": {k: [a.ravel().tolist() for a in v] for k, v in self.vectors.items()},
            "shapes": {k: list(v[0].shape) for k, v in self.vectors.items() if v},
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d):
        shapes = d.get("shapes", {})
        vectors = {k: [np.asarray(a, dtype=float).reshape(shapes.get(k, (-1,))) for a in v] for k, v in d["vectors"].items()}
        return cls(scalars={k: list(v) for k, v in d["scalars"].items()}, vectors=vectors, meta=d.get("meta", {}))


def drive(sampler, iterations, burn_in, thin, rng, *, start=0, stop=None, checkpoint_path=None, checkpoint_every=0):
    """Run ``sampler.step`` from ``start`` and record thinned post-burn-in draws.

    ``stop`` ends the run early (as an interruption would); a checkpoint is
    written every ``checkpoint_every`` iterations so the run can be resumed
    by :func:`run_sampler`.
    """
    if not 0 <= burn_in < iterations:
        raise ValueError("burn_in must be smaller than iterations")
    if thin < 1:
        raise ValueError("thin must be at least 1")
    end = iterations if stop is None else min(stop, iterations)
    for it in range(start, end):
        try:
            sampler.step(rng, adapt=it < burn_in)
        except (FloatingPointError, NotPositiveDefiniteError, AssemblyError) as exc:
            raise ChainAbortError(str(exc), it) from exc
        if not sampler.finite():
            raise ChainAbortError("non-finite sampler state", it)
        if it >= burn_in and (it - burn_in) % thin == 0:
            sampler.record()
        if checkpoint_path is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, sampler, rng, it + 1)
    return end


def run_sampler(sampler, config, rng, *, checkpoint_path=None, resume=False, stop=None):
    """Drive ``sampler`` under ``config`` (iterations, burn_in, thin, checkpoint_every).

    With ``resume`` and an existing checkpoint the sampler state and the
    generator state are restored, so the finished chain equals an
    uninterrupted run with the same seed.
    """
    start = 0
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        start, saved_rng, state = load_checkpoint(checkpoint_path)
        sampler.restore(state)
        rng.bit_generator.state = saved_rng.bit_generator.state
    return drive(
        sampler, config.iterations, config.burn_in, config.thin, rng,
        start=start, stop=stop, checkpoint_path=checkpoint_path,
        checkpoint_every=getattr(config, "checkpoint_every", 0),
    )


def save_checkpoint(path, sampler, rng, iteration):
    payload = {
        "iteration": iteration,
        "rng": _jsonable(rng.bit_generator.state),
        "sampler": sampler.checkpoint(),
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = _unjson_state(payload["rng"])
    return payload["iteration"], rng, payload["sampler"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson_state(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.asarray(obj["__array__"], dtype=obj["dtype"])
        return {k: _unjson_state(v) for k, v in obj.items()}
    return obj


def write_chain_csv(chain: Chain, scalar_path, latent_path=None) -> None:
    """Scalar draws one row per draw; vector draws in a wide companion CSV."""
    names = list(chain.scalars)
    n = len(chain)
    with open(scalar_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", *names])
        for d in range(n):
            w.writerow([d, *(repr(chain.scalars[k][d]) for k in names)])
    if latent_path is None:
        return
    with open(latent_path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["draw"]
        for k, v in chain.vectors.items():
            shape = v[0].shape
            header += [f"{k}[{','.join(map(str, idx))}]" for idx in np.ndindex(*shape)]
        w.writerow(header)
        for d in range(n):
            row = [d]
            for v in chain.vectors.values():
                row += [repr(float(x)) for x in v[d].ravel()]
            w.writerow(row)


def read_chain_csv(scalar_path, latent_path=None) -> Chain:
    chain = Chain()
    with open(scalar_path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        cols = list(zip(*r)) or [[] for _ in header]
        for name, col in zip(header[1:], cols[1:]):
            chain.scalars[name] = [float(x) for x in col]
    if latent_path is not None:
        with open(latent_path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            rows = np.array([[float(x) for x in row[1:]] for row in r])
        groups = {}
        for j, h in enumerate(header[1:]):
            name, idx = h[:-1].split("[")
            groups.setdefault(name, []).append((j, tuple(int(i) for i in idx.split(","))))
        for name, items in groups.items():
            shape = tuple(max(ix[d] for _, ix in items) + 1 for d in range(len(items[0][1])))
            cols = [j for j, _ in items]
            chain.vectors[name] = [rows[d, cols].reshape(shape) for d in range(len(rows))] if len(rows) else []
    return chain
