"""Batch command line: one subcommand per pipeline step, files in a work directory.

Each step reads its inputs from ``--workdir``, writes its outputs there
together with a ``manifest_<step>.json`` and exits 0.  Failures print one
line ``error: <ErrorClass>: <message>`` to stderr and exit 1.
"""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .bivariate import run_stage3, write_prediction_csv
from .config import load_config
from .evaluation import (
    U_BA,
    U_CNT,
    apply_mask,
    challenge_score,
    format_score_report,
    make_cv_mask,
    read_mask_csv,
    write_mask_csv,
)
from .exceptions import DependencyError, FireSpdeError
from .forest import bin_label, read_forest, train_forest, write_forest
from .io import (
    cell_ids,
    chain_exists,
    load_chain,
    read_design_csv,
    read_prediction_csv,
    save_chain,
    write_design_csv,
    write_manifest,
)
from .lgcp import lgcp_predictive_cdf, run_lgcp
from .mcmc import make_rng
from .mesh import build_mesh, project, read_mesh, write_mesh
from .occurrence import run_stage1
from .panel import build_indicator, propagate_zeros, read_panel_csv, write_panel_csv
from .pipeline import (
    FittedPipeline,
    kriged_log_cnt,
    occurrence_probability,
    predict_benchmarks,
    predict_pipeline,
    rf_features,
    varying_columns,
)
from .smoother import fit_surfaces, make_basis, read_surfaces_csv, standardize, write_surfaces_csv
from .synthetic import simulate, write_truth_csv

STEPS = ("simulate", "mesh", "fit-stage1", "fit-stage2", "fit-stage3", "fit-rf", "fit-lgcp",
         "predict", "cv-mask", "score", "report")

# file name -> step that produces it
PRODUCER = {
    "panel.csv": "simulate",
    "design.csv": "simulate",
    "mesh_nodes.csv": "mesh",
    "mesh_triangles.csv": "mesh",
    "stage1_chain.csv": "fit-stage1",
    "surfaces.csv": "fit-stage2",
    "stage3_chain.csv": "fit-stage3",
    "forest.txt": "fit-rf",
    "lgcp_chain.csv": "fit-lgcp",
    "mask.csv": "cv-mask",
    "predictions_ba.csv": "predict",
    "predictions_cnt.csv": "predict",
    "scores.csv": "score",
}

MODEL_FILES = {
    "Bivariate spatial model": ("predictions_ba.csv", "predictions_cnt.csv"),
    "Benchmark model": ("predictions_benchmark_ba.csv", "predictions_benchmark_cnt.csv"),
    "LGCP intercept-only": (None, "predictions_lgcp_cnt.csv"),
}


class Run:
    """Context of one subcommand invocation."""

    def __init__(self, workdir, config_path, seed, threads, command):
        self.dir = Path(workdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = load_config(config_path)
        self.seed = self.config["seed"] if seed is None else seed
        self.command = command
        self.inputs, self.outputs = [], []
        _set_threads(threads)

    def rng(self):
        return make_rng([self.seed, STEPS.index(self.command)])

    def need(self, name):
        path = self.dir / name
        if not path.exists():
            raise DependencyError(name, PRODUCER.get(name, "an earlier step"))
        self.inputs.append(path)
        return path

    def out(self, name):
        path = self.dir / name
        self.outputs.append(path)
        return path

    def finish(self):
        write_manifest(self.dir / f"manifest_{self.command}.json", self.command, self.seed,
                       self.config.digest(), self.inputs, self.outputs)

    # shared loaders
    def panel(self):
        return read_panel_csv(self.need("panel.csv"))

    def training_panel(self):
        """The panel with cross-validation cells hidden when a mask exists."""
        panel = self.panel()
        if (self.dir / "mask.csv").exists():
            panel = apply_mask(panel, read_mask_csv(self.need("mask.csv"), panel))
        return panel

    def design(self, panel):
        if self.config["design"]:
            path = Path(self.config["design"])
            self.inputs.append(path)
        else:
            path = self.need("design.csv")
        return read_design_csv(path, panel.pixel_ids)

    def mesh(self):
        return read_mesh(self.need("mesh_nodes.csv"), self.need("mesh_triangles.csv"))

    def chain(self, prefix):
        self.need(f"{prefix}_chain.csv")
        return load_chain(self.dir / prefix)


def _set_threads(threads):
    if threads and threads > 0:
        import warnings

        import numba

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except FireSpdeError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Zero-inflated bivariate spatial modelling of fire counts and burnt areas."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


def step(name):
    """Register a subcommand with the common options and a :class:`Run`."""

    def deco(fn):
        @main.command(name)
        @click.option("--workdir", "-w", default=".", type=click.Path(file_okay=False), show_default=True)
        @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
        @click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
        @click.option("--threads", type=int, default=1, show_default=True)
        @functools.wraps(fn)
        def wrapper(workdir, config_path, seed, threads, **kw):
            run = Run(workdir, config_path, seed, threads, name)
            fn(run, **kw)
            run.finish()

        return wrapper

    return deco


def _resume_option(fn):
    return click.option("--resume", is_flag=True, help="Continue from the checkpoint in the work directory.")(fn)


@step("simulate")
def cmd_simulate(run: Run):
    """Simulate a synthetic panel with its truth and design."""
    panel, truth = simulate(run.config.sim(), run.rng())
    write_panel_csv(panel, run.out("panel.csv"))
    write_truth_csv(truth, run.out("truth.csv"))
    names = ["intercept"] + [f"x{j}" for j in range(1, truth.D.shape[1])]
    write_design_csv(truth.D, panel.pixel_ids, run.out("design.csv"), names)


@step("mesh")
def cmd_mesh(run: Run):
    """Triangulate the pixel locations."""
    panel = run.panel()
    mesh = build_mesh(panel.locations, run.config.mesh())
    write_mesh(mesh, run.out("mesh_nodes.csv"), run.out("mesh_triangles.csv"))


def _predict_cells(panel):
    return ~(panel.ba_obs & panel.cnt_obs)


@step("fit-stage1")
@_resume_option
def cmd_fit_stage1(run: Run, resume):
    """Occurrence model (probit with SPDE spatial effect)."""
    panel = run.training_panel()
    mesh = run.mesh()
    filled = propagate_zeros(panel)
    chain = run_stage1(build_indicator(filled), run.design(panel), mesh, run.config.stage1(), run.rng(),
                       predict_cells=_predict_cells(panel), checkpoint_path=run.dir / "stage1_checkpoint.json",
                       resume=resume)
    run.outputs += save_chain(chain, run.dir / "stage1")


@step("fit-stage2")
def cmd_fit_stage2(run: Run):
    """Smoothed mean and SD surfaces of log BA and log CNT."""
    panel = propagate_zeros(run.training_panel())
    surfaces = fit_surfaces(panel, make_basis(panel.locations, run.config.basis_grid()))
    write_surfaces_csv(surfaces, run.out("surfaces.csv"))


@step("fit-stage3")
@_resume_option
def cmd_fit_stage3(run: Run, resume):
    """Bivariate latent model of standardized log BA and log CNT."""
    surfaces = read_surfaces_csv(run.need("surfaces.csv"))
    panel = run.training_panel()
    mesh = run.mesh()
    W = standardize(propagate_zeros(panel), surfaces)
    chain = run_stage3(W, mesh, run.config.stage3(), run.rng(), predict_cells=_predict_cells(panel),
                       checkpoint_path=run.dir / "stage3_checkpoint.json", resume=resume)
    run.outputs += save_chain(chain, run.dir / "stage3")


def _fitted(run: Run, with_forest=True):
    panel = run.training_panel()
    filled = propagate_zeros(panel)
    mesh = run.mesh()
    A = project(mesh, filled.locations)
    surfaces = read_surfaces_csv(run.need("surfaces.csv"))
    ch1 = run.chain("stage1")
    ch3 = run.chain("stage3")
    p = occurrence_probability(filled, ch1)
    krig = kriged_log_cnt(filled, surfaces, ch3, mesh, A)
    forest = read_forest(run.need("forest.txt")) if with_forest else None
    return FittedPipeline(mesh, A, ch1, surfaces, ch3, forest, p, krig, filled,
                          run.design(panel)), panel


@step("fit-rf")
def cmd_fit_rf(run: Run):
    """Random forest over CNT severity classes."""
    fit, _ = _fitted(run, with_forest=False)
    filled = fit.panel
    train = filled.cnt_obs & filled.ba_obs
    pix = np.nonzero(train)[0]
    X = rf_features(fit.design[pix], np.log1p(filled.ba[train]), fit.log_cnt_pred[train],
                    keep=varying_columns(fit.design))
    cfg = run.config.pipeline()
    model = train_forest(X, bin_label(filled.cnt[train]), mtry=cfg.mtry, ntree=cfg.ntree, rng=run.rng())
    write_forest(model, run.out("forest.txt"))


@step("fit-lgcp")
@_resume_option
def cmd_fit_lgcp(run: Run, resume):
    """Intercept-only log-Gaussian Cox process for CNT."""
    panel = run.training_panel()
    mesh = run.mesh()
    chain = run_lgcp(panel.cnt, panel.cnt_obs, np.ones((panel.N, 1)), mesh, run.config.lgcp(), run.rng(),
                     locations=panel.locations, predict_cells=~panel.cnt_obs,
                     checkpoint_path=run.dir / "lgcp_checkpoint.json", resume=resume)
    run.outputs += save_chain(chain, run.dir / "lgcp")


@step("predict")
def cmd_predict(run: Run):
    """Predictive CDFs at every cell missing in the training panel."""
    fit, panel = _fitted(run)
    ba_cells = np.flatnonzero(~panel.ba_obs.ravel())
    cnt_cells = np.flatnonzero(~panel.cnt_obs.ravel())
    ba_cdf, cnt_cdf = predict_pipeline(fit, ba_cells, cnt_cells, run.rng(), run.config["rf.n_impute"])
    write_prediction_csv(run.out("predictions_ba.csv"), cell_ids(panel, ba_cells), "ba", ba_cdf)
    write_prediction_csv(run.out("predictions_cnt.csv"), cell_ids(panel, cnt_cells), "cnt", cnt_cdf)
    bba, bcnt = predict_benchmarks(panel, fit.design, ba_cells, cnt_cells)
    write_prediction_csv(run.out("predictions_benchmark_ba.csv"), cell_ids(panel, ba_cells), "ba", bba)
    write_prediction_csv(run.out("predictions_benchmark_cnt.csv"), cell_ids(panel, cnt_cells), "cnt", bcnt)
    if chain_exists(run.dir / "lgcp"):
        chain = run.chain("lgcp")
        stored = {c: k for k, c in enumerate(chain.meta["predict_cells"])}
        keep = np.array([c in stored for c in cnt_cells.tolist()], dtype=bool)
        cells = cnt_cells[keep]
        cdf = lgcp_predictive_cdf(chain, U_CNT, cells=[stored[c] for c in cells.tolist()])
        write_prediction_csv(run.out("predictions_lgcp_cnt.csv"), cell_ids(panel, cells), "cnt", cdf)


@step("cv-mask")
@click.option("--scheme", type=click.Choice(["fixed-month", "random-month"]), default=None,
              help="Overrides cv.scheme.")
def cmd_cv_mask(run: Run, scheme):
    """Hide complete periods using donor missingness patterns."""
    panel = run.panel()
    mask = make_cv_mask(panel, scheme or run.config["cv.scheme"], run.rng())
    write_mask_csv(mask, panel, run.out("mask.csv"))


@step("score")
def cmd_score(run: Run):
    """Score every available prediction file on the masked cells."""
    panel = run.panel()
    mask = read_mask_csv(run.need("mask.csv"), panel)
    rows = []
    for model, files in MODEL_FILES.items():
        for var, fname, u, values, hidden in (
            ("ba", files[0], U_BA, panel.ba, mask.ba),
            ("cnt", files[1], U_CNT, panel.cnt, mask.cnt),
        ):
            if fname is None:
                continue
            if not (run.dir / fname).exists():
                if model == "Bivariate spatial model":
                    run.need(fname)
                continue
            ids, cdf = read_prediction_csv(run.need(fname))
            cells = np.flatnonzero(hidden.ravel())
            lookup = {k: j for j, k in enumerate(ids)}
            want = cell_ids(panel, cells)
            missing = [w for w in want if w not in lookup]
            if missing:
                raise DependencyError(f"predictions for {len(missing)} masked cells in {fname}", "predict")
            F = cdf[[lookup[w] for w in want]]
            rows.append((model, var, run.config["cv.scheme"], challenge_score(F, values.ravel()[cells], u)))
    with open(run.out("scores.csv"), "w") as fh:
        fh.write("model,variable,scheme,score\n")
        for m, v, s, x in rows:
            fh.write(f"{m},{v},{s},{x!r}\n")


@step("report")
def cmd_report(run: Run):
    """Plain-text score table."""
    lines = run.need("scores.csv").read_text().splitlines()[1:]
    rows = []
    for line in lines:
        m, v, s, x = line.rsplit(",", 3)
        rows.append((f"{m} ({v.upper()})", s, float(x)))
    text = format_score_report(rows)
    run.out("report.txt").write_text(text)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
