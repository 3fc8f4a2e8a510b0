"""Command-line front end.

Subcommands ``optimize``, ``evaluate``, ``compare`` and
``study-perturbation`` read a JSON run configuration (unknown fields are
rejected) and write their results to ``--out``::

    python -m bayesdesign optimize --config run.json --seed 1 --out results/
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .ace import AceConfig, EstimatorSampler, ace_run
from .core import Design, DesignError, LinearTransform, ModelSet, as_model_set, seed_sequence
from .expected_loss import (
    ESTIMATORS,
    EstimatorConfig,
    UnsupportedEstimatorError,
    check_dlmc_supported,
    estimate,
    perturbation_designs,
    relative_efficiency,
)
from .losses import LOSS_KINDS, PARAMETER_LOSSES, LossSpec
from .models import (
    BOX_HILL_BOUNDS,
    LOGISTIC_BOUNDS,
    RUNS_PER_BLOCK,
    build_box_hill,
    build_hier_logistic,
    build_logistic_selection,
    build_standard_logistic,
)

FAMILIES = ("logistic_standard", "logistic_hier", "box_hill")


class ConfigError(ValueError):
    def __init__(self, fieldname: str, message: str):
        super().__init__(f"config field {fieldname!r}: {message}")
        self.field = fieldname


_ACE_FIELDS = {"E", "Q", "B", "B_compare", "max_cycles"}
_STUDY_FIELDS = {"T", "B_dlmc", "B_nbmc_small", "B_nbmc_large", "u"}


@dataclass
class RunConfig:
    family: str
    n: int
    loss: str = "SI"
    v: object = None  # inclusion vector, or "selection" for all 16 submodels
    G: int | None = None
    transform: object = "identity"
    estimator: str = "nbmc"
    B: int = 1000
    B_tilde: int | None = None
    C: int = 1000
    ace: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1

    # -- parsing -------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "the configuration must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        for key in ("family", "n"):
            if key not in raw:
                raise ConfigError(key, "missing required field")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def validate(self) -> None:
        def positive_int(name, value):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")

        if self.family not in FAMILIES:
            raise ConfigError("family", f"must be one of {FAMILIES}, got {self.family!r}")
        positive_int("n", self.n)
        positive_int("B", self.B)
        positive_int("C", self.C)
        positive_int("workers", self.workers)
        if self.B_tilde is not None:
            positive_int("B_tilde", self.B_tilde)
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a nonnegative integer")
        if self.loss not in LOSS_KINDS:
            raise ConfigError("loss", f"must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError("estimator", f"must be one of {ESTIMATORS}, got {self.estimator!r}")
        for key, value in self.ace.items():
            if key not in _ACE_FIELDS:
                raise ConfigError(f"ace.{key}", "unknown field")
            if key == "max_cycles":
                if not isinstance(value, int) or value < 0:
                    raise ConfigError("ace.max_cycles", "must be a nonnegative integer")
            else:
                positive_int(f"ace.{key}", value)
        for key in self.study:
            if key not in _STUDY_FIELDS:
                raise ConfigError(f"study.{key}", "unknown field")
        if self.family == "logistic_hier":
            G = self.G if self.G is not None else self.n // RUNS_PER_BLOCK
            if G < 2 or self.n != G * RUNS_PER_BLOCK:
                raise ConfigError("n", f"hierarchical models need n = 6 G with G >= 2, got n={self.n}")
        elif self.G is not None:
            raise ConfigError("G", "only applies to the logistic_hier family")
        if self.v is not None and self.family == "box_hill":
            raise ConfigError("v", "does not apply to the box_hill family")
        if self.v not in (None, "selection"):
            if not (isinstance(self.v, list) and len(self.v) == 5 and self.v[0] == 1
                    and all(b in (0, 1) for b in self.v)):
                raise ConfigError("v", "must be a 0/1 list of length 5 starting with 1, or 'selection'")
        try:
            ms = self.model_set()
            loss = self.loss_spec(ms)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("transform", str(exc)) from None
        if self.estimator == "dlmc":
            try:
                check_dlmc_supported(ms, loss)
            except UnsupportedEstimatorError as exc:
                raise ConfigError("estimator", str(exc)) from None
        if self.estimator.startswith("pseudo") and len(ms) != 1:
            raise ConfigError("estimator", "pseudo-Bayesian criteria need a single model")
        if self.loss in ("ZeroOne", "MSI") and len(ms) < 2:
            raise ConfigError("loss", "model-discrimination losses need at least two models")

    # -- building ------------------------------------------------------------

    @property
    def bounds(self) -> np.ndarray:
        return BOX_HILL_BOUNDS if self.family == "box_hill" else LOGISTIC_BOUNDS

    def model_set(self) -> ModelSet:
        if self.family == "box_hill":
            kind = self.transform if self.transform in ("identity", "ratio") else "identity"
            ms = build_box_hill(kind)
        else:
            G = None
            if self.family == "logistic_hier":
                G = self.G if self.G is not None else self.n // RUNS_PER_BLOCK
            if self.v == "selection":
                ms = build_logistic_selection(G)
            else:
                v = tuple(self.v) if self.v is not None else (1, 1, 1, 1, 1)
                ms = as_model_set(build_standard_logistic(v) if G is None else build_hier_logistic(v, G))
        if isinstance(self.transform, dict):
            if set(self.transform) != {"linear"}:
                raise ConfigError("transform", "a mapping must be {'linear': A}")
            A = np.asarray(self.transform["linear"], dtype=float)
            if any(A.ndim != 2 or A.shape[1] != m.dim for m in ms):
                raise ConfigError("transform", "linear map A must have one column per parameter")
            ms = ms.with_transforms([LinearTransform(A)] * len(ms))
        elif self.transform == "ratio" and self.family != "box_hill":
            raise ConfigError("transform", "the ratio transform applies to box_hill only")
        elif self.transform not in ("identity", "ratio"):
            raise ConfigError("transform", f"unknown transform {self.transform!r}")
        return ms

    def loss_spec(self, ms=None) -> LossSpec:
        ms = ms or self.model_set()
        spec = LossSpec(self.loss, C=self.C)
        if self.loss in PARAMETER_LOSSES:
            spec.resolve_transforms(ms)
        return spec

    def estimator_config(self, B=None) -> EstimatorConfig:
        return EstimatorConfig(B=B or self.B, B_tilde=self.B_tilde, workers=self.workers)

    def ace_config(self) -> AceConfig:
        return AceConfig(seed=self.seed, workers=self.workers, **self.ace)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_design(path, cfg: RunConfig) -> Design:
    return Design.from_csv(path, cfg.bounds, cfg.n)


def cmd_optimize(cfg: RunConfig, out: Path) -> dict:
    """Run ACE; write ``design.csv``, ``trace.jsonl`` and ``summary.json``."""
    ms = cfg.model_set()
    loss = cfg.loss_spec(ms) if not cfg.estimator.startswith("pseudo") else None
    sampler = EstimatorSampler(cfg.estimator, ms, loss, cfg.estimator_config())
    acfg = cfg.ace_config()
    start = time.perf_counter()
    result = ace_run(sampler, cfg.n, cfg.bounds, acfg)
    seconds = time.perf_counter() - start
    out.mkdir(parents=True, exist_ok=True)
    result.design.to_csv(out / "design.csv")
    with open(out / "trace.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for trace in result.restarts:
            fh.write(trace.to_jsonl())
    summary = {
        "family": cfg.family,
        "loss": cfg.loss,
        "estimator": cfg.estimator,
        "n": cfg.n,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "restarts": acfg.E,
        "best_restart": result.best_restart,
        "estimate": result.estimate.value,
        "se": result.estimate.se,
        "B": result.estimate.B,
        "restart_estimates": [t.estimate.value for t in result.restarts],
        "seconds": seconds,
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_evaluate(cfg: RunConfig, design_path, out: Path | None = None) -> dict:
    """Estimate the expected loss of one design."""
    d = _load_design(design_path, cfg)
    ms = cfg.model_set()
    loss = cfg.loss_spec(ms) if not cfg.estimator.startswith("pseudo") else None
    record = estimate(cfg.estimator, d, ms, loss, cfg.estimator_config(), cfg.seed).to_record()
    record["workers"] = cfg.workers
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "estimate.json", record)
    return record


def cmd_compare(cfg: RunConfig, design_a, design_b, out: Path | None = None) -> dict:
    """Relative efficiency of design A against reference design B (percent)."""
    da, db = _load_design(design_a, cfg), _load_design(design_b, cfg)
    if da.values.shape != db.values.shape:
        raise DesignError(f"designs differ in shape: {da.values.shape} vs {db.values.shape}")
    ms = cfg.model_set()
    loss = cfg.loss_spec(ms)
    rec = relative_efficiency(da, db, ms, loss, cfg.estimator_config(), cfg.seed).to_record()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "compare.json", rec)
    return rec


STUDY_COLUMNS = (
    "design", "u", "dlmc", "dlmc_se", "nbmc_small", "nbmc_small_se", "nbmc_large", "nbmc_large_se",
)


def cmd_study_perturbation(cfg: RunConfig, d_star_path, T=None, out: Path | None = None) -> dict:
    """Compare DLMC with two NBMC sizes on ``T`` perturbations of ``d*``.

    Writes ``study.csv`` (one row per design) and ``study.json`` with the
    Spearman correlation between the large NBMC and the DLMC column.
    """
    d_star = _load_design(d_star_path, cfg)
    ms = cfg.model_set()
    loss = cfg.loss_spec(ms)
    try:
        check_dlmc_supported(ms, loss)
    except UnsupportedEstimatorError as exc:
        raise ConfigError("loss", str(exc)) from None
    st = dict(cfg.study)
    T = int(st.get("T", 20) if T is None else T)
    sizes = (st.get("B_dlmc", 5000), st.get("B_nbmc_small", 1000), st.get("B_nbmc_large", 5000))
    designs = perturbation_designs(d_star, T, cfg.seed, st.get("u"))
    rows = []
    for t, (u, d) in enumerate(designs):
        row = {"design": t, "u": u}
        for c, (name, est, B) in enumerate(
            zip(("dlmc", "nbmc_small", "nbmc_large"), ("dlmc", "nbmc", "nbmc"), sizes)
        ):
            e = estimate(est, d, ms, loss, cfg.estimator_config(B), seed_sequence(cfg.seed, t, c))
            row[name], row[name + "_se"] = e.value, e.se
        rows.append(row)
    rho = None
    if T >= 2:
        rho = float(spearmanr([r["nbmc_large"] for r in rows], [r["dlmc"] for r in rows]).statistic)
    result = {"T": T, "B": list(sizes), "spearman_nbmc_large_dlmc": rho, "rows": rows}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        lines = [",".join(STUDY_COLUMNS)]
        lines += [",".join(repr(float(r[c])) if c != "design" else str(r[c]) for c in STUDY_COLUMNS) for r in rows]
        (out / "study.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_json(out / "study.json", {k: v for k, v in result.items() if k != "rows"})
    return result


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesdesign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--workers", type=int, help="overrides the configured worker count")
        p.add_argument("--out", help="output directory (optimize defaults to the working directory)")
        return p

    common(sub.add_parser("optimize", help="find a design with ACE"))
    p = common(sub.add_parser("evaluate", help="estimate the expected loss of a design"))
    p.add_argument("--design", required=True)
    p = common(sub.add_parser("compare", help="relative efficiency of two designs"))
    p.add_argument("--design-a", required=True, help="design to assess")
    p.add_argument("--design-b", required=True, help="reference design")
    p = common(sub.add_parser("study-perturbation", help="estimator agreement on perturbed designs"))
    p.add_argument("--design", required=True, help="design to perturb")
    p.add_argument("--T", type=int, help="number of perturbed designs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        overrides = {k: getattr(args, k) for k in ("seed", "workers") if getattr(args, k) is not None}
        if overrides:
            cfg = replace(cfg, **overrides)
            cfg.validate()
        out = Path(args.out) if args.out is not None else None
        if args.command == "optimize":
            result = cmd_optimize(cfg, out or Path("."))
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, args.design, out)
        elif args.command == "compare":
            result = cmd_compare(cfg, args.design_a, args.design_b, out)
        else:
            result = cmd_study_perturbation(cfg, args.design, args.T, out)
            result = {k: v for k, v in result.items() if k != "rows"}
    except (ConfigError, DesignError, OSError) as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
