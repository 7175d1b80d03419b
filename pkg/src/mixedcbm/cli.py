"""Command-line pipeline: synth, train, calibrate, fit, eval, inspect, sweep.

Every stage reads its inputs from and writes its outputs to one run directory.
JSON outputs carry a ``provenance`` block with the config hash and seed; CSV
outputs are listed with their sha256 in ``manifest.json`` (sweep CSVs also
carry a ``config_hash`` column).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .calibration import CalibrationParams, concept_ece, fit_calibration, nll
from .data import DataError, SynthSpec, generate_synthetic, load_dataset, split_dataset, write_dataset, write_schema
from .entropy import split_leakage
from .leakage import completeness_sweep, msl_sweep, path_report, standard_metrics
from .mcbm import BASELINES, BaselineModel, McbmModel, fit_baseline, fit_mcbm, merge
from .predictor import (
    JOINT,
    SEQ,
    MlpParams,
    ProbabilitySource,
    SourceError,
    TrainHyper,
    load_probability_source,
    train_independent,
    train_joint,
)
from .tree import SOFT, DecisionTree, export_dot
from .utils import config_hash, dump_json, load_json

PLATT_TEMP, NO_CAL = "platt-temp", "none"


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on.  ``seed`` drives data generation, the
    split and predictor training."""

    synth: SynthSpec | None = None
    data_csv: str | None = None
    schema_path: str | None = None
    probabilities: str | None = None
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    msl: int = 30
    mode: str = SEQ
    calibration: str | None = None
    concept_mode: str = "predicted"
    seed: int = 0
    out: str = "run"
    sweep_levels: tuple[int, ...] | None = None
    sweep_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sweep_msls: tuple[int, ...] = (1, 5, 10, 30, 60, 120)

    def __post_init__(self):
        if self.data_csv is None and self.synth is None:
            object.__setattr__(self, "synth", SynthSpec())
        if self.synth is not None and self.data_csv is not None:
            raise ConfigError("synth and data_csv: give exactly one dataset source")
        if self.data_csv is not None and self.schema_path is None:
            raise ConfigError("schema_path: required together with data_csv")
        if self.synth is not None and self.synth.seed != self.seed:
            object.__setattr__(self, "synth", replace(self.synth, seed=self.seed))
        if self.hyper.seed != self.seed:
            object.__setattr__(self, "hyper", replace(self.hyper, seed=self.seed))
        if not isinstance(self.msl, int) or self.msl < 1:
            raise ConfigError(f"msl: must be an integer >= 1, got {self.msl!r}")
        if self.mode not in (SEQ, JOINT):
            raise ConfigError(f"mode: must be 'seq' or 'joint', got {self.mode!r}")
        if self.calibration is None:
            object.__setattr__(self, "calibration", PLATT_TEMP if self.mode == SEQ else NO_CAL)
        if self.calibration not in (PLATT_TEMP, NO_CAL):
            raise ConfigError(f"calibration: must be '{PLATT_TEMP}' or '{NO_CAL}', got {self.calibration!r}")
        if self.mode == JOINT and self.calibration != NO_CAL:
            raise ConfigError("calibration: joint mode trains probabilities end to end and must use 'none'")
        if self.concept_mode not in ("predicted", "annotated"):
            raise ConfigError(f"concept_mode: must be 'predicted' or 'annotated', got {self.concept_mode!r}")
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"fractions: need three non-negative values summing to 1, got {self.fractions!r}")
        object.__setattr__(self, "fractions", fr)

    @property
    def calibrate(self) -> bool:
        return self.calibration == PLATT_TEMP

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict() if self.synth is not None else None,
            "data_csv": self.data_csv,
            "schema_path": self.schema_path,
            "probabilities": self.probabilities,
            "fractions": list(self.fractions),
            "hyper": self.hyper.to_dict(),
            "msl": self.msl,
            "mode": self.mode,
            "calibration": self.calibration,
            "concept_mode": self.concept_mode,
            "seed": self.seed,
            "out": self.out,
            "sweep_levels": list(self.sweep_levels) if self.sweep_levels is not None else None,
            "sweep_seeds": list(self.sweep_seeds),
            "sweep_msls": list(self.sweep_msls),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        d = dict(d)
        try:
            if d.get("synth") is not None:
                d["synth"] = SynthSpec.from_dict(d["synth"])
            if "hyper" in d:
                d["hyper"] = TrainHyper.from_dict(d["hyper"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"synth/hyper: {e}") from None
        for key in ("fractions", "sweep_levels", "sweep_seeds", "sweep_msls"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        # the output location does not change what is computed
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}


# ---------------------------------------------------------------------------
# Artifact plumbing
# ---------------------------------------------------------------------------


class Run:
    """File layout of one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out)

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ArtifactError(f"missing upstream artifact {p} (run `mixedcbm {producer}` first)")
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        dump_json({"provenance": self.cfg.provenance(), **payload}, p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        p.write_text(text)
        return p

    def register(self, *names: str) -> None:
        """Record sha256 and provenance of data files that cannot embed them."""
        mp = self.path("manifest.json")
        files = load_json(mp)["files"] if mp.exists() else {}
        for nm in names:
            digest = hashlib.sha256(self.path(nm).read_bytes()).hexdigest()
            files[nm] = {"sha256": digest, **self.cfg.provenance()}
        dump_json({"files": files}, mp)

    # -- loading ----------------------------------------------------------

    def dataset(self):
        cfg = self.cfg
        if cfg.data_csv is not None:
            return load_dataset(cfg.data_csv, cfg.schema_path)
        return load_dataset(self.require("data.csv", "synth"), self.require("schema.json", "synth"))

    def splits(self):
        return split_dataset(self.dataset(), self.cfg.fractions, self.cfg.seed)

    def raw_source(self, schema) -> ProbabilitySource:
        cfg = self.cfg
        if cfg.probabilities is not None:
            if not Path(cfg.probabilities).exists():
                raise ArtifactError(f"missing probability file {cfg.probabilities}")
            return load_probability_source(cfg.probabilities, schema, cfg.mode)
        d = load_json(self.require("predictor.json", "train"))
        if d["mode"] != cfg.mode:
            raise ArtifactError(f"{self.path('predictor.json')}: trained for mode {d['mode']!r}, config has {cfg.mode!r}")
        return ProbabilitySource(schema, cfg.mode, MlpParams.from_dict(d["params"], schema))

    def source(self, schema) -> ProbabilitySource:
        src = self.raw_source(schema)
        if self.cfg.calibrate:
            d = load_json(self.require("calibration.json", "calibrate"))
            src = src.with_calibration(CalibrationParams.from_dict(d["params"], schema))
        return src

    def model(self, schema):
        src = self.source(schema)
        d = load_json(self.require("mcbm.json", "fit"))
        if d["mode"] != self.cfg.mode or d["msl"] != self.cfg.msl:
            raise ArtifactError(f"{self.path('mcbm.json')}: fitted with mode={d['mode']} msl={d['msl']}, "
                                f"config has mode={self.cfg.mode} msl={self.cfg.msl}")
        model = McbmModel.from_dict(d, src)
        bd = load_json(self.require("baselines.json", "fit"))
        baselines = {v: BaselineModel(DecisionTree.from_dict(t["tree"]), src, v) for v, t in bd["baselines"].items()}
        return model, baselines


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> list[Path]:
    """Generate the synthetic dataset: data.csv and schema.json."""
    if cfg.synth is None:
        raise ConfigError("synth: this run reads data from a CSV file, nothing to generate")
    run = Run(cfg)
    ds = generate_synthetic(cfg.synth)
    run.dir.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, run.path("data.csv"))
    write_schema(ds.schema, run.path("schema.json"), extra={"provenance": cfg.provenance()})
    run.register("data.csv")
    return [run.path("data.csv"), run.path("schema.json")]


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Train the concept predictor on the training split: predictor.json."""
    if cfg.probabilities is not None:
        raise ConfigError("probabilities: an external probability file replaces training")
    run = Run(cfg)
    train, _, _ = run.splits()
    params = train_independent(train, cfg.hyper)
    payload = {"mode": cfg.mode}
    if cfg.mode == JOINT:
        params, head = train_joint(train, cfg.hyper, init=params)
        payload["head"] = head.to_dict()
    payload["params"] = params.to_dict()
    return [run.write_json("predictor.json", payload)]


def cmd_calibrate(cfg: RunConfig) -> list[Path]:
    """Fit Platt and temperature scaling on the calibration split: calibration.json."""
    if not cfg.calibrate:
        raise ConfigError("calibration: set to 'none', nothing to calibrate")
    run = Run(cfg)
    _, calib, _ = run.splits()
    schema = calib.schema
    src = run.raw_source(schema)
    cal = fit_calibration(src.dataset_logits(calib), calib.C, schema)
    before = src.dataset_probs(calib)
    after = src.with_calibration(cal).dataset_probs(calib)
    metrics = {
        "ece_before": concept_ece(before, calib.C, schema),
        "ece_after": concept_ece(after, calib.C, schema),
        "nll_before": nll(before, calib.C, schema),
        "nll_after": nll(after, calib.C, schema),
    }
    return [run.write_json("calibration.json", {"method": PLATT_TEMP, "params": cal.to_dict(schema),
                                                "calibration_split": metrics})]


def _source_refs(cfg: RunConfig):
    prob_ref = cfg.probabilities if cfg.probabilities is not None else "predictor.json"
    return prob_ref, ("calibration.json" if cfg.calibrate else None)


def cmd_fit(cfg: RunConfig) -> list[Path]:
    """Fit the mixed model and the baselines: mcbm.json and baselines.json."""
    run = Run(cfg)
    train, _, _ = run.splits()
    src = run.source(train.schema)
    P = src.dataset_probs(train)
    model = fit_mcbm(train, src, cfg.msl, cfg.mode, allow_uncalibrated=not cfg.calibrate, probs=P)
    baselines = {v: fit_baseline(train, src, cfg.msl, v, probs=P).to_dict() for v in BASELINES}
    return [run.write_json("mcbm.json", model.to_dict(*_source_refs(cfg))),
            run.write_json("baselines.json", {"msl": cfg.msl, "baselines": baselines})]


def cmd_eval(cfg: RunConfig) -> list[Path]:
    """Score every model on the test split: metrics.json."""
    run = Run(cfg)
    _, _, test = run.splits()
    model, baselines = run.model(test.schema)
    P = model.source.dataset_probs(test)
    models = {"mcbm": standard_metrics(model, test, cfg.concept_mode, probs=P)}
    for v, b in baselines.items():
        models[v] = standard_metrics(b, test, cfg.concept_mode, probs=P)
    payload = {
        "split": "test",
        "n_test": test.n,
        "concept_mode": cfg.concept_mode,
        "mode": cfg.mode,
        "msl": cfg.msl,
        "concept_ece": concept_ece(P, test.C, test.schema) if test.n else None,
        "models": models,
    }
    return [run.write_json("metrics.json", payload)]


def _merged_annotations(tree: DecisionTree) -> dict:
    out = {}
    for nd in tree.nodes:
        if not nd.is_leaf and tree.feature_kinds[nd.feature] == SOFT:
            bits = split_leakage(nd.class_counts, tree.nodes[nd.left].class_counts, tree.nodes[nd.right].class_counts)
            out[nd.node_id] = f"IG = {bits:.3f} bits"
    return out


def cmd_inspect(cfg: RunConfig) -> list[Path]:
    """Per-path leakage report and DOT drawings of the global and merged trees."""
    run = Run(cfg)
    train, _, test = run.splits()
    model, _ = run.model(test.schema)
    report = path_report(model, train, test, cfg.concept_mode)
    classes = test.schema.classes
    g = model.global_tree
    leaf_path = {p.leaf_id: i for i, p in enumerate(model.paths, start=1)}
    merged = merge(model)
    return [
        run.write_json("report.json", report.to_dict()),
        run.write_text("report.txt", f"# config {cfg.hash()} seed {cfg.seed}\n" + report.render_table()),
        run.write_text("global_tree.dot", export_dot(g, {n: f"path {i}" for n, i in leaf_path.items()}, classes)),
        run.write_text("merged_tree.dot", export_dot(merged, _merged_annotations(merged), classes)),
    ]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def cmd_sweep(cfg: RunConfig, what: str = "both") -> list[Path]:
    """Leakage against concept completeness and accuracy against msl."""
    run = Run(cfg)
    h = cfg.hash()
    written = []
    if what in ("completeness", "both"):
        if cfg.synth is None:
            raise ConfigError("synth: the completeness sweep regenerates data and needs a synthetic spec")
        levels = cfg.sweep_levels or tuple(range(1, cfg.synth.n_factors + 1))
        res = completeness_sweep(cfg.synth, levels, cfg.sweep_seeds, cfg.hyper, cfg.msl, cfg.fractions)
        _write_csv(run.path("sweep_completeness.csv"),
                   ["config_hash", "level", "seed", "completeness", "total_bits", "n_extended"],
                   [[h, r["level"], r["seed"], r["completeness"], r["total_bits"], r["n_extended"]] for r in res.runs])
        _write_csv(run.path("sweep_completeness_curve.csv"),
                   ["config_hash", "level", "completeness", "mean_bits", "std_bits"],
                   [[h, c["level"], c["completeness"], c["mean_bits"], c["std_bits"]] for c in res.curve])
        run.register("sweep_completeness.csv", "sweep_completeness_curve.csv")
        written += [run.path("sweep_completeness.csv"), run.path("sweep_completeness_curve.csv"),
                    run.write_json("sweep_completeness.json", {"curve": res.curve, "spearman": res.spearman})]
    if what in ("msl", "both"):
        ds = generate_synthetic(cfg.synth) if cfg.synth is not None else run.dataset()
        modes = (cfg.mode,)
        rows = msl_sweep(ds, cfg.sweep_msls, cfg.hyper, cfg.seed, cfg.fractions, modes)
        keys = ["msl", "mode", "task_accuracy", "concept_accuracy", "n_nodes", "n_global_nodes", "n_extended",
                "total_bits"]
        _write_csv(run.path("sweep_msl.csv"), ["config_hash", *keys], [[h, *(r[k] for k in keys)] for r in rows])
        run.register("sweep_msl.csv")
        written.append(run.path("sweep_msl.csv"))
    return written


def cmd_run(cfg: RunConfig) -> list[Path]:
    """All stages in order: synth (if synthetic), train, calibrate, fit, eval, inspect."""
    out = []
    if cfg.synth is not None:
        out += cmd_synth(cfg)
    if cfg.probabilities is None:
        out += cmd_train(cfg)
    if cfg.calibrate:
        out += cmd_calibrate(cfg)
    for cmd in (cmd_fit, cmd_eval, cmd_inspect):
        out += cmd(cfg)
    return out


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "sweep": cmd_sweep,
    "run": cmd_run,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring RunConfig")
    common.add_argument("--seed", type=int)
    common.add_argument("--msl", type=int)
    common.add_argument("--mode", choices=[SEQ, JOINT])
    common.add_argument("--lambda-c", type=float, dest="lambda_c")
    common.add_argument("--calibration", choices=[PLATT_TEMP, NO_CAL])
    common.add_argument("--probabilities", help="CSV of concept probabilities replacing the trained predictor")
    common.add_argument("--out", help="run directory")

    parser = argparse.ArgumentParser(prog="mixedcbm", description="Mixed tree concept bottleneck models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").split("\n")[0] or None)
        if name == "sweep":
            p.add_argument("--what", choices=["completeness", "msl", "both"], default="both")
    return parser


def config_from_args(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = load_json(args.config)
        except (OSError, ValueError) as e:
            raise ConfigError(f"{args.config}: {e}") from None
    for key in ("seed", "msl", "mode", "calibration", "probabilities", "out"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    if args.mode is not None and args.calibration is None and "calibration" in d and args.mode != d.get("mode"):
        d.pop("calibration")  # let the new mode pick its default
    if args.lambda_c is not None:
        d["hyper"] = {**d.get("hyper", TrainHyper().to_dict()), "lambda_c": args.lambda_c}
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "sweep":
            paths = cmd_sweep(cfg, args.what)
        else:
            paths = COMMANDS[args.command](cfg)
    except (ConfigError, ArtifactError, DataError, SourceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
