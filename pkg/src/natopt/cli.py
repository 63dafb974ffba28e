"""Command-line entry point and experiment orchestration.

One JSON config drives every subcommand; each run writes its artifacts plus
a manifest (resolved config, derived seeds, artifact digests) into the
output directory.  All commands are deterministic given their config: the
manifest's wall-clock timestamps are the only non-reproducible bytes.

Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import __version__, kernels
from .metrics import (
    EvalSpec,
    Evaluator,
    append_metric_row,
    build_reference_stats,
    exact_tv,
    fit_stats,
    frechet_distance,
)
from .optimizer import (
    GROUPS,
    AutoNatConfig,
    GenOptConfig,
    LineSearchConfig,
    OptTrace,
    TraceRecord,
    ablate_hyperparameter_group,
    autonat,
    concurrent_search,
    line_search_training,
    optimize_generation,
)
from .predictor import (
    ModelPredictor,
    OraclePredictor,
    TrainConfig,
    checkpoint_to_json,
    init_model,
    model_from_json,
    train,
)
from .sampler import confidence_policy, fixed_order_policy, generate_batch
from .strategy import (
    ArcsineMaskRatio,
    GenerationSchedule,
    HeuristicParams,
    TrainingStrategy,
    deserialize_schedule,
    deserialize_strategy,
    heuristic_schedule,
    serialize_schedule,
    serialize_strategy,
)
from .streams import (
    TAG_CHAIN,
    TAG_DATASET,
    TAG_EVAL,
    TAG_GENERATE,
    TAG_MODEL_INIT,
    TAG_TRAIN,
    derive_seed,
    sample_stream,
)
from .toyworld import ENUMERATION_LIMIT, load_sequences, make_chain, sample_dataset, save_sequences

SUITES = ("contribution", "iterations", "alternating-vs-concurrent", "ablate-groups")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "toyworld": {"K": 8, "N": 16, "C": 4, "chain_seed": None},
    "model": {"D": 16, "H": 64, "w": 2, "init_seed": None},
    "data": {"per_class": 250, "dataset_seed": None},
    "train": {
        "steps": 20000,
        "batch_size": 1,
        "lr": 0.05,
        "null_prob": 0.1,
        "train_seed": None,
        "mask_dist": {"kind": "arcsine"},
    },
    "schedule": {"T": 4},
    "heuristic": {"lam": 4.5, "k": 2.0},
    "eval": {
        "metric": "token-frechet",
        "samples": 10000,
        "base_seed": None,
        "reference_size": 10000,
        "class_mixture": None,
    },
    "genopt": {"epsilon": 0.05, "eta": 0.1, "max_iters": 30, "eta_decay": 0.5, "patience": 5},
    "linesearch": {
        "grid": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        "refine_rounds": 1,
        "candidate_train_frac": 0.25,
    },
    "autonat": {"conv_threshold": 0.01, "max_alternations": 3},
    "initial_strategy": {"alpha": 1.0, "beta": 1.0},
}


def _merge_defaults(raw: dict, defaults: dict, path: str = "") -> dict:
    out = {}
    for key, default in defaults.items():
        if key in raw:
            val = raw[key]
            if isinstance(default, dict) and default and not key.endswith("mask_dist"):
                if not isinstance(val, dict):
                    raise ConfigError(f"config field {path + key} must be an object")
                out[key] = _merge_defaults(val, default, path + key + ".")
            else:
                out[key] = val
        else:
            out[key] = default
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(path + u for u in unknown)}")
    return out


@dataclass
class RunSetup:
    """Everything a command needs, resolved from one config dict."""

    config: dict
    seeds: dict
    chain: object
    train_cfg: TrainConfig
    eval_spec: EvalSpec
    gen_cfg: GenOptConfig
    ls_cfg: LineSearchConfig
    an_cfg: AutoNatConfig
    heuristic: HeuristicParams
    initial_strategy: TrainingStrategy
    T: int
    threads: int

    @property
    def N(self):
        return self.chain.N


def resolve_config(raw: dict) -> RunSetup:
    cfg = _merge_defaults(raw, DEFAULT_CONFIG)
    seed = cfg["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    tw = cfg["toyworld"]
    seeds = {
        "chain": tw["chain_seed"] if tw["chain_seed"] is not None else derive_seed(seed, TAG_CHAIN),
        "dataset": cfg["data"]["dataset_seed"]
        if cfg["data"]["dataset_seed"] is not None
        else derive_seed(seed, TAG_DATASET),
        "model_init": cfg["model"]["init_seed"]
        if cfg["model"]["init_seed"] is not None
        else derive_seed(seed, TAG_MODEL_INIT),
        "train": cfg["train"]["train_seed"]
        if cfg["train"]["train_seed"] is not None
        else derive_seed(seed, TAG_TRAIN),
        "eval": cfg["eval"]["base_seed"]
        if cfg["eval"]["base_seed"] is not None
        else derive_seed(seed, TAG_EVAL),
    }
    try:
        chain = make_chain(tw["K"], tw["N"], tw["C"], seeds["chain"])
        train_cfg = TrainConfig(
            steps=cfg["train"]["steps"],
            batch_size=cfg["train"]["batch_size"],
            lr=cfg["train"]["lr"],
            null_prob=cfg["train"]["null_prob"],
            seed=seeds["train"],
        )
        mixture = cfg["eval"]["class_mixture"]
        eval_spec = EvalSpec(
            metric=cfg["eval"]["metric"],
            samples=cfg["eval"]["samples"],
            base_seed=seeds["eval"],
            class_mixture=tuple(mixture) if mixture is not None else None,
            reference_size=cfg["eval"]["reference_size"],
        )
        gen_cfg = GenOptConfig(**cfg["genopt"])
        ls = cfg["linesearch"]
        ls_cfg = LineSearchConfig(
            grid=tuple(ls["grid"]),
            refine_rounds=ls["refine_rounds"],
            candidate_train_frac=ls["candidate_train_frac"],
        )
        an_cfg = AutoNatConfig(**cfg["autonat"])
        heuristic = HeuristicParams(lam=cfg["heuristic"]["lam"], k=cfg["heuristic"]["k"])
        strat = TrainingStrategy(**cfg["initial_strategy"])
        T = cfg["schedule"]["T"]
        if not isinstance(T, int) or T < 1:
            raise ValueError(f"schedule T must be a positive integer, got {T!r}")
        if T > tw["N"]:
            raise ValueError(f"schedule T={T} exceeds sequence length N={tw['N']}")
        md = cfg["train"]["mask_dist"]
        _mask_dist_from_config(md)  # validate now
        threads = cfg["threads"]
        if not isinstance(threads, int) or threads < 1:
            raise ValueError(f"threads must be a positive integer, got {threads!r}")
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunSetup(
        config=cfg,
        seeds=seeds,
        chain=chain,
        train_cfg=train_cfg,
        eval_spec=eval_spec,
        gen_cfg=gen_cfg,
        ls_cfg=ls_cfg,
        an_cfg=an_cfg,
        heuristic=heuristic,
        initial_strategy=strat,
        T=T,
        threads=threads,
    )


def _mask_dist_from_config(md: dict):
    if not isinstance(md, dict) or "kind" not in md:
        raise ConfigError("train.mask_dist must be an object with a 'kind' field")
    if md["kind"] == "arcsine":
        return ArcsineMaskRatio()
    if md["kind"] == "beta":
        return TrainingStrategy(alpha=float(md["alpha"]), beta=float(md["beta"]))
    raise ConfigError(f"unknown mask_dist kind {md['kind']!r}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class RunDir:
    """Output directory with a manifest written before and after the work."""

    def __init__(
        self,
        out_dir: str,
        command: str,
        setup: RunSetup,
        extra: dict | None = None,
        resuming: bool = False,
    ):
        self.dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        ident = {"command": command, "config": setup.config}
        if extra:
            ident["args"] = extra
        self.run_id = hashlib.sha256(_canonical(ident).encode()).hexdigest()[:12]
        if resuming:
            prev = os.path.join(out_dir, "manifest.json")
            if os.path.exists(prev):
                with open(prev, encoding="utf-8") as fh:
                    old = json.load(fh)
                if old.get("run_id") != self.run_id:
                    raise ConfigError(
                        "resume directory was produced by a different config/command"
                    )
        self.manifest = {
            "tool_version": __version__,
            "backend": kernels.backend_name(),
            "command": command,
            "run_id": self.run_id,
            "config": setup.config,
            "args": extra or {},
            "seeds": setup.seeds,
            "started_at": datetime.now(timezone.utc).isoformat(),
            "finished_at": None,
            "status": "running",
            "artifacts": {},
        }
        self._write_manifest()

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def _write_manifest(self):
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_text(self, name: str, text: str) -> str:
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(text)
        return p

    def finalize(self, status: str = "complete"):
        arts = {}
        for root, _dirs, files in os.walk(self.dir):
            for fname in files:
                full = os.path.join(root, fname)
                rel = os.path.relpath(full, self.dir)
                if rel == "manifest.json":
                    continue
                arts[rel] = _sha256(full)
        self.manifest["artifacts"] = arts
        self.manifest["status"] = status
        self.manifest["finished_at"] = datetime.now(timezone.utc).isoformat()
        self._write_manifest()


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def _setup_from_args(args) -> RunSetup:
    raw = _load_config(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        raw["threads"] = args.threads
    return resolve_config(raw)


def _write_loss_csv(path, losses):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, val in enumerate(losses):
            writer.writerow([i, repr(float(val))])


def _train_model(setup: RunSetup, mask_dist, steps: int | None = None):
    dataset = sample_dataset(
        setup.chain, setup.config["data"]["per_class"], setup.seeds["dataset"], setup.seeds["chain"]
    )
    model = init_model(
        setup.chain.K,
        setup.chain.N,
        setup.chain.C,
        D=setup.config["model"]["D"],
        H=setup.config["model"]["H"],
        w=setup.config["model"]["w"],
        seed=setup.seeds["model_init"],
    )
    cfg = setup.train_cfg
    if steps is not None:
        cfg = TrainConfig(
            steps=steps, batch_size=cfg.batch_size, lr=cfg.lr, null_prob=cfg.null_prob, seed=cfg.seed
        )
    return train(model, dataset, mask_dist, cfg)


def cmd_train(args) -> int:
    setup = _setup_from_args(args)
    run = RunDir(args.out, "train", setup)
    mask_dist = _mask_dist_from_config(setup.config["train"]["mask_dist"])
    model, losses = _train_model(setup, mask_dist)
    run.write_text("checkpoint.json", checkpoint_to_json(model))
    _write_loss_csv(run.path("loss_log.csv"), losses)
    run.finalize()
    print(f"checkpoint written to {run.path('checkpoint.json')}")
    return 0


def _predictor_from_args(args, setup: RunSetup):
    if args.oracle:
        return OraclePredictor(setup.chain)
    if not args.checkpoint:
        raise ConfigError("need --oracle or --checkpoint")
    with open(args.checkpoint, encoding="utf-8") as fh:
        model = model_from_json(
            fh.read(),
            expect_arch={
                "K": setup.chain.K,
                "N": setup.chain.N,
                "C": setup.chain.C,
                "D": setup.config["model"]["D"],
                "H": setup.config["model"]["H"],
                "w": setup.config["model"]["w"],
            },
        )
    return ModelPredictor(model)


def _schedule_from_args(args, setup: RunSetup) -> GenerationSchedule:
    if args.schedule:
        with open(args.schedule, encoding="utf-8") as fh:
            sched = deserialize_schedule(fh.read())
        sched.validate_for_length(setup.N)
        return sched
    return heuristic_schedule(setup.T, setup.N, setup.heuristic)


def _policy_from_args(args, setup: RunSetup):
    if getattr(args, "fixed_order", False):
        return fixed_order_policy(range(setup.N))
    return confidence_policy()


def _draw_generation_streams(base_seed: int, count: int, T: int, N: int, mixture: np.ndarray):
    """Per-sample class draws and uniform tables, one stream per sample."""
    classes = np.empty(count, dtype=np.int64)
    utables = np.empty((count, T, 2, N))
    cdf = np.cumsum(mixture)
    for j in range(count):
        g = sample_stream(base_seed, j)
        u0 = g.random()
        classes[j] = min(int((cdf <= u0 * cdf[-1]).sum()), mixture.shape[0] - 1)
        utables[j] = g.random((T, 2, N))
    return classes, utables


def cmd_generate(args) -> int:
    setup = _setup_from_args(args)
    sched = _schedule_from_args(args, setup)
    extra = {"count": args.count, "oracle": bool(args.oracle)}
    if args.schedule:
        extra["schedule_digest"] = _sha256(args.schedule)
    run = RunDir(args.out, "generate", setup, extra)
    predictor = _predictor_from_args(args, setup)
    policy = _policy_from_args(args, setup)
    base_seed = derive_seed(setup.seeds["eval"], TAG_GENERATE)
    mixture = np.full(setup.chain.C, 1.0 / setup.chain.C)
    classes, utables = _draw_generation_streams(base_seed, args.count, sched.T, setup.N, mixture)
    tokens = generate_batch(predictor, sched, classes, policy, utables)
    save_sequences(
        run.path("sequences.txt"),
        classes,
        tokens,
        {"K": setup.chain.K, "N": setup.chain.N, "base_seed": base_seed, "run_id": run.run_id},
    )
    run.finalize()
    print(f"wrote {args.count} sequences to {run.path('sequences.txt')}")
    return 0


def cmd_eval(args) -> int:
    setup = _setup_from_args(args)
    run_extra = {"sequences": bool(args.sequences), "oracle": bool(args.oracle)}
    run = RunDir(args.out, "eval", setup, run_extra)
    spec = setup.eval_spec
    if spec.metric == "exact-tv" and setup.chain.K**setup.chain.N > ENUMERATION_LIMIT:
        raise ConfigError(
            f"exact-tv needs K^N <= {ENUMERATION_LIMIT}, got {setup.chain.K ** setup.chain.N}"
        )
    mixture = (
        np.asarray(spec.class_mixture, dtype=float)
        if spec.class_mixture is not None
        else np.full(setup.chain.C, 1.0 / setup.chain.C)
    )
    if args.sequences:
        _labels, tokens, _meta = load_sequences(args.sequences)
        if spec.metric == "exact-tv":
            value = exact_tv(tokens, setup.chain, mixture)
        else:
            ref_stats, _ = build_reference_stats(setup.chain, spec, mixture)
            value = frechet_distance(fit_stats(tokens, setup.chain.K), ref_stats)
    else:
        sched = _schedule_from_args(args, setup)
        predictor = _predictor_from_args(args, setup)
        policy = _policy_from_args(args, setup)
        harness = Evaluator(setup.chain, spec, sched.T, policy)
        value = harness.evaluate(predictor, sched)
    append_metric_row(
        run.path("metrics.csv"), run.run_id, spec.metric, value, spec.samples, spec.base_seed
    )
    run.finalize()
    print(f"F = {value!r}")
    return 0


class DirStore:
    """Phase store for resumable optimization runs, one JSON file per phase."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _path(self, name: str) -> str:
        return os.path.join(self.root, name + ".json")

    def get(self, name: str):
        p = self._path(name)
        if not os.path.exists(p):
            return None
        with open(p, encoding="utf-8") as fh:
            payload = json.load(fh)
        return self._decode(name, payload)

    def put(self, name: str, value) -> None:
        payload = self._encode(name, value)
        with open(self._path(name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    def _encode(self, name: str, value):
        if name == "init_train":
            return {"checkpoint": json.loads(checkpoint_to_json(value))}
        if name.endswith("_gen"):
            sched, trace = value
            return {
                "schedule": json.loads(serialize_schedule(sched)),
                "trace": {
                    "T": trace.T,
                    "records": [
                        {
                            "iteration": rec.iteration,
                            "xi": list(map(float, rec.xi)),
                            "F": rec.F,
                            "accepted": rec.accepted,
                        }
                        for rec in trace.records
                    ],
                },
            }
        if name.endswith("_train"):
            return {"strategy": json.loads(serialize_strategy(value))}
        if name.endswith("_retrain"):
            model, F = value
            return {"checkpoint": json.loads(checkpoint_to_json(model)), "F": F}
        raise ValueError(f"unknown phase {name!r}")

    def _decode(self, name: str, payload):
        if name == "init_train":
            return model_from_json(_canonical(payload["checkpoint"]))
        if name.endswith("_gen"):
            sched = deserialize_schedule(_canonical(payload["schedule"]))
            tr = payload["trace"]
            trace = OptTrace(T=tr["T"])
            for rec in tr["records"]:
                trace.records.append(
                    TraceRecord(
                        iteration=rec["iteration"],
                        xi=np.array(rec["xi"]),
                        F=rec["F"],
                        accepted=rec["accepted"],
                    )
                )
            return sched, trace
        if name.endswith("_train"):
            return deserialize_strategy(_canonical(payload["strategy"]))
        if name.endswith("_retrain"):
            return model_from_json(_canonical(payload["checkpoint"])), payload["F"]
        raise ValueError(f"unknown phase {name!r}")


class TrainBudget:
    """Counts training steps spent, for equal-budget comparisons."""

    def __init__(self):
        self.steps = 0


def _autonat_driver(setup: RunSetup, store=None, budget: TrainBudget | None = None, phase_hook=None):
    """Wire the alternating loop to this run's chain, budgets, and evaluator cache."""
    full_steps = setup.train_cfg.steps
    cand_steps = max(1, int(round(full_steps * setup.ls_cfg.candidate_train_frac)))

    def train_fn(mask_dist, full: bool):
        steps = full_steps if full else cand_steps
        if budget is not None:
            budget.steps += steps
        model, _losses = _train_model(setup, mask_dist, steps=steps)
        return model

    evaluator = Evaluator(setup.chain, setup.eval_spec, setup.T)

    def make_F(model):
        pred = ModelPredictor(model)
        return lambda sched: evaluator.evaluate(pred, sched)

    initial = heuristic_schedule(setup.T, setup.N, setup.heuristic)
    result = autonat(
        initial,
        setup.initial_strategy,
        train_fn,
        make_F,
        setup.gen_cfg,
        setup.ls_cfg,
        setup.an_cfg,
        setup.N,
        threads=setup.threads,
        store=store,
        phase_hook=phase_hook,
    )
    return result, evaluator, train_fn, make_F, (full_steps, cand_steps)


def _baseline_F(setup: RunSetup, evaluator: Evaluator, budget: TrainBudget | None = None):
    """Heuristic schedule + arcsine-trained model under the same frozen evaluator."""
    steps = setup.train_cfg.steps
    if budget is not None:
        budget.steps += steps
    model, _ = _train_model(setup, ArcsineMaskRatio())
    sched = heuristic_schedule(setup.T, setup.N, setup.heuristic)
    return evaluator.evaluate(ModelPredictor(model), sched), model, sched


def cmd_optimize_gen(args) -> int:
    setup = _setup_from_args(args)
    out = args.resume if args.resume else args.out
    run = RunDir(out, "optimize-gen", setup, resuming=bool(args.resume))
    mask_dist = _mask_dist_from_config(setup.config["train"]["mask_dist"])
    store = DirStore(run.path("run_state"))
    model = store.get("init_train")
    if model is None:
        model, _ = _train_model(setup, mask_dist)
        store.put("init_train", model)
    evaluator = Evaluator(setup.chain, setup.eval_spec, setup.T)
    pred = ModelPredictor(model)
    cached = store.get("alt1_gen")
    if cached is None:
        initial = heuristic_schedule(setup.T, setup.N, setup.heuristic)
        sched, trace = optimize_generation(
            lambda s: evaluator.evaluate(pred, s), initial, setup.gen_cfg, setup.N,
            threads=setup.threads,
        )
        store.put("alt1_gen", (sched, trace))
    else:
        sched, trace = cached
    run.write_text("schedule.json", serialize_schedule(sched))
    trace.to_csv(run.path("trace.csv"))
    append_metric_row(
        run.path("metrics.csv"),
        run.run_id,
        setup.eval_spec.metric,
        trace.records[-1].F,
        setup.eval_spec.samples,
        setup.eval_spec.base_seed,
    )
    run.finalize()
    print(f"best F = {trace.records[-1].F!r}")
    return 0


def cmd_optimize_train(args) -> int:
    setup = _setup_from_args(args)
    run = RunDir(args.out, "optimize-train", setup)
    sched = _schedule_from_args(args, setup)
    evaluator = Evaluator(setup.chain, setup.eval_spec, setup.T)
    cand_steps = max(1, int(round(setup.train_cfg.steps * setup.ls_cfg.candidate_train_frac)))

    def candidate(alpha, beta):
        model, _ = _train_model(setup, TrainingStrategy(alpha, beta), steps=cand_steps)
        return evaluator.evaluate(ModelPredictor(model), sched)

    result = line_search_training(candidate, setup.ls_cfg, setup.initial_strategy)
    run.write_text("strategy.json", serialize_strategy(result.strategy))
    with open(run.path("linesearch.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", "F"])
        for (a, b), val in sorted(result.evaluations.items()):
            writer.writerow([repr(float(a)), repr(float(b)), repr(float(val))])
    run.finalize()
    print(f"best strategy: alpha={result.strategy.alpha} beta={result.strategy.beta} F={result.F!r}")
    return 0


def _write_alternations_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alternation", "F_gen_phase", "F_after_retrain", "accepted_F"])
        for rec in history:
            writer.writerow(
                [
                    rec.index,
                    repr(float(rec.F_gen_phase)),
                    repr(float(rec.F_after_retrain)),
                    repr(float(rec.accepted_F)),
                ]
            )


def cmd_autonat(args) -> int:
    setup = _setup_from_args(args)
    out = args.resume if args.resume else args.out
    run = RunDir(out, "autonat", setup, resuming=bool(args.resume))
    store = DirStore(run.path("run_state"))
    result, _evaluator, _train_fn, _make_F, _ = _autonat_driver(setup, store=store)
    run.write_text("schedule.json", serialize_schedule(result.schedule))
    run.write_text("strategy.json", serialize_strategy(result.strategy))
    run.write_text("checkpoint.json", checkpoint_to_json(result.model))
    for i, trace in enumerate(result.gen_traces, start=1):
        trace.to_csv(run.path(f"trace_alt{i}.csv"))
    _write_alternations_csv(run.path("alternations.csv"), result.history)
    append_metric_row(
        run.path("metrics.csv"),
        run.run_id,
        setup.eval_spec.metric,
        result.F,
        setup.eval_spec.samples,
        setup.eval_spec.base_seed,
    )
    run.finalize()
    print(f"alternations: {result.alternations}, final F = {result.F!r}")
    return 0


def _report(run: RunDir, name: str, headers: list[str], rows: list[list], title: str) -> None:
    with open(run.path(f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)
    lines = [f"# {title}", "", "| " + " | ".join(headers) + " |"]
    lines.append("|" + "|".join(["---"] * len(headers)) + "|")
    for row in rows:
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    run.write_text(f"{name}.md", "\n".join(lines) + "\n")


def cmd_reproduce(args) -> int:
    if args.suite not in SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}; expected one of {SUITES}")
    setup = _setup_from_args(args)
    run = RunDir(args.out, f"reproduce-{args.suite}", setup, {"suite": args.suite})

    if args.suite == "contribution":
        evaluator = Evaluator(setup.chain, setup.eval_spec, setup.T)
        F_neither, arcsine_model, heur_sched = _baseline_F(setup, evaluator)
        arcsine_pred = ModelPredictor(arcsine_model)
        gen_only_sched, gen_only_trace = optimize_generation(
            lambda s: evaluator.evaluate(arcsine_pred, s),
            heur_sched,
            setup.gen_cfg,
            setup.N,
            threads=setup.threads,
        )
        F_gen_only = gen_only_trace.records[-1].F
        cand_steps = max(1, int(round(setup.train_cfg.steps * setup.ls_cfg.candidate_train_frac)))

        def candidate(alpha, beta):
            model, _ = _train_model(setup, TrainingStrategy(alpha, beta), steps=cand_steps)
            return evaluator.evaluate(ModelPredictor(model), heur_sched)

        ls = line_search_training(candidate, setup.ls_cfg, setup.initial_strategy)
        train_only_model, _ = _train_model(setup, ls.strategy)
        F_train_only = evaluator.evaluate(ModelPredictor(train_only_model), heur_sched)
        result, _, _, _, _ = _autonat_driver(setup)
        rows = [
            ["yes", "yes", repr(float(result.F))],
            ["no", "yes", repr(float(F_gen_only))],
            ["yes", "no", repr(float(F_train_only))],
            ["no", "no", repr(float(F_neither))],
        ]
        _report(
            run,
            "report",
            ["train_optimized", "gen_optimized", "F"],
            rows,
            "Contribution of optimized training and generation strategies",
        )
        print(f"both={result.F!r} gen-only={F_gen_only!r} train-only={F_train_only!r} neither={F_neither!r}")

    elif args.suite == "iterations":
        result, evaluator, _, _, _ = _autonat_driver(setup)
        F_base, _, _ = _baseline_F(setup, evaluator)
        rows = [["baseline", repr(float(F_base))]]
        for rec in result.history:
            rows.append([str(rec.index), repr(float(rec.accepted_F))])
        _report(run, "report", ["alternation", "accepted_F"], rows, "F per alternation")
        print(f"baseline={F_base!r} final={result.F!r}")

    elif args.suite == "alternating-vs-concurrent":
        budget = TrainBudget()
        result, evaluator, train_fn, make_F, (full_steps, cand_steps) = _autonat_driver(
            setup, budget=budget
        )
        alternating_steps = budget.steps
        initial = heuristic_schedule(setup.T, setup.N, setup.heuristic)
        conc = concurrent_search(
            initial,
            setup.initial_strategy,
            train_fn,
            make_F,
            setup.gen_cfg,
            setup.N,
            max_train_steps=alternating_steps,
            candidate_steps=cand_steps,
            full_steps=full_steps,
            max_iters=setup.gen_cfg.max_iters * setup.an_cfg.max_alternations,
            threads=setup.threads,
        )
        rows = [
            ["alternating", str(alternating_steps), repr(float(result.F))],
            ["concurrent", str(conc.train_steps_used), repr(float(conc.F))],
        ]
        _report(run, "report", ["method", "train_steps", "F"], rows, "Alternating vs concurrent optimization")
        print(f"alternating={result.F!r} concurrent={conc.F!r}")

    elif args.suite == "ablate-groups":
        mask_dist = _mask_dist_from_config(setup.config["train"]["mask_dist"])
        model, _ = _train_model(setup, mask_dist)
        evaluator = Evaluator(setup.chain, setup.eval_spec, setup.T)
        pred = ModelPredictor(model)
        F_eval = lambda s: evaluator.evaluate(pred, s)
        initial = heuristic_schedule(setup.T, setup.N, setup.heuristic)
        _sched, base_trace = optimize_generation(
            F_eval, initial, setup.gen_cfg, setup.N, threads=setup.threads
        )
        F_base = base_trace.records[-1].F
        rows = [["(none)", repr(float(F_base)), repr(0.0)]]
        for group in GROUPS:
            res = ablate_hyperparameter_group(
                F_eval, initial, F_base, group, setup.gen_cfg, setup.N, threads=setup.threads
            )
            rows.append([group, repr(float(res.F_frozen)), repr(float(res.delta))])
        _report(run, "report", ["frozen_group", "F", "delta_vs_full"], rows, "Hyperparameter group ablation")
        print("; ".join(f"{r[0]}: dF={r[2]}" for r in rows[1:]))

    run.finalize()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="natopt",
        description="Parallel-decoding token generation and strategy search on synthetic Markov tasks.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run config (defaults apply for missing fields)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--threads", type=int, help="worker cap; never changes results")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("train", help="train a model with masked token modeling")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode sequences from a checkpoint or the oracle")
    common(p)
    p.add_argument("--schedule", help="schedule JSON file (default: heuristic baseline)")
    p.add_argument("--checkpoint", help="model checkpoint file")
    p.add_argument("--oracle", action="store_true", help="use the exact-chain oracle predictor")
    p.add_argument("--fixed-order", action="store_true", help="decode positions left to right")
    p.add_argument("--count", type=int, required=True, help="number of sequences")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate F for a predictor or a sequence file")
    common(p)
    p.add_argument("--schedule", help="schedule JSON file (default: heuristic baseline)")
    p.add_argument("--checkpoint", help="model checkpoint file")
    p.add_argument("--oracle", action="store_true", help="use the exact-chain oracle predictor")
    p.add_argument("--fixed-order", action="store_true", help="decode positions left to right")
    p.add_argument("--sequences", help="evaluate an existing sequence file instead of generating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("optimize-gen", help="search the generation schedule for a trained model")
    common(p, out_required=False)
    p.add_argument("--resume", help="resume (and write into) an earlier run directory")
    p.set_defaults(func=cmd_optimize_gen)

    p = sub.add_parser("optimize-train", help="line-search the Beta mask-ratio distribution")
    common(p)
    p.add_argument("--schedule", help="fixed schedule JSON (default: heuristic baseline)")
    p.set_defaults(func=cmd_optimize_train)

    p = sub.add_parser("autonat", help="alternate schedule search and training-distribution search")
    common(p, out_required=False)
    p.add_argument("--resume", help="resume (and write into) an earlier run directory")
    p.set_defaults(func=cmd_autonat)

    p = sub.add_parser("reproduce", help="run a named experiment suite and write a report")
    common(p)
    p.add_argument("suite", help=f"one of {', '.join(SUITES)}")
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "resume", None) is None and getattr(args, "out", None) is None:
        print("error: need --out (or --resume)", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
