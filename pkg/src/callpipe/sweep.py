"""Hyperparameter sweeps: search spaces, hyperband rungs, leaderboard and importance.

A sweep file uses the same text syntax as the config tree::

    method: random            # grid | random (bayes falls back to random)
    metric: {name: auc, goal: maximize}
    parameters:
      model: {distribution: categorical, values: [defaults, Christoph_CNN]}
      data.train_dataset.augmentations_p: {distribution: uniform, min: 0, max: 1}
      optim.epochs: {value: 30}
    early_terminate: {type: hyperband, min_iter: 10, eta: 3}

Parameter keys naming a whole config group become group swaps
(``model=Christoph_CNN``); dotted keys become leaf overrides.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .config import GROUPS, ConfigError, ResolvedConfig, dump_text, parse_scalar, parse_text

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("categorical", "uniform", "int_uniform", "fixed")


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class Distribution:
    kind: str
    values: tuple = ()
    min: float | None = None
    max: float | None = None
    value: Any = None

    def sample(self, rng: np.random.Generator) -> Any:
        if self.kind == "categorical":
            return self.values[int(rng.integers(len(self.values)))]
        if self.kind == "uniform":
            return float(rng.uniform(self.min, self.max))
        if self.kind == "int_uniform":
            return int(rng.integers(int(self.min), int(self.max) + 1))
        return self.value

    def grid_values(self, name: str) -> tuple:
        if self.kind == "categorical":
            return self.values
        if self.kind == "fixed":
            return (self.value,)
        raise SweepError(f"grid search cannot enumerate {self.kind} parameter {name!r}")


@dataclass(frozen=True)
class Hyperband:
    min_iter: int = 10
    eta: int = 3

    def rung(self, k: int) -> int:
        return self.min_iter * self.eta ** k


@dataclass
class SweepSpec:
    method: str
    metric: str
    goal: str
    parameters: dict[str, Distribution]
    early_terminate: Hyperband | None = None
    budget: int | None = None

    @property
    def maximize(self) -> bool:
        return self.goal == "maximize"


def _distribution(name: str, node: Any) -> Distribution:
    if not isinstance(node, dict):
        return Distribution("fixed", value=node)
    if "value" in node and "distribution" not in node:
        return Distribution("fixed", value=node["value"])
    kind = node.get("distribution")
    if kind not in DISTRIBUTIONS:
        raise SweepError(f"parameters.{name}: unknown distribution {kind!r}; known: {list(DISTRIBUTIONS)}")
    if kind == "fixed":
        if "value" not in node:
            raise SweepError(f"parameters.{name}: fixed distribution needs 'value'")
        return Distribution("fixed", value=node["value"])
    if kind == "categorical":
        values = node.get("values")
        if not isinstance(values, list) or not values:
            raise SweepError(f"parameters.{name}: categorical needs a non-empty 'values' list")
        return Distribution("categorical", values=tuple(values))
    try:
        lo, hi = float(node["min"]), float(node["max"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SweepError(f"parameters.{name}: {kind} needs numeric 'min' and 'max'") from exc
    if not lo < hi:
        raise SweepError(f"parameters.{name}: need min < max, got {lo} >= {hi}")
    if kind == "int_uniform" and (lo != int(lo) or hi != int(hi)):
        raise SweepError(f"parameters.{name}: int_uniform bounds must be integers")
    return Distribution(kind, min=lo, max=hi)


def parse_sweep_spec(source: str | Path, text: str | None = None) -> SweepSpec:
    """Parse a sweep file (or ``text`` when given, with ``source`` as its name)."""
    if text is None:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SweepError(f"cannot read sweep spec {path}: {exc}") from exc
    try:
        tree = parse_text(text, str(source))
    except ConfigError as exc:
        raise SweepError(str(exc)) from exc
    if not isinstance(tree, dict):
        raise SweepError(f"{source}: sweep spec must be a mapping")

    method = str(tree.get("method", "random"))
    if method == "bayes":
        log.warning("%s: method 'bayes' is not supported; using random search", source)
        method = "random"
    if method not in ("grid", "random"):
        raise SweepError(f"{source}: unknown method {method!r}")

    metric = tree.get("metric", {})
    name = str(metric.get("name", "auc"))
    goal = str(metric.get("goal", "maximize"))
    if goal not in ("maximize", "minimize"):
        raise SweepError(f"{source}: metric.goal must be maximize or minimize, got {goal!r}")

    params = tree.get("parameters")
    if not isinstance(params, dict) or not params:
        raise SweepError(f"{source}: 'parameters' must be a non-empty mapping")
    for key in params:
        if "=" in key:
            raise SweepError(f"{source}: parameter name {key!r} may not contain '='")
    dists = {k: _distribution(k, v) for k, v in params.items()}

    hb = None
    et = tree.get("early_terminate")
    if et:
        kind = et.get("type")
        if kind != "hyperband":
            raise SweepError(f"{source}: unknown early_terminate type {kind!r}")
        hb = Hyperband(int(et.get("min_iter", 10)), int(et.get("eta", 3)))
        if hb.min_iter < 1 or hb.eta < 2:
            raise SweepError(f"{source}: hyperband needs min_iter >= 1 and eta >= 2")

    budget = tree.get("budget")
    return SweepSpec(method, name, goal, dists, hb, int(budget) if budget is not None else None)


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------


def sample_candidate(spec: SweepSpec, rng: np.random.Generator) -> dict[str, Any]:
    return {name: d.sample(rng) for name, d in spec.parameters.items()}


def enumerate_grid(spec: SweepSpec) -> list[dict[str, Any]]:
    """Cartesian product in parameter order, last parameter varying fastest."""
    names = list(spec.parameters)
    axes = [spec.parameters[n].grid_values(n) for n in names]
    return [dict(zip(names, combo)) for combo in itertools.product(*axes)]


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if "=" in text:
        raise SweepError(f"override value {text!r} may not contain '='")
    if isinstance(value, str) and (parse_scalar(text) != text or " " in text):
        return json.dumps(text)
    return text


def to_overrides(candidate: Mapping[str, Any]) -> list[str]:
    """Group-level keys swap groups, dotted keys set leaves."""
    out = []
    for name, value in candidate.items():
        if "." not in name and name not in GROUPS:
            raise SweepError(f"parameter {name!r} is neither a config group nor a dotted path")
        out.append(f"{name}={_format_value(value)}")
    return out


# ---------------------------------------------------------------------------
# Runs and hyperband
# ---------------------------------------------------------------------------


@dataclass
class SweepRun:
    run_id: str
    params: dict[str, Any]
    overrides: list[str]
    history: list[float] = field(default_factory=list)
    status: str = "running"  # running | early-terminated | finished | failed
    error: str | None = None

    @property
    def final_metric(self) -> float | None:
        return self.history[-1] if self.history else None

    def best_metric(self, maximize: bool = True) -> float | None:
        if not self.history:
            return None
        return max(self.history) if maximize else min(self.history)


# yields one metric value per completed epoch
TrainFn = Callable[[SweepRun], Iterator[float]]


def hyperband_filter(runs_at_rung: Mapping[str, Sequence[float]], rung_epoch: int, eta: int = 3,
                     maximize: bool = True) -> set[str]:
    """Ids of the ``ceil(n / eta)`` runs with the best best-so-far metric up to ``rung_epoch``.

    Ties go to the earlier run id.
    """
    if not runs_at_rung:
        return set()
    keep = math.ceil(len(runs_at_rung) / eta)
    sign = -1.0 if maximize else 1.0

    def key(rid: str):
        hist = list(runs_at_rung[rid])[:rung_epoch]
        if len(hist) < rung_epoch:
            raise SweepError(f"run {rid} has {len(hist)} epochs, fewer than rung {rung_epoch}")
        best = max(hist) if maximize else min(hist)
        return (sign * best, rid)

    return set(sorted(runs_at_rung, key=key)[:keep])


def ranking_key(run: SweepRun, maximize: bool):
    failed = run.final_metric is None or run.status == "failed"
    value = 0.0 if failed else (-run.final_metric if maximize else run.final_metric)
    return (failed, value, run.run_id)


@dataclass
class Leaderboard:
    spec: SweepSpec
    runs: list[SweepRun]

    @property
    def ranked(self) -> list[SweepRun]:
        return sorted(self.runs, key=lambda r: ranking_key(r, self.spec.maximize))


def _advance(run: SweepRun, gen: Iterator[float], target: float) -> None:
    """Pull metrics until the history reaches ``target`` epochs or the run ends."""
    try:
        while len(run.history) < target:
            try:
                value = next(gen)
            except StopIteration:
                run.status = "finished"
                return
            run.history.append(float(value))
    except Exception as exc:  # a failing run must not take the sweep down
        log.warning("run %s failed: %s", run.run_id, exc)
        run.status, run.error = "failed", f"{type(exc).__name__}: {exc}"


def candidates_for(spec: SweepSpec, budget: int | None, seed: int) -> list[dict[str, Any]]:
    budget = budget if budget is not None else spec.budget
    if spec.method == "grid":
        cands = enumerate_grid(spec)
        return cands[:budget] if budget is not None else cands
    if budget is None:
        raise SweepError("random search needs a budget")
    rng = np.random.default_rng(seed)
    return [sample_candidate(spec, rng) for _ in range(budget)]


def run_sweep(spec: SweepSpec, train_fn: TrainFn, budget: int | None = None, seed: int = 0,
              workers: int = 1, out_dir: str | Path | None = None) -> Leaderboard:
    """Run every candidate, synchronizing hyperband decisions at rung epochs."""
    runs = [SweepRun(f"run-{i:04d}", c, to_overrides(c)) for i, c in enumerate(candidates_for(spec, budget, seed))]
    gens: dict[str, Iterator[float]] = {}
    for run in runs:
        try:
            gens[run.run_id] = iter(train_fn(run))
        except Exception as exc:
            log.warning("run %s failed to start: %s", run.run_id, exc)
            run.status, run.error = "failed", f"{type(exc).__name__}: {exc}"

    hb = spec.early_terminate
    k = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while True:
            alive = [r for r in runs if r.status == "running"]
            if not alive:
                break
            target = hb.rung(k) if hb is not None else math.inf
            if pool is None:
                for r in alive:
                    _advance(r, gens[r.run_id], target)
            else:
                list(pool.map(lambda r: _advance(r, gens[r.run_id], target), alive))
            at_rung = {r.run_id: r.history for r in runs if r.status == "running"}
            if hb is None or not at_rung:
                continue
            keep = hyperband_filter(at_rung, target, hb.eta, spec.maximize)
            for r in runs:
                if r.run_id in at_rung and r.run_id not in keep:
                    r.status = "early-terminated"
                    close = getattr(gens[r.run_id], "close", None)
                    if close is not None:
                        close()
            log.info("rung %d (epoch %d): %d of %d runs continue", k, target, len(keep), len(at_rung))
            k += 1
    finally:
        if pool is not None:
            pool.shutdown()

    board = Leaderboard(spec, runs)
    if out_dir is not None:
        write_sweep_outputs(board, out_dir)
    return board


# ---------------------------------------------------------------------------
# Importance
# ---------------------------------------------------------------------------


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float((x * x).sum()) * float((y * y).sum()))
    if denom == 0.0:
        return 0.0
    return float((x * y).sum() / denom)


def _is_numeric(values: Sequence[Any]) -> bool:
    return all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)


def parameter_importance(runs: Sequence[SweepRun], categorical: Sequence[str] = ()
                         ) -> list[tuple[str, float, float]]:
    """``(parameter, |corr|, corr)`` sorted by importance; categorical values get indicator columns."""
    done = [r for r in runs if r.status in ("finished", "early-terminated") and r.final_metric is not None]
    if len(done) < 3:
        raise SweepError(f"parameter importance needs at least 3 completed runs, got {len(done)}")
    y = np.array([r.final_metric for r in done], dtype=np.float64)
    out = []
    for name in done[0].params:
        values = [r.params[name] for r in done]
        if _is_numeric(values) and name not in categorical:
            corr = _pearson(np.array(values, dtype=np.float64), y)
            out.append((name, abs(corr), corr))
            continue
        for level in sorted({json.dumps(v) for v in values}):
            ind = np.array([json.dumps(v) == level for v in values], dtype=np.float64)
            corr = _pearson(ind, y)
            out.append((f"{name}={json.loads(level)}", abs(corr), corr))
    return sorted(out, key=lambda t: (-t[1], t[0]))


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def _cell(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_sweep_outputs(board: Leaderboard, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = board.spec
    names = list(spec.parameters)
    with open(out / "leaderboard.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "run_id", "status", f"final_{spec.metric}", f"best_{spec.metric}", "epochs", *names])
        for rank, r in enumerate(board.ranked, 1):
            final = r.final_metric
            best = r.best_metric(spec.maximize)
            w.writerow([rank, r.run_id, r.status, "" if final is None else repr(final),
                        "" if best is None else repr(best), len(r.history), *(_cell(r.params[n]) for n in names)])
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for r in board.runs:
            fh.write(json.dumps({"run_id": r.run_id, "params": r.params, "overrides": r.overrides,
                                 "history": r.history, "status": r.status, "error": r.error},
                                sort_keys=True) + "\n")
    categorical = [n for n, d in spec.parameters.items() if d.kind == "categorical"]
    with open(out / "importance.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "importance", "correlation"])
        try:
            rows = parameter_importance(board.runs, categorical)
        except SweepError as exc:
            log.warning("importance not computed: %s", exc)
            rows = []
        for name, imp, corr in rows:
            w.writerow([name, repr(imp), repr(corr)])
    return out


def read_leaderboard(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Trainer-backed runs
# ---------------------------------------------------------------------------


def trainer_fn(base: ResolvedConfig, runs_dir: str | Path, metric: str) -> TrainFn:
    """A TrainFn running the real trainer; each run writes a full run directory."""
    from .checkpoint import save_checkpoint
    from .data import build_data
    from .trainer import SEED_SPLIT, Trainer

    cache: dict[str, Any] = {}

    def fn(run: SweepRun) -> Iterator[float]:
        cfg = base.with_overrides(run.overrides)
        seed = int(cfg["experiment"].get("manual_seed", 0))
        key = dump_text({"d": cfg["data"], "p": cfg["preprocessors"], "s": seed})
        if key not in cache:
            cache[key] = build_data(cfg["data"], cfg["preprocessors"], seed + SEED_SPLIT)
        return _epochs(Trainer(cfg, cache[key], Path(runs_dir) / run.run_id), save_checkpoint, metric)

    return fn


def _epochs(trainer, save, metric: str) -> Iterator[float]:
    try:
        while not trainer.should_stop:
            rec = trainer.run_epoch()
            yield float(rec.val[metric])
    finally:
        if trainer.epoch:
            save(trainer.checkpoint(best=True), trainer.run_dir / "best.ckpt")
            save(trainer.checkpoint(best=False), trainer.run_dir / "last.ckpt")
