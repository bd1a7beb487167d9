"""End-to-end experiment arms: build, train, attack, score, and write results.

Every emitted file starts with the resolved config hash. ``results.jsonl``
holds only quantities that are pure functions of the config, so two runs of
the same config are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vflpriv.attack import AdaptiveAttacker, DecoderConfig, DecoderTarget, FeatureTap, collect_poison_pairs, \
    evaluate_attack, train_static_decoder
from vflpriv.config import ExperimentConfig, config_from_dict, split_seeds
from vflpriv.data import Dataset, column_kind, gen_adult_like, gen_credit_like, gen_purchase_like, load_csv, \
    partition_vertical, sample_poison, train_eval_split
from vflpriv.defense import BasicDefense, FbsDefense, MinimaxConfig, NaiveDefense
from vflpriv.errors import AttackSetupError, ConfigError, ReportingError, VflError
from vflpriv.metrics import MetricKind, PrivacyMeasurement, min_privacy, privacy_level
from vflpriv.nn.model import build_mlp
from vflpriv.protocol import ClientState, CoordinatorState, EpochRecord, TrainHistory, VflSystem, train_vfl

ARM_OF_MODE = {"none": "baseline", "naive": "naive", "basic": "basic", "fbs_auto": "fbs", "fbs_fixed": "fbs_fixed"}
MODE_OF_ARM = {"baseline": "none", "naive": "naive", "basic": "basic", "fbs": "fbs_auto", "fbs_fixed": "fbs_fixed"}


# building blocks ---------------------------------------------------------------

@dataclass
class ClientView:
    """A client's encoded shard plus how raw attributes map onto its columns."""

    encoded: np.ndarray
    schema: tuple[str, ...]
    blocks: list[tuple[int, int]]  # (start, width) per raw attribute


def encode_shard(shard: np.ndarray, schema: Sequence[str]) -> ClientView:
    cols, blocks, pos = [], [], 0
    for j, kind in enumerate(schema):
        name, k = column_kind(kind)
        if name == "categorical":
            cols.append(np.eye(k)[shard[:, j].astype(np.int64)])
            blocks.append((pos, k))
            pos += k
        else:
            cols.append(shard[:, j:j + 1])
            blocks.append((pos, 1))
            pos += 1
    return ClientView(np.concatenate(cols, axis=1), tuple(schema), blocks)


def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "purchase_like":
        return gen_purchase_like(ds.n, ds.d, ds.classes, seed, flip=ds.flip, density=ds.density,
                                 coarse_columns=ds.coarse_columns, coarse_group=ds.coarse_group)
    if ds.kind == "credit_like":
        return gen_credit_like(ds.n, ds.d, ds.positive_rate, seed)
    if ds.kind == "adult_like":
        return gen_adult_like(ds.n, seed=seed)
    return load_csv(ds.csv_path, ds.schema_, ds.classes)


def resolve_target(cfg: ExperimentConfig, view: ClientView) -> DecoderTarget:
    """Map the configured reconstruction target onto the victim's encoded columns."""
    tc = cfg.attack.target
    kinds = [column_kind(s)[0] for s in view.schema]
    kind = tc.kind
    attrs = tc.columns
    if kind == "auto":
        if all(k == "binary" for k in kinds):
            kind = "binary"
        elif "categorical" in kinds:
            kind = "categorical"
            attrs = attrs or [kinds.index("categorical")]
        else:
            kind = "regression"
    attrs = list(attrs) if attrs is not None else list(range(len(kinds)))
    path = "attack.target"
    if kind == "categorical":
        a = attrs[0]
        if kinds[a] != "categorical":
            raise ConfigError(path, f"attribute {a} of the victim is not categorical")
        start, width = view.blocks[a]
        return DecoderTarget("categorical", tuple(range(start, start + width)), width)
    want = "binary" if kind == "binary" else None
    cols = []
    for a in attrs:
        if kinds[a] == "categorical" or (want and kinds[a] != want):
            raise ConfigError(path, f"attribute {a} ({view.schema[a]}) cannot be a {kind} target")
        cols.append(view.blocks[a][0])
    return DecoderTarget(kind, tuple(cols))


@dataclass
class Built:
    system: VflSystem
    views: list[ClientView]
    n_outputs: int


def build_system(cfg: ExperimentConfig, seeds: dict[str, int]) -> Built:
    ds = load_dataset(cfg, seeds["data"])
    part = partition_vertical(ds, cfg.partition)
    views = [encode_shard(s, sch) for s, sch in zip(part.shards, part.schemas)]
    train_rows, eval_rows = train_eval_split(ds.n, seed=seeds["split"])
    rng = np.random.default_rng(seeds["init"])
    clients = [ClientState(m, build_mlp(v.encoded.shape[1], cfg.models.client, rng), v.encoded, cfg.train.optimizer)
               for m, v in enumerate(views)]
    heads = {c.id: build_mlp(c.model.out_width, cfg.models.head, rng) for c in clients}
    binary = cfg.task == "binary"
    if binary and not np.isin(part.labels, (0, 1)).all():
        raise ConfigError("dataset.classes", "binary tasks need 0/1 labels")
    tail = ["linear:1", "sigmoid"] if binary else [f"linear:{ds.n_classes}"]
    trunk = build_mlp(sum(h.out_width for h in heads.values()), list(cfg.models.trunk) + tail, rng)
    coord = CoordinatorState(heads, trunk, part.labels, "binary" if binary else "multiclass", cfg.train.optimizer)
    system = VflSystem(clients, coord, train_rows, eval_rows, use_auc=cfg.dataset.kind == "credit_like")
    return Built(system, views, ds.n_classes)


def build_defense(cfg: ExperimentConfig, built: Built, seed: int):
    d = cfg.defense
    if d.mode == "none":
        return None
    ids = d.clients if d.clients is not None else ([cfg.victim] if cfg.attack.mode != "none" else
                                                   [c.id for c in built.system.clients])
    targets = {m: resolve_target(cfg, built.views[m]) for m in ids}
    widths = {m: built.system.clients[m].model.out_width for m in ids}
    hidden = tuple(cfg.models.decoder_hidden)
    if d.mode == "naive":
        return NaiveDefense(targets, widths, d.lam, d.g_kind, d.decoder_lr, d.decoder_steps, seed, hidden)
    if d.mode == "basic":
        return BasicDefense(targets, widths, d.inner_steps, d.decoder_steps, d.g_kind, d.decoder_lr, d.inner_lr,
                            d.inner_optimizer, seed, hidden)
    mcfg = MinimaxConfig(n2=d.n2, m1=d.m1, m2=d.m2, tau1=d.tau1, tau2=d.tau2, auto_tau=bool(d.auto_tau),
                         tau_lr=d.tau_lr, g_kind=d.g_kind, prox_kind=d.prox_kind, decoder_lr=d.decoder_lr,
                         inner_lr=d.inner_lr, inner_optimizer=d.inner_optimizer)
    return FbsDefense(targets, widths, mcfg, seed, hidden)


def _train_only(cfg: ExperimentConfig) -> tuple[TrainHistory, VflSystem]:
    seeds = split_seeds(cfg.seed)
    built = build_system(cfg, seeds)
    defense = build_defense(cfg, built, seeds["defense"])
    history = train_vfl(built.system, cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, seeds["batching"],
                        defense=defense)
    return history, built.system


def train_vfl_baseline(cfg: ExperimentConfig) -> tuple[TrainHistory, VflSystem]:
    """Undefended training of ``cfg`` (its defense block is ignored); returns history and final system."""
    data = cfg.model_dump(mode="json", by_alias=True)
    data["defense"] = {"mode": "none"}
    return _train_only(config_from_dict(data))


def train_vfl_fbs(cfg: ExperimentConfig) -> tuple[TrainHistory, VflSystem]:
    """Training with the minimax backward step before every upload, then the ordinary forward step."""
    if cfg.defense.mode not in ("fbs_auto", "fbs_fixed"):
        raise ConfigError("defense.mode", f"train_vfl_fbs needs fbs_auto or fbs_fixed, got {cfg.defense.mode!r}")
    return _train_only(cfg)


# running an arm ------------------------------------------------------------------

@dataclass
class RunResult:
    arm: str
    config_hash: str
    rows: list[dict]
    summary: dict
    metric: str | None
    out_dir: Path | None = None
    diagnostics: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def summarize(rows: Sequence[dict], metric: str | None, baseline_accuracy: float | None = None) -> dict:
    """Summary fields, recomputed purely from the per-epoch rows."""
    if not rows:
        raise ReportingError("no epoch rows to summarise")
    final = rows[-1]["eval_accuracy_or_auc"]
    mp = None
    if metric is not None:
        track = [PrivacyMeasurement(MetricKind(metric), r["privacy_value"], r["epoch"]) for r in rows
                 if r["privacy_value"] is not None]
        mp = min_privacy(track).value if track else None
    drop = None if baseline_accuracy is None else baseline_accuracy - final
    return {"min_privacy": mp, "final_accuracy": final, "accuracy_drop_vs_baseline": drop}


def run_experiment(cfg: ExperimentConfig, out_dir=None, baseline_accuracy: float | None = None,
                   log_features: bool = False) -> RunResult:
    """Train one arm, attach the configured attack, score every epoch and write files.

    Files written to ``out_dir`` (when given): ``results.jsonl``,
    ``summary.csv``, ``config.json``, and ``defense.jsonl`` for defended arms.
    With ``log_features`` the victim's captured features go to ``features.jsonl``.
    """
    seeds = split_seeds(cfg.seed)
    arm = ARM_OF_MODE[cfg.defense.mode]
    chash = cfg.config_hash()
    try:
        built = build_system(cfg, seeds)
    except ConfigError:
        raise
    except VflError as exc:
        raise type(exc)(f"[{arm}/build] {exc}") from exc
    system = built.system
    victim = cfg.victim
    tap = poison = target = None
    if cfg.attack.mode != "none":
        poison = sample_poison(system.train_rows, cfg.attack.alpha, seed=seeds["attack"])
        if len(poison) == 0:
            raise ConfigError("attack.alpha", "alpha selects no poison records")
        tap = FeatureTap(victim, poison)
        target = resolve_target(cfg, built.views[victim])
    defense = build_defense(cfg, built, seeds["defense"])
    snapshots: dict[int, object] = {}
    wall: list[float] = []

    def on_epoch(rec: EpochRecord):
        wall.append(rec.wall_time)
        if tap is not None:
            snapshots[rec.epoch] = system.clients[victim].model.copy()

    try:
        history = train_vfl(system, cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, seeds["batching"],
                            defense=defense, tap=tap, on_epoch=on_epoch)
    except VflError as exc:
        raise type(exc)(f"[{arm}/train] {exc}") from exc

    privacy: dict[int, float] = {}
    metric = None
    if tap is not None:
        metric = target.default_metric().value
        try:
            privacy = score_attack(cfg, tap, poison, target, built, snapshots, seeds["attack"])
        except VflError as exc:
            raise type(exc)(f"[{arm}/attack] {exc}") from exc

    diag = [vars(d).copy() for d in getattr(defense, "diagnostics", [])]
    # step weights of the victim (or of the first defended client)
    watched = victim if victim in getattr(defense, "targets", {}) else min(getattr(defense, "targets", {0: 0}))
    taus = {d["epoch"]: d for d in diag if d["client"] == watched}
    rows = []
    for rec in history.records:
        dd = taus.get(rec.epoch, {})
        rows.append({
            "epoch": rec.epoch,
            "train_loss": rec.train_loss,
            "eval_accuracy_or_auc": rec.eval_accuracy,
            "privacy_metric_kind": metric,
            "privacy_value": privacy.get(rec.epoch),
            "tau1": _clean(dd.get("tau1")),
            "tau2": _clean(dd.get("tau2")),
        })
    result = RunResult(arm, chash, rows, summarize(rows, metric, baseline_accuracy), metric,
                       diagnostics=diag, wall_times=wall)
    if out_dir is not None:
        write_run(result, cfg, Path(out_dir), tap if log_features else None)
    return result


def score_attack(cfg: ExperimentConfig, tap: FeatureTap, poison, target: DecoderTarget, built: Built,
                 snapshots: dict, seed: int) -> dict[int, float]:
    """Per-epoch leakage of the victim's attributes on non-poison training records."""
    victim = cfg.victim
    shard = built.views[victim].encoded
    pairs = collect_poison_pairs(tap, poison, shard)
    eval_rows = np.setdiff1d(built.system.train_rows, poison.indices)
    if eval_rows.size == 0:
        raise AttackSetupError("no non-poison records left to score the attack on")
    dcfg = DecoderConfig(cfg.attack.decoder_epochs, cfg.attack.decoder_lr, cfg.attack.decoder_batch_size,
                         tuple(cfg.models.decoder_hidden))
    metric = target.default_metric()
    out = {}
    if cfg.attack.mode == "static":
        for epoch in sorted(pairs):
            dec = train_static_decoder(pairs[epoch], target, dcfg, seed)
            out[epoch] = evaluate_attack(dec, snapshots[epoch], shard, eval_rows, metric, poison)
    else:
        attacker = AdaptiveAttacker(target, dcfg, seed)
        for epoch in sorted(pairs):
            dec = attacker.update(epoch, pairs[epoch])
            out[epoch] = evaluate_attack(dec, snapshots[epoch], shard, eval_rows, metric, poison)
    return out


# files -----------------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_run(result: RunResult, cfg: ExperimentConfig, out: Path, tap: FeatureTap | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    head = {"config_hash": result.config_hash, "arm": result.arm}
    lines = [_dumps(head)] + [_dumps(r) for r in result.rows]
    (out / "results.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    buf = io.StringIO()
    buf.write(f"# config_hash={result.config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "metric", "min_privacy", "final_accuracy", "accuracy_drop_vs_baseline"])
    s = result.summary
    w.writerow([result.arm, result.metric or "", _fmt(s["min_privacy"]), _fmt(s["final_accuracy"]),
                _fmt(s["accuracy_drop_vs_baseline"])])
    (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    doc = {"config_hash": result.config_hash, "config": cfg.model_dump(mode="json", by_alias=True)}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    if result.diagnostics:
        dl = [_dumps(head)] + [_dumps({k: _clean(v) for k, v in d.items()}) for d in result.diagnostics]
        (out / "defense.jsonl").write_text("\n".join(dl) + "\n", encoding="utf-8")
    if tap is not None:
        (out / "features.jsonl").write_text(_dumps(head) + "\n" + tap.to_jsonl(), encoding="utf-8")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(v: str):
    return None if v == "" else float(v)


def load_run(run_dir) -> RunResult:
    """Read a run directory back and check that the summary matches its rows."""
    run_dir = Path(run_dir)
    try:
        lines = (run_dir / "results.jsonl").read_text(encoding="utf-8").splitlines()
        summary_lines = (run_dir / "summary.csv").read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ReportingError(f"{run_dir}: {exc}") from None
    head = json.loads(lines[0])
    rows = [json.loads(x) for x in lines[1:]]
    if not summary_lines[0].startswith("# config_hash="):
        raise ReportingError(f"{run_dir}/summary.csv: missing config hash line")
    if summary_lines[0].split("=", 1)[1] != head["config_hash"]:
        raise ReportingError(f"{run_dir}: summary and results come from different configs")
    rec = next(csv.DictReader(summary_lines[1:]))
    metric = rec["metric"] or None
    again = summarize(rows, metric)
    if again["min_privacy"] != _parse(rec["min_privacy"]) or again["final_accuracy"] != _parse(rec["final_accuracy"]):
        raise ReportingError(f"{run_dir}: summary does not match the per-epoch rows")
    again["accuracy_drop_vs_baseline"] = _parse(rec["accuracy_drop_vs_baseline"])
    return RunResult(head["arm"], head["config_hash"], rows, again, metric, run_dir)


# matrices and plot data ---------------------------------------------------------------

def arm_config(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    if arm not in MODE_OF_ARM:
        raise ConfigError("arms", f"unknown arm {arm!r}; choose from {sorted(MODE_OF_ARM)}")
    data = cfg.model_dump(mode="json", by_alias=True)
    data["defense"]["mode"] = MODE_OF_ARM[arm]
    data["defense"]["auto_tau"] = None
    return config_from_dict(data)


def _run_arm(args):
    cfg_json, out_dir, base_acc = args
    cfg = config_from_dict(json.loads(cfg_json))
    return run_experiment(cfg, out_dir, base_acc)


def run_matrix(cfg: ExperimentConfig, arms: Sequence[str], out_root, jobs: int = 1) -> list[RunResult]:
    """Run each arm in its own directory; the baseline (if listed) runs first so drops can be filled in."""
    out_root = Path(out_root)
    arms = list(dict.fromkeys(arms))
    cfgs = {a: arm_config(cfg, a) for a in arms}
    results: dict[str, RunResult] = {}
    base_acc = None
    if "baseline" in arms:
        base = run_experiment(cfgs["baseline"], None)
        base_acc = base.summary["final_accuracy"]
        base.summary = summarize(base.rows, base.metric, base_acc)
        write_run(base, cfgs["baseline"], out_root / "baseline")
        results["baseline"] = base
    rest = [a for a in arms if a != "baseline"]
    jobs_args = [(cfgs[a].model_dump_json(by_alias=True), str(out_root / a), base_acc) for a in rest]
    if jobs > 1 and len(rest) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for a, r in zip(rest, pool.map(_run_arm, jobs_args)):
                results[a] = r
    else:
        for a, args in zip(rest, jobs_args):
            results[a] = _run_arm(args)
    ordered = [results[a] for a in arms]
    emit_plot_data(ordered, out_root)
    return ordered


def emit_plot_data(records: Sequence[RunResult], out_dir) -> tuple[Path, Path]:
    """scatter.csv (arm, final accuracy, privacy level) and curves.csv (per-epoch values)."""
    if not records:
        raise ReportingError("need at least one run record")
    kinds = {r.metric for r in records}
    if len(kinds) != 1:
        raise ReportingError(f"mixed privacy metric kinds across runs: {sorted(str(k) for k in kinds)}")
    metric = kinds.pop()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = ";".join(f"{r.arm}:{r.config_hash}" for r in records)
    sbuf, cbuf = io.StringIO(), io.StringIO()
    for b in (sbuf, cbuf):
        b.write(f"# config_hash={hashes}\n")
    sw = csv.writer(sbuf, lineterminator="\n")
    sw.writerow(["arm", "final_accuracy", "privacy_level"])
    cw = csv.writer(cbuf, lineterminator="\n")
    cw.writerow(["arm", "epoch", "eval_accuracy", "privacy_value"])
    for r in records:
        mp = r.summary["min_privacy"]
        level = "" if metric is None or mp is None else repr(privacy_level(metric, mp))
        sw.writerow([r.arm, repr(float(r.summary["final_accuracy"])), level])
        for row in r.rows:
            pv = row["privacy_value"]
            cw.writerow([r.arm, row["epoch"], repr(float(row["eval_accuracy_or_auc"])),
                         "" if pv is None else repr(float(pv))])
    sp, cp = out_dir / "scatter.csv", out_dir / "curves.csv"
    sp.write_text(sbuf.getvalue(), encoding="utf-8")
    cp.write_text(cbuf.getvalue(), encoding="utf-8")
    return sp, cp


def find_runs(root) -> list[Path]:
    root = Path(root)
    if (root / "results.jsonl").is_file():
        return [root]
    return sorted(p.parent for p in root.glob("*/results.jsonl"))


def report(runs_dir, out_dir) -> tuple[Path, Path]:
    dirs = find_runs(runs_dir)
    if not dirs:
        raise ReportingError(f"{runs_dir}: no run directories found")
    return emit_plot_data([load_run(d) for d in dirs], out_dir)
