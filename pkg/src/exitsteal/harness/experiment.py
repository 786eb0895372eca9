"""The staged experiment pipeline.

Each stage reads artifacts from the run directory, writes its own, and is
recorded in status.json with a wall time. Re-running skips stages whose
outputs already exist, so an interrupted run resumes where it stopped. The
status file pins the config hash; running a different config against the
same directory is refused rather than silently mixing artifacts.

Artifacts (all under the run directory):

    config.resolved.cfg   canonical effective config (the hash source)
    status.json           stage states + config hash
    dataset.npz           train/calibration/test/iid-pool/unrelated splits
    victim.ckpt           trained victim network
    deployment.json       victim thresholds + timing model description
    queries.npz           victim answers: probabilities and runtimes
    changepoints.json     runtime segmentation of the calibration probes
    labels.npz            estimated exit labels for queries + calibration
    sub_ours.ckpt         substitute trained with the strategy loss
    sub_baseline.ckpt     substitute trained on soft labels only
    sub_nostrategy.ckpt   soft-label substitute on the attacker arch
    trace_*.csv           per-epoch loss traces
    strategy_*.json       chosen output strategies per variant
    report_*.json         evaluation reports per variant
    reports.csv           one row per variant, fixed column order
"""

from __future__ import annotations

import json
import os
import shutil
import time

import numpy as np

from .. import numerics as nm
from ..attack import (
    AttackConfig,
    QueryRecord,
    build_query_set,
    train_baseline,
    train_substitute,
    write_loss_trace,
)
from ..changepoint import ChangepointResult, assign_exits, detect_changepoints
from ..errors import ContractError
from ..metrics import EvalReport, make_report
from ..multiexit import (
    BackboneSpec,
    MultiExitNet,
    OutputStrategy,
    build_evenly_partitioned,
    load_checkpoint,
    save_checkpoint,
)
from ..search import (
    build_calibration_points,
    evaluate_strategy,
    search_strategy,
    strategy_report_fragment,
)
from ..victimlab import (
    TimingModel,
    VictimDeployment,
    exit_base_times,
    query_timed_many,
    select_traditional_strategy,
    train_victim,
)
from .config import ExperimentConfig, NetCfg
from .datasets import (
    generate_tiered_dataset,
    generate_unrelated_blobs,
    generate_unrelated_uniform,
    load_idx_dataset,
)

STATUS_FILE = "status.json"
CONFIG_FILE = "config.resolved.cfg"

# variant name -> (checkpoint, strategy file, report file); ablation rows
# exist only when experiment.ablations is on.
VARIANTS = ("victim", "baseline", "ours", "no_strategy_loss", "no_search")


def _path(run_dir, name: str) -> str:
    return os.path.join(run_dir, name)


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_status(run_dir, status: dict) -> None:
    tmp = _path(run_dir, STATUS_FILE + ".tmp")
    _write_json(tmp, status)
    os.replace(tmp, _path(run_dir, STATUS_FILE))


def _load_status(run_dir, cfg: ExperimentConfig) -> dict:
    path = _path(run_dir, STATUS_FILE)
    if not os.path.exists(path):
        return {"config_sha256": cfg.sha256, "stages": {}}
    status = _read_json(path)
    if status.get("config_sha256") != cfg.sha256:
        raise ContractError(
            f"run directory {run_dir} was produced by a different config "
            f"(hash {status.get('config_sha256')!r} vs {cfg.sha256!r}); "
            "use a fresh --out"
        )
    return status


# ---------------------------------------------------------------------------
# networks from config


def _backbone(net_cfg: NetCfg, input_dim: int, input_channels: int) -> BackboneSpec:
    if net_cfg.backbone == "dense":
        return BackboneSpec.dense((input_dim,) + net_cfg.widths, activation=net_cfg.activation)
    return BackboneSpec.conv(
        (input_channels,) + net_cfg.channels,
        kernel=net_cfg.kernel,
        stride=net_cfg.stride,
        activation=net_cfg.activation,
    )


def _build_net(
    net_cfg: NetCfg,
    exit_count: int,
    class_count: int,
    seed: int,
    sample_input: np.ndarray,
) -> MultiExitNet:
    if net_cfg.backbone == "dense":
        spec = _backbone(net_cfg, int(sample_input.shape[-1]), 0)
        return build_evenly_partitioned(spec, exit_count, class_count, seed)
    channels, height, width = sample_input.shape[-3:]
    spec = _backbone(net_cfg, 0, int(channels))
    return build_evenly_partitioned(
        spec, exit_count, class_count, seed, input_hw=(int(height), int(width))
    )


# ---------------------------------------------------------------------------
# stages


def _stage_dataset(cfg: ExperimentConfig, run_dir) -> None:
    d, u, s = cfg.dataset, cfg.unrelated, cfg.seed
    if d.kind == "tiered":
        total = d.n_train + d.n_calibration + d.n_test + d.n_iid_pool
        ds = generate_tiered_dataset(
            class_count=d.classes,
            tier_count=d.tiers,
            noise_schedule=d.noise,
            sample_count=total,
            seed=s.dataset,
            dim=d.dim,
            center_scale=d.center_scale,
        )
        x, y, tiers = ds.inputs, ds.labels, ds.tiers
    else:
        train_x, train_y = load_idx_dataset(
            d.idx_train_images,
            d.idx_train_labels,
            duplicate_channels=d.idx_duplicate_channels,
        )
        test_x, test_y = load_idx_dataset(
            d.idx_test_images,
            d.idx_test_labels,
            duplicate_channels=d.idx_duplicate_channels,
        )
        need = d.n_train + d.n_calibration + d.n_iid_pool
        if train_x.shape[0] < need:
            raise ContractError(
                f"idx training set has {train_x.shape[0]} samples, need {need}"
            )
        if test_x.shape[0] < d.n_test:
            raise ContractError(
                f"idx test set has {test_x.shape[0]} samples, need {d.n_test}"
            )
        if cfg.victim.net.backbone == "dense":
            train_x = train_x.reshape(train_x.shape[0], -1)
            test_x = test_x.reshape(test_x.shape[0], -1)
        elif train_x.ndim == 3:
            train_x = train_x[:, None]
            test_x = test_x[:, None]
        x = np.concatenate([train_x[:need], test_x[: d.n_test]], axis=0)
        y = np.concatenate([train_y[:need], test_y[: d.n_test]], axis=0)
        # reorder to [train | calibration | test | iid pool] to match the
        # slicing below
        x = np.concatenate(
            [
                x[: d.n_train + d.n_calibration],
                x[need : need + d.n_test],
                x[d.n_train + d.n_calibration : need],
            ],
            axis=0,
        )
        y = np.concatenate(
            [
                y[: d.n_train + d.n_calibration],
                y[need : need + d.n_test],
                y[d.n_train + d.n_calibration : need],
            ],
            axis=0,
        )
        tiers = np.ones(x.shape[0], dtype=np.int64)

    a, b = 0, d.n_train
    c = b + d.n_calibration
    e = c + d.n_test
    f = e + d.n_iid_pool
    if u.kind == "blobs":
        if x.ndim != 2:
            raise ContractError("unrelated.kind = blobs requires flat inputs")
        unrelated = generate_unrelated_blobs(
            class_count=u.classes,
            noise=u.noise,
            sample_count=u.n,
            seed=s.dataset + 1,
            dim=x.shape[-1],
            center_scale=d.center_scale,
        )
    elif x.ndim == 2:
        unrelated = generate_unrelated_uniform(
            u.low, u.high, u.n, s.dataset + 1, dim=x.shape[-1]
        )
    else:
        rng = np.random.default_rng(s.dataset + 1)
        unrelated = rng.uniform(u.low, u.high, size=(u.n,) + x.shape[1:])

    np.savez(
        _path(run_dir, "dataset.npz"),
        train_x=x[a:b],
        train_y=y[a:b],
        train_tier=tiers[a:b],
        calib_x=x[b:c],
        calib_y=y[b:c],
        test_x=x[c:e],
        test_y=y[c:e],
        iid_x=x[e:f],
        iid_y=y[e:f],
        unrelated_x=unrelated,
    )


def _load_dataset(run_dir):
    return np.load(_path(run_dir, "dataset.npz"))


def _stage_train_victim(cfg: ExperimentConfig, run_dir) -> None:
    data = _load_dataset(run_dir)
    v = cfg.victim
    net = _build_net(
        v.net, v.exits, cfg.dataset.classes, cfg.seed.victim, data["train_x"][:1]
    )
    train_victim(
        net,
        data["train_x"],
        data["train_y"],
        epochs=v.epochs,
        lr=v.lr,
        seed=cfg.seed.shuffle,
        batch_size=v.batch_size,
        momentum=v.momentum,
    )
    save_checkpoint(net, _path(run_dir, "victim.ckpt"))


def _stage_deploy(cfg: ExperimentConfig, run_dir) -> None:
    net = load_checkpoint(_path(run_dir, "victim.ckpt"))
    v, t = cfg.victim, cfg.timing
    if v.tau is not None:
        strategy = OutputStrategy.uniform(v.tau, net.exit_count)
    else:
        data = _load_dataset(run_dir)
        strategy = select_traditional_strategy(
            net, data["train_x"], data["train_y"], accuracy_slack=v.tau_slack
        )
    quiet = TimingModel.proportional(net, t.per_flop, 0.0, cfg.seed.noise)
    base = exit_base_times(net, quiet)
    if t.noise_sigma is not None:
        sigma = t.noise_sigma
    else:
        gaps = np.diff(base)
        sigma = float(t.noise_over_gap * gaps.min()) if gaps.size else 0.0
    timing = TimingModel(quiet.block_costs, quiet.head_costs, sigma, cfg.seed.noise)
    _write_json(
        _path(run_dir, "deployment.json"),
        {
            "thresholds": [float(x) for x in strategy.thresholds],
            "fallback": bool(strategy.fallback),
            "tau": v.tau,
            "block_costs": [float(x) for x in timing.block_costs],
            "head_costs": [float(x) for x in timing.head_costs],
            "noise_sigma": sigma,
            "timing_seed": cfg.seed.noise,
            "per_flop": t.per_flop,
        },
    )


def _load_deployment(run_dir) -> VictimDeployment:
    net = load_checkpoint(_path(run_dir, "victim.ckpt"))
    spec = _read_json(_path(run_dir, "deployment.json"))
    strategy = OutputStrategy(tuple(spec["thresholds"]), fallback=spec["fallback"])
    timing = TimingModel(
        tuple(spec["block_costs"]),
        tuple(spec["head_costs"]),
        spec["noise_sigma"],
        spec["timing_seed"],
    )
    return VictimDeployment(net, strategy, timing)


def _stage_query(cfg: ExperimentConfig, run_dir) -> None:
    dep = _load_deployment(run_dir)
    data = _load_dataset(run_dir)
    qs = build_query_set(
        data["iid_x"],
        data["unrelated_x"],
        cfg.attack.n_iid,
        cfg.attack.n_unrelated,
        seed=cfg.seed.shuffle + 2,
    )
    # calibration probes first, then the query set: one continuous noise
    # stream, same order as the one-shot labeling helper
    calib_probs, calib_runtimes = query_timed_many(dep, data["calib_x"])
    query_probs, query_runtimes = query_timed_many(dep, qs.inputs)
    np.savez(
        _path(run_dir, "queries.npz"),
        calib_probs=calib_probs,
        calib_runtimes=calib_runtimes,
        query_x=qs.inputs,
        query_probs=query_probs,
        query_runtimes=query_runtimes,
        query_is_iid=qs.is_iid,
    )


def _stage_estimate_exits(cfg: ExperimentConfig, run_dir) -> None:
    q = np.load(_path(run_dir, "queries.npz"))
    result = detect_changepoints(q["calib_runtimes"])
    _write_json(
        _path(run_dir, "changepoints.json"),
        {
            "boundaries": [float(b) for b in result.boundaries],
            "log_posterior": float(result.log_posterior),
            "exit_count": result.exit_count,
        },
    )
    np.savez(
        _path(run_dir, "labels.npz"),
        query_exits=assign_exits(q["query_runtimes"], result),
        calib_exits=assign_exits(q["calib_runtimes"], result),
    )


def _estimated_exit_count(run_dir) -> int:
    return int(_read_json(_path(run_dir, "changepoints.json"))["exit_count"])


def _load_records(run_dir) -> list[QueryRecord]:
    q = np.load(_path(run_dir, "queries.npz"))
    exits = np.load(_path(run_dir, "labels.npz"))["query_exits"]
    # hoist the arrays: NpzFile re-reads the file on every [] access
    xs, probs, runtimes = q["query_x"], q["query_probs"], q["query_runtimes"]
    return [
        QueryRecord(
            input=xs[i],
            victim_probs=probs[i],
            runtime=float(runtimes[i]),
            estimated_exit=int(exits[i]),
        )
        for i in range(xs.shape[0])
    ]


def _attack_config(cfg: ExperimentConfig) -> AttackConfig:
    a = cfg.attack
    return AttackConfig(
        phi1=a.phi1,
        phi2=a.phi2,
        lambda_strategy=a.lam,
        epochs=a.epochs,
        lr=a.lr,
        batch_size=a.batch_size,
        seed=cfg.seed.shuffle + 1,
    )


def _fresh_substitute(cfg: ExperimentConfig, run_dir, net_cfg: NetCfg) -> MultiExitNet:
    exit_count = _estimated_exit_count(run_dir)
    blocks = len(net_cfg.widths) if net_cfg.backbone == "dense" else len(net_cfg.channels)
    if exit_count > blocks:
        raise ContractError(
            f"estimated {exit_count} exits but the substitute backbone has "
            f"only {blocks} blocks; widen attack.widths"
        )
    if cfg.attack.warm_start:
        return load_checkpoint(cfg.attack.warm_start)
    sample = np.load(_path(run_dir, "queries.npz"))["query_x"][:1]
    return _build_net(
        net_cfg, exit_count, cfg.dataset.classes, cfg.seed.attacker, sample
    )


def _stage_train_substitute(cfg: ExperimentConfig, run_dir) -> None:
    net = _fresh_substitute(cfg, run_dir, cfg.attack.net)
    records = _load_records(run_dir)
    net, trace = train_substitute(net, records, _attack_config(cfg))
    save_checkpoint(net, _path(run_dir, "sub_ours.ckpt"))
    write_loss_trace(trace, _path(run_dir, "trace_ours.csv"))


def _stage_train_baseline(cfg: ExperimentConfig, run_dir) -> None:
    records = _load_records(run_dir)
    acfg = _attack_config(cfg)
    base_netcfg = (
        cfg.victim.net if cfg.attack.baseline_arch == "victim" else cfg.attack.net
    )
    net = _fresh_substitute(cfg, run_dir, base_netcfg)
    net, trace = train_baseline(net, records, acfg)
    save_checkpoint(net, _path(run_dir, "sub_baseline.ckpt"))
    write_loss_trace(trace, _path(run_dir, "trace_baseline.csv"))
    if not cfg.ablations:
        return
    if cfg.attack.baseline_arch == "attacker":
        # same architecture and the same soft-label objective: the ablation
        # net is the baseline net, so reuse the checkpoint byte for byte
        shutil.copyfile(
            _path(run_dir, "sub_baseline.ckpt"), _path(run_dir, "sub_nostrategy.ckpt")
        )
        shutil.copyfile(
            _path(run_dir, "trace_baseline.csv"), _path(run_dir, "trace_nostrategy.csv")
        )
        return
    net2 = _fresh_substitute(cfg, run_dir, cfg.attack.net)
    net2, trace2 = train_baseline(net2, records, acfg)
    save_checkpoint(net2, _path(run_dir, "sub_nostrategy.ckpt"))
    write_loss_trace(trace2, _path(run_dir, "trace_nostrategy.csv"))


def _calibration_targets(run_dir):
    data = _load_dataset(run_dir)
    exits = np.load(_path(run_dir, "labels.npz"))["calib_exits"]
    return data["calib_x"], exits


def _write_strategy(run_dir, name: str, strategy: OutputStrategy, agreement: float):
    _write_json(
        _path(run_dir, f"strategy_{name}.json"),
        strategy_report_fragment(strategy, agreement),
    )


def _stage_search_searched(cfg: ExperimentConfig, run_dir) -> None:
    calib_x, calib_exits = _calibration_targets(run_dir)
    # the exhaustive search is exponential in the candidate grid, so it runs
    # on a prefix of the calibration probes; 0 means use them all
    n = cfg.attack.n_search or len(calib_x)
    calib_x, calib_exits = calib_x[:n], calib_exits[:n]
    net = load_checkpoint(_path(run_dir, "sub_ours.ckpt"))
    points = build_calibration_points(net, calib_x, calib_exits)
    strategy, agreement = search_strategy(points)
    _write_strategy(run_dir, "ours", strategy, agreement)
    if cfg.ablations:
        net2 = load_checkpoint(_path(run_dir, "sub_nostrategy.ckpt"))
        points2 = build_calibration_points(net2, calib_x, calib_exits)
        strategy2, agreement2 = search_strategy(points2)
        _write_strategy(run_dir, "no_strategy_loss", strategy2, agreement2)


def _stage_search_traditional(cfg: ExperimentConfig, run_dir) -> None:
    # the attacker has no labels for its calibration probes; it uses the
    # victim's answers (pseudo-labels) for the conventional selection
    calib_x, calib_exits = _calibration_targets(run_dir)
    q = np.load(_path(run_dir, "queries.npz"))
    pseudo = q["calib_probs"].argmax(axis=1)
    net = load_checkpoint(_path(run_dir, "sub_baseline.ckpt"))
    strategy = select_traditional_strategy(
        net, calib_x, pseudo, accuracy_slack=cfg.attack.delta
    )
    points = build_calibration_points(net, calib_x, calib_exits)
    _write_strategy(run_dir, "baseline", strategy, evaluate_strategy(points, strategy))
    if cfg.ablations:
        net2 = load_checkpoint(_path(run_dir, "sub_ours.ckpt"))
        strategy2 = select_traditional_strategy(
            net2, calib_x, pseudo, accuracy_slack=cfg.attack.delta
        )
        points2 = build_calibration_points(net2, calib_x, calib_exits)
        _write_strategy(
            run_dir, "no_search", strategy2, evaluate_strategy(points2, strategy2)
        )


def _load_strategy(run_dir, name: str) -> OutputStrategy:
    spec = _read_json(_path(run_dir, f"strategy_{name}.json"))
    return OutputStrategy(tuple(spec["thresholds"]), fallback=spec["fallback"])


def _stage_evaluate(cfg: ExperimentConfig, run_dir) -> None:
    dep = _load_deployment(run_dir)
    data = _load_dataset(run_dir)
    test_x, test_y = data["test_x"], data["test_y"]

    rows: list[tuple[str, EvalReport]] = []
    rows.append(("victim", make_report(dep.net, dep, dep.strategy, test_x, test_y)))
    pairs = [("baseline", "sub_baseline.ckpt", "baseline"), ("ours", "sub_ours.ckpt", "ours")]
    if cfg.ablations:
        pairs.append(("no_strategy_loss", "sub_nostrategy.ckpt", "no_strategy_loss"))
        pairs.append(("no_search", "sub_ours.ckpt", "no_search"))
    for name, ckpt, strat in pairs:
        net = load_checkpoint(_path(run_dir, ckpt))
        report = make_report(net, dep, _load_strategy(run_dir, strat), test_x, test_y)
        rows.append((name, report))

    for name, report in rows:
        with open(_path(run_dir, f"report_{name}.json"), "w") as fh:
            fh.write(report.to_json())
    with open(_path(run_dir, "reports.csv"), "w") as fh:
        fh.write("model,acc,clo,cc_gflops,cc_ratio\n")
        for name, report in rows:
            fh.write(",".join([name] + report.csv_row()) + "\n")


# ---------------------------------------------------------------------------
# stage registry and drivers


def _stage_outputs(name: str, cfg: ExperimentConfig) -> list[str]:
    outputs = {
        "dataset": ["dataset.npz"],
        "train_victim": ["victim.ckpt"],
        "deploy": ["deployment.json"],
        "query": ["queries.npz"],
        "estimate_exits": ["changepoints.json", "labels.npz"],
        "train_substitute": ["sub_ours.ckpt", "trace_ours.csv"],
        "train_baseline": ["sub_baseline.ckpt", "trace_baseline.csv"],
        "search_searched": ["strategy_ours.json"],
        "search_traditional": ["strategy_baseline.json"],
        "evaluate": [
            "report_victim.json",
            "report_baseline.json",
            "report_ours.json",
            "reports.csv",
        ],
    }[name]
    if cfg.ablations:
        extra = {
            "train_baseline": ["sub_nostrategy.ckpt", "trace_nostrategy.csv"],
            "search_searched": ["strategy_no_strategy_loss.json"],
            "search_traditional": ["strategy_no_search.json"],
            "evaluate": ["report_no_strategy_loss.json", "report_no_search.json"],
        }.get(name, [])
        outputs = outputs + extra
    return outputs


_STAGE_NEEDS = {
    "dataset": [],
    "train_victim": ["dataset.npz"],
    "deploy": ["victim.ckpt", "dataset.npz"],
    "query": ["deployment.json", "victim.ckpt", "dataset.npz"],
    "estimate_exits": ["queries.npz"],
    "train_substitute": ["queries.npz", "labels.npz", "changepoints.json"],
    "train_baseline": ["queries.npz", "labels.npz", "changepoints.json"],
    "search_searched": ["sub_ours.ckpt", "dataset.npz", "labels.npz"],
    "search_traditional": [
        "sub_baseline.ckpt",
        "dataset.npz",
        "labels.npz",
        "queries.npz",
    ],
    "evaluate": [
        "victim.ckpt",
        "deployment.json",
        "dataset.npz",
        "sub_ours.ckpt",
        "sub_baseline.ckpt",
        "strategy_ours.json",
        "strategy_baseline.json",
    ],
}

_STAGE_FNS = {
    "dataset": _stage_dataset,
    "train_victim": _stage_train_victim,
    "deploy": _stage_deploy,
    "query": _stage_query,
    "estimate_exits": _stage_estimate_exits,
    "train_substitute": _stage_train_substitute,
    "train_baseline": _stage_train_baseline,
    "search_searched": _stage_search_searched,
    "search_traditional": _stage_search_traditional,
    "evaluate": _stage_evaluate,
}

STAGE_ORDER = tuple(_STAGE_FNS)

# which CLI command recreates an artifact, for error messages
_ARTIFACT_COMMAND = {
    "dataset.npz": "train-victim",
    "victim.ckpt": "train-victim",
    "deployment.json": "deploy",
    "queries.npz": "query",
    "changepoints.json": "estimate-exits",
    "labels.npz": "estimate-exits",
    "sub_ours.ckpt": "train-substitute --mode ours",
    "sub_baseline.ckpt": "train-substitute --mode baseline",
    "sub_nostrategy.ckpt": "train-substitute --mode baseline",
    "strategy_ours.json": "search-strategy --mode search",
    "strategy_baseline.json": "search-strategy --mode traditional",
}


def _prepare_run_dir(cfg: ExperimentConfig, run_dir) -> dict:
    os.makedirs(run_dir, exist_ok=True)
    status = _load_status(run_dir, cfg)
    cfg_path = _path(run_dir, CONFIG_FILE)
    if not os.path.exists(cfg_path):
        with open(cfg_path, "w") as fh:
            fh.write(cfg.canonical_text)
    return status


def _stage_done(name: str, cfg: ExperimentConfig, run_dir, status: dict) -> bool:
    entry = status["stages"].get(name)
    if not entry or entry.get("state") != "done":
        return False
    return all(os.path.exists(_path(run_dir, out)) for out in _stage_outputs(name, cfg))


def run_stage(name: str, cfg: ExperimentConfig, run_dir, *, force: bool = False) -> bool:
    """Run one stage if its outputs are missing. Inputs must already exist;
    a missing artifact raises ContractError naming the command that makes
    it. Returns True when the stage ran, False when it was skipped."""
    if name not in _STAGE_FNS:
        raise ContractError(f"unknown stage {name!r}")
    status = _prepare_run_dir(cfg, run_dir)
    if not force and _stage_done(name, cfg, run_dir, status):
        return False
    for need in _STAGE_NEEDS[name]:
        if not os.path.exists(_path(run_dir, need)):
            cmd = _ARTIFACT_COMMAND.get(need, "run-experiment")
            raise ContractError(
                f"missing artifact {_path(run_dir, need)}; run 'exitsteal {cmd}' first"
            )
    t0 = time.perf_counter()
    try:
        _STAGE_FNS[name](cfg, run_dir)
    except Exception as exc:
        status["stages"][name] = {"state": "failed", "error": str(exc)}
        _write_status(run_dir, status)
        raise
    status["stages"][name] = {
        "state": "done",
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    _write_status(run_dir, status)
    return True


def run_experiment(cfg: ExperimentConfig, run_dir) -> dict[str, EvalReport]:
    """Run every stage in order, skipping the ones already done, and return
    the evaluation reports keyed by variant name."""
    status = _prepare_run_dir(cfg, run_dir)
    for name in STAGE_ORDER:
        if _stage_done(name, cfg, run_dir, status):
            continue
        run_stage(name, cfg, run_dir)
        status = _load_status(run_dir, cfg)
    return load_reports(cfg, run_dir)


def load_reports(cfg: ExperimentConfig, run_dir) -> dict[str, EvalReport]:
    names = ["victim", "baseline", "ours"]
    if cfg.ablations:
        names += ["no_strategy_loss", "no_search"]
    reports = {}
    for name in names:
        path = _path(run_dir, f"report_{name}.json")
        if not os.path.exists(path):
            raise ContractError(f"missing artifact {path}; run 'exitsteal evaluate' first")
        with open(path) as fh:
            reports[name] = EvalReport.from_json(fh.read())
    return reports


# ---------------------------------------------------------------------------
# sweep recipes


def run_lambda_sweep(
    base_values: dict[str, str], lambdas, root_dir
) -> list[tuple[float, EvalReport]]:
    """One full experiment per strategy-loss weight, each in its own
    subdirectory; returns the 'ours' report per weight and writes
    lambda_sweep.csv at the root."""
    from .config import build_config

    rows = []
    for lam in lambdas:
        values = dict(base_values)
        values["attack.lambda"] = repr(float(lam))
        cfg = build_config(values)
        run_dir = os.path.join(root_dir, f"lambda_{lam}")
        reports = run_experiment(cfg, run_dir)
        rows.append((float(lam), reports["ours"]))
    with open(os.path.join(root_dir, "lambda_sweep.csv"), "w") as fh:
        fh.write("lambda,acc,clo,cc_gflops,cc_ratio\n")
        for lam, report in rows:
            fh.write(",".join([repr(lam)] + report.csv_row()) + "\n")
    return rows


def run_exit_sweep(
    base_values: dict[str, str], exit_counts, root_dir
) -> list[tuple[int, EvalReport]]:
    """One full experiment per victim exit count; writes exit_sweep.csv."""
    from .config import build_config

    rows = []
    for k in exit_counts:
        values = dict(base_values)
        values["victim.exits"] = str(int(k))
        cfg = build_config(values)
        run_dir = os.path.join(root_dir, f"exits_{k}")
        reports = run_experiment(cfg, run_dir)
        rows.append((int(k), reports["ours"]))
    with open(os.path.join(root_dir, "exit_sweep.csv"), "w") as fh:
        fh.write("exits,acc,clo,cc_gflops,cc_ratio\n")
        for k, report in rows:
            fh.write(",".join([str(k)] + report.csv_row()) + "\n")
    return rows
