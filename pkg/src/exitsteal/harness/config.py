"""Experiment configuration: a flat `key = value` file with dotted sections.

Every key is declared in _SCHEMA with a type and a default; unknown keys are
rejected so typos fail loudly, and all cross-field contracts (phi1 >= phi2,
exit counts, increasing tier noise, referenced files existing) are checked
at load time, before any compute starts.

Randomness is organized into five named seed streams: `seed.dataset`
(dataset + unrelated pool), `seed.victim` (victim initialization),
`seed.noise` (timing noise), `seed.attacker` (substitute initialization) and
`seed.shuffle` (training shuffles and query-set selection; consumers derive
fixed offsets from it). The CLI `--seed N` override sets the five streams to
N, N+1, N+2, N+3, N+4.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from ..errors import ContractError, FormatError

_SCHEMA: dict[str, tuple[str, str]] = {
    # key: (type, default) — types: int, float, bool, str, ints, floats
    "dataset.kind": ("str", "tiered"),
    "dataset.dim": ("int", "16"),
    "dataset.classes": ("int", "4"),
    "dataset.tiers": ("int", "4"),
    "dataset.noise": ("floats", "0.1,0.35,0.7,1.1"),
    "dataset.center_scale": ("float", "3.0"),
    "dataset.n_train": ("int", "6000"),
    "dataset.n_calibration": ("int", "1000"),
    "dataset.n_test": ("int", "2000"),
    "dataset.n_iid_pool": ("int", "2000"),
    "dataset.idx_train_images": ("str", ""),
    "dataset.idx_train_labels": ("str", ""),
    "dataset.idx_test_images": ("str", ""),
    "dataset.idx_test_labels": ("str", ""),
    "dataset.idx_duplicate_channels": ("bool", "false"),
    "unrelated.kind": ("str", "blobs"),
    "unrelated.classes": ("int", "6"),
    "unrelated.noise": ("float", "0.8"),
    "unrelated.n": ("int", "9000"),
    "unrelated.low": ("float", "-4.5"),
    "unrelated.high": ("float", "4.5"),
    "victim.backbone": ("str", "dense"),
    "victim.widths": ("ints", "48,48,48,48,48,48,48,48"),
    "victim.channels": ("ints", "8,16,16,32"),
    "victim.kernel": ("int", "3"),
    "victim.stride": ("int", "1"),
    "victim.activation": ("str", "relu"),
    "victim.exits": ("int", "4"),
    "victim.tau": ("str", "0.9"),
    "victim.tau_slack": ("float", "0.01"),
    "victim.epochs": ("int", "40"),
    "victim.lr": ("float", "0.05"),
    "victim.batch_size": ("int", "128"),
    "victim.momentum": ("float", "0.0"),
    "timing.per_flop": ("float", "1e-6"),
    "timing.noise_over_gap": ("float", "0.1"),
    "timing.noise_sigma": ("float", "-1"),
    "attack.n_iid": ("int", "1000"),
    "attack.n_unrelated": ("int", "7000"),
    "attack.phi1": ("float", "0.95"),
    "attack.phi2": ("float", "0.90"),
    "attack.lambda": ("float", "0.5"),
    "attack.epochs": ("int", "40"),
    "attack.lr": ("float", "0.05"),
    "attack.batch_size": ("int", "128"),
    "attack.backbone": ("str", "dense"),
    "attack.widths": ("ints", "64,64,64,64,64,64"),
    "attack.channels": ("ints", "8,16,16,32"),
    "attack.kernel": ("int", "3"),
    "attack.stride": ("int", "1"),
    "attack.activation": ("str", "relu"),
    "attack.delta": ("float", "0.02"),
    "attack.n_search": ("int", "0"),
    "attack.warm_start": ("str", ""),
    "attack.baseline_arch": ("str", "attacker"),
    "experiment.ablations": ("bool", "true"),
    "seed.dataset": ("int", "101"),
    "seed.victim": ("int", "202"),
    "seed.noise": ("int", "303"),
    "seed.attacker": ("int", "404"),
    "seed.shuffle": ("int", "505"),
}


def parse_config_text(text: str) -> dict[str, str]:
    """`key = value` lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in values:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _coerce(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from exc


@dataclass(frozen=True)
class DatasetCfg:
    kind: str
    dim: int
    classes: int
    tiers: int
    noise: tuple[float, ...]
    center_scale: float
    n_train: int
    n_calibration: int
    n_test: int
    n_iid_pool: int
    idx_train_images: str
    idx_train_labels: str
    idx_test_images: str
    idx_test_labels: str
    idx_duplicate_channels: bool


@dataclass(frozen=True)
class UnrelatedCfg:
    kind: str
    classes: int
    noise: float
    n: int
    low: float
    high: float


@dataclass(frozen=True)
class NetCfg:
    backbone: str
    widths: tuple[int, ...]
    channels: tuple[int, ...]
    kernel: int
    stride: int
    activation: str


@dataclass(frozen=True)
class VictimCfg:
    net: NetCfg
    exits: int
    tau: float | None  # None means "auto": pick with select_traditional_strategy
    tau_slack: float
    epochs: int
    lr: float
    batch_size: int
    momentum: float


@dataclass(frozen=True)
class TimingCfg:
    per_flop: float
    noise_over_gap: float
    noise_sigma: float | None  # explicit sigma when set, else derived from gap


@dataclass(frozen=True)
class AttackStageCfg:
    n_iid: int
    n_unrelated: int
    phi1: float
    phi2: float
    lam: float
    epochs: int
    lr: float
    batch_size: int
    net: NetCfg
    delta: float
    n_search: int  # calibration points fed to the threshold search; 0 = all
    warm_start: str
    baseline_arch: str


@dataclass(frozen=True)
class SeedCfg:
    dataset: int
    victim: int
    noise: int
    attacker: int
    shuffle: int


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetCfg
    unrelated: UnrelatedCfg
    victim: VictimCfg
    timing: TimingCfg
    attack: AttackStageCfg
    ablations: bool
    seed: SeedCfg
    resolved: dict[str, str]  # every schema key with its effective raw value

    @property
    def canonical_text(self) -> str:
        lines = [f"{k} = {self.resolved[k]}" for k in sorted(self.resolved)]
        return "\n".join(lines) + "\n"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_text.encode("utf-8")).hexdigest()


def _validate(cfg: ExperimentConfig) -> None:
    d, u, v, t, a = cfg.dataset, cfg.unrelated, cfg.victim, cfg.timing, cfg.attack
    if d.kind not in ("tiered", "idx"):
        raise ContractError(f"dataset.kind must be tiered or idx, got {d.kind!r}")
    if u.kind not in ("blobs", "uniform"):
        raise ContractError(f"unrelated.kind must be blobs or uniform, got {u.kind!r}")
    if v.exits < 2:
        raise ContractError("victim.exits must be >= 2")
    if a.phi1 < a.phi2:
        raise ContractError("attack.phi1 must be >= attack.phi2")
    if not (0.0 < a.phi1 <= 1.0 and 0.0 < a.phi2 <= 1.0):
        raise ContractError("attack.phi1/phi2 must lie in (0, 1]")
    if a.lam < 0.0:
        raise ContractError("attack.lambda must be >= 0")
    if d.kind == "tiered":
        if len(d.noise) != d.tiers:
            raise ContractError(
                f"dataset.noise has {len(d.noise)} entries for {d.tiers} tiers"
            )
        if any(s <= 0 for s in d.noise):
            raise ContractError("dataset.noise entries must be positive")
        if any(b <= x for x, b in zip(d.noise, d.noise[1:])):
            raise ContractError("dataset.noise must be strictly increasing")
    else:
        for key in (
            "idx_train_images",
            "idx_train_labels",
            "idx_test_images",
            "idx_test_labels",
        ):
            path = getattr(d, key)
            if not path:
                raise ContractError(f"dataset.{key} is required when dataset.kind = idx")
            if not os.path.exists(path):
                raise ContractError(f"dataset.{key}: no such file: {path}")
    for name, net, exits in (("victim", v.net, v.exits), ("attack", a.net, None)):
        if net.backbone not in ("dense", "conv"):
            raise ContractError(f"{name}.backbone must be dense or conv")
        blocks = len(net.widths) if net.backbone == "dense" else len(net.channels)
        if blocks < 2:
            raise ContractError(f"{name} backbone needs at least 2 blocks")
        if exits is not None and exits > blocks:
            raise ContractError(f"{name}.exits = {exits} exceeds {blocks} blocks")
    if v.net.backbone != a.net.backbone:
        raise ContractError("victim and attacker backbones must share a kind")
    if d.kind == "tiered" and v.net.backbone == "conv":
        raise ContractError("tiered blobs are 1-D; conv backbones need dataset.kind = idx")
    if v.tau is not None and not (0.0 < v.tau <= 1.0):
        raise ContractError("victim.tau must lie in (0, 1] or be 'auto'")
    for name, val in (
        ("dataset.n_train", d.n_train),
        ("dataset.n_calibration", d.n_calibration),
        ("dataset.n_test", d.n_test),
        ("dataset.n_iid_pool", d.n_iid_pool),
    ):
        if val < 1:
            raise ContractError(f"{name} must be >= 1")
    if a.n_iid > d.n_iid_pool:
        raise ContractError(
            f"attack.n_iid = {a.n_iid} exceeds dataset.n_iid_pool = {d.n_iid_pool}"
        )
    if a.n_unrelated > u.n:
        raise ContractError(f"attack.n_unrelated = {a.n_unrelated} exceeds unrelated.n = {u.n}")
    if a.n_iid + a.n_unrelated < 1:
        raise ContractError("the query budget must be positive")
    if a.n_search < 0 or a.n_search > d.n_calibration:
        raise ContractError(
            f"attack.n_search = {a.n_search} must lie in [0, dataset.n_calibration]"
        )
    for name, val in (("victim.lr", v.lr), ("attack.lr", a.lr), ("timing.per_flop", t.per_flop)):
        if val <= 0:
            raise ContractError(f"{name} must be positive")
    if v.epochs < 0 or a.epochs < 0:
        raise ContractError("epochs must be >= 0")
    if v.batch_size < 1 or a.batch_size < 1:
        raise ContractError("batch sizes must be >= 1")
    if t.noise_over_gap < 0:
        raise ContractError("timing.noise_over_gap must be >= 0")
    if a.warm_start and not os.path.exists(a.warm_start):
        raise ContractError(f"attack.warm_start: no such file: {a.warm_start}")
    if a.baseline_arch not in ("attacker", "victim"):
        raise ContractError("attack.baseline_arch must be attacker or victim")
    if u.kind == "uniform" and u.high <= u.low:
        raise ContractError("unrelated.low must be < unrelated.high")


def build_config(values: dict[str, str]) -> ExperimentConfig:
    unknown = sorted(set(values) - set(_SCHEMA))
    if unknown:
        raise ContractError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {k: values.get(k, default) for k, (_, default) in _SCHEMA.items()}
    typed = {k: _coerce(k, kind, resolved[k]) for k, (kind, _) in _SCHEMA.items()}

    tau_raw = typed["victim.tau"]
    if tau_raw == "auto":
        tau = None
    else:
        tau = _coerce("victim.tau", "float", tau_raw)

    sigma = typed["timing.noise_sigma"]
    cfg = ExperimentConfig(
        dataset=DatasetCfg(
            kind=typed["dataset.kind"],
            dim=typed["dataset.dim"],
            classes=typed["dataset.classes"],
            tiers=typed["dataset.tiers"],
            noise=typed["dataset.noise"],
            center_scale=typed["dataset.center_scale"],
            n_train=typed["dataset.n_train"],
            n_calibration=typed["dataset.n_calibration"],
            n_test=typed["dataset.n_test"],
            n_iid_pool=typed["dataset.n_iid_pool"],
            idx_train_images=typed["dataset.idx_train_images"],
            idx_train_labels=typed["dataset.idx_train_labels"],
            idx_test_images=typed["dataset.idx_test_images"],
            idx_test_labels=typed["dataset.idx_test_labels"],
            idx_duplicate_channels=typed["dataset.idx_duplicate_channels"],
        ),
        unrelated=UnrelatedCfg(
            kind=typed["unrelated.kind"],
            classes=typed["unrelated.classes"],
            noise=typed["unrelated.noise"],
            n=typed["unrelated.n"],
            low=typed["unrelated.low"],
            high=typed["unrelated.high"],
        ),
        victim=VictimCfg(
            net=NetCfg(
                backbone=typed["victim.backbone"],
                widths=typed["victim.widths"],
                channels=typed["victim.channels"],
                kernel=typed["victim.kernel"],
                stride=typed["victim.stride"],
                activation=typed["victim.activation"],
            ),
            exits=typed["victim.exits"],
            tau=tau,
            tau_slack=typed["victim.tau_slack"],
            epochs=typed["victim.epochs"],
            lr=typed["victim.lr"],
            batch_size=typed["victim.batch_size"],
            momentum=typed["victim.momentum"],
        ),
        timing=TimingCfg(
            per_flop=typed["timing.per_flop"],
            noise_over_gap=typed["timing.noise_over_gap"],
            noise_sigma=None if sigma < 0 else sigma,
        ),
        attack=AttackStageCfg(
            n_iid=typed["attack.n_iid"],
            n_unrelated=typed["attack.n_unrelated"],
            phi1=typed["attack.phi1"],
            phi2=typed["attack.phi2"],
            lam=typed["attack.lambda"],
            epochs=typed["attack.epochs"],
            lr=typed["attack.lr"],
            batch_size=typed["attack.batch_size"],
            net=NetCfg(
                backbone=typed["attack.backbone"],
                widths=typed["attack.widths"],
                channels=typed["attack.channels"],
                kernel=typed["attack.kernel"],
                stride=typed["attack.stride"],
                activation=typed["attack.activation"],
            ),
            delta=typed["attack.delta"],
            n_search=typed["attack.n_search"],
            warm_start=typed["attack.warm_start"],
            baseline_arch=typed["attack.baseline_arch"],
        ),
        ablations=typed["experiment.ablations"],
        seed=SeedCfg(
            dataset=typed["seed.dataset"],
            victim=typed["seed.victim"],
            noise=typed["seed.noise"],
            attacker=typed["seed.attacker"],
            shuffle=typed["seed.shuffle"],
        ),
        resolved=resolved,
    )
    _validate(cfg)
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read, merge overrides (e.g. the CLI --seed expansion), validate."""
    with open(path) as fh:
        values = parse_config_text(fh.read())
    if overrides:
        values.update(overrides)
    return build_config(values)


def seed_overrides(master_seed: int) -> dict[str, str]:
    """The CLI --seed expansion: five consecutive stream seeds."""
    return {
        "seed.dataset": str(master_seed),
        "seed.victim": str(master_seed + 1),
        "seed.noise": str(master_seed + 2),
        "seed.attacker": str(master_seed + 3),
        "seed.shuffle": str(master_seed + 4),
    }
