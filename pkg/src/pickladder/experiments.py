"""Experiment runners: ladder, compositional, scale and object-count.

Every run writes ``outcomes.ndjson`` (one line per episode), ``report.csv``,
``report.txt`` and ``manifest.json``.  The manifest holds the complete
config, so ``run_experiment(ExperimentConfig.from_manifest(path))``
regenerates identical outcome logs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .config import EnvConfig
from .dataset import read_dataset
from .imitation import BCConfig, ObsMode, bc_train, build_training_set, load_bc, make_policy, save_bc
from .metrics import EpisodeOutcome, aggregate, dominance_holds, format_table, ladder_report, reports_to_csv, write_outcomes
from .placement import LADDER, Phase, Regime, make_pairing_split, train_region_modes
from .policies import SCRIPTED, make_scripted
from .recorder import record_in_process
from .rollout import Scenario, evaluate

log = logging.getLogger(__name__)

EXPERIMENTS = ("ladder", "compositional", "scale", "object-count")
LEARNED = ("bc-blind", "bc-grounded")

# desk-scale sizes, ten times below the full-scale ladder
SCALE_SIZES = {"medium": (50, 100), "large": (100, 500), "full": (1000, 10_000)}

DATA_SEED = 0
EVAL_SEED = 1_000_003


class MissingInput(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "ladder"
    regimes: list = field(default_factory=lambda: [r.value for r in LADDER])
    policies: list = field(default_factory=lambda: list(SCRIPTED))
    eval_episodes: int = 100
    demos: int = 1000
    sizes: dict = field(default_factory=lambda: {k: list(v) for k, v in SCALE_SIZES.items()})
    counts: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    split_seed: int | None = None
    seed: int = EVAL_SEED
    data_seed: int = DATA_SEED
    bc: dict = field(default_factory=lambda: BCConfig(epochs=10).to_dict())
    expert: str = "oracle"
    out: str = "runs/ladder"
    env: dict = field(default_factory=lambda: EnvConfig().to_dict())
    auto_data: bool = True

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        for r in self.regimes:
            Regime.parse(r)

    @property
    def env_config(self) -> EnvConfig:
        return EnvConfig.from_dict(self.env)

    @property
    def bc_config(self) -> BCConfig:
        return BCConfig.from_dict(self.bc)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_manifest(cls, path: str | Path, out: str | None = None) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text())["config"]
        if out is not None:
            d["out"] = out
        return cls(**d)


@dataclass
class ExperimentResult:
    outcomes: list
    report_text: str
    report_csv: str
    out_dir: Path
    violations: list = field(default_factory=list)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _expert(cfg: ExperimentConfig, config: EnvConfig):
    if cfg.expert == "oracle":
        return make_scripted("oracle", config)
    if cfg.expert.startswith("ppo:"):
        from .ppo import load_expert

        return load_expert(cfg.expert[4:], config)
    raise ValueError(f"unknown expert {cfg.expert!r}; use 'oracle' or 'ppo:PATH'")


def _scenario_key(s: Scenario) -> str:
    return hashlib.sha256(json.dumps(s.to_dict(), sort_keys=True).encode()).hexdigest()[:10]


def dataset_dir(cfg: ExperimentConfig, scenario: Scenario) -> Path:
    return Path(cfg.out) / "datasets" / f"{scenario.regime.value}-{scenario.n_objects}obj-{_scenario_key(scenario)}"


def ensure_dataset(cfg: ExperimentConfig, scenario: Scenario, count: int) -> list:
    """Demonstrations for ``scenario`` (the first ``count`` episodes of a
    cached dataset, recorded on demand)."""
    root = dataset_dir(cfg, scenario)
    have = 0
    if (root / "meta" / "info.json").exists():
        have = json.loads((root / "meta" / "info.json").read_text())["total_episodes"]
    if have < count:
        if not cfg.auto_data:
            raise MissingInput(
                f"need {count} demonstrations at {root}; create them with "
                f"`pickladder gen-data --regime {scenario.regime.value} --objects {scenario.n_objects} "
                f"--count {count} --out {root}`"
            )
        record_in_process(_expert(cfg, scenario.config), scenario, root, count, base_seed=cfg.data_seed,
                          max_attempts=50 * max(count, 1))
    return read_dataset(root, subset=count, config=scenario.config)


def build_policy(cfg: ExperimentConfig, spec: str, train_scenario: Scenario, demos: int | None = None):
    config = train_scenario.config
    if spec in SCRIPTED:
        region_of = train_region_modes(train_scenario.split) if (spec == "shortcut" and train_scenario.split) else None
        return make_scripted(spec, config, region_of)
    if spec.startswith("bc:"):
        return load_bc(spec[3:], config)
    if spec.startswith("ppo:"):
        from .ppo import load_expert

        return load_expert(spec[4:], config)
    if spec in LEARNED:
        n = cfg.demos if demos is None else demos
        mode = ObsMode.IDENTITY_BLIND if spec == "bc-blind" else ObsMode.GROUNDED
        bc = replace(cfg.bc_config, obs_mode=mode)
        records = ensure_dataset(cfg, train_scenario, n)
        result = bc_train(bc, build_training_set(records, bc, config), config)
        ckpt = Path(cfg.out) / "checkpoints" / f"{spec}-{train_scenario.regime.value}-{train_scenario.n_objects}obj-{n}"
        save_bc(ckpt, result, config, {"scenario": train_scenario.to_dict(), "demos": n})
        return make_policy(result, config, spec)
    raise ValueError(f"unknown policy {spec!r}")


def _eval(cfg, policy, scenario, labels) -> list[EpisodeOutcome]:
    return evaluate(policy, scenario, cfg.eval_episodes, base_seed=cfg.seed, labels=labels)


def _ladder(cfg: ExperimentConfig) -> list:
    out = []
    for r in cfg.regimes:
        scenario = Scenario(cfg.env_config, Regime.parse(r))
        for spec in cfg.policies:
            out += _eval(cfg, build_policy(cfg, spec, scenario), scenario, {"policy": spec})
    return out


def _compositional(cfg: ExperimentConfig) -> list:
    split = make_pairing_split(cfg.split_seed)
    regime = Regime.parse(cfg.regimes[0]) if cfg.regimes else Regime.SMALL_JITTER
    train_sc = Scenario(cfg.env_config, regime, split, Phase.TRAIN)
    out = []
    for spec in cfg.policies:
        policy = build_policy(cfg, spec, train_sc)
        for phase in (Phase.TRAIN, Phase.EVAL):
            sc = train_sc.with_phase(phase)
            out += _eval(cfg, policy, sc, {"policy": spec})
    return out


def _scale(cfg: ExperimentConfig) -> list:
    out = []
    for r in cfg.regimes:
        regime = Regime.parse(r)
        if regime.value not in cfg.sizes:
            continue
        scenario = Scenario(cfg.env_config, regime)
        for spec in cfg.policies:
            sizes = cfg.sizes[regime.value] if spec in LEARNED else [None]
            for n in sizes:
                pol = build_policy(cfg, spec, scenario, n)
                out += _eval(cfg, pol, scenario, {"policy": spec, "dataset_size": n})
    return out


def _object_count(cfg: ExperimentConfig) -> list:
    out = []
    regime = Regime.parse(cfg.regimes[0]) if cfg.regimes else Regime.FULL_RANDOM
    for k in cfg.counts:
        scenario = Scenario(cfg.env_config.first_objects(k), regime)
        for spec in cfg.policies:
            out += _eval(cfg, build_policy(cfg, spec, scenario), scenario, {"policy": spec})
    return out


RUNNERS = {"ladder": _ladder, "compositional": _compositional, "scale": _scale, "object-count": _object_count}
GROUPINGS = {
    "ladder": ("regime", "policy"),
    "compositional": ("policy", "phase"),
    "scale": ("regime", "policy", "dataset_size"),
    "object-count": ("policy", "n_objects"),
}


def scale_deltas(reports) -> str:
    """Before -> after lines for each (regime, policy) with two dataset sizes."""
    rows: dict[tuple, list] = {}
    for r in reports:
        if r.group.get("dataset_size") is None:
            continue
        rows.setdefault((r.group["regime"], r.group["policy"]), []).append(r)
    lines = []
    for (regime, policy), rs in rows.items():
        rs.sort(key=lambda r: r.group["dataset_size"])
        a, b = rs[0], rs[-1]
        cells = [
            f"{100 * a.rates[m].rate:.0f}->{100 * b.rates[m].rate:.0f}" for m in ("success", "grasp_any", "reach")
        ]
        lines.append(f"{policy:12s} {Regime.parse(regime).label:14s} "
                     f"{a.group['dataset_size']}->{b.group['dataset_size']}  " + "  ".join(cells))
    return "\n".join(lines) + ("\n" if lines else "")


def self_check(cfg: ExperimentConfig, outcomes: list) -> list[str]:
    """Acceptance invariants that must hold for any run."""
    problems = []
    groups: dict[tuple, list] = {}
    for o in outcomes:
        groups.setdefault((o.policy, o.regime, o.phase, o.n_objects, o.dataset_size), []).append(o)
    for key, items in groups.items():
        if not dominance_holds(items):
            problems.append(f"dominance violated for {key}")
        n = len(items)
        rate = sum(o.success for o in items) / n
        policy, regime = key[0], key[1]
        if policy == "oracle" and rate < 0.95:
            problems.append(f"oracle success {rate:.3f} < 0.95 for {key}")
        if policy == "random" and rate > 0.05 + 3 * math.sqrt(0.05 * 0.95 / n):
            problems.append(f"random success {rate:.3f} above floor for {key}")
        if policy == "nearest" and regime == Regime.FULL_RANDOM.value:
            p = 1.0 / key[3]
            if abs(rate - p) > 3 * math.sqrt(p * (1 - p) / n) + 1e-12:
                problems.append(f"nearest success {rate:.3f} not within 3 sigma of {p:.3f} for {key}")
    return problems


def run_experiment(cfg: ExperimentConfig, check: bool = False) -> ExperimentResult:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outcomes = RUNNERS[cfg.experiment](cfg)
    reports = aggregate(outcomes, GROUPINGS[cfg.experiment])
    if cfg.experiment == "ladder":
        text, csv_text = ladder_report(reports)
    else:
        text, csv_text = format_table(reports), reports_to_csv(reports)
    if cfg.experiment == "scale":
        text += "\n" + scale_deltas(reports)
    write_outcomes(out_dir / "outcomes.ndjson", outcomes)
    (out_dir / "report.csv").write_text(csv_text)
    (out_dir / "report.txt").write_text(text)
    violations = self_check(cfg, outcomes) if check else []
    manifest = {
        "config": cfg.to_dict(),
        "env_config_hash": cfg.env_config.config_hash(),
        "episode_seeds": {"base": cfg.seed, "count": cfg.eval_episodes, "rule": "SeedSequence([base, index])"},
        "files": {name: _digest(out_dir / name) for name in ("outcomes.ndjson", "report.csv", "report.txt")},
        "violations": violations,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(outcomes, text, csv_text, out_dir, violations)
