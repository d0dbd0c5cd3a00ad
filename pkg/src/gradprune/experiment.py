"""Seeded multi-trial experiments: attack once, defend per (SPC, trial), report.

Configuration is a flat ``key = value`` text file; ``#`` starts a comment.
Unknown keys are errors.  See ``ExperimentConfig`` for every key and its
default.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .baselines import activation_prune, ft_defense
from .data import (DefenderDataset, LabeledDataset, TriggerSpec, generate_synthetic, load_idx,
                   make_defender_split)
from .errors import ConfigError, GradPruneError
from .finetune import FineTuneConfig, FineTuneHistory, fine_tune
from .metrics import MetricsReport, evaluate, read_jsonl, reports_to_csv, reports_to_jsonl
from .models import Model, load_checkpoint, save_checkpoint
from .pruning import PruneConfig, PruneTrace, prune_loop
from .training import SgdConfig, train_backdoored

log = logging.getLogger(__name__)

DEFENSES = ("ours", "ft", "fp", "none")
STAGES = ("baseline", "post-prune", "post-finetune")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    dataset: str = "synthetic"
    num_classes: int = 4
    image_shape: Tuple[int, ...] = (1, 16, 16)
    train_per_class: int = 500
    test_per_class: int = 200
    pool_per_class: int = 200
    data_seed: int = 1234
    noise: float = 0.15
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    # attack
    arch: str = "cnn-small"
    trigger: str = "patch"
    patch_size: int = 3
    patch_fill: float = 1.0
    blend_ratio: float = 0.2
    blend_seed: int = 0
    target: int = 0
    poison_ratio: float = 0.1
    attack_lr: float = 0.05
    attack_momentum: float = 0.9
    attack_batch_size: int = 32
    attack_epochs: int = 30
    # defense
    defense: str = "ours"
    alpha_mode: str = "drop"
    alpha: float = 0.10
    patience_p: int = 10
    prune_tol: float = 1e-4
    include_bias: bool = True
    ft_lr: float = 0.01
    ft_momentum: float = 0.9
    ft_batch_size: int = 16
    ft_max_epochs: int = 100
    patience_t: int = 5
    ft_tol: float = 1e-4
    fp_prune_fraction: float = 0.3
    # protocol
    spc: Tuple[int, ...] = (2, 10, 100)
    trials: int = 5
    base_seed: int = 0
    jobs: int = 1
    output_dir: str = "runs/default"
    cache_dir: str = ""

    def __post_init__(self):
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.trigger not in ("patch", "blended"):
            raise ConfigError(f"trigger must be 'patch' or 'blended', got {self.trigger!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.spc or min(self.spc) < 2:
            raise ConfigError("every spc value must be >= 2")
        if len(self.image_shape) != 3:
            raise ConfigError("image_shape must be C,H,W")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not 0.0 < self.poison_ratio < 1.0:
            raise ConfigError("poison_ratio must lie in (0, 1)")
        if self.dataset == "idx":
            for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"dataset=idx requires {key}")
        # validated eagerly so a bad value fails before any training
        self.prune_config()
        self.finetune_config(0)
        self.attacker_config()

    # -- derived configs -------------------------------------------------------

    @property
    def attack_name(self) -> str:
        return "badnets" if self.trigger == "patch" else "blended"

    def attacker_config(self, seed: Optional[int] = None) -> SgdConfig:
        return SgdConfig(self.attack_lr, self.attack_momentum, self.attack_batch_size, self.attack_epochs,
                         self.base_seed if seed is None else seed)

    def prune_config(self) -> PruneConfig:
        return PruneConfig(self.alpha_mode, self.alpha, self.patience_p, self.prune_tol, self.include_bias)

    def finetune_config(self, seed: int) -> FineTuneConfig:
        sgd = SgdConfig(self.ft_lr, self.ft_momentum, self.ft_batch_size, self.ft_max_epochs, seed)
        return FineTuneConfig(sgd, self.patience_t, self.ft_tol)

    def trigger_spec(self) -> TriggerSpec:
        shape = self.image_shape
        if self.dataset == "idx" and self.idx_train_images:
            shape = (1,) + _idx_hw(self.idx_train_images)
        if self.trigger == "patch":
            return TriggerSpec.badnets(shape, self.patch_size, self.patch_fill, self.target)
        return TriggerSpec.blended(shape, self.blend_ratio, self.target, self.blend_seed)

    def attack_key(self) -> str:
        """Content hash of everything that determines the backdoored model."""
        data_keys = ["dataset", "num_classes", "image_shape", "train_per_class", "data_seed", "noise",
                     "idx_train_images", "idx_train_labels", "pool_per_class"]
        attack_keys = ["arch", "trigger", "patch_size", "patch_fill", "blend_ratio", "blend_seed", "target",
                       "poison_ratio", "attack_lr", "attack_momentum", "attack_batch_size", "attack_epochs",
                       "base_seed"]
        payload = {k: getattr(self, k) for k in data_keys + attack_keys}
        for key in ("idx_train_images", "idx_train_labels"):
            if payload[key]:
                payload[key + "_sha256"] = _file_digest(payload[key])
        blob = json.dumps(payload, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:20]

    # -- (de)serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _idx_hw(path) -> Tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16:
        raise ConfigError(f"{path}: not an IDX image file")
    return int.from_bytes(head[8:12], "big"), int.from_bytes(head[12:16], "big")


_CONVERTERS = {int: int, float: float, str: str, bool: _parse_bool, Tuple[int, ...]: _int_tuple}


def _field_converter(f):
    hint = {"int": int, "float": float, "str": str, "bool": bool, "Tuple[int, ...]": Tuple[int, ...]}.get(f.type, f.type)
    return _CONVERTERS[hint]


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``overrides`` (already typed) win over the file."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _field_converter(known[key])(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown override {key!r}")
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExperimentData:
    train: LabeledDataset
    test: LabeledDataset
    pool: LabeledDataset


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    """Attacker training set, evaluation test set and the disjoint defender pool."""
    if cfg.dataset == "synthetic":
        shape = tuple(cfg.image_shape)
        gen = lambda per_class, offset: generate_synthetic(cfg.num_classes, per_class, shape,
                                                           cfg.data_seed + offset, cfg.noise)
        return ExperimentData(gen(cfg.train_per_class, 0), gen(cfg.test_per_class, 1), gen(cfg.pool_per_class, 2))
    for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"):
        if not os.path.exists(getattr(cfg, key)):
            raise ConfigError(f"{key}: file {getattr(cfg, key)!r} does not exist")
    full = load_idx(cfg.idx_train_images, cfg.idx_train_labels, cfg.num_classes)
    test = load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.num_classes)
    # the defender pool is carved out of the training file, never seen by the attacker
    rng = np.random.default_rng(cfg.data_seed)
    pool_idx = []
    for k in range(full.num_classes):
        members = np.flatnonzero(full.labels == k)
        take = min(cfg.pool_per_class, members.size)
        pool_idx.append(np.sort(rng.choice(members, size=take, replace=False)))
    pool_idx = np.concatenate(pool_idx)
    rest = np.setdiff1d(np.arange(len(full)), pool_idx)
    return ExperimentData(full.subset(rest), test, full.subset(pool_idx))


# ---------------------------------------------------------------------------
# atomic outputs
# ---------------------------------------------------------------------------

def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.name)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# attack / defend
# ---------------------------------------------------------------------------

def obtain_backdoored_model(cfg: ExperimentConfig, data: ExperimentData, trig: TriggerSpec) -> Tuple[Model, bool]:
    """Load the cached attack for this config or train it; returns (model, from_cache)."""
    cache_dir = Path(cfg.cache_dir or Path(cfg.output_dir) / "cache")
    path = cache_dir / f"attack-{cfg.attack_key()}.ckpt"
    if path.exists():
        log.info("using cached backdoored model %s", path)
        return load_checkpoint(path), True
    log.info("training backdoored %s (seed %d)", cfg.arch, cfg.base_seed)
    model = train_backdoored(cfg.arch, data.train, trig, cfg.poison_ratio, cfg.attacker_config())
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    return model, False


@dataclass
class DefenseResult:
    post_prune: Model
    final: Model
    trace: Optional[PruneTrace] = None
    history: Optional[FineTuneHistory] = None
    pruned: List = field(default_factory=list)


def run_defense(name: str, model: Model, defender: DefenderDataset, cfg: ExperimentConfig, seed: int) -> DefenseResult:
    ft_cfg = cfg.finetune_config(seed)
    if name == "none":
        return DefenseResult(model, model)
    if name == "ours":
        pruned, trace = prune_loop(model, defender, cfg.prune_config())
        tuned, history = fine_tune(pruned, defender, ft_cfg)
        return DefenseResult(pruned, tuned, trace, history, trace.pruned)
    if name == "ft":
        tuned, history = ft_defense(model, defender, ft_cfg)
        return DefenseResult(model, tuned, None, history)
    if name == "fp":
        pruned, chosen = activation_prune(model, defender.clean_train, cfg.fp_prune_fraction)
        tuned, history = ft_defense(pruned, defender, ft_cfg)
        return DefenseResult(pruned, tuned, None, history, chosen)
    raise ConfigError(f"unknown defense {name!r}")


def _trial_stem(spc: int, trial: int) -> str:
    return f"spc{spc}-trial{trial}"


def run_trial(cfg: ExperimentConfig, model: Model, data: ExperimentData, trig: TriggerSpec, spc: int,
              trial: int, out_dir: Path) -> List[MetricsReport]:
    """One defense run; depends only on (config, spc, trial), never on other trials."""
    seed = cfg.base_seed + trial
    defender = make_defender_split(data.pool, spc, trig, seed)
    result = run_defense(cfg.defense, model, defender, cfg, seed)
    stem = _trial_stem(spc, trial)
    tags = dict(trial=trial, seed=seed, spc=spc, attack=cfg.attack_name, defense=cfg.defense)
    reports = [
        evaluate(model, data.test, trig, stage="baseline", **tags),
        evaluate(result.post_prune, data.test, trig, stage="post-prune", **tags),
        evaluate(result.final, data.test, trig, stage="post-finetune", **tags),
    ]
    if result.trace is not None:
        write_text_atomic(out_dir / "traces" / f"{stem}.prune.jsonl", result.trace.to_jsonl())
    if result.history is not None:
        write_text_atomic(out_dir / "traces" / f"{stem}.finetune.jsonl", result.history.to_jsonl())
    save_checkpoint(result.final, out_dir / "checkpoints" / f"{stem}.ckpt")
    return reports


def _trial_worker(args):
    cfg, model, data, trig, spc, trial, out_dir = args
    try:
        return spc, trial, run_trial(cfg, model, data, trig, spc, trial, out_dir), None
    except Exception as exc:  # recorded per trial; the run carries on
        log.exception("trial spc=%d trial=%d failed", spc, trial)
        return spc, trial, [], f"{type(exc).__name__}: {exc}"


class ExperimentFailed(GradPruneError):
    pass


def summarize(reports: Sequence[MetricsReport]) -> str:
    """CSV of mean and sample standard deviation per (stage, spc, attack, defense)."""
    groups: Dict[tuple, List[MetricsReport]] = {}
    for r in reports:
        groups.setdefault((STAGES.index(r.stage) if r.stage in STAGES else len(STAGES), r.stage, r.spc,
                           r.attack, r.defense), []).append(r)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "spc", "attack", "defense", "n", "acc_mean", "acc_std", "asr_mean", "asr_std",
                     "ra_mean", "ra_std"])
    for key in sorted(groups):
        rows = sorted(groups[key], key=lambda r: r.trial)
        row = [key[1], key[2], key[3], key[4], len(rows)]
        for metric in ("acc", "asr", "ra"):
            values = np.array([getattr(r, metric) for r in rows])
            std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            row += [repr(float(values.mean())), repr(std)]
        writer.writerow(row)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Attack once, run the configured defense for every (spc, trial), write all artifacts.

    Returns the run directory.  Raises ExperimentFailed only when every
    trial failed.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "config.txt", cfg.to_text())
    data = build_data(cfg)
    trig = cfg.trigger_spec()
    model, cached = obtain_backdoored_model(cfg, data, trig)
    save_checkpoint(model, out / "checkpoints" / "backdoored.ckpt")

    jobs = [(cfg, model, data, trig, spc, trial, out) for spc in cfg.spc for trial in range(cfg.trials)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_trial_worker, jobs))
    else:
        results = [_trial_worker(job) for job in jobs]

    reports: List[MetricsReport] = []
    failures = []
    for spc, trial, trial_reports, error in results:
        reports += trial_reports
        if error is not None:
            failures.append({"spc": spc, "trial": trial, "error": error})
    reports.sort(key=lambda r: (STAGES.index(r.stage), r.spc, r.trial))

    write_text_atomic(out / "metrics.jsonl", reports_to_jsonl(reports))
    write_text_atomic(out / "metrics.csv", reports_to_csv(reports))
    write_text_atomic(out / "summary.csv", summarize(reports))
    write_text_atomic(out / "failures.jsonl", "".join(json.dumps(f, sort_keys=True) + "\n" for f in failures))
    manifest = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "attack_key": cfg.attack_key(),
        "attack_cached": cached,
        "trial_seeds": {str(t): cfg.base_seed + t for t in range(cfg.trials)},
        "n_trials_ok": len(jobs) - len(failures),
        "n_trials_failed": len(failures),
        "versions": {"gradprune": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    write_text_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if failures and len(failures) == len(jobs):
        raise ExperimentFailed(f"all {len(jobs)} trials failed; first error: {failures[0]['error']}")
    return out


def aggregate_runs(run_dirs: Sequence) -> str:
    """Summary CSV over the metrics.jsonl files of several run directories."""
    reports: List[MetricsReport] = []
    for d in run_dirs:
        path = Path(d) / "metrics.jsonl" if Path(d).is_dir() else Path(d)
        if not path.exists():
            raise ConfigError(f"no metrics found at {path}")
        reports += read_jsonl(path.read_text())
    return summarize(reports)
