"""Pipeline orchestration, zero-shot evaluation, baselines, k sweep and reports.

Stages: gen-data -> train-encoder -> build-library -> train-policy -> evaluate.
Every artifact carries a fingerprint of the artifact it was derived from, and
evaluation refuses to mix artifacts whose fingerprints disagree.

Hidden labels of robot trajectories are read in exactly one place,
``oracle_masks``, under the ``oracle`` audit scope. Everything else handles
label-stripped views.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import encoder, library, nn, policy
from .encoder import LabeledVideos, SupConConfig
from .errors import FingerprintMismatch
from .library import EmbeddingLibrary, InferenceConfig
from .policy import PolicyConfig
from .world import (
    LABEL_AUDIT,
    ROBOT_TASKS,
    Domain,
    TaskLabel,
    Trajectory,
    gen_demonstrator_video,
    gen_random_robot_trajectory,
    gen_scripted_robot_trajectory,
    initial_state,
    load_jsonl,
    make_layout,
    render_features,
    save_jsonl,
    success,
)

log = logging.getLogger(__name__)

METHODS = ("vip", "human-direct", "repr-cosine", "oracle", "random")
K_GRID = (1, 0.005, 0.01, 0.02, 0.05, 0.10, 0.25, 0.50, 1.0)

# disjoint seed spaces inside one base seed; trajectory ids equal their seeds
SEED_STRIDE = 10_000_000
DEMO_SPACE = 1_000_000
ROBOT_SPACE = 3_000_000
INSTRUCTION_SPACE = 5_000_000
EPISODE_SALT = 77


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration ------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    training_seeds: tuple[int, ...] = (0, 1, 2, 3)
    demos_per_class: int = 600
    robot_per_variant: int = 500
    robot_data: str = "random"  # or "scripted"
    variants: tuple[int, ...] = (0, 1, 2, 3)
    instructions_per_task: int = 3
    episodes_per_instruction: int = 5
    supcon: SupConConfig = field(default_factory=lambda: SupConConfig(epochs=15))
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    policy: PolicyConfig = field(default_factory=lambda: PolicyConfig(
        epochs=60, learning_rate=1.5e-3, final_learning_rate=1e-4))
    methods: tuple[str, ...] = METHODS
    k_grid: tuple[float, ...] = K_GRID
    ablate: bool = True
    workers: int = 1
    out: str = "runs/default"

    def __post_init__(self):
        for name in ("demos_per_class", "robot_per_variant", "instructions_per_task", "episodes_per_instruction", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.training_seeds or not self.variants:
            raise ValueError("need at least one training seed and one variant")
        if self.robot_data not in ("random", "scripted"):
            raise ValueError(f"unknown robot_data {self.robot_data!r}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.demos_per_class >= DEMO_SPACE // 6 or self.robot_per_variant >= 100_000:
            raise ValueError("dataset too large for the seed layout")


def _flatten(obj, prefix="") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def config_to_dict(config: PipelineConfig) -> dict[str, object]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in _flatten(config).items()}


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)


def config_to_text(config: PipelineConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in _flatten(config).items())


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if text.lower() == "none":
        return None
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        # optional numeric fields default to None
        try:
            return int(text)
        except ValueError:
            return float(text)
    return text


def _set_path(obj, path: list[str], text: str):
    f = {x.name: x for x in dataclasses.fields(obj)}
    if path[0] not in f:
        raise KeyError(f"unknown config key {'.'.join(path)!r}")
    current = getattr(obj, path[0])
    if len(path) > 1:
        if not dataclasses.is_dataclass(current):
            raise KeyError(f"{path[0]!r} has no sub-keys")
        return dataclasses.replace(obj, **{path[0]: _set_path(current, path[1:], text)})
    if isinstance(current, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if path[0] == "k_grid":
            # integers are neighbor counts, decimals are library fractions
            value = tuple(int(t) if t.isdigit() else float(t) for t in items)
        else:
            like = current[0] if current else 0
            value = tuple(_parse_scalar(t, like) for t in items)
    else:
        value = _parse_scalar(text, current)
    return dataclasses.replace(obj, **{path[0]: value})


def apply_overrides(config: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    """Set dotted keys (``policy.epochs``, ``inference.k_fraction``) from strings."""
    for key, text in overrides.items():
        config = _set_path(config, key.strip().split("."), str(text))
    return config


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: Optional[dict[str, str]] = None) -> PipelineConfig:
    config = PipelineConfig()
    if path is not None:
        config = apply_overrides(config, parse_config_text(Path(path).read_text()))
    return apply_overrides(config, overrides or {})


# -- seeds --------------------------------------------------------------------

def demo_seeds(config: PipelineConfig) -> list[tuple[TaskLabel, int]]:
    base = config.seed * SEED_STRIDE + DEMO_SPACE
    return [(task, base + j * len(TaskLabel) + int(task))
            for j in range(config.demos_per_class) for task in TaskLabel]


def robot_seed(config: PipelineConfig, variant: int, j: int) -> int:
    return config.seed * SEED_STRIDE + ROBOT_SPACE + variant * 100_000 + j


def instruction_seed(config: PipelineConfig, variant: int, task: TaskLabel, i: int) -> int:
    return config.seed * SEED_STRIDE + INSTRUCTION_SPACE + variant * 1000 + int(task) * 100 + i


def training_seed(config: PipelineConfig, index: int) -> int:
    return config.seed * 1000 + config.training_seeds[index]


# -- data ---------------------------------------------------------------------

@dataclass
class Datasets:
    demonstrations: list[Trajectory]  # labeled demonstrator videos for the encoder
    robot: dict[int, list[Trajectory]]  # per variant, labels kept for the oracle only

    def robot_stripped(self, variant: int) -> list[Trajectory]:
        return [t.strip() for t in self.robot[variant]]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for traj in self.demonstrations + [t for v in sorted(self.robot) for t in self.robot[v]]:
            h.update(np.int64(traj.id).tobytes())
            h.update(np.ascontiguousarray(traj.states).tobytes())
        return h.hexdigest()


def generate_data(config: PipelineConfig) -> Datasets:
    demos = [gen_demonstrator_video(task, None, seed)[0] for task, seed in demo_seeds(config)]
    robot = {}
    for v in config.variants:
        layout = make_layout(v)
        trajs = []
        for j in range(config.robot_per_variant):
            seed = robot_seed(config, v, j)
            if config.robot_data == "random":
                trajs.append(gen_random_robot_trajectory(layout, seed))
            else:
                task = list(TaskLabel)[j % len(TaskLabel)]
                trajs.append(gen_scripted_robot_trajectory(task, layout, seed))
        robot[v] = trajs
    return Datasets(demos, robot)


def write_data(data: Datasets, out) -> None:
    out = Path(out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(data.demonstrations, out / "demonstrator.jsonl")
    save_jsonl([t for v in sorted(data.robot) for t in data.robot[v]], out / "robot.jsonl")


def read_data(out) -> Datasets:
    out = Path(out) / "data"
    demos = load_jsonl(out / "demonstrator.jsonl")
    robot: dict[int, list[Trajectory]] = {}
    for traj in load_jsonl(out / "robot.jsonl"):
        robot.setdefault(traj.layout.variant_id, []).append(traj)
    return Datasets(demos, robot)


# -- training stages ----------------------------------------------------------

@dataclass
class SeedArtifacts:
    encoder_params: nn.ParamVector
    libraries: dict[int, EmbeddingLibrary]
    policy_params: Optional[nn.ParamVector] = None
    library_fingerprint: str = ""
    encoder_curve: list = field(default_factory=list)
    policy_curve: list = field(default_factory=list)
    encoder_audit: dict = field(default_factory=dict)  # robot samples seen, demonstration seeds used


def encoder_training_set(data: Datasets) -> LabeledVideos:
    items = [(render_features(t, Domain.Demonstrator), int(t.hidden_label)) for t in data.demonstrations]
    return LabeledVideos.from_pairs(items)


def train_encoder(config: PipelineConfig, data: Datasets, index: int, audit: Optional[dict] = None):
    videos = encoder_training_set(data)
    robot_samples = sum(d != Domain.Demonstrator for d in videos.domains)
    if audit is not None:
        audit["encoder_robot_samples"] = audit.get("encoder_robot_samples", 0) + robot_samples
        audit.setdefault("encoder_training_seeds", set()).update(t.id for t in data.demonstrations)
    return encoder.train_projection(videos, config.supcon, training_seed(config, index))


def build_libraries(data: Datasets, encoder_params: nn.ParamVector,
                    variants: Sequence[int]) -> dict[int, EmbeddingLibrary]:
    return {v: library.build_library(data.robot_stripped(v), encoder_params) for v in variants}


def libraries_fingerprint(libraries: dict[int, EmbeddingLibrary]) -> str:
    h = hashlib.sha256()
    for v in sorted(libraries):
        h.update(library.library_to_bytes(libraries[v]))
    return h.hexdigest()


def train_policy_stage(config: PipelineConfig, data: Datasets, libraries: dict[int, EmbeddingLibrary], index: int):
    """One policy shared by all variants, each trajectory paired with its own library entry."""
    trajs, lookup = [], {}
    for v in sorted(libraries):
        trajs += data.robot_stripped(v)
        lookup.update(libraries[v].lookup())
    return policy.train_policy(trajs, lookup, config.policy, training_seed(config, index))


def train_seed(config: PipelineConfig, data: Datasets, index: int) -> SeedArtifacts:
    audit: dict = {}
    with LABEL_AUDIT.scoped("train-encoder"):
        enc, enc_curve = run_stage("train-encoder", train_encoder, config, data, index, audit)
    with LABEL_AUDIT.scoped("build-library"):
        libs = run_stage("build-library", build_libraries, data, enc, config.variants)
    with LABEL_AUDIT.scoped("train-policy"):
        pol, pol_curve = run_stage("train-policy", train_policy_stage, config, data, libs, index)
    return SeedArtifacts(enc, libs, pol, libraries_fingerprint(libs), enc_curve, pol_curve, audit)


def run_stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def save_seed(artifacts: SeedArtifacts, config: PipelineConfig, out, index: int) -> None:
    d = Path(out) / f"seed{config.training_seeds[index]}"
    d.mkdir(parents=True, exist_ok=True)
    nn.save_params(artifacts.encoder_params, d / "encoder.vipp")
    if artifacts.encoder_curve:
        write_loss_curve(artifacts.encoder_curve, d / "loss_curve.csv")
    if artifacts.encoder_audit:
        write_encoder_audit(artifacts.encoder_audit, d / "encoder_audit.json")
    for v, lib in artifacts.libraries.items():
        library.save_library(lib, d / f"library_v{v}.vipl")
    if artifacts.policy_params is not None:
        policy.save_policy(artifacts.policy_params, config.policy, artifacts.library_fingerprint, d / "policy.vipp")


def write_encoder_audit(audit: dict, path) -> None:
    Path(path).write_text(json.dumps({
        "encoder_robot_samples": int(audit["encoder_robot_samples"]),
        "encoder_training_seeds": sorted(int(s) for s in audit["encoder_training_seeds"]),
    }))


def read_encoder_audit(path) -> dict:
    rec = json.loads(Path(path).read_text())
    return {"encoder_robot_samples": rec["encoder_robot_samples"],
            "encoder_training_seeds": set(rec["encoder_training_seeds"])}


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "intra_margin"])
        for rec in curve:
            w.writerow([rec.epoch, repr(rec.mean_loss), repr(rec.intra_margin)])


def load_seed(config: PipelineConfig, out, index: int, need_policy: bool = True) -> SeedArtifacts:
    d = Path(out) / f"seed{config.training_seeds[index]}"
    enc = nn.load_params(d / "encoder.vipp")
    libs = {v: library.load_library(d / f"library_v{v}.vipl")
            for v in config.variants if (d / f"library_v{v}.vipl").exists()}
    art = SeedArtifacts(enc, libs, library_fingerprint=libraries_fingerprint(libs))
    if (d / "encoder_audit.json").exists():
        art.encoder_audit = read_encoder_audit(d / "encoder_audit.json")
    if need_policy:
        art.policy_params, sidecar = policy.load_policy(d / "policy.vipp")
        if sidecar["library_fingerprint"] != art.library_fingerprint:
            raise FingerprintMismatch("policy was trained against different libraries")
    return art


def check_fingerprints(artifacts: SeedArtifacts) -> None:
    fp = artifacts.encoder_params.fingerprint()
    for v, lib in artifacts.libraries.items():
        if lib.encoder_fingerprint != fp:
            raise FingerprintMismatch(f"library of variant {v} was built with another encoder")
    if artifacts.library_fingerprint != libraries_fingerprint(artifacts.libraries):
        raise FingerprintMismatch("policy was trained against different libraries")


# -- evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    seed: int
    variant: int
    task: str
    instruction: int
    episode: int
    method: str
    k: int
    success: bool
    seconds: float = 0.0

    def key(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return d


def oracle_masks(data: Datasets, libraries: dict[int, EmbeddingLibrary]) -> dict[int, dict[TaskLabel, np.ndarray]]:
    """Which library entries solve each task. The only reader of robot hidden labels."""
    out = {}
    with LABEL_AUDIT.scoped("oracle"):
        for v, lib in libraries.items():
            labels = {t.id: t.all_labels for t in data.robot[v]}
            out[v] = {task: np.array([task in labels[int(i)] for i in lib.traj_ids]) for task in ROBOT_TASKS}
    return out


@dataclass
class _Context:
    """Frozen, read-only state shared by the episodes of one training seed."""

    config: PipelineConfig
    artifacts: SeedArtifacts
    library_reprs: dict[int, np.ndarray]
    masks: Optional[dict]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def library_reprs(data: Datasets, libraries: dict[int, EmbeddingLibrary]) -> dict[int, np.ndarray]:
    """Unit-norm backbone representations of the library videos, in library order."""
    out = {}
    for v, lib in libraries.items():
        by_id = {t.id: t for t in data.robot_stripped(v)}
        frames = np.stack([render_features(by_id[int(i)], Domain.Robot).frames for i in lib.traj_ids])
        out[v] = _unit(encoder.backbone_frames(frames))
    return out


def select_embedding(method: str, instruction_features, variant: int, task: TaskLabel, rng: np.random.Generator,
                     ctx: _Context, inference: InferenceConfig) -> np.ndarray:
    """Conditioning embedding for one episode under ``method``."""
    lib = ctx.artifacts.libraries[variant]
    query = encoder.encode(instruction_features, ctx.artifacts.encoder_params, _encoder_spec(ctx))
    if method == "vip":
        return library.topk_average(query, lib, inference)[0]
    if method == "human-direct":
        return query
    if method == "repr-cosine":
        q = _unit(encoder.backbone(instruction_features))
        return library.topk_average(query, lib, inference, scores=ctx.library_reprs[variant] @ q)[0]
    if method == "random":
        return lib.embeddings[rng.integers(len(lib))]
    if method == "oracle":
        mask = ctx.masks[variant][task]
        if not mask.any():
            return library.topk_average(query, lib, inference)[0]
        sub = lib.subset(mask)
        return library.topk_average(query, sub, inference_for_subset(inference, len(lib), len(sub)))[0]
    raise ValueError(f"unknown method {method!r}")


def inference_for_subset(inference: InferenceConfig, full: int, size: int) -> InferenceConfig:
    """The k resolved on the full library, capped at the candidate count."""
    return InferenceConfig(k=min(inference.resolve_k(full), size), k_fraction=None,
                           renormalize_average=inference.renormalize_average)


def _encoder_spec(ctx: _Context) -> nn.MlpSpec:
    return encoder.projection_spec(ctx.config.supcon.hidden)


@dataclass(frozen=True)
class _Job:
    seed: int
    variant: int
    task: TaskLabel
    instruction: int
    episode: int
    method: str
    inference: InferenceConfig


def _run_episode(job: _Job, ctx: _Context, instructions: dict) -> Episode:
    cfg = ctx.config
    layout = make_layout(job.variant)
    start_rng = np.random.default_rng([cfg.seed, job.variant, int(job.task), job.instruction, job.episode, EPISODE_SALT])
    start = initial_state(layout, start_rng)
    method_rng = np.random.default_rng([cfg.seed, job.seed, job.variant, int(job.task), job.instruction, job.episode,
                                        METHODS.index(job.method)])
    t0 = time.perf_counter()
    features = instructions[(job.variant, job.task, job.instruction)]
    emb = select_embedding(job.method, features, job.variant, job.task, method_rng, ctx, job.inference)
    traj = policy.rollout(layout, start, cfg.policy.spec(), ctx.artifacts.policy_params, emb, cfg.policy.horizon)
    seconds = time.perf_counter() - t0
    ok = success(traj, job.task)
    k = job.inference.resolve_k(len(ctx.artifacts.libraries[job.variant]))
    return Episode(job.seed, job.variant, job.task.name, job.instruction, job.episode, job.method, k, bool(ok), seconds)


def instruction_videos(config: PipelineConfig) -> dict:
    """Held-out demonstrator videos; their seeds never overlap encoder training seeds."""
    out = {}
    for v in config.variants:
        layout = make_layout(v)
        for task in ROBOT_TASKS:
            for i in range(config.instructions_per_task):
                seed = instruction_seed(config, v, task, i)
                out[(v, task, i)] = gen_demonstrator_video(task, layout, seed)[1]
    return out


def evaluate_seed(config: PipelineConfig, data: Datasets, artifacts: SeedArtifacts, index: int,
                  methods: Sequence[str], variants: Optional[Sequence[int]] = None,
                  inference: Optional[InferenceConfig] = None, instructions: Optional[dict] = None,
                  workers: Optional[int] = None) -> list[Episode]:
    check_fingerprints(artifacts)
    variants = list(config.variants if variants is None else variants)
    inference = inference or config.inference
    instructions = instructions or instruction_videos(config)
    libs = {v: artifacts.libraries[v] for v in variants}
    masks = oracle_masks(data, libs) if "oracle" in methods else None
    reprs = library_reprs(data, libs) if "repr-cosine" in methods else {}
    ctx = _Context(config, artifacts, reprs, masks)
    seed = config.training_seeds[index]
    jobs = [_Job(seed, v, task, i, e, m, inference)
            for m in methods for v in variants for task in ROBOT_TASKS
            for i in range(config.instructions_per_task) for e in range(config.episodes_per_instruction)]
    workers = workers or config.workers
    with LABEL_AUDIT.scoped("evaluate"):
        if workers == 1:
            return [_run_episode(j, ctx, instructions) for j in jobs]
        # episodes only read frozen state; map() keeps job order
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: _run_episode(j, ctx, instructions), jobs))


# -- aggregation and reports --------------------------------------------------

def _rate(eps: Sequence[Episode]) -> float:
    return 100.0 * float(np.mean([e.success for e in eps])) if eps else float("nan")


def aggregate(episodes: Sequence[Episode], by: Sequence[str] = ("method",)) -> dict[tuple, dict]:
    """Success rate per training seed, then mean and population std across seeds."""
    groups: dict[tuple, dict[int, list[Episode]]] = {}
    for e in episodes:
        key = tuple(getattr(e, b) for b in by)
        groups.setdefault(key, {}).setdefault(e.seed, []).append(e)
    out = {}
    for key in sorted(groups, key=str):
        per_seed = [_rate(groups[key][s]) for s in sorted(groups[key])]
        out[key] = {"mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)),
                    "per_seed": per_seed, "episodes": sum(len(x) for x in groups[key].values())}
    return out


@dataclass
class EvalReport:
    episodes: list[Episode]
    metadata: dict = field(default_factory=dict)
    ablation: list[dict] = field(default_factory=list)

    def summary(self, by=("method",)) -> dict[tuple, dict]:
        return aggregate(self.episodes, by)

    def method_means(self) -> dict[str, float]:
        return {k[0]: v["mean"] for k, v in self.summary().items()}

    def to_json(self) -> dict:
        """Everything except wall-clock, so identical runs give identical files."""
        def table(by):
            return [dict(zip(by, k), **v) for k, v in self.summary(by).items()]
        return {
            "metadata": self.metadata,
            "aggregates": {
                "method": table(("method",)),
                "method_variant": table(("method", "variant")),
                "method_task": table(("method", "task")),
            },
            "ablation": self.ablation,
            "episodes": [e.key() for e in self.episodes],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "EvalReport":
        return cls([Episode(**e) for e in blob["episodes"]], blob["metadata"], blob.get("ablation", []))


def emit_report(report: EvalReport, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "variant", "mean", "std", "cell"])
        methods = [m for m in METHODS if any(e.method == m for e in report.episodes)]
        table = report.summary(("method", "variant"))
        for m in methods:
            for key, row in table.items():
                if key[0] == m:
                    w.writerow([m, key[1], f"{row['mean']:.2f}", f"{row['std']:.2f}",
                                f"{row['mean']:.1f} ({row['std']:.1f})"])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "variant", "task", "instruction", "episode", "method", "k", "seconds"])
        for e in report.episodes:
            w.writerow([e.seed, e.variant, e.task, e.instruction, e.episode, e.method, e.k, f"{e.seconds:.6f}"])


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "resolved_k", "mean", "std"])
        for r in rows:
            w.writerow([r["k"], r["resolved_k"], repr(r["mean"]), repr(r["std"])])


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"k": float(r["k"]) if "." in r["k"] else int(r["k"]), "resolved_k": int(r["resolved_k"]),
                 "mean": float(r["mean"]), "std": float(r["std"])} for r in csv.DictReader(fh)]


def k_config(k, base: InferenceConfig) -> InferenceConfig:
    """Integers are absolute neighbor counts, fractions are shares of the library."""
    if isinstance(k, int):
        return InferenceConfig(k=k, k_fraction=None, renormalize_average=base.renormalize_average)
    return InferenceConfig(k=None, k_fraction=float(k), renormalize_average=base.renormalize_average)


def ablate_k(config: PipelineConfig, data: Datasets, seeds: dict[int, SeedArtifacts],
             instructions: Optional[dict] = None) -> list[dict]:
    """ViP success rate per k, mean and std over training seeds."""
    instructions = instructions or instruction_videos(config)
    rows = []
    for k in config.k_grid:
        inf = k_config(k, config.inference)
        eps = []
        for index, art in seeds.items():
            eps += evaluate_seed(config, data, art, index, ["vip"], inference=inf, instructions=instructions)
        stats = aggregate(eps)[("vip",)]
        sizes = {len(art.libraries[v]) for art in seeds.values() for v in config.variants}
        resolved = inf.resolve_k(min(sizes))
        rows.append({"k": k, "resolved_k": resolved, "mean": stats["mean"], "std": stats["std"]})
        log.info("k %s (%d): %.1f (%.1f)", k, resolved, stats["mean"], stats["std"])
    return rows


def hygiene_audit(seeds: dict[int, SeedArtifacts], config: PipelineConfig) -> dict:
    """Zero-shot hygiene: flag reads "clean" only if every check passes.

    A seed without an encoder audit record counts as a violation.
    """
    audit = {"encoder_robot_samples": 0, "encoder_training_seeds": set()}
    missing = 0
    for art in seeds.values():
        if not art.encoder_audit:
            missing += 1
            continue
        audit["encoder_robot_samples"] += art.encoder_audit["encoder_robot_samples"]
        audit["encoder_training_seeds"] |= set(art.encoder_audit["encoder_training_seeds"])
    reads = {k: v for k, v in LABEL_AUDIT.reads.items() if v}
    outside = {k: v for k, v in reads.items() if k != "oracle"}
    instr = {instruction_seed(config, v, t, i) for v in config.variants for t in ROBOT_TASKS
             for i in range(config.instructions_per_task)}
    overlap = instr & audit.get("encoder_training_seeds", set())
    checks = {
        "encoder_robot_samples": int(audit.get("encoder_robot_samples", 0)),
        "label_reads_outside_oracle": int(sum(outside.values())),
        "label_reads_by_scope": dict(sorted(reads.items())),
        "instruction_training_seed_overlap": len(overlap),
        "seeds_without_encoder_audit": missing,
    }
    clean = (missing == 0 and checks["encoder_robot_samples"] == 0 and checks["label_reads_outside_oracle"] == 0
             and checks["instruction_training_seed_overlap"] == 0)
    checks["flag"] = "clean" if clean else "violated"
    return checks


# -- whole pipeline -----------------------------------------------------------

@dataclass
class PipelineResult:
    data: Datasets
    seeds: dict[int, SeedArtifacts]
    report: EvalReport
    timings: dict[str, float]


def run_pipeline(config: PipelineConfig, write: bool = True) -> PipelineResult:
    LABEL_AUDIT.reset()
    timings = {}
    out = Path(config.out)
    t0 = time.perf_counter()
    with LABEL_AUDIT.scoped("gen-data"):
        data = run_stage("gen-data", generate_data, config)
    timings["gen-data"] = time.perf_counter() - t0
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_to_text(config))
        run_stage("gen-data", write_data, data, out)

    seeds = {}
    for index in range(len(config.training_seeds)):
        t1 = time.perf_counter()
        seeds[index] = train_seed(config, data, index)
        timings[f"train-seed{config.training_seeds[index]}"] = time.perf_counter() - t1
        if write:
            save_seed(seeds[index], config, out, index)

    t2 = time.perf_counter()
    instructions = instruction_videos(config)
    episodes = []
    for index, art in seeds.items():
        episodes += run_stage("evaluate", evaluate_seed, config, data, art, index, config.methods,
                           None, None, instructions)
    timings["evaluate"] = time.perf_counter() - t2

    ablation = []
    if config.ablate:
        t3 = time.perf_counter()
        with LABEL_AUDIT.scoped("ablate-k"):
            ablation = run_stage("ablate-k", ablate_k, config, data, seeds, instructions)
        timings["ablate-k"] = time.perf_counter() - t3

    report = EvalReport(episodes, {}, ablation)
    report.metadata = report_metadata(config, data, seeds, hygiene_audit(seeds, config))
    if write:
        emit_report(report, out)
        if ablation:
            write_ablation_csv(ablation, out / "ablate_k.csv")
    return PipelineResult(data, seeds, report, timings)


def report_metadata(config: PipelineConfig, data: Datasets, seeds: dict[int, SeedArtifacts], audit: dict) -> dict:
    settings = config_to_dict(config)
    settings.pop("out")  # where a run is written does not change what it computes
    return {
        "config": settings,
        "k_fraction": config.inference.k_fraction,
        "fingerprints": {
            "datasets": data.fingerprint(),
            "seeds": {str(config.training_seeds[i]): {
                "encoder": a.encoder_params.fingerprint().hex(),
                "libraries": a.library_fingerprint,
                "policy": a.policy_params.fingerprint().hex() if a.policy_params is not None else None,
            } for i, a in seeds.items()},
        },
        "audit": audit,
    }


# -- diagnostics ----------------------------------------------------------------

def retrieval_purity(config: PipelineConfig, data: Datasets, artifacts: SeedArtifacts,
                     instructions: Optional[dict] = None) -> tuple[float, float]:
    """Share of top-k neighbors whose hidden label is the query task, and its chance level.

    Reads robot labels under its own audit scope; not part of any inference path.
    """
    instructions = instructions or instruction_videos(config)
    hits, chance = [], []
    with LABEL_AUDIT.scoped("diagnostic"):
        for v in config.variants:
            lib = artifacts.libraries[v]
            labels = {t.id: t.hidden_label for t in data.robot[v]}
            lib_labels = np.array([labels[int(i)] if labels[int(i)] is not None else -1 for i in lib.traj_ids])
            k = config.inference.resolve_k(len(lib))
            for task in ROBOT_TASKS:
                chance.append(float(np.mean(lib_labels == int(task))))
                for i in range(config.instructions_per_task):
                    q = encoder.encode(instructions[(v, task, i)], artifacts.encoder_params,
                                       encoder.projection_spec(config.supcon.hidden))
                    top = library.rank(lib.embeddings @ q, lib.traj_ids)[:k]
                    hits.append(float(np.mean(lib_labels[top] == int(task))))
    return float(np.mean(hits)), float(np.mean(chance))
