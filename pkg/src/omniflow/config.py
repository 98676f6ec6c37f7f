"""Experiment configuration (JSON) shared by the CLI subcommands."""
import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field

from ._validation import check_positive_int
from .conditioning import SELECTION_STRATEGIES, DropoutConfig
from .data_pipeline import TASKS, CleaningConfig
from .dit import DiTConfig
from .exceptions import RejectedInputError

SEED_ENV = "OMNIFLOW_SEED"
TRAIN_TASKS = ("conditional_mean", "manifest")


@dataclass
class SelectionConfig:
    strategy: str = "uniform_visual"
    budget: int = 16

    def __post_init__(self):
        if self.strategy not in SELECTION_STRATEGIES:
            raise RejectedInputError(f"selection strategy must be one of {SELECTION_STRATEGIES}")
        check_positive_int(self.budget, "selection.budget", allow_zero=True)


@dataclass
class SPSweep:
    workers: list = field(default_factory=lambda: [1, 2, 4, 8])
    seq_lens: list = field(default_factory=lambda: [16, 32])
    heads: list = field(default_factory=lambda: [4, 8])
    d_head: list = field(default_factory=lambda: [8])
    cond_lens: list = field(default_factory=lambda: [24])

    def configs(self):
        for p in self.workers:
            for s in self.seq_lens:
                for h in self.heads:
                    for dh in self.d_head:
                        for lc in self.cond_lens:
                            yield s, lc, h, dh, p


@dataclass
class EvalConfig:
    n_conditions: int = 20
    n_samples: int = 128
    tolerance: float = 0.1


@dataclass
class AblationConfig:
    grid: list = field(default_factory=lambda: [[0.0, 0.0, 0.0], [0.3, 0.3, 0.3]])
    zero_segments: list = field(default_factory=lambda: ["mllm", "tgt", "edit"])
    repeats: int = 1
    n_steps: int = 2000


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: str = "conditional_mean"
    manifest: str = None
    model: DiTConfig = field(default_factory=lambda: DiTConfig(d_latent=2))
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    u_threshold: float = 0.5
    learning_rate: float = 1e-3
    n_steps: int = 2000
    batch_size: int = 16
    sampler_steps: int = 64
    latent_patch: int = 4
    task_weights: dict = field(default_factory=lambda: {t: 1.0 for t in TASKS})
    sp_degree: int = 4
    sp_sweep: SPSweep = field(default_factory=SPSweep)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self):
        if self.task not in TRAIN_TASKS:
            raise RejectedInputError(f"task must be one of {TRAIN_TASKS}")
        if self.task == "manifest" and not self.manifest:
            raise RejectedInputError("task 'manifest' needs a manifest path")
        if not 0.0 < self.u_threshold < 1.0:
            raise RejectedInputError("u_threshold must lie in (0, 1)")
        if self.learning_rate < 0:
            raise RejectedInputError("learning_rate must be nonnegative")
        check_positive_int(self.n_steps, "n_steps", allow_zero=True)
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.sampler_steps, "sampler_steps")
        check_positive_int(self.sp_degree, "sp_degree")
        unknown = set(self.task_weights) - set(TASKS)
        if unknown:
            raise RejectedInputError(f"unknown tasks in task_weights: {sorted(unknown)}")
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d).validate()

    @classmethod
    def from_file(cls, path, env=None):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls.from_dict(apply_env(d, env))


_NESTED = {
    "model": DiTConfig,
    "dropout": DropoutConfig,
    "selection": SelectionConfig,
    "cleaning": CleaningConfig,
    "sp_sweep": SPSweep,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


def _build(cls, d):
    if not isinstance(d, dict):
        raise RejectedInputError(f"{cls.__name__} expects a JSON object")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(d) - names
    if unknown:
        raise RejectedInputError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get(key) if cls is ExperimentConfig else None
        kwargs[key] = _build(sub, value) if sub is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise RejectedInputError(str(exc)) from None


def apply_env(d, env=None):
    """Let ``OMNIFLOW_SEED`` override the configured seed."""
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        d = dict(d)
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise RejectedInputError(f"{SEED_ENV} must be an integer") from None
    return d
