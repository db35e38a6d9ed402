"""Experiment configuration, read from and written to TOML.

One table per concern: ``[experiment]``, ``[suite]``, ``[backbone]``,
``[sources]`` (source prompt tuning), ``[adapt]`` (few-shot adaptation),
``[attention]``, ``[spot_t]``, ``[pseudo_label]`` and ``[verbalizers]``.
Unknown keys are rejected so typos surface as config errors.
"""
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import tomli_w

from .backbone import PretrainConfig
from .ensemble import GTrainConfig
from .errors import ConfigError
from .prompts import TuneConfig
from .tasks import SuiteConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("sesom", "uniform", "majority_vote", "fixed_weight", "hard_variant", "acc_sp",
           "spot_t", "pseudo_label", "single_source")
METRICS = ("accuracy", "f1_binary", "f1_macro")


@dataclass
class ExperimentSection:
    methods: list = field(default_factory=lambda: list(METHODS))
    shots: int = 32
    seeds: int = 20
    seed_offset: int = 0
    n_sources: int = 0          # keep the top-k sources by few-shot F1; 0 keeps all
    source_adapt: bool = True
    workers: int = 1
    cache_dir: str = ""         # where pretrained artifacts are cached; "" disables caching


@dataclass
class BackboneSection:
    path: str = ""              # load from here when set, otherwise pretrain
    d: int = 32
    prompt_length: int = 8
    epochs: int = 8
    learning_rate: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class SourcesSection:
    dir: str = ""               # directory of source{j}.bin prompt files; "" trains them
    init: str = "vocab_rows"
    learning_rate: float = 3e-1
    epochs: int = 10
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class AdaptSection:
    learning_rate: float = 1e-2
    epochs: int = 20
    batch_size: int = 0
    weight_decay: float = 0.01


@dataclass
class AttentionSection:
    d_x: int = 32
    d_l: int = 32
    d_prime: int = 32
    dropout: float = 0.0
    activation: str = "relu"
    learning_rate: float = 3e-3
    epochs: int = 80
    batch_size: int = 4
    weight_decay: float = 0.01
    select_on_dev: bool = True


@dataclass
class SpotTSection:
    warmup_epochs: int = 3


@dataclass
class PseudoLabelSection:
    pretrain_epochs: int = 5


SECTIONS = {
    "experiment": ExperimentSection,
    "suite": SuiteConfig,
    "backbone": BackboneSection,
    "sources": SourcesSection,
    "adapt": AdaptSection,
    "attention": AttentionSection,
    "spot_t": SpotTSection,
    "pseudo_label": PseudoLabelSection,
}


def default_verbalizers(suite):
    """Ordered (label, token) pairs per task id, derived from the suite layout."""
    out = {"target": [[y, t] for y, t in enumerate(suite.target_verbalizer())]}
    for j in range(suite.n_sources):
        out[f"source{j}"] = [[y, t] for y, t in enumerate(suite.source_verbalizer(j))]
    return out


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    sources: SourcesSection = field(default_factory=SourcesSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    attention: AttentionSection = field(default_factory=AttentionSection)
    spot_t: SpotTSection = field(default_factory=SpotTSection)
    pseudo_label: PseudoLabelSection = field(default_factory=PseudoLabelSection)
    verbalizers: dict = None

    def __post_init__(self):
        if self.verbalizers is None:
            self.verbalizers = default_verbalizers(self.suite)
        self.validate()

    def validate(self):
        ex = self.experiment
        if ex.seeds < 1:
            raise ConfigError("experiment.seeds must be >= 1")
        if ex.shots < 1:
            raise ConfigError("experiment.shots must be >= 1")
        if ex.seed_offset < 0:
            raise ConfigError("experiment.seed_offset must be non-negative")
        if not 0 <= ex.n_sources <= self.suite.n_sources:
            raise ConfigError(f"experiment.n_sources must lie in [0, {self.suite.n_sources}]")
        if ex.workers < 1:
            raise ConfigError("experiment.workers must be >= 1")
        bad = [m for m in ex.methods if m not in METHODS]
        if bad or not ex.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.attention.dropout < 1.0:
            raise ConfigError("attention.dropout must lie in [0, 1)")
        needed = ["target"] + [f"source{j}" for j in range(self.suite.n_sources)]
        for task in needed:
            pairs = self.verbalizers.get(task)
            if not pairs:
                raise ConfigError(f"task {task!r} has no verbalizer entry")
            labels = [int(p[0]) for p in pairs]
            if sorted(labels) != list(range(len(labels))):
                raise ConfigError(f"verbalizer for {task!r} must list labels 0..n-1, got {labels}")
            toks = [int(p[1]) for p in pairs]
            if len(set(toks)) != len(toks):
                raise ConfigError(f"verbalizer tokens for {task!r} must be distinct")
            if max(toks) >= self.suite.v or min(toks) < 0:
                raise ConfigError(f"verbalizer token for {task!r} outside the vocabulary")
        # build the configs once so their own checks run now rather than mid-experiment
        self.adapt_config()
        self.source_config()

    def tokens(self, task):
        """Label-ordered verbalizer token ids for ``task``."""
        return tuple(int(t) for _, t in sorted((int(y), int(t)) for y, t in self.verbalizers[task]))

    def pretrain_config(self):
        b = self.backbone
        return PretrainConfig(v=self.suite.v, d=b.d, epochs=b.epochs,
                              learning_rate=b.learning_rate, batch_size=b.batch_size,
                              weight_decay=b.weight_decay, seed=b.seed)

    def source_config(self):
        s = self.sources
        return TuneConfig(learning_rate=s.learning_rate, epochs=s.epochs, batch_size=s.batch_size,
                          weight_decay=s.weight_decay, seed=s.seed)

    def adapt_config(self):
        a = self.adapt
        return TuneConfig(learning_rate=a.learning_rate, epochs=a.epochs, batch_size=a.batch_size,
                          weight_decay=a.weight_decay)

    def g_config(self):
        a = self.attention
        return GTrainConfig(learning_rate=a.learning_rate, epochs=a.epochs, batch_size=a.batch_size,
                            weight_decay=a.weight_decay, select_on_dev=a.select_on_dev)

    def with_overrides(self, **experiment):
        """Copy with ``[experiment]`` fields replaced (``None`` values ignored)."""
        ex = replace(self.experiment, **{k: v for k, v in experiment.items() if v is not None})
        return replace(self, experiment=ex, verbalizers={k: list(v) for k, v in self.verbalizers.items()})

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items()}
        out["verbalizers"] = {k: [list(p) for p in v] for k, v in self.verbalizers.items()}
        return out


def _section(cls, table, name):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    kw = {}
    for k, v in table.items():
        default = getattr(cls(), k) if cls is not SuiteConfig else getattr(SuiteConfig, k, None)
        kw[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def from_dict(data):
    unknown = sorted(set(data) - set(SECTIONS) - {"verbalizers"})
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    kw = {name: _section(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()}
    verb = data.get("verbalizers")
    if verb is not None:
        merged = default_verbalizers(kw["suite"])
        merged.update({k: [list(p) for p in v] for k, v in verb.items()})
        verb = merged
    return ExperimentConfig(**kw, verbalizers=verb)


def load_config(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def dumps_config(cfg):
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))
