"""Configuration dataclasses and the key = value config-file format.

Config files are TOML-style flat text: one dotted.key = value per line,
with #-comments, quoted strings, ints, floats and booleans.  The same
syntax is used by the CLI's --set overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .nn import ConfigError, FocalConfig

VARIANTS = ("clnet", "vild_only", "linker_only", "pair_verification", "paired_lesion_query")


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters.

    Defaults are the reference operating point (125 object queries, 16 link
    queries, lambda_sim/lambda_cls 0.125/1.0, alpha=beta=0.5 with the
    multiplicative cost, 3 linker layers); desk() scales the width and query
    counts down to something a CPU can train.
    """

    n_queries: int = 125          # object queries per view
    n_links: int = 16             # link queries
    dim: int = 256                # model width D
    heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 6
    linker_layers: int = 3        # also the paired-lesion-query decoder depth
    ffn_hidden: int = 0           # 0 means 2 * dim
    image_size: int = 256
    backbone_channels: tuple = (32, 64, 0)   # 0 in the last slot means dim
    alpha: float = 0.5            # cost balance between similarity and score
    beta: float = 0.5             # view balance inside the similarity cost
    lambda_sim: float = 0.125
    lambda_cls: float = 1.0
    focal: FocalConfig = field(default_factory=FocalConfig)
    pv_focal: FocalConfig = field(default_factory=lambda: FocalConfig(0.75, 2.0))
    tau: float = 0.1              # temperature for the slot-localization loss
    cost_form: str = "mul"
    variant: str = "clnet"
    inter_attention: bool = True
    tie_inter_attention: bool = False
    linker_cc_first: bool = True
    activation: str = "gelu"
    aux_loss: bool = False
    score_floor: float = 0.5      # pair-confidence floor at inference
    iou_thr: float = 0.2          # localization criterion for evaluation

    def __post_init__(self):
        self.variant = _canonical_variant(self.variant)
        if self.variant == "linker_only":
            # a linker on top of a plain per-view detector
            self.inter_attention = False
        if self.cost_form not in ("mul", "add"):
            raise ConfigError(f"cost_form must be 'mul' or 'add', got {self.cost_form!r}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        for name in ("n_queries", "n_links", "dim", "heads", "encoder_layers",
                     "decoder_layers", "linker_layers", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.image_size % 8 != 0:
            raise ConfigError(f"image_size must be a multiple of 8, got {self.image_size}")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden else 2 * self.dim

    @property
    def grid(self) -> int:
        # three stride-2 backbone blocks
        return self.image_size // 8

    @property
    def channels(self) -> tuple:
        return tuple(self.dim if c == 0 else c for c in self.backbone_channels)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(
            n_queries=16, n_links=8, dim=64, heads=4,
            encoder_layers=2, decoder_layers=3, linker_layers=3,
            image_size=32, backbone_channels=(16, 32, 0),
        )
        base.update(overrides)
        return cls(**base)


def _canonical_variant(name: str) -> str:
    key = str(name).replace("-", "_").replace(" ", "_").lower()
    aliases = {
        "clnet": "clnet",
        "cl_net": "clnet",
        "vildonly": "vild_only",
        "vild_only": "vild_only",
        "vild": "vild_only",
        "linkeronly": "linker_only",
        "linker_only": "linker_only",
        "pairverification": "pair_verification",
        "pair_verification": "pair_verification",
        "pv": "pair_verification",
        "pairedlesionquery": "paired_lesion_query",
        "paired_lesion_query": "paired_lesion_query",
        "plq": "paired_lesion_query",
    }
    if key not in aliases:
        raise ConfigError(f"variant must be one of clnet/vild_only/linker_only/"
                          f"pair_verification/paired_lesion_query, got {name!r}")
    return aliases[key]


@dataclass
class GenConfig:
    """Synthetic two-view generator settings."""

    image_size: int = 32
    min_lesions: int = 0
    max_lesions: int = 3
    radius_min: int = 2
    radius_max: int = 5
    intensity_min: float = 0.55
    intensity_max: float = 0.95
    noise: float = 0.05
    p_occ: float = 0.15           # chance a lesion renders in one view only
    distractors: int = 2          # unpaired, unlabeled blobs per view
    max_gt_iou: float = 0.3       # same-view boxes above this are resampled

    def __post_init__(self):
        if not 0.0 <= self.p_occ <= 1.0:
            raise ConfigError(f"p_occ must be in [0,1], got {self.p_occ}")
        if not 0 <= self.min_lesions <= self.max_lesions:
            raise ConfigError(f"lesion count range ({self.min_lesions}, {self.max_lesions}) invalid")
        if not 1 <= self.radius_min <= self.radius_max:
            raise ConfigError(f"radius range ({self.radius_min}, {self.radius_max}) invalid")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.distractors < 0:
            raise ConfigError(f"distractors must be >= 0, got {self.distractors}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")


@dataclass
class RunConfig:
    """One CLI invocation's full configuration."""

    model: ModelConfig = field(default_factory=ModelConfig.desk)
    gen: GenConfig = field(default_factory=GenConfig)
    seed: int = -1                # mandatory; negative means unset
    steps: int = 200
    batch_size: int = 4
    lr: float = 2e-4
    linker_lr_mult: float = 0.25
    weight_decay: float = 1e-4
    warmup_steps: int = 50
    cosine: bool = True
    flip_augment: bool = False
    crop_augment: bool = False
    n_samples: int = 100          # gen-data sample count
    checkpoint_every: int = 0     # 0 = only at the end
    dataset: str = "data.jsonl"
    out_dir: str = "runs/out"

    def validate(self) -> "RunConfig":
        if self.seed < 0:
            raise ConfigError("seed is mandatory (wall-clock seeding is not allowed)")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"steps/batch_size invalid: {self.steps}/{self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.gen.image_size != self.model.image_size:
            raise ConfigError(
                f"gen.image_size {self.gen.image_size} != model.image_size {self.model.image_size}")
        return self


# ---------------------------------------------------------------------------
# flat key = value parsing


def _parse_value(raw: str):
    raw = raw.strip()
    if not raw:
        raise ConfigError("empty value")
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw.startswith("'") and raw.endswith("'") and len(raw) >= 2:
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw  # bare word


def parse_config_text(text: str) -> dict:
    """Flat dotted.key -> value mapping from config-file text."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "#" in stripped and '"' not in stripped and "'" not in stripped:
            stripped = stripped.split("#", 1)[0].strip()
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        out[key] = _parse_value(raw)
    return out


def _assign(obj, dotted: str, value):
    parts = dotted.split(".")
    target = obj
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config section {dotted!r}")
        target = getattr(target, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(target, name)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted} expects true/false, got {value!r}")
    elif isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"{dotted} expects an integer, got {value!r}")
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted} expects an integer, got {value!r}")
        value = int(value)
    elif isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{dotted} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(current, str):
        value = str(value)
    elif isinstance(current, tuple):
        raise ConfigError(f"{dotted} cannot be set from a config file")
    setattr(target, name, value)


def build_run_config(entries: dict) -> RunConfig:
    """RunConfig from flat dotted keys; re-validates every dataclass."""
    cfg = RunConfig()
    for key, value in entries.items():
        _assign(cfg, key, value)
    # re-run dataclass validation with the final field values
    cfg.model = dataclasses.replace(cfg.model)
    cfg.gen = dataclasses.replace(cfg.gen)
    cfg.model.focal = dataclasses.replace(cfg.model.focal)
    cfg.model.pv_focal = dataclasses.replace(cfg.model.pv_focal)
    return cfg


def load_run_config(path=None, sets=()) -> RunConfig:
    entries = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            entries.update(parse_config_text(fh.read()))
    for item in sets:
        entries.update(parse_config_text(item))
    return build_run_config(entries)
