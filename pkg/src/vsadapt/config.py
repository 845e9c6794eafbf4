"""
Pipeline configuration: one TOML file with a top-level `seed` and the sections [paths], [synth],
[preprocess] (+ [preprocess.registration]), [translation] (+ [translation.architecture]), [segmentation]
and [koos]. Every key is optional; defaults are the published training settings. Unknown keys are
rejected with the line they appear on.
"""
import hashlib
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from vsadapt.contrastive import PretrainOptions
from vsadapt.errors import ConfigError
from vsadapt.koosnet import FinetuneOptions
from vsadapt.msfnet import PROFILES, ArchitectureProfile, LossWeights, TrainingOptions
from vsadapt.preprocess import PreprocessOptions, RegistrationOptions
from vsadapt.segharness import SegOptions
from vsadapt.synthgen import PhantomSpec

logger = logging.getLogger("vsadapt.config")

ABLATIONS = ("vs", "gif", "unfreeze", "no-pretrain")
STAGES = ("synth", "prep", "train-da", "translate", "train-seg", "infer-seg", "pretrain-koos", "finetune-koos",
          "predict-koos", "evaluate", "report")


@dataclass(frozen=True)
class PathsConfig:
    """Stage directories, relative to `root` unless absolute."""
    root: str = "."
    raw: str = "data/raw"
    prep: str = "data/prep"
    fake: str = "data/fake"
    models: str = "models"
    preds: str = "preds"
    reports: str = "reports"
    cache: str = "models/cache"

    def resolve(self, name: str) -> Path:
        path = Path(getattr(self, name))
        return path if path.is_absolute() else Path(self.root) / path


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 8
    paired: bool = False
    shape: Tuple[int, int, int] = (16, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 0.5, 0.5)
    radius_range_mm: Tuple[float, float] = (1.0, 6.0)
    koos_thresholds_mm: Tuple[float, float, float] = (2.0, 3.5, 5.0)
    contact_gap_mm: float = 3.5
    noise_sigma: float = 0.02
    max_shift_mm: float = 1.0


@dataclass(frozen=True)
class RegistrationConfig:
    levels: Tuple[int, ...] = (4, 2, 1)
    max_evaluations: int = 400
    mi_bins: int = 32
    dof: str = "affine"
    min_overlap: float = 0.2


@dataclass(frozen=True)
class PreprocessConfig:
    """`crop_start` is "center", "auto" (union of annotated VS masks after alignment) or [z, y, x]."""
    target_spacing: Tuple[float, float, float] = (1.0, 0.4102, 0.4102)
    n_quantiles: int = 256
    crop_start: Union[str, Tuple[int, int, int]] = "center"
    crop_size: Tuple[int, int, int] = (80, 256, 256)
    crop_margin: int = 4
    similarity_t1: str = "MI"
    similarity_t2: str = "NCC"
    rescale: bool = True
    intensity_percentiles: Tuple[float, float] = (0.5, 99.5)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)


@dataclass(frozen=True)
class ArchitectureConfig:
    """Overrides on top of the named profile; None keeps the profile value."""
    base_width: Optional[int] = None
    n_downsample: Optional[int] = None
    n_residual: Optional[int] = None
    stem_kernel: Optional[int] = None
    out_kernel: Optional[int] = None
    disc_width: Optional[int] = None
    disc_layers: Optional[int] = None
    norm: Optional[str] = None
    output_activation: Optional[str] = None


@dataclass(frozen=True)
class TranslationConfig:
    variant: str = "msfnet"
    profile: str = "full"
    epochs: int = 1000
    batch_size: int = 1
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    lambda_r: float = 10.0
    lambda_p: float = 0.01
    adversarial: float = 1.0
    cycle: float = 1.0
    proxy: float = 1.0
    proxy_tasks: Tuple[str, ...] = ("vs", "gif")
    slab_stride: int = 1
    perceptual: str = "random"
    perceptual_weights: str = ""
    perceptual_url: str = ""
    perceptual_sha256: str = ""
    check_isolation: bool = False
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)


@dataclass(frozen=True)
class SegmentationConfig:
    """`training_set` is "pooled" (real ceT1 + translated hrT2) or "real" (ceT1 only)."""
    training_set: str = "pooled"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    depth: int = 4
    width: int = 16
    flip: bool = True
    slab_stride: int = 1


@dataclass(frozen=True)
class KoosConfig:
    pretrain: bool = True
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-2
    pretrain_batch_size: int = 4
    temperature: float = 0.1
    projection_dim: int = 128
    self_weight: float = 1.0
    sup_weight: float = 1.0
    finetune_epochs: int = 20
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 4
    unfreeze: bool = False
    width: int = 64
    n_blocks: int = 2
    max_slabs: int = 16


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    koos: KoosConfig = field(default_factory=KoosConfig)
    ablations: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of the resolved configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def phantom_spec(self) -> PhantomSpec:
        s = self.synth
        return PhantomSpec(seed=self.stage_seed("synth"), shape=s.shape, spacing=s.spacing,
                           radius_range_mm=s.radius_range_mm, koos_thresholds_mm=s.koos_thresholds_mm,
                           contact_gap_mm=s.contact_gap_mm, noise_sigma=s.noise_sigma, max_shift_mm=s.max_shift_mm)

    def preprocess_options(self) -> PreprocessOptions:
        p = self.preprocess
        start = tuple(p.crop_start) if not isinstance(p.crop_start, str) else None
        r = p.registration
        return PreprocessOptions(
            target_spacing=p.target_spacing, n_quantiles=p.n_quantiles, crop_start=start, crop_size=p.crop_size,
            similarity={"T1": p.similarity_t1, "T2": p.similarity_t2},
            registration=RegistrationOptions(levels=r.levels, max_evaluations=r.max_evaluations, mi_bins=r.mi_bins,
                                             dof=r.dof, min_overlap=r.min_overlap),
            rescale=p.rescale, intensity_percentiles=p.intensity_percentiles,
        )

    def architecture(self) -> ArchitectureProfile:
        t = self.translation
        overrides = {k: v for k, v in asdict(t.architecture).items() if v is not None}
        return replace(PROFILES[t.profile], **overrides)

    def loss_weights(self) -> LossWeights:
        t = self.translation
        return LossWeights(lambda_r=t.lambda_r, lambda_p=t.lambda_p, adversarial=t.adversarial, cycle=t.cycle,
                           proxy=t.proxy, proxy_tasks=t.proxy_tasks)

    def translation_options(self, out_dir: Optional[Path] = None) -> TrainingOptions:
        t = self.translation
        return TrainingOptions(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, betas=t.betas,
                               seed=self.stage_seed("train-da"), variant=t.variant, profile=self.architecture(),
                               check_isolation=t.check_isolation,
                               out_dir=None if out_dir is None else str(out_dir))

    def seg_options(self, out_dir: Optional[Path] = None) -> SegOptions:
        s = self.segmentation
        return SegOptions(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, depth=s.depth, width=s.width,
                          seed=self.stage_seed("train-seg"), flip=s.flip,
                          out_dir=None if out_dir is None else str(out_dir))

    def pretrain_options(self, out_dir: Optional[Path] = None) -> PretrainOptions:
        k = self.koos
        return PretrainOptions(epochs=k.pretrain_epochs, lr=k.pretrain_lr, batch_size=k.pretrain_batch_size,
                               temperature=k.temperature, projection_dim=k.projection_dim,
                               self_weight=k.self_weight, sup_weight=k.sup_weight,
                               seed=self.stage_seed("pretrain-koos"),
                               out_dir=None if out_dir is None else str(out_dir))

    def finetune_options(self, out_dir: Optional[Path] = None) -> FinetuneOptions:
        k = self.koos
        return FinetuneOptions(epochs=k.finetune_epochs, lr=k.finetune_lr, batch_size=k.finetune_batch_size,
                               seed=self.stage_seed("finetune-koos"), unfreeze=k.unfreeze,
                               out_dir=None if out_dir is None else str(out_dir))


def stage_seed(seed: int, stage: str) -> int:
    """First 8 hex digits of SHA-256("<seed>:<stage>") as an integer."""
    return int(hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).hexdigest()[:8], 16)


_SECTIONS = {
    "paths": PathsConfig,
    "synth": SynthConfig,
    "preprocess": PreprocessConfig,
    "translation": TranslationConfig,
    "segmentation": SegmentationConfig,
    "koos": KoosConfig,
}
_CHOICES = {
    ("translation", "variant"): ("msfnet", "cyclegan"),
    ("translation", "profile"): tuple(PROFILES),
    ("translation", "perceptual"): ("random", "vgg19"),
    ("segmentation", "training_set"): ("pooled", "real"),
    ("preprocess", "similarity_t1"): ("MI", "NCC"),
    ("preprocess", "similarity_t2"): ("MI", "NCC"),
}


def _line_of(text: str, section: Sequence[str], key: Optional[str] = None) -> Optional[int]:
    """1-based line of `key` inside table `section` (or of the table header itself)."""
    lines = text.splitlines()
    start = 0
    if section:
        header = re.compile(r'^\s*\[\s*' + r'\s*\.\s*'.join(map(re.escape, section)) + r'\s*\]\s*(#.*)?$')
        for i, line in enumerate(lines):
            if header.match(line):
                start = i
                if key is None:
                    return i + 1
                break
        else:
            return None
    if key is None:
        return None
    pattern = re.compile(r'^\s*["\']?' + re.escape(key) + r'["\']?\s*=')
    for i in range(start + (1 if section else 0), len(lines)):
        if re.match(r'^\s*\[', lines[i]):
            break
        if pattern.match(lines[i]):
            return i + 1
    return None


def _matches(value: Any, default: Any) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, tuple):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _convert(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_convert(v) for v in value)
    return value


def _build(cls, table: Mapping[str, Any], section: Tuple[str, ...], text: str, path: Optional[str]):
    defaults = cls()
    known = {f.name: f for f in fields(cls)}
    values: Dict[str, Any] = {}
    for key, value in table.items():
        if key not in known:
            where = '.'.join(section) or 'top level'
            raise ConfigError(f'unknown key {key!r} in [{where}]', line=_line_of(text, section, key), path=path)
        default = getattr(defaults, key)
        if hasattr(default, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise ConfigError(f'[{".".join(section + (key,))}] must be a table',
                                  line=_line_of(text, section, key), path=path)
            values[key] = _build(type(default), value, section + (key,), text, path)
            continue
        if key == "crop_start" and isinstance(value, list):
            if len(value) != 3 or not all(isinstance(v, int) and v >= 0 for v in value):
                raise ConfigError(f'preprocess.crop_start must be three non-negative integers, got {value}',
                                  line=_line_of(text, section, key), path=path)
        elif not _matches(value, default):
            raise ConfigError(f'{".".join(section + (key,))} has the wrong type: expected '
                              f'{type(default).__name__}, got {type(value).__name__}',
                              line=_line_of(text, section, key), path=path)
        choices = _CHOICES.get((section[0] if section else "", key))
        if choices is not None and value not in choices:
            raise ConfigError(f'{".".join(section + (key,))} must be one of {list(choices)}, got {value!r}',
                              line=_line_of(text, section, key), path=path)
        values[key] = _convert(value)
    return replace(defaults, **values)


def parse_config(text: str, path: Optional[str] = None) -> PipelineConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r'line (\d+)', str(e))
        raise ConfigError(f'invalid TOML: {e}', line=int(match.group(1)) if match else None, path=path) from e

    values: Dict[str, Any] = {}
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f'seed must be a non-negative integer, got {value!r}',
                                  line=_line_of(text, (), "seed"), path=path)
            values["seed"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f'{key} must be a table', line=_line_of(text, (), key), path=path)
            values[key] = _build(_SECTIONS[key], value, (key,), text, path)
        else:
            line = _line_of(text, (key,)) or _line_of(text, (), key)
            raise ConfigError(f'unknown key {key!r} at top level', line=line, path=path)
    cfg = PipelineConfig(**values)
    crop_start = cfg.preprocess.crop_start
    if isinstance(crop_start, str) and crop_start not in ("center", "auto"):
        raise ConfigError(f'preprocess.crop_start must be "center", "auto" or [z, y, x], got {crop_start!r}',
                          line=_line_of(text, ("preprocess",), "crop_start"), path=path)
    unknown_tasks = set(cfg.translation.proxy_tasks) - {"vs", "gif"}
    if unknown_tasks:
        raise ConfigError(f'translation.proxy_tasks may only hold "vs" and "gif", got {sorted(unknown_tasks)}',
                          line=_line_of(text, ("translation",), "proxy_tasks"), path=path)
    return cfg


def load_config(path: Union[str, os.PathLike]) -> PipelineConfig:
    path = Path(path)
    logger.info(f'load_config({path})')
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f'cannot read config: {e}', path=str(path)) from e
    return parse_config(text, str(path))


def apply_ablations(cfg: PipelineConfig, names: Iterable[str]) -> PipelineConfig:
    """
    vs / gif: drop that proxy segmentation task from MSF-Net training.
    unfreeze: fine-tune E_H together with the Koos classifier layer.
    no-pretrain: skip contrastive pretraining of E_H.
    """
    names = [n.strip() for n in names if n.strip()]
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise ConfigError(f'unknown ablations {unknown}, expected any of {list(ABLATIONS)}')
    translation, koos = cfg.translation, cfg.koos
    tasks = tuple(t for t in translation.proxy_tasks if t not in names)
    translation = replace(translation, proxy_tasks=tasks)
    if "unfreeze" in names:
        koos = replace(koos, unfreeze=True)
    if "no-pretrain" in names:
        koos = replace(koos, pretrain=False)
    applied = tuple(sorted(set(cfg.ablations) | set(names)))
    return replace(cfg, translation=translation, koos=koos, ablations=applied)


def config_diff(a: PipelineConfig, b: PipelineConfig) -> Dict[str, Tuple[Any, Any]]:
    """Dotted key -> (value in a, value in b) for every leaf that differs."""
    diff: Dict[str, Tuple[Any, Any]] = {}

    def walk(x: Any, y: Any, prefix: List[str]) -> None:
        if isinstance(x, dict):
            for key in x:
                walk(x[key], y[key], prefix + [key])
        elif x != y:
            diff['.'.join(prefix)] = (x, y)

    walk(a.to_dict(), b.to_dict(), [])
    return diff
