"""Declarative model configuration, presets and the YAML config-file schema."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import yaml

from .core import BlockConfig, BlockType
from .nn import ConvSpec, _triple

STAGE_TYPE_PRESETS = ("LLLL", "LLGG", "LLLG", "LGGG", "GGGG")


@dataclass(frozen=True)
class StageConfig:
    """One backbone stage.

    ``stage_type`` is a single letter (every block alike) or one letter per
    block, e.g. ``"WWWGWWWG"`` for two hybrid groups. ``hybrid_group`` builds
    the stage from ``[W, W, W, G]`` groups and needs a depth divisible by 4.
    """

    depth: int
    channels: int
    stage_type: str = "G"
    window: Optional[Tuple[int, int]] = None
    hybrid_group: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.depth < 1 or self.channels < 1:
            raise ValueError(f"stage depth and channels must be positive: {self}")
        if self.hybrid_group:
            if self.depth % 4:
                raise ValueError(f"hybrid-group stages need a depth divisible by 4, got {self.depth}")
            object.__setattr__(self, "stage_type", "WWWG" * (self.depth // 4))
        types = str(self.stage_type).upper()
        object.__setattr__(self, "stage_type", types)
        if len(types) not in (1, self.depth):
            raise ValueError(f"stage_type {types!r} must be one letter or {self.depth} letters")
        for t in types:
            BlockType.parse(t)
        if self.window is not None:
            object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        if "W" in types and self.window is None:
            raise ValueError("window blocks need a window size")

    def block_types(self) -> Tuple[BlockType, ...]:
        types = self.stage_type * self.depth if len(self.stage_type) == 1 else self.stage_type
        return tuple(BlockType(t) for t in types)

    @property
    def hybrid_groups(self) -> int:
        return "".join(t.value for t in self.block_types()).count("WWWG")


def stage_type_presets(name: str) -> Tuple[BlockType, ...]:
    """Per-stage block types for the stage-type ablation names (e.g. ``LLGG``)."""
    key = str(name).upper()
    if key not in STAGE_TYPE_PRESETS:
        raise ValueError(f"unknown stage-type preset {name!r}; known: {', '.join(STAGE_TYPE_PRESETS)}")
    return tuple(BlockType(c) for c in key)


def build_hybrid_stage3(base: StageConfig, window: Sequence[int]) -> StageConfig:
    """Rewrite a stage as repeated ``[W, W, W, G]`` hybrid groups.

    A remainder that does not fill a group becomes window blocks; a stage
    shallower than one group is all window blocks.
    """
    window = tuple(int(w) for w in window)
    if base.depth < 4:
        warnings.warn(f"stage depth {base.depth} < 4: no hybrid group fits, using window blocks only")
    groups, rest = divmod(base.depth, 4)
    types = "WWWG" * groups + "W" * rest
    return replace(base, stage_type=types, window=window, hybrid_group=rest == 0)


@dataclass(frozen=True)
class ModelConfig:
    """Full four-stage backbone description."""

    stages: Tuple[StageConfig, ...]
    head_dim: int = 64
    input_spec: Tuple[int, int, int, int] = (3, 1, 224, 224)
    local_kernel: Optional[Tuple[int, int, int]] = None
    dpe_kernel: Optional[Tuple[int, int, int]] = None
    ffn_ratio: int = 4
    num_classes: int = 1000
    drop_path_max: float = 0.0
    shrink_ratio: float = 0.5
    aux_head: Optional[bool] = None
    qk_scale: bool = True
    stem: str = "patch"
    video: Optional[bool] = None
    stem_kernel_t: int = 3
    shrink_first: bool = True
    running_mean: bool = True
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "input_spec", tuple(int(v) for v in self.input_spec))
        if self.video is None:
            object.__setattr__(self, "video", self.input_spec[1] > 1)
        t = 5 if self.video else 1
        lk = (t, 5, 5) if self.local_kernel is None else _triple(self.local_kernel)
        dk = (3 if self.video else 1, 3, 3) if self.dpe_kernel is None else _triple(self.dpe_kernel)
        object.__setattr__(self, "local_kernel", lk)
        object.__setattr__(self, "dpe_kernel", dk)
        if self.aux_head is None:
            object.__setattr__(self, "aux_head", self.has_hourglass)
        self.validate()

    # -- validation ------------------------------------------------------
    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ValueError(f"a UniFormer backbone has exactly 4 stages, got {len(self.stages)}")
        if len(self.input_spec) != 4 or min(self.input_spec) < 1:
            raise ValueError(f"input_spec must be 4 positive ints (C, T, H, W), got {self.input_spec}")
        if self.stem not in ("patch", "conv"):
            raise ValueError(f"stem must be 'patch' or 'conv', got {self.stem!r}")
        if not 0.0 < self.shrink_ratio <= 1.0:
            raise ValueError(f"shrink_ratio must lie in (0, 1], got {self.shrink_ratio}")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ValueError(f"drop_path_max must lie in [0, 1), got {self.drop_path_max}")
        if self.aux_head and not self.has_hourglass:
            raise ValueError("aux_head needs at least one hourglass stage")
        if self.stem_kernel_t < 1 or self.stem_kernel_t % 2 == 0:
            raise ValueError(f"stem_kernel_t must be odd and positive, got {self.stem_kernel_t}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        for i, _ in enumerate(self.stages):
            for j in range(self.stages[i].depth):
                self.block_config(i, j)
        self.resolutions()

    # -- derived structure ----------------------------------------------
    @property
    def has_hourglass(self) -> bool:
        return any(BlockType.HOURGLASS in s.block_types() for s in self.stages)

    @property
    def total_blocks(self) -> int:
        return sum(s.depth for s in self.stages)

    def drop_path_rate(self, index: int) -> float:
        n = self.total_blocks
        return 0.0 if n == 1 else self.drop_path_max * index / (n - 1)

    def block_config(self, stage: int, block: int) -> BlockConfig:
        s = self.stages[stage]
        btype = s.block_types()[block]
        index = sum(st.depth for st in self.stages[:stage]) + block
        return BlockConfig(
            block_type=btype,
            channels=s.channels,
            head_dim=self.head_dim,
            local_kernel=self.local_kernel,
            dpe_kernel=self.dpe_kernel,
            ffn_ratio=self.ffn_ratio,
            window=s.window if btype is BlockType.WINDOW else None,
            drop_path_rate=self.drop_path_rate(index),
            qk_scale=self.qk_scale,
        )

    def stem_specs(self, stage: int) -> Tuple[ConvSpec, ...]:
        """Downsampling convolutions in front of ``stage``."""
        c_out = self.stages[stage].channels
        if stage == 0:
            c_in = self.input_spec[0]
            if self.stem == "conv":
                kt, st = (self.stem_kernel_t, 2) if self.video else (1, 1)
                mid = c_out // 2
                return (ConvSpec(c_in, mid, (kt, 3, 3), (st, 2, 2), (kt // 2, 1, 1)),
                        ConvSpec(mid, c_out, (1, 3, 3), (1, 2, 2), (0, 1, 1)))
            if self.video:
                kt = self.stem_kernel_t
                return (ConvSpec(c_in, c_out, (kt, 4, 4), (2, 4, 4), (kt // 2, 0, 0)),)
            return (ConvSpec(c_in, c_out, (1, 4, 4), (1, 4, 4)),)
        c_in = self.stages[stage - 1].channels
        return (ConvSpec(c_in, c_out, (1, 2, 2), (1, 2, 2)),)

    def resolutions(self, input_thw: Optional[Sequence[int]] = None) -> Tuple[Tuple[int, int, int], ...]:
        """``(T, H, W)`` at each stage; raises if a stage collapses below 1."""
        thw = tuple(input_thw) if input_thw is not None else self.input_spec[1:]
        out = []
        for i in range(4):
            for spec in self.stem_specs(i):
                try:
                    thw = spec.output_size(thw)
                except ValueError as err:
                    raise ValueError(f"stage {i + 1} downsampling collapses the input: {err}") from None
            out.append(thw)
        return tuple(out)

    def with_input(self, spec: Sequence[int]) -> "ModelConfig":
        return replace(self, input_spec=tuple(spec))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d


# ---------------------------------------------------------------------------
# presets


def _stages(depths, channels, types, window=None) -> Tuple[StageConfig, ...]:
    return tuple(StageConfig(d, c, t, window if t == "W" else None)
                 for d, c, t in zip(depths, channels, types))


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations: ``S``, ``B``, ``L`` (image), ``XS``, ``XXS`` (lightweight)."""
    key = name.upper().replace("UNIFORMER-", "").replace("UNIFORMER_", "")
    if key in ("S", "B", "L"):
        depths = {"S": [3, 4, 8, 3], "B": [5, 8, 20, 7], "L": [5, 10, 24, 7]}[key]
        channels = [128, 192, 448, 640] if key == "L" else [64, 128, 320, 512]
        drop = {"S": 0.1, "B": 0.3, "L": 0.4}[key]
        cfg = dict(stages=_stages(depths, channels, "LLGG"), head_dim=64, drop_path_max=drop)
    elif key in ("XS", "XXS"):
        depths = [3, 5, 9, 3] if key == "XS" else [2, 5, 8, 2]
        channels = [64, 128, 256, 512] if key == "XS" else [56, 112, 224, 448]
        cfg = dict(stages=_stages(depths, channels, "LLHH"), head_dim=32 if key == "XS" else 28,
                   ffn_ratio=3, stem="conv", shrink_ratio=0.5, aux_head=True)
    else:
        raise ValueError(f"unknown preset {name!r}; known: S, B, L, XS, XXS")
    cfg["name"] = f"uniformer-{key.lower()}"
    cfg.update(overrides)
    return ModelConfig(**cfg)


PRESETS = ("S", "B", "L", "XS", "XXS")


def tiny_config(stage_types: str = "LLGG", **overrides) -> ModelConfig:
    """Toy backbone for the stripe task: widths 16-128, depths [1, 1, 2, 1], 3x32x32 input."""
    cfg = dict(stages=_stages([1, 1, 2, 1], [16, 32, 64, 128], stage_types.upper()), head_dim=16,
               input_spec=(3, 1, 32, 32), num_classes=2, name=f"tiny-{stage_types.lower()}")
    cfg.update(overrides)
    return ModelConfig(**cfg)


# ---------------------------------------------------------------------------
# config files

_MODEL_KEYS = {
    "preset", "stages", "head_dim", "local_kernel", "dpe_kernel", "ffn_ratio", "drop_path_max",
    "shrink_ratio", "num_classes", "stem", "aux_head", "shrink_first", "running_mean",
}
_STAGE_KEYS = {"depth", "channels", "type", "window"}
_INPUT_KEYS = {"channels", "frames", "height", "width"}
_ATTENTION_KEYS = {"qk_scale"}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, data: dict, allowed: set) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def config_from_dict(data: dict) -> ModelConfig:
    """Build a :class:`ModelConfig` from the parsed config-file mapping."""
    data = dict(data or {})
    _reject_unknown("top level", data, {"model", "input", "attention"})
    model = dict(data.get("model") or {})
    inp = dict(data.get("input") or {})
    attn = dict(data.get("attention") or {})
    _reject_unknown("model", model, _MODEL_KEYS)
    _reject_unknown("input", inp, _INPUT_KEYS)
    _reject_unknown("attention", attn, _ATTENTION_KEYS)

    kwargs = {}
    if "stages" in model:
        stages = []
        for i, st in enumerate(model["stages"]):
            _reject_unknown(f"model.stages[{i}]", st, _STAGE_KEYS)
            stype = str(st.get("type", "G"))
            window = st.get("window")
            if stype.lower() == "hybrid":
                if window is None:
                    raise ConfigError(f"model.stages[{i}]: hybrid stages need a window")
                stages.append(build_hybrid_stage3(StageConfig(st["depth"], st["channels"], "W", window), window))
            else:
                stages.append(StageConfig(st["depth"], st["channels"], stype, window))
        kwargs["stages"] = tuple(stages)
    for key in ("head_dim", "ffn_ratio", "num_classes", "drop_path_max", "shrink_ratio", "stem",
                "aux_head", "shrink_first", "running_mean", "local_kernel", "dpe_kernel"):
        if key in model:
            kwargs[key] = model[key]
    if inp:
        c, t, h, w = (3, 1, 224, 224)
        kwargs["input_spec"] = (inp.get("channels", c), inp.get("frames", t),
                                inp.get("height", h), inp.get("width", w))
    if "qk_scale" in attn:
        kwargs["qk_scale"] = bool(attn["qk_scale"])
    try:
        if model.get("preset") and str(model["preset"]).lower() != "custom":
            return preset(str(model["preset"]), **kwargs)
        if "stages" not in kwargs:
            raise ConfigError("custom models need model.stages")
        return ModelConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as err:
        raise ConfigError(str(err)) from None


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    for suffix in (".yaml", ".yml"):
        if p.with_suffix(suffix).exists():
            return p.with_suffix(suffix)
    bundled = Path(__file__).resolve().parents[2] / "presets" / p.name
    for cand in (bundled, bundled.with_suffix(".yaml")):
        if cand.exists():
            return cand
    raise ConfigError(f"config file not found: {path}")


def load_config(path) -> ModelConfig:
    with open(resolve_config_path(path)) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(data)


def config_to_dict(cfg: ModelConfig) -> dict:
    """Inverse of :func:`config_from_dict` for a fully expanded config."""
    stages = []
    for s in cfg.stages:
        st = {"depth": s.depth, "channels": s.channels, "type": s.stage_type}
        if s.window is not None:
            st["window"] = list(s.window)
        stages.append(st)
    c, t, h, w = cfg.input_spec
    return {
        "model": {
            "stages": stages, "head_dim": cfg.head_dim, "local_kernel": list(cfg.local_kernel),
            "dpe_kernel": list(cfg.dpe_kernel), "ffn_ratio": cfg.ffn_ratio,
            "drop_path_max": cfg.drop_path_max, "shrink_ratio": cfg.shrink_ratio,
            "num_classes": cfg.num_classes, "stem": cfg.stem, "aux_head": cfg.aux_head,
            "shrink_first": cfg.shrink_first, "running_mean": cfg.running_mean,
        },
        "input": {"channels": c, "frames": t, "height": h, "width": w},
        "attention": {"qk_scale": cfg.qk_scale},
    }


def dump_config(cfg: ModelConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


__all__ = [
    "ConfigError", "ModelConfig", "PRESETS", "STAGE_TYPE_PRESETS", "StageConfig",
    "build_hybrid_stage3", "config_from_dict", "dump_config", "load_config", "preset",
    "stage_type_presets", "tiny_config",
]
