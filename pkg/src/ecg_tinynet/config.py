"""INI run configuration with sections [data], [preprocess], [model], [train], [eval].

Every key is optional; missing keys take the dataclass defaults.  Relative
paths in [data] resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dsp import PreprocessConfig
from .ecg_io import LabelMap, default_label_map
from .exceptions import InvalidConfig
from .model import VARIANTS, ModelConfig, tiny_config, variant
from .train import TrainConfig

SECTIONS = ("data", "preprocess", "model", "train", "eval")


@dataclass(frozen=True)
class DataConfig:
    data_dir: str = "data"
    manifest: str = ""       # default <data_dir>/manifest.csv
    splits: str = ""         # default <data_dir>/splits.csv
    cache_dir: str = ""      # default <data_dir>/cache
    label_map: str = ""      # default: bundled nine-class map
    classes: str = ""        # comma-separated subset of label-map abbreviations
    split_mode: str = "holdout"
    folds: int = 10
    workers: int = 4

    def path(self, name: str) -> Path:
        value = getattr(self, name)
        if value:
            return Path(value)
        base = Path(self.data_dir)
        return {"manifest": base / "manifest.csv", "splits": base / "splits.csv",
                "cache_dir": base / "cache"}[name]


@dataclass(frozen=True)
class ModelSection:
    preset: str = "default"  # default | tiny
    variant: str = "full"
    width: int = 8
    hidden: int = 8
    dropout: float = 0.0


@dataclass(frozen=True)
class EvalConfig:
    n_jobs: int = 1
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    leads: int = 12

    def label_map(self) -> LabelMap:
        lm = LabelMap.load(self.data.label_map) if self.data.label_map else default_label_map()
        if self.data.classes:
            lm = lm.subset([c.strip() for c in self.data.classes.split(",") if c.strip()])
        return lm

    def lead_selection(self) -> tuple[int, ...] | None:
        return (0,) if self.leads == 1 else None

    def model_config(self, num_classes: int) -> ModelConfig:
        m = self.model
        if m.preset == "tiny":
            base = tiny_config(self.leads, num_classes, m.width, m.hidden, m.dropout)
        elif m.preset == "default":
            base = ModelConfig(input_leads=self.leads, num_classes=num_classes)
        else:
            raise InvalidConfig(f"unknown model preset {m.preset!r}")
        return variant(base, m.variant)

    def validate(self) -> "RunConfig":
        if self.leads not in (1, 12):
            raise InvalidConfig(f"leads must be 12 or 1, got {self.leads}")
        if self.model.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.data.split_mode not in ("holdout", "kfold"):
            raise InvalidConfig("split_mode must be holdout or kfold")
        if self.preprocess.lead_selection is not None:
            raise InvalidConfig("select leads with [preprocess] leads = 12|1")
        self.preprocess.validate()
        self.train.validate()
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            values = asdict(getattr(self, name))
            if name == "preprocess":
                values.pop("lead_selection")
                values["leads"] = self.leads
            cp[name] = {k: "" if v is None else str(v) for k, v in values.items()}
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)


def _coerce(cls, section: str, raw: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, text in raw.items():
        if key not in types:
            raise InvalidConfig(f"unknown key {key!r} in [{section}]")
        kind = str(types[key])
        try:
            if text.strip() == "" and "None" in kind:
                out[key] = None
            elif kind.startswith("bool"):
                out[key] = configparser.ConfigParser.BOOLEAN_STATES[text.strip().lower()]
            elif kind.startswith("int"):
                out[key] = int(text)
            elif kind.startswith("float"):
                out[key] = float(text)
            else:
                out[key] = text.strip()
        except (KeyError, ValueError):
            raise InvalidConfig(f"[{section}] {key} = {text!r} is not a valid {kind}") from None
    return out


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(f"unreadable config: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown config sections {sorted(unknown)}")
    section = lambda name: dict(cp[name]) if cp.has_section(name) else {}  # noqa: E731

    data = _coerce(DataConfig, "data", section("data"))
    if base_dir is not None:
        for key in ("data_dir", "manifest", "splits", "cache_dir", "label_map"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(base_dir / data[key])
    pre_raw = section("preprocess")
    leads_text = pre_raw.pop("leads", "").strip() or "12"
    if leads_text not in ("1", "12"):
        raise InvalidConfig(f"[preprocess] leads must be 12 or 1, got {leads_text!r}")
    cfg = RunConfig(
        data=DataConfig(**data),
        preprocess=PreprocessConfig(**_coerce(PreprocessConfig, "preprocess", pre_raw)),
        model=ModelSection(**_coerce(ModelSection, "model", section("model"))),
        train=TrainConfig(**_coerce(TrainConfig, "train", section("train"))),
        eval=EvalConfig(**_coerce(EvalConfig, "eval", section("eval"))),
        leads=int(leads_text),
    )
    return cfg.validate()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


def with_overrides(cfg: RunConfig, seed: int | None = None, leads: int | None = None,
                   variant_name: str | None = None) -> RunConfig:
    """Apply CLI flags on top of the file; flags win."""
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    if leads is not None:
        cfg = replace(cfg, leads=leads)
    if variant_name is not None:
        cfg = replace(cfg, model=replace(cfg.model, variant=variant_name))
    return cfg.validate()
