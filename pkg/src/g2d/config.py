"""INI experiment configuration.

Every stage section maps onto the fields of its dataclass in
:mod:`g2d.training`. Unknown sections or keys raise; missing keys keep the
dataclass defaults. ``seed`` lives in ``[global]`` and is copied into every
stage.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .training import ClassifierConfig, EncoderConfig, ReformerConfig, TeacherConfig


class ConfigError(ValueError):
    pass


@dataclass
class GlobalConfig:
    seed: int = 0
    threads: int = 0  # 0: fall back to G2D_THREADS, then 1


@dataclass
class SynthesisConfig:
    identities: int = 16
    views: int = 40
    templates: int = 5


@dataclass
class EvalConfig:
    protocol: str = "MR-MP"
    split: str = "val"
    n_genuine: int = 240
    n_impostor: int = 240
    bins: int = 40


SECTIONS = {
    "global": GlobalConfig,
    "synthesis": SynthesisConfig,
    "teacher": TeacherConfig,
    "encoder": EncoderConfig,
    "reformer": ReformerConfig,
    "classifier": ClassifierConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    # the name ``global`` is reserved, hence ``run``
    run: GlobalConfig = field(default_factory=GlobalConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reformer: ReformerConfig = field(default_factory=ReformerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def section(self, name: str):
        return self.run if name == "global" else getattr(self, name)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` set globally and in every stage."""
        return replace(
            self,
            run=replace(self.run, seed=seed),
            teacher=replace(self.teacher, seed=seed),
            encoder=replace(self.encoder, seed=seed),
            reformer=replace(self.reformer, seed=seed),
            classifier=replace(self.classifier, seed=seed),
        )

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(self.section(name)).items():
                if name != "global" and k == "seed":
                    continue
                lines.append(f"{k} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(section: str, key: str, kind: str, raw: str):
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = ExperimentConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        obj = cfg.section(name)
        kinds = {f.name: f.type for f in fields(obj)}
        if name != "global":
            kinds.pop("seed", None)
        updates = {}
        for key, raw in cp.items(name):
            if key not in kinds:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            updates[key] = _coerce(name, key, kinds[key], raw)
        new = replace(obj, **updates)
        if name == "global":
            cfg = replace(cfg, run=new)
        else:
            cfg = replace(cfg, **{name: new})
    _validate(cfg)
    return cfg.with_seed(cfg.run.seed)


def _validate(cfg: ExperimentConfig) -> None:
    from .metrics import PROTOCOLS
    from .training import ABLATIONS
    if cfg.eval.protocol not in PROTOCOLS:
        raise ConfigError(f"[eval] protocol must be one of {PROTOCOLS}")
    if cfg.eval.split not in ("train", "val", "all"):
        raise ConfigError("[eval] split must be train, val or all")
    for name in ("reformer", "classifier"):
        if cfg.section(name).ablation not in ABLATIONS:
            raise ConfigError(f"[{name}] ablation must be one of {ABLATIONS}")
    for name in ("teacher", "encoder", "reformer", "classifier"):
        sec = cfg.section(name)
        if sec.epochs < 1 or sec.batch_size < 1:
            raise ConfigError(f"[{name}] epochs and batch_size must be positive")


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def echo_config(cfg: ExperimentConfig, out_dir) -> None:
    """Write the resolved config and the tool version next to outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    (out / "VERSION").write_text(f"g2d {__version__}\n", encoding="utf-8")
