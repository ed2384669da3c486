"""Pipeline configuration: flat sections of key/value pairs, one per module.

The on-disk format is a minimal TOML-style text: ``[section]`` headers,
``key = value`` lines, values being quoted strings, booleans, numbers, or
flat lists of those. parse_config(serialize_config(cfg)) == cfg.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path


@dataclass
class DatasetCfg:
    rate: int = 8000
    duration: float = 1.0
    freq_band: list[float] = field(default_factory=lambda: [950.0, 1250.0])
    n_per_class: int = 20
    noise_sigma: float = 0.03
    augment_scales: list[float] = field(default_factory=list)


@dataclass
class SpectraCfg:
    representation: str = "dwt"  # dwt | stft | pool
    n_scales: int = 64
    morlet_factor: float = 0.8431
    dwt_hop: int = 8
    max_scale: float = 16.0  # top of the dyadic scale grid; 0 = auto from clip length
    mag_scales: list[str] = field(default_factory=lambda: ["linear", "logarithmic", "logarithmic_real"])
    stft_window: int = 400
    stft_hop: int = 200


@dataclass
class ImagingCfg:
    palettes: list[str] = field(default_factory=lambda: ["BBG", "PG", "WB"])
    c_bbg: float = 0.57
    c_pg: float = 0.74
    c_wb: float = 0.46
    color_comp: bool = True
    highboost_c: float = 0.5
    svd: bool = True
    svd_n_prime: float = 2.0
    image_rows: int = 32
    image_cols: int = 48


@dataclass
class NeuralCfg:
    cda: bool = True
    cda_filters: list[int] = field(default_factory=lambda: [6, 12, 12])
    cda_dropout: float = 0.1
    cda_epochs: int = 6
    cda_lr: float = 1.0
    cda_batch: int = 8
    cda_mask_rate: float = 0.2
    cnn_filters: list[int] = field(default_factory=lambda: [8, 16])
    cnn_hidden: int = 64
    cnn_epochs: int = 40
    cnn_lr: float = 0.05
    cnn_batch: int = 8


@dataclass
class FeaturesCfg:
    zone_sizes: list[int] = field(default_factory=lambda: [16, 32])
    strides: list[int] = field(default_factory=lambda: [1, 2])
    codebook_k: int = 64
    max_descriptors: int = 20000
    shared_codebook: bool = True


@dataclass
class SvmCfg:
    kernel: str = "poly"
    degree: int = 2
    offset: float = 1.0
    gamma: float = 1.0
    cost: float = 5.0
    raw_cost: float = 1.0


@dataclass
class AttacksCfg:
    attacks: list[str] = field(default_factory=lambda: ["fgsm", "bim_a", "bim_b", "cwa", "evasion", "lfa"])
    epsilon: float = 0.1
    step: float = 0.025
    max_iters: int = 10
    cwa_inner_steps: int = 100
    cwa_binary_steps: int = 4
    cwa_lr: float = 0.02
    cwa_c_lo: float = 0.5
    cwa_c_hi: float = 50.0
    evasion_step: float = 0.05
    evasion_iters: int = 120
    lfa_budget_frac: float = 0.25
    lfa_gamma: float = 1.0


@dataclass
class EvalCfg:
    folds: int = 5
    seed: int = 0
    lid_k: list[int] = field(default_factory=lambda: [20, 35, 50])
    lid_batch: int = 100
    noise_sigma: float = 0.02


@dataclass
class OutputCfg:
    dir: str = "out"


@dataclass
class PipelineConfig:
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    spectra: SpectraCfg = field(default_factory=SpectraCfg)
    imaging: ImagingCfg = field(default_factory=ImagingCfg)
    neural: NeuralCfg = field(default_factory=NeuralCfg)
    features: FeaturesCfg = field(default_factory=FeaturesCfg)
    svm: SvmCfg = field(default_factory=SvmCfg)
    attacks: AttacksCfg = field(default_factory=AttacksCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    output: OutputCfg = field(default_factory=OutputCfg)

    def palette_c(self, palette: str) -> float:
        return {"BBG": self.imaging.c_bbg, "PG": self.imaging.c_pg, "WB": self.imaging.c_wb}[palette]


def default_config() -> PipelineConfig:
    return PipelineConfig()


class ConfigError(ValueError):
    pass


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_format_value(e) for e in v) + "]"
    raise ConfigError(f"unserializable value {v!r}")


def _parse_scalar(token: str):
    token = token.strip()
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1].replace('\\"', '"').replace("\\\\", "\\")
    if token == "true":
        return True
    if token == "false":
        return False
    try:
        if any(ch in token for ch in ".eE") and not token.lstrip("+-").isdigit():
            return float(token)
        return int(token)
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {token!r}") from exc


def _split_list(body: str) -> list[str]:
    items, depth, cur, in_str = [], 0, "", False
    for ch in body:
        if ch == '"' and (not cur or cur[-1] != "\\"):
            in_str = not in_str
        if ch == "," and not in_str:
            items.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        items.append(cur)
    return items


def _parse_value(token: str):
    token = token.strip()
    if token.startswith("[") and token.endswith("]"):
        body = token[1:-1].strip()
        if not body:
            return []
        return [_parse_scalar(t) for t in _split_list(body)]
    return _parse_scalar(token)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        lines.append(f"[{section_field.name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _coerce(value, template):
    """Nudge parsed values toward the default's type (ints become floats, etc.)."""
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(template, float) and isinstance(value, int):
        return float(value)
    if isinstance(template, list) and isinstance(value, list):
        if template and value:
            return [_coerce(v, template[0]) for v in value]
        return value
    if isinstance(template, int) and isinstance(value, float):
        raise ConfigError(f"expected an integer, got {value!r}")
    if type(template) is not type(value) and not isinstance(value, type(template)):
        raise ConfigError(f"expected {type(template).__name__}, got {value!r}")
    return value


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    prev = ""
    for ch in line:
        if ch == '"' and prev != "\\":
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
        prev = ch
    return "".join(out)


def parse_config(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in sections:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            current = sections[name]
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key/value before any [section]")
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key = key.strip()
        valid = {f.name for f in fields(current)}
        if key not in valid:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{type(current).__name__}]")
        parsed = _parse_value(value)
        setattr(current, key, _coerce(parsed, getattr(current, key)))
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
