"""Pipeline configuration: ``section.key = value`` text with typed defaults.

Every key has a default; a config file or ``--set`` override may only touch
known keys. Each training stage hashes the sections it depends on, so
inference-only knobs (ODE steps, guidance scale, evaluation sizes) never
invalidate a trained checkpoint.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import ConfigError

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0},
    "paths": {"corpus": ""},  # empty: <run dir>/corpus
    "corpus": {"n_speakers": 60, "n_utts": 16},
    "dsp": {
        "sample_rate": 16000,
        "n_fft": 1024,
        "hop": 256,
        "n_mels": 80,
        "f0_min": 60.0,
        "f0_max": 300.0,
        "gl_iters": 32,
        "gl_momentum": 0.99,
    },
    "pitch": {
        "steps": 1500,
        "batch_size": 16,
        "lr": 2e-3,
        "hidden": 128,
        "ema_decay": 0.99,
        "dead_after": 200,
        "w_recon": 1.0,
        "w_commit": 0.15,
        "w_vq": 0.05,
    },
    "content": {"k": 64, "max_iter": 200, "tol": 1e-6, "max_frames": 80000},
    "timbre": {"d_spk": 64},
    "flow": {
        "sigma_min": 1e-4,
        "ode_steps": 10,
        "cfg_scale": 1.0,
        "cond_dropout_p": 0.2,
        "mask_ratio_min": 0.3,
        "mask_ratio_max": 0.7,
        "mask_spans_min": 1,
        "mask_spans_max": 3,
        "full_mask_p": 0.5,
        "solver": "euler",
        "d_model": 128,
        "hidden": 128,
        "n_heads": 2,
        "n_semantic_blocks": 2,
        "n_decoder_blocks": 4,
        "downsample": True,
        "use_pitch": True,
        "use_timbre_tokens": True,
    },
    "train": {
        "steps": 4500,
        "batch_frames": 2400,
        "lr": 1e-3,
        "warmup": 200,
        "grad_clip": 1.0,
        "prompt_min": 50,
        "prompt_max": 150,
        "target_min": 100,
        "target_max": 250,
        "precision": "float32",
    },
    "eval": {"n_pairs": 50, "sweep_steps": "20,10,5,2", "sweep_pairs": 10},
}

# keys that only affect inference or evaluation
INFERENCE_KEYS = {"flow.ode_steps", "flow.cfg_scale", "flow.solver", "dsp.gl_iters", "dsp.gl_momentum"}

# sections each artifact depends on
STAGE_SECTIONS = {
    "corpus": ("run", "corpus"),
    "pitch": ("run", "corpus", "dsp", "pitch"),
    "content": ("run", "corpus", "dsp", "content"),
    "cfm": ("run", "corpus", "dsp", "pitch", "content", "timbre", "flow", "train"),
}


def _parse_value(raw: str, default: object, key: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _fmt(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class PipelineConfig:
    values: dict[str, dict[str, object]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def get(self, key: str):
        section, name = self._split(key)
        return self.values[section][name]

    def __getitem__(self, key: str):
        return self.get(key)

    def section(self, name: str) -> dict[str, object]:
        return dict(self.values[name])

    @staticmethod
    def _split(key: str) -> tuple[str, str]:
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like section.key")
        section, name = key.split(".", 1)
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
        if name not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {key!r}")
        return section, name

    def set(self, key: str, raw) -> None:
        section, name = self._split(key.strip())
        default = DEFAULTS[section][name]
        value = _parse_value(raw, default, key) if isinstance(raw, str) else raw
        self.values[section][name] = value

    def apply_overrides(self, items) -> "PipelineConfig":
        for item in items or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            k, v = item.split("=", 1)
            self.set(k, v)
        return self

    @classmethod
    def parse(cls, text: str, source: str = "config") -> "PipelineConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
            k, v = line.split("=", 1)
            try:
                cfg.set(k, v)
            except ConfigError as e:
                raise ConfigError(f"{source}:{n}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def dump(self, sections=None) -> str:
        lines = []
        for s in sections or self.values:
            for k, v in self.values[s].items():
                lines.append(f"{s}.{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def hash(self, stage: str | None = None) -> str:
        """Hash of the resolved config, or of the sections ``stage`` depends on."""
        sections = STAGE_SECTIONS[stage] if stage else tuple(self.values)
        lines = [ln for ln in self.dump(sections).splitlines() if ln.split(" = ")[0] not in INFERENCE_KEYS]
        if stage:
            lines = [ln for ln in lines if not ln.startswith("paths.")]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def copy(self) -> "PipelineConfig":
        return PipelineConfig(copy.deepcopy(self.values))
