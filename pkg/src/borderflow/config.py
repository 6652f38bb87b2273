"""Flat `key = value` run configuration with a fixed schema.

Unknown keys are rejected. Defaults marked per-task resolve differently
for the 2-D point task and the dense scenes task. The effective (fully
resolved) configuration can be formatted back out; re-running from that
echo reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.replace(" ", "").split(",") if p)


def _choice(*options):
    def convert(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return convert


def _optional_str(text: str):
    return None if text in ("", "none") else text


@dataclass(frozen=True)
class Field:
    convert: object
    default: object  # plain value, or {"points": ..., "scenes": ...}


PER_TASK = ("points", "scenes")

SCHEMA: dict[str, Field] = {
    # general
    "task": Field(_choice("points", "scenes"), "points"),
    "seed": Field(int, 0),
    "data_dir": Field(_optional_str, None),
    # data generation
    "n_train": Field(int, {"points": 2000, "scenes": 60}),
    "n_eval": Field(int, {"points": 500, "scenes": 40}),
    "n_eval_outliers": Field(int, 500),
    "classes": Field(int, {"points": 2, "scenes": 5}),
    "image_size": Field(int, 64),
    "point_preset": Field(_choice("two-gaussians", "two-moons"), "two-gaussians"),
    "point_distance": Field(float, 2.0),
    "point_sigma": Field(float, 0.5),
    "moons_noise": Field(float, 0.1),
    "outlier_r_min": Field(float, 3.5),
    "outlier_r_max": Field(float, 5.0),
    # flow
    "flow_res_blocks": Field(int, 3),
    "flow_hidden": Field(int, 32),
    "flow_squeeze": Field(int, {"points": 0, "scenes": 1}),
    "flow_couplings": Field(int, 3),
    "flow_dequant_levels": Field(int, {"points": 0, "scenes": 256}),
    "flow_lr": Field(float, 1e-3),
    # classifier
    "clf_hidden": Field(int, 64),
    "clf_base": Field(int, 16),
    # training
    "iterations": Field(int, {"points": 2000, "scenes": 5000}),
    "batch_size": Field(int, {"points": 64, "scenes": 4}),
    "lambda": Field(float, {"points": 1.0, "scenes": 1e-3}),
    "n_out": Field(int, 0),  # 0: use the batch size
    "outlier_sizes": Field(_int_tuple, (8, 10, 12, 14, 16)),
    "paste": Field(_bool, True),
    "classifier_lr": Field(float, {"points": 1e-3, "scenes": 4e-4}),
    "classifier_lr_min": Field(float, 1e-7),
    "classifier_schedule": Field(_choice("cosine", "constant"), "cosine"),
    "checkpoint_every": Field(int, 0),
    # evaluation / sampling
    "temps": Field(_float_tuple, (1.0, 2.0, 10.0)),
    "scorings": Field(_choice("msp", "entropy", "msp,entropy", "entropy,msp"), "msp,entropy"),
    "sample_n": Field(int, 4),
    "sample_sizes": Field(_int_tuple, (8, 16)),
}


def parse_config_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
        raw[key] = value.strip()
    return raw


def resolve(raw: dict[str, str], overrides: dict | None = None) -> SimpleNamespace:
    """Apply the schema and per-task defaults; returns attribute access via
    key names (the `lambda` key becomes attribute `lam`)."""
    values: dict[str, object] = {}
    task = raw.get("task", SCHEMA["task"].default)
    if overrides and "task" in overrides:
        task = overrides["task"]
    for key, fld in SCHEMA.items():
        if overrides and key in overrides and overrides[key] is not None:
            values[key] = overrides[key]
        elif key in raw:
            values[key] = fld.convert(raw[key])
        else:
            default = fld.default
            if isinstance(default, dict):
                default = default[task]
            values[key] = default
    values["task"] = task
    ns = SimpleNamespace(**{("lam" if k == "lambda" else k): v for k, v in values.items()})
    return ns


def format_effective(cfg: SimpleNamespace) -> str:
    lines = ["# effective configuration"]
    for key in SCHEMA:
        value = getattr(cfg, "lam" if key == "lambda" else key)
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides: dict | None = None) -> SimpleNamespace:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    return resolve(raw, overrides)


def scoring_list(cfg: SimpleNamespace) -> list[str]:
    return [s for s in cfg.scorings.split(",") if s]
