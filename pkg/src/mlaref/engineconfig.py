"""Engine settings resolved from INI config files, environment, and flags.

Precedence, lowest to highest: built-in defaults, config file sections,
``MLAREF_<SECTION>_<KEY>`` environment variables, explicit flag overrides.
Sections and keys:

    [model]     preset | model_dim num_heads nope_head_dim rope_dim
                v_head_dim kv_lora_rank q_lora_rank
    [hardware]  preset | peak_flops hbm_bandwidth, dtype_bytes
    [cache]     capacity_pages block_size
    [policy]    mode threshold_batch   (blank threshold -> derived from the
                cost model's crossover for the configured hardware)
    [output]    format (csv | jsonl)
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .costmodel import (
    HARDWARE_PRESETS,
    HardwareProfile,
    crossover_batch,
    get_hardware_preset,
)
from .hybrid import FallbackPolicy
from .mla import MODEL_PRESETS, MlaConfig, get_model_preset

ENV_PREFIX = "MLAREF"

_MODEL_DIM_KEYS = (
    "model_dim",
    "num_heads",
    "nope_head_dim",
    "rope_dim",
    "v_head_dim",
    "kv_lora_rank",
    "q_lora_rank",
)


class ConfigError(ValueError):
    """Bad config file, environment value, or flag combination."""


@dataclass
class EngineSettings:
    model: MlaConfig
    model_name: str
    hardware: HardwareProfile
    capacity_pages: int
    block_size: int
    policy_mode: str
    threshold_batch: int | None
    output_format: str

    def resolved_policy(self) -> FallbackPolicy:
        """Policy with the batch threshold pinned or derived at startup."""
        threshold = self.threshold_batch
        if threshold is None:
            threshold = crossover_batch(self.model, self.hardware).scheduling_batch
        return FallbackPolicy(mode=self.policy_mode, threshold_batch=threshold)

    def snapshot(self) -> dict:
        """Resolved values for run manifests."""
        return {
            "model_name": self.model_name,
            "model": {k: getattr(self.model, k) for k in _MODEL_DIM_KEYS},
            "hardware": {
                "name": self.hardware.name,
                "peak_flops": self.hardware.peak_flops,
                "hbm_bandwidth": self.hardware.hbm_bandwidth,
                "dtype_bytes": self.hardware.dtype_bytes,
            },
            "cache": {"capacity_pages": self.capacity_pages, "block_size": self.block_size},
            "policy": {
                "mode": self.policy_mode,
                "threshold_batch": self.threshold_batch,
                "threshold_resolved": self.resolved_policy().threshold_batch,
            },
            "output_format": self.output_format,
        }


_DEFAULTS = {
    ("model", "preset"): "deepseek-v3",
    ("hardware", "preset"): "ascend-910-class",
    ("cache", "capacity_pages"): "4096",
    ("cache", "block_size"): "128",
    ("policy", "mode"): "auto",
    ("policy", "threshold_batch"): "",
    ("output", "format"): "csv",
}


def _layered_value(
    section: str, key: str, parser: configparser.ConfigParser | None, env: dict, overrides: dict
) -> str | None:
    value = _DEFAULTS.get((section, key))
    if parser is not None and parser.has_option(section, key):
        value = parser.get(section, key)
    env_key = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
    if env_key in env:
        value = env[env_key]
    if (section, key) in overrides and overrides[(section, key)] is not None:
        value = str(overrides[(section, key)])
    return value


def _get_int(raw: str, what: str) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be an integer, got {raw!r}") from None


def _get_float(raw: str, what: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a number, got {raw!r}") from None


def load_settings(
    config_path: str | None = None,
    env: dict | None = None,
    overrides: dict | None = None,
) -> EngineSettings:
    """Resolve settings; raises ConfigError on anything malformed.

    ``overrides`` maps (section, key) tuples to values, used by CLI flags.
    """
    env = dict(os.environ) if env is None else env
    overrides = overrides or {}
    parser = None
    if config_path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise ConfigError(f"cannot read config file {config_path!r}")

    def val(section: str, key: str) -> str | None:
        return _layered_value(section, key, parser, env, overrides)

    # model: explicit dims (all seven) beat the preset
    dims = {k: val("model", k) for k in _MODEL_DIM_KEYS}
    given = {k: v for k, v in dims.items() if v not in (None, "")}
    model_name = val("model", "preset") or "deepseek-v3"
    if given:
        if set(given) != set(_MODEL_DIM_KEYS):
            missing = sorted(set(_MODEL_DIM_KEYS) - set(given))
            raise ConfigError(f"explicit model dims are all-or-nothing; missing {missing}")
        try:
            model = MlaConfig(**{k: _get_int(v, f"model.{k}") for k, v in given.items()})
        except ValueError as e:
            raise ConfigError(str(e)) from None
        model_name = "custom"
    else:
        if model_name not in MODEL_PRESETS:
            raise ConfigError(
                f"unknown model preset {model_name!r} (known: {sorted(MODEL_PRESETS)})"
            )
        model = get_model_preset(model_name)

    # hardware: explicit numbers beat the preset
    peak = val("hardware", "peak_flops")
    bandwidth = val("hardware", "hbm_bandwidth")
    dtype_bytes_raw = val("hardware", "dtype_bytes")
    dtype_bytes = _get_int(dtype_bytes_raw, "hardware.dtype_bytes") if dtype_bytes_raw else None
    if peak or bandwidth:
        if not (peak and bandwidth):
            raise ConfigError("hardware.peak_flops and hardware.hbm_bandwidth go together")
        try:
            hardware = HardwareProfile(
                name="custom",
                peak_flops=_get_float(peak, "hardware.peak_flops"),
                hbm_bandwidth=_get_float(bandwidth, "hardware.hbm_bandwidth"),
                dtype_bytes=dtype_bytes if dtype_bytes is not None else 2,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None
    else:
        hw_name = val("hardware", "preset") or "ascend-910-class"
        if hw_name not in HARDWARE_PRESETS:
            raise ConfigError(
                f"unknown hardware preset {hw_name!r} (known: {sorted(HARDWARE_PRESETS)})"
            )
        hardware = get_hardware_preset(hw_name, dtype_bytes=dtype_bytes)

    capacity_pages = _get_int(val("cache", "capacity_pages"), "cache.capacity_pages")
    block_size = _get_int(val("cache", "block_size"), "cache.block_size")
    if capacity_pages < 1 or block_size < 1:
        raise ConfigError("cache.capacity_pages and cache.block_size must be >= 1")

    policy_mode = (val("policy", "mode") or "auto").strip()
    if policy_mode not in ("auto", "force-hybrid", "force-absorb"):
        raise ConfigError(f"policy.mode must be auto|force-hybrid|force-absorb, got {policy_mode!r}")
    threshold_raw = val("policy", "threshold_batch")
    threshold = _get_int(threshold_raw, "policy.threshold_batch") if threshold_raw else None
    if threshold is not None and threshold < 1:
        raise ConfigError("policy.threshold_batch must be >= 1")

    output_format = (val("output", "format") or "csv").strip().lower()
    if output_format not in ("csv", "jsonl"):
        raise ConfigError(f"output.format must be csv or jsonl, got {output_format!r}")

    return EngineSettings(
        model=model,
        model_name=model_name,
        hardware=hardware,
        capacity_pages=capacity_pages,
        block_size=block_size,
        policy_mode=policy_mode,
        threshold_batch=threshold,
        output_format=output_format,
    )
