"""Uniform entry point for the three reconstruction methods.

Settings arrive as a flat mapping whose keys match the CLI flag names with
dashes turned into underscores, so the CLI, config files and sweeps share
one vocabulary.
"""

from __future__ import annotations

import dataclasses

from ..mbir import mbir_reconstruct
from ..rbpdip import RbpConfig, dip_reconstruct, rbp_dip_reconstruct
from ..unet import UNetConfig

METHODS = ("mbir", "dip-fixed", "rbp-dip")
ALIASES = {"dip": "dip-fixed"}

DEFAULT_ITERS = 1500

MBIR_KEYS = {"iters", "stop_tol", "seed"}
NET_KEYS = {
    "iters", "nc", "ns", "beta_max", "delta", "seed", "lr", "depth", "base_channels",
    "kernel_size", "rbp_base", "checkpoint_every", "checkpoint_dir",
}


class ConfigError(ValueError):
    """A method name or setting that cannot be used."""


def canonical_method(name: str) -> str:
    name = ALIASES.get(name.strip(), name.strip())
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; expected one of {', '.join(METHODS)} (or 'dip')")
    return name


def check_settings(method: str, settings: dict) -> None:
    allowed = MBIR_KEYS if method == "mbir" else NET_KEYS
    unknown = sorted(set(settings) - allowed)
    if unknown:
        raise ConfigError(f"settings not understood by {method}: {', '.join(unknown)}")


def validate_settings(method: str, settings: dict) -> None:
    """Reject unknown keys and values that do not convert, before any run starts."""
    check_settings(method, settings)
    try:
        if method == "mbir":
            int(settings.get("iters", DEFAULT_ITERS))
            float(settings.get("stop_tol", 0.0))
        else:
            # sweeps supply a per-run checkpoint directory later
            rbp_config(method, {"checkpoint_dir": "-", **settings})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad setting for {method}: {exc}") from exc


def rbp_config(method: str, settings: dict) -> RbpConfig:
    s = settings
    net = UNetConfig(depth=int(s.get("depth", 4)), base_channels=int(s.get("base_channels", 16)),
                     kernel_size=int(s.get("kernel_size", 3)))
    cfg = RbpConfig(
        max_iters=int(s.get("iters", DEFAULT_ITERS)),
        mode=method,
        unet_config=net,
        seed=int(s.get("seed", 0)),
        checkpoint_every=int(s.get("checkpoint_every", 0)),
        checkpoint_dir=s.get("checkpoint_dir"),
    )
    renames = {"nc": "n_c", "ns": "n_s", "beta_max": "beta_max", "delta": "huber_delta", "lr": "lr",
               "rbp_base": "rbp_base"}
    updates = {field: type(getattr(cfg, field))(s[key]) for key, field in renames.items() if key in s}
    return dataclasses.replace(cfg, **updates)


def reconstruct(method: str, sino, geom, settings: dict | None = None, ground_truth=None, resume_from=None):
    """Run one method and return ``(image, ReconRun)``."""
    method = canonical_method(method)
    settings = dict(settings or {})
    check_settings(method, settings)
    if method == "mbir":
        return mbir_reconstruct(sino, geom, max_iters=int(settings.get("iters", DEFAULT_ITERS)),
                                stop_tol=float(settings.get("stop_tol", 1e-6)), ground_truth=ground_truth)
    cfg = rbp_config(method, settings)
    if method == "rbp-dip":
        return rbp_dip_reconstruct(sino, geom, cfg, ground_truth=ground_truth, resume_from=resume_from)
    return dip_reconstruct(sino, geom, cfg, ground_truth=ground_truth, resume_from=resume_from)
