"""Declarative run configuration (JSON), validated against a schema before use."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from qdmtools.errors import ConfigError
from qdmtools.forward import DipoleSource, SensorGeometry
from qdmtools.lm import LmOptions
from qdmtools.mapping import FilterSpec, uniform_stack_params
from qdmtools.spectra import Mode, PolarizationDrive, SpectrumParams

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["geometry", "mode", "freqs"],
    "properties": {
        "sources": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["position_m", "moment_Am2"],
                "properties": {"position_m": _VEC3, "moment_Am2": _VEC3},
            },
        },
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["standoff_m", "pixel_pitch_m", "grid"],
            "properties": {
                "standoff_m": _POS,
                "pixel_pitch_m": _POS,
                "grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "nv_layer_thickness_m": {"type": "number", "minimum": 0},
                "nv_layer_depth_m": {"type": "number", "minimum": 0},
            },
        },
        "mode": {"enum": ["VMM", "PMM", "CPMM"]},
        "bias_field_t": _VEC3,
        "nv_orientation": {"type": "integer", "minimum": 1, "maximum": 4},
        "polarization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "handedness": {"enum": ["sigma_plus", "sigma_minus", "linear"]},
                "axis": _VEC3,
            },
        },
        "freqs": {
            "type": "object",
            "additionalProperties": False,
            "required": ["start_ghz", "stop_ghz", "count"],
            "properties": {
                "start_ghz": _POS,
                "stop_ghz": _POS,
                "count": {"type": "integer", "minimum": 2},
            },
        },
        "lineshape": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "linewidth_mhz": _POS,
                "contrast": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "offset": _POS,
                "hyperfine_mhz": {"type": "number", "minimum": 0},
                "res_freqs_ghz": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "lm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iterations": {"type": "integer", "minimum": 1},
                "cost_tolerance": _POS,
                "param_tolerance": _POS,
                "initial_damping": _POS,
                "damping_up": {"type": "number", "exclusiveMinimum": 1},
                "damping_down": {"type": "number", "exclusiveMinimum": 1},
                "jacobian_mode": {"enum": ["analytic", "forward_difference"]},
                "fd_step": _POS,
            },
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lowpass_fwhm_m": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "highpass_cutoff_m": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "highpass_order": {"type": "integer", "minimum": 1},
            },
        },
        "photons_per_pixel": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "threads": {"type": ["integer", "null"], "minimum": 1},
    },
}


@dataclass
class RunConfig:
    sources: list
    geometry: SensorGeometry
    mode: Mode
    freqs: np.ndarray
    lineshape: SpectrumParams
    bias_field: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: int = 1
    polarization: PolarizationDrive | None = None
    lm: LmOptions = field(default_factory=LmOptions)
    filter: FilterSpec = field(default_factory=FilterSpec)
    photons_per_pixel: float | None = None
    seed: int | None = None
    threads: int | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        try:
            return cls._build(raw)
        except ValueError as exc:
            raise ConfigError(f"config invalid: {exc}") from None

    @classmethod
    def _build(cls, raw: dict) -> "RunConfig":
        mode = Mode(raw["mode"])
        g = raw["geometry"]
        geom = SensorGeometry(
            standoff=g["standoff_m"],
            pixel_pitch=g["pixel_pitch_m"],
            grid=tuple(g["grid"]),
            nv_layer_thickness=g.get("nv_layer_thickness_m", 0.0),
            nv_layer_depth=g.get("nv_layer_depth_m", 0.0),
        )
        fr = raw["freqs"]
        if fr["stop_ghz"] <= fr["start_ghz"]:
            raise ValueError("freqs.stop_ghz must exceed freqs.start_ghz")
        freqs = np.linspace(fr["start_ghz"], fr["stop_ghz"], fr["count"])
        ls = raw.get("lineshape", {})
        tmpl = uniform_stack_params(
            mode,
            linewidth=ls.get("linewidth_mhz", 0.5),
            contrast=ls.get("contrast", 0.01),
            offset=ls.get("offset", 1.0),
            hyperfine=ls.get("hyperfine_mhz"),
        )
        if "res_freqs_ghz" in ls:
            if mode is not Mode.CPMM:
                raise ValueError("lineshape.res_freqs_ghz only applies to CPMM")
            tmpl = tmpl.with_(res_freqs=np.array(ls["res_freqs_ghz"], dtype=float))
        sources = [DipoleSource(s["position_m"], s["moment_Am2"]) for s in raw.get("sources", [])]
        pol = None
        if mode is Mode.CPMM:
            pol = PolarizationDrive.from_dict(raw.get("polarization", {"handedness": "sigma_plus"}))
        flt = raw.get("filter", {})
        photons = raw.get("photons_per_pixel")
        return cls(
            sources=sources,
            geometry=geom,
            mode=mode,
            freqs=freqs,
            lineshape=tmpl,
            bias_field=np.array(raw.get("bias_field_t", [0.0, 0.0, 0.0]), dtype=float),
            orientation=raw.get("nv_orientation", 1),
            polarization=pol,
            lm=LmOptions.from_dict(raw.get("lm")),
            filter=FilterSpec(
                flt.get("lowpass_fwhm_m", 5e-6),
                flt.get("highpass_cutoff_m", 200e-6),
                flt.get("highpass_order", 3),
            ),
            photons_per_pixel=None if photons is None or math.isinf(photons) else float(photons),
            seed=raw.get("seed"),
            threads=raw.get("threads"),
            raw=raw,
        )


def load_config(path) -> RunConfig:
    """Read and validate a JSON run configuration."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(raw)
