"""Experiment configuration: YAML in, flat dotted keys out.

Nested mappings are flattened (``geometry: {n_views: 120}`` becomes
``geometry.n_views``).  Unknown keys are errors, and validation collects every
problem before reporting, so one run surfaces all typos at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

ALGORITHMS = ("image-domain", "mbmd", "sdps", "jsdps")
SYSTEMS = ("dual-kvp", "dual-layer", "monoenergetic")
RECIPES = ("ellipse-chest", "disk-inserts", "random-blobs")

# key: (type, default, description)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0, "base seed; ensemble member i uses seed + i"),
    "out": (str, "out", "output directory"),
    "threads": (int, 1, "torch/BLAS threads"),
    "system": (str, "dual-kvp", "dual-kvp | dual-layer | monoenergetic"),
    "geometry.image_size": (int, 128, "pixels per side"),
    "geometry.pixel_size": (float, 0.8, "mm"),
    "geometry.n_views": (int, 362, "projection views (keep n_views/2 odd for dual-kvp)"),
    "geometry.n_det": (int, 192, "detector bins"),
    "geometry.det_pitch": (float, 1.0, "mm"),
    "geometry.beam": (str, "parallel", "parallel | fan"),
    "geometry.sod": (float, 600.0, "source-isocenter distance, mm"),
    "geometry.sdd": (float, 1000.0, "source-detector distance, mm"),
    "geometry.arc": (float, 360.0, "angular coverage, degrees"),
    "exposure.mas_per_view": (float, 0.05, "mAs per view"),
    "exposure.photons_per_mas": (float, 1.0e6, "photons per mAs per ray (120 kVp)"),
    "exposure.noise": (bool, True, "draw Poisson counts"),
    "phantom.recipe": (str, "ellipse-chest", "phantom recipe"),
    "phantom.count": (int, 1, "phantoms to write (seeds seed..seed+count-1)"),
    "diffusion.T": (int, 1000, "diffusion steps"),
    "diffusion.beta_1": (float, 1e-4, "first beta"),
    "diffusion.beta_T": (float, 0.02, "last beta"),
    "train.epochs": (int, 1, "passes over the dataset"),
    "train.batch_size": (int, 16, "images per step"),
    "train.lr": (float, 1e-4, "Adam learning rate"),
    "train.max_steps": (int, 0, "stop after this many steps (0: no limit)"),
    "train.base_width": (int, 32, "UNet base channels"),
    "train.scale_water": (float, 2.0, "g/ml per model unit"),
    "train.scale_calcium": (float, 2.0, "g/ml per model unit"),
    "algorithm.name": (str, "jsdps", "image-domain | mbmd | sdps | jsdps"),
    "algorithm.lam_w": (float, 1e-4, "MBMD water roughness weight"),
    "algorithm.lam_c": (float, 4e-4, "MBMD calcium roughness weight"),
    "algorithm.n_iter": (int, 1000, "MBMD iterations"),
    "algorithm.init": (str, "zero", "MBMD start: zero | image-domain"),
    "algorithm.t_prime": (int, 150, "JSDPS start step"),
    "algorithm.step_kind": (str, "", "residual-normalized | constant | score-matched ('' = per-algorithm default)"),
    "algorithm.eta": (float, -1.0, "step size (negative = per-algorithm default)"),
    "algorithm.grad_approx": (bool, True, "JSDPS: drop the denoiser Jacobian"),
    "algorithm.sweep": (bool, False, "sweep eta and keep the min-MSE value (needs paths.truth)"),
    "algorithm.sweep_grid": (list, [0.1, 0.316, 1.0, 3.16, 10.0], "sweep multipliers of the resolved eta"),
    "algorithm.clamp": (bool, True, "clamp final densities at 0"),
    "algorithm.filter": (str, "hann", "FBP filter for image-domain"),
    "ensemble.size": (int, 1, "independent samples per DPS run"),
    "paths.phantom": (str, "", "MaterialImage to simulate from"),
    "paths.sinogram": (str, "", "sinogram to decompose"),
    "paths.dataset": (str, "", "directory of MaterialImage files for training"),
    "paths.checkpoint": (str, "", "denoiser checkpoint"),
    "paths.resume": (str, "", "checkpoint to resume training from"),
    "paths.truth": (str, "", "ground-truth MaterialImage"),
    "paths.results": (list, [], "result directories to evaluate"),
}

# Tuned on a held-out desk phantom; the fidelity is in raw counts, so useful
# step sizes sit far below the values quoted for normalized measurements.
ALGORITHM_DEFAULTS = {
    "sdps": ("residual-normalized", 1e-3),
    "jsdps": ("residual-normalized", 1e-3),
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value, typ, errors):
    if typ is bool:
        if isinstance(value, bool):
            return value
        errors.append(f"{key}: expected true/false, got {value!r}")
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        errors.append(f"{key}: expected an integer, got {value!r}")
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):  # YAML 1.1 reads "1e-5" as a string
            try:
                return float(value)
            except ValueError:
                pass
        errors.append(f"{key}: expected a number, got {value!r}")
    elif typ is list:
        if isinstance(value, (list, tuple)):
            return list(value)
        if isinstance(value, str):
            return [value]
        errors.append(f"{key}: expected a list, got {value!r}")
    else:
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return str(value)
        errors.append(f"{key}: expected a string, got {value!r}")
    return None


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_mapping(cls, tree: dict | None, overrides: dict | None = None) -> "ExperimentConfig":
        errors = []
        flat = flatten(tree or {})
        flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
        values = {k: v[1] for k, v in SCHEMA.items()}
        for key, raw in flat.items():
            if key not in SCHEMA:
                errors.append(f"{key}: unknown key")
                continue
            val = _coerce(key, raw, SCHEMA[key][0], errors)
            if val is not None:
                values[key] = val
        cfg = cls(values)
        errors.extend(cfg.problems())
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        tree = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError([f"config file not found: {p}"])
            try:
                tree = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError([f"{p}: not valid YAML ({exc})"]) from exc
            if not isinstance(tree, dict):
                raise ConfigError([f"{p}: top level must be a mapping"])
        return cls.from_mapping(tree, overrides)

    def problems(self) -> list[str]:
        v, errs = self.values, []

        def positive(*keys):
            for k in keys:
                if v[k] <= 0:
                    errs.append(f"{k}: must be positive, got {v[k]}")

        if v["system"] not in SYSTEMS:
            errs.append(f"system: unknown {v['system']!r}; expected one of {SYSTEMS}")
        if v["geometry.beam"] not in ("parallel", "fan"):
            errs.append(f"geometry.beam: unknown {v['geometry.beam']!r}")
        positive("geometry.image_size", "geometry.pixel_size", "geometry.n_views", "geometry.n_det",
                 "geometry.det_pitch", "geometry.arc", "exposure.mas_per_view", "exposure.photons_per_mas",
                 "diffusion.T", "train.epochs", "train.batch_size", "train.lr", "train.base_width",
                 "train.scale_water", "train.scale_calcium", "algorithm.n_iter", "ensemble.size",
                 "phantom.count", "threads")
        if v["geometry.beam"] == "fan" and v["geometry.sdd"] <= v["geometry.sod"]:
            errs.append("geometry.sdd: must exceed geometry.sod for a fan beam")
        if v["seed"] < 0:
            errs.append("seed: must be non-negative")
        if v["phantom.recipe"] not in RECIPES:
            errs.append(f"phantom.recipe: unknown {v['phantom.recipe']!r}; expected one of {RECIPES}")
        if not 0 < v["diffusion.beta_1"] < v["diffusion.beta_T"] < 1:
            errs.append("diffusion.beta_1/beta_T: need 0 < beta_1 < beta_T < 1")
        if v["train.max_steps"] < 0:
            errs.append("train.max_steps: must be >= 0")
        if v["algorithm.name"] not in ALGORITHMS:
            errs.append(f"algorithm.name: unknown {v['algorithm.name']!r}; expected one of {ALGORITHMS}")
        if v["algorithm.lam_w"] < 0 or v["algorithm.lam_c"] < 0:
            errs.append("algorithm.lam_w/lam_c: must be non-negative")
        if v["algorithm.init"] not in ("zero", "image-domain"):
            errs.append(f"algorithm.init: unknown {v['algorithm.init']!r}")
        if not 1 <= v["algorithm.t_prime"] <= v["diffusion.T"]:
            errs.append(f"algorithm.t_prime: {v['algorithm.t_prime']} outside 1..diffusion.T ({v['diffusion.T']})")
        if v["algorithm.step_kind"] not in ("", "residual-normalized", "constant", "score-matched"):
            errs.append(f"algorithm.step_kind: unknown {v['algorithm.step_kind']!r}")
        if v["algorithm.filter"] not in ("ram-lak", "hann"):
            errs.append(f"algorithm.filter: unknown {v['algorithm.filter']!r}")
        grid = v["algorithm.sweep_grid"]
        if not grid or any(not isinstance(e, (int, float)) or isinstance(e, bool) or e <= 0 for e in grid):
            errs.append("algorithm.sweep_grid: need a non-empty list of positive numbers")
        return errs

    def require_paths(self, *keys):
        """Check that the named path keys are set and exist; raise with all misses."""
        errs = []
        for k in keys:
            p = self.values[k]
            items = p if isinstance(p, list) else [p]
            if not items or any(not s for s in items):
                errs.append(f"{k}: required for this command")
                continue
            for s in items:
                if not Path(s).exists() and not Path(s).with_suffix(".meta").exists():
                    errs.append(f"{k}: path does not exist: {s}")
        if errs:
            raise ConfigError(errs)

    def step(self):
        name = self.values["algorithm.name"]
        kind, eta = ALGORITHM_DEFAULTS.get(name, ("residual-normalized", 1.0))
        if self.values["algorithm.step_kind"]:
            kind = self.values["algorithm.step_kind"]
        if self.values["algorithm.eta"] >= 0:
            eta = self.values["algorithm.eta"]
        return kind, eta

    def to_text(self) -> str:
        return "".join(f"{k}: {self.values[k]}\n" for k in SCHEMA)


def describe() -> str:
    """The documented key namespace with defaults."""
    return "".join(f"{k:28s} {SCHEMA[k][1]!r:>24}  {SCHEMA[k][2]}\n" for k in SCHEMA)
