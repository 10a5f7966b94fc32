"""Flat little-endian float32 arrays with a ``key: value`` text sidecar.

``name.bin`` holds the planes back to back (channel-major); ``name.meta``
records height, width, channels and whatever else the caller supplies.  All
writes go through a temporary file and ``os.replace``.
"""

from __future__ import annotations

import io as _bytes_io
import os
import tempfile
from pathlib import Path

import numpy as np

from .phantoms import MaterialImage
from .physics import SpectralSinogram


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_meta(meta: dict) -> str:
    lines = []
    for k, v in meta.items():
        if isinstance(v, (list, tuple)):
            v = " ".join(map(str, v))
        v = str(v)
        if "\n" in v:
            raise ValueError(f"metadata value for {k!r} spans lines")
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def parse_meta(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"malformed metadata line: {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".meta") else path
    return stem.with_suffix(".bin"), stem.with_suffix(".meta")


def write_array(path, arr, meta: dict | None = None):
    """Write a (channels, ..., H, W) array as float32 LE planes plus sidecar."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    bin_path, meta_path = _paths(path)
    header = {"height": arr.shape[-2], "width": arr.shape[-1], "channels": arr.shape[0],
              "shape": " ".join(map(str, arr.shape)), "dtype": "float32-le"}
    header.update(meta or {})
    atomic_write(bin_path, arr.astype("<f4").tobytes())
    atomic_write(meta_path, format_meta(header))
    return bin_path, meta_path


def read_array(path) -> tuple[np.ndarray, dict]:
    bin_path, meta_path = _paths(path)
    meta = parse_meta(meta_path.read_text())
    shape = tuple(int(s) for s in meta["shape"].split())
    arr = np.fromfile(bin_path, dtype="<f4")
    if arr.size != np.prod(shape):
        raise ValueError(f"{bin_path} holds {arr.size} values, metadata says {shape}")
    return arr.reshape(shape).astype(np.float64), meta


def save_material_image(path, img: MaterialImage, **extra):
    meta = {"pixel_size_mm": img.pixel_size, "channel_names": "water calcium", "units": "g/ml"}
    meta.update({k: v for k, v in img.meta.items()})
    meta.setdefault("seed", "none")
    meta.setdefault("recipe", "none")
    meta.update(extra)
    return write_array(path, img.stack(), meta)


def load_material_image(path) -> MaterialImage:
    arr, meta = read_array(path)
    if arr.shape[0] != 2:
        raise ValueError(f"{path}: expected 2 channels, found {arr.shape[0]}")
    ps = float(meta.get("pixel_size_mm", 0.8))
    return MaterialImage(arr[0], arr[1], ps, meta)


def save_sinogram(path, sino: SpectralSinogram, geometry=None, **extra):
    """Counts go to ``path``; variance to ``path`` + ``_var``; mask rows in meta."""
    meta = dict(sino.meta)
    if geometry is not None:
        meta.update(geometry.to_meta())
    meta["active_views"] = ";".join("".join("1" if m else "0" for m in row) for row in sino.mask)
    meta.update(extra)
    bin_path, meta_path = write_array(path, sino.counts, meta)
    stem = bin_path.with_suffix("")
    write_array(stem.with_name(stem.name + "_var"), sino.variance, {"role": "variance"})
    return bin_path, meta_path


def load_sinogram(path) -> tuple[SpectralSinogram, dict]:
    counts, meta = read_array(path)
    bin_path, _ = _paths(path)
    stem = bin_path.with_suffix("")
    variance, _ = read_array(stem.with_name(stem.name + "_var"))
    mask = np.array([[c == "1" for c in row] for row in meta["active_views"].split(";")])
    return SpectralSinogram(counts, variance, mask, meta), meta


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) for row in rows]
    atomic_write(path, "\n".join(lines) + "\n")


def read_csv(path) -> tuple[list, list]:
    text = Path(path).read_text().splitlines()
    return text[0].split(","), [line.split(",") for line in text[1:] if line]


def save_result(directory, result, member: int = 0):
    """Estimate image, trace CSV (step,value) for one decomposition result."""
    directory = Path(directory)
    stem = directory / f"member_{member:03d}"
    meta = {"algorithm": result.algorithm, "iterations": result.iterations,
            "wall_time_s": f"{result.wall_time:.6f}", "member": member}
    meta.update({f"cfg_{k}": v for k, v in result.config.items()})
    save_material_image(stem, result.estimate, **meta)
    trace = np.asarray(result.trace, dtype=np.float64).reshape(-1)
    write_csv(directory / f"trace_{member:03d}.csv", ("step", "value"),
              [(i, float(v)) for i, v in enumerate(trace)])
    return stem


def load_results(directory) -> list[MaterialImage]:
    return [load_material_image(p) for p in sorted(Path(directory).glob("member_*.meta"))]


WINDOWS = {"water": (1.2, 0.6), "calcium": (0.05, 0.1)}  # (width, level) g/ml


def window_level(img, window: float, level: float) -> np.ndarray:
    """Linear map of [level - window/2, level + window/2] onto 0..255."""
    if not window > 0:
        raise ValueError(f"window must be positive, got {window}")
    x = (np.asarray(img, dtype=np.float64) - (level - window / 2.0)) / window * 255.0
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def export_image(path, img, window: float, level: float):
    """Write an 8-bit windowed image; the suffix (.png or .pgm) picks the format."""
    from PIL import Image

    path = Path(path)
    if path.suffix.lower() not in (".png", ".pgm"):
        raise ValueError(f"unsupported export format {path.suffix!r}; use .png or .pgm")
    buf = _bytes_io.BytesIO()
    Image.fromarray(window_level(img, window, level), mode="L").save(
        buf, format="PNG" if path.suffix.lower() == ".png" else "PPM")
    atomic_write(path, buf.getvalue())
    return path
