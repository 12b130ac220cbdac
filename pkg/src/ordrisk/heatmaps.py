"""Attention / deformation heatmaps as binary PGM images."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .model import RiskModel
from .synthgen import ExamPair

OVERLAY_ALPHA = 0.5


def write_pgm(path: Union[str, Path], img: np.ndarray) -> None:
    """8-bit binary (P5) portable graymap."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {img.shape} {img.dtype}")
    h, w = img.shape
    try:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
    except OSError as err:
        raise OSError(f"cannot write heatmap {path}: {err}") from err


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the raster, which may itself start with whitespace
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if header is None or int(header.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(header.group(1)), int(header.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=header.end()).reshape(h, w)


def upsample_bilinear(m: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Resize a 2-D map to hw, matching cell centres (half-pixel convention), edges clamped."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    H, W = hw
    py = (np.arange(H) + 0.5) * h / H - 0.5
    px = (np.arange(W) + 0.5) * w / W - 0.5
    gy, gx = np.meshgrid(py, px, indexing="ij")
    out, _ = T.bilinear_sample(m[None, None], gy[None], gx[None])
    return out[0, 0]


def to_uint8(m: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalise to [0, 255]; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8), lo, hi
    return np.round(255.0 * (m - lo) / (hi - lo)).astype(np.uint8), lo, hi


def export_heatmaps(model: RiskModel, pair: ExamPair, out_dir: Union[str, Path]) -> dict[str, tuple[float, float]]:
    """Write attention maps, overlays and the displacement magnitude for one pair.

    Returns {map name: (min, max)} as also written to ``normalization.txt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prior = np.asarray(pair.prior.image, dtype=np.float32)[None]
    current = np.asarray(pair.current.image, dtype=np.float32)[None]
    if prior.ndim != 4 or prior.shape != current.shape:
        raise ValueError(f"pair images must be 1xHxW, got {pair.prior.image.shape} / {pair.current.image.shape}")
    hw = current.shape[-2:]
    with T.no_grad():
        o = model.forward(prior, current, np.array([pair.gap_years]), mode="eval")

    maps = {
        "a_cur": upsample_bilinear(o.a_cur.data[0], hw),
        "a_pri": upsample_bilinear(o.a_pri.data[0], hw),
        "a_dif": upsample_bilinear(o.a_dif.data[0], hw),
        "phi_magnitude": upsample_bilinear(np.sqrt((o.phi.data[0].astype(np.float64) ** 2).sum(axis=0)), hw),
        "current": current[0, 0].astype(np.float64),
        "prior": prior[0, 0].astype(np.float64),
    }
    ranges = {}
    scaled = {}
    for name, m in maps.items():
        scaled[name], lo, hi = to_uint8(m)
        ranges[name] = (lo, hi)
        write_pgm(out / f"{name}.pgm", scaled[name])
    for name, base in (("a_cur", "current"), ("a_pri", "prior"), ("a_dif", "current")):
        blend = (1 - OVERLAY_ALPHA) * scaled[base].astype(np.float64) + OVERLAY_ALPHA * scaled[name]
        write_pgm(out / f"{name}_overlay.pgm", np.round(blend).astype(np.uint8))
    with open(out / "normalization.txt", "w") as fh:
        fh.write("map min max\n")
        for name, (lo, hi) in ranges.items():
            fh.write(f"{name} {lo!r} {hi!r}\n")
    return ranges
