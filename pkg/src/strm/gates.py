"""Gate-map export: per-frame channel-mean maps of X, S and the update gate."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import VideoReidModel


@dataclass
class GateTrace:
    raw: np.ndarray  # [T, H, W] channel-mean of X
    refined: np.ndarray  # [T, H, W] channel-mean of S
    gates: np.ndarray  # [T, H, W] channel-mean of Z


def trace_gates(model: VideoReidModel, frames: np.ndarray) -> GateTrace:
    """Eval-mode pass over one [T, 3, h, w] sequence keeping the gates."""
    if not model.config.use_rru:
        raise ValueError("model has no RRU; nothing to inspect")
    with T.no_grad():
        out = model.forward(frames[None], training=False, keep_gates=True)
    raw = out.raw.data[0].mean(axis=0)  # [C,T,H,W] -> [T,H,W]
    refined = out.refined.data[0].mean(axis=0)
    gates = np.stack([g.values.data[0].mean(axis=0) for g in out.gates])
    return GateTrace(raw, refined, gates)


def occluded_cells(mask: np.ndarray, feature_size: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Feature-grid cells whose image footprint is at least ``threshold`` occluded."""
    h, w = mask.shape
    fh, fw = feature_size
    cover = np.zeros(feature_size)
    for i in range(fh):
        for j in range(fw):
            cell = mask[i * h // fh:(i + 1) * h // fh, j * w // fw:(j + 1) * w // fw]
            cover[i, j] = cell.mean() if cell.size else 0.0
    return cover >= threshold


def occlusion_contrast(gates: np.ndarray, masks: np.ndarray, feature_size: tuple[int, int]) -> tuple[float, float] | None:
    """Mean gate inside vs outside occluded cells, over occluded frames after the first.

    The first frame is skipped: its refined map equals the raw map whatever
    the gate says.  Returns None when no such frame has an occluded cell.
    """
    inside, outside = [], []
    for t in range(1, len(gates)):
        cells = occluded_cells(masks[t], feature_size)
        if not cells.any() or cells.all():
            continue
        inside.append(gates[t][cells])
        outside.append(gates[t][~cells])
    if not inside:
        return None
    return float(np.concatenate(inside).mean()), float(np.concatenate(outside).mean())


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of values in [0, 1] (scaled by 255 and rounded)."""
    img = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    header = blob.split(b"\n", 3)
    if header[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_map_csv(path: str | Path, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in values:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def export_trace(trace: GateTrace, out_dir: str | Path) -> list[Path]:
    """Write gate, X and S maps per frame as CSV and PGM.

    X and S share one intensity scale (their joint max) so before/after maps
    compare directly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    peak = max(float(np.abs(trace.raw).max()), float(np.abs(trace.refined).max()))
    scale = 1.0 / peak if peak > 0 else 1.0
    written = []
    for t in range(trace.gates.shape[0]):
        for tag, arr, s in (("gate", trace.gates[t], 1.0), ("raw", trace.raw[t], scale),
                            ("refined", trace.refined[t], scale)):
            stem = out_dir / f"{tag}_t{t + 1:03d}"
            write_map_csv(stem.with_suffix(".csv"), arr)
            write_pgm(stem.with_suffix(".pgm"), arr * s)
            written += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
    return written
