"""Versioned checkpoint container.

Layout: ASCII header lines terminated by ``end_header``, then the declared
arrays as little-endian float32 in header order. Scalars that must survive
exactly (plane coordinates) are written as float hex strings in the header.
Parameters pass through float32 once, so load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import GaussianScene, Plane

MAGIC = "MIRRORSPLAT-CKPT"
FORMAT_VERSION = 1
SCENE_ARRAYS = ("means", "log_scales", "quats", "opacity_logits", "sh")


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _hex(values) -> str:
    return " ".join(float(v).hex() for v in np.ravel(values))


def _unhex(tokens) -> np.ndarray:
    return np.array([float.fromhex(t) for t in tokens])


@dataclass
class Checkpoint:
    scene: GaussianScene
    stage: str = "Init"
    step: int = 0
    config_hash: str = ""
    plane_ref: np.ndarray | None = None  # reference normal of the tangent chart
    plane_coords: np.ndarray | None = None  # (a1, a2, offset)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def plane(self) -> Plane | None:
        if self.plane_ref is None:
            return None
        from .mirror import TangentPlane
        tp = TangentPlane(self.plane_ref, self.plane_coords[:2], float(self.plane_coords[2]))
        return tp.plane

    def save(self, path) -> None:
        path = Path(path)
        s = self.scene
        arrays = [(name, getattr(s, name)) for name in SCENE_ARRAYS]
        arrays += [(f"opt.{k}", v) for k, v in sorted(self.optimizer.items())]
        lines = [f"{MAGIC} {self.format_version}",
                 f"count {len(s)}",
                 f"sh_degree {s.sh_degree}",
                 f"stage {self.stage}",
                 f"step {self.step}",
                 f"config_hash {self.config_hash or '-'}"]
        if self.plane_ref is not None:
            lines.append(f"plane_ref {_hex(self.plane_ref)}")
            lines.append(f"plane_coords {_hex(self.plane_coords)}")
        for k, v in sorted(self.counters.items()):
            lines.append(f"counter {k} {int(v)}")
        for name, a in arrays:
            lines.append(f"array {name} {' '.join(str(d) for d in a.shape) or 'scalar'}")
        lines.append("end_header")
        header = ("\n".join(lines) + "\n").encode("ascii")
        body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(header + body)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        end = raw.find(b"end_header\n")
        if not raw.startswith(MAGIC.encode()) or end < 0:
            raise CheckpointError(f"{path} is not a checkpoint")
        header = raw[:end].decode("ascii").splitlines()
        offset = end + len(b"end_header\n")
        version = int(header[0].split()[1])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        meta: dict = {"counters": {}}
        arrays: dict[str, np.ndarray] = {}
        for line in header[1:]:
            key, *rest = line.split()
            if key == "array":
                name, dims = rest[0], rest[1:]
                shape = () if dims == ["scalar"] else tuple(int(d) for d in dims)
                n = int(np.prod(shape)) if shape else 1
                if offset + 4 * n > len(raw):
                    raise CheckpointError(f"{path}: size does not match header")
                a = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float64)
                arrays[name] = a.reshape(shape)
                offset += 4 * n
            elif key == "counter":
                meta["counters"][rest[0]] = int(rest[1])
            elif key in ("plane_ref", "plane_coords"):
                meta[key] = _unhex(rest)
            else:
                meta[key] = rest[0] if rest else ""
        if offset != len(raw):
            raise CheckpointError(f"{path}: size does not match header")
        scene = GaussianScene(*(arrays[n] for n in SCENE_ARRAYS), sh_degree=int(meta["sh_degree"]))
        optimizer = {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")}
        return cls(scene=scene, stage=meta["stage"], step=int(meta["step"]),
                   config_hash="" if meta["config_hash"] == "-" else meta["config_hash"],
                   plane_ref=meta.get("plane_ref"), plane_coords=meta.get("plane_coords"),
                   optimizer=optimizer, counters=meta["counters"], format_version=version)


def save_scene(scene: GaussianScene, path, plane: Plane | None = None) -> None:
    ck = Checkpoint(scene)
    if plane is not None:
        ck.plane_ref = plane.normal.copy()
        ck.plane_coords = np.array([0.0, 0.0, plane.offset])
    ck.save(path)


def to_float32(scene: GaussianScene) -> GaussianScene:
    """Round every parameter through float32, as a checkpoint would."""
    return scene.replace(**{n: np.asarray(getattr(scene, n), dtype=np.float32).astype(np.float64)
                            for n in SCENE_ARRAYS})
