"""Dataset ingestion, scene persistence, trajectory export, and image metrics.

On disk a dataset is a directory with ``manifest.json`` (intrinsics plus an
ordered frame list), ``images/NNNNN.png`` 8-bit RGB frames, and optional
``masks/NNNNN.png`` (binary, values over 127 map to 1) and
``depth/NNNNN.pfm`` (Portable Float Map, meters) per frame.

Scenes persist as binary little-endian PLY, one vertex per splat, in the
field order third-party splat viewers expect, with the identity logits and
creation step appended as extra properties. The camera trajectory rides in a
JSON sidecar next to the PLY (camera-to-world, row-major 4x4), along with
the intrinsics when given.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import losses
from .blend import BlendConfig
from .core import CameraIntrinsics, Frame, GaussianScene, PoseSE3
from .expansion import ExpansionConfig
from .losses import LossWeights
from .pose import PoseEstimateConfig


@dataclass
class Dataset:
    frames: List[Frame]
    intrinsics: CameraIntrinsics
    root: Path
    name: str = ""
    source: str = ""

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# image codecs


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG to a float64 (H, W, 3) array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray):
    arr = np.asarray(image, dtype=np.float64)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """8-bit mask PNG to a binary {0, 1} float64 array; > 127 maps to 1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float64)


def save_mask(path, mask: np.ndarray):
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path)


def read_pfm(path) -> np.ndarray:
    """Grayscale Portable Float Map to a float32 (H, W) array.

    Header is "Pf", dimensions, and a scale whose sign encodes byte order;
    only little-endian (negative scale) files are accepted. Rows are stored
    bottom to top, so the payload is flipped on load.
    """
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"malformed PFM: bad magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError("malformed PFM: bad dimension line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        if scale >= 0:
            raise ValueError("malformed PFM: big-endian files are not supported")
        payload = f.read(width * height * 4)
    if len(payload) != width * height * 4:
        raise ValueError("malformed PFM: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    data = np.flipud(data).copy()
    if not np.all(np.isfinite(data)):
        raise ValueError("malformed PFM: non-finite entries")
    return data


def write_pfm(path, data: np.ndarray):
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("PFM payload must be 2-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError("PFM payload must be finite")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).tobytes())


# ---------------------------------------------------------------------------
# dataset directory


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    intr = CameraIntrinsics(**manifest["intrinsics"])
    frames = []
    for entry in sorted(manifest["frames"], key=lambda e: e["index"]):
        image = load_image(root / entry["image"])
        if image.shape[0] != intr.height or image.shape[1] != intr.width:
            raise ValueError(
                f"frame {entry['index']}: image is {image.shape[1]}x{image.shape[0]}, "
                f"intrinsics say {intr.width}x{intr.height}"
            )
        mask = None
        if entry.get("mask"):
            mask = load_mask(root / entry["mask"])
            if mask.shape != image.shape[:2]:
                raise ValueError(f"frame {entry['index']}: mask dimension mismatch")
        else:
            mask = np.zeros(image.shape[:2])
        depth = None
        if entry.get("depth"):
            depth = read_pfm(root / entry["depth"]).astype(np.float64)
            if depth.shape != image.shape[:2]:
                raise ValueError(f"frame {entry['index']}: depth dimension mismatch")
        frames.append(Frame(image=image, depth=depth, mask=mask, index=entry["index"]))
    return Dataset(frames=frames, intrinsics=intr, root=root,
                   name=manifest.get("name", ""), source=manifest.get("source", ""))


def save_dataset(root, frames: Sequence[Frame], intrinsics: CameraIntrinsics,
                 name: str = "", source: str = ""):
    """Write frames as a loadable dataset directory."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for frame in frames:
        stem = f"{frame.index:05d}"
        entry = {"index": frame.index, "image": f"images/{stem}.png"}
        save_image(root / entry["image"], frame.image)
        if frame.mask is not None and np.any(frame.mask > 0):
            (root / "masks").mkdir(exist_ok=True)
            entry["mask"] = f"masks/{stem}.png"
            save_mask(root / entry["mask"], frame.mask)
        if frame.depth is not None:
            (root / "depth").mkdir(exist_ok=True)
            entry["depth"] = f"depth/{stem}.pfm"
            write_pfm(root / entry["depth"], frame.depth.astype(np.float32))
        entries.append(entry)
    manifest = {
        "name": name,
        "source": source,
        "intrinsics": intrinsics.as_dict(),
        "frames": entries,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


# ---------------------------------------------------------------------------
# scene persistence (PLY + trajectory sidecar)


def _ply_property_names(sh_rest: int) -> List[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * sh_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


_KEA_PROPS = ["kea_0", "kea_1"]


def trajectory_sidecar_path(scene_path) -> Path:
    p = Path(scene_path)
    return p.with_name(p.stem + ".trajectory.json")


def save_scene(scene: GaussianScene, trajectory: Sequence[PoseSE3], path,
               intrinsics: Optional[CameraIntrinsics] = None):
    """Write a scene as binary PLY plus a trajectory JSON sidecar.

    Float payloads are cast to float32; round-trips are bit-exact at that
    precision. The sidecar stores camera-to-world matrices, row-major.
    """
    path = Path(path)
    n = len(scene)
    k = scene.sh.shape[1]
    rest = k - 1
    names = _ply_property_names(rest) + _KEA_PROPS
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["property int created_at", "end_header"]

    cols: List[np.ndarray] = []
    means = scene.means.numpy().astype("<f4")
    cols += [means[:, 0], means[:, 1], means[:, 2]]
    zeros = np.zeros(n, dtype="<f4")
    cols += [zeros, zeros, zeros]
    sh = scene.sh.numpy().astype("<f4")
    cols += [sh[:, 0, 0], sh[:, 0, 1], sh[:, 0, 2]]
    if rest:
        # channel-major: all higher-order coefficients of R, then G, then B
        fr = sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * rest)
        cols += [fr[:, i] for i in range(3 * rest)]
    cols += [scene.opacity_logits.numpy().astype("<f4")]
    ls = scene.log_scales.numpy().astype("<f4")
    cols += [ls[:, 0], ls[:, 1], ls[:, 2]]
    rot = scene.rotations.numpy().astype("<f4")
    cols += [rot[:, 0], rot[:, 1], rot[:, 2], rot[:, 3]]
    m = scene.m.numpy().astype("<f4")
    cols += [m[:, 0], m[:, 1]]

    dtype = np.dtype([(name, "<f4") for name in names] + [("created_at", "<i4")])
    rows = np.empty(n, dtype=dtype)
    for name, col in zip(names, cols):
        rows[name] = col
    rows["created_at"] = scene.created_at.numpy().astype("<i4")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())

    sidecar = {"poses": [pose.matrix.reshape(-1).tolist() for pose in trajectory]}
    if intrinsics is not None:
        sidecar["intrinsics"] = intrinsics.as_dict()
    with open(trajectory_sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=2)


def _parse_ply_header(f) -> Tuple[int, List[Tuple[str, str]]]:
    line = f.readline().strip()
    if line != b"ply":
        raise ValueError("malformed PLY: missing magic")
    if f.readline().strip() != b"format binary_little_endian 1.0":
        raise ValueError("malformed PLY: expected binary little-endian 1.0")
    count = None
    props: List[Tuple[str, str]] = []
    while True:
        line = f.readline()
        if not line:
            raise ValueError("malformed PLY: unterminated header")
        line = line.strip()
        if line == b"end_header":
            break
        parts = line.decode("ascii").split()
        if parts[0] == "comment":
            continue
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise ValueError(f"property mismatch: unexpected element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            if len(parts) != 3:
                raise ValueError("malformed PLY: bad property line")
            props.append((parts[2], parts[1]))
    if count is None:
        raise ValueError("malformed PLY: no vertex element")
    return count, props


def load_scene(path, dtype: torch.dtype = torch.float64) -> Tuple[GaussianScene, List[PoseSE3]]:
    """Load a scene PLY and its trajectory sidecar.

    Files without the identity properties (stock splat exports) load with
    identity logits zeroed and a warning. A missing sidecar yields an empty
    trajectory.
    """
    path = Path(path)
    with open(path, "rb") as f:
        count, props = _parse_ply_header(f)
        type_map = {"float": "<f4", "int": "<i4"}
        for name, typ in props:
            if typ not in type_map:
                raise ValueError(f"property mismatch: unsupported type {typ} for {name}")
        rec = np.dtype([(name, type_map[typ]) for name, typ in props])
        payload = f.read(count * rec.itemsize)
    if len(payload) != count * rec.itemsize:
        raise ValueError("malformed PLY: truncated payload")
    rows = np.frombuffer(payload, dtype=rec)

    have = [name for name, _ in props]
    rest_props = sorted(
        (name for name in have if name.startswith("f_rest_")),
        key=lambda s: int(s.split("_")[-1]),
    )
    rest = len(rest_props) // 3
    if len(rest_props) % 3 != 0:
        raise ValueError("property mismatch: f_rest count not divisible by 3")
    k = rest + 1
    if k not in (1, 4, 9, 16):
        raise ValueError(f"property mismatch: {rest} f_rest coefficients is not a full SH degree")
    expected = set(_ply_property_names(rest))
    missing = expected - set(have)
    if missing:
        raise ValueError(f"property mismatch: missing {sorted(missing)}")
    extra = set(have) - expected - set(_KEA_PROPS) - {"created_at"}
    if extra:
        raise ValueError(f"property mismatch: unexpected {sorted(extra)}")

    def col(name):
        return np.asarray(rows[name], dtype=np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    opacity = col("opacity")
    sh = np.zeros((count, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    for c in range(3):
        for j in range(rest):
            sh[:, 1 + j, c] = col(f"f_rest_{c * rest + j}")
    if all(p in have for p in _KEA_PROPS):
        m = np.stack([col("kea_0"), col("kea_1")], axis=1)
    else:
        warnings.warn("PLY lacks identity properties; loading with zeroed identity logits")
        m = np.zeros((count, 2))
    if "created_at" in have:
        created = np.asarray(rows["created_at"], dtype=np.int64)
    else:
        created = np.zeros(count, dtype=np.int64)

    scene = GaussianScene.from_arrays(
        means=means, log_scales=log_scales, rotations=rotations,
        opacity_logits=opacity, sh=sh, m=m, created_at=created, dtype=dtype,
    )
    trajectory: List[PoseSE3] = []
    sidecar = trajectory_sidecar_path(path)
    if sidecar.exists():
        trajectory, _ = load_trajectory(sidecar)
    return scene, trajectory


def load_trajectory(path) -> Tuple[List[PoseSE3], Optional[CameraIntrinsics]]:
    """Read a trajectory sidecar: (camera-to-world poses, intrinsics or None)."""
    with open(path) as f:
        data = json.load(f)
    poses = [PoseSE3.from_matrix(np.array(p, dtype=np.float64).reshape(4, 4))
             for p in data["poses"]]
    intr = None
    if "intrinsics" in data:
        intr = CameraIntrinsics(**data["intrinsics"])
    return poses, intr


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 1e-10:
        return 100.0
    return min(100.0, 10.0 * np.log10(1.0 / mse))


def e_psnr(renders_edited: Sequence[np.ndarray], renders_reference: Sequence[np.ndarray]) -> float:
    """Mean PSNR over corresponding view pairs."""
    if len(renders_edited) == 0:
        raise ValueError("empty view list")
    if len(renders_edited) != len(renders_reference):
        raise ValueError("view lists differ in length")
    return float(np.mean([psnr(a, b) for a, b in zip(renders_edited, renders_reference)]))


def ssim_value(a: np.ndarray, b: np.ndarray) -> float:
    ta = torch.as_tensor(a, dtype=torch.float64)
    tb = torch.as_tensor(b, dtype=torch.float64)
    return float(losses.ssim(ta, tb))


def compute_metrics(scene: GaussianScene, trajectory: Sequence[PoseSE3], dataset: Dataset,
                    reference: Optional[GaussianScene] = None) -> dict:
    """Render every dataset view at its trajectory pose and score it.

    Returns per-view PSNR/SSIM plus their means; when a reference scene is
    given, adds the mean pairwise PSNR between the two scenes' renders.
    """
    from . import rasterizer

    if len(trajectory) < len(dataset.frames):
        raise ValueError(
            f"trajectory has {len(trajectory)} poses for {len(dataset.frames)} frames"
        )
    views = []
    renders = []
    ref_renders = []
    for frame, pose in zip(dataset.frames, trajectory):
        out = rasterizer.render(scene, pose.inverse(), dataset.intrinsics)
        renders.append(out.color)
        views.append({
            "index": frame.index,
            "psnr": psnr(out.color, frame.image),
            "ssim": ssim_value(out.color, frame.image),
        })
        if reference is not None:
            ref_out = rasterizer.render(reference, pose.inverse(), dataset.intrinsics)
            ref_renders.append(ref_out.color)
    metrics = {
        "views": views,
        "mean_psnr": float(np.mean([v["psnr"] for v in views])),
        "mean_ssim": float(np.mean([v["ssim"] for v in views])),
    }
    if reference is not None:
        metrics["e_psnr"] = e_psnr(renders, ref_renders)
    return metrics


# ---------------------------------------------------------------------------
# loss history and configuration files


LOSS_CSV_COLUMNS = ["step", "frame", "rgb", "bce", "jsd", "ipc", "pc", "total"]


def write_loss_history(path, history: Sequence[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_COLUMNS)
        for row in history:
            writer.writerow([row.get(c, "") for c in LOSS_CSV_COLUMNS])


@dataclass
class RunConfig:
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    pose: PoseEstimateConfig = field(default_factory=PoseEstimateConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)


_CONFIG_SECTIONS = {
    "expansion": ExpansionConfig,
    "loss_weights": LossWeights,
    "pose": PoseEstimateConfig,
    "blend": BlendConfig,
}


def load_config(path) -> RunConfig:
    """Parse a TOML run configuration.

    Sections mirror the config dataclasses field for field; every key is
    optional and unknown sections or keys raise ValueError.
    """
    with open(path, "rb") as f:
        data = tomllib.load(f)
    unknown = set(data) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for section, cls in _CONFIG_SECTIONS.items():
        payload = data.get(section, {})
        if not isinstance(payload, dict):
            raise ValueError(f"config section [{section}] must be a table")
        allowed = {f.name for f in dataclass_fields(cls)}
        bad = set(payload) - allowed
        if bad:
            raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")
        built[section] = cls(**payload)
    return RunConfig(**built)
