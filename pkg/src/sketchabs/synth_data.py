"""Seeded synthetic sketch/photo corpus with partial (coarse-first) rendering.

Each object is a standard-normal latent ``z``. Its photo is ``P z``; a sketch
drawn to completion ``t`` reveals the first ``ceil(t * D_z)`` latent
coordinates in a fixed stroke order and observes ``S (z * reveal) + sigma eps``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .abstraction_mask import LEVEL_COMPLETION, Level
from .core import InvalidInputError

DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.json"
FORMAT_VERSION = 1
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class DataParams:
    n_objects: int = 100
    d_z: int = 16
    d_obs: int = 32
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 2:
            raise InvalidInputError(f"need at least 2 objects, got {self.n_objects}")
        if self.d_z < 4 or self.d_obs < 4:
            raise InvalidInputError("d_z and d_obs must be >= 4")
        if self.sigma < 0:
            raise InvalidInputError("sigma must be non-negative")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SyntheticObject:
    id: int
    z: np.ndarray
    photo_obs: np.ndarray


@dataclass
class SketchObservation:
    object_id: int
    t: float
    obs: np.ndarray

    @property
    def level(self) -> Level:
        return assign_abstraction_label(self.t)


@dataclass
class SyntheticDataset:
    params: DataParams
    photo_proj: np.ndarray      # P, (d_obs, d_z)
    sketch_proj: np.ndarray     # S, (d_obs, d_z)
    stroke_order: np.ndarray    # latent coordinates, coarse first
    objects: list[SyntheticObject] = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return int(round(TRAIN_FRACTION * len(self.objects)))

    @property
    def train(self) -> list[SyntheticObject]:
        return self.objects[:self.n_train]

    @property
    def test(self) -> list[SyntheticObject]:
        return self.objects[self.n_train:]

    def latents(self, objs):
        return np.stack([o.z for o in objs])

    def photos(self, objs):
        return np.stack([o.photo_obs for o in objs])

    def render(self, obj, t, noise_seed):
        return render_partial_sketch(obj, t, noise_seed, self)

    def render_batch(self, zs, ts, noise):
        """Vectorised rendering with explicit standard-normal ``noise``."""
        masks = np.stack([reveal_mask(t, self.stroke_order) for t in ts])
        return (zs * masks) @ self.sketch_proj.T + self.params.sigma * noise

    def eval_sketches(self, objs, t):
        """Deterministic renders of ``objs`` at completion ``t``."""
        return np.stack([self.render(o, t, sketch_noise_seed(self.params.seed, o.id, t)).obs
                         for o in objs])

    def digest(self) -> str:
        return self.params.digest()


def reveal_count(t, d_z):
    # round first so e.g. 0.7 * 10 does not ceil to 8
    return int(math.ceil(round(t * d_z, 9)))


def reveal_mask(t, stroke_order):
    """0/1 latent mask with the first ``ceil(t * D_z)`` stroke coordinates on."""
    if not 0.0 < t <= 1.0:
        raise InvalidInputError(f"completion t must lie in (0, 1], got {t}")
    stroke_order = np.asarray(stroke_order)
    mask = np.zeros(len(stroke_order))
    mask[stroke_order[:reveal_count(t, len(stroke_order))]] = 1.0
    return mask


def sketch_noise_seed(base_seed, object_id, t):
    ss = np.random.SeedSequence([int(base_seed), int(object_id), int(round(t * 1e6)), 7])
    return int(ss.generate_state(1)[0])


def render_partial_sketch(obj, t, noise_seed, dataset):
    """Render ``obj`` at completion ``t`` with noise drawn from ``noise_seed``."""
    mask = reveal_mask(t, dataset.stroke_order)
    eps = np.random.default_rng(noise_seed).standard_normal(dataset.params.d_obs)
    obs = dataset.sketch_proj @ (obj.z * mask) + dataset.params.sigma * eps
    return SketchObservation(obj.id, float(t), obs)


def assign_abstraction_label(t) -> Level:
    """Nearest of the 30/60/100% completion anchors (cuts at 0.45 and 0.80)."""
    if t < 0.45:
        return Level.COARSE
    if t < 0.80:
        return Level.MID
    return Level.FINE


def generate_dataset(n_objects=100, d_z=16, d_obs=32, sigma=0.1, seed=0) -> SyntheticDataset:
    params = DataParams(n_objects, d_z, d_obs, sigma, seed)
    rng = np.random.default_rng(seed)
    # per-coordinate energy scales, shuffled so stroke order is non-trivial
    scales = rng.permutation(np.linspace(1.5, 0.5, d_z))
    photo_proj = rng.normal(0.0, 1.0 / np.sqrt(d_z), (d_obs, d_z)) * scales
    sketch_proj = rng.normal(0.0, 1.0 / np.sqrt(d_z), (d_obs, d_z)) * scales
    energy = np.sum(photo_proj ** 2, axis=0)
    stroke_order = np.argsort(-energy, kind="stable")
    zs = rng.standard_normal((n_objects, d_z))
    objects = [SyntheticObject(i, zs[i], photo_proj @ zs[i]) for i in range(n_objects)]
    return SyntheticDataset(params, photo_proj, sketch_proj, stroke_order, objects)


def _floats(a):
    return [float(x) for x in np.ravel(a)]


def write_dataset(dataset: SyntheticDataset, out_dir) -> dict:
    """Write the JSON-lines dataset plus a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = dataset.params
    lines = [json.dumps({
        "kind": "header", "version": FORMAT_VERSION, "params": asdict(p),
        "photo_proj": _floats(dataset.photo_proj),
        "sketch_proj": _floats(dataset.sketch_proj),
        "stroke_order": [int(i) for i in dataset.stroke_order],
    }, sort_keys=True)]
    n_train = dataset.n_train
    for obj in dataset.objects:
        lines.append(json.dumps({
            "kind": "object", "id": obj.id,
            "split": "train" if obj.id < n_train else "test",
            "z": _floats(obj.z), "photo_obs": _floats(obj.photo_obs),
        }, sort_keys=True))
    for obj in dataset.test:
        for level, t in LEVEL_COMPLETION.items():
            sk = dataset.render(obj, t, sketch_noise_seed(p.seed, obj.id, t))
            lines.append(json.dumps({
                "kind": "sketch", "id": obj.id, "t": t, "level": level.name.lower(),
                "obs": _floats(sk.obs),
            }, sort_keys=True))
    body = ("\n".join(lines) + "\n").encode()
    path = out / DATASET_FILE
    try:
        path.write_bytes(body)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    manifest = {
        "version": FORMAT_VERSION,
        "data_digest": p.digest(),
        "params": asdict(p),
        "n_train": n_train,
        "n_test": len(dataset.objects) - n_train,
        "file_sha256": hashlib.sha256(body).hexdigest(),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_FILE
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc


def load_dataset(data_dir) -> SyntheticDataset:
    manifest = read_manifest(data_dir)
    path = Path(data_dir) / DATASET_FILE
    body = path.read_bytes()
    if hashlib.sha256(body).hexdigest() != manifest["file_sha256"]:
        raise InvalidInputError(f"{path} does not match its manifest checksum")
    records = [json.loads(line) for line in body.decode().splitlines() if line]
    header = records[0]
    if header.get("kind") != "header" or header.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported dataset format")
    params = DataParams(**header["params"])
    shape = (params.d_obs, params.d_z)
    objects = [SyntheticObject(r["id"], np.array(r["z"]), np.array(r["photo_obs"]))
               for r in records[1:] if r["kind"] == "object"]
    return SyntheticDataset(
        params,
        np.array(header["photo_proj"]).reshape(shape),
        np.array(header["sketch_proj"]).reshape(shape),
        np.array(header["stroke_order"], dtype=int),
        objects,
    )
