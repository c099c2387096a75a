"""Dataset construction: paired coarse/fine flood patches plus the DEM.

A dataset is one synthetic catchment: a fractal DEM, a handful of rain
events simulated at fine resolution and independently at coarse resolution
(on the block-averaged DEM, so the coarse maps carry genuine solver error,
not just blur), cut into overlapping patches and written as FMAP rasters
with a JSON manifest. The last event is held out as the test split.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import fmap
from .errors import ContractError, DimensionError
from .terrain import Dem, RainEvent, coarsen, coarsen_dem, generate_dem, simulate_flood

MANIFEST_NAME = "manifest.json"
_UPSCALES = (2, 4, 8)


@dataclass
class Normalization:
    """Affine map between depths in cm and the model's value range."""

    max_depth: float
    out_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.max_depth <= 0:
            raise ContractError("max_depth must be positive")
        lo, hi = self.out_range
        if not lo < hi:
            raise ContractError("normalization range must be increasing")

    def normalize(self, depths_cm):
        lo, hi = self.out_range
        unit = np.clip(np.asarray(depths_cm, dtype=np.float32) / self.max_depth, 0.0, 1.0)
        return (lo + (hi - lo) * unit).astype(np.float32)

    def denormalize(self, values):
        lo, hi = self.out_range
        unit = np.clip((np.asarray(values, dtype=np.float32) - lo) / (hi - lo), 0.0, 1.0)
        return (unit * self.max_depth).astype(np.float32)

    def to_dict(self):
        return {"max_depth": self.max_depth, "out_range": list(self.out_range)}

    @classmethod
    def from_dict(cls, d):
        return cls(max_depth=d["max_depth"], out_range=tuple(d["out_range"]))


@dataclass
class DemScaler:
    """Min/max map of elevations into [-1, 1] for conditioning."""

    dem_min: float
    dem_max: float

    def normalize(self, elevations_m):
        span = max(self.dem_max - self.dem_min, 1e-12)
        unit = (np.asarray(elevations_m, dtype=np.float32) - self.dem_min) / span
        return (2.0 * np.clip(unit, 0.0, 1.0) - 1.0).astype(np.float32)


def upsample_bilinear(grid, factor):
    """Bilinear upsampling by an integer factor, half-pixel aligned."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError("bilinear upsampling expects a 2-D grid")
    if factor < 1 or int(factor) != factor:
        raise ContractError("upsampling factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return grid.copy()
    h, w = grid.shape
    coords = [(np.arange(n * factor) + 0.5) / factor - 0.5 for n in (h, w)]
    out_r, out_c = coords
    r0 = np.clip(np.floor(out_r).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(out_c).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(out_r - r0, 0.0, 1.0)[:, None]
    fc = np.clip(out_c - c0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - fc) + grid[np.ix_(r0, c1)] * fc
    bottom = grid[np.ix_(r1, c0)] * (1 - fc) + grid[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bottom * fr


def patch_positions(domain, patch, stride):
    if (domain - patch) % stride:
        raise ContractError(
            f"patch grid does not tile the domain: ({domain}-{patch}) % {stride} != 0"
        )
    return list(range(0, domain - patch + 1, stride))


@dataclass
class DatasetManifest:
    """Index of a generated dataset; serialized as manifest.json."""

    seed: int
    domain: int
    patch: int
    stride: int
    upscale: int
    cell_size: float
    n_events: int
    steps_per_event: int
    max_depth: float
    dem_min: float
    dem_max: float
    cg_fg_mse: float
    samples: list = field(default_factory=list)

    @property
    def coarse_cell_size(self):
        return self.cell_size * self.upscale

    def split(self, name):
        return [s for s in self.samples if s["split"] == name]

    def counts(self):
        return {
            "train": sum(1 for s in self.samples if s["split"] == "train"),
            "test": sum(1 for s in self.samples if s["split"] == "test"),
        }

    def normalization(self, out_range=(0.0, 1.0)):
        return Normalization(max_depth=self.max_depth, out_range=out_range)

    def dem_scaler(self):
        return DemScaler(dem_min=self.dem_min, dem_max=self.dem_max)

    def to_dict(self):
        return {
            "version": 1,
            "seed": self.seed,
            "domain": self.domain,
            "patch": self.patch,
            "stride": self.stride,
            "upscale": self.upscale,
            "cell_size": self.cell_size,
            "coarse_cell_size": self.coarse_cell_size,
            "n_events": self.n_events,
            "steps_per_event": self.steps_per_event,
            "max_depth": self.max_depth,
            "dem_min": self.dem_min,
            "dem_max": self.dem_max,
            "cg_fg_mse": self.cg_fg_mse,
            "counts": self.counts(),
            "samples": self.samples,
        }

    def save(self, directory):
        path = os.path.join(directory, MANIFEST_NAME)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, directory_or_path):
        path = directory_or_path
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path) as fh:
            doc = json.load(fh)
        return cls(
            seed=doc["seed"],
            domain=doc["domain"],
            patch=doc["patch"],
            stride=doc["stride"],
            upscale=doc["upscale"],
            cell_size=doc["cell_size"],
            n_events=doc["n_events"],
            steps_per_event=doc["steps_per_event"],
            max_depth=doc["max_depth"],
            dem_min=doc["dem_min"],
            dem_max=doc["dem_max"],
            cg_fg_mse=doc["cg_fg_mse"],
            samples=doc["samples"],
        )


def random_rain_event(rng, steps, min_pulse_steps=4, max_pulse_steps=10,
                      min_rate=1.0, max_rate=3.0):
    """Rain for the first few steps, then dry steps that let water settle."""
    wet = int(rng.integers(min_pulse_steps, max_pulse_steps + 1))
    wet = min(wet, steps)
    rate = rng.uniform(min_rate, max_rate)
    per_step = np.zeros(steps)
    per_step[:wet] = rate
    return RainEvent(per_step)


def build_dataset(seed, n_events, patch, upscale, out_dir, domain=256,
                  steps_per_event=20, relax_iters=30, roughness=0.55,
                  relief=12.0, cell_size=10.0, boundary="closed",
                  dem_tilt=0.3):
    """Simulate a catchment and write paired patches plus the manifest.

    Returns the DatasetManifest. The coarse depth rasters are bilinearly
    upsampled back to fine resolution before writing, so every sample is a
    spatially aligned (fine, coarse, dem) triple at patch size.
    """
    if upscale not in _UPSCALES:
        raise ContractError(f"upscale must be one of {_UPSCALES}")
    if patch % upscale:
        raise ContractError("patch must be divisible by the upscale factor")
    if n_events < 1:
        raise ContractError("need at least one rain event")
    if domain % upscale:
        raise ContractError("domain must be divisible by the upscale factor")

    os.makedirs(out_dir, exist_ok=True)
    stride = max(patch // 2, 1)
    positions = patch_positions(domain, patch, stride)

    rng = np.random.default_rng(seed)
    dem = generate_dem(
        int(rng.integers(0, 2**31)), domain, roughness, relief,
        tilt=dem_tilt, cell_size=cell_size,
    )
    coarse_dem = coarsen_dem(dem, upscale)

    # per-patch DEM rasters are shared by every event and step
    dem_paths = {}
    for r in positions:
        for c in positions:
            rel = f"dem_r{r:04d}_c{c:04d}.fmap"
            fmap.write_elevation(
                os.path.join(out_dir, rel),
                dem.elevations[r : r + patch, c : c + patch],
                cell_size,
            )
            dem_paths[(r, c)] = rel

    samples = []
    max_depth = 0.0
    sq_err_sum = 0.0
    px_count = 0
    for event in range(n_events):
        event_rng = np.random.default_rng(np.random.SeedSequence([seed, event]))
        rain = random_rain_event(event_rng, steps_per_event)
        fine_frames = simulate_flood(dem, rain, relax_iters, boundary)
        coarse_frames = simulate_flood(coarse_dem, rain, relax_iters, boundary)
        split = "test" if event == n_events - 1 else "train"
        for step, (fine_frame, coarse_frame) in enumerate(zip(fine_frames, coarse_frames)):
            cg_up = upsample_bilinear(coarse_frame.depths, upscale)
            for r in positions:
                for c in positions:
                    fine_patch = fine_frame.depths[r : r + patch, c : c + patch]
                    cg_patch = cg_up[r : r + patch, c : c + patch]
                    base = f"e{event:02d}_s{step:03d}_r{r:04d}_c{c:04d}"
                    fine_rel = base + "_fine.fmap"
                    cg_rel = base + "_coarse.fmap"
                    fmap.write_depth(os.path.join(out_dir, fine_rel), fine_patch, cell_size)
                    fmap.write_depth(os.path.join(out_dir, cg_rel), cg_patch, cell_size)
                    samples.append(
                        {
                            "fine": fine_rel,
                            "coarse": cg_rel,
                            "dem": dem_paths[(r, c)],
                            "event": event,
                            "step": step,
                            "row": r,
                            "col": c,
                            "split": split,
                        }
                    )
                    max_depth = max(max_depth, float(fine_patch.max()))
                    sq_err_sum += float(((cg_patch - fine_patch) ** 2).sum())
                    px_count += fine_patch.size

    cg_fg_mse = sq_err_sum / px_count
    if cg_fg_mse <= 0.0:
        raise ContractError(
            "degenerate dataset: coarse and fine maps agree everywhere"
        )
    if max_depth <= 0.0:
        raise ContractError("degenerate dataset: no water anywhere")

    manifest = DatasetManifest(
        seed=seed,
        domain=domain,
        patch=patch,
        stride=stride,
        upscale=upscale,
        cell_size=cell_size,
        n_events=n_events,
        steps_per_event=steps_per_event,
        max_depth=max_depth,
        dem_min=float(dem.elevations.min()),
        dem_max=float(dem.elevations.max()),
        cg_fg_mse=cg_fg_mse,
        samples=samples,
    )
    manifest.save(out_dir)
    return manifest


class PatchSet:
    """In-memory view of a dataset split as normalized model arrays."""

    def __init__(self, directory, split="train", out_range=(0.0, 1.0)):
        self.directory = directory
        self.manifest = DatasetManifest.load(directory)
        self.records = self.manifest.split(split)
        if not self.records:
            raise ContractError(f"dataset at {directory} has no {split!r} samples")
        self.norm = self.manifest.normalization(out_range)
        self.dem_scaler = self.manifest.dem_scaler()
        patch = self.manifest.patch
        n = len(self.records)
        self.fine = np.empty((n, 1, patch, patch), np.float32)
        self.coarse = np.empty((n, 1, patch, patch), np.float32)
        self.dem = np.empty((n, 1, patch, patch), np.float32)
        self.fine_cm = np.empty((n, patch, patch), np.float32)
        self.coarse_cm = np.empty((n, patch, patch), np.float32)
        dem_cache = {}
        for i, rec in enumerate(self.records):
            _, fine_cm = fmap.read_single_channel(
                os.path.join(directory, rec["fine"]), fmap.KIND_DEPTH
            )
            _, cg_cm = fmap.read_single_channel(
                os.path.join(directory, rec["coarse"]), fmap.KIND_DEPTH
            )
            dem_rel = rec["dem"]
            if dem_rel not in dem_cache:
                _, elev = fmap.read_single_channel(
                    os.path.join(directory, dem_rel), fmap.KIND_ELEVATION
                )
                dem_cache[dem_rel] = self.dem_scaler.normalize(elev)
            self.fine_cm[i] = fine_cm
            self.coarse_cm[i] = cg_cm
            self.fine[i, 0] = self.norm.normalize(fine_cm)
            self.coarse[i, 0] = self.norm.normalize(cg_cm)
            self.dem[i, 0] = dem_cache[dem_rel]

    def __len__(self):
        return len(self.records)

    def conditioning(self, indices, zero_dem=False):
        """[N, 2, P, P]: normalized coarse map plus (optionally zeroed) DEM."""
        cg = self.coarse[indices]
        dem = np.zeros_like(cg) if zero_dem else self.dem[indices]
        return np.concatenate([cg, dem], axis=1)

    def batch(self, rng, batch_size, zero_dem=False):
        idx = rng.integers(0, len(self), size=batch_size)
        return self.fine[idx], self.conditioning(idx, zero_dem=zero_dem)
