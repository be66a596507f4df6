"""Depth completion samples: file loading, sparse sampling and synthetic scenes.

Depth maps on disk are 16-bit grayscale PNGs holding ``meters * 256``, with 0
marking a missing measurement.  In memory, depths are float32 meters with 0
for invalid pixels.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

DEPTH_SCALE = 256.0
KITTI_CROP = (256, 1216)
NYU_CROP = (228, 304)
NYU_PAD = (256, 320)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class SparseDepthSample:
    """Guidance image (3, H, W) in [0, 1], sparse input and ground truth (H, W) in meters."""

    image: np.ndarray
    sparse: np.ndarray
    gt: np.ndarray
    max_depth: float = 100.0

    @property
    def sparse_mask(self):
        return self.sparse > 0

    @property
    def gt_mask(self):
        return self.gt > 0

    def validate(self, training=False):
        h, w = self.gt.shape
        if self.image.shape[1:] != (h, w) or self.sparse.shape != (h, w):
            raise DataError(f"image {self.image.shape}, sparse {self.sparse.shape} and gt {self.gt.shape} disagree")
        for name, d in (("sparse", self.sparse), ("gt", self.gt)):
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise DataError(f"{name} depth must be finite and non-negative")
            if np.any(d >= self.max_depth):
                raise DataError(f"{name} depth exceeds max_depth={self.max_depth}")
        if training and not self.gt_mask.any():
            raise DataError("training sample has no valid ground-truth pixels")
        return self


# -- image / depth files -----------------------------------------------------

def read_depth_png(path):
    """Raw uint16 values of a single-channel 16-bit PNG."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise DataError(f"{path}: expected a single-channel 16-bit PNG, got mode {im.mode}")
        return np.array(im, dtype=np.uint16)


def depth_from_raw(raw):
    return raw.astype(np.float32) / np.float32(DEPTH_SCALE)


def depth_to_raw(depth):
    raw = np.rint(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE)
    if raw.min() < 0 or raw.max() > 65535:
        raise DataError("depth outside the representable 16-bit range [0, 255.996] m")
    return raw.astype(np.uint16)


def write_depth_png(path, depth):
    """Write meters as a 16-bit PNG (meters * 256, 0 = invalid)."""
    Image.fromarray(depth_to_raw(depth)).save(path, format="PNG")


def write_raw_png(path, raw):
    Image.fromarray(np.asarray(raw, dtype=np.uint16)).save(path, format="PNG")


def read_rgb(path):
    """8-bit RGB (PNG or PPM) as float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.array(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_rgb(path, image):
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def bottom_crop(arr, height, width):
    """Keep the bottom ``height`` rows and the horizontally centred ``width`` columns."""
    h, w = arr.shape[-2:]
    if h < height or w < width:
        raise DataError(f"cannot crop {h}x{w} to {height}x{width}")
    left = (w - width) // 2
    return arr[..., h - height:, left:left + width]


def load_kitti_sample(image_path, sparse_png_path, gt_png_path, crop=None, max_depth=100.0):
    """Load an image / sparse / ground-truth triple in the KITTI depth layout.

    ``crop`` (height, width), e.g. ``KITTI_CROP``, applies a bottom-anchored crop.
    """
    for p in (image_path, sparse_png_path, gt_png_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    image = read_rgb(image_path)
    sparse = depth_from_raw(read_depth_png(sparse_png_path))
    gt = depth_from_raw(read_depth_png(gt_png_path))
    if image.shape[1:] != sparse.shape or sparse.shape != gt.shape:
        raise DataError(
            f"size mismatch: image {image.shape[1:]}, sparse {sparse.shape}, gt {gt.shape}")
    if crop is not None:
        image, sparse, gt = (bottom_crop(a, *crop) for a in (image, sparse, gt))
    return SparseDepthSample(np.ascontiguousarray(image), np.ascontiguousarray(sparse),
                             np.ascontiguousarray(gt), max_depth=max_depth)


def nyu_preprocess(image, depth):
    """Half-resolution, centre crop to 228x304, zero-pad to 256x320.

    ``image`` is (3, H, W) and is 2x2 box-averaged; ``depth`` (H, W) is
    subsampled so no invalid/valid mixing occurs.
    """
    h, w = depth.shape
    h2, w2 = h // 2, w // 2
    img = image[:, :2 * h2, :2 * w2].reshape(image.shape[0], h2, 2, w2, 2).mean(axis=(2, 4))
    dep = depth[:2 * h2:2, :2 * w2:2]
    ch, cw = NYU_CROP
    if h2 < ch or w2 < cw:
        raise DataError(f"half-resolution size {h2}x{w2} smaller than crop {ch}x{cw}")
    top, left = (h2 - ch) // 2, (w2 - cw) // 2
    img = img[:, top:top + ch, left:left + cw]
    dep = dep[top:top + ch, left:left + cw]
    ph, pw = NYU_PAD
    pt, pl = (ph - ch) // 2, (pw - cw) // 2
    img = np.pad(img, ((0, 0), (pt, ph - ch - pt), (pl, pw - cw - pl)))
    dep = np.pad(dep, ((pt, ph - ch - pt), (pl, pw - cw - pl)))
    return img.astype(np.float32), dep.astype(np.float32)


# -- sparse sampling ---------------------------------------------------------

def _choose(valid_idx, count, seed):
    rng = np.random.default_rng(seed)
    picked = rng.choice(valid_idx, size=count, replace=False)
    return np.sort(picked)


def sample_by_density(sample, ratio, seed):
    """Keep round(ratio * |valid|) of the sparse points, uniformly without replacement."""
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"density ratio must lie in (0, 1], got {ratio}")
    flat = sample.sparse.ravel()
    valid_idx = np.flatnonzero(flat > 0)
    if valid_idx.size == 0:
        raise DataError("sparse input has no valid points")
    count = int(np.floor(ratio * valid_idx.size + 0.5))
    keep = _choose(valid_idx, count, seed)
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return replace(sample, sparse=out.reshape(sample.sparse.shape))


def sample_fixed_count(dense_gt, n, seed):
    """Sparse map with exactly ``n`` pixels drawn uniformly from the valid ground truth."""
    flat = np.asarray(dense_gt).ravel()
    valid_idx = np.flatnonzero(flat > 0)
    if n < 0 or n > valid_idx.size:
        raise DataError(f"cannot draw {n} samples from {valid_idx.size} valid pixels")
    keep = _choose(valid_idx, n, seed)
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(np.shape(dense_gt))


def mask_transfer_sample(dense_gt, mask_source):
    """Copy ``dense_gt`` at exactly the pixels where ``mask_source`` is valid."""
    dense_gt = np.asarray(dense_gt)
    mask_source = np.asarray(mask_source)
    if dense_gt.shape != mask_source.shape:
        raise DataError(f"shape mismatch: dense {dense_gt.shape} vs mask source {mask_source.shape}")
    return np.where(mask_source > 0, dense_gt, 0).astype(dense_gt.dtype)


# -- manifests ---------------------------------------------------------------

def read_manifest(path):
    """List of (image, sparse, gt) paths; relative paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated paths, got {len(parts)}")
            records.append(tuple(p if os.path.isabs(p) else os.path.join(base, p) for p in parts))
    return records


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write("\t".join(rec) + "\n")


def load_manifest_samples(path, crop=None, max_depth=100.0):
    return [load_kitti_sample(*rec, crop=crop, max_depth=max_depth) for rec in read_manifest(path)]


# -- synthetic scenes --------------------------------------------------------

@dataclass
class Camera:
    """Pinhole intrinsics normalised by image size: fx, cx by width; fy, cy by height."""

    fx: float = 0.7
    fy: float = 1.4
    cx: float = 0.5
    cy: float = 0.5

    def pixels(self, height, width):
        return self.fx * width, self.fy * height, self.cx * width, self.cy * height


@dataclass
class Primitive:
    kind: str  # "plane" | "sphere" | "box"
    params: tuple  # plane: nx,ny,nz,c (points with n.p = c); sphere: x,y,z,r; box: x0,y0,z0,x1,y1,z1
    albedo: tuple = (0.7, 0.7, 0.7)
    checker: float = 0.0  # period in meters of a multiplicative checker texture (0 = none)


@dataclass
class SceneSpec:
    seed: int = 0
    primitives: list = field(default_factory=list)
    camera: Camera = field(default_factory=Camera)
    light: tuple = (0.3, 1.0, 0.5)  # direction the light travels, camera frame (y down)
    ambient: float = 0.25

    def to_text(self):
        lines = [f"seed={self.seed}",
                 f"camera={self.camera.fx!r},{self.camera.fy!r},{self.camera.cx!r},{self.camera.cy!r}",
                 "light=" + ",".join(repr(float(v)) for v in self.light),
                 f"ambient={self.ambient!r}"]
        for p in self.primitives:
            vals = list(p.params) + list(p.albedo) + [p.checker]
            lines.append(f"{p.kind}=" + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        spec = cls()
        nparams = {"plane": 4, "sphere": 4, "box": 6}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"scene spec line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "seed":
                spec.seed = int(value)
                continue
            nums = tuple(float(v) for v in value.split(","))
            if key == "camera":
                spec.camera = Camera(*nums)
            elif key == "light":
                spec.light = nums
            elif key == "ambient":
                spec.ambient = nums[0]
            elif key in nparams:
                k = nparams[key]
                if len(nums) not in (k + 3, k + 4):
                    raise DataError(f"scene spec line {lineno}: {key} needs {k} geometry values + rgb [+ checker]")
                spec.primitives.append(Primitive(key, nums[:k], nums[k:k + 3], nums[k + 3] if len(nums) > k + 3 else 0.0))
            else:
                raise DataError(f"scene spec line {lineno}: unknown key {key!r}")
        return spec


def _rays(camera, height, width):
    fx, fy, cx, cy = camera.pixels(height, width)
    if not (fx > 0 and fy > 0 and height > 0 and width > 0):
        raise DataError(f"degenerate camera: fx={fx}, fy={fy}, resolution {height}x{width}")
    u = (np.arange(width) + 0.5 - cx) / fx
    v = (np.arange(height) + 0.5 - cy) / fy
    d = np.empty((height, width, 3))
    d[..., 0] = u[None, :]
    d[..., 1] = v[:, None]
    d[..., 2] = 1.0
    return d


def _intersect(prim, d):
    """Ray parameter t (z-depth, since d_z = 1) and unit normals; inf where missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "plane":
            n = np.asarray(prim.params[:3], dtype=float)
            n = n / np.linalg.norm(n)
            c = prim.params[3] / np.linalg.norm(prim.params[:3])
            denom = d @ n
            t = c / denom
            t = np.where((t > 0) & np.isfinite(t), t, np.inf)
            normal = np.broadcast_to(np.where(denom[..., None] > 0, -n, n), d.shape)
            return t, normal
        if prim.kind == "sphere":
            center = np.asarray(prim.params[:3], dtype=float)
            r = prim.params[3]
            a = np.einsum("hwc,hwc->hw", d, d)
            b = -2.0 * (d @ center)
            c = center @ center - r * r
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0))
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
            t = np.where(t0 > 0, t0, t1)
            t = np.where((disc >= 0) & (t > 0), t, np.inf)
            hit = d * np.where(np.isfinite(t), t, 0)[..., None]
            normal = (hit - center) / r
            return t, normal
        if prim.kind == "box":
            lo = np.asarray(prim.params[:3], dtype=float)
            hi = np.asarray(prim.params[3:6], dtype=float)
            t1 = lo / d
            t2 = hi / d
            tmin = np.fmin(t1, t2)
            tmax = np.fmax(t1, t2)
            tnear = tmin.max(axis=-1)
            tfar = tmax.min(axis=-1)
            t = np.where((tnear <= tfar) & (tnear > 0), tnear, np.inf)
            axis = tmin.argmax(axis=-1)
            normal = np.zeros(d.shape)
            sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
            np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
            return t, normal
    raise DataError(f"unknown primitive kind {prim.kind!r}")


def generate_scene(spec, resolution):
    """Ray-cast a scene: returns (image (3, H, W) float32 in [0, 1], depth (H, W) float32 meters).

    Depth is the z coordinate of the first hit.  Shading is Lambertian with an
    ambient floor; a primitive's ``checker`` period modulates its albedo.
    """
    height, width = resolution
    d = _rays(spec.camera, height, width)
    depth = np.full((height, width), np.inf)
    normal = np.zeros((height, width, 3))
    albedo = np.zeros((height, width, 3))
    for prim in spec.primitives:
        t, n = _intersect(prim, d)
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal = np.where(closer[..., None], n, normal)
        alb = np.broadcast_to(np.asarray(prim.albedo, dtype=float), d.shape)
        if prim.checker > 0:
            hit = d * np.where(np.isfinite(t), t, 0)[..., None]
            cells = np.floor(hit[..., 0] / prim.checker) + np.floor(hit[..., 2] / prim.checker)
            alb = alb * np.where(cells % 2 == 0, 1.0, 0.75)[..., None]
        albedo = np.where(closer[..., None], alb, albedo)
    if not np.all(np.isfinite(depth)):
        raise DataError("scene leaves some pixels without a surface")
    light = -np.asarray(spec.light, dtype=float)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normal @ light, 0.0, 1.0)
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    image = np.clip(albedo * shade[..., None], 0.0, 1.0)
    return image.transpose(2, 0, 1).astype(np.float32), depth.astype(np.float32)


def random_scene_spec(seed, far=(25.0, 45.0)):
    """A road-like scene: textured ground, a back wall, and a handful of boxes and spheres."""
    rng = np.random.default_rng(seed)
    cam_height = rng.uniform(1.4, 1.8)
    prims = [
        Primitive("plane", (0.0, 1.0, 0.0, cam_height), tuple(rng.uniform(0.35, 0.6, 3)), checker=rng.uniform(1.5, 4.0)),
        Primitive("plane", (0.0, 0.0, 1.0, rng.uniform(*far)), tuple(rng.uniform(0.4, 0.9, 3))),
    ]
    for _ in range(rng.integers(3, 8)):
        x = rng.uniform(-9, 9)
        z = rng.uniform(4.0, 24.0)
        color = tuple(rng.uniform(0.1, 1.0, 3))
        if rng.random() < 0.6:
            sx, sy, sz = rng.uniform(0.8, 3.0), rng.uniform(0.8, 3.5), rng.uniform(0.8, 3.0)
            prims.append(Primitive("box", (x - sx / 2, cam_height - sy, z - sz / 2, x + sx / 2, cam_height, z + sz / 2), color))
        else:
            r = rng.uniform(0.5, 1.8)
            prims.append(Primitive("sphere", (x, cam_height - r, z, r), color))
    light = (rng.uniform(-0.6, 0.6), 1.0, rng.uniform(0.2, 0.8))
    return SceneSpec(seed=int(seed), primitives=prims, camera=Camera(), light=light,
                     ambient=float(rng.uniform(0.15, 0.35)))


def stream_seed(seed, stream, index=0):
    """Independent integer seed for a named random sub-stream."""
    tag = int.from_bytes(stream.encode("utf-8"), "little") % (2 ** 32)
    return int(np.random.SeedSequence([int(seed), tag, int(index)]).generate_state(1)[0])


@dataclass
class DepthDataset:
    """Stacked arrays: image (N, 3, H, W), sparse (N, 1, H, W), gt (N, 1, H, W)."""

    image: np.ndarray
    sparse: np.ndarray
    gt: np.ndarray

    def __len__(self):
        return self.image.shape[0]

    def batch(self, idx):
        return self.image[idx], self.sparse[idx], self.gt[idx]

    @classmethod
    def from_samples(cls, samples):
        return cls(np.stack([s.image for s in samples]).astype(np.float32),
                   np.stack([s.sparse for s in samples])[:, None].astype(np.float32),
                   np.stack([s.gt for s in samples])[:, None].astype(np.float32))


def synthetic_sample(seed, index, height=64, width=128, sparse_count=400, split="train"):
    spec = random_scene_spec(stream_seed(seed, f"scene/{split}", index))
    image, depth = generate_scene(spec, (height, width))
    sparse = sample_fixed_count(depth, sparse_count, stream_seed(seed, f"sparse/{split}", index))
    return SparseDepthSample(image, sparse, depth)


def synthetic_dataset(count, seed, height=64, width=128, sparse_count=400, split="train"):
    samples = [synthetic_sample(seed, i, height, width, sparse_count, split) for i in range(count)]
    return DepthDataset.from_samples(samples)
