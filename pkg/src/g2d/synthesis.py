"""Procedural identities, face renderings and masked-face triplets.

Faces are drawn analytically at 32 x 32 from 12 identity parameters. A mask
template is aligned to three facial keypoints (nose bridge, left jaw, right
jaw) with a least-squares affine map, warped bilinearly and composited. Every
item draws its randomness from a seed derived from (master seed, identity,
view), so datasets are reproducible regardless of generation order.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from . import netpbm

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
N_PARAMS = 12
MIN_SEPARATION = 0.05
MAX_SHIFT = 3
VAL_FRACTION = 1 / 7  # train:val = 6:1
AREA_RANGE = (0.10, 0.35)
SCALE_JITTER = 0.15
TEMPLATE_SIZE = 32
# nose bridge, left jaw, right jaw in template pixel coordinates (x, y)
TEMPLATE_ANCHORS = np.array([[16.0, 6.0], [4.0, 18.0], [28.0, 18.0]])
TEMPLATE_SHAPES = ("rectangle", "trapezoid", "ellipse_wide", "ellipse_tall", "bandana")


@dataclass(frozen=True)
class IdentityParams:
    id: int
    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (N_PARAMS,) or p.min() < 0 or p.max() > 1:
            raise ValueError(f"identity params must be {N_PARAMS} values in [0, 1]")


@dataclass
class MaskTemplate:
    id: int
    alpha: np.ndarray       # H x W in [0, 1]
    color: np.ndarray       # H x W x 3
    anchors: np.ndarray = field(default_factory=lambda: TEMPLATE_ANCHORS.copy())
    shape: str = ""


@dataclass
class FaceTriplet:
    groundtruth: np.ndarray  # 3 x H x W
    mask: np.ndarray         # H x W, {0, 1}
    masked: np.ndarray       # 3 x H x W
    identity: int
    mask_template_id: int = -1
    variation_seed: int = 0


def generate_identities(n: int, seed: int) -> list[IdentityParams]:
    """Rejection-sample parameter vectors at least MIN_SEPARATION apart in L-inf."""
    if n < 1:
        raise ValueError("need at least one identity")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
    out: list[np.ndarray] = []
    while len(out) < n:
        cand = rng.random(N_PARAMS)
        if all(np.max(np.abs(cand - p)) >= MIN_SEPARATION for p in out):
            out.append(cand)
    return [IdentityParams(i, p) for i, p in enumerate(out)]


# -- face rendering ---------------------------------------------------------

def _soft(sd: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage from a signed distance (negative inside)."""
    return np.clip(0.5 - sd, 0.0, 1.0)


def _ellipse_sd(x, y, cx, cy, a, b):
    q = np.sqrt(((x - cx) / a) ** 2 + ((y - cy) / b) ** 2)
    return (q - 1.0) * min(a, b)


def _geometry(p: np.ndarray) -> dict:
    a = 7.5 + 3.0 * p[0]
    b = 10.0 + 3.0 * p[1]
    return {
        "a": a,
        "b": b,
        "skin": 0.35 + 0.55 * p[2:5],
        "eye_dx": 2.8 + 2.4 * p[5],
        "eye_r": 0.9 + 1.3 * p[6],
        "eye_dy": 2.0 + 2.5 * p[7],
        "mouth_curv": 2.0 * p[8] - 1.0,
        "hair": np.array([0.05, 0.04, 0.03]) + 0.75 * p[9] * np.array([0.9, 0.6, 0.3]),
        "bg": (0.15 + 0.7 * p[10]) * np.array([0.8, 0.9, 1.0]),
        "hairline": 1.5 + 4.5 * p[11],
    }


def face_area(identity: IdentityParams) -> float:
    """Area of the analytic face ellipse, in pixels."""
    g = _geometry(identity.params)
    return math.pi * g["a"] * g["b"]


def keypoints_for(identity: IdentityParams, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    g = _geometry(identity.params)
    cx, cy = IMAGE_SIZE / 2 - 0.5 + dx, IMAGE_SIZE / 2 - 0.5 + dy
    nose = (cx, cy - g["eye_dy"] + 2.0)
    c, s = math.cos(math.radians(62)), math.sin(math.radians(62))
    left = (cx - g["a"] * s, cy + g["b"] * c)
    right = (cx + g["a"] * s, cy + g["b"] * c)
    return np.array([nose, left, right])


def render_face(identity: IdentityParams, variation_seed: int, size: int = IMAGE_SIZE):
    """Draw one view of an identity; returns (3 x H x W image, 3 x 2 keypoints).

    The variation seed controls a sub-pixel translation of at most 2 px,
    a brightness gain within +-10% and additive Gaussian noise (sigma 0.02).
    """
    rng = np.random.default_rng(np.random.SeedSequence([variation_seed, 0xFACE]))
    dx, dy = rng.uniform(-2.0, 2.0, size=2)
    gain = rng.uniform(0.9, 1.1)
    g = _geometry(identity.params)
    scale = size / IMAGE_SIZE
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / scale
    cx, cy = IMAGE_SIZE / 2 - 0.5 + dx, IMAGE_SIZE / 2 - 0.5 + dy
    a, b = g["a"], g["b"]

    img = np.empty((3, size, size))
    img[:] = g["bg"][:, None, None]

    def paint(cover, color):
        img[:] = img * (1 - cover) + cover * np.asarray(color)[:, None, None]

    # hair: the upper cap of a slightly enlarged ellipse above the hairline
    hair_cover = _soft(_ellipse_sd(xs, ys, cx, cy, a + 1.2, b + 1.2)) * _soft(ys - (cy - b + g["hairline"]))
    face_cover = _soft(_ellipse_sd(xs, ys, cx, cy, a, b))
    paint(hair_cover, g["hair"])
    paint(face_cover * _soft(-(ys - (cy - b + g["hairline"]))), g["skin"])

    ey = cy - g["eye_dy"]
    for side in (-1, 1):
        ex = cx + side * g["eye_dx"]
        r = g["eye_r"]
        paint(_soft(_ellipse_sd(xs, ys, ex, ey, r * 1.4, r)), (0.95, 0.95, 0.95))
        paint(_soft(_ellipse_sd(xs, ys, ex, ey, r * 0.7, r * 0.7)), (0.08, 0.06, 0.05))
        brow = _soft(np.maximum(np.abs(ys - (ey - r - 1.3)) - 0.45, np.abs(xs - ex) - r * 1.6))
        paint(brow, g["hair"] * 0.8)

    nose_sd = np.maximum(np.abs(xs - cx) - 0.5, np.abs(ys - (cy + 0.8)) - 2.2)
    paint(_soft(nose_sd) * 0.5, g["skin"] * 0.7)

    my = cy + 0.55 * b
    half_w = 0.35 * a
    u = np.clip((xs - cx) / half_w, -1.0, 1.0)
    curve = my - g["mouth_curv"] * 1.5 * (1 - u ** 2)
    mouth_sd = np.maximum(np.abs(ys - curve) - 0.5, np.abs(xs - cx) - half_w)
    paint(_soft(mouth_sd), (0.55, 0.12, 0.15))

    img = img * gain + rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, keypoints_for(identity, dx, dy) * scale


# -- mask templates ----------------------------------------------------------

_TEMPLATE_COLORS = (
    (0.55, 0.75, 0.92),
    (0.93, 0.93, 0.95),
    (0.12, 0.12, 0.15),
    (0.80, 0.42, 0.52),
    (0.75, 0.15, 0.15),
)


def _shape_alpha(shape: str, xs, ys) -> np.ndarray:
    if shape == "rectangle":
        sd = np.maximum(np.abs(xs - 16) - 8.5, np.abs(ys - 15.5) - 5.5)
    elif shape == "trapezoid":
        half = 5.5 + 0.75 * (ys - 10)  # widens downwards
        sd = np.maximum(np.abs(xs - 16) - half, np.abs(ys - 15.5) - 5.5)
    elif shape == "ellipse_wide":
        sd = _ellipse_sd(xs, ys, 16, 16, 9.5, 5.5)
    elif shape == "ellipse_tall":
        sd = _ellipse_sd(xs, ys, 16, 17, 7.5, 7.0)
    elif shape == "bandana":
        # triangle pointing down plus a band across the nose
        top, tip = 9.0, 24.0
        half = 9.5 * (tip - ys) / (tip - top)
        sd = np.maximum(np.abs(xs - 16) - half, top - ys)
    else:
        raise ValueError(f"unknown template shape {shape!r}")
    return _soft(sd)


def builtin_templates(n: int = 5) -> list[MaskTemplate]:
    """Template k uses shape k mod 5; later cycles darken the color."""
    if n < 1:
        raise ValueError("need at least one template")
    ys, xs = np.mgrid[0:TEMPLATE_SIZE, 0:TEMPLATE_SIZE].astype(np.float64)
    out = []
    for k in range(n):
        shape = TEMPLATE_SHAPES[k % len(TEMPLATE_SHAPES)]
        alpha = _shape_alpha(shape, xs, ys)
        base = np.array(_TEMPLATE_COLORS[k % len(_TEMPLATE_COLORS)]) * (0.85 ** (k // 5))
        pleats = 1.0 - 0.08 * (np.sin(ys * 1.6) > 0.6)
        if shape == "bandana":
            pleats = 1.0 - 0.25 * ((np.floor(xs / 2) + np.floor(ys / 2)) % 2)
        color = base[None, None, :] * pleats[:, :, None]
        out.append(MaskTemplate(k, alpha, np.clip(color, 0, 1), TEMPLATE_ANCHORS.copy(), shape))
    return out


def affine_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 2 x 3 affine map with dst ~ A @ [src; 1]."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    for pts in (src, dst):
        (x0, y0), (x1, y1), (x2, y2) = pts[:3]
        if abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) < 1e-9:
            raise ValueError("degenerate (collinear) keypoints")
    design = np.hstack([src, np.ones((len(src), 1))])
    sol, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return sol.T


def warp_template(template: MaskTemplate, keypoints: np.ndarray, size: int = IMAGE_SIZE):
    """Warp alpha and color into image space; returns (alpha HxW, color 3xHxW)."""
    A = affine_from_points(template.anchors, keypoints)
    full = np.vstack([A, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(full)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    v = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    coords = np.stack([v, u])
    alpha = map_coordinates(template.alpha, coords, order=1, mode="grid-constant", cval=0.0)
    color = np.stack([
        map_coordinates(template.color[:, :, c], coords, order=1, mode="grid-constant", cval=0.0)
        for c in range(3)])
    return np.clip(alpha, 0.0, 1.0), color


def overlay_mask(face: np.ndarray, keypoints: np.ndarray, template: MaskTemplate,
                 rng: np.random.Generator | None = None, jitter: float = SCALE_JITTER):
    """Align a template to the keypoints and composite it onto the face.

    With an ``rng`` the target keypoints are scaled about their centroid by
    a factor drawn from 1 +- ``jitter``. Pixels outside the binarised mask
    are copied from ``face`` unchanged.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    size = face.shape[-1]
    if np.any(kp < 0) or np.any(kp > size - 1):
        raise ValueError("keypoints must lie inside the image")
    if rng is not None and jitter > 0:
        centre = kp.mean(axis=0)
        kp = centre + rng.uniform(1 - jitter, 1 + jitter) * (kp - centre)
    alpha, color = warp_template(template, kp, size)
    mask = (alpha > 0.5).astype(np.float64)
    blended = alpha * color + (1.0 - alpha) * face
    masked = np.where(mask[None] > 0, blended, face)
    return masked, mask


# -- augmentation ------------------------------------------------------------

def _shift(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate the last two axes by (dx, dy) pixels with edge replication."""
    if dx == 0 and dy == 0:
        return img.copy()
    pad = [(0, 0)] * (img.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
    p = np.pad(img, pad, mode="edge")
    h, w = img.shape[-2:]
    y0 = abs(dy) - dy
    x0 = abs(dx) - dx
    return p[..., y0:y0 + h, x0:x0 + w].copy()


def augment(triplet: FaceTriplet, op: str, dx: int = 0, dy: int = 0) -> FaceTriplet:
    """Flip horizontally (``op="flip"``) or translate (``op="translate"``)."""
    if op == "flip":
        f = lambda a: a[..., ::-1].copy()
    elif op == "translate":
        if abs(dx) > MAX_SHIFT or abs(dy) > MAX_SHIFT:
            raise ValueError(f"translation ({dx}, {dy}) exceeds {MAX_SHIFT} px")
        f = lambda a: _shift(a, int(dx), int(dy))
    else:
        raise ValueError(f"unknown augmentation {op!r}")
    return FaceTriplet(f(triplet.groundtruth), f(triplet.mask), f(triplet.masked),
                       triplet.identity, triplet.mask_template_id, triplet.variation_seed)


def augment_batch(arrays, flips: np.ndarray, shifts: np.ndarray):
    """Apply per-sample flip/translate jointly to a tuple of batched arrays.

    Equivalent to flipping then calling ``_shift`` per sample; done as one
    gather with clamped indices (clamping is edge replication).
    """
    flips = np.asarray(flips, dtype=bool)
    shifts = np.asarray(shifts, dtype=np.int64)
    h, w = arrays[0].shape[-2:]
    rows = np.clip(np.arange(h)[None, :] - shifts[:, 1:2], 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - shifts[:, 0:1], 0, w - 1)
    cols = np.where(flips[:, None], w - 1 - cols, cols)
    n = np.arange(len(flips))
    out = []
    for a in arrays:
        if a.ndim == 3:
            out.append(a[n[:, None, None], rows[:, :, None], cols[:, None, :]])
        else:
            g = a[n[:, None, None], :, rows[:, :, None], cols[:, None, :]]
            out.append(np.ascontiguousarray(g.transpose(0, 3, 1, 2)))
    return out


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory arrays for all items plus split labels."""

    faces: np.ndarray       # N x 3 x H x W
    masks: np.ndarray       # N x H x W
    masked: np.ndarray      # N x 3 x H x W
    identity: np.ndarray    # N
    view: np.ndarray        # N
    template: np.ndarray    # N
    split: np.ndarray       # N of "train" / "val"
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.identity)

    @property
    def n_identities(self) -> int:
        return int(self.identity.max()) + 1

    def subset(self, split: str) -> "Dataset":
        idx = np.flatnonzero(self.split == split)
        return self.take(idx)

    def take(self, idx) -> "Dataset":
        return Dataset(self.faces[idx], self.masks[idx], self.masked[idx], self.identity[idx],
                       self.view[idx], self.template[idx], self.split[idx],
                       [self.paths[i] for i in idx] if self.paths else [])

    def triplet(self, i: int) -> FaceTriplet:
        return FaceTriplet(self.faces[i], self.masks[i], self.masked[i], int(self.identity[i]),
                           int(self.template[i]))


def split_for_view(view: int, views_per_identity: int) -> str:
    n_val = max(1, int(round(views_per_identity * VAL_FRACTION)))
    return "val" if view >= views_per_identity - n_val else "train"


def item_seed(master_seed: int, identity: int, view: int) -> int:
    ss = np.random.SeedSequence([master_seed, identity, view])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_item(identity: IdentityParams, view: int, templates: list[MaskTemplate],
              master_seed: int, max_tries: int = 50):
    """Generate one quantised triplet; returns (triplet, area_fraction)."""
    seed = item_seed(master_seed, identity.id, view)
    rng = np.random.default_rng(seed)
    face, kp = render_face(identity, seed)
    face = netpbm.quantize(face)
    area = face_area(identity)
    tid = int(rng.integers(len(templates)))
    for _ in range(max_tries):
        try:
            masked, mask = overlay_mask(face, kp, templates[tid], rng)
        except ValueError:
            continue
        frac = mask.sum() / area
        if AREA_RANGE[0] <= frac <= AREA_RANGE[1]:
            masked = netpbm.quantize(masked)
            return FaceTriplet(face, mask, masked, identity.id, tid, seed), frac
    raise RuntimeError(f"could not place a valid mask for identity {identity.id} view {view}")


def _item_name(identity: int, view: int) -> str:
    return f"{identity:04d}_{view:04d}"


def synthesize_dataset(n_identities: int, views_per_identity: int, n_templates: int,
                       master_seed: int, out_dir=None, threads: int = 1) -> Dataset:
    """Generate every (identity, view) item; optionally write images and manifest.

    Output is byte-identical for equal arguments, whatever ``threads`` is.
    """
    if min(n_identities, views_per_identity, n_templates) < 1:
        raise ValueError("all counts must be >= 1")
    identities = generate_identities(n_identities, master_seed)
    templates = builtin_templates(n_templates)
    jobs = [(i, v) for i in range(n_identities) for v in range(views_per_identity)]

    def work(job):
        i, v = job
        return make_item(identities[i], v, templates, master_seed)[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            items = list(pool.map(work, jobs))
    else:
        items = [work(j) for j in jobs]

    ds = Dataset(
        faces=np.stack([t.groundtruth for t in items]),
        masks=np.stack([t.mask for t in items]),
        masked=np.stack([t.masked for t in items]),
        identity=np.array([i for i, _ in jobs]),
        view=np.array([v for _, v in jobs]),
        template=np.array([t.mask_template_id for t in items]),
        split=np.array([split_for_view(v, views_per_identity) for _, v in jobs]),
    )
    if out_dir is not None:
        ds.paths = write_dataset(ds, out_dir)
    return ds


MANIFEST = "manifest.tsv"


def write_dataset(ds: Dataset, out_dir) -> list:
    out = Path(out_dir)
    for sub in ("faces", "masks", "masked"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines, paths = [], []
    for k in range(len(ds)):
        name = _item_name(int(ds.identity[k]), int(ds.view[k]))
        rel = (f"faces/{name}.ppm", f"masks/{name}.pgm", f"masked/{name}.ppm")
        try:
            netpbm.write_ppm(out / rel[0], ds.faces[k])
            netpbm.write_pgm(out / rel[1], ds.masks[k])
            netpbm.write_ppm(out / rel[2], ds.masked[k])
        except OSError as exc:
            raise OSError(f"cannot write {out / rel[0]}: {exc}") from exc
        paths.append(rel)
        lines.append("\t".join([str(ds.identity[k]), str(ds.view[k]), str(ds.template[k]),
                                str(ds.split[k]), *rel]))
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read manifest {path}: {exc}") from exc
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 7:
            raise ValueError(f"{path}:{n}: expected 7 fields, got {len(f)}")
        rows.append({"id": int(f[0]), "view": int(f[1]), "template": int(f[2]), "split": f[3],
                     "face_path": f[4], "mask_path": f[5], "masked_path": f[6]})
    return rows


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    rows = read_manifest(root)
    if not rows:
        raise ValueError(f"{root / MANIFEST} is empty")
    return Dataset(
        faces=np.stack([netpbm.read_ppm(root / r["face_path"]) for r in rows]),
        masks=np.stack([netpbm.read_pgm(root / r["mask_path"]) for r in rows]),
        masked=np.stack([netpbm.read_ppm(root / r["masked_path"]) for r in rows]),
        identity=np.array([r["id"] for r in rows]),
        view=np.array([r["view"] for r in rows]),
        template=np.array([r["template"] for r in rows]),
        split=np.array([r["split"] for r in rows]),
        paths=[(r["face_path"], r["mask_path"], r["masked_path"]) for r in rows],
    )


def default_threads() -> int:
    return int(os.environ.get("G2D_THREADS", "1"))
