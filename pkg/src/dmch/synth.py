"""Procedural cross-domain garment dataset.

Each product is a combination of five visual factors plus a hidden style
(exact hue, garment width, pattern spacing). Shop images show the garment
centred on white; user images of the same product add background clutter,
jitter, lighting changes and occlusion.
"""

from __future__ import annotations

import colorsys
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product as cartesian
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DataError, DMCHIOError

FACTORS: dict[str, tuple[str, ...]] = {
    "silhouette": ("dress", "shirt", "skirt"),
    "pattern": ("solid", "striped", "dotted", "floral"),
    "color": ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink"),
    "collar": ("v-neck", "round-neck"),
    "sleeve": ("long-sleeve", "short-sleeve"),
}
# canonical emission order: silhouette -> pattern -> color -> collar -> sleeve
FACTOR_ORDER = tuple(FACTORS)
ATTRIBUTE_TOKENS = tuple(tok for f in FACTOR_ORDER for tok in FACTORS[f])
_TOKEN_FACTOR = {tok: f for f in FACTOR_ORDER for tok in FACTORS[f]}

_HUES = {"red": 0.0, "orange": 28.0, "yellow": 54.0, "green": 120.0,
         "cyan": 182.0, "blue": 228.0, "purple": 278.0, "pink": 325.0}
_SKIN = np.array([0.93, 0.80, 0.68])

IMAGE_SIZE = 64
_SS = 2  # supersampling factor


@dataclass(frozen=True)
class GarmentSpec:
    product_id: str
    silhouette: str
    pattern: str
    color: str
    collar: str
    sleeve: str
    style_seed: int = 0

    @property
    def factors(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in FACTOR_ORDER}

    def attributes(self) -> list[str]:
        return [getattr(self, f) for f in FACTOR_ORDER]


def parse_attributes(tokens: Sequence[str]) -> dict[str, str]:
    """Inverse of GarmentSpec.attributes: map a canonical sequence to factors."""
    if len(tokens) != len(FACTOR_ORDER):
        raise DataError(f"expected {len(FACTOR_ORDER)} attributes, got {list(tokens)}")
    out = {}
    for want, tok in zip(FACTOR_ORDER, tokens):
        if _TOKEN_FACTOR.get(tok) != want:
            raise DataError(f"token {tok!r} is not a {want} value (order {FACTOR_ORDER})")
        out[want] = tok
    return out


@dataclass
class Record:
    path: str
    domain: str
    product_id: str
    attributes: list[str]
    split: str
    twin: str | None = None
    style_seed: int | None = None

    @property
    def item_id(self) -> str:
        return Path(self.path).stem

    def to_json(self) -> str:
        d = {"path": self.path, "domain": self.domain, "product_id": self.product_id,
             "attributes": " ".join(self.attributes), "split": self.split}
        if self.twin is not None:
            d["twin"] = self.twin
        if self.style_seed is not None:
            d["style_seed"] = self.style_seed
        return json.dumps(d, sort_keys=True)


@dataclass
class DatasetManifest:
    root: Path
    records: list[Record] = field(default_factory=list)

    def resolve(self, rec: Record) -> Path:
        return self.root / rec.path

    def shop(self) -> list[Record]:
        return [r for r in self.records if r.domain == "shop"]

    def user(self, split: str | None = None) -> list[Record]:
        return [r for r in self.records if r.domain == "user" and (split is None or r.split == split)]

    def products(self) -> list[str]:
        return sorted({r.product_id for r in self.records})

    def attributes_of(self, product_id: str) -> list[str]:
        for r in self.records:
            if r.product_id == product_id:
                return r.attributes
        raise DataError(f"unknown product {product_id}")

    def hard_products(self) -> set[str]:
        """Products that belong to an injected one-factor-apart pair."""
        out = set()
        for r in self.records:
            if r.twin is not None:
                out.update((r.product_id, r.twin))
        return out

    def validate(self) -> None:
        shop_products = {r.product_id for r in self.shop()}
        for r in self.records:
            if not self.resolve(r).exists():
                raise DataError(f"missing image {self.resolve(r)}")
            if r.domain not in ("user", "shop"):
                raise DataError(f"bad domain {r.domain!r} for {r.path}")
        for r in self.user():
            if r.product_id not in shop_products:
                raise DataError(f"user image {r.path} has no shop image for product {r.product_id}")


def write_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.jsonl"
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(r.to_json() + "\n" for r in manifest.records), encoding="utf-8")
    tmp.replace(path)
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DMCHIOError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            records.append(Record(d["path"], d["domain"], d["product_id"],
                                  d["attributes"].split(), d["split"], d.get("twin"),
                                  d.get("style_seed")))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return DatasetManifest(path.parent, records)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise DMCHIOError(f"image not found: {path}") from exc


# ---------------------------------------------------------------- rendering


def _item_rng(seed: int, key: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8")), salt])


def _style(spec: GarmentSpec) -> dict:
    rng = np.random.default_rng([spec.style_seed, 7])
    return {
        "hue": (_HUES[spec.color] + rng.uniform(-6, 6)) % 360 / 360.0,
        "sat": rng.uniform(0.65, 0.9) if spec.color != "pink" else rng.uniform(0.35, 0.5),
        "val": rng.uniform(0.8, 0.95),
        "width": rng.uniform(0.9, 1.1),
        "spacing": rng.uniform(9.0, 13.0),
        "phase": rng.uniform(0.0, 1.0),
    }


def _garment_polygons(spec: GarmentSpec, width: float):
    """Body/sleeve polygons and the neckline shape in unit canvas coordinates."""
    w = 0.34 * width
    top, waist = 0.24, 0.50
    body = [(0.5 - w / 2, top), (0.5 + w / 2, top), (0.5 + w * 0.4, waist), (0.5 - w * 0.4, waist)]
    parts = [body]
    if spec.silhouette == "dress":
        parts.append([(0.5 - w * 0.4, waist - 0.01), (0.5 + w * 0.4, waist - 0.01),
                      (0.5 + w * 0.85, 0.88), (0.5 - w * 0.85, 0.88)])
    elif spec.silhouette == "shirt":
        parts.append([(0.5 - w * 0.42, waist - 0.01), (0.5 + w * 0.42, waist - 0.01),
                      (0.5 + w * 0.5, 0.66), (0.5 - w * 0.5, 0.66)])
    else:  # skirt: separate A-line piece below a gap
        parts[0] = [(0.5 - w / 2, top), (0.5 + w / 2, top), (0.5 + w * 0.42, 0.45), (0.5 - w * 0.42, 0.45)]
        parts.append([(0.5 - w * 0.4, 0.52), (0.5 + w * 0.4, 0.52),
                      (0.5 + w * 0.8, 0.84), (0.5 - w * 0.8, 0.84)])
    sl = 0.09
    for side in (-1, 1):
        sx = 0.5 + side * w / 2
        if spec.sleeve == "short-sleeve":
            parts.append([(sx, top), (sx + side * 0.11, top + 0.05),
                          (sx + side * 0.07, top + 0.13), (sx - side * 0.01, top + sl)])
        else:
            parts.append([(sx, top), (sx + side * 0.12, top + 0.08), (sx + side * 0.15, 0.60),
                          (sx + side * 0.08, 0.61), (sx + side * 0.02, top + 0.14)])
    if spec.collar == "v-neck":
        neck = ("polygon", [(0.44, top - 0.005), (0.56, top - 0.005), (0.5, top + 0.13)])
    else:
        neck = ("ellipse", [(0.44, top - 0.06), (0.56, top + 0.06)])
    return parts, neck


def _mask(size: int, shapes, transform) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(im)
    for kind, pts in shapes:
        xy = [transform(p) for p in pts]
        if kind == "polygon":
            draw.polygon(xy, fill=255)
        else:
            (x0, y0), (x1, y1) = xy
            draw.ellipse([min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)], fill=255)
    return np.asarray(im, dtype=np.float64) / 255.0


def _pattern_layer(spec: GarmentSpec, style: dict, base: np.ndarray, size: int, transform_scale: float):
    """RGB texture for the garment fabric at full canvas size."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fabric = np.broadcast_to(base, (size, size, 3)).copy()
    sp = style["spacing"] * _SS / 2 * transform_scale
    ph = style["phase"] * sp
    dark = base * 0.45
    if spec.pattern == "striped":
        band = ((yy + ph) % sp) < sp * 0.42
        fabric[band] = dark
    elif spec.pattern == "dotted":
        cy = (yy + ph) % sp - sp / 2
        cx = (xx + ph) % sp - sp / 2
        fabric[cx ** 2 + cy ** 2 < (sp * 0.22) ** 2] = dark
    elif spec.pattern == "floral":
        cy = (yy + ph) % sp - sp / 2
        cx = (xx + ph * 0.5) % sp - sp / 2
        r = np.sqrt(cx ** 2 + cy ** 2)
        theta = np.arctan2(cy, cx)
        petal = r < sp * 0.36 * (0.55 + 0.45 * np.abs(np.cos(2.5 * theta)))
        fabric[petal] = np.array([1.0, 0.97, 0.92])
        fabric[r < sp * 0.09] = np.array([0.95, 0.75, 0.1])
    return fabric


_BG_SATURATION = 0.35
_BG_CONTRAST = 0.5


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random texture, desaturated and pulled toward a grey level so the
    garment stays the most saturated thing in the frame."""
    bg = _texture(rng, size)
    lum = bg.mean(axis=2, keepdims=True)
    bg = lum + _BG_SATURATION * (bg - lum)
    level = rng.uniform(0.35, 0.75)
    return level + _BG_CONTRAST * (bg - 0.5)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:  # smooth colour noise
        low = rng.uniform(0, 1, (4, 4, 3))
        im = Image.fromarray((low * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    if kind == 1:  # diagonal stripes
        period = rng.uniform(8, 30)
        ang = rng.uniform(0, np.pi)
        t = (np.cos(ang) * xx + np.sin(ang) * yy) % period < period / 2
        return np.where(t[..., None], c1, c2)
    bg = np.broadcast_to(c1, (size, size, 3)).copy()  # random blocks
    for _ in range(int(rng.integers(3, 7))):
        x0, y0 = rng.integers(0, size, 2)
        w, h = rng.integers(size // 8, size // 2, 2)
        bg[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)
    return bg


def render(spec: GarmentSpec, domain: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one (64, 64, 3) float image in [0, 1]."""
    size = IMAGE_SIZE * _SS
    style = _style(spec)
    user = domain == "user"
    if user:
        s = rng.uniform(0.8, 1.05)
        tx, ty = rng.uniform(-0.08, 0.08, 2)
    else:
        s, tx, ty = 1.0, 0.0, 0.0

    def transform(p):
        return ((0.5 + (p[0] - 0.5) * s + tx) * size, (0.5 + (p[1] - 0.5) * s + ty) * size)

    parts, neck = _garment_polygons(spec, style["width"])
    body = _mask(size, [("polygon", p) for p in parts], transform)
    neck_mask = _mask(size, [neck], transform) * body
    base = np.array(colorsys.hsv_to_rgb(style["hue"], style["sat"], style["val"]))
    fabric = _pattern_layer(spec, style, base, size, s)
    canvas = _background(rng, size) if user else np.ones((size, size, 3))
    img = canvas * (1 - body[..., None]) + fabric * body[..., None]
    img = img * (1 - neck_mask[..., None]) + _SKIN * neck_mask[..., None]
    img = img.reshape(IMAGE_SIZE, _SS, IMAGE_SIZE, _SS, 3).mean(axis=(1, 3))
    if user:
        img = img * rng.uniform(0.75, 1.2) * rng.uniform(0.93, 1.07, 3)
        # occluder over part of the garment area
        ow, oh = rng.integers(IMAGE_SIZE // 6, IMAGE_SIZE // 3, 2)
        ox = int(rng.integers(IMAGE_SIZE // 5, IMAGE_SIZE - IMAGE_SIZE // 5 - ow // 2))
        oy = int(rng.integers(IMAGE_SIZE // 5, IMAGE_SIZE - IMAGE_SIZE // 5 - oh // 2))
        img[oy:oy + oh, ox:ox + ow] = rng.uniform(0.1, 0.9) * np.ones(3)
        img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def _save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path, format="PNG", optimize=False)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DMCH_THREADS", "1")))
    except ValueError:
        return 1


def _render_jobs(jobs: Iterable[tuple[Path, GarmentSpec, str, np.random.Generator | None]]) -> None:
    def run(job):
        path, spec, domain, rng = job
        _save_png(path, render(spec, domain, rng))

    jobs = list(jobs)
    try:
        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            list(pool.map(run, jobs))
    except OSError as exc:
        raise DMCHIOError(f"cannot write images: {exc}") from exc


def _records_for(spec: GarmentSpec, images_per_product: int, n_test: int, shop_per_product: int,
                 seed: int, image_dir: Path, twin: str | None = None):
    records, jobs = [], []
    for i in range(shop_per_product):
        item = f"{spec.product_id}_shop{i}"
        path = image_dir / f"{item}.png"
        jobs.append((path, spec, "shop", _item_rng(seed, item)))
        records.append(Record(f"{image_dir.name}/{item}.png", "shop", spec.product_id,
                              spec.attributes(), "gallery", twin, spec.style_seed))
    for i in range(images_per_product):
        item = f"{spec.product_id}_user{i}"
        path = image_dir / f"{item}.png"
        jobs.append((path, spec, "user", _item_rng(seed, item)))
        split = "test" if i >= images_per_product - n_test else "train"
        records.append(Record(f"{image_dir.name}/{item}.png", "user", spec.product_id,
                              spec.attributes(), split, twin, spec.style_seed))
    return records, jobs


def _all_combos() -> list[tuple[str, ...]]:
    return list(cartesian(*(FACTORS[f] for f in FACTOR_ORDER)))


def generate(n_products: int, images_per_product: int, seed: int, out_dir,
             n_test: int | None = None, shop_per_product: int = 1) -> DatasetManifest:
    """Render a dataset and write ``out_dir/manifest.jsonl``.

    ``images_per_product`` user images are made per product; the last
    ``n_test`` of them (default 1 when there are at least two) form the test
    split. Products are distinct factor combinations.
    """
    combos = _all_combos()
    if n_products < 2:
        raise ConfigError("need at least 2 products")
    if n_products > len(combos):
        raise ConfigError(f"at most {len(combos)} distinct products")
    if n_test is None:
        n_test = 1 if images_per_product >= 2 else 0
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DMCHIOError(f"cannot create {image_dir}: {exc}") from exc
    rng = np.random.default_rng([seed, 0])
    chosen = rng.choice(len(combos), size=n_products, replace=False)
    records, jobs = [], []
    for k, ci in enumerate(chosen):
        spec = GarmentSpec(f"p{k:04d}", *combos[ci], style_seed=int(rng.integers(2**31)))
        recs, js = _records_for(spec, images_per_product, n_test, shop_per_product, seed, image_dir)
        records += recs
        jobs += js
    _render_jobs(jobs)
    manifest = DatasetManifest(out_dir, records)
    write_manifest(manifest)
    return manifest


def _spec_of(manifest: DatasetManifest, product_id: str, style_seed: int) -> GarmentSpec:
    f = parse_attributes(manifest.attributes_of(product_id))
    return GarmentSpec(product_id, style_seed=style_seed, **f)


def make_hard_pairs(manifest: DatasetManifest, fraction: float, seed: int = 0,
                    images_per_product: int | None = None, n_test: int | None = None) -> DatasetManifest:
    """Add a twin for ``round(fraction * n_products)`` products.

    A twin copies its base product's factors and hidden style except for one
    factor, so the pair differs in exactly one attribute. Twin records carry
    ``twin=<base product id>``. Images go next to the existing ones and the
    manifest file is rewritten.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("fraction must lie in [0, 1]")
    base_products = [p for p in manifest.products() if not p.startswith("h")]
    n_twins = int(round(fraction * len(base_products)))
    if n_twins == 0:
        return manifest
    rng = np.random.default_rng([seed, 1])
    existing = {tuple(manifest.attributes_of(p)) for p in manifest.products()}
    users = {p: sum(1 for r in manifest.user() if r.product_id == p) for p in base_products}
    tests = {p: sum(1 for r in manifest.user("test") if r.product_id == p) for p in base_products}
    shops = {p: sum(1 for r in manifest.shop() if r.product_id == p) for p in base_products}
    image_dir = manifest.root / "images"
    records, jobs = [], []
    picked = rng.permutation(len(base_products))[:n_twins]
    for k, bi in enumerate(picked):
        base_id = base_products[bi]
        base = _spec_of(manifest, base_id, 0)
        options = []
        for f in FACTOR_ORDER:
            for v in FACTORS[f]:
                if v != getattr(base, f):
                    cand = replace(base, **{f: v})
                    if tuple(cand.attributes()) not in existing:
                        options.append((f, v))
        if not options:
            continue
        f, v = options[int(rng.integers(len(options)))]
        style_seed = next(r.style_seed for r in manifest.records if r.product_id == base_id)
        if style_seed is None:
            style_seed = zlib.crc32(base_id.encode("utf-8"))
        twin = replace(base, product_id=f"h{k:04d}", style_seed=style_seed, **{f: v})
        existing.add(tuple(twin.attributes()))
        n_users = users[base_id] if images_per_product is None else images_per_product
        n_t = tests[base_id] if n_test is None else n_test
        recs, js = _records_for(twin, n_users, n_t, shops[base_id], seed, image_dir, twin=base_id)
        records += recs
        jobs += js
    _render_jobs(jobs)
    out = DatasetManifest(manifest.root, list(manifest.records) + records)
    write_manifest(out)
    return out
