"""Synthetic multi-domain glyph data and client partitioners.

Each class is a fixed seven-segment style glyph. A domain changes only the
appearance of the rendered image (brightness, contrast, background texture,
channel order, rotation, noise level), never the label, so domains differ in
P(x) while P(y|x) is shared.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IndivisibleSplit, InvalidAlpha, InvalidCounts, RetriesExhausted
from .tensor_core import DTYPE, RngStream

# segments: a top, b upper-right, c lower-right, d bottom, e lower-left, f upper-left, g middle
_DIGITS = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"]
_SEGMENTS = "abcdefg"
TEXTURES = ("none", "stripes", "checker", "blotch")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    offset: float = 0.0
    contrast: float = 1.0
    noise: float = 0.1
    texture: str = "none"
    texture_amp: float = 0.0
    channel_perm: tuple = (0, 1, 2)
    rotation: int = 0  # degrees, multiple of 90
    jitter: int = 0  # max translation in pixels
    color: tuple = (1.0, 0.8, 0.6)

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise InvalidCounts(f"unknown texture {self.texture!r}")
        if self.rotation % 90:
            raise InvalidCounts("rotation must be a multiple of 90 degrees")


# appearance presets: deviations from the first row are scaled by the gap knob;
# the polarity-inverted style comes last so only five-domain setups include it
_STYLES = [
    dict(offset=0.0, contrast=1.0, texture="none", texture_amp=0.0, channel_perm=(0, 1, 2)),
    dict(offset=0.45, contrast=0.35, texture="stripes", texture_amp=0.25, channel_perm=(1, 2, 0)),
    dict(offset=0.15, contrast=0.6, texture="checker", texture_amp=0.3, channel_perm=(0, 2, 1)),
    dict(offset=0.3, contrast=0.5, texture="blotch", texture_amp=0.35, channel_perm=(1, 0, 2)),
    dict(offset=1.0, contrast=-0.8, texture="none", texture_amp=0.0, channel_perm=(2, 0, 1)),
]


def default_domain_specs(num_domains: int, gap: float = 1.0, noise: float = 0.1,
                         jitter: int = 0) -> list[DomainSpec]:
    specs = []
    base = _STYLES[0]
    for d in range(num_domains):
        style = _STYLES[d % len(_STYLES)]
        specs.append(DomainSpec(
            domain_id=d,
            offset=base["offset"] + gap * (style["offset"] - base["offset"]),
            contrast=base["contrast"] + gap * (style["contrast"] - base["contrast"]),
            noise=noise,
            texture=style["texture"],
            texture_amp=gap * style["texture_amp"],
            channel_perm=style["channel_perm"],
            rotation=90 * ((d // len(_STYLES)) % 4),
            jitter=jitter,
        ))
    return specs


@dataclass
class Shard:
    x: np.ndarray  # N x C x H x W in [0, 1]
    y: np.ndarray  # N int64 labels
    domain_id: int
    split: str = "train"

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "Shard":
        idx = np.asarray(idx, dtype=np.int64)
        return Shard(self.x[idx], self.y[idx], self.domain_id, self.split)


def _class_segments(num_classes: int) -> list[str]:
    out = list(_DIGITS[:num_classes])
    used = {frozenset(s) for s in out}
    code = 1
    while len(out) < num_classes:
        segs = "".join(s for i, s in enumerate(_SEGMENTS) if code >> i & 1)
        code += 1
        if code > 2 ** len(_SEGMENTS):
            raise InvalidCounts(f"at most {2 ** len(_SEGMENTS) - 1} glyph classes are available")
        if frozenset(segs) not in used:
            used.add(frozenset(segs))
            out.append(segs)
    return out


def render_glyph(segments: str, h: int, w: int) -> np.ndarray:
    """Binary H x W image of a seven-segment glyph centred in the frame."""
    img = np.zeros((h, w), dtype=DTYPE)
    top, bot = round(0.15 * h), round(0.85 * h) - 1
    left, right = round(0.3 * w), round(0.7 * w) - 1
    mid = (top + bot) // 2
    t = max(1, round(0.08 * min(h, w)))
    boxes = {
        "a": (top, top + t, left, right + 1),
        "d": (bot - t + 1, bot + 1, left, right + 1),
        "g": (mid - t // 2, mid - t // 2 + t, left, right + 1),
        "f": (top, mid + 1, left, left + t),
        "e": (mid, bot + 1, left, left + t),
        "b": (top, mid + 1, right - t + 1, right + 1),
        "c": (mid, bot + 1, right - t + 1, right + 1),
    }
    for s in segments:
        r0, r1, c0, c1 = boxes[s]
        img[r0:r1, c0:c1] = 1.0
    return img


def _texture(kind: str, h: int, w: int, stream: RngStream, n: int) -> np.ndarray:
    """Per-sample background textures in [-0.5, 0.5], shape n x H x W."""
    if kind == "none" or n == 0:
        return np.zeros((n, h, w))
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    phase = stream.uniform((n, 1, 1)) * 2 * math.pi
    if kind == "stripes":
        return 0.5 * np.sin(2 * math.pi * (rows + cols) / 6.0 + phase)
    if kind == "checker":
        shift = np.floor(phase / (2 * math.pi) * 8).astype(np.int64)
        return ((((rows + shift) // 4) + ((cols + shift) // 4)) % 2) - 0.5
    # blotch: a few random smooth bumps
    tex = np.zeros((n, h, w))
    for _ in range(3):
        cy = stream.uniform((n, 1, 1)) * h
        cx = stream.uniform((n, 1, 1)) * w
        rad = (0.15 + 0.2 * stream.uniform((n, 1, 1))) * min(h, w)
        tex += np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * rad**2))
    return np.clip(tex, 0, 1) - 0.5


def _shift(images: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    n, h, w = images.shape
    out = np.zeros_like(images)
    for i in range(n):
        sy, sx = int(dy[i]), int(dx[i])
        src = images[i, max(0, -sy) : h - max(0, sy), max(0, -sx) : w - max(0, sx)]
        out[i, max(0, sy) : max(0, sy) + src.shape[0], max(0, sx) : max(0, sx) + src.shape[1]] = src
    return out


def render_domain(spec: DomainSpec, labels: np.ndarray, image_shape, glyphs: np.ndarray,
                  stream: RngStream) -> np.ndarray:
    """Render ``labels`` through the domain's appearance transform."""
    c, h, w = image_shape
    n = len(labels)
    base = glyphs[labels]
    if spec.jitter > 0 and n:
        dy = stream.split("dy").integers(-spec.jitter, spec.jitter + 1, (n,))
        dx = stream.split("dx").integers(-spec.jitter, spec.jitter + 1, (n,))
        base = _shift(base, dy, dx)
    color = np.resize(np.asarray(spec.color, dtype=DTYPE), c)
    tex = _texture(spec.texture, h, w, stream.split("texture"), n)
    x = spec.offset + spec.contrast * base[:, None] * color[None, :, None, None]
    x = x + spec.texture_amp * tex[:, None]
    if c == 3:
        x = x[:, list(spec.channel_perm)]
    if spec.rotation:
        x = np.rot90(x, k=spec.rotation // 90, axes=(2, 3))
    if spec.noise > 0:
        x = x + spec.noise * stream.split("noise").normal(x.shape)
    return np.ascontiguousarray(np.clip(x, 0.0, 1.0), dtype=DTYPE)


def gen_domains(num_domains: int, num_classes: int, train_per_domain: int, test_per_domain: int,
                image_shape=(3, 28, 28), stream: Optional[RngStream] = None, gap: float = 1.0,
                noise: float = 0.1, jitter: int = 0,
                domain_specs: Optional[Sequence[DomainSpec]] = None) -> list[tuple[Shard, Shard]]:
    """Generate ``(train, test)`` shards per domain with uniform class priors."""
    if num_domains < 1 or num_classes < 2:
        raise InvalidCounts("need at least one domain and two classes")
    if train_per_domain < 1 or test_per_domain < 0:
        raise InvalidCounts("per-domain sample counts must be positive")
    c, h, w = image_shape
    if c not in (1, 3) or h < 8 or w < 8:
        raise InvalidCounts(f"unsupported image shape {image_shape}")
    stream = stream or RngStream(0)
    if domain_specs is None:
        domain_specs = default_domain_specs(num_domains, gap, noise, jitter)
    if len(domain_specs) != num_domains:
        raise InvalidCounts("one DomainSpec per domain is required")
    glyphs = np.stack([render_glyph(s, h, w) for s in _class_segments(num_classes)])
    out = []
    for spec in domain_specs:
        ds = stream.split("domain", spec.domain_id)
        shards = []
        for split, n in (("train", train_per_domain), ("test", test_per_domain)):
            ss = ds.split(split)
            # balanced classes, shuffled
            labels = np.resize(np.arange(num_classes), n)[ss.split("order").permutation(n)]
            x = render_domain(spec, labels, image_shape, glyphs, ss.split("render"))
            shards.append(Shard(x, labels.astype(np.int64), spec.domain_id, split))
        out.append((shards[0], shards[1]))
    return out


# -- partitioning ------------------------------------------------------------


def domain_partition(domains: Sequence[tuple[Shard, Shard]], clients_per_domain: int,
                     stream: RngStream) -> list[Shard]:
    """Split each domain's train shard into ``clients_per_domain`` equal random parts.

    Client order is domain-major: clients ``d*m .. d*m + m - 1`` hold domain ``d``.
    """
    m = clients_per_domain
    if m < 1:
        raise IndivisibleSplit("clients_per_domain must be >= 1")
    out = []
    for train, _ in domains:
        n = len(train)
        if n % m:
            raise IndivisibleSplit(f"domain {train.domain_id}: {n} samples do not split into {m} equal parts")
        perm = stream.split("domain", train.domain_id).permutation(n)
        for part in np.split(perm, m):
            out.append(train.subset(np.sort(part)))
    return out


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, num_clients: int, alpha: float, stream: RngStream,
                        max_retries: int = 100) -> list[np.ndarray]:
    """Label-skewed split: each class is apportioned by a Dir(alpha) draw over clients.

    Draws leaving some client empty are discarded and redrawn, at most
    ``max_retries`` times.
    """
    if not alpha > 0:
        raise InvalidAlpha(f"alpha must be positive, got {alpha}")
    if num_clients < 1:
        raise InvalidCounts("num_clients must be >= 1")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    for attempt in range(max_retries + 1):
        s = stream.split("attempt", attempt)
        parts = [[] for _ in range(num_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            idx = idx[s.split("shuffle", int(c)).permutation(len(idx))]
            g = s.split("dir", int(c)).gamma(np.full(num_clients, float(alpha)))
            total = g.sum()
            p = g / total if total > 0 else np.full(num_clients, 1.0 / num_clients)
            counts = _largest_remainder(p, len(idx))
            for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[k].append(chunk)
        result = [np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts]
        if all(len(r) > 0 for r in result):
            return result
    raise RetriesExhausted(f"no partition with every client non-empty after {max_retries} retries")


def iid_partition(labels, num_clients: int, stream: RngStream) -> list[np.ndarray]:
    """Uniform random split into shards whose sizes differ by at most one."""
    if num_clients < 1:
        raise InvalidCounts("num_clients must be >= 1")
    n = len(labels)
    perm = stream.permutation(n)
    return [np.sort(p) for p in np.array_split(perm, num_clients)]


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of the empirical label distribution."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def total_variation(labels: np.ndarray, reference: np.ndarray, num_classes: int) -> float:
    a = np.bincount(labels, minlength=num_classes) / max(len(labels), 1)
    b = np.bincount(reference, minlength=num_classes) / max(len(reference), 1)
    return 0.5 * float(np.abs(a - b).sum())


# -- dataset dump ------------------------------------------------------------


def save_shard(path, shard: Shard) -> None:
    """One ``.npz`` file per shard: header fields plus the raw sample arrays."""
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, x=shard.x, y=shard.y, domain_id=np.int64(shard.domain_id),
                 split=np.array(shard.split), count=np.int64(len(shard)),
                 shape=np.array(shard.x.shape[1:], dtype=np.int64))


def load_shard(path) -> Shard:
    with np.load(Path(path), allow_pickle=False) as z:
        x = z["x"].astype(DTYPE)
        if x.shape[0] != int(z["count"]) or tuple(x.shape[1:]) != tuple(z["shape"]):
            raise InvalidCounts(f"{path}: header disagrees with payload")
        return Shard(x, z["y"].astype(np.int64), int(z["domain_id"]), str(z["split"]))


def dump_dataset(out_dir, domains: Sequence[tuple[Shard, Shard]],
                 specs: Optional[Sequence[DomainSpec]] = None) -> Path:
    """Write every shard plus a ``manifest.json`` describing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for train, test in domains:
        for shard in (train, test):
            name = f"domain{shard.domain_id}_{shard.split}.npz"
            save_shard(out / name, shard)
            entries.append({"file": name, "domain_id": shard.domain_id, "split": shard.split,
                            "count": len(shard), "shape": list(shard.x.shape[1:])})
    manifest = {"shards": entries}
    if specs is not None:
        manifest["domains"] = [dict(asdict(s), channel_perm=list(s.channel_perm), color=list(s.color))
                               for s in specs]
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(out_dir) -> list[tuple[Shard, Shard]]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    by_domain: dict[int, dict[str, Shard]] = {}
    for e in manifest["shards"]:
        by_domain.setdefault(e["domain_id"], {})[e["split"]] = load_shard(out / e["file"])
    return [(v["train"], v["test"]) for _, v in sorted(by_domain.items())]

