"""Deterministic synthetic segmentation scenarios.

Each sample is drawn from generators keyed on (seed, scenario, sample index,
field), so any sample can be regenerated in isolation. ``Base`` plays the
pretraining distribution; the others are fine-tuning shifts of increasing
severity, with ``RadarShift`` (inverted intensity, multiplicative speckle,
thin shapes) the extreme one.
"""

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .segnet import BoxPrompt
from .tensor import save_tensor

SIZE = 64
MAX_PERTURB = 2  # 0-20 px at 1024 px, scaled to 64 px


class Scenario(str, Enum):
    BASE = "base"
    NATURAL = "natural"
    REMOTE_SENSING = "remote_sensing"
    MEDICAL = "medical"
    RADAR_SHIFT = "radar_shift"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = text.lower().replace("-", "").replace("_", "")
        for s in cls:
            if s.value.replace("_", "") == key:
                return s
        raise ValueError(f"unknown scenario {text!r}; choose from {[s.value for s in cls]}")

    @property
    def code(self):
        return list(Scenario).index(self)

    @property
    def single_instance(self):
        return self is Scenario.MEDICAL


# foreground fraction bands (union of all instances), enforced by rejection
FG_BANDS = {
    Scenario.BASE: (0.05, 0.40),
    Scenario.NATURAL: (0.05, 0.40),
    Scenario.MEDICAL: (0.02, 0.20),
    Scenario.REMOTE_SENSING: (0.03, 0.25),
    Scenario.RADAR_SHIFT: (0.01, 0.15),
}


@dataclass
class SegSample:
    image: np.ndarray  # (1, S, S) in [0, 1]
    mask: np.ndarray  # (1, S, S) 0/1, the prompted instance
    box: BoxPrompt
    instances: np.ndarray  # (S, S) int labels, 0 = background
    scenario: Scenario
    index: int


def _grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # xs, ys


def _ellipse(size, cx, cy, rx, ry, theta):
    xs, ys = _grid(size)
    dx, dy = xs - cx, ys - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    return np.sqrt(u * u + v * v)  # normalized radius; <= 1 inside


def _rect(size, x0, y0, w, h):
    m = np.zeros((size, size), dtype=bool)
    m[int(y0):int(y0 + h), int(x0):int(x0 + w)] = True
    return m


def _dilate(m):
    p = np.pad(m, 1)
    out = np.zeros_like(m)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= p[dy:dy + m.shape[0], dx:dx + m.shape[1]]
    return out


def _smooth_field(rng, size, cells=4):
    """Low-frequency texture in [0, 1]: bilinear blow-up of a coarse grid."""
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _shape(scenario, rng, size):
    """One candidate instance: (bool mask, soft profile or None)."""
    s = size
    if scenario in (Scenario.BASE, Scenario.NATURAL):
        if rng.random() < 0.5:
            lo, hi = (5, 14) if scenario is Scenario.BASE else (3, 12)
            rx, ry = rng.uniform(lo, hi, 2)
            if scenario is Scenario.NATURAL:
                ry = max(2.5, rx / rng.uniform(1.5, 3.5))
            cx, cy = rng.uniform(rx, s - rx), rng.uniform(ry, s - ry)
            return _ellipse(s, cx, cy, rx, ry, rng.uniform(0, np.pi)) <= 1.0, None
        if scenario is Scenario.BASE:
            w, h = rng.integers(8, 25, 2)
        else:
            w = rng.integers(5, 31)
            h = int(np.clip(w / rng.uniform(1.5, 4.0), 3, 30))
            if rng.random() < 0.5:
                w, h = h, w
        x0, y0 = rng.integers(0, s - w + 1), rng.integers(0, s - h + 1)
        return _rect(s, x0, y0, w, h), None
    if scenario is Scenario.REMOTE_SENSING:
        w, h = rng.integers(3, 11, 2)
        x0, y0 = rng.integers(1, s - w), rng.integers(1, s - h)
        return _rect(s, x0, y0, w, h), None
    if scenario is Scenario.MEDICAL:
        rx, ry = rng.uniform(6, 14, 2)
        cx, cy = rng.uniform(rx + 2, s - rx - 2), rng.uniform(ry + 2, s - ry - 2)
        r = _ellipse(s, cx, cy, rx, ry, rng.uniform(0, np.pi))
        soft = 1.0 / (1.0 + np.exp((r - 1.0) * rng.uniform(4.0, 8.0)))
        return r <= 1.0, soft
    # radar: thin bars / slivers
    if rng.random() < 0.5:
        length, thick = rng.integers(10, 31), rng.integers(2, 5)
        w, h = (length, thick) if rng.random() < 0.5 else (thick, length)
        x0, y0 = rng.integers(0, s - w + 1), rng.integers(0, s - h + 1)
        return _rect(s, x0, y0, w, h), None
    rx, ry = rng.uniform(6, 15), rng.uniform(1.5, 3.0)
    cx, cy = rng.uniform(rx, s - rx), rng.uniform(rx, s - rx)
    return _ellipse(s, cx, cy, rx, ry, rng.uniform(0, np.pi)) <= 1.0, None


_COUNTS = {
    Scenario.BASE: (1, 3),
    Scenario.NATURAL: (1, 3),
    Scenario.REMOTE_SENSING: (3, 8),
    Scenario.MEDICAL: (1, 1),
    Scenario.RADAR_SHIFT: (1, 3),
}


def _layout(scenario, rng, size):
    """Non-touching instances (1 px gap, 8-connectivity) within the fg band."""
    lo_n, hi_n = _COUNTS[scenario]
    band = FG_BANDS[scenario]
    while True:
        n = int(rng.integers(lo_n, hi_n + 1))
        labels = np.zeros((size, size), dtype=np.int64)
        softs = []
        occupied = np.zeros((size, size), dtype=bool)
        tries = 0
        while len(softs) < n and tries < 200:
            tries += 1
            m, soft = _shape(scenario, rng, size)
            if not m.any() or (_dilate(m) & occupied).any():
                continue
            labels[m] = len(softs) + 1
            occupied |= m
            softs.append(soft)
        if len(softs) == n and band[0] <= occupied.mean() <= band[1]:
            return labels, softs


def _render(scenario, rng, labels, softs):
    size = labels.shape[0]
    k = labels.max()
    if scenario is Scenario.RADAR_SHIFT:
        img = np.full((size, size), rng.uniform(0.65, 0.85))
        for i in range(1, k + 1):
            img[labels == i] = rng.uniform(0.15, 0.35)
        speckle = 1.0 + 0.4 * rng.standard_normal((size, size))
        return np.clip(img * speckle, 0.0, 1.0)
    if scenario is Scenario.MEDICAL:
        bg = 0.25 + 0.25 * _smooth_field(rng, size)
        img = bg + rng.uniform(0.25, 0.45) * softs[0]
    elif scenario is Scenario.REMOTE_SENSING:
        img = 0.2 + 0.25 * _smooth_field(rng, size, cells=8)
        for i in range(1, k + 1):
            img[labels == i] = rng.uniform(0.55, 0.95)
    else:
        lo, hi = ((0.1, 0.3), (0.55, 0.9)) if scenario is Scenario.BASE else ((0.2, 0.45), (0.5, 0.8))
        img = np.full((size, size), rng.uniform(*lo))
        for i in range(1, k + 1):
            img[labels == i] = rng.uniform(*hi)
    return np.clip(img + 0.05 * rng.standard_normal((size, size)), 0.0, 1.0)


def tight_box(mask):
    ys, xs = np.nonzero(np.asarray(mask).reshape(mask.shape[-2:]))
    return BoxPrompt(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def perturb_draws(seed, max_perturb=MAX_PERTURB):
    """Per-side outward offsets (x0, y0, x1, y1), each uniform on {0..max_perturb}."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, max_perturb + 1, size=4)


def perturb_box(tight, seed, max_perturb=MAX_PERTURB, size=SIZE):
    """Grow each side of ``tight`` by an independent draw, clamped to the image.

    A box collapsed by clamping (x0 == x1) is re-expanded by one pixel.
    """
    dx0, dy0, dx1, dy1 = (int(v) for v in perturb_draws(seed, max_perturb))
    x0, y0 = max(0, tight.x0 - dx0), max(0, tight.y0 - dy0)
    x1, y1 = min(size, tight.x1 + dx1), min(size, tight.y1 + dy1)
    if x1 <= x0:
        x0, x1 = (x0 - 1, x0) if x0 >= size else (x0, x0 + 1)
    if y1 <= y0:
        y0, y1 = (y0 - 1, y0) if y0 >= size else (y0, y0 + 1)
    return BoxPrompt(x0, y0, x1, y1)


def sample(scenario, seed, index, size=SIZE, max_perturb=MAX_PERTURB):
    scenario = Scenario.parse(scenario)
    key = [int(seed), scenario.code, int(index)]
    labels, softs = _layout(scenario, np.random.default_rng(key + [0]), size)
    image = _render(scenario, np.random.default_rng(key + [1]), labels, softs)
    target = int(np.random.default_rng(key + [2]).integers(1, labels.max() + 1))
    mask = (labels == target).astype(np.float64)
    box = perturb_box(tight_box(mask), key + [3], max_perturb, size)
    return SegSample(image[None], mask[None], box, labels, scenario, int(index))


def generate(scenario, n, seed, start=0, size=SIZE):
    """``n`` samples (indices ``start .. start+n-1``) of ``scenario`` under ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [sample(scenario, seed, i, size) for i in range(start, start + n)]


def batch_arrays(samples):
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks, [s.box for s in samples]


def dump_dataset(samples, directory):
    """PTNS image/mask files plus ``index.txt`` rows: id scenario x0 y0 x1 y1."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for s in samples:
        sid = f"{s.scenario.value}-{s.index:06d}"
        save_tensor(s.image, os.path.join(directory, f"{sid}.image.ptns"))
        save_tensor(s.mask, os.path.join(directory, f"{sid}.mask.ptns"))
        rows.append(f"{sid} {s.scenario.value} {s.box.x0} {s.box.y0} {s.box.x1} {s.box.y1}")
    with open(os.path.join(directory, "index.txt"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
