"""Synthetic pelvic radiographs with known anatomy and sacroiliitis grades.

Geometry (all sizes relative to the image, jittered per seed):

* pelvis: an elliptical arch (outer ellipse minus the pelvic inlet ellipse);
* sacrum: an inverted triangle wedged into the top of the arch;
* SIJ: the two oblique seams where the sacral edges cross the arch, rendered
  as a thin dark joint space separating sacrum from ilium.

Joint appearance is a monotone function of grade and is confined to the iliac
side of each seam, within ``default_radius(width)`` of the sacral edge:

====== ==========================================================
grade  rendering
====== ==========================================================
0      crisp dark joint line of constant width
1      blurred, slightly irregular joint line
2      erosive notches on the iliac margin + sclerotic bright band
3      many large erosions, widened irregular joint space, strong sclerosis
4      joint space bridged (ankylosis): line faint or absent
====== ==========================================================

Distractors (hip joints, pubic symphysis, bowel gas, soft-tissue texture) are
rendered only outside the SIJ truth boxes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import erf

from .anatomy import SijBoxes, default_radius, expand_box, tight_box
from .errors import InvalidSpecError
from .labels import mny_positive
from .manifest import (FollowUpEntry, FollowUpManifest, Manifest, ManifestEntry,
                       write_png)

log = logging.getLogger(__name__)

GENERATOR_VERSION = "sacropipe-phantom/1"
MIN_DIM = 64
TRUTH_MARGIN = 0.1

# intensity levels, 16-bit units
BACKGROUND = 4000.0
SOFT_TISSUE = 9000.0
PELVIS_BONE = 17000.0
SACRUM_BONE = 15000.0
BASE_GAP = 3.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    width: int = 628
    height: int = 416
    grade_left: int = 0
    grade_right: int = 0
    distractor_level: float = 0.5
    noise_sigma: float = 300.0

    def validate(self) -> None:
        if self.width < MIN_DIM or self.height < MIN_DIM:
            raise InvalidSpecError(f"phantom must be at least {MIN_DIM}px in each axis")
        if self.width <= self.height:
            raise InvalidSpecError("phantom must be landscape (width > height)")
        for g in (self.grade_left, self.grade_right):
            if int(g) != g or not 0 <= g <= 4:
                raise InvalidSpecError(f"grade out of range: {g}")
        if not 0.0 <= self.distractor_level <= 1.0:
            raise InvalidSpecError("distractor_level must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be >= 0")


@dataclass
class PhantomSample:
    image: np.ndarray          # uint16
    mask: np.ndarray           # uint8, {0, 1, 2}
    truth_boxes: SijBoxes
    grades: tuple[int, int]
    label: int
    joint_line: np.ndarray     # bool, rendered joint-space pixels (audit only)


@dataclass
class _Edge:
    """One lateral sacral edge: signed distance field and contact-segment extent."""
    dist: np.ndarray   # signed distance, > 0 on the iliac side
    along: np.ndarray  # coordinate along the edge, measured from the top corner
    u_out: float       # contact segment start (outer arch crossing)
    u_in: float        # contact segment end (inlet crossing)
    direction: np.ndarray
    normal: np.ndarray
    origin: np.ndarray
    length: float      # top corner to apex

    def on_segment(self) -> np.ndarray:
        return (self.along >= 0) & (self.along <= self.length)


def _streams(seed: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1))
    return [np.random.default_rng(s) for s in ss.spawn(6)]


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    s = f.std()
    return f / s if s > 0 else f


def _soft_step(x, softness):
    """0 -> 1 as x goes from negative to positive, edge width ~ softness."""
    return 0.5 * (1.0 + erf(x / (np.sqrt(2.0) * max(softness, 1e-3))))


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    spec.validate()
    H, W = spec.height, spec.width
    geo_rng, tex_rng, left_rng, right_rng, dis_rng, noise_rng = _streams(spec.seed)

    scale = geo_rng.uniform(0.95, 1.05)
    cx = W / 2 + geo_rng.uniform(-0.02, 0.02) * W
    dy = geo_rng.uniform(-0.02, 0.02) * H
    sacrum_half = geo_rng.uniform(0.14, 0.16) * W * scale
    y_top = 0.04 * H + dy
    y_apex = geo_rng.uniform(0.68, 0.72) * H + dy
    outer = (0.60 * H + dy, cx, 0.50 * H * scale, 0.45 * W * scale)
    inner = (0.66 * H + dy, cx, 0.34 * H * scale, 0.30 * W * scale)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    def in_ellipse(y, x, e):
        cy, ccx, ay, ax = e
        return ((y - cy) / ay) ** 2 + ((x - ccx) / ax) ** 2 <= 1.0

    ring = in_ellipse(yy, xx, outer) & ~in_ellipse(yy, xx, inner)

    def make_edge(sign: int) -> _Edge:
        origin = np.array([y_top, cx + sign * sacrum_half])
        apex = np.array([y_apex, cx])
        direction = (apex - origin) / np.linalg.norm(apex - origin)
        normal = np.array([-direction[1], direction[0]])
        if normal[1] * sign < 0:
            normal = -normal
        dist = (yy - origin[0]) * normal[0] + (xx - origin[1]) * normal[1]
        along = (yy - origin[0]) * direction[0] + (xx - origin[1]) * direction[1]
        # contact segment: where a point just outside the edge lies in the arch
        length = np.linalg.norm(apex - origin)
        us = np.linspace(0, length, 4000)
        pts = origin[None, :] + us[:, None] * direction[None, :] + 1.0 * normal[None, :]
        inside = in_ellipse(pts[:, 0], pts[:, 1], outer) & ~in_ellipse(pts[:, 0], pts[:, 1], inner)
        if not inside.any():
            raise InvalidSpecError("degenerate phantom geometry: sacrum does not meet pelvis")
        hit = us[inside]
        return _Edge(dist, along, float(hit.min()), float(hit.max()), direction, normal, origin,
                     float(length))

    left_edge, right_edge = make_edge(-1), make_edge(+1)
    sacrum = (left_edge.dist <= 0) & (right_edge.dist <= 0) & (yy >= y_top) & (yy <= y_apex)

    def seam(edge: _Edge, lo, hi):
        return (edge.dist > lo) & (edge.dist <= hi) & edge.on_segment()

    radius = default_radius(W)
    # joint space; narrower on small images so bone remains inside the joint band
    gap_w = min(BASE_GAP, radius / 2)
    gap = ring & ~sacrum & (seam(left_edge, 0, gap_w) | seam(right_edge, 0, gap_w))
    pelvis = ring & ~sacrum & ~gap

    mask = np.zeros((H, W), dtype=np.uint8)
    mask[pelvis] = 1
    mask[sacrum] = 2

    # Truth region: iliac pixels within radius - 1 of the analytic sacral edge. The
    # extra pixel absorbs rasterization, so a disk dilation of the rendered sacrum by
    # ``radius`` always covers it.
    truth = []
    for edge in (left_edge, right_edge):
        region = pelvis & seam(edge, 0, max(radius - 1, gap_w + 1))
        if not region.any():
            raise InvalidSpecError("degenerate phantom geometry: empty SIJ region")
        truth.append(expand_box(tight_box(region), TRUTH_MARGIN, (H, W)))
    truth_boxes = SijBoxes(truth[0], truth[1], (H, W), TRUTH_MARGIN)
    if truth_boxes.left.intersection(truth_boxes.right).area > 0:
        raise InvalidSpecError("SIJ truth boxes overlap; image too narrow for this geometry")

    # anatomy
    body = _soft_step(1.0 - np.sqrt(((yy - 0.55 * H) / (0.62 * H)) ** 2
                                    + ((xx - cx) / (0.55 * W)) ** 2), 0.03)
    texture = _smooth_field(tex_rng, (H, W), 6.0)
    bone_level = np.where(pelvis | gap, PELVIS_BONE, 0.0) + np.where(sacrum, SACRUM_BONE, 0.0)
    bone_level = bone_level * (1.0 + 0.04 * texture)
    img = BACKGROUND + SOFT_TISSUE * body + bone_level

    # joints
    joint_line = np.zeros((H, W), dtype=bool)
    for edge, grade, rng, box in ((left_edge, spec.grade_left, left_rng, truth_boxes.left),
                                  (right_edge, spec.grade_right, right_rng, truth_boxes.right)):
        delta, line = _render_joint(edge, int(grade), rng, ring & ~sacrum, bone_level, radius)
        # grade effects never leave the truth box
        img[box.slices()] += delta[box.slices()]
        joint_line[box.slices()] |= line[box.slices()]

    # distractors, kept out of the truth boxes
    if spec.distractor_level > 0:
        img += _distractors(spec.distractor_level, dis_rng, yy, xx, H, W, cx) * _keep_out_weight(
            truth_boxes, yy, xx)

    if spec.noise_sigma > 0:
        img += noise_rng.normal(0.0, spec.noise_sigma, size=(H, W))

    image = np.rint(np.clip(img, 0, 65535)).astype(np.uint16)
    grades = (int(spec.grade_left), int(spec.grade_right))
    return PhantomSample(image, mask, truth_boxes, grades, int(mny_positive(*grades)), joint_line)


def _keep_out_weight(boxes: SijBoxes, yy, xx, feather: float = 10.0) -> np.ndarray:
    """0 inside the truth boxes, ramping to 1 over ``feather`` px outside them."""
    w = np.ones_like(yy)
    for b in (boxes.left, boxes.right):
        dy = np.maximum(np.maximum(b.row0 - yy, yy - (b.row1 - 1)), 0.0)
        dx = np.maximum(np.maximum(b.col0 - xx, xx - (b.col1 - 1)), 0.0)
        w = np.minimum(w, np.clip(np.hypot(dy, dx) / feather, 0.0, 1.0))
    return w


# per-grade rendering parameters
_JOINT_STYLE = {
    #  edge softness, width jitter, notches, notch radius, widening, sclerosis, line visibility
    0: dict(soft=0.35, jitter=0.0, notches=0, notch_r=(0, 0), widen=0.0, sclerosis=0.0, visible=1.0),
    1: dict(soft=1.3, jitter=0.6, notches=0, notch_r=(0, 0), widen=0.0, sclerosis=0.0, visible=0.9),
    2: dict(soft=0.9, jitter=0.8, notches=4, notch_r=(2.0, 3.0), widen=0.5, sclerosis=0.35, visible=1.0),
    3: dict(soft=0.9, jitter=1.2, notches=8, notch_r=(3.0, 4.5), widen=3.0, sclerosis=0.55, visible=1.0),
    4: dict(soft=1.5, jitter=0.5, notches=0, notch_r=(0, 0), widen=0.0, sclerosis=0.18, visible=0.15),
}


def _render_joint(edge: _Edge, grade: int, rng, iliac: np.ndarray, bone_level: np.ndarray,
                  radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Additive intensity change for one joint; confined to 0 < dist <= radius on the iliac side."""
    st = _JOINT_STYLE[grade]
    seg_len = max(edge.u_in - edge.u_out, 1.0)
    t = np.clip((edge.along - edge.u_out) / seg_len, 0.0, 1.0)
    # smooth random profile along the joint
    knots = rng.standard_normal(9)
    wobble = np.interp(t, np.linspace(0, 1, 9), knots)
    width = BASE_GAP + st["widen"] * (0.6 + 0.4 * np.tanh(wobble)) + st["jitter"] * 0.5 * np.sin(
        2 * np.pi * (3 * t + rng.uniform()))
    width = np.clip(width, 1.5, radius / 2)
    d = edge.dist
    support = iliac & (d > 0) & (d <= radius) & edge.on_segment()
    taper = np.clip((radius - d) / 2.0, 0.0, 1.0)

    gap_dark = _soft_step(width - d, st["soft"]) * _soft_step(d, 0.3)
    delta = -PELVIS_BONE * st["visible"] * gap_dark

    if st["sclerosis"] > 0:
        band = np.exp(-0.5 * ((d - (width + 3.5)) / 2.5) ** 2)
        delta += PELVIS_BONE * st["sclerosis"] * band * (0.8 + 0.2 * np.tanh(wobble))

    for _ in range(st["notches"]):
        u = edge.u_out + rng.uniform(0.1, 0.9) * seg_len
        r = rng.uniform(*st["notch_r"])
        offset = width_at(u, edge, width) + 0.5 * r
        dist = np.hypot(edge.along - u, d - offset)
        alpha = np.clip(r + 0.5 - dist, 0.0, 1.0)
        delta -= 0.85 * bone_level * alpha * (1.0 - gap_dark)

    delta *= support * taper
    line = support & (gap_dark * st["visible"] > 0.5)
    return delta, line


def width_at(u: float, edge: _Edge, width: np.ndarray) -> float:
    """Joint-space width at arc position ``u`` (looked up on the nearest pixel of the seam)."""
    score = np.abs(edge.along - u) + np.abs(edge.dist - 1.0)
    return float(width.flat[int(np.argmin(score))])


def _distractors(level, rng, yy, xx, H, W, cx) -> np.ndarray:
    out = np.zeros((H, W))
    # soft-tissue texture
    out += level * 2500.0 * _smooth_field(rng, (H, W), 14.0)
    # hip joints: femoral head with a joint-space arc and random marginal notches
    for sign in (-1, 1):
        hy = rng.uniform(0.86, 0.94) * H
        hx = cx + sign * rng.uniform(0.33, 0.38) * W
        hr = rng.uniform(0.07, 0.09) * W
        rr = np.hypot(yy - hy, xx - hx)
        head = _soft_step(hr - rr, 1.0)
        arc = np.exp(-0.5 * ((rr - hr - 3.0) / 1.5) ** 2) * (yy < hy + 0.3 * hr)
        out += level * (9000.0 * head - 7000.0 * arc)
        for _ in range(rng.poisson(4 * level)):
            ang = rng.uniform(-np.pi, 0)
            ny, nx = hy + (hr + 2) * np.sin(ang), hx + (hr + 2) * np.cos(ang)
            nr = rng.uniform(2.0, 5.0)
            out -= level * 9000.0 * np.clip(nr + 0.5 - np.hypot(yy - ny, xx - nx), 0, 1)
        # sclerotic acetabular roof
        out += level * rng.uniform(0, 5000) * np.exp(-0.5 * ((rr - hr - 8.0) / 3.0) ** 2) * (yy < hy)
    # pubic symphysis: dark vertical cleft flanked by bone
    sy0 = rng.uniform(0.80, 0.86) * H
    cleft_w = rng.uniform(2.0, 6.0)
    vert = _soft_step(yy - sy0, 2.0)
    out += level * vert * (6000.0 * (np.abs(xx - cx) < 0.05 * W)
                           - 8000.0 * _soft_step(cleft_w - np.abs(xx - cx), 1.0))
    # bowel gas
    for _ in range(rng.poisson(6 * level)):
        gy, gx = rng.uniform(0.3, 1.0) * H, rng.uniform(0.15, 0.85) * W
        gs = rng.uniform(4.0, 14.0)
        out -= level * rng.uniform(3000, 8000) * np.exp(-0.5 * ((yy - gy) ** 2 + (xx - gx) ** 2) / gs ** 2)
    return out


# ---------------------------------------------------------------------------
# corpora


def prevalence_matched_distribution(prevalence: float) -> np.ndarray:
    """5x5 joint grade distribution with the requested mNY-positive mass.

    Mass is uniform within the positive and within the negative grade pairs.
    """
    if not 0.0 <= prevalence <= 1.0:
        raise InvalidSpecError("prevalence must lie in [0, 1]")
    pos = np.array([[mny_positive(l, r) for r in range(5)] for l in range(5)])
    dist = np.where(pos, prevalence / pos.sum(), (1 - prevalence) / (~pos).sum())
    return dist


def _grade_table(grade_distribution) -> np.ndarray:
    d = np.asarray(grade_distribution, dtype=float)
    if d.shape == (5,):
        d = np.outer(d, d)
    if d.shape != (5, 5):
        raise InvalidSpecError("grade_distribution must have 5 entries (per joint) or 5x5 (joint)")
    if (d < 0).any() or abs(d.sum() - 1.0) > 1e-9:
        raise InvalidSpecError("grade_distribution must be non-negative and sum to 1")
    return d / d.sum()


def sample_grades(grade_distribution, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    table = _grade_table(grade_distribution)
    flat = rng.choice(25, size=n, p=table.ravel())
    return [(int(k // 5), int(k % 5)) for k in flat]


def derive_seed(*parts: int) -> int:
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass
class CorpusConfig:
    n: int
    grade_distribution: object = None
    distractor_level: float = 0.5
    seed: int = 0
    noise_sigma: float = 300.0
    width: int = 628
    height: int = 416
    cohort_tag: str = "synthetic"
    id_prefix: str = "ph"

    def validate(self) -> None:
        if self.n < 1:
            raise InvalidSpecError("n must be >= 1")
        if self.grade_distribution is None:
            self.grade_distribution = np.full(5, 0.2)
        _grade_table(self.grade_distribution)


def corpus_plan(config: CorpusConfig) -> list[tuple[str, PhantomSpec]]:
    """Sample ids and phantom specs of a corpus, without rendering."""
    config.validate()
    rng = np.random.default_rng(derive_seed(config.seed, 0))
    grades = sample_grades(config.grade_distribution, config.n, rng)
    plan = []
    for i, (gl, gr) in enumerate(grades):
        spec = PhantomSpec(seed=derive_seed(config.seed, 1, i), width=config.width,
                           height=config.height, grade_left=gl, grade_right=gr,
                           distractor_level=config.distractor_level,
                           noise_sigma=config.noise_sigma)
        plan.append((f"{config.id_prefix}{i:05d}", spec))
    return plan


def generate_corpus(config: CorpusConfig, out_dir) -> Manifest:
    """Render ``config.n`` phantoms into ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc
    entries = []
    for sample_id, spec in corpus_plan(config):
        sample = generate_phantom(spec)
        image_rel, mask_rel = f"images/{sample_id}.png", f"masks/{sample_id}.png"
        write_png(out_dir / image_rel, sample.image)
        write_png(out_dir / mask_rel, sample.mask)
        entries.append(ManifestEntry(
            sample_id=sample_id, image_path=image_rel, mask_path=mask_rel,
            grades=sample.grades, label=sample.label, cohort_tag=config.cohort_tag,
            truth_boxes=sample.truth_boxes.to_dict()))
    manifest = Manifest(entries, config.seed, GENERATOR_VERSION, out_dir)
    manifest.save(out_dir / "manifest.json")
    log.info("wrote %d phantoms to %s", len(entries), out_dir)
    return manifest


def near_miss(grades) -> bool:
    """Sub-threshold grade pattern with visible change on at least one side."""
    gl, gr = grades
    return not mny_positive(gl, gr) and gl + gr >= 2


def synth_followup(manifest: Manifest, progression_rate: float, high_risk_boost: float,
                   seed: int) -> FollowUpManifest:
    """Two-year follow-up labels with a planted near-miss progression signal.

    Baseline-negative samples progress with probability ``progression_rate``,
    raised to ``progression_rate + high_risk_boost`` (capped at 1) for near-miss
    grade patterns. Baseline positives stay positive.
    """
    for name, v in (("progression_rate", progression_rate), ("high_risk_boost", high_risk_boost)):
        if not 0.0 <= v <= 1.0:
            raise InvalidSpecError(f"{name} must lie in [0, 1]")
    rng = np.random.default_rng(derive_seed(seed, 2))
    entries = []
    for e in sorted(manifest.entries, key=lambda e: e.sample_id):
        u = rng.uniform()
        if e.label == 1:
            follow = 1
        else:
            p = min(1.0, progression_rate + (high_risk_boost if near_miss(e.grades) else 0.0))
            follow = int(u < p)
        entries.append(FollowUpEntry(e.sample_id, int(e.label), follow, 24))
    return FollowUpManifest(entries, seed)
