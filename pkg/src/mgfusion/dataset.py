"""Feature videos: synthetic generation, text I/O, length normalisation, triplets."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class Segment:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class VideoFeatures:
    id: str
    class_label: str
    frames: np.ndarray
    annotations: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"{self.id}: frames must be a non-empty L x d matrix")
        for seg in self.annotations:
            if seg.end > self.length:
                raise ValueError(f"{self.id}: annotation {seg} exceeds length {self.length}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    subactions_per_class: int = 3
    feature_dim: int = 32
    video_length_range: tuple[int, int] = (24, 64)
    action_length_range: tuple[int, int] = (8, 24)
    noise_sigma: float = 0.1
    permutation_probability: float = 0.5
    speed_jitter_range: tuple[float, float] = (0.75, 1.25)
    videos_per_class: int = 20
    train_classes: int = 8
    val_classes: int = 0
    test_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        def bad(name, why):
            raise ValueError(f"{name}: {why}")

        for name in ("num_classes", "subactions_per_class", "feature_dim", "videos_per_class"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("video_length_range", "action_length_range", "speed_jitter_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                bad(name, f"empty range [{lo}, {hi}]")
            if lo <= 0:
                bad(name, "lower bound must be positive")
        if self.action_length_range[0] > self.video_length_range[0]:
            bad("action_length_range", "minimum action longer than the shortest video")
        if self.noise_sigma < 0:
            bad("noise_sigma", "must be >= 0")
        if not 0.0 <= self.permutation_probability <= 1.0:
            bad("permutation_probability", "must lie in [0, 1]")
        if min(self.train_classes, self.val_classes, self.test_classes) < 0:
            bad("train_classes", "split sizes must be >= 0")
        if self.train_classes + self.val_classes + self.test_classes != self.num_classes:
            bad("num_classes", "must equal train_classes + val_classes + test_classes")


@dataclass
class Corpus:
    videos: list[VideoFeatures]
    splits: dict[str, str]  # class label -> split name

    def __post_init__(self):
        for label, split in self.splits.items():
            if split not in SPLITS:
                raise ValueError(f"class {label}: unknown split {split!r}")
        self._by_id = {v.id: v for v in self.videos}
        if len(self._by_id) != len(self.videos):
            raise ValueError("duplicate video ids in corpus")

    def video(self, vid: str) -> VideoFeatures:
        return self._by_id[vid]

    def classes(self, split: str) -> list[str]:
        return sorted(c for c, s in self.splits.items() if s == split)

    def videos_in(self, split: str) -> list[VideoFeatures]:
        wanted = set(self.classes(split))
        return [v for v in self.videos if v.class_label in wanted]

    def by_class(self, split: str) -> dict[str, list[VideoFeatures]]:
        out: dict[str, list[VideoFeatures]] = defaultdict(list)
        for v in self.videos_in(split):
            out[v.class_label].append(v)
        return dict(out)

    @property
    def dim(self) -> int:
        return self.videos[0].dim

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for v in self.videos:
            h.update(f"{v.id}|{v.class_label}|{self.splits.get(v.class_label)}|".encode())
            h.update(repr([(s.start, s.end) for s in v.annotations]).encode())
            h.update(v.frames.tobytes())
        return h.hexdigest()[:16]


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Class-labelled videos, each holding one action built from sub-action prototypes.

    Same-class videos share prototypes but may play the sub-actions in a
    different order and at different speeds; background frames carry no
    prototype, only the Gaussian noise that every frame receives.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    S, d = spec.subactions_per_class, spec.feature_dim
    prototypes = _unit_rows(rng.standard_normal((spec.num_classes, S, d)))

    videos = []
    for c in range(spec.num_classes):
        label = f"class{c:02d}"
        for v in range(spec.videos_per_class):
            L = int(rng.integers(spec.video_length_range[0], spec.video_length_range[1] + 1))
            hi = min(spec.action_length_range[1], L)
            A = int(rng.integers(spec.action_length_range[0], hi + 1))
            order = rng.permutation(S)
            if rng.random() >= spec.permutation_probability:
                order = np.arange(S)
            speeds = rng.uniform(*spec.speed_jitter_range, size=S)
            durations = np.maximum(1, np.rint(A / S * speeds)).astype(int)
            while durations.sum() > L:
                durations[np.argmax(durations)] -= 1
            total = int(durations.sum())
            start = int(rng.integers(0, L - total + 1))

            frames = np.zeros((L, d))
            t = start
            for sub, dur in zip(order, durations):
                frames[t:t + dur] = prototypes[c, sub]
                t += dur
            frames = frames + spec.noise_sigma * rng.standard_normal((L, d))
            videos.append(VideoFeatures(f"{label}_v{v:03d}", label,
                                        frames, [Segment(start, start + total)]))

    labels = [f"class{c:02d}" for c in range(spec.num_classes)]
    shuffled = [labels[i] for i in rng.permutation(spec.num_classes)]
    n_tr, n_va = spec.train_classes, spec.val_classes
    splits = {}
    for i, label in enumerate(shuffled):
        splits[label] = "train" if i < n_tr else "val" if i < n_tr + n_va else "test"
    return Corpus(videos, splits)


def resample_indices(L: int, T: int) -> np.ndarray:
    """Equidistant row picks round(i (L-1)/(T-1)), half rounded up, in exact integers."""
    if T == 1:
        return np.zeros(1, dtype=int)
    i = np.arange(T)
    return (2 * i * (L - 1) + (T - 1)) // (2 * (T - 1))


def resample_or_pad(frames: np.ndarray, T: int) -> tuple[np.ndarray, int]:
    L, d = frames.shape
    if L < 1 or T < 1:
        raise ValueError(f"need L >= 1 and T >= 1, got L={L}, T={T}")
    if L > T:
        return frames[resample_indices(L, T)].copy(), T
    out = np.zeros((T, d))
    out[:L] = frames
    return out, L


@dataclass
class Triplet:
    q: np.ndarray
    query_video: VideoFeatures
    query_segment: Segment
    p_video: VideoFeatures
    n_video: VideoFeatures


def sample_triplet(corpus: Corpus, rng: np.random.Generator, T: int,
                   split: str = "train") -> Triplet:
    groups = {c: vs for c, vs in corpus.by_class(split).items()}
    annotated = {c: [v for v in vs if v.annotations] for c, vs in groups.items()}
    anchors = [c for c in sorted(groups) if annotated[c] and len(groups[c]) >= 2]
    if len(groups) < 2 or not anchors:
        raise SamplingError(f"{split} split needs >= 2 classes and a class with >= 2 videos")
    label = anchors[int(rng.integers(len(anchors)))]
    src = annotated[label][int(rng.integers(len(annotated[label])))]
    seg = src.annotations[int(rng.integers(len(src.annotations)))]
    positives = [v for v in groups[label] if v.id != src.id and v.annotations]
    if not positives:
        raise SamplingError(f"class {label} has no annotated positive besides {src.id}")
    pos = positives[int(rng.integers(len(positives)))]
    others = [c for c in sorted(groups) if c != label and annotated[c]]
    if not others:
        raise SamplingError("no annotated negative class available")
    neg_label = others[int(rng.integers(len(others)))]
    neg = annotated[neg_label][int(rng.integers(len(annotated[neg_label])))]
    q, _ = resample_or_pad(src.frames[seg.start:seg.end], T)
    return Triplet(q, src, seg, pos, neg)


# ---------------------------------------------------------------- file formats


def save_feature_file(video: VideoFeatures, path) -> None:
    lines = [f"{video.length} {video.dim}", f"class {video.class_label}",
             " ".join(["annotations"] + [f"{s.start} {s.end}" for s in video.annotations])]
    lines += [" ".join(repr(float(x)) for x in row) for row in video.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def load_feature_file(path, video_id: str | None = None) -> VideoFeatures:
    path = Path(path)
    lines = path.read_text().splitlines()

    def fail(lineno, msg):
        raise FormatError(f"{path}: line {lineno}: {msg}")

    if len(lines) < 3:
        fail(len(lines) + 1, "missing header lines")
    head = lines[0].split()
    if len(head) != 2 or not all(h.isdigit() for h in head):
        fail(1, f"expected 'L d', got {lines[0]!r}")
    L, d = int(head[0]), int(head[1])
    cls = lines[1].split()
    if len(cls) != 2 or cls[0] != "class":
        fail(2, f"expected 'class <label>', got {lines[1]!r}")
    ann = lines[2].split()
    if not ann or ann[0] != "annotations" or len(ann) % 2 == 0:
        fail(3, f"expected 'annotations s1 e1 ...', got {lines[2]!r}")
    try:
        nums = [int(x) for x in ann[1:]]
        segments = [Segment(nums[i], nums[i + 1]) for i in range(0, len(nums), 2)]
    except ValueError as exc:
        fail(3, str(exc))
    frames = np.empty((L, d))
    for r in range(L):
        lineno = 4 + r
        if lineno > len(lines):
            fail(lineno, f"expected frame row {r + 1} of {L}, got end of file")
        parts = lines[lineno - 1].split()
        if len(parts) != d:
            fail(lineno, f"frame row {r + 1} has {len(parts)} values, expected {d}")
        try:
            frames[r] = [float(x) for x in parts]
        except ValueError as exc:
            fail(lineno, f"unparsable number: {exc}")
    if any(line.strip() for line in lines[3 + L:]):
        fail(4 + L, f"trailing data after {L} frame rows")
    try:
        return VideoFeatures(video_id or path.stem, cls[1], frames, segments)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    lines = []
    for v in corpus.videos:
        rel = Path("videos") / f"{v.id}.feat"
        save_feature_file(v, out_dir / rel)
        lines.append(str(rel))
    for label in sorted(corpus.splits):
        lines.append(f"split {label} {corpus.splits[label]}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(manifest) -> Corpus:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    base = manifest.parent
    videos, splits = [], {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "split":
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise FormatError(f"{manifest}: line {lineno}: bad split directive {line!r}")
            splits[parts[1]] = parts[2]
        else:
            path = Path(line.strip())
            videos.append(load_feature_file(path if path.is_absolute() else base / path))
    if not videos:
        raise FormatError(f"{manifest}: no feature files listed")
    missing = {v.class_label for v in videos} - set(splits)
    if missing:
        raise FormatError(f"{manifest}: no split directive for classes {sorted(missing)}")
    return Corpus(videos, splits)
