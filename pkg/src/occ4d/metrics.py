"""Distribution metrics, the clip sampling protocol, BEV features and the rubric judge.

Feature extractors are pluggable: every metric takes plain (N, d) matrices.
The BEV extractor here is a light stand-in for pretrained image/video
networks, built from class histograms and occupied-cell centroids.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import rel_entr

from .errors import (
    ClipTooShort,
    DegenerateCovariance,
    EndpointUnreachable,
    MalformedJudgeReply,
    RowNotNormalized,
    TooFewPoints,
)
from .grid import FREE, VEHICLE, SemanticGrid, bev_classes

COV_EPS = 1e-6


@dataclass
class FeatureSet:
    values: np.ndarray
    extractor_id: str = "unknown"

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("features must be finite")

    def __len__(self):
        return self.values.shape[0]


def _values(x):
    return x.values if isinstance(x, FeatureSet) else np.atleast_2d(np.asarray(x, np.float64))


# ---------------------------------------------------------------- Fréchet distance

def gaussian_stats(x):
    v = _values(x)
    if v.shape[0] < 2:
        raise TooFewPoints("covariance needs at least two samples")
    return v.mean(axis=0), np.atleast_2d(np.cov(v, rowvar=False))


def _sqrt_psd(m):
    w, q = np.linalg.eigh((m + m.T) / 2)
    return (q * np.sqrt(np.clip(w, 0, None))) @ q.T


def frechet_distance(stats1, stats2, eps=COV_EPS):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at 0.

    Both covariances get ``eps * I`` before use.
    """
    mu1, s1 = stats1
    mu2, s2 = stats2
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    eye = np.eye(s1.shape[0])
    s1, s2 = s1 + eps * eye, s2 + eps * eye
    try:
        r1 = _sqrt_psd(s1)
        w = np.linalg.eigvalsh(r1 @ s2 @ r1)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance(str(exc)) from None
    tr_cross = np.sum(np.sqrt(np.clip(w, 0, None)))
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_cross)
    return max(d, 0.0)


# ---------------------------------------------------------------- kernel MMD

def poly_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2(x, y, estimator="unbiased"):
    kxx, kyy, kxy = poly_kernel(x, x), poly_kernel(y, y), poly_kernel(x, y)
    n, m = len(x), len(y)
    if estimator == "biased":
        return float(kxx.mean() + kyy.mean() - 2 * kxy.mean())
    if estimator != "unbiased":
        raise ValueError(f"unknown estimator {estimator!r}")
    sx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    sy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sx + sy - 2 * kxy.mean())


def kid(x, y, estimator="unbiased", block_size=None, n_blocks=None, seed=0):
    """Squared MMD under the cubic polynomial kernel (x.y / d + 1)^3.

    With ``block_size`` set, returns the mean over ``n_blocks`` random
    subsets of that size (drawn without replacement within a block).
    """
    x, y = _values(x), _values(y)
    if len(x) < 2 or len(y) < 2:
        raise TooFewPoints("KID needs at least two samples per set")
    if block_size is None or (block_size >= len(x) and block_size >= len(y)):
        return mmd2(x, y, estimator)
    return float(np.mean(kid_blocks(x, y, estimator, block_size, n_blocks, seed)))


def kid_blocks(x, y, estimator="unbiased", block_size=50, n_blocks=None, seed=0):
    x, y = _values(x), _values(y)
    bs = min(block_size, len(x), len(y))
    n_blocks = n_blocks or max(1, min(len(x), len(y)) // bs)
    rng = np.random.default_rng(seed)
    return np.array([mmd2(x[rng.choice(len(x), bs, replace=False)],
                          y[rng.choice(len(y), bs, replace=False)], estimator)
                     for _ in range(n_blocks)])


# ---------------------------------------------------------------- precision / recall

def _knn_radii(v, k):
    d = cdist(v, v)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def _coverage(ref, radii, query):
    return float(np.mean(np.any(cdist(query, ref) <= radii[None, :], axis=1)))


def precision_recall(real, gen, k=3):
    """k-NN manifold precision (gen inside real) and recall (real inside gen)."""
    r, g = _values(real), _values(gen)
    if len(r) <= k or len(g) <= k:
        raise TooFewPoints(f"both sets need more than k={k} points")
    precision = _coverage(r, _knn_radii(r, k), g)
    recall = _coverage(g, _knn_radii(g, k), r)
    return precision, recall


# ---------------------------------------------------------------- inception-style score

def inception_style_score(probs, atol=1e-5):
    p = np.atleast_2d(np.asarray(probs, np.float64))
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise RowNotNormalized("every row must be a probability vector")
    marginal = p.mean(axis=0, keepdims=True)
    kl = rel_entr(p, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


# ---------------------------------------------------------------- sampling protocol

PROTOCOL_PRESETS = {
    "paper": {"clips_n": 10000, "clip_len": 16, "frames_per_clip": 5},
    "desk": {"clips_n": 200, "clip_len": 16, "frames_per_clip": 5},
}


def frame_indices(clip_len, n):
    """Evenly spaced indices ceil(i (clip_len - 1) / (n - 1)), i = 0..n-1."""
    if n < 1 or n > clip_len:
        raise ValueError(f"cannot pick {n} frames from {clip_len}")
    if n == 1:
        return np.zeros(1, np.int64)
    i = np.arange(n)
    return -((-i * (clip_len - 1)) // (n - 1))


def _frames_of(clip):
    return clip.ids if isinstance(clip, SemanticGrid) else np.asarray(clip)


def clip_protocol(clips, clips_n=200, clip_len=16, frames_per_clip=5, seed=0):
    """Draw ``clips_n`` windows of ``clip_len`` frames and the frames inside them.

    Clips are picked uniformly (with replacement when more are requested
    than exist) and start offsets uniformly.  Returns (windows, frames):
    ``clips_n`` arrays of ``clip_len`` frames and ``clips_n * frames_per_clip``
    single frames.
    """
    clips = [_frames_of(c) for c in clips]
    if not clips:
        raise ValueError("no clips to sample from")
    shortest = min(c.shape[0] for c in clips)
    if clip_len > shortest:
        raise ClipTooShort(f"clip_len {clip_len} exceeds the shortest clip ({shortest} frames)")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(clips), clips_n, replace=clips_n > len(clips))
    idx = frame_indices(clip_len, frames_per_clip)
    windows, frames = [], []
    for c in pick:
        src = clips[c]
        start = int(rng.integers(0, src.shape[0] - clip_len + 1))
        win = src[start:start + clip_len]
        windows.append(win)
        frames.extend(win[i] for i in idx)
    return windows, frames


# ---------------------------------------------------------------- BEV features

def _bev_map(frame, free_id):
    frame = np.asarray(frame)
    return bev_classes(frame, free_id) if frame.ndim == 3 else frame


def occupied_centroid(bev, free_id=FREE, classes=None):
    """(x, y) mean index of cells that are not free (or belong to ``classes``).

    An empty selection falls back to the grid centre.
    """
    sel = np.isin(bev, list(classes)) if classes is not None else bev != free_id
    if not sel.any():
        return np.array([(bev.shape[0] - 1) / 2, (bev.shape[1] - 1) / 2])
    xs, ys = np.nonzero(sel)
    return np.array([xs.mean(), ys.mean()])


def frame_features(frame, num_classes=11, free_id=FREE):
    """K-bin normalised class histogram followed by the occupied centroid (voxel units)."""
    bev = _bev_map(frame, free_id)
    hist = np.bincount(bev.ravel(), minlength=num_classes)[:num_classes].astype(np.float64)
    return np.concatenate([hist / hist.sum(), occupied_centroid(bev, free_id)])


def video_features(clip, num_classes=11, free_id=FREE):
    """Mean frame features, then mean and std of the frame-to-frame centroid displacement."""
    per = np.stack([frame_features(f, num_classes, free_id) for f in _frames_of(clip)])
    disp = np.diff(per[:, -2:], axis=0) if len(per) > 1 else np.zeros((1, 2))
    return np.concatenate([per.mean(axis=0), disp.mean(axis=0), disp.std(axis=0)])


def bev_feature_extract(inputs, video=False, num_classes=11, free_id=FREE):
    """FeatureSet from frames ((X, Y, Z) ids or (X, Y) BEV maps) or clips.

    Frame layout: K histogram bins, centroid x, centroid y (width K + 2).
    Video layout: frame layout averaged over time, then mean dx, dy and
    std dx, dy of the centroid displacement (width K + 6).
    """
    fn = video_features if video else frame_features
    rows = [fn(x, num_classes, free_id) for x in inputs]
    return FeatureSet(np.stack(rows), "bev-video-v1" if video else "bev-frame-v1")


def class_track(clip, cls=VEHICLE, free_id=FREE):
    """Per-frame BEV centroid of one class (NaN where the class is absent)."""
    out = []
    for f in _frames_of(clip):
        sel = _bev_map(f, free_id) == cls
        if sel.any():
            xs, ys = np.nonzero(sel)
            out.append((xs.mean(), ys.mean()))
        else:
            out.append((np.nan, np.nan))
    return np.array(out)


def motion_direction(clip, cls=VEHICLE, axis=0, free_id=FREE):
    """+1 / -1 for the sign of the least-squares centroid velocity along ``axis``; 0 if unknown."""
    track = class_track(clip, cls, free_id)[:, axis]
    ok = np.isfinite(track)
    if ok.sum() < 2:
        return 0
    slope = np.polyfit(np.nonzero(ok)[0], track[ok], 1)[0]
    return int(np.sign(slope))


# ---------------------------------------------------------------- rubric judge

AXES = ("completeness", "structural", "semantic_alignment")


@dataclass
class RubricScore:
    completeness: int
    structural: int
    semantic_alignment: int
    justification: str = ""
    mean: float = field(init=False)

    def __post_init__(self):
        for a in AXES:
            v = getattr(self, a)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or not 1 <= v <= 5:
                raise MalformedJudgeReply(f"{a} must be an integer in [1, 5], got {v!r}")
        self.mean = (self.completeness + self.structural + self.semantic_alignment) / 3

    def to_dict(self):
        return asdict(self)


def parse_rubric(text):
    try:
        obj = json.loads(text)
    except (TypeError, ValueError) as exc:
        raise MalformedJudgeReply(f"reply is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedJudgeReply("reply must be a JSON object")
    missing = [a for a in AXES if a not in obj]
    if missing:
        raise MalformedJudgeReply(f"missing axes {missing}")
    just = obj.get("justification", "")
    if not isinstance(just, str):
        raise MalformedJudgeReply("justification must be a string")
    return RubricScore(*(obj[a] for a in AXES), justification=just)


def stub_judge(record):
    """Offline judge: scores derived from a hash of the caption (or prompt)."""
    if isinstance(record, str):
        caption = record
    elif isinstance(record, dict):
        caption = record.get("caption", record.get("prompt", ""))
    else:
        caption = getattr(record, "caption", "")
    h = hashlib.sha256(caption.encode()).digest()
    return RubricScore(1 + h[0] % 5, 1 + h[1] % 5, 1 + h[2] % 5, justification="offline stub")


def judge_endpoint(endpoint=None):
    return os.environ.get("OCCDIR_JUDGE_URL") or endpoint


def judge_body(render_paths, prompt):
    frames = []
    for p in render_paths:
        with open(p, "rb") as fh:
            frames.append(base64.b64encode(fh.read()).decode("ascii"))
    return {"prompt": prompt, "frames": frames, "rubric_version": "v1"}


def judge_request(render_paths, prompt, endpoint=None, timeout=30.0, attempts=3, backoff=0.5,
                  sleep=time.sleep):
    """POST the renders to a rubric judge and validate its reply.

    Transport failures and 5xx replies are retried with exponential backoff;
    4xx replies and malformed bodies fail immediately.
    """
    url = judge_endpoint(endpoint)
    if not url:
        raise EndpointUnreachable("no judge endpoint configured")
    data = json.dumps(judge_body(render_paths, prompt)).encode()
    last = None
    for attempt in range(attempts):
        req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return parse_rubric(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code < 500:
                raise MalformedJudgeReply(f"judge rejected the request: HTTP {exc.code}") from None
            last = exc
        except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
            last = exc
        if attempt + 1 < attempts:
            sleep(backoff * 2 ** attempt)
    raise EndpointUnreachable(f"judge at {url} failed after {attempts} attempts: {last}")


class RateLimiter:
    """At most one call start per ``interval`` seconds, shared across threads."""

    def __init__(self, interval=0.0):
        self.interval = interval
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        with self._lock:
            now = time.monotonic()
            delay = max(0.0, self._next - now)
            self._next = max(now, self._next) + self.interval
        if delay:
            time.sleep(delay)


def judge_many(jobs, endpoint=None, max_workers=4, min_interval=0.0, **kw):
    """Run ``judge_request`` over (render_paths, prompt) pairs with a concurrency cap."""
    limiter = RateLimiter(min_interval)

    def one(job):
        limiter.wait()
        return judge_request(job[0], job[1], endpoint, **kw)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, jobs))


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    fd: float
    kid: float
    precision: float
    recall: float
    is_score: float
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(real_clips, gen_clips, preset="desk", seed=0, k=3, kid_block=50, num_classes=11,
             **overrides):
    """Frame-level metric report for two sets of clips under a sampling preset."""
    proto = {**PROTOCOL_PRESETS[preset], **overrides}
    _, real_frames = clip_protocol(real_clips, seed=seed, **proto)
    _, gen_frames = clip_protocol(gen_clips, seed=seed + 1, **proto)
    fr = bev_feature_extract(real_frames, num_classes=num_classes)
    fg = bev_feature_extract(gen_frames, num_classes=num_classes)
    probs = fg.values[:, :num_classes]
    prec, rec = precision_recall(fr, fg, k)
    return MetricReport(
        fd=frechet_distance(gaussian_stats(fr), gaussian_stats(fg)),
        kid=kid(fr, fg, "unbiased", block_size=kid_block, seed=seed),
        precision=prec,
        recall=rec,
        is_score=inception_style_score(probs),
        config={"preset": preset, **proto, "seed": seed, "k": k, "kid_block": kid_block,
                "real_samples": len(fr), "gen_samples": len(fg), "extractor": fr.extractor_id},
    )
