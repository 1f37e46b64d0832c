"""Rating-study statistics: score fitting, adaptive pairing, golden
questions, predictivity measures, and decoder complexity accounting.

Pairwise outcomes are modeled with the classic logistic win curve
P(A beats B) = 1 / (1 + 10^((R_B - R_A)/400)). Scores minimize the
cross-entropy of observed choices via projected gradient descent with
backtracking (so the objective decreases monotonically), anchored to a
mean of 2000 points, with per-score excursions clamped to +-800 for
separable data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MethodArm",
    "RatingRecord",
    "EloState",
    "EloConfig",
    "ORIGINAL_ARM",
    "fit_elo",
    "select_pair",
    "golden_mix",
    "correlations",
    "percent_correct",
    "macs_per_pixel",
    "read_ratings",
    "write_rating",
]

#: Reserved arm id marking the hidden original in golden records.
ORIGINAL_ARM = "__original__"

ANCHOR = 2000.0
SCORE_CAP = 800.0
_LOG10_OVER_400 = math.log(10.0) / 400.0


@dataclass(frozen=True)
class MethodArm:
    id: str
    label: str = ""
    bpp: float = 0.0
    recon_dir: str = ""


@dataclass(frozen=True)
class RatingRecord:
    rater: str
    image: str
    crop: tuple[int, int]
    arm_a: str
    arm_b: str
    chosen: str  # "A" or "B"
    golden: bool = False
    timestamp: str = ""

    def __post_init__(self):
        if self.chosen not in ("A", "B"):
            raise ValueError(f"chosen must be 'A' or 'B', got {self.chosen!r}")
        if self.arm_a == self.arm_b and not self.golden:
            raise ValueError("identical arms are only allowed in golden records")

    def to_json(self) -> str:
        return json.dumps({
            "rater": self.rater, "image": self.image, "crop": list(self.crop),
            "arm_a": self.arm_a, "arm_b": self.arm_b, "chosen": self.chosen,
            "golden": self.golden, "timestamp": self.timestamp,
        })

    @staticmethod
    def from_json(line: str) -> "RatingRecord":
        d = json.loads(line)
        return RatingRecord(
            rater=d["rater"], image=d["image"], crop=tuple(d["crop"]),
            arm_a=d["arm_a"], arm_b=d["arm_b"], chosen=d["chosen"],
            golden=bool(d.get("golden", False)), timestamp=d.get("timestamp", ""),
        )


def write_rating(fh, record: RatingRecord) -> None:
    fh.write(record.to_json() + "\n")


def read_ratings(path) -> list[RatingRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RatingRecord.from_json(line))
    return out


@dataclass
class EloState:
    scores: dict[str, float]
    counts: dict[str, int]
    cross_entropy: float
    iterations: int
    clamped: list[str] = field(default_factory=list)
    components: int = 1
    golden_summary: dict[str, dict] = field(default_factory=dict)


@dataclass(frozen=True)
class EloConfig:
    tolerance: float = 1e-9
    max_iterations: int = 20000
    cap: float = SCORE_CAP


def win_probability(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def _components(arms: list[str], pairs: set[tuple[str, str]]) -> list[set[str]]:
    parent = {a: a for a in arms}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        parent[find(a)] = find(b)
    groups: dict[str, set[str]] = {}
    for a in arms:
        groups.setdefault(find(a), set()).add(a)
    return list(groups.values())


def fit_elo(ratings: list[RatingRecord], config: EloConfig = EloConfig()) -> EloState:
    """Cross-entropy score fit over non-golden ratings.

    Golden records are excluded from the fit and summarized per rater
    (a golden answer is correct when the chooser picked the original).
    """
    golden: dict[str, dict] = {}
    wins: dict[tuple[str, str], int] = {}
    arm_set: set[str] = set()
    counts: dict[str, int] = {}
    for rec in ratings:
        if rec.golden:
            g = golden.setdefault(rec.rater, {"asked": 0, "correct": 0})
            g["asked"] += 1
            chosen_arm = rec.arm_a if rec.chosen == "A" else rec.arm_b
            g["correct"] += int(chosen_arm == ORIGINAL_ARM)
            continue
        arm_set.update((rec.arm_a, rec.arm_b))
        counts[rec.arm_a] = counts.get(rec.arm_a, 0) + 1
        counts[rec.arm_b] = counts.get(rec.arm_b, 0) + 1
        winner, loser = (rec.arm_a, rec.arm_b) if rec.chosen == "A" else (rec.arm_b, rec.arm_a)
        wins[(winner, loser)] = wins.get((winner, loser), 0) + 1
    for rater, g in golden.items():
        g["accuracy"] = g["correct"] / g["asked"]
    if not wins:
        raise ValueError("no non-golden ratings to fit")

    arms = sorted(arm_set)
    comps = _components(arms, {(a, b) for a, b in wins})
    idx = {a: i for i, a in enumerate(arms)}
    n = len(arms)
    w_ab = np.zeros((n, n))
    for (a, b), c in wins.items():
        w_ab[idx[a], idx[b]] = c
    total_pairs = w_ab + w_ab.T

    def loss_grad(r):
        diff = (r[:, None] - r[None, :]) * _LOG10_OVER_400
        p = 1.0 / (1.0 + np.exp(-diff))  # P(i beats j)
        eps = 1e-300
        ll = -(w_ab * np.log(np.maximum(p, eps))).sum()
        # d(-log p_ij)/dr_i = -k (1 - p_ij); winners pull up, losers pull down
        scaled = w_ab * (1.0 - p)
        grad = -_LOG10_OVER_400 * (scaled.sum(axis=1) - scaled.sum(axis=0))
        return ll, grad

    comp_of = np.zeros(n, dtype=int)
    for ci, comp in enumerate(comps):
        for a in comp:
            comp_of[idx[a]] = ci

    def project(r):
        # re-anchor each connected component to the mean, clamp excursions
        out = r.copy()
        for ci in range(len(comps)):
            mask = comp_of == ci
            out[mask] -= out[mask].mean() - ANCHOR
        return np.clip(out, ANCHOR - config.cap, ANCHOR + config.cap)

    r = np.full(n, ANCHOR)
    ll, grad = loss_grad(r)
    lr = 1.0 / max(total_pairs.sum() * _LOG10_OVER_400 ** 2, 1e-12)  # ~inverse curvature
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        step = lr
        for _ in range(60):
            r_new = project(r - step * grad)
            ll_new, grad_new = loss_grad(r_new)
            if ll_new <= ll + 1e-15:
                break
            step *= 0.5
        moved = np.abs(r_new - r).max()
        r, ll, grad = r_new, ll_new, grad_new
        if moved < config.tolerance:
            break

    clamped = [arms[i] for i in range(n)
               if abs(r[i] - ANCHOR) >= config.cap - 1e-9]
    n_ratings = int(w_ab.sum())
    return EloState(
        scores={a: float(r[idx[a]]) for a in arms},
        counts={a: counts.get(a, 0) for a in arms},
        cross_entropy=float(ll / n_ratings),
        iterations=iterations,
        clamped=clamped,
        components=len(comps),
        golden_summary=golden,
    )


def select_pair(state: EloState | None, arms: list[MethodArm]) -> tuple[MethodArm, MethodArm]:
    """Pair maximizing predicted-outcome variance times uncertainty.

    Score: p(1-p) * (u_a + u_b) with u = 1/(1 + rating count); ties break
    lexicographically by the (sorted) id pair, so replays are exact.
    """
    if len(arms) < 2:
        raise ValueError("need at least two arms to pair")
    ordered = sorted(arms, key=lambda a: a.id)
    best = None
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            a, b = ordered[i], ordered[j]
            ra = state.scores.get(a.id, ANCHOR) if state else ANCHOR
            rb = state.scores.get(b.id, ANCHOR) if state else ANCHOR
            ca = state.counts.get(a.id, 0) if state else 0
            cb = state.counts.get(b.id, 0) if state else 0
            p = win_probability(ra, rb)
            gain = p * (1.0 - p) * (1.0 / (1 + ca) + 1.0 / (1 + cb))
            key = (-gain, a.id, b.id)
            if best is None or key < best[0]:
                best = (key, (a, b))
    return best[1]


def golden_mix(pair: tuple[MethodArm, MethodArm], rate: float, rng) -> tuple[MethodArm, MethodArm, bool]:
    """With probability ``rate``, replace one side by the hidden original."""
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"golden rate must lie in [0, 1], got {rate}")
    a, b = pair
    if rng.random() < rate:
        original = MethodArm(ORIGINAL_ARM, label="original")
        if rng.random() < 0.5:
            return original, b, True
        return a, original, True
    return a, b, False


# ---------------------------------------------------------------------------
# Predictivity statistics
# ---------------------------------------------------------------------------


def _rank_average(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def correlations(x, y) -> tuple[float, float]:
    """(Pearson, Spearman with average ranks); nan sentinel on zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("correlations need two equal-length vectors of length >= 3")
    if x.std() == 0.0 or y.std() == 0.0:
        return math.nan, math.nan

    def pearson(a, b):
        a = a - a.mean()
        b = b - b.mean()
        return float((a * b).sum() / math.sqrt((a * a).sum() * (b * b).sum()))

    return pearson(x, y), pearson(_rank_average(x), _rank_average(y))


def percent_correct(metric_scores: dict, ratings: list[RatingRecord]) -> tuple[float, int]:
    """Fraction of non-golden choices the metric predicts; ties count half.

    metric_scores maps (image, crop, arm_id) -> distance (lower = closer
    to the original). Returns (fraction, number of ratings skipped for
    missing metric values).
    """
    correct = 0.0
    used = 0
    missing = 0
    for rec in ratings:
        if rec.golden:
            continue
        ka = (rec.image, rec.crop, rec.arm_a)
        kb = (rec.image, rec.crop, rec.arm_b)
        if ka not in metric_scores or kb not in metric_scores:
            missing += 1
            continue
        da, db = metric_scores[ka], metric_scores[kb]
        used += 1
        if da == db:
            correct += 0.5
        else:
            predicted = "A" if da < db else "B"
            correct += float(predicted == rec.chosen)
    if used == 0:
        raise ValueError("no ratings with metric coverage")
    return correct / used, missing


# ---------------------------------------------------------------------------
# Decoder complexity
# ---------------------------------------------------------------------------


def ingest_archive(path) -> list[RatingRecord]:
    """Best-effort reader for externally published rating archives.

    Accepts a directory (or single file) of JSONL/CSV rating tables with
    the same record semantics as :class:`RatingRecord`; column aliases
    (rater/worker/user, method_a/arm_a, ...) are normalized. Returns the
    flattened record list.
    """
    import csv as _csv

    p = Path(path) if not isinstance(path, Path) else path
    files = sorted(p.rglob("*")) if p.is_dir() else [p]
    alias = {
        "rater": ("rater", "rater_id", "worker", "worker_id", "user"),
        "image": ("image", "image_id", "img"),
        "arm_a": ("arm_a", "method_a", "a", "left"),
        "arm_b": ("arm_b", "method_b", "b", "right"),
        "chosen": ("chosen", "choice", "selected", "winner"),
        "golden": ("golden", "is_golden", "gold"),
    }

    def pick(row, key, default=None):
        for name in alias[key]:
            if name in row and row[name] != "":
                return row[name]
        return default

    def to_record(row) -> RatingRecord | None:
        rater = pick(row, "rater")
        arm_a, arm_b = pick(row, "arm_a"), pick(row, "arm_b")
        chosen = pick(row, "chosen")
        if None in (rater, arm_a, arm_b, chosen):
            return None
        if chosen not in ("A", "B"):
            chosen = "A" if str(chosen) in (str(arm_a), "a", "left", "1") else "B"
        golden = str(pick(row, "golden", "false")).lower() in ("1", "true", "yes")
        crop = (int(row.get("crop_y", 0) or 0), int(row.get("crop_x", 0) or 0))
        return RatingRecord(rater=str(rater), image=str(pick(row, "image", "?")),
                            crop=crop, arm_a=str(arm_a), arm_b=str(arm_b),
                            chosen=chosen, golden=golden)

    out: list[RatingRecord] = []
    for f in files:
        if not f.is_file():
            continue
        try:
            if f.suffix in (".jsonl", ".ndjson"):
                for line in f.read_text().splitlines():
                    if line.strip():
                        rec = to_record(json.loads(line))
                        if rec:
                            out.append(rec)
            elif f.suffix == ".csv":
                with open(f, newline="") as fh:
                    for row in _csv.DictReader(fh):
                        rec = to_record(row)
                        if rec:
                            out.append(rec)
        except (OSError, ValueError, KeyError):
            continue
    return out


def macs_per_pixel(cfg, dims: tuple[int, int]) -> float:
    """Analytic multiply-accumulate count of the decoder, per output pixel.

    Counts: the entropy MLP once per latent element (over all arrays),
    4 MACs per output element for each bilinearly upsampled array (latent
    and common-randomness arrays whose source differs from the target),
    and the synthesis convolutions per pixel.
    """
    from .autodiff import CONTEXT_OFFSETS

    h, w = dims
    px = h * w
    in_dim = len(CONTEXT_OFFSETS) + 1
    per_element = 0
    ci = in_dim
    for co in list(cfg.entropy_hidden) + [2]:
        per_element += ci * co
        ci = co
    total_elements = 0
    upsample = 0
    for n in range(1, cfg.num_arrays + 1):
        hn, wn = -(-h // (1 << (n - 1))), -(-w // (1 << (n - 1)))
        total_elements += hn * wn
        if (hn, wn) != (h, w):
            upsample += 4 * px  # latent array resize
            upsample += 4 * px * cfg.cr_channels  # its randomness channels
    macs_entropy = per_element * total_elements

    macs_synth = 0
    ci = cfg.num_arrays * (1 + cfg.cr_channels)
    for k, co in cfg.synth_layers:
        macs_synth += k * k * ci * co * px
        ci = co
    return (macs_entropy + upsample + macs_synth) / px
