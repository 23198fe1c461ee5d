"""Black-box ownership verification.

A suspect model is queried on the secret keys through a top-k interface
only. Under the null hypothesis (the model never saw the protected data) the
number of keys whose label lands in the top-k is Binomial(K, k/C); the exact
upper tail of that distribution is the p-value. Independent runs are merged
with Fisher's method.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DETECTED = "detected"
NOT_DETECTED = "not-detected"
DEFAULT_ALPHA = 0.05
DEFAULT_K = 10
P_FLOOR = 1e-300


class VerificationAborted(RuntimeError):
    """The oracle failed or answered malformed lists; no verdict is produced."""


class PredictionLogError(ValueError):
    pass


def _logsumexp(vals: Sequence[float]) -> float:
    top = max(vals)
    if top == -math.inf:
        return -math.inf
    return top + math.log(math.fsum(math.exp(v - top) for v in vals))


def _log_comb(n: int, r: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


def binomial_pvalue(t: int, K: int, k: int, C: int) -> float:
    """Exact ``P(Z >= t)`` for ``Z ~ Binomial(K, k / C)``, summed in log space."""
    if not 1 <= k <= C:
        raise ValueError(f"need 1 <= k <= C, got k={k}, C={C}")
    if not 0 <= t <= K:
        raise ValueError(f"need 0 <= t <= K, got t={t}, K={K}")
    if t == 0 or k == C:
        return 1.0
    log_q = math.log(k) - math.log(C)
    log_r = math.log(C - k) - math.log(C)
    terms = [_log_comb(K, z) + z * log_q + (K - z) * log_r for z in range(t, K + 1)]
    return min(1.0, math.exp(_logsumexp(terms)))


def fisher_combine(pvalues: Sequence[float]) -> float:
    """Fisher's method with the closed-form chi-square survival for even degrees of freedom."""
    ps = [float(p) for p in pvalues]
    if not ps:
        raise ValueError("need at least one p-value")
    for p in ps:
        if not 0.0 < p <= 1.0 or math.isnan(p):
            raise ValueError(f"p-values must lie in (0, 1]; got {p!r} (floor zeros before combining)")
    half = -math.fsum(math.log(p) for p in ps)  # X / 2
    if half == 0.0:
        return 1.0
    m = len(ps)
    log_terms = [j * math.log(half) - math.lgamma(j + 1) for j in range(m)]
    return min(1.0, math.exp(_logsumexp(log_terms) - half))


def floor_pvalue(p: float, floor: float = P_FLOOR) -> float:
    return max(float(p), floor)


def threshold(K: int, k: int, C: int, alpha: float = DEFAULT_ALPHA) -> int | None:
    """Smallest count ``t`` with ``binomial_pvalue(t) <= alpha``; None if no count suffices."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    for t in range(K + 1):
        if binomial_pvalue(t, K, k, C) <= alpha:
            return t
    return None


def decide(pvalues: float | Sequence[float], alpha: float = DEFAULT_ALPHA) -> str:
    """``detected`` iff the (Fisher-combined) p-value is at most ``alpha``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if isinstance(pvalues, (int, float)):
        p = float(pvalues)
    else:
        p = fisher_combine([floor_pvalue(v) for v in pvalues])
    return DETECTED if p <= alpha else NOT_DETECTED


# ---------------------------------------------------------------- oracle side

Oracle = Callable[[object, int], Sequence[int]]


def _query(predict: Oracle, clip, k: int, C: int | None) -> list[int]:
    try:
        ranked = [int(c) for c in predict(clip, k)]
    except VerificationAborted:
        raise
    except Exception as exc:  # any oracle failure aborts verification
        raise VerificationAborted(f"oracle query failed: {exc}") from exc
    if len(ranked) < k:
        raise VerificationAborted(f"oracle returned {len(ranked)} classes, expected {k}")
    ranked = ranked[:k]
    if len(set(ranked)) != k:
        raise VerificationAborted(f"oracle returned duplicate classes: {ranked}")
    if C is not None and any(not 0 <= c < C for c in ranked):
        raise VerificationAborted(f"oracle returned a class outside [0, {C}): {ranked}")
    return ranked


def query_rankings(predict: Oracle, keys, k: int) -> list[list[int]]:
    """Top-k list for every key, in key order."""
    C = keys.config.C
    if not 1 <= k <= C:
        raise ValueError(f"need 1 <= k <= C, got k={k}, C={C}")
    return [_query(predict, e.clip, k, C) for e in keys.keys]


def counts_from_rankings(rankings: Sequence[Sequence[int]], labels: Sequence[int], k: int) -> int:
    return sum(1 for r, y in zip(rankings, labels) if y in r[:k])


def topk_key_accuracy(predict: Oracle, keys, k: int) -> int:
    """Number of keys whose label appears in the oracle's top-k answer."""
    return counts_from_rankings(query_rankings(predict, keys, k), keys.labels, k)


# ---------------------------------------------------------------- reports


@dataclass
class RunResult:
    """One suspect model: the ranked answers and everything derived from them."""

    rankings: list[list[int]]
    counts: dict[int, int]
    pvalues: dict[int, float]
    name: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rankings": self.rankings,
            "counts": {str(k): v for k, v in self.counts.items()},
            "pvalues": {str(k): v for k, v in self.pvalues.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            rankings=[list(map(int, r)) for r in d["rankings"]],
            counts={int(k): int(v) for k, v in d["counts"].items()},
            pvalues={int(k): float(v) for k, v in d["pvalues"].items()},
            name=d.get("name", ""),
        )


def score_rankings(rankings, labels, C: int, name: str = "") -> RunResult:
    K = len(labels)
    k_max = min(len(r) for r in rankings)
    counts = {k: counts_from_rankings(rankings, labels, k) for k in range(1, k_max + 1)}
    pvalues = {k: binomial_pvalue(t, K, k, C) for k, t in counts.items()}
    return RunResult([list(r) for r in rankings], counts, pvalues, name)


@dataclass
class VerificationReport:
    K: int
    C: int
    k: int
    alpha: float
    key_ids: list[str]
    labels: list[int]
    runs: list[RunResult]
    tau: int | None
    combined_p: float
    verdict: str
    p_floor: float = P_FLOOR
    combined_curve: dict[int, float] = field(default_factory=dict)

    @property
    def counts(self) -> dict[int, int]:
        return self.runs[0].counts

    @property
    def pvalues(self) -> dict[int, float]:
        return self.runs[0].pvalues

    @property
    def run_pvalues(self) -> list[float]:
        return [r.pvalues[self.k] for r in self.runs]

    @property
    def detected(self) -> bool:
        return self.verdict == DETECTED

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs"] = [r.to_dict() for r in self.runs]
        d["combined_curve"] = {str(k): v for k, v in self.combined_curve.items()}
        d["run_pvalues"] = self.run_pvalues
        d["format"] = "taggants-verification/1"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(
            K=int(d["K"]),
            C=int(d["C"]),
            k=int(d["k"]),
            alpha=float(d["alpha"]),
            key_ids=list(d["key_ids"]),
            labels=[int(v) for v in d["labels"]],
            runs=[RunResult.from_dict(r) for r in d["runs"]],
            tau=None if d["tau"] is None else int(d["tau"]),
            combined_p=float(d["combined_p"]),
            verdict=d["verdict"],
            p_floor=float(d.get("p_floor", P_FLOOR)),
            combined_curve={int(k): float(v) for k, v in d.get("combined_curve", {}).items()},
        )


def build_report(
    runs: Sequence[RunResult],
    key_ids: Sequence[str],
    labels: Sequence[int],
    C: int,
    k: int = DEFAULT_K,
    alpha: float = DEFAULT_ALPHA,
    p_floor: float = P_FLOOR,
) -> VerificationReport:
    """Combine scored runs at ``k`` (and along the whole k curve) into a verdict."""
    if not runs:
        raise ValueError("need at least one run")
    K = len(labels)
    k_max = min(max(r.counts) for r in runs)
    if k > k_max:
        raise VerificationAborted(f"runs only hold top-{k_max} answers; cannot score k={k}")
    curve = {
        kk: fisher_combine([floor_pvalue(r.pvalues[kk], p_floor) for r in runs]) for kk in range(1, k_max + 1)
    }
    combined = curve[k]
    return VerificationReport(
        K=K,
        C=C,
        k=k,
        alpha=alpha,
        key_ids=list(key_ids),
        labels=list(labels),
        runs=list(runs),
        tau=threshold(K, k, C, alpha),
        combined_p=combined,
        verdict=DETECTED if combined <= alpha else NOT_DETECTED,
        p_floor=p_floor,
        combined_curve=curve,
    )


def verify(
    oracles: Oracle | Sequence[Oracle],
    keys,
    k: int = DEFAULT_K,
    alpha: float = DEFAULT_ALPHA,
    k_max: int | None = None,
    names: Sequence[str] | None = None,
) -> VerificationReport:
    """Query one or more black-box oracles on the keys and produce a report.

    Each oracle is asked once for its top-``k_max`` list (default: all
    classes) and the counts for every smaller k are read off that ranking.
    """
    if callable(oracles):
        oracles = [oracles]
    C = keys.config.C
    k_max = C if k_max is None else k_max
    if not 1 <= k <= k_max <= C:
        raise ValueError(f"need 1 <= k <= k_max <= C, got k={k}, k_max={k_max}, C={C}")
    names = list(names) if names is not None else [f"run{i}" for i in range(len(oracles))]
    runs = [score_rankings(query_rankings(o, keys, k_max), keys.labels, C, n) for o, n in zip(oracles, names)]
    return build_report(runs, keys.ids, keys.labels, C, k, alpha)


@dataclass
class Rates:
    fnr: float | None
    fpr: float | None
    n_protected: int
    n_benign: int


def evaluate_rates(runs, keys, k: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA) -> Rates:
    """FNR over protected-trained oracles and empirical FPR over benign ones.

    ``runs`` holds ``(oracle, trained_on_protected)`` pairs; a rate whose
    class is empty comes back as None.
    """
    C, K = keys.config.C, len(keys.keys)
    misses = flags = n_pos = n_neg = 0
    for oracle, protected in runs:
        p = binomial_pvalue(topk_key_accuracy(oracle, keys, k), K, k, C)
        detected = p <= alpha
        if protected:
            n_pos += 1
            misses += not detected
        else:
            n_neg += 1
            flags += detected
    return Rates(
        fnr=misses / n_pos if n_pos else None,
        fpr=flags / n_neg if n_neg else None,
        n_protected=n_pos,
        n_benign=n_neg,
    )


# ---------------------------------------------------------------- prediction logs


def read_prediction_log(path: str | Path) -> dict[str, list[int]]:
    """CSV with ``key_id`` and ``predictions`` columns; predictions are space-separated class ids."""
    path = Path(path)
    out: dict[str, list[int]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"key_id", "predictions"} <= set(reader.fieldnames):
            raise PredictionLogError(f"{path}: line 1: header must contain key_id and predictions")
        for row in reader:
            line = reader.line_num
            key = (row.get("key_id") or "").strip()
            raw = (row.get("predictions") or "").split()
            if not key:
                raise PredictionLogError(f"{path}: line {line}: empty key_id")
            try:
                preds = [int(v) for v in raw]
            except ValueError:
                raise PredictionLogError(f"{path}: line {line}: non-integer prediction in {row['predictions']!r}")
            if not preds:
                raise PredictionLogError(f"{path}: line {line}: no predictions")
            if key in out:
                raise PredictionLogError(f"{path}: line {line}: duplicate key_id {key}")
            out[key] = preds
    return out


def write_prediction_log(path: str | Path, rankings: dict[str, Sequence[int]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key_id", "predictions"])
        for key, preds in rankings.items():
            w.writerow([key, " ".join(str(int(c)) for c in preds)])


def _clip_digest(clip) -> str:
    return hashlib.sha256(np.ascontiguousarray(clip.samples).tobytes()).hexdigest()


class LogOracle:
    """Answers key queries from a recorded prediction log instead of a live model."""

    def __init__(self, log: dict[str, list[int]], keys):
        missing = [i for i in keys.ids if i not in log]
        if missing:
            raise PredictionLogError(f"prediction log has no entry for {', '.join(missing)}")
        self._by_clip = {_clip_digest(e.clip): log[i] for i, e in zip(keys.ids, keys.keys)}

    def __call__(self, clip, k: int) -> list[int]:
        preds = self._by_clip.get(_clip_digest(clip))
        if preds is None:
            raise VerificationAborted("queried clip is not one of the logged keys")
        if len(preds) < k:
            raise VerificationAborted(f"log holds {len(preds)} predictions, need {k}")
        return list(preds[:k])

    @property
    def depth(self) -> int:
        return min(len(v) for v in self._by_clip.values())
