"""Per-subject Dice, aggregation over repeated trainings, paired sign-flip
tests with Bonferroni correction, and result tables."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

# report order; class index in the label palette is 3, 1, 2 respectively
CLASS_ORDER = ("et", "ed", "ncr")
CLASS_LABELS = {"et": 204, "ed": 102, "ncr": 51}
CLASS_TITLES = {"et": "ET", "ed": "ED", "ncr": "NCR/NET"}
RESULT_COLUMNS = ["config_id", "uses_real", "n_gans", "run_id", "subject_id", "dice_et", "dice_ed", "dice_ncr"]

# relative slack when comparing permuted statistics with the observed one
_TIE_RTOL = 1e-9


class SliceMismatchError(ValueError):
    pass


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice of two boolean masks from pooled counts; 1 when both are empty."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


@dataclass
class DiceReport:
    """Per-subject Dice for one trained model on the test set."""

    run_id: str
    subjects: list[str]
    scores: dict[str, list[float]]  # class key -> per-subject Dice, aligned with ``subjects``
    seed: int | None = None

    def class_means(self) -> dict[str, float]:
        return {c: float(np.mean(self.scores[c])) for c in CLASS_ORDER}

    @property
    def overall_mean(self) -> float:
        return float(np.mean(list(self.class_means().values())))

    def subject_means(self) -> np.ndarray:
        """Mean over the three classes for each subject."""
        return np.mean([self.scores[c] for c in CLASS_ORDER], axis=0)

    def rows(self, config_id: str, uses_real: bool, n_gans: int) -> list[dict]:
        return [
            {"config_id": config_id, "uses_real": uses_real, "n_gans": n_gans, "run_id": self.run_id,
             "subject_id": s, **{f"dice_{c}": self.scores[c][i] for c in CLASS_ORDER}}
            for i, s in enumerate(self.subjects)
        ]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> "DiceReport":
        return cls(data["run_id"], list(data["subjects"]), {k: list(v) for k, v in data["scores"].items()},
                   data.get("seed"))


def dice_per_subject(pred: np.ndarray, truth: np.ndarray, subject_ids: Sequence[str], z: Sequence[int],
                     truth_keys: Iterable[tuple[str, int]] | None = None, run_id: str = "",
                     seed: int | None = None) -> DiceReport:
    """Dice per subject and class over label maps in {0, 51, 102, 204}.

    ``pred`` and ``truth`` are aligned (N,H,W) stacks keyed by (subject, z).
    When ``truth_keys`` is given, the predicted keys must cover exactly that set.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {truth.shape}")
    keys = [(str(s), int(k)) for s, k in zip(subject_ids, z)]
    if len(keys) != len(pred):
        raise ValueError(f"{len(keys)} slice keys for {len(pred)} slices")
    if len(set(keys)) != len(keys):
        raise SliceMismatchError("duplicate (subject, z) pairs in predictions")
    if truth_keys is not None:
        expected = {(str(s), int(k)) for s, k in truth_keys}
        got = set(keys)
        missing, extra = sorted(expected - got), sorted(got - expected)
        if missing or extra:
            raise SliceMismatchError(f"slice sets differ: missing {missing[:10]}, unexpected {extra[:10]}"
                                     f" ({len(missing)} missing, {len(extra)} unexpected)")
    subjects = sorted({k[0] for k in keys})
    ids = np.array([k[0] for k in keys])
    scores = {c: [] for c in CLASS_ORDER}
    for s in subjects:
        sel = ids == s
        p, t = pred[sel], truth[sel]
        for c in CLASS_ORDER:
            scores[c].append(dice(p == CLASS_LABELS[c], t == CLASS_LABELS[c]))
    return DiceReport(run_id, subjects, scores, seed)


@dataclass(frozen=True)
class Aggregate:
    mean: dict[str, float]
    std: dict[str, float]
    n_runs: int


def aggregate_runs(runs: Sequence[Mapping[str, float]]) -> Aggregate:
    """Mean and sample standard deviation (ddof 1, 0 for a single run) per class
    and for the overall mean, taken over runs of per-class subject means."""
    if not runs:
        raise ValueError("no runs to aggregate")
    table = {c: np.array([float(r[c]) for r in runs]) for c in CLASS_ORDER}
    table["mean"] = np.mean([table[c] for c in CLASS_ORDER], axis=0)
    n = len(runs)
    mean = {k: float(v.mean()) for k, v in table.items()}
    std = {k: float(v.std(ddof=1)) if n > 1 else 0.0 for k, v in table.items()}
    return Aggregate(mean, std, n)


def relative_improvement(baseline: float, improved: float) -> float:
    """Percent change from ``baseline`` to ``improved``."""
    if not baseline > 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return 100.0 * (improved - baseline) / baseline


@dataclass
class SignFlipResult:
    p_value: float
    statistic: float
    mode: str
    alternative: str
    n: int
    permutations: int
    seed: int | None = None
    degenerate: bool = False


def _exceeds(null: np.ndarray, observed: float, alternative: str) -> np.ndarray:
    tol = _TIE_RTOL * max(1.0, abs(observed))
    if alternative == "two-sided":
        return np.abs(null) >= abs(observed) - tol
    return null >= observed - tol


def sign_flip_test(diffs: Sequence[float], mode: str = "auto", alternative: str = "two-sided",
                   n_permutations: int = 2**20, seed: int = 0, max_exhaustive: int = 20) -> SignFlipResult:
    """Paired sign-flipping permutation test on the mean difference.

    ``mode`` is "exhaustive", "monte_carlo" or "auto" (exhaustive up to
    ``max_exhaustive`` pairs). Monte Carlo uses the (k + 1) / (n + 1) estimator.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if alternative not in ("two-sided", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    if d.size == 0:
        raise ValueError("no paired differences")
    if mode == "auto":
        mode = "exhaustive" if d.size <= max_exhaustive else "monte_carlo"
    if mode not in ("exhaustive", "monte_carlo"):
        raise ValueError(f"unknown mode {mode!r}")
    observed = float(d.mean())
    if not np.any(d):
        perms = 2**d.size if mode == "exhaustive" else n_permutations
        return SignFlipResult(1.0, 0.0, mode, alternative, d.size, perms, seed, degenerate=True)
    if mode == "exhaustive":
        if d.size > 30:
            raise ValueError(f"exhaustive enumeration of 2**{d.size} sign patterns is not feasible")
        total = 2**d.size
        count = 0
        # chunked enumeration keeps memory bounded for n near 20
        chunk = 1 << min(d.size, 16)
        bits = np.arange(d.size, dtype=np.int64)
        for start in range(0, total, chunk):
            codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
            signs = 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)
            null = signs @ d / d.size
            count += int(_exceeds(null, observed, alternative).sum())
        return SignFlipResult(count / total, observed, mode, alternative, d.size, total, None)
    rng = np.random.default_rng(seed)
    count = 0
    remaining = n_permutations
    while remaining:
        m = min(remaining, 65536)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(m, d.size))
        count += int(_exceeds(signs @ d / d.size, observed, alternative).sum())
        remaining -= m
    return SignFlipResult((count + 1) / (n_permutations + 1), observed, mode, alternative, d.size,
                          n_permutations, seed)


def bonferroni(raw_p: Sequence[float], m: int | None = None) -> list[float]:
    m = len(raw_p) if m is None else m
    if m < len(raw_p):
        raise ValueError(f"m={m} is smaller than the number of p-values ({len(raw_p)})")
    return [min(1.0, m * float(p)) for p in raw_p]


@dataclass
class ComparisonResult:
    baseline: str
    other: str
    raw_p: dict[str, float]
    adjusted_p: dict[str, float] = field(default_factory=dict)
    m: int = 1
    test: dict = field(default_factory=dict)


def paired_subject_diffs(a: Sequence[DiceReport], b: Sequence[DiceReport], key: str) -> np.ndarray:
    """Per-subject differences (b - a) of repeat-averaged Dice for one class or "mean"."""

    def averaged(reports):
        subjects = reports[0].subjects
        for r in reports[1:]:
            if r.subjects != subjects:
                raise SliceMismatchError("repeats were evaluated on different subjects")
        if key == "mean":
            return subjects, np.mean([r.subject_means() for r in reports], axis=0)
        return subjects, np.mean([r.scores[key] for r in reports], axis=0)

    sa, va = averaged(a)
    sb, vb = averaged(b)
    if sa != sb:
        raise SliceMismatchError("configurations were evaluated on different subjects")
    return vb - va


def paired_run_diffs(a: Sequence[DiceReport], b: Sequence[DiceReport], key: str) -> np.ndarray:
    """Differences of run-level means, pairing repeat r of each configuration."""
    if len(a) != len(b):
        raise ValueError(f"run-level pairing needs equal repeat counts, got {len(a)} and {len(b)}")

    def level(r):
        return r.overall_mean if key == "mean" else r.class_means()[key]

    return np.array([level(y) - level(x) for x, y in zip(a, b)])


def compare_configurations(reports: Mapping[str, Sequence[DiceReport]], pairs: Sequence[tuple[str, str]] | None = None,
                           unit: str = "subject", alternative: str = "two-sided", n_permutations: int = 2**20,
                           seed: int = 0) -> list[ComparisonResult]:
    """Sign-flip tests for each configuration pair, Bonferroni-corrected over the pairs."""
    names = list(reports)
    pairs = list(itertools.combinations(names, 2)) if pairs is None else list(pairs)
    m = max(1, len(pairs))
    diff_fn = {"subject": paired_subject_diffs, "run": paired_run_diffs}.get(unit)
    if diff_fn is None:
        raise ValueError(f"unknown pairing unit {unit!r}")
    out = []
    for base, other in pairs:
        raw, meta = {}, {}
        for key in CLASS_ORDER + ("mean",):
            res = sign_flip_test(diff_fn(reports[base], reports[other], key), alternative=alternative,
                                 n_permutations=n_permutations, seed=seed)
            raw[key] = res.p_value
            meta[key] = {"mode": res.mode, "permutations": res.permutations, "n": res.n,
                         "statistic": res.statistic, "degenerate": res.degenerate}
        # m counts configuration pairs; each class key is corrected separately
        adjusted = {key: bonferroni([p], m)[0] for key, p in raw.items()}
        out.append(ComparisonResult(base, other, raw, adjusted, m,
                                    {"unit": unit, "alternative": alternative, "seed": seed, "per_key": meta}))
    return out


def comparisons_json(results: Sequence[ComparisonResult]) -> str:
    return json.dumps([asdict(r) for r in results], indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class TableRow:
    uses_real: bool
    n_gans: int
    aggregate: Aggregate


_TABLE_KEYS = CLASS_ORDER + ("mean",)


def emit_table(rows: Sequence[TableRow]) -> tuple[str, str]:
    """CSV (full precision) and Markdown (3 decimals) renderings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["uses_real", "n_gans", "n_runs"]
    for k in _TABLE_KEYS:
        header += [f"{k}_mean", f"{k}_std"]
    writer.writerow(header)
    for r in rows:
        line = [str(r.uses_real).lower(), r.n_gans, r.aggregate.n_runs]
        for k in _TABLE_KEYS:
            line += [repr(r.aggregate.mean[k]), repr(r.aggregate.std[k])]
        writer.writerow(line)
    titles = ["Original data", "# GANs"] + [CLASS_TITLES[c] for c in CLASS_ORDER] + ["Mean"]
    md = ["| " + " | ".join(titles) + " |", "|" + "---|" * len(titles)]
    for r in rows:
        cells = ["yes" if r.uses_real else "no", str(r.n_gans)]
        cells += [format_mean_std(r.aggregate.mean[k], r.aggregate.std[k]) for k in _TABLE_KEYS]
        md.append("| " + " | ".join(cells) + " |")
    return buf.getvalue(), "\n".join(md) + "\n"


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def parse_table_csv(text: str) -> list[TableRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        mean = {k: float(rec[f"{k}_mean"]) for k in _TABLE_KEYS}
        std = {k: float(rec[f"{k}_std"]) for k in _TABLE_KEYS}
        rows.append(TableRow(rec["uses_real"] == "true", int(rec["n_gans"]), Aggregate(mean, std, int(rec["n_runs"]))))
    return rows


def write_results_csv(rows: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["uses_real"] = str(bool(row["uses_real"])).lower()
            for c in CLASS_ORDER:
                out[f"dice_{c}"] = repr(float(row[f"dice_{c}"]))
            writer.writerow(out)


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rec["uses_real"] = rec["uses_real"] == "true"
            rec["n_gans"] = int(rec["n_gans"])
            for c in CLASS_ORDER:
                rec[f"dice_{c}"] = float(rec[f"dice_{c}"])
            rows.append(rec)
    return rows

