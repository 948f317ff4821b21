"""Synthetic multi-attribute biased cohorts, CSV I/O, splits and batching.

Generative model per sample: draw one value per demographic attribute from
its marginals, draw each class label from its prevalence, then

    features = sum_k y_k * mu_k  +  (sum_attr shift_g) * b_hat  +  (prod_attr s_g) * eps

with mu_k a fixed unit class-direction vector times ``signal_scale``, b_hat
the normalized all-ones bias direction, and eps standard normal.  Positive
per-group shift moves the group's scores up (over-diagnosis risk); a noise
scale above 1 degrades the group's separability (under-diagnosis risk).
The class directions share only a partial overlap with the bias direction,
so a model can trade a little signal for a large reduction in group offset.

Everything is a pure function of (config, seed): reruns are bitwise
identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fairloss import SubgroupCatalog

__all__ = [
    "AttributeSpec",
    "CohortConfig",
    "Sample",
    "Cohort",
    "CohortFormatError",
    "generate",
    "save_csv",
    "load_csv",
    "split",
    "batches",
    "class_directions",
    "bias_direction",
    "oracle_scores",
    "default_cohort_config",
    "derived_rng",
    "derived_seed",
]

SPLIT_NAMES = ("none", "train", "val", "test")
# Mean offset of the raw cosine pattern behind each class direction.  It sets
# the overlap between class signal and the bias direction (~0.70 here), large
# enough that a BCE-only model keeps the biased component and shows operating
# point disparity, yet small enough that suppressing it costs little AUC.
_SIGNAL_MEAN_OFFSET = 0.7


class CohortFormatError(ValueError):
    """Malformed cohort CSV; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class AttributeSpec:
    """One demographic attribute: values, marginals and per-value bias knobs."""

    name: str
    values: tuple[str, ...]
    probs: tuple[float, ...]
    shift: tuple[float, ...] | None = None  # feature-space shift magnitude per value
    noise_scale: tuple[float, ...] | None = None  # noise multiplier per value

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(str(v) for v in self.values))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        shift = self.shift if self.shift is not None else (0.0,) * len(self.values)
        noise = self.noise_scale if self.noise_scale is not None else (1.0,) * len(self.values)
        object.__setattr__(self, "shift", tuple(float(s) for s in shift))
        object.__setattr__(self, "noise_scale", tuple(float(s) for s in noise))
        if len(self.values) < 1:
            raise ValueError(f"attribute {self.name!r} needs at least one value")
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"attribute {self.name!r} has duplicate values")
        for fld in ("probs", "shift", "noise_scale"):
            if len(getattr(self, fld)) != len(self.values):
                raise ValueError(
                    f"attribute {self.name!r}: {fld} length {len(getattr(self, fld))} "
                    f"!= {len(self.values)} values"
                )
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"attribute {self.name!r}: probs must be >= 0 and sum to 1")
        if any(s <= 0 for s in self.noise_scale):
            raise ValueError(f"attribute {self.name!r}: noise_scale must be > 0")


@dataclass(frozen=True)
class CohortConfig:
    n_samples: int
    feature_dim: int
    num_classes: int
    attributes: tuple[AttributeSpec, ...]
    prevalence: tuple[float, ...]
    signal_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "prevalence", tuple(float(p) for p in self.prevalence))
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.feature_dim < 2 * (self.num_classes + 1):
            raise ValueError(
                f"feature_dim {self.feature_dim} too small for {self.num_classes} "
                f"classes; need >= {2 * (self.num_classes + 1)}"
            )
        if len(self.prevalence) != self.num_classes:
            raise ValueError(
                f"prevalence has {len(self.prevalence)} entries for {self.num_classes} classes"
            )
        if any(not (0.0 < p < 1.0) for p in self.prevalence):
            raise ValueError("prevalence values must lie strictly in (0, 1)")
        if not self.attributes:
            raise ValueError("at least one attribute is required")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names: {names}")

    @property
    def schema(self) -> list[tuple[str, list[str]]]:
        return [(a.name, list(a.values)) for a in self.attributes]

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "signal_scale": self.signal_scale,
            "seed": self.seed,
            "prevalence": list(self.prevalence),
            "attributes": [
                {
                    "name": a.name,
                    "values": list(a.values),
                    "probs": list(a.probs),
                    "shift": list(a.shift),
                    "noise_scale": list(a.noise_scale),
                }
                for a in self.attributes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        attrs = tuple(
            AttributeSpec(
                name=a["name"],
                values=tuple(a["values"]),
                probs=tuple(a["probs"]),
                shift=tuple(a.get("shift", [0.0] * len(a["values"]))),
                noise_scale=tuple(a.get("noise_scale", [1.0] * len(a["values"]))),
            )
            for a in d["attributes"]
        )
        return cls(
            n_samples=int(d["n_samples"]),
            feature_dim=int(d["feature_dim"]),
            num_classes=int(d["num_classes"]),
            attributes=attrs,
            prevalence=tuple(d["prevalence"]),
            signal_scale=float(d.get("signal_scale", 2.0)),
            seed=int(d.get("seed", 0)),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Sample:
    id: int
    features: np.ndarray
    labels: np.ndarray
    attributes: dict[str, str]
    split: str


@dataclass
class Cohort:
    """Column-major cohort storage; `sample(i)` gives the row view."""

    config: CohortConfig
    fingerprint: str
    features: np.ndarray  # N x d float64
    labels: np.ndarray  # N x K float64 in {0, 1}
    attribute_codes: dict[str, np.ndarray]  # name -> N int codes into schema values
    split_codes: np.ndarray  # N ints into SPLIT_NAMES

    def __post_init__(self):
        if self.fingerprint != self.config.fingerprint():
            raise ValueError("cohort fingerprint does not match its config")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def catalog(self) -> SubgroupCatalog:
        return SubgroupCatalog.from_codes(self.config.schema, self.attribute_codes)

    def attribute_labels(self, name: str) -> np.ndarray:
        values = dict(self.config.schema)[name]
        return np.asarray(values, dtype=object)[self.attribute_codes[name]]

    def split_indices(self, split_name: str) -> np.ndarray:
        return np.flatnonzero(self.split_codes == SPLIT_NAMES.index(split_name))

    def sample(self, i: int) -> Sample:
        return Sample(
            id=i,
            features=self.features[i].copy(),
            labels=self.labels[i].copy(),
            attributes={
                name: dict(self.config.schema)[name][self.attribute_codes[name][i]]
                for name in self.attribute_codes
            },
            split=SPLIT_NAMES[self.split_codes[i]],
        )

    def prevalence_observed(self) -> np.ndarray:
        return self.labels.mean(axis=0)

    def group_sizes(self) -> dict[str, int]:
        cat = self.catalog
        return {
            f"{name}={value}": int(cat.membership[g].sum())
            for g, (name, value) in enumerate(cat.groups)
        }


def derived_rng(*keys: int) -> np.random.Generator:
    """Independent generator for a labeled stream of a base seed."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def class_directions(cfg: CohortConfig) -> np.ndarray:
    """K x d matrix of class signal vectors, each of norm ``signal_scale``.

    Direction k is a mean-offset cosine at integer frequency k+1 sampled on
    the half-integer grid, so distinct classes are orthogonal apart from
    their shared mean component and every direction has the same, partial
    overlap with the all-ones bias direction.
    """
    d = cfg.feature_dim
    j = np.arange(d)
    rows = []
    for k in range(cfg.num_classes):
        raw = _SIGNAL_MEAN_OFFSET + np.cos(2.0 * np.pi * (k + 1) * (j + 0.5) / d)
        rows.append(raw / np.linalg.norm(raw))
    return cfg.signal_scale * np.asarray(rows)


def bias_direction(feature_dim: int) -> np.ndarray:
    return np.ones(feature_dim) / np.sqrt(feature_dim)


def oracle_scores(cfg: CohortConfig, features: np.ndarray) -> np.ndarray:
    """Scores of the generative-model oracle: projection on each class direction.

    For an unbiased cohort (zero shift, unit noise) this is monotone in the
    Bayes posterior of each head, so its ranking is optimal.
    """
    return np.asarray(features) @ class_directions(cfg).T


def generate(cfg: CohortConfig) -> Cohort:
    """Draw a cohort; one sequential RNG stream defines the contract."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    n, d = cfg.n_samples, cfg.feature_dim

    codes: dict[str, np.ndarray] = {}
    for a in cfg.attributes:
        codes[a.name] = rng.choice(len(a.values), size=n, p=np.asarray(a.probs))

    labels = np.empty((n, cfg.num_classes))
    for k in range(cfg.num_classes):
        labels[:, k] = (rng.random(n) < cfg.prevalence[k]).astype(np.float64)

    eps = rng.standard_normal((n, d))

    shift_total = np.zeros(n)
    noise_total = np.ones(n)
    for a in cfg.attributes:
        shift_total += np.asarray(a.shift)[codes[a.name]]
        noise_total *= np.asarray(a.noise_scale)[codes[a.name]]

    features = (
        labels @ class_directions(cfg)
        + shift_total[:, None] * bias_direction(d)[None, :]
        + noise_total[:, None] * eps
    )

    return Cohort(
        config=cfg,
        fingerprint=cfg.fingerprint(),
        features=features,
        labels=labels,
        attribute_codes=codes,
        split_codes=np.zeros(n, dtype=int),
    )


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def _header_columns(cfg: CohortConfig) -> list[str]:
    return (
        ["id"]
        + [f"f{j}" for j in range(cfg.feature_dim)]
        + [f"y{k}" for k in range(cfg.num_classes)]
        + [a.name for a in cfg.attributes]
        + ["split"]
    )


def save_csv(cohort: Cohort, path) -> None:
    """Write the cohort losslessly; 17 significant digits per float."""
    cfg = cohort.config
    lines = [
        f"# fairmargin-cohort v1 fingerprint={cohort.fingerprint} config={cfg.canonical_json()}",
        ",".join(_header_columns(cfg)),
    ]
    schema = cfg.schema
    for i in range(cohort.n):
        cells = [str(i)]
        cells += [f"{v:.17g}" for v in cohort.features[i]]
        cells += [str(int(v)) for v in cohort.labels[i]]
        cells += [
            schema_values[cohort.attribute_codes[name][i]] for name, schema_values in schema
        ]
        cells.append(SPLIT_NAMES[cohort.split_codes[i]])
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path) -> Cohort:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# fairmargin-cohort v1 "):
        raise CohortFormatError("missing fairmargin-cohort header comment", line=1)
    head = text[0]
    try:
        fingerprint = head.split("fingerprint=", 1)[1].split(" ", 1)[0]
        cfg = CohortConfig.from_dict(json.loads(head.split("config=", 1)[1]))
    except (IndexError, KeyError, ValueError) as exc:
        raise CohortFormatError(f"unparseable header comment: {exc}", line=1) from exc
    if fingerprint != cfg.fingerprint():
        raise CohortFormatError(
            f"fingerprint {fingerprint} does not match embedded config", line=1
        )
    expected_cols = _header_columns(cfg)
    if len(text) < 2 or text[1].split(",") != expected_cols:
        raise CohortFormatError(f"expected header row {','.join(expected_cols)}", line=2)

    n, d, k_classes = cfg.n_samples, cfg.feature_dim, cfg.num_classes
    body = text[2:]
    if len(body) != n:
        raise CohortFormatError(f"expected {n} data rows, found {len(body)}", line=len(text))
    features = np.empty((n, d))
    labels = np.empty((n, k_classes))
    codes = {a.name: np.empty(n, dtype=int) for a in cfg.attributes}
    split_codes = np.empty(n, dtype=int)
    value_index = {a.name: {v: i for i, v in enumerate(a.values)} for a in cfg.attributes}

    for row_i, line in enumerate(body):
        line_no = row_i + 3
        cells = line.split(",")
        if len(cells) != len(expected_cols):
            raise CohortFormatError(
                f"expected {len(expected_cols)} columns, found {len(cells)}", line=line_no
            )
        try:
            features[row_i] = [float(c) for c in cells[1 : 1 + d]]
        except ValueError as exc:
            raise CohortFormatError(f"bad feature value ({exc})", line=line_no) from exc
        for k in range(k_classes):
            cell = cells[1 + d + k]
            if cell not in ("0", "1"):
                raise CohortFormatError(f"label y{k} must be 0 or 1, got {cell!r}", line=line_no)
            labels[row_i, k] = float(cell)
        for a_i, a in enumerate(cfg.attributes):
            cell = cells[1 + d + k_classes + a_i]
            if cell not in value_index[a.name]:
                raise CohortFormatError(
                    f"unknown value {cell!r} for attribute {a.name!r}", line=line_no
                )
            codes[a.name][row_i] = value_index[a.name][cell]
        split_cell = cells[-1]
        if split_cell not in SPLIT_NAMES:
            raise CohortFormatError(f"unknown split tag {split_cell!r}", line=line_no)
        split_codes[row_i] = SPLIT_NAMES.index(split_cell)

    return Cohort(
        config=cfg,
        fingerprint=fingerprint,
        features=features,
        labels=labels,
        attribute_codes=codes,
        split_codes=split_codes,
    )


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, fractions: tuple[float, ...]) -> list[int]:
    exact = [total * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    rest = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split(cohort: Cohort, fractions: tuple[float, float, float], seed: int) -> Cohort:
    """Assign train/val/test tags, stratified by the head-0 label."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three positives summing to 1, got {fractions}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    split_codes = np.zeros(cohort.n, dtype=int)
    for stratum_value in (1.0, 0.0):
        idx = np.flatnonzero(cohort.labels[:, 0] == stratum_value)
        idx = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(idx.size, tuple(fractions))
        start = 0
        for part, count in enumerate(counts):
            split_codes[idx[start : start + count]] = part + 1  # 1=train 2=val 3=test
            start += count
    for name in ("train", "val", "test"):
        if not np.any(split_codes == SPLIT_NAMES.index(name)):
            raise ValueError(f"split produced an empty {name} set")
    return replace(cohort, split_codes=split_codes)


def batches(cohort: Cohort, split_name: str, batch_size: int, epoch_seed) -> list[np.ndarray]:
    """Shuffled index batches covering the split; last partial batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = cohort.split_indices(split_name)
    if idx.size == 0:
        raise ValueError(f"split {split_name!r} is empty")
    keys = epoch_seed if isinstance(epoch_seed, (list, tuple)) else [epoch_seed]
    rng = np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
    idx = idx[rng.permutation(idx.size)]
    return [idx[i : i + batch_size] for i in range(0, idx.size, batch_size)]


def default_cohort_config(seed: int = 2, n_samples: int = 10000) -> CohortConfig:
    """The default biased desk-scale cohort: 7 subgroups over 3 attributes.

    Every attribute carries opposing score shifts (one over-diagnosed, one
    under-diagnosed value); one race value additionally gets mildly noisier
    features.  Calibrated so a plain BCE model shows clear EOdds disparity
    that the margin regularizer removes at small AUC cost.
    """
    return CohortConfig(
        n_samples=n_samples,
        feature_dim=16,
        num_classes=1,
        attributes=(
            AttributeSpec(
                name="age",
                values=("lt60", "ge60"),
                probs=(0.45, 0.55),
                shift=(-0.6, 0.6),
            ),
            AttributeSpec(
                name="race",
                values=("white", "black", "asian"),
                probs=(1 / 3, 1 / 3, 1 / 3),
                shift=(0.5, -0.5, 0.0),
                noise_scale=(1.0, 1.1, 1.0),
            ),
            AttributeSpec(
                name="sex",
                values=("female", "male"),
                probs=(0.55, 0.45),
                shift=(-0.4, 0.4),
            ),
        ),
        prevalence=(0.5,),
        signal_scale=2.0,
        seed=seed,
    )
