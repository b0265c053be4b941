"""Pair/triplet lists, batch sampling, quality filtering, folds and synthetic data."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, ParseError, ProtocolError

KIN_TYPES = ("BB", "SS", "SIBS", "FD", "MD", "FS", "MS")
TRI_TYPES = ("FMD", "FMS")
LABELS = {"kin": True, "1": True, "non-kin": False, "nonkin": False, "0": False}
PAIR_FIELDS = ["img_a", "img_b", "kin_type", "label", "family_a", "family_b"]
TRIPLET_FIELDS = ["img_father", "img_mother", "img_child", "type", "label"]


@dataclass(frozen=True)
class KinPair:
    img_a: str
    img_b: str
    kin_type: str
    label: bool
    family_a: str
    family_b: str
    fold: Optional[int] = None

    def __post_init__(self):
        if self.kin_type not in KIN_TYPES:
            raise DataError(f"kin type {self.kin_type!r} is not one of {KIN_TYPES}")
        if self.label and self.family_a != self.family_b:
            raise DataError(f"kin pair {self.img_a}/{self.img_b} spans families {self.family_a}/{self.family_b}")


@dataclass(frozen=True)
class TriSubject:
    img_father: str
    img_mother: str
    img_child: str
    type: str
    label: bool
    family_parents: str = ""
    family_child: str = ""

    def __post_init__(self):
        if self.type not in TRI_TYPES:
            raise DataError(f"tri-subject type {self.type!r} is not one of {TRI_TYPES}")


@dataclass
class FoldSpec:
    folds: dict  # fold index -> list of pair indices
    k: int

    def test_indices(self, fold: int) -> list:
        return list(self.folds[fold])

    def train_indices(self, fold: int) -> list:
        return sorted(i for f, idx in self.folds.items() if f != fold for i in idx)


def _parse_label(value: str, path, lineno) -> bool:
    try:
        return LABELS[value.strip().lower()]
    except KeyError:
        raise ParseError(path, lineno, f"label must be kin/non-kin, got {value!r}") from None


def _read_rows(path, required):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(path, 1, "missing header")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ParseError(path, 1, f"header lacks columns {missing}")
        for row in reader:
            if None in row or any(row[c] is None for c in required):
                raise ParseError(path, reader.line_num, "wrong number of fields")
            yield reader.line_num, row


def load_pair_list(path) -> list[KinPair]:
    pairs, seen = [], set()
    for lineno, row in _read_rows(path, PAIR_FIELDS):
        kin_type = row["kin_type"].strip()
        if kin_type not in KIN_TYPES:
            raise DataError(f"{path}:{lineno}: kin type {kin_type!r} is out of scope (expected one of {KIN_TYPES})")
        fold = row.get("fold")
        try:
            fold = int(fold) if fold not in (None, "") else None
            pair = KinPair(
                row["img_a"].strip(), row["img_b"].strip(), kin_type, _parse_label(row["label"], path, lineno),
                row["family_a"].strip(), row["family_b"].strip(), fold,
            )
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(path, lineno, str(exc)) from None
        key = (pair.img_a, pair.img_b, pair.kin_type)
        if key in seen:
            raise ParseError(path, lineno, f"duplicate pair {key}")
        seen.add(key)
        pairs.append(pair)
    return pairs


def save_pair_list(path, pairs) -> Path:
    path = Path(path)
    with_fold = any(p.fold is not None for p in pairs)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_FIELDS + (["fold"] if with_fold else []))
        for p in pairs:
            row = [p.img_a, p.img_b, p.kin_type, "kin" if p.label else "non-kin", p.family_a, p.family_b]
            w.writerow(row + ([("" if p.fold is None else p.fold)] if with_fold else []))
    return path


def load_triplet_list(path) -> list[TriSubject]:
    out = []
    for lineno, row in _read_rows(path, TRIPLET_FIELDS):
        try:
            out.append(TriSubject(
                row["img_father"].strip(), row["img_mother"].strip(), row["img_child"].strip(),
                row["type"].strip(), _parse_label(row["label"], path, lineno),
                (row.get("family_parents") or "").strip(), (row.get("family_child") or "").strip(),
            ))
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(path, lineno, str(exc)) from None
    return out


def save_triplet_list(path, triplets) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIPLET_FIELDS + ["family_parents", "family_child"])
        for t in triplets:
            w.writerow([t.img_father, t.img_mother, t.img_child, t.type,
                        "kin" if t.label else "non-kin", t.family_parents, t.family_child])
    return path


def load_quality_table(path) -> dict:
    table = {}
    for lineno, row in _read_rows(path, ["img", "score"]):
        try:
            score = float(row["score"])
        except ValueError:
            raise ParseError(path, lineno, f"bad score {row['score']!r}") from None
        if not 0.0 <= score <= 1.0:
            raise ParseError(path, lineno, f"quality score {score} outside [0, 1]")
        table[row["img"].strip()] = score
    return table


def save_quality_table(path, table: dict) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["img", "score"])
        for img, score in table.items():
            w.writerow([img, repr(float(score))])
    return path


def pair_quality(pair: KinPair, qt: dict) -> float:
    """Face-pair quality: the lower of the two image scores."""
    for img in (pair.img_a, pair.img_b):
        if img not in qt:
            raise DataError(f"no quality score for image {img!r}")
    return min(qt[pair.img_a], qt[pair.img_b])


def quality_filter(pairs, qt: dict, threshold: float) -> list[KinPair]:
    return [p for p in pairs if pair_quality(p, qt) > threshold]


def sample_training_batch(pairs, N: int, rng: np.random.Generator) -> list[KinPair]:
    """Draw ``N`` positive pairs, each from a different family.

    Every cross-pair combination in the batch is then a true non-kin
    negative for the contrastive loss.
    """
    by_family = defaultdict(list)
    for p in pairs:
        if p.label:
            by_family[p.family_a].append(p)
    if N < 2:
        raise ProtocolError(f"batch size must be >= 2, got {N}")
    if len(by_family) < N:
        raise ProtocolError(f"batch of {N} needs {N} distinct families, only {len(by_family)} have positives")
    families = sorted(by_family)
    chosen = rng.choice(len(families), size=N, replace=False)
    batch = []
    for f in chosen:
        group = by_family[families[f]]
        batch.append(group[int(rng.integers(len(group)))])
    return batch


def _components(pairs) -> list[list[int]]:
    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in pairs:
        parent[find(p.family_a)] = find(p.family_b)
    groups = defaultdict(list)
    for i, p in enumerate(pairs):
        groups[find(p.family_a)].append(i)
    return [groups[k] for k in sorted(groups)]


def make_folds(pairs, k: int, seed: int = 0) -> FoldSpec:
    """Family-disjoint k-fold split.

    A predefined ``fold`` column is passed through unchanged.  Otherwise
    families linked by any pair (kin or non-kin) form one unit, so no family
    id ever appears in two folds.
    """
    if k < 2:
        raise ProtocolError(f"need at least 2 folds, got {k}")
    pairs = list(pairs)
    if pairs and all(p.fold is not None for p in pairs):
        folds = defaultdict(list)
        for i, p in enumerate(pairs):
            folds[p.fold].append(i)
        return FoldSpec(dict(sorted(folds.items())), len(folds))
    units = _components(pairs)
    if len(units) < k:
        raise ProtocolError(f"{len(units)} family groups cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(units))
    folds = {f: [] for f in range(k)}
    # largest units first, each to the currently smallest fold
    for u in sorted(order, key=lambda u: -len(units[u])):
        target = min(folds, key=lambda f: (len(folds[f]), f))
        folds[target].extend(units[u])
    return FoldSpec({f: sorted(v) for f, v in folds.items()}, k)


# ---------------------------------------------------------------------------
# synthetic kinship data


@dataclass
class SyntheticConfig:
    families: int = 20
    members: int = 4
    noise: float = 0.1
    mode: str = "features"  # or "images"
    image_size: int = 16
    split: tuple = (0.6, 0.2, 0.2)
    orthogonal_latents: bool = False
    quality_range: tuple = (0.05, 1.0)

    def __post_init__(self):
        self.split = tuple(self.split)
        self.quality_range = tuple(self.quality_range)
        if self.members < 3:
            raise ConfigurationError("synthetic families need at least 3 members (two parents and a child)")
        if self.mode not in ("features", "images"):
            raise ConfigurationError(f"mode must be 'features' or 'images', got {self.mode!r}")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")


@dataclass
class Member:
    image_id: str
    family: str
    role: str  # father, mother, child
    gender: str  # m / f


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    tensors: dict
    members: list
    pairs: dict = field(default_factory=dict)
    triplets: dict = field(default_factory=dict)
    quality: dict = field(default_factory=dict)
    split_families: dict = field(default_factory=dict)
    probes: list = field(default_factory=list)
    gallery: list = field(default_factory=list)

    def all_pairs(self) -> list[KinPair]:
        return [p for split in ("train", "val", "test") for p in self.pairs.get(split, [])]

    def write(self, directory) -> Path:
        from .backbone import write_tensor_store

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor_store(directory, self.tensors)
        for split, pairs in self.pairs.items():
            save_pair_list(directory / f"pairs_{split}.csv", pairs)
        for split, triplets in self.triplets.items():
            save_triplet_list(directory / f"triplets_{split}.csv", triplets)
        save_quality_table(directory / "quality.csv", self.quality)
        for name, rows in (("retrieval_probes", self.probes), ("retrieval_gallery", self.gallery)):
            save_image_list(directory / f"{name}.csv", rows)
        meta = {"config": asdict(self.config), "split_families": self.split_families}
        (directory / "synthetic.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return directory


def save_image_list(path, rows) -> Path:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["img", "family"])
        w.writerows(rows)
    return Path(path)


def load_image_list(path) -> list[tuple[str, str]]:
    return [(row["img"].strip(), row["family"].strip()) for _, row in _read_rows(path, ["img", "family"])]


def _kin_type(a: Member, b: Member) -> str:
    if a.role == "child" and b.role == "child":
        return {"mm": "BB", "ff": "SS"}.get(a.gender + b.gender, "SIBS")
    parent = "F" if a.role == "father" else "M"
    return parent + ("S" if b.gender == "m" else "D")


def _latents(rng, n, shape, orthogonal):
    dim = int(np.prod(shape))
    if orthogonal:
        if n > dim:
            raise ConfigurationError(f"cannot draw {n} orthogonal latents in {dim} dims")
        q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
        return (q.T * np.sqrt(dim)).reshape(n, *shape)
    return rng.standard_normal((n, *shape))


def gen_synthetic(config: SyntheticConfig, seed: int, model_config=None) -> SyntheticDataset:
    """Families share a latent; each member is latent plus isotropic noise.

    Features mode stores ``X``/``r`` per image directly; images mode stores
    raw ``h x w x 3`` tensors for the toy backbone.
    """
    from .model import FaCoRConfig

    mc = model_config or FaCoRConfig.toy()
    rng = np.random.default_rng(seed)
    fams = [f"F{f:03d}" for f in range(config.families)]

    members = []
    for fam in fams:
        members.append(Member(f"{fam}_father", fam, "father", "m"))
        members.append(Member(f"{fam}_mother", fam, "mother", "f"))
        for c in range(2, config.members):
            gender = "m" if rng.random() < 0.5 else "f"
            members.append(Member(f"{fam}_child{c}{'s' if gender == 'm' else 'd'}", fam, "child", gender))

    tensors = {}
    fam_index = {fam: i for i, fam in enumerate(fams)}
    if config.mode == "features":
        lat_X = _latents(rng, len(fams), (mc.H, mc.W, mc.C), config.orthogonal_latents)
        lat_r = _latents(rng, len(fams), (mc.D,), config.orthogonal_latents)
        for m in members:
            f = fam_index[m.family]
            tensors[(m.image_id, "X")] = lat_X[f] + config.noise * rng.standard_normal(lat_X[f].shape)
            tensors[(m.image_id, "r")] = lat_r[f] + config.noise * rng.standard_normal(lat_r[f].shape)
    else:
        s = config.image_size
        lat = _latents(rng, len(fams), (s, s, 3), config.orthogonal_latents)
        for m in members:
            f = fam_index[m.family]
            tensors[(m.image_id, "image")] = lat[f] + config.noise * rng.standard_normal(lat[f].shape)

    lo, hi = config.quality_range
    quality = {m.image_id: round(float(rng.uniform(lo, hi)), 3) for m in members}

    order = [fams[i] for i in rng.permutation(len(fams))]
    n_train = int(round(config.split[0] * len(fams)))
    n_val = int(round(config.split[1] * len(fams)))
    split_families = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }

    by_family = defaultdict(list)
    for m in members:
        by_family[m.family].append(m)

    ds = SyntheticDataset(config, tensors, members, quality=quality, split_families=split_families)
    for split, group in split_families.items():
        if not group:
            continue
        ds.pairs[split] = _make_pairs(group, by_family, rng)
        ds.triplets[split] = _make_triplets(group, by_family, rng)
    test = split_families["test"] or fams
    for fam in test:
        first, *rest = by_family[fam]
        ds.probes.append((first.image_id, fam))
        ds.gallery.extend((m.image_id, fam) for m in rest)
    return ds


def _partners(group, rng) -> dict:
    """Couple families (a trailing odd one joins the last couple).

    Negatives only pair a family with its partners, which keeps linked
    family groups small enough for family-disjoint folds.
    """
    order = [group[i] for i in rng.permutation(len(group))]
    units = [order[i:i + 2] for i in range(0, len(order) - 1, 2)]
    if len(order) % 2:
        if units:
            units[-1].append(order[-1])
        else:
            units = [order]
    return {f: [g for g in u if g != f] for u in units for f in u}


def _make_pairs(group, by_family, rng) -> list[KinPair]:
    out = []
    partners = _partners(group, rng)
    for fam in group:
        mem = by_family[fam]
        for i, a in enumerate(mem):
            for b in mem[i + 1:]:
                if a.role in ("father", "mother") and b.role in ("father", "mother"):
                    continue  # spouses are not blood relatives
                kt = _kin_type(a, b)
                out.append(KinPair(a.image_id, b.image_id, kt, True, fam, fam))
                neg = _negative_for(a, partners[fam], by_family, rng)
                if neg is not None:
                    out.append(KinPair(neg.image_id, b.image_id, kt, False, neg.family, fam))
    return out


def _negative_for(a: Member, others, by_family, rng) -> Optional[Member]:
    """A stand-in for ``a`` from another family with the same role and gender."""
    for g in [others[i] for i in rng.permutation(len(others))]:
        cands = [m for m in by_family[g] if m.role == a.role and m.gender == a.gender]
        if cands:
            return cands[int(rng.integers(len(cands)))]
    return None


def _make_triplets(group, by_family, rng) -> list[TriSubject]:
    out = []
    for fam in group:
        mem = by_family[fam]
        father, mother = mem[0], mem[1]
        others = [g for g in group if g != fam]
        for child in mem[2:]:
            t = "FMS" if child.gender == "m" else "FMD"
            out.append(TriSubject(father.image_id, mother.image_id, child.image_id, t, True, fam, fam))
            if others:
                g = others[int(rng.integers(len(others)))]
                out.append(TriSubject(by_family[g][0].image_id, by_family[g][1].image_id,
                                      child.image_id, t, False, g, fam))
    return out
