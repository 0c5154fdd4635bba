"""Dataset ingestion: a CIFAR-style image corpus and an aggregated movie
table with four feature groups (numerical, social, categorical, textual).

Images are read from the standard CIFAR binary archive layout (pickled
train/test batches of 32x32x3 uint8 rows). Movies arrive as a delimited
UTF-8 table with a header row; a column manifest maps columns onto the four
feature groups. Synthetic generators for both corpora ship alongside the
loaders so every pipeline stage is exercisable without the real downloads.
"""

from __future__ import annotations

import json
import logging
import os
import pickle
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from sklearn.feature_extraction.text import TfidfVectorizer

from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

Tensor = torch.Tensor

FEATURE_GROUPS = ("numerical", "social", "categorical", "textual")

DEFAULT_MOVIE_MANIFEST = {
    "target": "rating",
    "year_column": "release_year",
    "list_delimiter": "|",
    "groups": {
        "numerical": [
            "budget",
            "duration",
            "total_companies",
            "release_day",
            "release_month",
            "release_year",
            "total_languages",
        ],
        "social": ["actor_likes", "cast_likes", "director_likes", "crew_likes"],
        "categorical": ["production_countries", "content_rating", "genres"],
        "textual": ["title", "plot_keywords", "overview", "tagline"],
    },
}

TRAIN_YEARS = (2000, 2013)  # inclusive train window; years above go to test


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


@dataclass
class ImageDatasetHandle:
    """In-memory image split with deterministic batching and augmentation.

    The train split applies pad-4 random crop and horizontal flip; the val
    split only normalizes. Normalization statistics always come from the
    full train split of the corpus.
    """

    split: str
    images: Tensor  # (N, 3, 32, 32) uint8
    labels: Tensor  # (N,) int64
    mean: Tensor  # (3,)
    std: Tensor  # (3,)
    class_count: int
    subset_fraction: float = 1.0

    @property
    def num_examples(self) -> int:
        return int(self.images.shape[0])

    def __len__(self) -> int:
        return self.num_examples

    def _normalize(self, x: Tensor) -> Tensor:
        x = x.to(torch.float32) / 255.0
        return (x - self.mean.view(1, 3, 1, 1)) / self.std.view(1, 3, 1, 1)

    def _augment(self, x: Tensor, generator: Optional[torch.Generator]) -> Tensor:
        n, _, h, w = x.shape
        padded = torch.nn.functional.pad(x, (4, 4, 4, 4))
        offsets = torch.randint(0, 9, (n, 2), generator=generator)
        flips = torch.rand(n, generator=generator) < 0.5
        out = torch.empty_like(x)
        for i in range(n):
            dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
            crop = padded[i, :, dy : dy + h, dx : dx + w]
            out[i] = torch.flip(crop, dims=[2]) if bool(flips[i]) else crop
        return out

    def iter_batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        generator: Optional[torch.Generator] = None,
    ):
        order = (
            torch.randperm(self.num_examples, generator=generator)
            if shuffle
            else torch.arange(self.num_examples)
        )
        for start in range(0, self.num_examples, batch_size):
            idx = order[start : start + batch_size]
            x = self.images[idx]
            x = self._normalize(x)
            if self.split == "train":
                x = self._augment(x, generator)
            yield x, self.labels[idx]


def _find_archive_dir(root) -> str:
    candidates = [
        os.path.join(root, "cifar-100-python"),
        os.path.join(root, "cifar-10-batches-py"),
        str(root),
    ]
    for c in candidates:
        if os.path.isfile(os.path.join(c, "train")) or os.path.isfile(
            os.path.join(c, "data_batch_1")
        ):
            return c
    raise IngestionError(f"no CIFAR-style archive found under {root}")


def _read_pickle(path) -> dict:
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="bytes")
    except (OSError, pickle.UnpicklingError, EOFError) as e:
        raise IngestionError(f"cannot read archive file {path}: {e}") from e


def _read_split(archive_dir: str, split: str) -> Tuple[np.ndarray, np.ndarray]:
    if os.path.isfile(os.path.join(archive_dir, "train")):
        files = ["train"] if split == "train" else ["test"]
    else:
        files = (
            [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        )
    data, labels = [], []
    for name in files:
        path = os.path.join(archive_dir, name)
        if not os.path.isfile(path):
            raise IngestionError(f"archive file missing: {path}")
        batch = _read_pickle(path)
        data.append(np.asarray(batch[b"data"], dtype=np.uint8))
        key = b"fine_labels" if b"fine_labels" in batch else b"labels"
        labels.extend(batch[key])
    images = np.concatenate(data).reshape(-1, 3, 32, 32)
    return images, np.asarray(labels, dtype=np.int64)


def _stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    keep: List[np.ndarray] = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        take = max(1, int(round(fraction * idx.size)))
        keep.append(rng.permutation(idx)[:take])
    return np.sort(np.concatenate(keep))


def load_images(
    root, split: str, subset_fraction: float = 1.0, seed: int = 0
) -> ImageDatasetHandle:
    """Load one split of a CIFAR-layout archive.

    ``subset_fraction`` keeps a deterministic, class-balanced portion of the
    split; normalization statistics are computed from the full train split
    either way.
    """
    if split not in ("train", "val", "test"):
        raise ConfigError(f"split must be train or val, got {split!r}")
    split = "train" if split == "train" else "test"
    if not 0.0 < subset_fraction <= 1.0:
        raise ConfigError(f"subset_fraction must lie in (0, 1], got {subset_fraction}")
    archive = _find_archive_dir(root)
    train_images, train_labels = _read_split(archive, "train")
    floats = train_images.astype(np.float64) / 255.0
    mean = floats.mean(axis=(0, 2, 3))
    std = floats.std(axis=(0, 2, 3))
    std[std == 0] = 1.0

    if split == "train":
        images, labels = train_images, train_labels
    else:
        images, labels = _read_split(archive, "test")
    if subset_fraction < 1.0:
        idx = _stratified_subset(labels, subset_fraction, seed)
        images, labels = images[idx], labels[idx]
    return ImageDatasetHandle(
        split="train" if split == "train" else "val",
        images=torch.from_numpy(np.ascontiguousarray(images)),
        labels=torch.from_numpy(labels),
        mean=torch.tensor(mean, dtype=torch.float32),
        std=torch.tensor(std, dtype=torch.float32),
        class_count=int(train_labels.max()) + 1,
        subset_fraction=subset_fraction,
    )


def make_synthetic_image_archive(
    root,
    classes: int = 10,
    train_per_class: int = 500,
    val_per_class: int = 100,
    seed: int = 0,
) -> str:
    """Write a small learnable corpus in the CIFAR archive layout.

    Each class is a smooth random template; images blend their class
    template with a second class (which gives the classes soft structure),
    then get a random shift, contrast jitter, and pixel noise.
    """
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 1.0, size=(3, 8, 8))
    deltas = rng.normal(0.0, 1.0, size=(classes, 3, 8, 8))
    coarse = 0.6 * base + 0.4 * deltas  # classes share structure, so they confuse
    templates = np.stack(
        [
            np.stack(
                [np.kron(coarse[c, ch], np.ones((4, 4))) for ch in range(3)]
            )
            for c in range(classes)
        ]
    )

    def render(count_per_class: int) -> Tuple[np.ndarray, List[int]]:
        rows, labels = [], []
        for cls in range(classes):
            for _ in range(count_per_class):
                other = int(rng.integers(classes))
                lam = rng.uniform(0.0, 0.5)
                img = (1 - lam) * templates[cls] + lam * templates[other]
                img = np.roll(img, shift=tuple(rng.integers(-5, 6, size=2)), axis=(1, 2))
                img = img * rng.uniform(0.7, 1.3) + rng.normal(0.0, 1.1, img.shape)
                img = (img * 40 + 128).clip(0, 255).astype(np.uint8)
                rows.append(img.reshape(-1))
                labels.append(cls)
        order = rng.permutation(len(rows))
        return np.stack(rows)[order], [labels[i] for i in order]

    archive = os.path.join(root, "cifar-100-python")
    os.makedirs(archive, exist_ok=True)
    for name, per_class in (("train", train_per_class), ("test", val_per_class)):
        data, labels = render(per_class)
        with open(os.path.join(archive, name), "wb") as f:
            pickle.dump({b"data": data, b"fine_labels": labels}, f)
    with open(os.path.join(archive, "meta"), "wb") as f:
        pickle.dump({b"fine_label_names": [f"class_{i}".encode() for i in range(classes)]}, f)
    return archive


# ---------------------------------------------------------------------------
# movies
# ---------------------------------------------------------------------------


@dataclass
class MovieTable:
    """One row per film, columns tagged into the four feature groups."""

    frame: pd.DataFrame
    manifest: dict
    dropped_missing_target: int = 0
    dropped_out_of_window: int = 0
    unknown_columns: Tuple[str, ...] = ()

    @property
    def rows(self) -> int:
        return len(self.frame)

    def columns_for(self, group: str) -> List[str]:
        if group not in FEATURE_GROUPS:
            raise ConfigError(f"group must be one of {FEATURE_GROUPS}, got {group!r}")
        return [c for c in self.manifest["groups"][group] if c in self.frame.columns]

    def targets(self) -> np.ndarray:
        return self.frame[self.manifest["target"]].to_numpy(dtype=np.float64)

    def years(self) -> np.ndarray:
        return self.frame[self.manifest["year_column"]].to_numpy(dtype=np.int64)

    def group_column_counts(self) -> Dict[str, int]:
        return {g: len(self.columns_for(g)) for g in FEATURE_GROUPS}


def load_manifest(path) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    for key in ("target", "year_column", "groups"):
        if key not in manifest:
            raise IngestionError(f"manifest {path} lacks required key {key!r}")
    manifest.setdefault("list_delimiter", "|")
    return manifest


def load_movies(path, manifest: Optional[dict] = None) -> MovieTable:
    """Read the aggregated movie table and clean it.

    Rows without a target are dropped; missing numeric cells are imputed
    with medians fitted on the train-window rows. Columns outside the
    manifest are kept but reported as unknown.
    """
    manifest = manifest or DEFAULT_MOVIE_MANIFEST
    if not os.path.isfile(path):
        raise IngestionError(f"movie table not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise IngestionError(f"cannot parse movie table {path}: {e}") from e
    if frame.empty:
        raise IngestionError(f"movie table {path} has no rows")
    target = manifest["target"]
    year_col = manifest["year_column"]
    if target not in frame.columns:
        raise IngestionError(f"movie table {path} lacks target column {target!r}")
    if year_col not in frame.columns:
        raise IngestionError(f"movie table {path} lacks year column {year_col!r}")

    known = {target} | {c for cols in manifest["groups"].values() for c in cols}
    unknown = tuple(c for c in frame.columns if c not in known)
    if unknown:
        log.warning("movie table has %d unmapped columns: %s", len(unknown), unknown)

    before = len(frame)
    frame = frame.dropna(subset=[target]).reset_index(drop=True)
    dropped = before - len(frame)

    numeric_cols = [
        c
        for g in ("numerical", "social")
        for c in manifest["groups"][g]
        if c in frame.columns
    ]
    years = pd.to_numeric(frame[year_col], errors="coerce")
    in_window = (years >= TRAIN_YEARS[0]) & (years <= TRAIN_YEARS[1])
    fit_rows = frame[in_window] if in_window.any() else frame
    if not in_window.any():
        log.warning("no rows inside the train window; imputing with whole-corpus medians")
    for col in numeric_cols:
        vals = pd.to_numeric(frame[col], errors="coerce")
        median = pd.to_numeric(fit_rows[col], errors="coerce").median()
        frame[col] = vals.fillna(0.0 if pd.isna(median) else median)

    table = MovieTable(
        frame=frame,
        manifest=manifest,
        dropped_missing_target=dropped,
        unknown_columns=unknown,
    )
    log.info(
        "loaded %d films (%d dropped for missing target); group columns: %s",
        table.rows,
        dropped,
        table.group_column_counts(),
    )
    return table


def split_by_year(table: MovieTable) -> Tuple[MovieTable, MovieTable]:
    """Train = films released in the 2000-2013 window, test = later films.

    Films before the window are dropped; the count is reported on both
    returned tables so the split arithmetic stays auditable.
    """
    years = table.years()
    train_sel = (years >= TRAIN_YEARS[0]) & (years <= TRAIN_YEARS[1])
    test_sel = years > TRAIN_YEARS[1]
    dropped = int((~train_sel & ~test_sel).sum())
    if not train_sel.any() and not test_sel.any():
        log.warning("no films fall inside or after the train window; both splits empty")
    log.info(
        "year split: %d train / %d test (%d earlier films dropped)",
        int(train_sel.sum()),
        int(test_sel.sum()),
        dropped,
    )

    def subset(sel: np.ndarray) -> MovieTable:
        return MovieTable(
            frame=table.frame[sel].reset_index(drop=True),
            manifest=table.manifest,
            dropped_missing_target=table.dropped_missing_target,
            dropped_out_of_window=dropped,
            unknown_columns=table.unknown_columns,
        )

    return subset(train_sel), subset(test_sel)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (rows, features) float32
    columns: List[str]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class GroupEncoder:
    """Fit-on-train feature encoder for one group.

    numerical/social: standardized columns. categorical: multi-hot over the
    train vocabulary (cells may hold several delimiter-separated values;
    unknown values encode to all zeros). textual: TF-IDF over the
    concatenated text columns, capped at 2000 features.
    """

    TEXT_CAP = 2000

    def __init__(self, group: str, manifest: Optional[dict] = None):
        if group not in FEATURE_GROUPS:
            raise ConfigError(f"group must be one of {FEATURE_GROUPS}, got {group!r}")
        self.group = group
        self.manifest = manifest or DEFAULT_MOVIE_MANIFEST
        self.fitted = False

    def fit(self, train: MovieTable) -> "GroupEncoder":
        cols = train.columns_for(self.group)
        if not cols:
            raise ConfigError(f"group {self.group!r} has no columns in this table")
        self.source_columns = cols
        if self.group in ("numerical", "social"):
            arr = train.frame[cols].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)
            self.means = np.nanmean(arr, axis=0)
            self.stds = np.nanstd(arr, axis=0)
            self.stds[self.stds == 0] = 1.0
            self.columns = list(cols)
        elif self.group == "categorical":
            delim = self.manifest.get("list_delimiter", "|")
            self.vocab: Dict[str, List[str]] = {}
            self.columns = []
            for col in cols:
                tokens = sorted(
                    {
                        tok.strip()
                        for cell in train.frame[col].fillna("")
                        for tok in str(cell).split(delim)
                        if tok.strip()
                    }
                )
                self.vocab[col] = tokens
                self.columns.extend(f"{col}={t}" for t in tokens)
        else:
            joined = self._join_text(train.frame, cols)
            self.vectorizer = TfidfVectorizer(max_features=self.TEXT_CAP)
            self.vectorizer.fit(joined)
            self.columns = [f"tfidf:{t}" for t in self.vectorizer.get_feature_names_out()]
        self.fitted = True
        return self

    @staticmethod
    def _join_text(frame: pd.DataFrame, cols: Sequence[str]) -> List[str]:
        parts = [frame[c].fillna("").astype(str) for c in cols]
        out = parts[0]
        for p in parts[1:]:
            out = out + " " + p
        return out.tolist()

    def transform(self, table: MovieTable) -> FeatureMatrix:
        if not self.fitted:
            raise ConfigError("encoder must be fitted before transforming")
        cols = self.source_columns
        if self.group in ("numerical", "social"):
            arr = table.frame[cols].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)
            arr = np.where(np.isnan(arr), self.means, arr)
            values = (arr - self.means) / self.stds
        elif self.group == "categorical":
            delim = self.manifest.get("list_delimiter", "|")
            blocks = []
            for col in cols:
                index = {t: i for i, t in enumerate(self.vocab[col])}
                block = np.zeros((table.rows, len(index)), dtype=np.float64)
                for r, cell in enumerate(table.frame[col].fillna("")):
                    for tok in str(cell).split(delim):
                        i = index.get(tok.strip())
                        if i is not None:
                            block[r, i] = 1.0
                blocks.append(block)
            values = np.concatenate(blocks, axis=1) if blocks else np.zeros((table.rows, 0))
        else:
            joined = self._join_text(table.frame, cols)
            values = self.vectorizer.transform(joined).toarray()
        return FeatureMatrix(values=values.astype(np.float32), columns=list(self.columns))


def encode_group(
    table: MovieTable, group: str, encoder: Optional[GroupEncoder] = None
) -> Tuple[FeatureMatrix, GroupEncoder]:
    """Encode one feature group; pass the train split first to fit, then
    reuse the returned encoder for the test split (statistics, vocabularies
    and text weights all derive from the fitting table alone)."""
    if encoder is None:
        encoder = GroupEncoder(group, table.manifest).fit(table)
    return encoder.transform(table), encoder


@dataclass
class MovieDatasetHandle:
    """Encoded feature matrix plus rating targets, ready for batching."""

    split: str
    features: Tensor  # (N, F) float32
    targets: Tensor  # (N,) float32

    @property
    def num_examples(self) -> int:
        return int(self.features.shape[0])

    def __len__(self) -> int:
        return self.num_examples

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def iter_batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        generator: Optional[torch.Generator] = None,
    ):
        order = (
            torch.randperm(self.num_examples, generator=generator)
            if shuffle
            else torch.arange(self.num_examples)
        )
        for start in range(0, self.num_examples, batch_size):
            idx = order[start : start + batch_size]
            yield self.features[idx], self.targets[idx]


def movie_handles(
    train: MovieTable, test: MovieTable, group: str
) -> Tuple[MovieDatasetHandle, MovieDatasetHandle]:
    """Encode one group on both splits with train-fitted statistics."""
    train_mat, encoder = encode_group(train, group)
    test_mat, _ = encode_group(test, group, encoder)
    return (
        MovieDatasetHandle(
            "train",
            torch.from_numpy(train_mat.values),
            torch.tensor(train.targets(), dtype=torch.float32),
        ),
        MovieDatasetHandle(
            "val",
            torch.from_numpy(test_mat.values),
            torch.tensor(test.targets(), dtype=torch.float32),
        ),
    )


_GENRES = ["action", "drama", "comedy", "thriller", "romance", "scifi", "documentary"]
_COUNTRIES = ["usa", "uk", "france", "india", "japan", "germany"]
_RATINGS = ["G", "PG", "PG-13", "R"]
_KEYWORDS_GOOD = ["masterful", "gripping", "landmark", "acclaimed", "visionary"]
_KEYWORDS_BAD = ["forgettable", "bland", "derivative", "tedious", "shallow"]
_KEYWORDS_NEUTRAL = ["city", "family", "journey", "war", "love", "future", "crime"]


def make_synthetic_movie_table(n_rows: int = 2000, seed: int = 0, missing_fraction: float = 0.0) -> pd.DataFrame:
    """Generate a movie table shaped like the real aggregated corpus.

    The rating depends on every feature group (budget and duration, social
    likes, genre membership, and sentiment words in the keyword text) plus
    noise, so each group alone carries predictive signal.
    """
    rng = np.random.default_rng(seed)
    genre_effect = {g: e for g, e in zip(_GENRES, np.linspace(-0.6, 0.6, len(_GENRES)))}
    rows = []
    for i in range(n_rows):
        year = int(rng.integers(1990, 2017))
        budget = float(np.exp(rng.normal(16.5, 1.2)))
        duration = float(rng.normal(108, 22))
        likes = float(np.exp(rng.normal(7.5, 1.5)))
        genres = list(rng.choice(_GENRES, size=int(rng.integers(1, 4)), replace=False))
        quality = float(rng.normal(0, 1))
        keywords = list(rng.choice(_KEYWORDS_NEUTRAL, size=3, replace=False))
        keywords.append(
            str(rng.choice(_KEYWORDS_GOOD if quality > 0 else _KEYWORDS_BAD))
        )
        rating = (
            5.8
            + 0.35 * (np.log(budget) - 16.5)
            + 0.012 * (duration - 108)
            + 0.25 * (np.log(likes) - 7.5)
            + np.mean([genre_effect[g] for g in genres])
            + 0.9 * quality
            + rng.normal(0, 0.35)
        )
        rows.append(
            {
                "title": f"film {i}",
                "plot_keywords": "|".join(keywords),
                "overview": f"a {genres[0]} about {keywords[0]} and {keywords[1]}",
                "tagline": f"the {keywords[-1]} one",
                "budget": budget,
                "duration": duration,
                "total_companies": int(rng.integers(1, 9)),
                "release_day": int(rng.integers(1, 29)),
                "release_month": int(rng.integers(1, 13)),
                "release_year": year,
                "total_languages": int(rng.integers(1, 5)),
                "actor_likes": likes * float(rng.uniform(0.4, 0.8)),
                "cast_likes": likes,
                "director_likes": likes * float(rng.uniform(0.1, 0.5)),
                "crew_likes": likes * float(rng.uniform(0.2, 0.6)),
                "production_countries": "|".join(
                    rng.choice(_COUNTRIES, size=int(rng.integers(1, 3)), replace=False)
                ),
                "content_rating": str(rng.choice(_RATINGS)),
                "genres": "|".join(genres),
                "rating": float(np.clip(rating, 1.0, 10.0)),
            }
        )
    frame = pd.DataFrame(rows)
    if missing_fraction > 0:
        mask = rng.random(n_rows) < missing_fraction
        frame.loc[mask, "budget"] = np.nan
    return frame
