"""Datasets: text matrices, standardisation, splits, PGM images and patches.

Also builds the desk-scale benchmark sets (UCI Adult binarised to 123
indicator features, UCI red wine, binarised digits) from the raw files
shipped under ``data/raw``.
"""

from __future__ import annotations

import gzip
import io
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

BINARY = "binary"
REAL = "real"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    values: np.ndarray
    kind: str = REAL
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    note: str = ""
    image_shape: tuple | None = field(default=None)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.kind == BINARY:
            bad = ~np.isin(self.values, (0.0, 1.0))
            if bad.any():
                r, c = np.argwhere(bad)[0]
                raise DataError(f"binary dataset has value {self.values[r, c]!r} at row {r}, column {c}")
        elif self.kind != REAL:
            raise DataError(f"unknown dataset kind {self.kind!r}")

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def D(self):
        return self.values.shape[1]


def _split_line(line, delimiter):
    if delimiter is None:
        return line.replace(",", " ").split()
    return [tok.strip() for tok in line.split(delimiter)]


def parse_matrix(text, delimiter=None, missing=None):
    """Rows of numbers; '#' starts a comment line.  ``missing`` tokens become NaN."""
    rows, width = [], None
    for lineno, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        toks = _split_line(line, delimiter)
        row = []
        for col, tok in enumerate(toks):
            if missing is not None and tok == missing:
                row.append(np.nan)
                continue
            try:
                row.append(float(tok))
            except ValueError:
                raise DataError(f"cannot parse {tok!r} at row {len(rows)} (line {lineno + 1}), column {col}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataError(f"ragged row {len(rows)} (line {lineno + 1}): {len(row)} columns, expected {width}")
        rows.append(row)
    if not rows:
        return None
    return np.array(rows, dtype=np.float64)


def _read_text(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as f:
        return f.read()


def load_matrix(path, delimiter=None, kind=REAL, allow_empty=False) -> Dataset:
    values = parse_matrix(_read_text(path), delimiter)
    if values is None:
        if not allow_empty:
            raise DataError(f"{path}: no data rows")
        values = np.zeros((0, 0))
    return Dataset(values, kind, note=f"loaded from {os.path.basename(str(path))}")


def format_matrix(values, header=None, delimiter=" "):
    buf = io.StringIO()
    if header:
        for h in header.splitlines():
            buf.write(f"#{h}\n")
    for row in np.atleast_2d(values) if np.size(values) else []:
        buf.write(delimiter.join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _fmt(v):
    if np.isnan(v):
        return "?"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.17g}"


def atomic_write(path, data):
    path = str(path)
    tmp = f"{path}.tmp{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(data)
    os.replace(tmp, path)


def save_matrix(path, values, header=None, delimiter=" "):
    atomic_write(path, format_matrix(values, header, delimiter))


def standardize(train: Dataset):
    """Zero-mean, unit-std columns using population std; returns (dataset, (mean, std))."""
    if train.kind != REAL:
        raise DataError("only real-valued datasets are standardised")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    zero = np.flatnonzero(std == 0)
    if zero.size:
        raise DataError(f"column {int(zero[0])} has zero variance")
    return apply_stats(train, (mean, std)), (mean, std)


def apply_stats(other: Dataset, stats) -> Dataset:
    mean, std = stats
    return replace(other, values=(other.values - mean) / std, mean=mean, std=std,
                   note=(other.note + " standardised").strip())


def destandardize(ds: Dataset) -> np.ndarray:
    return ds.values * ds.std + ds.mean


def split(ds: Dataset, fractions, rng):
    """Seeded shuffle then consecutive blocks sized by ``fractions``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9 or np.any(fractions <= 0):
        raise DataError(f"split fractions must be positive and sum to 1, got {fractions.tolist()}")
    counts = np.floor(fractions * ds.N + 1e-9).astype(int)
    counts[-1] = ds.N - counts[:-1].sum()
    if np.any(counts == 0):
        raise DataError(f"split {fractions.tolist()} of {ds.N} rows leaves an empty part")
    perm = rng.permutation(ds.N)
    parts, start = [], 0
    for c in counts:
        parts.append(replace(ds, values=ds.values[perm[start:start + c]]))
        start += c
    return parts


def kfold(ds: Dataset, n_folds, fold, rng):
    """(train, test) for one fold of a seeded k-fold partition."""
    perm = rng.permutation(ds.N)
    chunks = np.array_split(perm, n_folds)
    test = chunks[fold]
    train = np.concatenate([c for i, c in enumerate(chunks) if i != fold])
    return replace(ds, values=ds.values[train]), replace(ds, values=ds.values[test])


# -- PGM images ---------------------------------------------------------------

def _pgm_tokens(data):
    """Header tokens of a PGM file, skipping comments; returns (tokens, payload offset)."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(data, pos)
        if m is None:
            raise DataError("truncated PGM header")
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    return tokens, pos + 1  # one whitespace byte after maxval


def read_pgm(path):
    """Plain (P2) or raw (P5) PGM as a float array of grey levels."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, off = _pgm_tokens(data)
    magic = tokens[0]
    w, h, maxval = (int(t) for t in tokens[1:4])
    if magic == b"P5":
        dt = np.dtype(">u2") if maxval > 255 else np.uint8
        img = np.frombuffer(data, dtype=dt, count=w * h, offset=off)
    elif magic == b"P2":
        img = np.array(data[off - 1:].split()[: w * h], dtype=np.float64)
        if img.size != w * h:
            raise DataError(f"{path}: expected {w * h} pixels, found {img.size}")
    else:
        raise DataError(f"{path}: unsupported image format {magic!r} (only P2/P5 PGM)")
    return img.astype(np.float64).reshape(h, w)


def write_pgm(path, img):
    """Raw 8-bit PGM; values are clipped to 0..255 and rounded."""
    img = np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def to_grey_levels(img):
    """Rescale an array linearly to [0, 255] (constant arrays map to 128)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.full(img.shape, 128.0)
    return (img - lo) / (hi - lo) * 255.0


def contact_sheet(tiles, cols=10, pad=1):
    """Grid of equally sized 2-D tiles with a 1-pixel border, tiles in [0,255]."""
    tiles = list(tiles)
    if not tiles:
        return np.zeros((1, 1))
    th, tw = tiles[0].shape
    rows = -(-len(tiles) // cols)
    sheet = np.zeros((rows * (th + pad) + pad, cols * (tw + pad) + pad))
    for n, t in enumerate(tiles):
        r, c = divmod(n, cols)
        y, x = pad + r * (th + pad), pad + c * (tw + pad)
        sheet[y:y + th, x:x + tw] = t
    return sheet


def prepare_patches(images, patch_size=8, n_patches=1000, rng=None, stride=None):
    """Mean-subtracted square patches with the bottom-right pixel dropped.

    Locations are either a regular grid (``stride``) or ``n_patches``
    uniformly random positions drawn from ``rng``.
    """
    rows = []
    images = [np.asarray(im, dtype=np.float64) for im in images]
    for im in images:
        if im.ndim != 2 or min(im.shape) < patch_size:
            raise DataError(f"image of shape {im.shape} is smaller than {patch_size}x{patch_size}")
    if stride is not None:
        for im in images:
            for y in range(0, im.shape[0] - patch_size + 1, stride):
                for x in range(0, im.shape[1] - patch_size + 1, stride):
                    rows.append(im[y:y + patch_size, x:x + patch_size].ravel())
    else:
        which = rng.integers(0, len(images), size=n_patches)
        for k in which:
            im = images[k]
            y = int(rng.integers(0, im.shape[0] - patch_size + 1))
            x = int(rng.integers(0, im.shape[1] - patch_size + 1))
            rows.append(im[y:y + patch_size, x:x + patch_size].ravel())
    P = np.array(rows, dtype=np.float64).reshape(-1, patch_size * patch_size)
    P = P - P.mean(axis=1, keepdims=True)
    return Dataset(P[:, :-1], REAL, note=f"{patch_size}x{patch_size} patches, mean removed, last pixel dropped",
                   image_shape=(patch_size, patch_size))


def restore_patch(row, patch_size=8):
    """Re-append the dropped pixel (minus the sum of the others) and reshape."""
    row = np.asarray(row, dtype=np.float64)
    return np.append(row, -row.sum()).reshape(patch_size, patch_size)


# -- benchmark datasets -----------------------------------------------------

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country",
]
# continuous columns -> number of quantile bins
ADULT_QUANTILES = {"age": 5, "fnlwgt": 5, "education-num": 5, "hours-per-week": 5}
ADULT_NONZERO = ("capital-gain", "capital-loss")


def _read_adult(path):
    recs = []
    for line in _read_text(path).splitlines():
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 15:
            continue
        recs.append(parts[:14])
    return recs


def _categories(names_path):
    """Category lists per categorical column, in adult.names order."""
    cats = {}
    for line in _read_text(names_path).splitlines():
        m = re.match(r"^([a-z-]+):\s*(.*)\.\s*$", line.strip())
        if m and m.group(1) in ADULT_COLUMNS and "continuous" not in m.group(2):
            cats[m.group(1)] = [c.strip() for c in m.group(2).split(",")]
    return cats


def quantile_edges(col, n_bins):
    """Bin edges at distinct values whose cumulative mass is closest to j/n_bins.

    Ties in ``col`` never produce an empty bin; bins hold values < edge.
    """
    vals, counts = np.unique(col, return_counts=True)
    cum = np.cumsum(counts)[:-1] / len(col)  # mass strictly below vals[1:]
    edges, lo = [], 0
    for j in range(1, n_bins):
        hi = len(cum) - (n_bins - 1 - j)
        if lo >= hi:
            break
        k = lo + int(np.argmin(np.abs(cum[lo:hi] - j / n_bins)))
        edges.append(vals[k + 1])
        lo = k + 1
    return np.array(edges)


def _quantile_bin(col, n_bins, edges=None):
    if edges is None:
        edges = quantile_edges(col, n_bins)
    return np.searchsorted(edges, col, side="right"), edges


def encode_adult(records, cats, edges=None):
    """123 binary indicators per record: quantile bins, zero/non-zero flags, one-hot categories.

    A missing ('?') categorical value leaves its whole block at zero.
    """
    cols = list(zip(*records))
    blocks, learned = [], {}
    for j, name in enumerate(ADULT_COLUMNS):
        col = cols[j]
        if name in ADULT_QUANTILES:
            vals = np.array(col, dtype=np.float64)
            k = ADULT_QUANTILES[name]
            idx, e = _quantile_bin(vals, k, None if edges is None else edges[name])
            learned[name] = e
            blocks.append(np.eye(k)[idx])
        elif name in ADULT_NONZERO:
            nz = np.array(col, dtype=np.float64) > 0
            blocks.append(np.stack([~nz, nz], axis=1).astype(np.float64))
        else:
            lookup = {c: i for i, c in enumerate(cats[name])}
            onehot = np.zeros((len(col), len(cats[name])))
            for r, v in enumerate(col):
                if v in lookup:
                    onehot[r, lookup[v]] = 1.0
            blocks.append(onehot)
    return np.hstack(blocks), learned


def build_adult(raw_dir, rng, n_train=5000, n_valid=1414, n_test=26147):
    """Binarised UCI Adult, split 5000 / 1414 / 26147 into train / valid / test."""
    recs = _read_adult(os.path.join(raw_dir, "adult.data.gz")) + _read_adult(os.path.join(raw_dir, "adult.test.gz"))
    cats = _categories(os.path.join(raw_dir, "adult.names"))
    perm = rng.permutation(len(recs))
    recs = [recs[i] for i in perm]
    if n_train + n_valid + n_test > len(recs):
        raise DataError("not enough Adult records for the requested split")
    train_recs = recs[:n_train]
    X_train, edges = encode_adult(train_recs, cats)
    X_valid, _ = encode_adult(recs[n_train:n_train + n_valid], cats, edges)
    X_test, _ = encode_adult(recs[n_train + n_valid:n_train + n_valid + n_test], cats, edges)
    note = "UCI adult, 123 binary indicators"
    return tuple(Dataset(X, BINARY, note=note) for X in (X_train, X_valid, X_test))


def load_red_wine(raw_dir) -> Dataset:
    """The 11 physico-chemical attributes of UCI red wine (quality column dropped)."""
    path = os.path.join(raw_dir, "winequality-red.csv")
    X = np.loadtxt(path, delimiter=",", skiprows=1)
    return Dataset(X[:, :11], REAL, note="UCI red wine quality, 11 attributes")


def build_digits(raw_dir, rng, n_valid=1000):
    """Stochastically binarised 28x28 digit images (5000-image MNIST subset)."""
    path = os.path.join(raw_dir, "mnist_5k.csv.gz")
    M = np.loadtxt(gzip.open(path, "rt"), delimiter=",")
    pix = M[:, :784] / 255.0
    X = (rng.uniform(pix.shape) < pix).astype(np.float64)
    X = X[rng.permutation(len(X))]
    note = "binarised MNIST subset"
    train = Dataset(X[n_valid:], BINARY, note=note, image_shape=(28, 28))
    valid = Dataset(X[:n_valid], BINARY, note=note, image_shape=(28, 28))
    return train, valid


def default_raw_dir():
    here = os.path.dirname(os.path.abspath(__file__))
    for cand in (os.environ.get("OANADE_RAW_DATA"), os.path.join(here, "..", "..", "data", "raw")):
        if cand and os.path.isdir(cand):
            return os.path.normpath(cand)
    raise DataError("raw data directory not found; set OANADE_RAW_DATA")
