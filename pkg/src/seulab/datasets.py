"""Checksummed dataset cache.

Layout::

    <cache>/<name>/manifest.json   name, source checksums, normalization stats
    <cache>/<name>/data.npz        train_x, train_y, test_x, test_y (uint8 images)

Archives are verified before anything is written; a failed fetch leaves the
cache exactly as it was.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CACHE_ENV = "SEULAB_CACHE"
DEFAULT_CACHE = "~/.cache/seulab"


class IngestionError(RuntimeError):
    """A dataset is missing from the cache or could not be read."""


class FetchError(RuntimeError):
    """Download failed or an archive did not match its pinned checksum."""


def default_cache() -> Path:
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE)).expanduser()


@dataclass
class BaseDataset:
    name: str
    train_x: np.ndarray  # uint8, N x C x H x W
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    mean: float
    std: float

    @property
    def n_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1

    @property
    def input_shape(self):
        return tuple(int(v) for v in self.train_x.shape[1:])

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x.astype(np.float32) / 255.0) - self.mean) / self.std


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)
MNIST_FILES = {
    "train-images-idx3-ubyte.gz": ("md5", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train-labels-idx1-ubyte.gz": ("md5", "d53e105ee54ea40749a09fcbcd1e9432"),
    "t10k-images-idx3-ubyte.gz": ("md5", "9fb629c4189551a2d022fa330f9573f3"),
    "t10k-labels-idx1-ubyte.gz": ("md5", "ec29112dd5afa0611ce80d1b7f02629c"),
}

# 5000-sample MNIST subset shipped inside the mlxtend wheel (500 per class);
# usable offline when the full corpus cannot be downloaded.
MNIST5K_FILE = "mnist_5k.csv.gz"
MNIST5K_CHECKSUM = ("sha256", "846f6cad587fea3877f6e0fe0a1968dfc68867ce170d3bc9fc2dccdbed17961d")
MNIST5K_TEST_PER_CLASS = 100

DATASETS = ("mnist", "mnist5k")


def file_digest(path, algo: str) -> str:
    h = hashlib.new(algo)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify(path, checksum) -> None:
    algo, expected = checksum
    got = file_digest(path, algo)
    if got != expected:
        raise FetchError(f"checksum mismatch for {Path(path).name}: {algo} {got} != {expected}")


def _download(url: str, dest: Path, timeout: float = 60.0) -> None:
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(dest, "wb") as fh:
        shutil.copyfileobj(resp, fh)


def _read_idx(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as fh:
        raw = fh.read()
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _mlxtend_archive() -> Optional[Path]:
    try:
        import mlxtend
    except ImportError:
        return None
    path = Path(mlxtend.__file__).parent / "data" / "data" / MNIST5K_FILE
    return path if path.exists() else None


def _stage_mnist(workdir: Path, archive: Optional[Path]) -> Dict[str, np.ndarray]:
    for fname, checksum in MNIST_FILES.items():
        dest = workdir / fname
        if archive is not None:
            src = Path(archive) / fname
            if not src.exists():
                raise FetchError(f"{src} not found in local archive directory")
            shutil.copyfile(src, dest)
        else:
            errors = []
            for mirror in MNIST_MIRRORS:
                try:
                    _download(mirror + fname, dest)
                    break
                except OSError as exc:
                    errors.append(f"{mirror}: {exc}")
            else:
                raise FetchError(f"could not download {fname}: " + "; ".join(errors))
        verify(dest, checksum)
    return {
        "train_x": _read_idx(workdir / "train-images-idx3-ubyte.gz")[:, None],
        "train_y": _read_idx(workdir / "train-labels-idx1-ubyte.gz").astype(np.int64),
        "test_x": _read_idx(workdir / "t10k-images-idx3-ubyte.gz")[:, None],
        "test_y": _read_idx(workdir / "t10k-labels-idx1-ubyte.gz").astype(np.int64),
    }


def _stage_mnist5k(workdir: Path, archive: Optional[Path]) -> Dict[str, np.ndarray]:
    src = Path(archive) if archive is not None else _mlxtend_archive()
    if src is None or not src.exists():
        raise FetchError("mnist5k needs the mlxtend package installed or --archive pointing at "
                         f"{MNIST5K_FILE}")
    dest = workdir / MNIST5K_FILE
    shutil.copyfile(src, dest)
    verify(dest, MNIST5K_CHECKSUM)
    with gzip.open(dest, "rb") as fh:
        table = np.loadtxt(io.BytesIO(fh.read()), delimiter=",")
    x = table[:, :-1].astype(np.uint8).reshape(-1, 1, 28, 28)
    y = table[:, -1].astype(np.int64)
    # fixed stratified split: the subset has no official test partition
    rng = np.random.default_rng(0)
    test_idx = np.concatenate([
        rng.permutation(np.flatnonzero(y == c))[:MNIST5K_TEST_PER_CLASS] for c in np.unique(y)
    ])
    test_mask = np.zeros(len(y), dtype=bool)
    test_mask[test_idx] = True
    return {"train_x": x[~test_mask], "train_y": y[~test_mask],
            "test_x": x[test_mask], "test_y": y[test_mask]}


_STAGERS = {"mnist": (_stage_mnist, MNIST_FILES),
            "mnist5k": (_stage_mnist5k, {MNIST5K_FILE: MNIST5K_CHECKSUM})}


# ---------------------------------------------------------------------------
# cache operations
# ---------------------------------------------------------------------------

def _read_manifest(directory: Path) -> Optional[dict]:
    path = directory / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def is_cached(name: str, cache=None) -> bool:
    directory = Path(cache or default_cache()) / name
    manifest = _read_manifest(directory)
    if manifest is None or not (directory / "data.npz").exists():
        return False
    return file_digest(directory / "data.npz", "sha256") == manifest["data_sha256"]


def fetch(name: str, cache=None, archive=None) -> Path:
    """Populate ``<cache>/<name>``; returns the dataset directory.

    A warm, checksum-valid cache is left untouched.
    """
    if name not in _STAGERS:
        raise FetchError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    cache = Path(cache or default_cache())
    target = cache / name
    if is_cached(name, cache):
        log.info("%s already cached at %s", name, target)
        return target
    stage, files = _STAGERS[name]
    cache.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=cache, prefix=f".{name}-") as tmp:
        workdir = Path(tmp)
        arrays = stage(workdir, Path(archive) if archive else None)
        train = arrays["train_x"].astype(np.float64) / 255.0
        mean, std = float(train.mean()), float(train.std())
        np.savez_compressed(workdir / "data.npz", **arrays)
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "name": name,
            "files": {f: {"algo": c[0], "digest": c[1]} for f, c in files.items()},
            "data_sha256": file_digest(workdir / "data.npz", "sha256"),
            "normalization": {"mean": mean, "std": std},
            "n_train": int(len(arrays["train_y"])),
            "n_test": int(len(arrays["test_y"])),
            "input_shape": list(arrays["train_x"].shape[1:]),
        }
        (workdir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        staged = cache / f".{name}-ready"
        if staged.exists():
            shutil.rmtree(staged)
        staged.mkdir()
        shutil.move(str(workdir / "data.npz"), staged / "data.npz")
        shutil.move(str(workdir / "manifest.json"), staged / "manifest.json")
        for fname in files:
            shutil.move(str(workdir / fname), staged / fname)
    if target.exists():
        shutil.rmtree(target)
    staged.rename(target)
    return target


def load(name: str, cache=None) -> BaseDataset:
    cache = Path(cache or default_cache())
    directory = cache / name
    manifest = _read_manifest(directory)
    if manifest is None or not (directory / "data.npz").exists():
        raise IngestionError(
            f"dataset {name!r} not found in {cache}; run `seulab fetch-data {name} --cache {cache}`")
    with np.load(directory / "data.npz") as data:
        arrays = {k: data[k] for k in ("train_x", "train_y", "test_x", "test_y")}
    norm = manifest["normalization"]
    return BaseDataset(name, mean=float(norm["mean"]), std=float(norm["std"]), **arrays)
