"""Single-file archive for named arrays.

Used for encoder weights, optional flow-estimator weights, and training
checkpoints. The container is a zip holding a JSON manifest plus one raw
little-endian binary blob per array. The manifest records name, shape,
dtype and sha256 for every array and is validated before any array is
returned, so a truncated or tampered file fails loudly with the name of
the offending entry.
"""

import hashlib
import json
import zipfile

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "colorista-archive"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"float32", "float64", "int64", "uint8"}


class ArchiveError(RuntimeError):
    """Malformed, incomplete or corrupted archive."""


def _entry(filename):
    return zipfile.ZipInfo(filename, date_time=(1980, 1, 1, 0, 0, 0))


def _entry_path(name):
    return "arrays/" + name + ".bin"


def save_archive(path, arrays, metadata=None):
    """Write ``arrays`` (dict name -> ndarray) plus JSON ``metadata``."""
    records = []
    blobs = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for array '{name}'")
        # normalize to little-endian byte order so the sha is platform-stable
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        records.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs[name] = raw
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "arrays": records,
        "metadata": metadata or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed entry timestamps keep the file bytes a pure function of
        # the contents, so identical states produce identical archives
        zf.writestr(_entry(MANIFEST_NAME), json.dumps(manifest, indent=1, sort_keys=True))
        for name, raw in blobs.items():
            zf.writestr(_entry(_entry_path(name)), raw)


def load_manifest(path):
    """Read and sanity-check the manifest without touching array data."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            try:
                raw = zf.read(MANIFEST_NAME)
            except KeyError:
                raise ArchiveError(f"{path}: missing {MANIFEST_NAME}")
    except zipfile.BadZipFile as exc:
        raise ArchiveError(f"{path}: not an archive ({exc})")
    manifest = json.loads(raw)
    if manifest.get("format") != FORMAT_TAG:
        raise ArchiveError(f"{path}: unrecognized format tag {manifest.get('format')!r}")
    for rec in manifest.get("arrays", []):
        for key in ("name", "shape", "dtype", "sha256"):
            if key not in rec:
                raise ArchiveError(f"{path}: manifest entry missing '{key}'")
    return manifest


def load_archive(path, names=None):
    """Return (arrays, metadata); verifies shape/dtype/sha256 per entry.

    ``names`` restricts loading to a subset (all arrays by default).
    """
    manifest = load_manifest(path)
    records = {rec["name"]: rec for rec in manifest["arrays"]}
    if names is None:
        names = list(records)
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in names:
            if name not in records:
                raise ArchiveError(f"{path}: archive has no array '{name}'")
            rec = records[name]
            try:
                raw = zf.read(_entry_path(name))
            except KeyError:
                raise ArchiveError(f"{path}: data blob missing for array '{name}'")
            if hashlib.sha256(raw).hexdigest() != rec["sha256"]:
                raise ArchiveError(f"{path}: checksum mismatch for array '{name}'")
            dtype = np.dtype(rec["dtype"]).newbyteorder("<")
            arr = np.frombuffer(raw, dtype=dtype).reshape(rec["shape"])
            arrays[name] = arr.astype(np.dtype(rec["dtype"]), copy=True)
    return arrays, manifest.get("metadata", {})
