import csv
import datetime
import hashlib
import json
import logging
import os
import struct

import attr
import numpy as np
import torch
from scantree import RecursionFilter, scantree

from ._data import ObservedDataset
from ._errors import ArtifactError
from ._mixing import MixingFunction
from ._model import ModelConfig
from ._sim import GeneratorSpec
from ._train import Checkpoint, TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"TDRL"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "payload.bin"
RUN_MANIFEST_NAME = "run.json"
SUMMARY_NAME = "summary.txt"

_DTYPE_TAGS = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("bool"): 4,
}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}


def _le_dtype(array):
    if array.dtype == bool:
        return np.dtype("bool")
    if np.issubdtype(array.dtype, np.floating):
        return np.dtype("<f4") if array.dtype.itemsize == 4 else np.dtype("<f8")
    if np.issubdtype(array.dtype, np.integer):
        return np.dtype("<i8")
    raise ArtifactError(f"unsupported array dtype {array.dtype}")


def encode_array(array):
    """Self-describing bytes of `array`: magic `TDRL`, format version (u32), rank
    (u32), every dimension (u32), dtype tag (u8), then the row-major
    little-endian data."""
    array = np.asarray(array)
    dtype = _le_dtype(array)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", _DTYPE_TAGS[dtype])
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_array(data):
    """Inverse of `encode_array`.

    # Raises:
        ArtifactError: for bad magic bytes, an unknown version or dtype tag, or a
            truncated payload.
    """
    data = bytes(data)
    if data[:4] != MAGIC:
        raise ArtifactError("bad magic bytes in array payload")
    try:
        version, rank = struct.unpack_from("<II", data, 4)
        shape = struct.unpack_from(f"<{rank}I", data, 12)
        (tag,) = struct.unpack_from("<B", data, 12 + 4 * rank)
    except struct.error as exc:
        raise ArtifactError("truncated array header") from exc
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported array format version {version}")
    if tag not in _TAG_DTYPES:
        raise ArtifactError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    body = data[13 + 4 * rank :]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(body) != expected:
        raise ArtifactError(
            "array payload has the wrong size", expected=expected, found=len(body)
        )
    return np.frombuffer(body, dtype=dtype).reshape(shape).copy()


def checksum(data):
    """64-bit BLAKE2b digest as hex."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_bytes(path, data):
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from exc


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror}") from exc


def _make_dir(directory):
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create {directory}: {exc.strerror}") from exc


def write_arrays(directory, arrays):
    """Write named arrays into one payload file and return the array index."""
    index, blocks, offset = [], [], 0
    for name, array in arrays.items():
        block = encode_array(array)
        index.append(
            {
                "name": name,
                "shape": list(np.shape(array)),
                "dtype": _le_dtype(np.asarray(array)).str,
                "offset": offset,
                "length": len(block),
                "checksum": checksum(block),
            }
        )
        blocks.append(block)
        offset += len(block)
    _write_bytes(os.path.join(directory, PAYLOAD_NAME), b"".join(blocks))
    return index


def read_arrays(directory, index):
    """Read and verify the arrays listed in `index`.

    # Raises:
        ArtifactError: on a checksum, shape or dtype mismatch.
    """
    payload = _read_bytes(os.path.join(directory, PAYLOAD_NAME))
    arrays = {}
    for entry in index:
        block = payload[entry["offset"] : entry["offset"] + entry["length"]]
        if checksum(block) != entry["checksum"]:
            raise ArtifactError("checksum mismatch", array=entry["name"])
        array = decode_array(block)
        if list(array.shape) != entry["shape"] or array.dtype.str != entry["dtype"]:
            raise ArtifactError(
                "array does not match its manifest", array=entry["name"]
            )
        arrays[entry["name"]] = array
    return arrays


def write_manifest(directory, manifest):
    _write_bytes(os.path.join(directory, MANIFEST_NAME), _dumps(manifest).encode())


def read_manifest(directory, kind):
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        manifest = json.loads(_read_bytes(path).decode())
    except ValueError as exc:
        raise ArtifactError(f"{path} is not valid JSON") from exc
    if manifest.get("kind") != kind:
        raise ArtifactError(f"{directory} does not hold a {kind}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(
            f"unsupported format version {manifest.get('format_version')}"
        )
    return manifest


@attr.s(slots=True, frozen=True)
class DatasetManifest:
    """Self-description of a dataset directory."""

    generator_spec = attr.ib()
    mixing = attr.ib()
    transition_params = attr.ib()
    array_index = attr.ib()
    format_version = attr.ib(default=FORMAT_VERSION)

    def to_dict(self):
        return {"kind": "dataset", **attr.asdict(self)}


def write_dataset(dataset, directory):
    """Write `dataset` to `directory` (`manifest.json` and `payload.bin`).

    # Returns:
        The `DatasetManifest`.
    """
    _make_dir(directory)
    arrays = {
        "x": dataset.x,
        "z": dataset.z,
        "domains": dataset.domains,
        "adjacency": dataset.adjacency,
    }
    if dataset.latent_scale is not None:
        arrays["latent_offset"] = dataset.latent_offset
        arrays["latent_scale"] = dataset.latent_scale
    manifest = DatasetManifest(
        generator_spec=dataset.spec.to_dict(),
        mixing=dataset.mixing.to_dict(),
        transition_params=list(dataset.transition_params),
        array_index=write_arrays(directory, arrays),
    )
    write_manifest(directory, manifest.to_dict())
    logger.info("wrote dataset to %s", directory)
    return manifest


def read_dataset(directory):
    """Read a dataset directory written by `write_dataset`.

    # Raises:
        ArtifactError: if the directory is missing, corrupt or inconsistent.
    """
    manifest = read_manifest(directory, "dataset")
    arrays = read_arrays(directory, manifest["array_index"])
    try:
        spec = GeneratorSpec.from_dict(manifest["generator_spec"])
        mixing = MixingFunction.from_dict(manifest["mixing"])
        return ObservedDataset(
            spec=spec,
            mixing=mixing,
            x=arrays["x"],
            z=arrays["z"],
            domains=arrays["domains"],
            adjacency=arrays["adjacency"],
            transition_params=manifest["transition_params"],
            latent_offset=arrays.get("latent_offset"),
            latent_scale=arrays.get("latent_scale"),
        )
    except KeyError as exc:
        raise ArtifactError(f"dataset manifest lacks {exc}") from exc


def write_checkpoint(checkpoint, directory):
    """Write the parameters (including the change factors), both configs and the
    validation indices of `checkpoint` to `directory`."""
    _make_dir(directory)
    arrays = {
        f"state/{name}": tensor.detach().cpu().numpy()
        for name, tensor in checkpoint.state_dict.items()
    }
    arrays["val_indices"] = checkpoint.val_indices
    manifest = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "best_epoch": checkpoint.best_epoch,
        "array_index": write_arrays(directory, arrays),
    }
    write_manifest(directory, manifest)
    logger.info("wrote checkpoint to %s", directory)


def read_checkpoint(directory):
    manifest = read_manifest(directory, "checkpoint")
    arrays = read_arrays(directory, manifest["array_index"])
    state_dict = {
        name[len("state/") :]: torch.from_numpy(array)
        for name, array in arrays.items()
        if name.startswith("state/")
    }
    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        state_dict=state_dict,
        best_epoch=manifest["best_epoch"],
        val_indices=arrays["val_indices"],
    )


def write_history_csv(history, path):
    """One row per epoch with the train and validation loss terms."""
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                [
                    "epoch",
                    "train_recon",
                    "train_kld",
                    "train_total",
                    "val_recon",
                    "val_kld",
                    "val_total",
                ]
            )
            for row in history.to_rows():
                writer.writerow([repr(value) for value in row])
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from exc


def write_matrix_csv(path, matrix, header=None):
    matrix = np.atleast_2d(np.asarray(matrix))
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            if header is not None:
                writer.writerow(header)
            for row in matrix:
                writer.writerow([repr(value.item()) for value in row])
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from exc


def write_summary(path, summary):
    """Key-value text document, one `key: value` line per entry in the given
    order."""
    lines = []
    for key, value in summary.items():
        if isinstance(value, (list, tuple)):
            value = " ".join(repr(item) for item in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}: {value}\n")
    _write_bytes(path, "".join(lines).encode())


def read_summary(path):
    summary = {}
    for line in _read_bytes(path).decode().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ArtifactError(f"malformed summary line in {path}", line=line)
        summary[key.strip()] = value.strip()
    return summary


def content_hash(paths):
    """Git-style content hash of input files: the SHA-1 of the sorted
    `<blob sha> <name>` lines, where every blob is hashed as `blob <size>\\0<data>`."""
    lines = []
    for path in sorted(paths):
        data = _read_bytes(path)
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        lines.append(f"{blob} {os.path.basename(path)}\n")
    return hashlib.sha1("".join(lines).encode()).hexdigest()


def _now(deterministic):
    if deterministic:
        return None
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@attr.s(slots=True)
class RunManifest:
    """Record of one command invocation and every artifact it wrote.

    Timestamps are `None` in deterministic mode, so reruns produce identical
    bytes.
    """

    command = attr.ib()
    config = attr.ib(factory=dict)
    seeds = attr.ib(factory=dict)
    started = attr.ib(default=None)
    finished = attr.ib(default=None)
    artifacts = attr.ib(factory=list)
    input_hash = attr.ib(default=None)
    deterministic = attr.ib(default=False)

    @classmethod
    def start(cls, command, config, seeds, inputs=(), deterministic=False):
        return cls(
            command=list(command),
            config=config,
            seeds=seeds,
            started=_now(deterministic),
            input_hash=content_hash(inputs) if inputs else None,
            deterministic=deterministic,
        )

    def finish(self, directory):
        """List every artifact under `directory`, stamp the end time and write
        `run.json`."""
        self.finished = _now(self.deterministic)
        self.artifacts = sorted(
            os.path.relpath(path, directory)
            for path in scan_files(directory)
            if os.path.basename(path) != RUN_MANIFEST_NAME
        ) + [RUN_MANIFEST_NAME]
        _write_bytes(
            os.path.join(directory, RUN_MANIFEST_NAME),
            _dumps(attr.asdict(self)).encode(),
        )
        return self


def _verify_is_directory(directory):
    directory = os.fspath(directory)
    if not os.path.exists(directory):
        raise ArtifactError(f"{directory}: No such directory")
    if not os.path.isdir(directory):
        raise ArtifactError(f"{directory}: Is not a directory")


def scan_files(directory, name=None):
    """Paths of all files under `directory`, sorted, optionally only those
    called `name`.

    Symlinked directories are followed; a link back to a directory on the
    current branch is kept as a cyclic node and not descended into.
    """
    _verify_is_directory(directory)
    recursion_filter = RecursionFilter(match=None if name is None else [name])
    tree = scantree(os.fspath(directory), recursion_filter, allow_cyclic_links=True)
    return [path.absolute for path in tree.filepaths()]


def collect_summaries(directories):
    """Rows of all `summary.txt` documents found under `directories`, each with
    a `source` key holding the directory it was read from."""
    rows = []
    for directory in directories:
        for path in scan_files(directory, SUMMARY_NAME):
            row = {"source": os.path.dirname(path)}
            row.update(read_summary(path))
            rows.append(row)
    return rows


def write_report_csv(rows, path):
    """Table of summary rows; columns are the union of keys, `source` first."""
    keys = sorted({key for row in rows for key in row} - {"source"})
    try:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["source"] + keys, restval="", lineterminator="\n"
            )
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from exc
