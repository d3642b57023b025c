import hashlib
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np


def get_hash_of_file(file_bytes: bytes) -> str:
    """Creates a stable content ID for an input artifact."""
    hasher = hashlib.sha256()
    hasher.update(file_bytes)
    return hasher.hexdigest()


def hash_path(path: Path) -> str:
    return get_hash_of_file(Path(path).read_bytes())


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named stage ("split", "init", ...) of a run.

    The same (seed, name) always yields the same stream, so stages can be
    re-run on their own without replaying the others.
    """
    sequence = np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(zlib.crc32(name.encode("utf-8")),),
    )
    return np.random.default_rng(sequence)
