"""
The Helper class provides some basic helper functions to not mess up the code in other
classes: deterministic run ids, checksums, JSON/CSV emission, atomic output directories,
statistics helpers and signal handling.
"""

__author__ = "HybridODE contributors"
__license__ = "GPL-3.0"


import contextlib
import hashlib
import json
import math
import os
import shutil
import sys
import uuid
from types import FrameType
from typing import Any, Dict, Iterator, List, Optional, Sequence
import numpy as np
import pandas as pd
import hybridode.utils.version
from hybridode.utils.exceptions import ConfigurationError, MissingArtifactError
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

# Fixed namespace so identical configs map to identical run ids across machines.
RUN_ID_NAMESPACE = uuid.UUID("6f1d2c3e-8b7a-5e4f-9d0c-1a2b3c4d5e6f")


class Helper:
    """
    The Helper class provides some basic helper functions to not mess up the code in other
    classes.

    Methods:
        get_uuid_string(payload: Any) -> str:
            Generates a deterministic uuid for a JSON-serialisable payload.

        canonical_json(payload: Any) -> str:
            Serialises a payload with sorted keys and no whitespace.

        sha256_file(path: str) -> str:
            Returns the hex sha256 digest of a file.

        sha256_arrays(arrays: Dict[str, np.ndarray]) -> str:
            Returns a digest over array names, shapes and raw float64 contents.

        write_json(path: str, payload: Any) -> None:
            Writes a JSON document with sorted keys.

        write_csv(path: str, frame: pd.DataFrame) -> None:
            Writes a DataFrame with full float precision and stable line endings.

        atomic_output_dir(path: str, force: bool) -> Iterator[str]:
            Builds an output directory under a temporary name and renames it on success.

        sem(values: Sequence[float]) -> Optional[float]:
            Standard error of the mean, None for fewer than two values.

        chunk(items: Sequence, size: int) -> List[Sequence]:
            Splits a sequence into consecutive chunks.

        get_version(print_version: bool = False) -> None:
            Prints the current version and exits when requested.

        handler_sigint(signum: int, frame: FrameType) -> None:
            Signal handler for SIGINT.
    """
    def __init__(self):
        """
        Initializes the general Helper class.
        """

    @staticmethod
    def canonical_json(payload: Any) -> str:
        """
        Serialises a payload with sorted keys and compact separators so that equal
        payloads always produce equal strings.
        """
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=Helper._json_default)

    @staticmethod
    def _json_default(value: Any) -> Any:
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, (np.floating, np.integer, np.bool_)):
            return value.item()
        raise TypeError(f"Object of type {type(value).__name__} is not JSON serialisable.")

    @staticmethod
    def get_uuid_string(payload: Any) -> str:
        """
        Generates a name-based uuid from the canonical JSON of a payload.

        Args:
            payload (Any): Usually the resolved run configuration.

        Returns:
            str: Deterministic uuid as a string.
        """
        logger.debug("Starting: get_uuid_string.")
        generated_uuid = uuid.uuid5(RUN_ID_NAMESPACE, Helper.canonical_json(payload))
        logger.debug("Finished: get_uuid_string.")
        return str(generated_uuid)

    @staticmethod
    def sha256_text(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @staticmethod
    def sha256_file(path: str) -> str:
        """
        Returns the hex sha256 digest of a file.

        Raises:
            MissingArtifactError: If the file does not exist.
        """
        if not os.path.isfile(path):
            raise MissingArtifactError(f"The file {path} does not exist.", path=path)

        digest = hashlib.sha256()
        with open(path, "rb") as handle:
            for block in iter(lambda: handle.read(1 << 20), b""):
                digest.update(block)
        return digest.hexdigest()

    @staticmethod
    def sha256_arrays(arrays: Dict[str, np.ndarray]) -> str:
        """
        Digest over array names, dtypes, shapes and raw contents in key order.
        Used for binary containers whose on-disk bytes carry timestamps.
        """
        digest = hashlib.sha256()
        for name in sorted(arrays):
            array = np.ascontiguousarray(arrays[name])
            digest.update(name.encode("utf-8"))
            digest.update(str(array.dtype).encode("utf-8"))
            digest.update(str(array.shape).encode("utf-8"))
            digest.update(array.tobytes())
        return digest.hexdigest()

    @staticmethod
    def write_json(path: str, payload: Any) -> None:
        """
        Writes a JSON document with sorted keys and a trailing newline.
        """
        logger.debug("Starting: write_json.", path=path)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True, default=Helper._json_default)
            handle.write("\n")
        logger.debug("Finished: write_json.")

    @staticmethod
    def read_json(path: str) -> Any:
        if not os.path.isfile(path):
            raise MissingArtifactError(f"The file {path} does not exist.", path=path)
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)

    @staticmethod
    def write_csv(path: str, frame: pd.DataFrame) -> None:
        """
        Writes a DataFrame as CSV with 17 significant digits so that float64 values
        survive a round trip and re-runs produce identical bytes.
        """
        logger.debug("Starting: write_csv.", path=path, rows=len(frame))
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.debug("Finished: write_csv.")

    @staticmethod
    def ensure_parent(path: str) -> None:
        """
        Validates that the parent directory of an output path exists.

        Raises:
            MissingArtifactError: If the parent directory is missing.
        """
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(parent):
            raise MissingArtifactError(f"The parent directory {parent} of output {path} does not exist.", path=parent)

    @staticmethod
    @contextlib.contextmanager
    def atomic_output_dir(path: str, force: bool = False) -> Iterator[str]:
        """
        Creates an output directory atomically. Work happens in ``<path>.partial``,
        which replaces ``path`` only when the block finishes without an exception.

        Args:
            path (str): Final directory path.
            force (bool): Replace an existing directory instead of refusing.

        Yields:
            str: The temporary directory to write into.

        Raises:
            MissingArtifactError: If the parent directory does not exist.
            ConfigurationError: If the directory exists and force is not set.
        """
        logger.debug("Starting: atomic_output_dir.", path=path)
        Helper.ensure_parent(path)
        if os.path.exists(path) and not force:
            raise ConfigurationError(f"Output {path} already exists. Use --force to overwrite it.")

        partial = f"{path.rstrip(os.sep)}.partial"
        if os.path.exists(partial):
            shutil.rmtree(partial)
        os.makedirs(partial)

        try:
            yield partial
        except BaseException:
            shutil.rmtree(partial, ignore_errors=True)
            raise

        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(partial, path)
        logger.debug("Finished: atomic_output_dir.")

    @staticmethod
    def sem(values: Sequence[float]) -> Optional[float]:
        """
        Standard error of the mean with the sample standard deviation.

        Returns:
            Optional[float]: None when fewer than two values are present.
        """
        values = np.asarray(list(values), dtype=np.float64)
        if values.size < 2:
            return None
        return float(np.std(values, ddof=1) / math.sqrt(values.size))

    @staticmethod
    def chunk(items: Sequence, size: int) -> List[Sequence]:
        """
        Splits a sequence into consecutive chunks of at most ``size`` items.
        """
        size = max(1, int(size))
        return [items[i:i + size] for i in range(0, len(items), size)]

    @staticmethod
    def get_version(print_version: bool = False) -> None:
        """
        Returns the current version of HybridODE and optionally prints it to stdout.

        Parameters:
            print_version (bool): If True, prints the version information to stdout and exits the program.
        """
        if print_version:
            print(f"{hybridode.utils.version.__app_name__} version: {hybridode.utils.version.__version__}\n{hybridode.utils.version.__copyright__}")
            sys.exit(0)

    @staticmethod
    def handler_sigint(signum: int, frame: FrameType) -> None:
        """
        Signal handler for SIGINT. (triggered by CTRL+C).

        Args:
            signum (int): The signal number (e.g., SIGINT).
            frame (FrameType): The current stack frame when the signal was received.
        """
        exit_message = "HybridODE has been terminated by user."
        logger.debug(exit_message)
        print(f"\n {exit_message}")
        sys.exit(0)
