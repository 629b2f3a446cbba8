#!/usr/bin/env python3

"""Module containing generic implementations.

This module contains the exception hierarchy, file helpers and settings
handling that the other modules of this package share.

Methods:
    - validate_textfile : Helper function to validate a text-based file given its path.
    - read_textfile : Read a validated text-based file into a string.
    - read_dataframe : Helper function to read in a pandas DataFrame
    from a delimited text file.
    - write_atomic : Write text or bytes to a path through a temporary file rename.
    - load_settings : Load the YAML settings, merged over the packaged defaults.
    - thread_count : Number of worker threads allowed by AQUOBS_THREADS.
"""

# Standard imports
import io as _io
import os as _os
from copy import deepcopy as _deepcopy
from logging import getLogger as _getLogger
from tempfile import NamedTemporaryFile as _NamedTemporaryFile
from yaml import safe_load as _safe_load
from pandas import DataFrame as _DataFrame, read_csv as _read_csv

# Module imports
from . import _EXIT_MSG

_LOG = _getLogger(__name__)

THREADS_ENV = "AQUOBS_THREADS"

DEFAULT_SETTINGS: dict = {
    "hydraulics": {"mass_tolerance": 1.0e-6, "default_dt_h": 3600.0},
    "observability": {
        "species": ["chlorine"],
        "dense_atom_cap": 2000,
        "epsilon_scale": 1.0e-8,
    },
    "placement": {
        "objective": "logdet",
        "oracle_cap": 2_000_000,
        "lazy": False,
        "probe_trials": 1000,
    },
    "output": {"trajectory_format": "csv"},
}


class AquobsError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class InputError(AquobsError):
    """Unreadable or missing input file."""

    exit_code = 1


class ValidationError(AquobsError):
    """Input data violates a model invariant."""

    exit_code = 2


class ParseError(ValidationError):
    """Malformed document; `where` holds a JSON path or a line number."""

    def __init__(self, message: str, where: str | int | None = None):
        self.where = where
        if where is not None:
            prefix = f"line {where}" if isinstance(where, int) else str(where)
            message = f"{prefix}: {message}"
        super().__init__(message)


class MassBalanceError(ValidationError):
    pass


class CFLError(ValidationError):
    pass


class GuaranteeViolation(ValidationError):
    pass


class ResourceCapError(AquobsError):
    """A configured size cap would be exceeded."""

    exit_code = 3


def validate_textfile(arg: str) -> str:
    """Helper function to validate a text-based file given its path.

    Args:
        - arg (str): Path of the text-based file to validate.

    Returns:
        str: Full canonical path of the file if it passes validation.
    """
    _LOG.debug(f"Executing: validate_textfile(arg='{arg}')")
    try:
        file = _os.path.realpath(arg)
        with open(file, mode="r", encoding="UTF-8") as f:
            f.readline()
            _LOG.info(f"File found: '{file}'")
        return file
    except OSError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise InputError(f"Cannot read file '{arg}': {e}") from e


def read_textfile(arg: str) -> str:
    """Read a validated text-based file into a string."""
    file = validate_textfile(arg)
    with open(file, mode="r", encoding="UTF-8") as f:
        return f.read()


def read_dataframe(
    source: str, sep: str, usecols: list[str], dtype: dict[str, type] | None = None,
    comment: str | None = None,
) -> _DataFrame:
    """Helper function to read in a pandas DataFrame from delimited text.

    Args:
        - source (str): Delimited text content (not a path).
        - sep (str): Column separator used in the given text.
        - usecols (list[str]): List of columns to read in, also used as a
        validation check that the required columns do exist.
        - dtype (dict[str, type] | None, optional): Optional dictionary of column names
        and data types to be applied when reading in the given text.
        - comment (str | None, optional): Character starting a comment line.

    Returns:
        pandas.DataFrame: Resulting DataFrame object.
    """
    _LOG.debug(f"Executing: read_dataframe(sep='{sep}', usecols={usecols}, dtype={dtype})")
    try:
        df: _DataFrame = _read_csv(
            _io.StringIO(source), sep=sep, usecols=usecols, dtype=dtype,
            comment=comment, skipinitialspace=True,
        )
        return df
    except ValueError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise ParseError(f"Tabular data unreadable: {e}") from e


def write_atomic(path: str, data: str | bytes) -> str:
    """Write text or bytes to a path through a temporary file rename.

    Args:
        - path (str): Destination path; parent directories are created.
        - data (str | bytes): Content to write.

    Returns:
        str: Full canonical path of the written file.
    """
    _LOG.debug(f"Executing: write_atomic(path='{path}')")
    target = _os.path.realpath(path)
    directory = _os.path.dirname(target)
    try:
        _os.makedirs(directory, exist_ok=True)
        binary = isinstance(data, bytes)
        with _NamedTemporaryFile(
            mode="wb" if binary else "w", dir=directory, delete=False,
            encoding=None if binary else "UTF-8", newline=None if binary else "",
            prefix=".tmp_", suffix=_os.path.basename(target),
        ) as temp:
            temp.write(data)
            temp_name = temp.name
        _os.replace(temp_name, target)
    except OSError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise InputError(f"Cannot write '{path}': {e}") from e
    return target


def _merge(base: dict, override: dict) -> dict:
    merged = _deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_settings(config_file: str | None = None) -> dict:
    """Load the YAML settings, merged over the packaged defaults.

    Args:
        - config_file (str | None, optional): Path to a settings YAML file.
        Defaults are returned unchanged if None (default).

    Returns:
        dict : Settings keyed by section.
    """
    _LOG.debug(f"Executing: load_settings(config_file={config_file!r})")
    if config_file is None:
        return _deepcopy(DEFAULT_SETTINGS)
    text = read_textfile(config_file)
    try:
        loaded = _safe_load(text) or {}
    except Exception as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise ParseError(f"Settings file is not valid YAML: {e}", config_file) from e
    if not isinstance(loaded, dict):
        raise ParseError("Settings file must hold a mapping", config_file)
    return _merge(DEFAULT_SETTINGS, loaded)


def thread_count(requested: int | None = None) -> int:
    """Number of worker threads allowed by AQUOBS_THREADS (at least 1)."""
    cap = _os.environ.get(THREADS_ENV)
    limit = _os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            _LOG.warning(f"Ignoring non-integer {THREADS_ENV}='{cap}'")
    if requested is not None:
        limit = min(limit, max(1, requested))
    return limit
