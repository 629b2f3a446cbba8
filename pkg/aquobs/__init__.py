#!/usr/bin/env python3

"""Water quality observability and robust sensor placement.

Importing the package loads every module and configures logging from the
packaged `logger_settings.yml`.
"""

from os import path
from yaml import safe_load
from pkgutil import iter_modules
from importlib import import_module
from logging.config import dictConfig

__version__ = "0.1.0"
_ROOT_DIR = path.dirname(path.dirname(path.realpath(__file__)))
_EXIT_MSG = "Exiting with error."
# order fixes the species blocks of the state vector
SPECIES = ("chlorine", "reactant")


def _load_modules(package_name: str) -> list[str]:
    package = import_module(package_name)
    loaded = []
    for info in iter_modules(package.__path__):
        if info.name != "__main__":
            loaded.append(import_module(f"{package_name}.{info.name}").__name__)
    return loaded


def _configure_logging(settings_file: str) -> None:
    with open(settings_file, mode="r", encoding="UTF-8") as fp:
        dictConfig(safe_load(fp))


_load_modules(__name__)
_configure_logging(path.join(_ROOT_DIR, __package__, "logger_settings.yml"))

del path, safe_load, iter_modules, import_module, dictConfig
del _load_modules, _configure_logging
