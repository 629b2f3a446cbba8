#!/usr/bin/env python3

from sys import exit
from logging import getLogger

from aquobs.cli import main

_LOG = getLogger(__name__)


if __name__ == "__main__":
    _LOG.info(f"Started module execution: '{__package__}'")
    try:
        exit(main())
    finally:
        _LOG.info(f"Completed module execution: '{__package__}'")
