#!/usr/bin/env python3
import logging

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def configure_logging(level="INFO"):
    """
    Installs a single stream handler with bracketed level tags.
    """
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT, force=True)


def status(tag, message):
    print(f"[{tag}] {message}")

