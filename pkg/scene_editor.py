#!/usr/bin/env python3
"""Entry point: ``python scene_editor.py <command> --config run.json [--set key=value ...]``."""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
