"""Small shared helpers: provenance and JSON I/O."""

from __future__ import annotations

import hashlib
import json
import os

_BUILD_ID = None


def build_id() -> str:
    """Short content hash of the installed package sources."""
    global _BUILD_ID
    if _BUILD_ID is None:
        h = hashlib.sha256()
        pkg_dir = os.path.dirname(os.path.abspath(__file__))
        for name in sorted(os.listdir(pkg_dir)):
            if name.endswith(".py"):
                with open(os.path.join(pkg_dir, name), "rb") as fh:
                    h.update(name.encode())
                    h.update(fh.read())
        _BUILD_ID = h.hexdigest()[:12]
    return _BUILD_ID


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
