"""Self-describing checkpoint container.

Files are safetensors: a JSON header (tensor names, dtypes, shapes, offsets
and a string metadata table) followed by the raw little-endian payload.
All metadata lives in one canonical-JSON entry so the header bytes do not
depend on map iteration order. Tensors are namespaced ``<section>.<name>``
so one file can carry several sections (``model``, ``heads``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import LoadError

_META_KEY = "ppgkd"


def save_sections(path, sections: Mapping[str, Mapping[str, torch.Tensor]], meta: Mapping | None = None):
    tensors = {}
    shapes = {}
    for section, state in sections.items():
        for name, t in state.items():
            key = f"{section}.{name}"
            tensors[key] = t.detach().contiguous().cpu().clone()
            shapes[key] = list(t.shape)
    header = {"sections": sorted(sections), "shapes": shapes}
    header.update(meta or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={_META_KEY: json.dumps(header, sort_keys=True)})


def load_sections(path) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    sections: dict[str, dict[str, torch.Tensor]] = {}
    with safe_open(str(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get(_META_KEY)
        if raw is None:
            raise LoadError(f"{path}: missing checkpoint metadata")
        meta = json.loads(raw)
        for key in fh.keys():
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = fh.get_tensor(key)
    return sections, meta
