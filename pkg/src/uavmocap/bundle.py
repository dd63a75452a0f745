"""Versioned JSON bundle holding the body template and the pose prior basis.

The shipped file is the source of truth; :func:`build_bundle_json` regenerates
it byte-for-byte from the seeds (``python -m uavmocap.bundle`` rewrites it).
"""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .body_model import TEMPLATE_SEED, TEMPLATE_VERSION, BodyTemplate, build_template
from .pose_prior import PRIOR_SEED, PriorBasis, build_prior

BUNDLE_NAME = f"bundle_v{TEMPLATE_VERSION}.json"


def build_bundle_json() -> str:
    doc = {
        "schema": "uavmocap.bundle",
        "version": TEMPLATE_VERSION,
        "template_seed": TEMPLATE_SEED,
        "template": build_template(TEMPLATE_SEED).to_dict(),
        "prior": build_prior(PRIOR_SEED).to_dict(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def bundle_path() -> Path:
    return Path(str(resources.files("uavmocap") / "data" / BUNDLE_NAME))


@lru_cache(maxsize=None)
def load_bundle(path: str | None = None) -> tuple[BodyTemplate, PriorBasis]:
    text = Path(path).read_text() if path else bundle_path().read_text()
    doc = json.loads(text)
    return BodyTemplate.from_dict(doc["template"]), PriorBasis.from_dict(doc["prior"])


def default_template() -> BodyTemplate:
    return load_bundle()[0]


def default_prior() -> PriorBasis:
    return load_bundle()[1]


if __name__ == "__main__":
    out = Path(__file__).parent / "data" / BUNDLE_NAME
    out.write_text(build_bundle_json())
    print(f"wrote {out}")
