"""Regenerate the shipped codebook asset.

Run once per codebook version; the output is committed and never rebuilt at
runtime for the default world.

    python scripts/build_codebook.py
"""
import json
from pathlib import Path

from goat_tts.toy_world.codec import CODEBOOK_VERSION, codebook_assets
from goat_tts.toy_world.world import WorldConfig

ASSETS = Path(__file__).resolve().parents[1] / "src" / "goat_tts" / "toy_world" / "assets"


def main():
    blob, meta = codebook_assets(WorldConfig(), CODEBOOK_VERSION)
    ASSETS.mkdir(parents=True, exist_ok=True)
    (ASSETS / f"codebook_v{CODEBOOK_VERSION}.f32").write_bytes(blob)
    (ASSETS / f"codebook_v{CODEBOOK_VERSION}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: meta[k] for k in ("version", "radius", "sha256")}, indent=2))


if __name__ == "__main__":
    main()
