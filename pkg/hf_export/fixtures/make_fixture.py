#!/usr/bin/env python3
"""Regenerate the synthetic checkpoint fixture.

The fixture is a torch checkpoint holding a known 8-token x 4-dim float32
prompt tensor (deterministic formula, no RNG) plus a decoy tensor, stored
both flat and under a nested module path so name resolution is exercised.
"""

from pathlib import Path

import numpy as np
import torch

HERE = Path(__file__).resolve().parent


def known_prompt() -> np.ndarray:
    """The reference 8x4 (tokens x dim) tensor; value = (7*i - 3*j + 1) / 4."""
    i, j = np.meshgrid(np.arange(8), np.arange(4), indexing="ij")
    return ((7 * i - 3 * j + 1) / 4.0).astype(np.float32)


def main() -> None:
    prompt = torch.from_numpy(known_prompt())
    decoy = torch.linspace(-1.0, 1.0, steps=6, dtype=torch.float32)
    checkpoint = {
        "prompt_embeddings.weight": prompt,
        "encoder.block.bias": decoy,
        "state_dict": {"nested.prompt": prompt.clone()},
    }
    out = HERE / "synthetic_checkpoint.pt"
    torch.save(checkpoint, out)
    print(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
