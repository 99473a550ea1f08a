"""Parameter count per layer family for the default and reduced models."""

import argparse
from collections import Counter

from deblur_lab.model import REFERENCE_PARAM_COUNT_M, ModelConfig, build_model, layer_family


def budget(cfg: ModelConfig) -> Counter:
    counts = Counter()
    for name, t in build_model(cfg).tensors.items():
        counts[layer_family(name)] += t.size
    return counts


def main(patch_px: int):
    configs = {"default": ModelConfig(patch_px=patch_px), "reduced-64": ModelConfig.reduced(64)}
    tables = {k: budget(c) for k, c in configs.items()}
    families = sorted(set().union(*tables.values()))
    print(f"{'family':<16}" + "".join(f"{k:>14}" for k in tables))
    for fam in families:
        print(f"{fam:<16}" + "".join(f"{t[fam]:>14,}" for t in tables.values()))
    print(f"{'total':<16}" + "".join(f"{sum(t.values()):>14,}" for t in tables.values()))
    print(f"reference total {REFERENCE_PARAM_COUNT_M}M; tokens {configs['default'].num_patches}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--patch-px", type=int, default=32)
    main(p.parse_args().patch_px)
