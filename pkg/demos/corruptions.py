"""Print one raster under each corruption at severities 1, 3 and 5 as ASCII.

    python demos/corruptions.py
"""

import numpy as np

from ma2t import driving as dr
from ma2t.evaluation import CORRUPTIONS, CorruptionSpec, apply_corruption

SHADES = " .:-=+*#%@"


def ascii(channel):
    idx = np.clip((channel * (len(SHADES) - 1)).round().astype(int), 0, len(SHADES) - 1)
    return ["".join(SHADES[i] for i in row) for row in idx[::2, ::1]]


def main():
    scenario = dr.sample_feasible_scenario(dr.DatasetConfig(seed=3), 0)
    raster = dr.rasterize(scenario)
    # dim corridor with obstacles on top
    view = lambda r: np.maximum(0.4 * r[0], r[2])
    for kind in CORRUPTIONS:
        panels = [ascii(view(apply_corruption(raster, CorruptionSpec(kind, s)))) for s in (1, 3, 5)]
        print(f"\n{kind}: severity 1 | 3 | 5")
        for rows in zip(*panels):
            print(" | ".join(rows))


if __name__ == "__main__":
    main()
