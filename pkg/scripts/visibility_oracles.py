"""Pooled visibility and g2 against the closed-form oracle, noiseless and noisy."""

import math

import numpy as np

from _common import effective_f, parser, simulate
from wvmux import analysis as an
from wvmux.analytic import DecoherenceParams, visibility_from_g2, visibility_vs_time
from wvmux.config import preset
from wvmux.core import Wavevector


def oracle_map(cfg, t, F):
    geom = cfg.geometry
    ys, xs = geom.sum_shape
    X, Y = np.meshgrid(*geom.sum_pixel_center(np.arange(xs), np.arange(ys)))
    dec = DecoherenceParams(cfg.decoherence.gamma)
    return np.vectorize(
        lambda x, y: visibility_vs_time(t, Wavevector(x, y), cfg.source, cfg.noise, dec, cfg.analysis.n_sigma, geom, F=F)
    )(X, Y)


def main():
    args = parser(__doc__).parse_args()
    for name in ("noiseless", "noisy"):
        cfg = preset(name)
        F = effective_f(cfg)
        region = an.interior_region(cfg.geometry, cfg.analysis.interior_margin_px)
        cm, dt = simulate(cfg, args.seed, args.shots, args.threads)
        print(f"[{name}] F_eff = {F:.5f}, {dt:.1f} s")
        for key in sorted(cm.groups):
            e = an.pooled_visibility(cm, key, region)
            C = cm.groups[key].total[region]
            expected = float((oracle_map(cfg, key[1], F)[region] * C).sum() / C.sum())
            g = an.estimate_g2(cm, key, region, "correlated")
            vg = visibility_from_g2(g.value)
            vg_se = 2 * g.stderr / (g.value + 1) ** 2
            print(
                f"  t={key[1]:5g}  V {e.value:.4f} +- {e.stderr:.4f}  oracle {expected:.4f} "
                f"({(e.value - expected) / e.stderr:+.1f} sd)  g2 route {vg:.4f} "
                f"({(vg - e.value) / math.hypot(e.stderr, vg_se):+.1f} sd)"
            )


if __name__ == "__main__":
    main()
