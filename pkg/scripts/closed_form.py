"""Closed-form numbers: binning factor, mode summary, camera scalars."""

from wvmux import analysis as an
from wvmux.analytic import (
    binning_factor,
    collision_probability,
    crosstalk_probability,
    model_map,
    success_probability,
)
from wvmux.config import preset


def main():
    cfg = preset("reference")
    src, geom = cfg.source, cfg.geometry
    print(f"F(1)              {binning_factor(1.0, src.alpha):.5f}")
    print(f"collision (5 ph)  {collision_probability(cfg.camera.n_px, 5):.4e}")
    print(f"success           {success_probability(src.eta_w, src.chi, src.M):.4f}")
    print(f"crosstalk         {crosstalk_probability(src, 2.65, cfg.camera.n_px):.4e}")
    for t in (0.0, 30.0, 45.0, 60.0):
        s = an.mode_summary(model_map(t, geom, 0.92, 0.13, cfg.decoherence.gamma), n_boot=50)
        print(f"t={t:4g} us  violating fraction {s.fraction.value:.3f}  mean V {s.mean_all.value:.3f}")


if __name__ == "__main__":
    main()
