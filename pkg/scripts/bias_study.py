"""Recovery bias of the decoherence fit over many seeds, in units of the quoted error."""

import numpy as np

from _common import parser, simulate, vmap
from wvmux import analysis as an
from wvmux.config import preset


def main():
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, default=20)
    args = p.parse_args()
    cfg = preset("recovery")
    truth = np.array([0.92, 0.13, cfg.decoherence.gamma])
    est, se = [], []
    for seed in range(args.seed, args.seed + args.seeds):
        cm, _ = simulate(cfg, seed, args.shots, args.threads)
        fit = an.fit_decoherence([vmap(cfg, cm, k) for k in sorted(cm.groups)], cfg.geometry, p0=cfg.analysis.p0)
        est.append(fit.params)
        se.append(fit.stderr)
        print(f"seed {seed}: " + "  ".join(f"{n} {v:.5g} +- {e:.2g}" for n, v, e in zip(fit.names, fit.params, fit.stderr)), flush=True)
    est, se = np.array(est), np.array(se)
    for i, name in enumerate(("v0", "w", "gamma")):
        bias = est[:, i].mean() - truth[i]
        print(
            f"{name:6s} mean {est[:, i].mean():.5g}  bias {bias:+.3g} = {bias / se[:, i].mean():+.2f} quoted se  "
            f"scatter/se {est[:, i].std(ddof=1) / se[:, i].mean():.2f}"
        )


if __name__ == "__main__":
    main()
