"""Inject (V0, W, gamma), simulate the storage-time schedule and refit."""

from _common import parser, simulate, vmap
from wvmux import analysis as an
from wvmux.config import preset


def main():
    p = parser(__doc__)
    p.add_argument("--preset", default="recovery", choices=("recovery", "lifetime"))
    args = p.parse_args()
    cfg = preset(args.preset)
    cm, dt = simulate(cfg, args.seed, args.shots, args.threads)
    keys = sorted(cm.groups)
    fit = an.fit_decoherence([vmap(cfg, cm, k) for k in keys], cfg.geometry, p0=cfg.analysis.p0)
    T, T_se = fit.temperature
    print(f"simulated {len(keys)} storage times in {dt:.1f} s (injected gamma {cfg.decoherence.gamma:g})")
    for name in fit.names:
        print(f"  {name:6s} {fit[name]:.5g} +- {fit.error(name):.2g}")
    print(f"  T      {T:.2f} +- {T_se:.2f} uK   chi2/dof {fit.residual_sum / fit.dof:.2f}")
    lt = cfg.lifetime
    tau = an.tau_vs_k([vmap(cfg, cm, k, lifetime=True) for k in keys], cfg.geometry, band=lt.band, n_bins=lt.n_bins, p0=cfg.analysis.p0)
    for k, t, s in zip(tau.k, tau.tau, tau.tau_se):
        print(f"  |k| {k:6.1f} rad/mm  tau {t:7.2f} +- {s:.2f} us  tau*|k| {t * k:.0f}")
    print(f"  tau law: gamma {tau.gamma:.0f} +- {tau.gamma_se:.0f}, T {tau.temperature:.1f} uK, excluded bins {list(tau.excluded)}")


if __name__ == "__main__":
    main()
