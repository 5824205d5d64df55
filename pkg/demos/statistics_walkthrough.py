"""Clinical statistics on reference counts and a simulated reader study.

Run: python demos/statistics_walkthrough.py
"""

import numpy as np

from sacropipe import labels, stats


def main():
    print("modified New York criterion (grade left, grade right -> positive)")
    for g in [(2, 2), (3, 0), (2, 1), (1, 1), (4, 2)]:
        print(f"  {g}: {labels.mny_positive(*g)}")

    print("\nprogression of confident false positives, reference counts")
    for name, group, prog in [("anatomy-aware", 30, 12), ("standard", 48, 11)]:
        r = stats.progression_counts(group, prog, 135, 25)
        lo, hi = r.rr_ci
        print(f"  {name:>13}: risk ratio {r.risk_ratio:.2f} (Katz 95% CI {lo:.2f}, {hi:.2f}); "
              f"cross-product odds ratio {r.odds_ratio:.2f}")

    # two correlated scorers on the same 200 cases; b sees the signal more clearly
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, 200)
    latent = rng.normal(size=200)
    a = 1.0 * y + latent + rng.normal(0, 1.0, 200)
    b = 1.6 * y + latent + rng.normal(0, 1.0, 200)
    pa, pb = 1 / (1 + np.exp(-a)), 1 / (1 + np.exp(-b))

    tau_a, tau_b = stats.optimal_cutoff(y, pa), stats.optimal_cutoff(y, pb)
    d = stats.delong_test(y, pa, pb)
    m = stats.mcnemar((pa >= tau_a).astype(int), (pb >= tau_b).astype(int), y)
    lo, hi, _ = stats.bootstrap_ci(stats.auc, y, pb, n_boot=1000, seed=0)
    print(f"\nAUC a {d.auc_a:.3f}, b {d.auc_b:.3f} (b bootstrap CI {lo:.3f}, {hi:.3f})")
    print(f"DeLong z {d.z:.2f}, p {d.p:.4f}")
    print(f"cut-offs a {tau_a:.3f}, b {tau_b:.3f}; McNemar {m.method} b={m.b} c={m.c} p {m.p:.4f}")


if __name__ == "__main__":
    main()
