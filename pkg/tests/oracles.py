"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np


def _psi(pos, neg):
    d = pos[:, None] - neg[None, :]
    return (d > 0) + 0.5 * (d == 0)


def permutation_p(labels, a, b, n_perm, rng, chunk=2000):
    """Sign-flip permutation p-value for a paired AUC difference.

    Each permutation swaps the two models' scores on a random subset of samples.
    The statistic is the studentized AUC difference, with its variance rebuilt
    from the permuted structural components, so the reference distribution is
    the exact conditional one rather than a normal approximation.
    """
    y = np.asarray(labels).astype(bool)
    a, b = np.asarray(a, float), np.asarray(b, float)
    pos, neg = (a[y], b[y]), (a[~y], b[~y])
    m = {(i, j): _psi(pos[i], neg[j]) for i in (0, 1) for j in (0, 1)}
    n_pos, n_neg = int(y.sum()), int((~y).sum())

    def z_stat(swap_pos, swap_neg):
        v10, v01 = [], []
        for model in (0, 1):
            # selection weights: which source model feeds the permuted model per sample
            sel_p = (1 - swap_pos, swap_pos) if model == 0 else (swap_pos, 1 - swap_pos)
            sel_n = (1 - swap_neg, swap_neg) if model == 0 else (swap_neg, 1 - swap_neg)
            rows = cols = 0
            for i in (0, 1):
                for j in (0, 1):
                    rows = rows + np.einsum("kp,pn,kn->kp", sel_p[i], m[i, j], sel_n[j])
                    cols = cols + np.einsum("kp,pn,kn->kn", sel_p[i], m[i, j], sel_n[j])
            v10.append(rows / n_neg)
            v01.append(cols / n_pos)
        d10, d01 = v10[0] - v10[1], v01[0] - v01[1]
        var = d10.var(1, ddof=1) / n_pos + d01.var(1, ddof=1) / n_neg
        return d10.mean(1) / np.sqrt(np.maximum(var, 1e-300))

    z_obs = abs(z_stat(np.zeros((1, n_pos)), np.zeros((1, n_neg)))[0])
    count = done = 0
    while done < n_perm:
        k = min(chunk, n_perm - done)
        z = z_stat(rng.integers(0, 2, (k, n_pos)).astype(float),
                   rng.integers(0, 2, (k, n_neg)).astype(float))
        count += int((np.abs(z) >= z_obs - 1e-9).sum())
        done += k
    return count / n_perm


def paired_instance(rng, n=50):
    """Two correlated scorers sharing a latent severity, balanced labels."""
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)].astype(int)
    latent = rng.normal(size=n) + y
    a = latent + rng.normal(scale=0.8, size=n)
    b = latent + rng.normal(scale=0.8, size=n)
    return y, a, b


def pair_count_auc(labels, scores):
    """O(n^2) oracle: share of (pos, neg) pairs ranked correctly, ties count half."""
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


def exhaustive_cutoff(labels, scores):
    """Every midpoint and {0, 1}, evaluated one at a time."""
    u = sorted(set(float(s) for s in scores))
    cands = sorted({0.0, 1.0, *[(a + b) / 2 for a, b in zip(u, u[1:])]})
    best_t, best_acc = None, -1.0
    for t in cands:
        acc = np.mean((scores > t) == labels.astype(bool))
        if acc > best_acc:
            best_t, best_acc = t, acc
    return best_t, best_acc


def random_set(rng, n, ties=True):
    """Random labels (both classes present) and scores in [0, 1], optionally heavily tied."""
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.random(n)
    if ties:
        s = np.round(s * rng.integers(3, 30)) / 30
    return y, np.clip(s, 0, 1)


def reference_mny(l, r):
    """Modified New York rule written out case by case."""
    both_two = l >= 2 and r >= 2
    one_severe = l in (3, 4) or r in (3, 4)
    return both_two or one_severe


def checkerboard():
    """64x64 board of 8-px squares at levels 64 and 192 (the CLAHE golden input)."""
    yy, xx = np.mgrid[:64, :64]
    return np.where(((yy // 8) + (xx // 8)) % 2 == 0, 64, 192).astype(np.uint8)


def global_equalization(image, bins=256):
    """Independent oracle: share of pixels whose bin is <= the pixel's bin, scaled to full range."""
    top = np.iinfo(image.dtype).max
    b = image.astype(np.int64) * bins // (top + 1)
    sorted_b = np.sort(b.ravel())
    rank = np.searchsorted(sorted_b, b, side="right")
    return np.rint(rank / b.size * top).astype(image.dtype)


def simulate_followup_study(boost, seed, n=1000, progression_rate=0.1, score_shift=2.5):
    """Baseline-negative cohort with a planted near-miss effect, scored by a simulated model.

    Near-miss grade pairs progress ``boost`` more often and receive scores shifted
    up by ``score_shift`` on the logit scale, so they concentrate among confident
    false positives. Returns the progression analysis of that cohort.
    """
    from sacropipe import phantom, stats
    from sacropipe.manifest import Manifest, ManifestEntry

    rng = np.random.default_rng(seed)
    plan = phantom.corpus_plan(phantom.CorpusConfig(
        n=n, seed=seed, grade_distribution=phantom.prevalence_matched_distribution(0.5)))
    entries = [ManifestEntry(sid, f"{sid}.png", None, (s.grade_left, s.grade_right), 0)
               for sid, s in plan if not phantom.mny_positive(s.grade_left, s.grade_right)]
    m = Manifest(entries)
    fu = phantom.synth_followup(m, progression_rate, boost, seed)
    near = np.array([phantom.near_miss(e.grades) for e in entries])
    logits = -2.0 + score_shift * near + rng.normal(size=len(entries))
    probs = 1 / (1 + np.exp(-logits))
    return stats.progression_ratios(stats.make_predictions(m.sample_ids, probs, 0.5), fu)
