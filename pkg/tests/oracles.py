"""Independent reference implementations used as test oracles.

Everything here is plain float64 numpy with explicit loops and shares no
code with the package beyond reading parameter arrays.
"""
import numpy as np

from gelvqa.kg import Triple


def naive_correlation(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = len(a)
    return np.array([sum(a[i] * b[(i + k) % d] for i in range(d)) for k in range(d)])


def score_oracle(m, t):
    """Plausibility of one triple, straight from the formulas."""
    h, r, tt = (int(x) for x in t)
    ent = m.params["kge.entity"].data.astype(np.float64)
    rel = m.params["kge.relation"].data.astype(np.float64)
    eh, er, et = ent[h], rel[r], ent[tt]
    if m.scorer == "TransE":
        diff = eh + er - et
        return -(np.abs(diff).sum() if m.norm == 1 else np.sqrt((diff ** 2).sum()))
    if m.scorer == "TorusE":
        delta = np.mod(eh + er - et, 1.0)
        return -np.minimum(delta, 1.0 - delta).sum()
    if m.scorer == "DistMult":
        return float((eh * er * et).sum())
    if m.scorer == "HolE":
        return float(er @ naive_correlation(eh, et))
    filt = m.params["kge.filters"].data.astype(np.float64)
    proj = m.params["kge.proj"].data.astype(np.float64).reshape(-1)
    bias = float(m.params["kge.bias"].data.reshape(-1)[0])
    d = len(eh)
    feats = []
    for i in range(d):
        row = np.array([eh[i], er[i], et[i]])
        feats.append([max(0.0, float(row @ f)) for f in filt])
    f = float(np.asarray(feats).reshape(-1) @ proj) + bias
    return -f


def brute_force_rank(m, t, slot, kg, filtered):
    """Sort every candidate by (-score, id) and report the gold position."""
    t = Triple(*t)
    gold = t.head if slot == "head" else t.tail
    rows = []
    for e in range(m.n_entities):
        cand = Triple(e, t.relation, t.tail) if slot == "head" else Triple(t.head, t.relation, e)
        if filtered and e != gold and cand in kg:
            continue
        rows.append((-m.score(cand), e))
    rows.sort()
    return [e for _, e in rows].index(gold) + 1


def mlp_forward_oracle(x, w1, b1, w2, b2):
    h = np.maximum(0.0, x @ w1 + b1)
    return h @ w2 + b2


def softmax_oracle(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def kink_aware_grad_check(f, params, eps, probe, max_per_param=None, seed=0):
    """Central differences that skip steps crossing a non-differentiable point.

    ``probe()`` returns a hashable summary of every discrete decision taken
    during the last ``f()`` call (ReLU sign patterns, argmax picks). A
    component whose +eps or -eps evaluation changes that summary straddles a
    kink, where the two-sided difference measures no derivative at all.
    Returns ``(worst_error, n_checked, n_skipped)``.
    """
    from gelvqa import autodiff as ad

    saved = params.state_dict()
    params.astype(np.float64)
    gen = np.random.default_rng(seed)
    try:
        analytic = ad.backward(f(), params)
        base = probe()
        worst, checked, skipped = 0.0, 0, 0
        for name in params.names():
            flat = params[name].data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = gen.choice(flat.size, max_per_param, replace=False)
            ga = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                sig_up = probe()
                flat[i] = orig - eps
                down = float(f().data)
                sig_down = probe()
                flat[i] = orig
                if sig_up != base or sig_down != base:
                    skipped += 1
                    continue
                fd = (up - down) / (2 * eps)
                worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(fd)))
                checked += 1
        return worst, checked, skipped
    finally:
        for name, arr in saved.items():
            params[name].data = arr
