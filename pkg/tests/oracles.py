"""Brute-force reference evaluators, written with plain Python loops over
numpy arrays so they share no code path with the library."""

import math

import numpy as np


def l1_pairs(student, teacher):
    """student, teacher: (N, B, C). Sum over C, mean over B, mean over N."""
    n_, b_, c_ = student.shape
    total = 0.0
    for n in range(n_):
        per_n = 0.0
        for b in range(b_):
            s = 0.0
            for c in range(c_):
                s += abs(float(student[n, b, c]) - float(teacher[n, b, c]))
            per_n += s
        total += per_n / b_
    return total / n_


def l1_ensemble(student, teacher):
    n_, b_, c_ = student.shape
    total = 0.0
    for b in range(b_):
        for c in range(c_):
            s = sum(float(student[n, b, c]) for n in range(n_)) / n_
            t = sum(float(teacher[n, b, c]) for n in range(n_)) / n_
            total += abs(s - t)
    return total / b_


def channel_stats(x):
    """x: (B, C, H, W) -> per-channel mean and biased std."""
    b_, c_, h_, w_ = x.shape
    means, stds = [], []
    for c in range(c_):
        vals = [float(x[b, c, i, j]) for b in range(b_) for i in range(h_) for j in range(w_)]
        m = sum(vals) / len(vals)
        v = sum((u - m) ** 2 for u in vals) / len(vals)
        means.append(m)
        stds.append(math.sqrt(v))
    return means, stds


def bn_constraint(teachers):
    """teachers[n] = list of (activation, running_mean, running_var) per layer."""
    per_teacher = []
    for layers in teachers:
        terms = []
        for act, rm, rv in layers:
            mu, sd = channel_stats(act)
            dm = math.sqrt(sum((a - float(b)) ** 2 for a, b in zip(mu, rm)))
            ds = math.sqrt(sum((a - math.sqrt(float(b))) ** 2 for a, b in zip(sd, rv)))
            terms.append(dm + ds)
        per_teacher.append(sum(terms) / len(terms))
    return sum(per_teacher) / len(per_teacher)


def attention_ce(q, keys, values, y, pseudo, theta):
    """keys: (N, B, D), values: (N, B, C); mixed CE of the aggregated prediction."""
    n_, b_, d_ = keys.shape
    c_ = values.shape[2]
    total = 0.0
    for b in range(b_):
        scores = [sum(float(keys[n, b, d]) * float(q[d]) for d in range(d_)) / math.sqrt(d_) for n in range(n_)]
        mx = max(scores)
        ex = [math.exp(s - mx) for s in scores]
        w = [e / sum(ex) for e in ex]
        pred = [sum(w[n] * float(values[n, b, c]) for n in range(n_)) for c in range(c_)]
        pm = max(pred)
        lse = pm + math.log(sum(math.exp(p - pm) for p in pred))
        th = float(theta[b])
        total += th * (lse - pred[int(y[b])]) + (1 - th) * (lse - pred[int(pseudo[b])])
    return total / b_


def attention_weights(q, keys):
    n_, b_, d_ = keys.shape
    out = np.zeros((b_, n_))
    for b in range(b_):
        scores = [sum(float(keys[n, b, d]) * float(q[d]) for d in range(d_)) / math.sqrt(d_) for n in range(n_)]
        mx = max(scores)
        ex = [math.exp(s - mx) for s in scores]
        for n in range(n_):
            out[b, n] = ex[n] / sum(ex)
    return out


def kd_kl(student_logits, teacher_logits, temperature):
    b_, c_ = student_logits.shape
    total = 0.0
    for b in range(b_):
        s = [float(v) / temperature for v in student_logits[b]]
        t = [float(v) / temperature for v in teacher_logits[b]]
        ls = math.log(sum(math.exp(v - max(s)) for v in s)) + max(s)
        lt = math.log(sum(math.exp(v - max(t)) for v in t)) + max(t)
        for c in range(c_):
            pt = math.exp(t[c] - lt)
            total += pt * ((t[c] - lt) - (s[c] - ls))
    return total / b_ * temperature**2


def central_difference(f, params, eps=1e-6):
    """Numerical gradient of scalar ``f()`` w.r.t. each tensor in ``params``
    (modified in place and restored)."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = float(f())
                flat[i] = old - eps
                down = float(f())
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def relative_error(auto, numeric):
    import torch

    a = torch.cat([g.reshape(-1) for g in auto])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).norm() / n.norm().clamp_min(1e-12))
