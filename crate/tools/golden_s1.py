"""Reference values for the seed instance S1, evaluated in 50-digit arithmetic.

Every derivative here comes from mpmath's high-precision numerical
differentiation of the forward map, never from the closed forms used in the
Rust crate. The only closed-form matrix is the curvature kernel B (it is not
uniquely determined by the Hessian when n > d), which is cross-checked
against the differentiated Hessian before it is written.

Usage: python3 tools/golden_s1.py > crates/core/tests/golden/s1.json
"""

import json

import mpmath as mp

mp.mp.dps = 50

A1 = [[mp.mpf("0.1"), mp.mpf("0.2")], [mp.mpf("-0.3"), mp.mpf("0.4")], [mp.mpf("0.5"), mp.mpf("-0.6")]]
A2 = [[mp.mpf(1), mp.mpf(0), mp.mpf(1)], [mp.mpf(0), mp.mpf(1), mp.mpf(0)]]
B_TARGET = [mp.mpf("0.2"), mp.mpf("0.1")]
W = [mp.mpf(2)] * 3
X0 = [mp.mpf("0.3"), mp.mpf("-0.2")]
N, M, D = 3, 2, 2
BETA = mp.mpf("0.05")


def h(y):
    return mp.tanh(y)


def hp(y):
    return 1 - mp.tanh(y) ** 2


def hpp(y):
    t = mp.tanh(y)
    return -2 * t * (1 - t * t)


def forward(x):
    z = [sum(A1[r][k] * x[k] for k in range(D)) for r in range(N)]
    u = [mp.exp(v) for v in z]
    alpha = sum(u)
    f = [v / alpha for v in u]
    a2f = [sum(A2[k][r] * f[r] for r in range(N)) for k in range(M)]
    hv = [h(v) for v in a2f]
    c = [hv[k] - B_TARGET[k] for k in range(M)]
    loss_l = sum(v * v for v in c) / 2
    loss_reg = sum((W[r] * z[r]) ** 2 for r in range(N)) / 2
    return dict(z=z, u=u, alpha=alpha, f=f, a2f=a2f, hval=hv,
                hprime=[hp(v) for v in a2f], hdoubleprime=[hpp(v) for v in a2f],
                c=c, loss_L=loss_l, loss_reg=loss_reg, loss_tot=loss_l + loss_reg)


def partial(fun, x, orders):
    return mp.diff(lambda a, b: fun([a, b]), tuple(x), tuple(orders))


def grad_of(fun, x):
    return [partial(fun, x, [1 if k == i else 0 for k in range(D)]) for i in range(D)]


def hess_of(fun, x):
    out = [[None] * D for _ in range(D)]
    for i in range(D):
        for j in range(D):
            orders = [0] * D
            orders[i] += 1
            orders[j] += 1
            out[i][j] = partial(fun, x, orders)
    return out


def mat(rows):
    return mp.matrix(rows)


def to_float(v):
    if isinstance(v, list):
        return [to_float(e) for e in v]
    if isinstance(v, mp.matrix):
        return [[float(v[i, j]) for j in range(v.cols)] for i in range(v.rows)]
    return float(v)


def curvature_kernel(st):
    f = mat([[v] for v in st["f"]])
    F = mp.diag(st["f"])
    J = F - f * f.T
    Q2 = mat([[st["hprime"][k] * A2[k][r] for r in range(N)] for k in range(M)])
    A2m = mat(A2)
    K = Q2.T * Q2
    S = A2m.T * mp.diag([st["c"][k] * st["hdoubleprime"][k] for k in range(M)]) * A2m
    q = Q2.T * mat([[v] for v in st["c"]])
    qf = (q.T * f)[0, 0]
    T = (mp.diag([st["f"][r] * q[r, 0] for r in range(N)]) - qf * F - F * q * f.T - f * q.T * F
         + 2 * qf * f * f.T)
    return J * K * J + J * S * J + T, Q2, q


def main():
    st = forward(X0)
    loss_l = lambda x: forward(x)["loss_L"]
    loss_tot = lambda x: forward(x)["loss_tot"]

    p = [[partial(lambda x, r=r: forward(x)["f"][r], X0, [1 if k == i else 0 for k in range(D)])
          for i in range(D)] for r in range(N)]
    hess_f_12 = [partial(lambda x, r=r: forward(x)["f"][r], X0, [1, 1]) for r in range(N)]

    grad_tot = grad_of(loss_tot, X0)
    h_l = hess_of(loss_l, X0)
    a1 = mat(A1)
    reg = a1.T * mp.diag([v * v for v in W]) * a1
    h_tot = [[h_l[i][j] + reg[i, j] for j in range(D)] for i in range(D)]

    b_mat, q2_mat, q2 = curvature_kernel(st)
    factored = a1.T * b_mat * a1
    gap = max(abs(factored[i, j] - h_l[i][j]) for i in range(D) for j in range(D))
    assert gap < mp.mpf("1e-25"), gap
    b_eigs = sorted(mp.eigsy(b_mat, eigvals_only=True))

    dw = [v * v for v in W]
    gram = a1.T * mp.diag(dw) * a1
    gram_inv = gram ** -1
    lev = []
    for r in range(N):
        row = mat([[A1[r][k]] for k in range(D)])
        lev.append(dw[r] * (row.T * gram_inv * row)[0, 0])

    # analytic constants at R = max(|A1|, |A2|, |b|), beta = 0.05, tanh caps
    svd_norm = lambda rows: max(mp.svd_r(mat(rows), compute_uv=False))
    r_val = max(svd_norm(A1), svd_norm(A2), mp.sqrt(sum(v * v for v in B_TARGET)))
    r_h = mp.sqrt(M)
    l_h = mp.mpf(1)
    r_f = 2 * BETA ** -2 * N * r_val * mp.exp(2 * r_val ** 2)
    big_m = (59 * (r_val + r_h) * N ** 2 * mp.exp(4 * r_val ** 2) * BETA ** -4 * r_val ** 5
             * r_h ** 2 * r_f * l_h)
    psd = 12 * r_h * l_h * r_val * (r_val + r_h)

    # reference optimum of L_tot by Newton in 50 digits
    x = list(X0)
    for _ in range(12):
        g = mat([[v] for v in grad_of(loss_tot, x)])
        hm = mat(hess_of(loss_tot, x))
        step = mp.lu_solve(hm, g)
        x = [x[k] - step[k] for k in range(D)]
    g_star = grad_of(loss_tot, x)
    assert max(abs(v) for v in g_star) < mp.mpf("1e-30")
    h_star = mat(hess_of(loss_tot, x))
    lmin_star = min(mp.eigsy(h_star, eigvals_only=True))

    sig = lambda y: 1 / (1 + mp.exp(-y))
    s = sig(mp.mpf("0.5"))

    out = {
        "x": to_float(X0),
        "forward": {k: to_float(v) for k, v in st.items()},
        "log_alpha": float(mp.log(st["alpha"])),
        "sigmoid_at_half": [float(s), float(s * (1 - s)), float(s * (1 - s) * (1 - 2 * s))],
        "P": to_float(p),
        "Q2": to_float(q2_mat),
        "q2": [float(q2[r, 0]) for r in range(N)],
        "grad_tot": to_float(grad_tot),
        "hess_f_pair_1_2": to_float(hess_f_12),
        "H_L": to_float(h_l),
        "H_tot": to_float(h_tot),
        "B": to_float(b_mat),
        "B_spectrum": to_float(b_eigs),
        "leverage_w2": to_float(lev),
        "constants": {
            "R": float(r_val),
            "R_h": float(r_h),
            "beta": float(BETA),
            "ln_R_f": float(mp.log(r_f)),
            "ln_M": float(mp.log(big_m)),
            "psd_bound": float(psd),
        },
        "x_star": to_float(x),
        "lambda_min_H_tot_star": float(lmin_star),
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
