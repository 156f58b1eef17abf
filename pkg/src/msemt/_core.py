"""Compiled power-series recursion for the coupled device/network system.

Given the state x0 at time t0, `series_table` builds the Taylor coefficient
table X[k], k = 0..L, of the exact solution about t0, exploiting the
recursion (k+1) X[k+1] = F_k(X[0..k]) where F_k is assembled per block:

  * network rows are linear: Psi[k+1] = (A_eq Psi[k] + B_eq Lam[k]) / (k+1);
  * machine rows compose product, reciprocal and coupled sine/cosine
    coefficient rules through the rotor-angle-dependent subtransient
    inductance; its inverse is carried as its own coefficient series via
    the product identity L'' L''^-1 = I;
  * inverter rows do the same through the PLL angle.

The first-order column X[1] is by construction the plain right-hand side
f(x0, t0), which is what the RK4 benchmark integrates: both solvers share
one implementation of the physics.

Everything below is numba-compiled; keep the code loop-oriented and free
of Python objects.
"""

import numpy as np
from numba import njit

# generator slow-state order
(G_DELTA, G_DOMEGA, G_LFD, G_L1D, G_L1Q, G_L2Q, G_GV, G_GR, G_XLL, G_EFD,
 G_VM2) = range(11)
# inverter slow-state order
(I_CHI, I_PHI, I_XIP, I_XIQ, I_ZD, I_ZQ, I_PF, I_QF, I_VF,
 I_WF, I_FFD, I_FFQ) = range(12)

# generator parameter columns
(GP_CSCALE, GP_H, GP_D, GP_RS, GP_RFD, GP_XLFD, GP_R1D, GP_XL1D, GP_R1Q,
 GP_XL1Q, GP_R2Q, GP_XL2Q, GP_XAD2, GP_XAQ2, GP_XD2, GP_XQ2, GP_XLS,
 GP_EFDSC, GP_RDROOP, GP_T1, GP_T2, GP_T3, GP_VMIN, GP_VMAX, GP_DT,
 GP_EK, GP_ETA, GP_ETB, GP_ETE, GP_EMIN, GP_EMAX, GP_PREF, GP_VREF,
 GP_ACTIVE, GP_ETR) = range(35)
NGP = 35

VMAG_FLOOR = 1.0e-4  # pu^2 floor under the transducer sqrt

# inverter parameter columns
(IP_CSCALE, IP_KPPLL, IP_KIPLL, IP_WS, IP_KPC, IP_KIC, IP_KPP, IP_KIP,
 IP_KF, IP_KV, IP_RF, IP_XF, IP_PREF, IP_QREF, IP_VREF, IP_ACTIVE,
 IP_TM, IP_TFF) = range(18)
NIP = 18

TWO_THIRDS_PI = 2.0943951023931953


@njit(cache=True)
def _inv3(m):
    a, b, c = m[0, 0], m[0, 1], m[0, 2]
    d, e, f = m[1, 0], m[1, 1], m[1, 2]
    g, h, i = m[2, 0], m[2, 1], m[2, 2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    out = np.empty((3, 3))
    out[0, 0] = (e * i - f * h) / det
    out[0, 1] = (c * h - b * i) / det
    out[0, 2] = (b * f - c * e) / det
    out[1, 0] = (f * g - d * i) / det
    out[1, 1] = (a * i - c * g) / det
    out[1, 2] = (c * d - a * f) / det
    out[2, 0] = (d * h - e * g) / det
    out[2, 1] = (b * g - a * h) / det
    out[2, 2] = (a * e - b * d) / det
    return out


@njit(cache=True, inline="always")
def _ext_trig(th, cs, sn, m):
    """Extend the coupled cos/sin coefficient pair of the angle series to order m."""
    for p in range(3):
        acc_s = 0.0
        acc_c = 0.0
        for j in range(1, m + 1):
            acc_s += j * th[j] * cs[p, m - j]
            acc_c += j * th[j] * sn[p, m - j]
        sn[p, m] = acc_s / m
        cs[p, m] = -acc_c / m


@njit(cache=True, inline="always")
def _ext_park(cs, sn, pser, piser, m):
    """Fill order-m entries of the Park matrix series and its inverse series."""
    z = 1.0 / 3.0 if m == 0 else 0.0
    for b in range(3):
        pser[m, 0, b] = z
        pser[m, 1, b] = (2.0 / 3.0) * cs[b, m]
        pser[m, 2, b] = -(2.0 / 3.0) * sn[b, m]
    one = 1.0 if m == 0 else 0.0
    for a in range(3):
        piser[m, a, 0] = one
        piser[m, a, 1] = cs[a, m]
        piser[m, a, 2] = -sn[a, m]


@njit(cache=True)
def series_table(x0, t0, L, omega0,
                 a_eq, beq_diag,
                 gp, gen_bus, gen_off, gen_ioff,
                 ip, ibr_bus, ibr_off, ibr_ioff,
                 inj,
                 slow_dim, v_off, i_off):
    """Coefficient table X (L+1, n) and the order-L network residual vector.

    The residual q = A_eq Psi[L] + B_eq Lam[L] drives the closed-form defect
    law: substituting the truncated series back into the network equation
    leaves exactly ||q||_inf * h^L.
    """
    n = x0.shape[0]
    L1 = L + 1
    X = np.zeros((L1, n))
    X[0, :] = x0

    ng = gp.shape[0]
    ni = ip.shape[0]
    dim_psi = i_off - v_off
    n_inj = inj.shape[0]

    lam = np.zeros((L1, dim_psi))

    # all device scratch series carved from one buffer (allocation cost matters:
    # the RK4 benchmark drives this function millions of times at L = 1)
    ws = np.empty(ng * 61 * L1 + ni * 38 * L1)
    o = 0
    g_th = ws[o:o + ng * L1].reshape(ng, L1); o += ng * L1
    g_cs = ws[o:o + ng * 3 * L1].reshape(ng, 3, L1); o += ng * 3 * L1
    g_sn = ws[o:o + ng * 3 * L1].reshape(ng, 3, L1); o += ng * 3 * L1
    g_P = ws[o:o + ng * 9 * L1].reshape(ng, L1, 3, 3); o += ng * 9 * L1
    g_Pi = ws[o:o + ng * 9 * L1].reshape(ng, L1, 3, 3); o += ng * 9 * L1
    g_LL = ws[o:o + ng * 9 * L1].reshape(ng, L1, 3, 3); o += ng * 9 * L1
    g_M = ws[o:o + ng * 9 * L1].reshape(ng, L1, 3, 3); o += ng * 9 * L1
    g_im = ws[o:o + ng * 3 * L1].reshape(ng, L1, 3); o += ng * 3 * L1   # machine pu
    g_idq = ws[o:o + ng * 3 * L1].reshape(ng, L1, 3); o += ng * 3 * L1
    g_vdq = ws[o:o + ng * 3 * L1].reshape(ng, L1, 3); o += ng * 3 * L1
    g_lppd = ws[o:o + ng * L1].reshape(ng, L1); o += ng * L1
    g_lppq = ws[o:o + ng * L1].reshape(ng, L1); o += ng * L1
    g_vpp = ws[o:o + ng * 3 * L1].reshape(ng, L1, 3); o += ng * 3 * L1  # [0, v''_d, v''_q]
    g_g = ws[o:o + ng * 3 * L1].reshape(ng, L1, 3); o += ng * 3 * L1    # stator bracket
    g_vt = ws[o:o + ng * L1].reshape(ng, L1); o += ng * L1
    g_frz_gv = np.zeros(ng, np.bool_)
    g_frz_ef = np.zeros(ng, np.bool_)

    b_th = ws[o:o + ni * L1].reshape(ni, L1); o += ni * L1
    b_cs = ws[o:o + ni * 3 * L1].reshape(ni, 3, L1); o += ni * 3 * L1
    b_sn = ws[o:o + ni * 3 * L1].reshape(ni, 3, L1); o += ni * 3 * L1
    b_P = ws[o:o + ni * 9 * L1].reshape(ni, L1, 3, 3); o += ni * 9 * L1
    b_Pi = ws[o:o + ni * 9 * L1].reshape(ni, L1, 3, 3); o += ni * 9 * L1
    b_im = ws[o:o + ni * 3 * L1].reshape(ni, L1, 3); o += ni * 3 * L1
    b_it = ws[o:o + ni * 3 * L1].reshape(ni, L1, 3); o += ni * 3 * L1   # PLL frame
    b_vt = ws[o:o + ni * 3 * L1].reshape(ni, L1, 3); o += ni * 3 * L1
    b_om = ws[o:o + ni * L1].reshape(ni, L1); o += ni * L1              # omega_pll
    b_e = ws[o:o + ni * 3 * L1].reshape(ni, L1, 3); o += ni * 3 * L1    # [0, e_d, e_q]

    # order-0 trigonometric seeds
    for gidx in range(ng):
        if gp[gidx, GP_ACTIVE] == 0.0:
            continue
        off = gen_off[gidx]
        g_th[gidx, 0] = omega0 * t0 + x0[off + G_DELTA]
        for p in range(3):
            ang = g_th[gidx, 0] + (0.0 if p == 0 else (-TWO_THIRDS_PI if p == 1 else TWO_THIRDS_PI))
            g_cs[gidx, p, 0] = np.cos(ang)
            g_sn[gidx, p, 0] = np.sin(ang)
        _ext_park(g_cs[gidx], g_sn[gidx], g_P[gidx], g_Pi[gidx], 0)
        l0 = gp[gidx, GP_XLS] / omega0
        ld = gp[gidx, GP_XD2] / omega0
        lq = gp[gidx, GP_XQ2] / omega0
        for a in range(3):
            for b in range(3):
                g_LL[gidx, 0, a, b] = (g_Pi[gidx, 0, a, 0] * l0 * g_P[gidx, 0, 0, b]
                                       + g_Pi[gidx, 0, a, 1] * ld * g_P[gidx, 0, 1, b]
                                       + g_Pi[gidx, 0, a, 2] * lq * g_P[gidx, 0, 2, b])
        g_M[gidx, 0] = _inv3(g_LL[gidx, 0])
        g_lppd[gidx, 0] = gp[gidx, GP_XAD2] * (x0[off + G_LFD] / gp[gidx, GP_XLFD]
                                               + x0[off + G_L1D] / gp[gidx, GP_XL1D])
        g_lppq[gidx, 0] = gp[gidx, GP_XAQ2] * (x0[off + G_L1Q] / gp[gidx, GP_XL1Q]
                                               + x0[off + G_L2Q] / gp[gidx, GP_XL2Q])

    for bidx in range(ni):
        if ip[bidx, IP_ACTIVE] == 0.0:
            continue
        off = ibr_off[bidx]
        b_th[bidx, 0] = omega0 * t0 + x0[off + I_CHI]
        for p in range(3):
            ang = b_th[bidx, 0] + (0.0 if p == 0 else (-TWO_THIRDS_PI if p == 1 else TWO_THIRDS_PI))
            b_cs[bidx, p, 0] = np.cos(ang)
            b_sn[bidx, p, 0] = np.sin(ang)
        _ext_park(b_cs[bidx], b_sn[bidx], b_P[bidx], b_Pi[bidx], 0)

    tmp = np.empty((3, 3))
    for k in range(L):
        # ---- synchronous machines
        for gidx in range(ng):
            if gp[gidx, GP_ACTIVE] == 0.0:
                continue
            off = gen_off[gidx]
            io = gen_ioff[gidx]
            vb = v_off + 3 * gen_bus[gidx]
            c = gp[gidx, GP_CSCALE]

            # rotor angle to order k+1, then trig and inductance series
            X[k + 1, off + G_DELTA] = X[k, off + G_DOMEGA] / (k + 1)
            g_th[gidx, k + 1] = X[k + 1, off + G_DELTA] + (omega0 if k == 0 else 0.0)
            _ext_trig(g_th[gidx], g_cs[gidx], g_sn[gidx], k + 1)
            _ext_park(g_cs[gidx], g_sn[gidx], g_P[gidx], g_Pi[gidx], k + 1)
            l0 = gp[gidx, GP_XLS] / omega0
            ld = gp[gidx, GP_XD2] / omega0
            lq = gp[gidx, GP_XQ2] / omega0
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for j in range(k + 2):
                        s += (g_Pi[gidx, j, a, 0] * l0 * g_P[gidx, k + 1 - j, 0, b]
                              + g_Pi[gidx, j, a, 1] * ld * g_P[gidx, k + 1 - j, 1, b]
                              + g_Pi[gidx, j, a, 2] * lq * g_P[gidx, k + 1 - j, 2, b])
                    g_LL[gidx, k + 1, a, b] = s
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for j in range(1, k + 2):
                        for m in range(3):
                            s += g_LL[gidx, j, a, m] * g_M[gidx, k + 1 - j, m, b]
                    g_M[gidx, k + 1, a, b] = s
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for m in range(3):
                        s += g_M[gidx, 0, a, m] * g_M[gidx, k + 1, m, b]
                    tmp[a, b] = -s
            g_M[gidx, k + 1] = tmp

            # machine-pu current and bus voltage, rotated to the rotor frame
            for p in range(3):
                g_im[gidx, k, p] = X[k, io + p] / c
            for a in range(3):
                sd = 0.0
                sv = 0.0
                for j in range(k + 1):
                    for b in range(3):
                        sd += g_P[gidx, j, a, b] * g_im[gidx, k - j, b]
                        sv += g_P[gidx, j, a, b] * X[k - j, vb + b]
                g_idq[gidx, k, a] = sd
                g_vdq[gidx, k, a] = sv

            one = 1.0 if k == 0 else 0.0
            lam_ad = gp[gidx, GP_XAD2] * (-g_idq[gidx, k, 1]
                                          + X[k, off + G_LFD] / gp[gidx, GP_XLFD]
                                          + X[k, off + G_L1D] / gp[gidx, GP_XL1D])
            lam_aq = gp[gidx, GP_XAQ2] * (-g_idq[gidx, k, 2]
                                          + X[k, off + G_L1Q] / gp[gidx, GP_XL1Q]
                                          + X[k, off + G_L2Q] / gp[gidx, GP_XL2Q])

            f_fd = omega0 * (gp[gidx, GP_EFDSC] * X[k, off + G_EFD]
                             - (gp[gidx, GP_RFD] / gp[gidx, GP_XLFD])
                             * (X[k, off + G_LFD] - lam_ad))
            f_1d = -omega0 * (gp[gidx, GP_R1D] / gp[gidx, GP_XL1D]) * (X[k, off + G_L1D] - lam_ad)
            f_1q = -omega0 * (gp[gidx, GP_R1Q] / gp[gidx, GP_XL1Q]) * (X[k, off + G_L1Q] - lam_aq)
            f_2q = -omega0 * (gp[gidx, GP_R2Q] / gp[gidx, GP_XL2Q]) * (X[k, off + G_L2Q] - lam_aq)
            X[k + 1, off + G_LFD] = f_fd / (k + 1)
            X[k + 1, off + G_L1D] = f_1d / (k + 1)
            X[k + 1, off + G_L1Q] = f_1q / (k + 1)
            X[k + 1, off + G_L2Q] = f_2q / (k + 1)

            g_lppd[gidx, k + 1] = gp[gidx, GP_XAD2] * (X[k + 1, off + G_LFD] / gp[gidx, GP_XLFD]
                                                       + X[k + 1, off + G_L1D] / gp[gidx, GP_XL1D])
            g_lppq[gidx, k + 1] = gp[gidx, GP_XAQ2] * (X[k + 1, off + G_L1Q] / gp[gidx, GP_XL1Q]
                                                       + X[k + 1, off + G_L2Q] / gp[gidx, GP_XL2Q])

            # electrical power: lam_d i_q - lam_q i_d with lam_d = -x'' i_d + lam''
            pe = 0.0
            for j in range(k + 1):
                ld_j = -gp[gidx, GP_XD2] * g_idq[gidx, j, 1] + g_lppd[gidx, j]
                lq_j = -gp[gidx, GP_XQ2] * g_idq[gidx, j, 2] + g_lppq[gidx, j]
                pe += ld_j * g_idq[gidx, k - j, 2] - lq_j * g_idq[gidx, k - j, 1]

            # voltage transducer: filter the squared magnitude (analytic),
            # then develop |v| as the square root of that smooth state
            vt2 = 0.0
            for j in range(k + 1):
                vt2 += (g_vdq[gidx, j, 1] * g_vdq[gidx, k - j, 1]
                        + g_vdq[gidx, j, 2] * g_vdq[gidx, k - j, 2])
            X[k + 1, off + G_VM2] = ((vt2 - X[k, off + G_VM2])
                                     / gp[gidx, GP_ETR]) / (k + 1)
            if k == 0:
                g_vt[gidx, 0] = np.sqrt(max(X[0, off + G_VM2], VMAG_FLOOR))
            else:
                if X[0, off + G_VM2] > VMAG_FLOOR:
                    acc = 0.0
                    for j in range(1, k):
                        acc += g_vt[gidx, j] * g_vt[gidx, k - j]
                    g_vt[gidx, k] = (X[k, off + G_VM2] - acc) / (2.0 * g_vt[gidx, 0])
                else:
                    g_vt[gidx, k] = 0.0

            # SEXS
            verr = gp[gidx, GP_VREF] * one - g_vt[gidx, k]
            f_xll = (verr - X[k, off + G_XLL]) / gp[gidx, GP_ETB]
            y_ll = X[k, off + G_XLL] + (gp[gidx, GP_ETA] / gp[gidx, GP_ETB]) * (verr - X[k, off + G_XLL])
            f_efd = (gp[gidx, GP_EK] * y_ll - X[k, off + G_EFD]) / gp[gidx, GP_ETE]
            if k == 0:
                e0 = x0[off + G_EFD]
                g_frz_ef[gidx] = ((e0 >= gp[gidx, GP_EMAX] and f_efd > 0.0)
                                  or (e0 <= gp[gidx, GP_EMIN] and f_efd < 0.0))
            if g_frz_ef[gidx]:
                f_efd = 0.0
            X[k + 1, off + G_XLL] = f_xll / (k + 1)
            X[k + 1, off + G_EFD] = f_efd / (k + 1)

            # TGOV1
            dw = X[k, off + G_DOMEGA] / omega0
            gin = gp[gidx, GP_PREF] * one - dw / gp[gidx, GP_RDROOP]
            f_gv = (gin - X[k, off + G_GV]) / gp[gidx, GP_T1]
            if k == 0:
                v0 = x0[off + G_GV]
                g_frz_gv[gidx] = ((v0 >= gp[gidx, GP_VMAX] and f_gv > 0.0)
                                  or (v0 <= gp[gidx, GP_VMIN] and f_gv < 0.0))
            if g_frz_gv[gidx]:
                f_gv = 0.0
            f_gr = (X[k, off + G_GV] - X[k, off + G_GR]) / gp[gidx, GP_T3]
            pm = (X[k, off + G_GR]
                  + (gp[gidx, GP_T2] / gp[gidx, GP_T3]) * (X[k, off + G_GV] - X[k, off + G_GR])
                  - gp[gidx, GP_DT] * dw)
            X[k + 1, off + G_GV] = f_gv / (k + 1)
            X[k + 1, off + G_GR] = f_gr / (k + 1)

            # swing
            f_dom = (omega0 / (2.0 * gp[gidx, GP_H])) * (pm - pe - gp[gidx, GP_D] * dw)
            X[k + 1, off + G_DOMEGA] = f_dom / (k + 1)

            # subtransient voltage [0, v''_d, v''_q] at order k
            conv_q = 0.0
            conv_d = 0.0
            for j in range(k + 1):
                wr = X[j, off + G_DOMEGA] + (omega0 if j == 0 else 0.0)
                conv_q += wr * g_lppq[gidx, k - j]
                conv_d += wr * g_lppd[gidx, k - j]
            g_vpp[gidx, k, 0] = 0.0
            g_vpp[gidx, k, 1] = ((k + 1) * g_lppd[gidx, k + 1] - conv_q) / omega0
            g_vpp[gidx, k, 2] = ((k + 1) * g_lppq[gidx, k + 1] + conv_d) / omega0

            # stator bracket: v - P^-1 v'' + Rs i + (dL''/dt) i
            for a in range(3):
                s = X[k, vb + a] + gp[gidx, GP_RS] * g_im[gidx, k, a]
                for j in range(k + 1):
                    for b in range(3):
                        s -= g_Pi[gidx, j, a, b] * g_vpp[gidx, k - j, b]
                        s += (j + 1) * g_LL[gidx, j + 1, a, b] * g_im[gidx, k - j, b]
                g_g[gidx, k, a] = s
            for a in range(3):
                s = 0.0
                for j in range(k + 1):
                    for b in range(3):
                        s += g_M[gidx, j, a, b] * g_g[gidx, k - j, b]
                X[k + 1, io + a] = -c * s / (k + 1)

        # ---- grid-following inverters
        for bidx in range(ni):
            if ip[bidx, IP_ACTIVE] == 0.0:
                continue
            off = ibr_off[bidx]
            io = ibr_ioff[bidx]
            vb = v_off + 3 * ibr_bus[bidx]
            c = ip[bidx, IP_CSCALE]
            one = 1.0 if k == 0 else 0.0

            for p in range(3):
                b_im[bidx, k, p] = X[k, io + p] / c
            for a in range(3):
                sv = 0.0
                si = 0.0
                for j in range(k + 1):
                    for b in range(3):
                        sv += b_P[bidx, j, a, b] * X[k - j, vb + b]
                        si += b_P[bidx, j, a, b] * b_im[bidx, k - j, b]
                b_vt[bidx, k, a] = sv
                b_it[bidx, k, a] = si

            b_om[bidx, k] = (ip[bidx, IP_WS] * one
                             + ip[bidx, IP_KPPLL] * b_vt[bidx, k, 2]
                             + ip[bidx, IP_KIPLL] * X[k, off + I_PHI])
            X[k + 1, off + I_CHI] = (b_om[bidx, k] - omega0 * one) / (k + 1)
            X[k + 1, off + I_PHI] = b_vt[bidx, k, 2] / (k + 1)
            b_th[bidx, k + 1] = X[k + 1, off + I_CHI] + (omega0 if k == 0 else 0.0)
            _ext_trig(b_th[bidx], b_cs[bidx], b_sn[bidx], k + 1)
            _ext_park(b_cs[bidx], b_sn[bidx], b_P[bidx], b_Pi[bidx], k + 1)

            p_inst = 0.0
            q_inst = 0.0
            for j in range(k + 1):
                p_inst += (b_vt[bidx, j, 1] * b_it[bidx, k - j, 1]
                           + b_vt[bidx, j, 2] * b_it[bidx, k - j, 2])
                q_inst += (b_vt[bidx, j, 2] * b_it[bidx, k - j, 1]
                           - b_vt[bidx, j, 1] * b_it[bidx, k - j, 2])
            tm = ip[bidx, IP_TM]
            X[k + 1, off + I_PF] = ((p_inst - X[k, off + I_PF]) / tm) / (k + 1)
            X[k + 1, off + I_QF] = ((q_inst - X[k, off + I_QF]) / tm) / (k + 1)
            X[k + 1, off + I_VF] = ((b_vt[bidx, k, 1] - X[k, off + I_VF]) / tm) / (k + 1)
            X[k + 1, off + I_WF] = ((b_om[bidx, k] - X[k, off + I_WF]) / tm) / (k + 1)
            tff = ip[bidx, IP_TFF]
            X[k + 1, off + I_FFD] = ((b_vt[bidx, k, 1] - X[k, off + I_FFD]) / tff) / (k + 1)
            X[k + 1, off + I_FFQ] = ((b_vt[bidx, k, 2] - X[k, off + I_FFQ]) / tff) / (k + 1)
            p_meas = X[k, off + I_PF]
            q_meas = X[k, off + I_QF]

            p_cmd = (ip[bidx, IP_PREF] * one
                     + ip[bidx, IP_KF] * (omega0 * one - X[k, off + I_WF]) / omega0)
            q_cmd = (ip[bidx, IP_QREF] * one
                     + ip[bidx, IP_KV] * (ip[bidx, IP_VREF] * one - X[k, off + I_VF]))

            X[k + 1, off + I_XIP] = (p_cmd - p_meas) / (k + 1)
            X[k + 1, off + I_XIQ] = (q_meas - q_cmd) / (k + 1)
            id_ref = ip[bidx, IP_KPP] * (p_cmd - p_meas) + ip[bidx, IP_KIP] * X[k, off + I_XIP]
            iq_ref = ip[bidx, IP_KPP] * (q_meas - q_cmd) + ip[bidx, IP_KIP] * X[k, off + I_XIQ]

            X[k + 1, off + I_ZD] = (id_ref - b_it[bidx, k, 1]) / (k + 1)
            X[k + 1, off + I_ZQ] = (iq_ref - b_it[bidx, k, 2]) / (k + 1)
            lf = ip[bidx, IP_XF] / omega0
            cross_d = 0.0
            cross_q = 0.0
            for j in range(k + 1):
                cross_d += b_om[bidx, j] * b_it[bidx, k - j, 2]
                cross_q += b_om[bidx, j] * b_it[bidx, k - j, 1]
            b_e[bidx, k, 0] = 0.0
            b_e[bidx, k, 1] = (b_vt[bidx, k, 1]
                               + ip[bidx, IP_KPC] * (id_ref - b_it[bidx, k, 1])
                               + ip[bidx, IP_KIC] * X[k, off + I_ZD]
                               - lf * cross_d)
            b_e[bidx, k, 2] = (b_vt[bidx, k, 2]
                               + ip[bidx, IP_KPC] * (iq_ref - b_it[bidx, k, 2])
                               + ip[bidx, IP_KIC] * X[k, off + I_ZQ]
                               + lf * cross_q)

            for a in range(3):
                e_abc = 0.0
                for j in range(k + 1):
                    for b in range(3):
                        e_abc += b_Pi[bidx, j, a, b] * b_e[bidx, k - j, b]
                f_i = (e_abc - X[k, vb + a] - ip[bidx, IP_RF] * b_im[bidx, k, a]) / lf
                X[k + 1, io + a] = c * f_i / (k + 1)

        # ---- network block
        for gidx in range(ng):
            io = gen_ioff[gidx]
            node = 3 * gen_bus[gidx]
            for p in range(3):
                lam[k, node + p] += X[k, io + p]
        for bidx in range(ni):
            io = ibr_ioff[bidx]
            node = 3 * ibr_bus[bidx]
            for p in range(3):
                lam[k, node + p] += X[k, io + p]
        for q in range(n_inj):
            row = int(inj[q, 0])
            amp = inj[q, 1]
            om = inj[q, 2]
            ph = inj[q, 3] + om * t0
            fact = 1.0
            for j in range(1, k + 1):
                fact *= om / j
            lam[k, row] += amp * fact * np.sin(ph + k * np.pi / 2.0)

        for row in range(dim_psi):
            s = 0.0
            for colm in range(dim_psi):
                s += a_eq[row, colm] * X[k, v_off + colm]
            X[k + 1, v_off + row] = (s + beq_diag[row] * lam[k, row]) / (k + 1)

    # order-L injection row for the defect residual
    for gidx in range(ng):
        io = gen_ioff[gidx]
        node = 3 * gen_bus[gidx]
        for p in range(3):
            lam[L, node + p] += X[L, io + p]
    for bidx in range(ni):
        io = ibr_ioff[bidx]
        node = 3 * ibr_bus[bidx]
        for p in range(3):
            lam[L, node + p] += X[L, io + p]
    for q in range(n_inj):
        row = int(inj[q, 0])
        amp = inj[q, 1]
        om = inj[q, 2]
        ph = inj[q, 3] + om * t0
        fact = 1.0
        for j in range(1, L + 1):
            fact *= om / j
        lam[L, row] += amp * fact * np.sin(ph + L * np.pi / 2.0)

    qvec = np.empty(dim_psi)
    for row in range(dim_psi):
        s = 0.0
        for colm in range(dim_psi):
            s += a_eq[row, colm] * X[L, v_off + colm]
        qvec[row] = s + beq_diag[row] * lam[L, row]

    return X, qvec


@njit(cache=True)
def eval_series(X, h):
    """Horner evaluation of the coefficient table at offset h from its base."""
    L1, n = X.shape
    out = X[L1 - 1].copy()
    for k in range(L1 - 2, -1, -1):
        for i in range(n):
            out[i] = out[i] * h + X[k, i]
    return out


@njit(cache=True)
def eval_series_deriv(X, h):
    """Derivative of the truncated series at offset h."""
    L1, n = X.shape
    out = np.zeros(n)
    for k in range(L1 - 1, 0, -1):
        for i in range(n):
            out[i] = out[i] * h + k * X[k, i]
    return out


@njit(cache=True)
def rhs(x, t, omega0, a_eq, beq_diag, gp, gen_bus, gen_off, gen_ioff,
        ip, ibr_bus, ibr_off, ibr_ioff, inj, slow_dim, v_off, i_off):
    """Plain right-hand side: the first-order coefficient of the series."""
    X, _ = series_table(x, t, 1, omega0, a_eq, beq_diag,
                        gp, gen_bus, gen_off, gen_ioff,
                        ip, ibr_bus, ibr_off, ibr_ioff,
                        inj, slow_dim, v_off, i_off)
    return X[1]


@njit(cache=True)
def rk4_span(x, t0, t1, h, omega0, a_eq, beq_diag,
             gp, gen_bus, gen_off, gen_ioff,
             ip, ibr_bus, ibr_off, ibr_ioff, inj,
             slow_dim, v_off, i_off,
             rec_every, rec_t, rec_x, rec_start):
    """Classical fixed-step RK4 from t0 to t1 (last step truncated to land exactly).

    Records every rec_every-th step end into (rec_t, rec_x) starting at
    rec_start; returns (state, n_recorded, rhs_calls, diverged_flag).
    """
    span = t1 - t0
    if span <= 0.0:
        return x, 0, 0, False
    nsteps = int(np.ceil(span / h - 1e-12))
    t = t0
    nrec = 0
    calls = 0
    for m in range(nsteps):
        tn = t1 if m == nsteps - 1 else t0 + (m + 1) * h
        hm = tn - t
        k1 = rhs(x, t, omega0, a_eq, beq_diag, gp, gen_bus, gen_off, gen_ioff,
                 ip, ibr_bus, ibr_off, ibr_ioff, inj, slow_dim, v_off, i_off)
        k2 = rhs(x + 0.5 * hm * k1, t + 0.5 * hm, omega0, a_eq, beq_diag,
                 gp, gen_bus, gen_off, gen_ioff, ip, ibr_bus, ibr_off, ibr_ioff,
                 inj, slow_dim, v_off, i_off)
        k3 = rhs(x + 0.5 * hm * k2, t + 0.5 * hm, omega0, a_eq, beq_diag,
                 gp, gen_bus, gen_off, gen_ioff, ip, ibr_bus, ibr_off, ibr_ioff,
                 inj, slow_dim, v_off, i_off)
        k4 = rhs(x + hm * k3, t + hm, omega0, a_eq, beq_diag,
                 gp, gen_bus, gen_off, gen_ioff, ip, ibr_bus, ibr_off, ibr_ioff,
                 inj, slow_dim, v_off, i_off)
        x = x + (hm / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = tn
        calls += 4
        if (m + 1) % rec_every == 0 or m == nsteps - 1:
            bad = False
            for i in range(x.shape[0]):
                if not np.isfinite(x[i]) or np.abs(x[i]) > 1.0e9:
                    bad = True
            if bad:
                return x, nrec, calls, True
            rec_t[rec_start + nrec] = t
            for i in range(x.shape[0]):
                rec_x[rec_start + nrec, i] = x[i]
            nrec += 1
    return x, nrec, calls, False
