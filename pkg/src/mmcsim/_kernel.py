"""Compiled numerical core: reference calculation, controllers, plant, run loop.

Everything numeric lives here as numba-jitted functions; the public modules
wrap these so that the closed-loop simulator and the library API share one
implementation.

Frame conventions (see phasors.py):

* RMS phasors; positive sequence rotates the space vector as ``sqrt(2) X+
  e^{j w t}``, negative sequence enters the space vector as its *conjugate*,
  ``sqrt(2) conj(X-) e^{-j w t}``.  Synchronous-frame quantities for the
  negative sequence are therefore stored as conjugated phasors and converted
  back at the reference-calculation boundary.
* Per-unit: per-phase voltage/current bases, per-phase power products
  (p = u*i); the DC bus voltage is ~3.411 pu of the AC per-phase base.
"""
import cmath
import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)
TWO_PI3 = 2.0 * math.pi / 3.0
PI_6 = math.pi / 6.0
ALPHA = cmath.exp(2j * math.pi / 3.0)
ALPHA2 = ALPHA * ALPHA

# --- controller state layout -------------------------------------------------
# complex state vector
CS_GI_P, CS_GI_N = 0, 1          # grid-current PI integrators (+ / conj- frame)
CS_AI_P, CS_AI_N = 2, 3          # additive AC PI integrators
CS_GN_P = 4                      # grid dq+ 100 Hz notch (2 regs)
CS_GN_N = 6                      # grid dq- 100 Hz notch
CS_AN_P50 = 8                    # additive dq+ 50 Hz notch
CS_AN_P100 = 10                  # additive dq+ 100 Hz notch
CS_AN_N50 = 12
CS_AN_N100 = 14
CS_HELD_IREF = 16                # low-voltage hold of the grid current ref
CS_LEN = 17

# real state vector
RS_ADC_I = 0                     # 3 additive DC PI integrators
RS_E_I = 3                       # 6 energy PI integrators (Et, ab, ac, vert abc)
RS_U0_I = 9                      # U_diff0DC PI integrator
RS_EN50 = 10                     # energy notch50 states, 6 ch x 2
RS_EN100 = 22                    # energy notch100 states, 6 ch x 2
RS_ADCN50 = 34                   # additive-DC notch50 states, 3 ch x 2
RS_ADCN100 = 40                  # additive-DC notch100, 3 ch x 2
RS_LEN = 46

# controller parameter layout
CP_KP_G, CP_KI_G, CP_X_EQ, CP_R_EQ = 0, 1, 2, 3
CP_KP_A, CP_KI_A, CP_X_ARM2 = 4, 5, 6
CP_KP_ADC, CP_KI_ADC, CP_R_ARM2 = 7, 8, 9
CP_KP_E, CP_KI_E = 10, 11
CP_ET_REF = 12
CP_U0_KP, CP_U0_KI, CP_U0_SAT = 13, 14, 15
CP_EPS_V, CP_EPS_I, CP_I_MAX = 16, 17, 18
CP_REF_CAP, CP_V_CAP, CP_E_CAP = 19, 20, 21
CP_LEN = 22

# refcalc parameter layout
RP_Z_RE, RP_Z_IM, RP_ZEQ_RE, RP_ZEQ_IM, RP_DET_DELTA, RP_SVD_RTOL = 0, 1, 2, 3, 4, 5
RP_LEN = 6

# plant parameter layout
PP_R_S, PP_L_S, PP_U_DC, PP_C_ARM, PP_OMEGA = 0, 1, 2, 3, 4
PP_R_U = 5      # 3
PP_L_U = 8      # 3
PP_R_L = 11     # 3
PP_L_L = 14     # 3
PP_RBAR = 17    # 3
PP_DR = 20      # 3
PP_LEN = 23

# trace column layout
TR_T = 0
TR_IS = 1        # 3
TR_ISUM = 4      # 3
TR_IDC = 7
TR_UU = 8        # 3
TR_UL = 11       # 3
TR_EU = 14       # 3
TR_EL = 17       # 3
TR_EVERT = 20    # 3
TR_U0DC = 23
TR_DET = 24
TR_SING = 25
TR_SAT_ARM = 26
TR_SAT_U0 = 27
TR_TRIP = 28
TR_NCOLS = 29

# trip causes
TRIP_NONE, TRIP_OVERCURRENT, TRIP_ENERGY, TRIP_NONFINITE = 0, 1, 2, 3

NSTATE = 14       # i_sa, i_sb, i_sum_abc, E_u abc, E_l abc, 3 power integrals


# --- elementary blocks --------------------------------------------------------

@njit(cache=True)
def pi_step(integ, err, kp, ki, dt, lo, hi, ff):
    """Real PI with clamping anti-windup; returns (out, new_integrator)."""
    u = ff + kp * err + integ
    if lo <= u <= hi:
        integ = integ + ki * err * dt
    elif u < lo:
        u = lo
    else:
        u = hi
    return u, integ


@njit(cache=True)
def cpi_step(integ, err, kp, ki, dt, lim, ff):
    """Complex PI with magnitude limit and clamping anti-windup."""
    u = ff + kp * err + integ
    m = abs(u)
    if m <= lim:
        integ = integ + ki * err * dt
    else:
        u = u * (lim / m)
    return u, integ


@njit(cache=True)
def notch_step(z1, z2, x, nc):
    """Direct-form-II-transposed biquad; works on real or complex signals."""
    y = nc[0] * x + z1
    z1 = nc[1] * x - nc[3] * y + z2
    z2 = nc[2] * x - nc[4] * y
    return y, z1, z2


# --- reference calculation ----------------------------------------------------

@njit(cache=True)
def grid_current_ref(p_set, q_set, u_g_pos, eps_v, i_max, held):
    """Positive-sequence grid current reference from P/Q set-points.

    Per-unit form of I = conj(S / (3 U+)) with the factor three absorbed by
    the per-phase bases.  The magnitude is limited to ``i_max`` and the last
    value is held when the voltage collapses below ``eps_v``.
    Returns (ref, new_held, voltage_ok).
    """
    if abs(u_g_pos) <= eps_v:
        return held, held, False
    iref = np.conj((p_set + 1j * q_set) / u_g_pos)
    m = abs(iref)
    if m > i_max:
        iref *= i_max / m
    return iref, iref, True


@njit(cache=True)
def dc_additive_refs(p_total, p_ab, p_ac, u_dc):
    """Per-phase DC additive current references from the horizontal powers."""
    p_a = p_total / 3.0 + (p_ab + p_ac) / 3.0
    p_b = p_a - p_ab
    p_c = p_a - p_ac
    return p_a / u_dc, p_b / u_dc, p_c / u_dc


@njit(cache=True)
def compute_udiff0dc(p_vert_a, p_vert_b, p_vert_c, i_dc_a, i_dc_b, i_dc_c, eps_i):
    """Unregulated zero-sequence DC differential voltage.

    Returns (value, valid); value is 0 with valid=False when the mean DC
    additive current is below the guard (the regulator then holds).
    """
    i0 = (i_dc_a + i_dc_b + i_dc_c) / 3.0
    if abs(i0) <= eps_i:
        return 0.0, False
    return (p_vert_a + p_vert_b + p_vert_c) / (3.0 * i0), True


@njit(cache=True)
def assemble_m(u_diff_pos, u_diff_neg, i_s_pos, i_s_neg, z_re, z_im, include_zarm):
    """Reduced 3x3 matrix mapping AC additive current components to the
    per-phase vertical power transfers.

    Unknown vector: x = [I- cos(phi-), I- sin(phi-), I+ cos(phi+)] with the
    positive-sequence reactive component chosen zero.  ``include_zarm=False``
    zeroes the arm-impedance terms (the grid/differential-voltage-only
    variants).
    """
    up = abs(u_diff_pos)
    tp = cmath.phase(u_diff_pos)
    un = abs(u_diff_neg)
    tn = cmath.phase(u_diff_neg)
    ip = abs(i_s_pos)
    fp = cmath.phase(i_s_pos)
    inn = abs(i_s_neg)
    fn = cmath.phase(i_s_neg)
    za = math.hypot(z_re, z_im) if include_zarm else 0.0
    rho = math.atan2(z_im, z_re)

    m = np.empty((3, 3))
    m[0, 0] = za * (-ip * math.cos(rho - fp) - inn * math.cos(rho - fn)) \
        - 2.0 * up * math.cos(tp) - 2.0 * un * math.cos(tn)
    m[0, 1] = za * (ip * math.sin(rho - fp) + inn * math.sin(rho - fn)) \
        - 2.0 * up * math.sin(tp) - 2.0 * un * math.sin(tn)
    m[0, 2] = m[0, 0]
    m[1, 0] = za * (-ip * math.cos(rho - fp - TWO_PI3) - inn * math.cos(rho - fn)) \
        - 2.0 * up * math.cos(tp + TWO_PI3) - 2.0 * un * math.cos(tn)
    m[1, 1] = za * (-ip * math.cos(rho - fp - PI_6) + inn * math.sin(rho - fn)) \
        - 2.0 * up * math.cos(tp + PI_6) - 2.0 * un * math.sin(tn)
    m[1, 2] = za * (-ip * math.cos(rho - fp) - inn * math.cos(rho - fn + TWO_PI3)) \
        - 2.0 * up * math.cos(tp) - 2.0 * un * math.cos(tn - TWO_PI3)
    m[2, 0] = za * (-ip * math.cos(rho - fp + TWO_PI3) - inn * math.cos(rho - fn)) \
        - 2.0 * up * math.cos(tp - TWO_PI3) - 2.0 * un * math.cos(tn)
    m[2, 1] = za * (ip * math.cos(rho - fp + PI_6) + inn * math.sin(rho - fn)) \
        + 2.0 * up * math.cos(tp - PI_6) - 2.0 * un * math.sin(tn)
    m[2, 2] = za * (-ip * math.cos(rho - fp) - inn * math.cos(rho - fn - TWO_PI3)) \
        - 2.0 * up * math.cos(tp) - 2.0 * un * math.cos(tn + TWO_PI3)
    return m


@njit(cache=True)
def det3(m):
    return (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))


@njit(cache=True)
def row_norm_scale(m):
    """Product of the row 2-norms (the cubed geometric-mean row norm)."""
    s = 1.0
    for i in range(3):
        s *= math.sqrt(m[i, 0]**2 + m[i, 1]**2 + m[i, 2]**2)
    return s


@njit(cache=True)
def det_closed_form(u_diff_pos, i_s_pos, z_re, z_im):
    """Closed-form determinant under the internal singular condition
    (equal differential sequence voltages, no negative-sequence grid current).
    """
    u = abs(u_diff_pos)
    th = cmath.phase(u_diff_pos)
    ip = abs(i_s_pos)
    fp = cmath.phase(i_s_pos)
    za = math.hypot(z_re, z_im)
    rho = math.atan2(z_im, z_re)
    return (-1.5 * SQRT3 * za**3 * ip**3 * math.cos(rho - fp)
            - 3.0 * SQRT3 * u * ip**2 * za**2 * math.cos(2.0 * rho - 2.0 * fp + th)
            - 6.0 * SQRT3 * ip * u**2 * za * math.cos(2.0 * th + rho - fp)
            - 6.0 * SQRT3 * ip * u**2 * za * math.cos(rho - fp)
            - 6.0 * SQRT3 * ip**2 * u * za**2 * math.cos(th))


@njit(cache=True)
def solve_direct(m, b0, b1, b2):
    """Cramer solve of M x = b. Unclamped: components go to +-inf when the
    matrix is exactly singular (0/0 sub-determinants give 0)."""
    d = det3(m)
    x = np.empty(3)
    for j in range(3):
        mm = m.copy()
        mm[0, j] = b0
        mm[1, j] = b1
        mm[2, j] = b2
        dj = det3(mm)
        if d != 0.0:
            x[j] = dj / d
        elif dj == 0.0:
            x[j] = 0.0
        else:
            x[j] = math.inf if dj > 0.0 else -math.inf
    return x


@njit(cache=True)
def solve_truncated(m, b0, b1, b2, rtol):
    """Minimum-norm least-squares solve that always removes one degree of
    freedom: the direction of the smallest singular value is dropped, as are
    any directions below ``rtol`` times the largest singular value.
    Returns (x, rank_used)."""
    b = np.empty(3)
    b[0], b[1], b[2] = b0, b1, b2
    u, s, vt = np.linalg.svd(m)
    x = np.zeros(3)
    rank = 0
    for i in range(2):          # index 2 (smallest) always truncated
        if s[i] > rtol * s[0] and s[i] > 0.0:
            coef = (u[0, i] * b[0] + u[1, i] * b[1] + u[2, i] * b[2]) / s[i]
            x[0] += coef * vt[i, 0]
            x[1] += coef * vt[i, 1]
            x[2] += coef * vt[i, 2]
            rank += 1
    return x, rank


@njit(cache=True)
def vertical_power_forward(u_diff_pos, u_diff_neg, i_s_pos, i_s_neg,
                           u_sum_pos, u_sum_neg, i_sum_pos, i_sum_neg,
                           u_diff0dc, i_dc_a, i_dc_b, i_dc_c):
    """Per-phase upper-minus-lower arm power from the full bilinear forms:
    P_k = <-2 u_diff i_sum> + <u_sum i_s>/2 - 2 U_diff0DC I_dc^k."""
    out = np.empty(3)
    shifts = (0.0, -TWO_PI3, TWO_PI3)
    for k in range(3):
        ak = shifts[k]
        # same-rotation pairs lose the phase shift, opposite pairs get 2*ak
        p = -2.0 * (_cavg(u_diff_pos, i_sum_pos, 0.0)
                    + _cavg(u_diff_pos, i_sum_neg, 2.0 * ak)
                    + _cavg(u_diff_neg, i_sum_pos, -2.0 * ak)
                    + _cavg(u_diff_neg, i_sum_neg, 0.0))
        p += 0.5 * (_cavg(u_sum_pos, i_s_pos, 0.0)
                    + _cavg(u_sum_pos, i_s_neg, 2.0 * ak)
                    + _cavg(u_sum_neg, i_s_pos, -2.0 * ak)
                    + _cavg(u_sum_neg, i_s_neg, 0.0))
        if k == 0:
            p -= 2.0 * u_diff0dc * i_dc_a
        elif k == 1:
            p -= 2.0 * u_diff0dc * i_dc_b
        else:
            p -= 2.0 * u_diff0dc * i_dc_c
        out[k] = p
    return out


@njit(cache=True)
def _cavg(x, y, d):
    """One-period average of two RMS cosine waveforms whose phase difference
    is angle(x) - angle(y) + d."""
    return abs(x) * abs(y) * math.cos(cmath.phase(x) - cmath.phase(y) + d)


@njit(cache=True)
def usum_from_additive(i_sum_seq, z_re, z_im):
    """Arm-impedance substitution for the additive voltage:
    U_sum = 2 |Z| |I_sum| at angle rho + phi + pi (i.e. -2 Z-drop)."""
    za = math.hypot(z_re, z_im)
    rho = math.atan2(z_im, z_re)
    mag = 2.0 * za * abs(i_sum_seq)
    ang = rho + cmath.phase(i_sum_seq) + math.pi
    return mag * cmath.exp(1j * ang)


# --- controller ----------------------------------------------------------------

@njit(cache=True)
def controller_step(t, y, cs, rs, cp, rp, method,
                    g_pos, g_neg, p_set, q_set,
                    u_dc, omega, dt, nc50, nc100):
    """One control period. Mutates the controller state arrays and returns

    (u_u(3), u_l(3) pre-clamp commands,
     det_m, singular, u0dc_cmd, u0_saturated,
     x1, x2, x3 solved additive components).
    """
    i_sa = y[0]
    i_sb = y[1]
    i_sc = -i_sa - i_sb
    c_a, c_b, c_c = y[2], y[3], y[4]

    theta = omega * t
    ej = cmath.exp(1j * theta)
    ejc = ej.conjugate()

    # ---- grid current loop (dual synchronous frames) ----
    is_ab = (2.0 / 3.0) * (i_sa + ALPHA * i_sb + ALPHA2 * i_sc) / SQRT2
    gp_raw = is_ab * ejc
    gn_raw = is_ab * ej
    gp, cs[CS_GN_P], cs[CS_GN_P + 1] = notch_step(cs[CS_GN_P], cs[CS_GN_P + 1], gp_raw, nc100)
    gn, cs[CS_GN_N], cs[CS_GN_N + 1] = notch_step(cs[CS_GN_N], cs[CS_GN_N + 1], gn_raw, nc100)

    iref, held, _v_ok = grid_current_ref(p_set, q_set, g_pos,
                                         cp[CP_EPS_V], cp[CP_I_MAX], cs[CS_HELD_IREF])
    cs[CS_HELD_IREF] = held

    x_eq = cp[CP_X_EQ]
    v_cap = cp[CP_V_CAP]
    up_cmd, cs[CS_GI_P] = cpi_step(cs[CS_GI_P], iref - gp, cp[CP_KP_G], cp[CP_KI_G],
                                   dt, v_cap, g_pos + 1j * x_eq * gp)
    un_cmd, cs[CS_GI_N] = cpi_step(cs[CS_GI_N], -gn, cp[CP_KP_G], cp[CP_KI_G],
                                   dt, v_cap, g_neg.conjugate() - 1j * x_eq * gn)
    ud_pos_cmd = up_cmd               # differential voltage command phasors
    ud_neg_cmd = un_cmd.conjugate()

    # ---- energy loops ----
    e_ua, e_ub, e_uc = y[5], y[6], y[7]
    e_la, e_lb, e_lc = y[8], y[9], y[10]
    e_t = e_ua + e_ub + e_uc + e_la + e_lb + e_lc
    e_ab = (e_ua + e_la) - (e_ub + e_lb)
    e_ac = (e_ua + e_la) - (e_uc + e_lc)
    ev = (e_ua - e_la, e_ub - e_lb, e_uc - e_lc)

    kp_e, ki_e, cap_e = cp[CP_KP_E], cp[CP_KI_E], cp[CP_E_CAP]
    raw = np.empty(6)
    raw[0], rs[RS_E_I + 0] = pi_step(rs[RS_E_I + 0], cp[CP_ET_REF] - e_t,
                                     kp_e, ki_e, dt, -cap_e, cap_e, 0.0)
    raw[1], rs[RS_E_I + 1] = pi_step(rs[RS_E_I + 1], -e_ab, kp_e, ki_e, dt, -cap_e, cap_e, 0.0)
    raw[2], rs[RS_E_I + 2] = pi_step(rs[RS_E_I + 2], -e_ac, kp_e, ki_e, dt, -cap_e, cap_e, 0.0)
    for k in range(3):
        raw[3 + k], rs[RS_E_I + 3 + k] = pi_step(rs[RS_E_I + 3 + k], -ev[k],
                                                 kp_e, ki_e, dt, -cap_e, cap_e, 0.0)
    filt = np.empty(6)
    for ch in range(6):
        v, rs[RS_EN50 + 2 * ch], rs[RS_EN50 + 2 * ch + 1] = notch_step(
            rs[RS_EN50 + 2 * ch], rs[RS_EN50 + 2 * ch + 1], raw[ch], nc50)
        v, rs[RS_EN100 + 2 * ch], rs[RS_EN100 + 2 * ch + 1] = notch_step(
            rs[RS_EN100 + 2 * ch], rs[RS_EN100 + 2 * ch + 1], v, nc100)
        filt[ch] = v

    # DC power request: AC export + series loss feedforward plus the total
    # energy loop correction
    p_ff = 3.0 * ((g_pos * np.conj(iref)).real + cp[CP_R_EQ] * abs(iref)**2)
    p_total = p_ff + filt[0]
    idc_a, idc_b, idc_c = dc_additive_refs(p_total, filt[1], filt[2], u_dc)

    # ---- U_diff0DC regulation ----
    u0 = 0.0
    if method != 0:
        unreg, _ok = compute_udiff0dc(filt[3], filt[4], filt[5],
                                      idc_a, idc_b, idc_c, cp[CP_EPS_I])
        u0, rs[RS_U0_I] = pi_step(rs[RS_U0_I], -unreg, cp[CP_U0_KP], cp[CP_U0_KI],
                                  dt, -cp[CP_U0_SAT], cp[CP_U0_SAT], 0.0)
    u0_sat = (method != 0) and (abs(u0) >= cp[CP_U0_SAT] * (1.0 - 1e-12))

    # ---- AC additive current reference calculation ----
    if method <= 1:
        udp_m, udn_m = g_pos, g_neg
    else:
        udp_m, udn_m = ud_pos_cmd, ud_neg_cmd
    m = assemble_m(udp_m, udn_m, iref, 0.0j, rp[RP_Z_RE], rp[RP_Z_IM], method == 4)
    det = det3(m)
    singular = abs(det) <= rp[RP_DET_DELTA] * row_norm_scale(m)
    b0 = filt[3] + 2.0 * u0 * idc_a
    b1 = filt[4] + 2.0 * u0 * idc_b
    b2 = filt[5] + 2.0 * u0 * idc_c
    if method == 1 or method == 3:
        x, _rank = solve_truncated(m, b0, b1, b2, rp[RP_SVD_RTOL])
    else:
        x = solve_direct(m, b0, b1, b2)

    # defensive reference clipping at the controller boundary
    cap_ref = cp[CP_REF_CAP]
    for j in range(3):
        xj = x[j]
        if math.isnan(xj):
            x[j] = 0.0
        elif xj > cap_ref:
            x[j] = cap_ref
        elif xj < -cap_ref:
            x[j] = -cap_ref
    ref_pos = complex(x[2], 0.0)
    ref_neg = complex(x[0], x[1])

    # ---- additive current loops ----
    cs_ab = (2.0 / 3.0) * (c_a + ALPHA * c_b + ALPHA2 * c_c) / SQRT2
    ap_raw = cs_ab * ejc
    an_raw = cs_ab * ej
    ap, cs[CS_AN_P50], cs[CS_AN_P50 + 1] = notch_step(cs[CS_AN_P50], cs[CS_AN_P50 + 1], ap_raw, nc50)
    ap, cs[CS_AN_P100], cs[CS_AN_P100 + 1] = notch_step(cs[CS_AN_P100], cs[CS_AN_P100 + 1], ap, nc100)
    an, cs[CS_AN_N50], cs[CS_AN_N50 + 1] = notch_step(cs[CS_AN_N50], cs[CS_AN_N50 + 1], an_raw, nc50)
    an, cs[CS_AN_N100], cs[CS_AN_N100 + 1] = notch_step(cs[CS_AN_N100], cs[CS_AN_N100 + 1], an, nc100)

    x_arm2 = cp[CP_X_ARM2]
    vp_cmd, cs[CS_AI_P] = cpi_step(cs[CS_AI_P], ref_pos - ap, cp[CP_KP_A], cp[CP_KI_A],
                                   dt, v_cap, 1j * x_arm2 * ap)
    vn_cmd, cs[CS_AI_N] = cpi_step(cs[CS_AI_N], ref_neg.conjugate() - an,
                                   cp[CP_KP_A], cp[CP_KI_A], dt, v_cap, -1j * x_arm2 * an)

    # per-phase DC loops on notched measurements
    v_dc = np.empty(3)
    idc_ref = (idc_a, idc_b, idc_c)
    c_meas = (c_a, c_b, c_c)
    for k in range(3):
        f, rs[RS_ADCN50 + 2 * k], rs[RS_ADCN50 + 2 * k + 1] = notch_step(
            rs[RS_ADCN50 + 2 * k], rs[RS_ADCN50 + 2 * k + 1], c_meas[k], nc50)
        f, rs[RS_ADCN100 + 2 * k], rs[RS_ADCN100 + 2 * k + 1] = notch_step(
            rs[RS_ADCN100 + 2 * k], rs[RS_ADCN100 + 2 * k + 1], f, nc100)
        v_dc[k], rs[RS_ADC_I + k] = pi_step(rs[RS_ADC_I + k], idc_ref[k] - f,
                                            cp[CP_KP_ADC], cp[CP_KI_ADC], dt,
                                            -v_cap, v_cap, cp[CP_R_ARM2] * idc_ref[k])

    # ---- synthesis of arm commands ----
    # half-step phase advance compensates the zero-order hold of the
    # commands over the control period
    eja = cmath.exp(1j * omega * (t + 0.5 * dt))
    ejca = eja.conjugate()
    v_ab = SQRT2 * (vp_cmd * eja + vn_cmd * ejca)
    ud_ab = SQRT2 * (ud_pos_cmd * eja + ud_neg_cmd.conjugate() * ejca)
    u_u = np.empty(3)
    u_l = np.empty(3)
    rot = (complex(1.0, 0.0), ALPHA2, ALPHA)
    for k in range(3):
        v_ac_k = (rot[k] * v_ab).real
        ud_k = (rot[k] * ud_ab).real
        u_sum_k = u_dc - v_dc[k] - v_ac_k
        u_u[k] = -ud_k - u0 + 0.5 * u_sum_k
        u_l[k] = +ud_k + u0 + 0.5 * u_sum_k

    return u_u, u_l, det, singular, u0, u0_sat, x[0], x[1], x[2]


@njit(cache=True)
def clamp_halfbridge(u_u, u_l, e_u3, e_l3, c_arm):
    """Limit arm commands to [0, available capacitor voltage]; returns flag."""
    sat = False
    for k in range(3):
        cap_u = math.sqrt(max(2.0 * e_u3[k] / c_arm, 0.0))
        cap_l = math.sqrt(max(2.0 * e_l3[k] / c_arm, 0.0))
        if not (0.0 <= u_u[k] <= cap_u):
            u_u[k] = min(max(u_u[k], 0.0), cap_u)
            sat = True
        if not (0.0 <= u_l[k] <= cap_l):
            u_l[k] = min(max(u_l[k], 0.0), cap_l)
            sat = True
        if math.isnan(u_u[k]):
            u_u[k] = 0.0
            sat = True
        if math.isnan(u_l[k]):
            u_l[k] = 0.0
            sat = True
    return sat


# --- plant ----------------------------------------------------------------------

@njit(cache=True)
def grid_emf(t, omega, g_pos, g_neg, g_zero, k):
    """Instantaneous Thevenin source voltage of phase k."""
    ak = 0.0
    if k == 1:
        ak = -TWO_PI3
    elif k == 2:
        ak = TWO_PI3
    wt = omega * t
    v = (g_pos * cmath.exp(1j * (wt + ak))).real
    v += (g_neg * cmath.exp(1j * (wt - ak))).real
    v += (g_zero * cmath.exp(1j * wt)).real
    return SQRT2 * v


@njit(cache=True)
def plant_rhs(y, t, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero, dy):
    """State derivative of the averaged plant.

    States: [i_sa, i_sb, i_sum_a, i_sum_b, i_sum_c, E_u(3), E_l(3),
             int P_dc, int P_ac, int P_loss].
    The three-wire constraint (zero-sequence grid current identically zero)
    is enforced through the floating-neutral voltage unknown.
    """
    omega = pp[PP_OMEGA]
    r_s = pp[PP_R_S]
    u_dc = pp[PP_U_DC]

    i_s0 = y[0]
    i_s1 = y[1]
    i_s2 = -i_s0 - i_s1

    b = np.empty(6)
    i_s = (i_s0, i_s1, i_s2)
    for k in range(3):
        e_k = grid_emf(t, omega, g_pos, g_neg, g_zero, k)
        ud_k = 0.5 * (-u_u[k] + u_l[k])
        us_k = u_u[k] + u_l[k]
        rbar = pp[PP_RBAR + k]
        dr = pp[PP_DR + k]
        c_k = y[2 + k]
        b[k] = ud_k - e_k - (r_s + 0.5 * rbar) * i_s[k] - dr * c_k
        b[3 + k] = u_dc - us_k - 2.0 * rbar * c_k - dr * i_s[k]

    # xdot = A_inv @ b ; unknowns [di_sa, di_sb, dc_a, dc_b, dc_c, u_n0]
    for i in range(5):
        acc = 0.0
        for j in range(6):
            acc += a_inv[i, j] * b[j]
        dy[i] = acc

    for k in range(3):
        iu = 0.5 * i_s[k] + y[2 + k]
        il = -0.5 * i_s[k] + y[2 + k]
        dy[5 + k] = u_u[k] * iu
        dy[8 + k] = u_l[k] * il

    # bookkeeping integrals: DC-bus input, AC source output, resistive loss
    dy[11] = u_dc * (y[2] + y[3] + y[4])
    p_ac = 0.0
    p_loss = 0.0
    for k in range(3):
        e_k = grid_emf(t, omega, g_pos, g_neg, g_zero, k)
        p_ac += e_k * i_s[k]
        iu = 0.5 * i_s[k] + y[2 + k]
        il = -0.5 * i_s[k] + y[2 + k]
        p_loss += r_s * i_s[k]**2 + pp[PP_R_U + k] * iu**2 + pp[PP_R_L + k] * il**2
    dy[12] = p_ac
    dy[13] = p_loss
    return dy


@njit(cache=True)
def rk4_step(y, t, dt, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero,
             k1, k2, k3, k4, ytmp):
    plant_rhs(y, t, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero, k1)
    for i in range(NSTATE):
        ytmp[i] = y[i] + 0.5 * dt * k1[i]
    plant_rhs(ytmp, t + 0.5 * dt, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero, k2)
    for i in range(NSTATE):
        ytmp[i] = y[i] + 0.5 * dt * k2[i]
    plant_rhs(ytmp, t + 0.5 * dt, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero, k3)
    for i in range(NSTATE):
        ytmp[i] = y[i] + dt * k3[i]
    plant_rhs(ytmp, t + dt, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero, k4)
    for i in range(NSTATE):
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


# --- closed-loop run -------------------------------------------------------------

@njit(cache=True, nogil=True)
def run_loop(y, cs, rs, cp, rp, pp, a_inv, method,
             grid_pre, grid_fault, sched,
             dt, n_steps, decim, i_trip, trip_consec, e_lo, e_hi, e_win,
             trace):
    """Advance the closed loop; writes decimated rows into ``trace``.

    The energy-bound trip evaluates the one-period moving average of each
    arm energy over the last ``e_win`` logged samples (instantaneous arm
    energies carry a large line-frequency ripple by nature).

    Returns (rows_written, tripped, trip_cause, trip_time).
    """
    t_fault = sched[0]
    t_clear = sched[1]
    omega = pp[PP_OMEGA]
    u_dc = pp[PP_U_DC]
    c_arm = pp[PP_C_ARM]

    nc50 = np.empty(5)
    nc100 = np.empty(5)
    for i in range(5):
        nc50[i] = sched[6 + i]
        nc100[i] = sched[11 + i]

    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    ytmp = np.empty(NSTATE)

    ebuf = np.zeros((6, e_win))
    esum = np.zeros(6)
    ecount = 0

    row = 0
    oc_count = 0
    tripped = False
    cause = TRIP_NONE
    trip_time = -1.0

    for step in range(n_steps + 1):
        t = step * dt
        fault_on = (t >= t_fault) and (t < t_clear)
        if fault_on:
            g_pos, g_neg, g_zero = grid_fault[0], grid_fault[1], grid_fault[2]
            p_set, q_set = sched[4], sched[5]
        else:
            g_pos, g_neg, g_zero = grid_pre[0], grid_pre[1], grid_pre[2]
            p_set, q_set = sched[2], sched[3]

        u_u, u_l, det, singular, u0, u0_sat, x1, x2, x3 = controller_step(
            t, y, cs, rs, cp, rp, method, g_pos, g_neg, p_set, q_set,
            u_dc, omega, dt, nc50, nc100)
        sat_arm = clamp_halfbridge(u_u, u_l, y[5:8], y[8:11], c_arm)

        if step % decim == 0:
            i_sa = y[0]
            i_sb = y[1]
            i_sc = -i_sa - i_sb
            trace[row, TR_T] = t
            trace[row, TR_IS] = i_sa
            trace[row, TR_IS + 1] = i_sb
            trace[row, TR_IS + 2] = i_sc
            for k in range(3):
                trace[row, TR_ISUM + k] = y[2 + k]
                trace[row, TR_UU + k] = u_u[k]
                trace[row, TR_UL + k] = u_l[k]
                trace[row, TR_EU + k] = y[5 + k]
                trace[row, TR_EL + k] = y[8 + k]
                trace[row, TR_EVERT + k] = y[5 + k] - y[8 + k]
            trace[row, TR_IDC] = y[2] + y[3] + y[4]
            trace[row, TR_U0DC] = u0
            trace[row, TR_DET] = det
            trace[row, TR_SING] = 1.0 if singular else 0.0
            trace[row, TR_SAT_ARM] = 1.0 if sat_arm else 0.0
            trace[row, TR_SAT_U0] = 1.0 if u0_sat else 0.0
            trace[row, TR_TRIP] = 0.0

            # trip monitor (decimated cadence so the trace reproduces it)
            finite = True
            for i in range(NSTATE):
                if not math.isfinite(y[i]):
                    finite = False
                    break
            i_arm_max = 0.0
            i_ss = (i_sa, i_sb, i_sc)
            for k in range(3):
                iu = abs(0.5 * i_ss[k] + y[2 + k])
                il = abs(-0.5 * i_ss[k] + y[2 + k])
                if iu > i_arm_max:
                    i_arm_max = iu
                if il > i_arm_max:
                    i_arm_max = il
            if i_arm_max > i_trip:
                oc_count += 1
            else:
                oc_count = 0
            # one-period moving average of the arm energies
            slot = row % e_win
            for k in range(6):
                if ecount >= e_win:
                    esum[k] -= ebuf[k, slot]
                ebuf[k, slot] = y[5 + k]
                esum[k] += y[5 + k]
            ecount += 1
            nsamp = min(ecount, e_win)
            e_bad = False
            for k in range(6):
                em = esum[k] / nsamp
                if not (e_lo <= em <= e_hi):
                    e_bad = True
                    break
            if not finite:
                cause = TRIP_NONFINITE
            elif oc_count >= trip_consec:
                cause = TRIP_OVERCURRENT
            elif e_bad:
                cause = TRIP_ENERGY
            if cause != TRIP_NONE:
                tripped = True
                trip_time = t
                trace[row, TR_TRIP] = 1.0
                row += 1
                break
            row += 1

        if step == n_steps:
            break
        rk4_step(y, t, dt, u_u, u_l, pp, a_inv, g_pos, g_neg, g_zero,
                 k1, k2, k3, k4, ytmp)

    return row, tripped, cause, trip_time
