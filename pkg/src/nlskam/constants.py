"""Calibrated constants for the norm inequalities.

The values were measured as worst-case ratios on a calibration corpus
(``nlskam.inequalities.calibrate`` with ``CALIBRATION_SEED``) and multiplied
by ``SAFETY_MARGIN``.  They are fixed here so the inequality suites give a
deterministic verdict.  Keys are Sobolev indices.
"""

SAFETY_MARGIN = 2.0
CALIBRATION_SEED = 20240101

# |AB|_s <= C(s)|A|_{s0}|B|_s + C(s0)|A|_s|B|_{s0}; C(s0) also bounds the
# Neumann precondition C(s0)|Psi|_{s0} <= 1/2.
INTERPOLATION = {1.5: 2.33, 2.0: 2.33, 2.5: 4.199, 3.0: 7.751, 4.0: 19.656}
# ||Ah||_s <= C(s)(|A|_{s0}||h||_s + |A|_s||h||_{s0})
OPERATOR_FIELD = {1.5: 2.443, 2.0: 3.406, 2.5: 4.767, 3.0: 6.639, 4.0: 11.929}
# ||uv||_s <= C(s0)||u||_s||v||_{s0} + C(s)||u||_{s0}||v||_s
TAME_PRODUCT = {1.5: 2.334, 2.0: 2.334, 2.5: 4.35, 3.0: 7.903, 4.0: 16.988}
# composition with x -> x + p(x) on the circle
CHANGE_A = {1.0: 1.998, 2.0: 2.076, 3.0: 2.928, 4.0: 4.646}
CHANGE_B = {1.0: 0.987, 2.0: 1.724, 3.0: 1.874, 4.0: 3.763}
CHANGE_C = {1.0: 1.868, 2.0: 1.726, 3.0: 1.456, 4.0: 1.661}
# Q1 Q2 for tame Q_i
COMPOSITION = {1.0: 4.727, 2.0: 6.695, 3.0: 8.586, 4.0: 9.198}

TABLES = {
    "interpolation": INTERPOLATION,
    "operator_field": OPERATOR_FIELD,
    "tame_product": TAME_PRODUCT,
    "change_a": CHANGE_A,
    "change_b": CHANGE_B,
    "change_c": CHANGE_C,
    "composition": COMPOSITION,
}


def constant(table, s):
    """Look up ``C(s)``; indices between table entries use the next one up."""
    keys = sorted(table)
    for k in keys:
        if s <= k + 1e-12:
            return table[k]
    raise KeyError(f"no calibrated constant for s={s}")


def interp_constant(s):
    return constant(INTERPOLATION, s)
