"""Frozen harmonic-decoder calibration constants.

Auto-generated by `vfkm calibrate --write`; do not edit by hand. Keys are
(gamma, rows); values must equal compute_xi(gamma, rows) exactly.
"""

XI_TABLE = {
    (1.0, 8): 0.6233827223972074,
    (1.0, 64): 0.7060677910216397,
    (1.0, 256): 0.7147567350145718,
    (1.0, 1024): 0.7173519308306587,
    (1.0, 4096): 0.7176626976777459,
    (1.0, 16384): 0.717761043299857,
}
