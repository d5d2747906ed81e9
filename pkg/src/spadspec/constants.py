"""Physical constants used throughout (fixed values, not CODATA lookups)."""

HBAR_EV_S = 6.582119569e-16
HC_EV_NM = 1239.841984
C_NM_PER_S = 2.99792458e17
