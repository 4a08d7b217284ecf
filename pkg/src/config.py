"""Shared constants for spikelab. All package-wide configuration lives here."""

# --- Package ---
VERSION = "0.3.0"
SEED_ENV_VAR = "SPIKELAB_SEED"
DEFAULT_SEED = 20180101

# --- Exit codes ---
EXIT_OK = 0
EXIT_USAGE = 2       # bad arguments or unreadable input
EXIT_NUMERICAL = 3   # root-finder / resolvent / estimation failure

# --- Numerics ---
ROOT_TOL = 1e-12           # residual tolerance for scalar root-finding
ROOT_MAX_ITER = 200
EDGE_MARGIN = 1e-8         # lambda this close to a support edge counts as inside
ATOM_TOL = 1e-12           # relative distance at which alpha sits on a bulk atom
ORTHO_TOL = 1e-10          # U*U = I check for population models
SYMMETRY_TOL = 1e-10
BRACKET_GROWTH = 2.0       # step multiplier when searching for a sign change
BRACKET_MAX_STEPS = 80
GAP_SCAN_POINTS = 64       # grid used to find a phi' > 0 point inside a gap between atoms

# --- Reference designs (Case I / Case II) ---
CASE_SPIKES = (4.0, 3.0, 0.2, 0.1)
CASE_MULTIPLICITIES = (1, 2, 2, 1)
CASE_BULK_VALUE = 1.0
CASE_MIN_P = 7
DEFAULT_RHO = 0.5

# --- Experiments ---
DEFAULT_P = 500
DEFAULT_N = 1000
DEFAULT_REPS = 1000
MAX_FAILURE_FRACTION = 0.01  # abort when more replications than this fail
KS_LEVEL = 0.01

# --- Detection ---
RATIO_THRESHOLD = 0.2
RATIO_THRESHOLD_RANGE = (0.1, 0.3)
LOWER_LEVEL = 0.05
UPPER_LEVEL = 0.95
EDGE_TW_QUANTILE = 2.02    # 0.99 quantile of Tracy-Widom (real); widens the fitted bulk band
BULK_FIT_MAX_ITER = 50

# --- Heavy-tailed law (density a0 / ((|x|+1)^5 log(|x|+2))) ---
HEAVY_TAIL_GRID_MAX = 1e6    # |x| beyond this carries < 1e-24 mass
HEAVY_TAIL_GRID_POINTS = 20000

# --- Truncation ---
TRUNCATION_RATE = -1.0 / 6.0  # default eta_n = n ** TRUNCATION_RATE

# --- Output ---
CSV_DIGITS = 17
MANIFEST_NAME = "manifest.json"
