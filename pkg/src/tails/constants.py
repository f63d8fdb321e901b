"""
Constants for the small-value toolkit
"""

# Statistics
DEFAULT_CONFIDENCE = 0.95
Z_95 = 1.959963985  # two-sided 95% normal quantile
KS_THRESHOLD_99 = 1.63  # times sqrt(2/N), two-sample KS at 99%

# Offspring laws
PROB_SUM_TOLERANCE = 1e-12
GEOMETRIC_TAIL_CUTOFF = 1e-14
PRUNE_COEFFICIENT_FLOOR = 1e-15
EXTINCTION_TOLERANCE = 1e-13
EXTINCTION_MAX_ITERATIONS = 1_000_000

# Galton-Watson simulation
DEFAULT_SIZE_CAP = 10**9
MAX_SIZE_CAP = 2**53  # float-exact generation sizes
DEFAULT_DEPTH = 30

# Density grid
GRID_X_MIN = 1e-8
GRID_X_SWITCH = 0.5
GRID_X_MAX = 50.0
GRID_N_GEOMETRIC = 1024
GRID_N_LINEAR = 792
GRID_TAIL_MASS_LIMIT = 1e-10
DENSITY_TV_TOLERANCE = 1e-6
DENSITY_ITERATIONS = 60
DENSITY_COST_BUDGET = 5e12  # pair evaluations per call
DENSITY_FLOOR = 1e-12

# Chebyshev search
TAU_MIN = 1e-3
TAU_MAX = 50.0
TAU_POINTS = 64

# Default epsilon grids
SCHROEDER_GRID_POWERS = range(2, 13)
BOETTCHER_GRID_POWERS = range(1, 9)

# Embedded walks
MAX_WALK_STEPS = 10**9
WALK_CHUNK_STEPS = 1 << 16
REJECTION_MIN_ACCEPTANCE = 1.0 / 16.0
EXIT_PROBE_MIN_A = (0.05, 0.075, 0.1, 0.15, 0.2)
EXIT_PROBE_MAX_A = (0.5, 1.0, 1.5, 2.0, 2.5)

# Intersection experiments
QUANTILE_ANCHORS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05)
DISCRETIZATION_FLOOR_QUANTILE = 0.0005
STRETCHED_MIN_SUCCESSES = 30
DEFAULT_FINE_OFFSET = 5
MAX_LEVEL_RAISE = 3  # levels tried above the requested one for explicit eps

# Runner
DEFAULT_SEED = 0
DEFAULT_THREADS = 1
DEFAULT_BUDGET = 10_000
DEFAULT_LEVEL = 7
DEFAULT_CHUNK_SIZE = 2048
DEFAULT_TOLERANCE = 0.05
