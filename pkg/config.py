import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Run layout
RUNS_DIR = os.getenv("PRETRAIN_RUNS_DIR", "./runs")

# Reproducibility
DEFAULT_SEED = int(os.getenv("PRETRAIN_SEED", "0"))
DEFAULT_THREADS = int(os.getenv("PRETRAIN_THREADS", "1"))

# Logging
LOG_LEVEL = os.getenv("PRETRAIN_LOG_LEVEL", "INFO")

# Search grids explored for the cluster generator
CLUSTER_COUNT_GRID = [30, 100, 300, 1000]
GAMMA_GRID = [1.0, 2.0, 5.0, 10.0]

# Defaults picked from the grids above
DEFAULT_CLUSTER_COUNT = 100
DEFAULT_GAMMA = 2.0

# Environment keys that may override command settings
# (setting name -> value read from the environment)
ENV_SETTINGS = {
    "seed": os.getenv("PRETRAIN_SEED"),
    "threads": os.getenv("PRETRAIN_THREADS"),
    "out": os.getenv("PRETRAIN_RUNS_DIR"),
}
