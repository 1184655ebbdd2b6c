"""
Configuration management for the HSVR toolkit
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Directories
OUTPUT_DIR = Path(os.getenv('HSVR_OUTPUT_DIR', 'runs'))
DATA_DIR = Path(os.getenv('HSVR_DATA_DIR', 'data'))

# Runtime
NUM_THREADS = int(os.getenv('HSVR_THREADS', '1'))
LOG_LEVEL = os.getenv('HSVR_LOG_LEVEL', 'INFO')

# Effective retention satisfies |rho| <= RHO_CLAMP wherever A is formed
RHO_CLAMP = 1.0 - 1e-6

# Gramian settings
CHOLESKY_JITTER = 1e-12
NAIVE_SOLVER_MAX_N = 32
KRONECKER_COND_LIMIT = 1e8

# Hankel singular values below HSV_FLOOR * sigma_1 count as zero
HSV_FLOOR = 1e-14

# Canonicalization
PERTURB_EPS = 1e-10
ALPHA_RAW_LIMIT = 20.0  # tanh(20) == 1.0 in double, so alpha is exactly 0 or pi
DIAG_COND_LIMIT = 1e8

# Rank allocation
ENERGY_FRACTION = 0.99
BISECTION_EPS = 1e-8
BISECTION_MAX_ITER = 100

# Optimizer (AdamW, constant learning rate)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Training outputs
HSV_EVERY = 5  # epochs between HSV snapshots
REG_GRID = (1e-5, 1e-4, 1e-3)  # toy-scale grid for the regularization magnitude
TRUNC_SWEEP = (0.5, 0.6, 0.7, 0.8, 0.9)

# Checkpoint container
CHECKPOINT_MAGIC = b'HSVRCKPT'
CHECKPOINT_VERSION = 1

# Training presets; CLI flags override individual values
PRESETS = {
    'smnist-toy': {
        'dataset': 'mnist',
        'depth': 2,
        'n': 32,
        'p': 32,
        'dropout': 0.0,
        'lr': 0.004,
        'batch_size': 50,
        'epochs': 10,
        'weight_decay': 0.01,
        'reg': 1e-4,
        'train_size': 10000,
        'eval_size': 2000,
    },
    'smnist-paper': {
        'dataset': 'mnist',
        'depth': 4,
        'n': 128,
        'p': 128,
        'dropout': 0.1,
        'lr': 0.001,
        'batch_size': 50,
        'epochs': 250,
        'weight_decay': 0.1,
        'reg': 1e-5,
        'train_size': None,
        'eval_size': None,
    },
    'synthetic-toy': {
        'dataset': 'synthetic',
        'num_classes': 4,
        'seq_len': 128,
        'depth': 2,
        'n': 32,
        'p': 32,
        'dropout': 0.0,
        'lr': 0.004,
        'batch_size': 32,
        'epochs': 10,
        'weight_decay': 0.01,
        'reg': 1e-4,
        'train_size': 2000,
        'eval_size': 500,
    },
}
PRESETS['smnist-full'] = PRESETS['smnist-paper']
