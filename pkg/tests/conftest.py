import os

# BLAS threading hurts this workload's many small matmuls and can differ
# between runs; pin it before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
