import os

# Pin BLAS thread pools before numpy loads anywhere: keeps kernel timing
# ratios stable and test runs deterministic on small CI boxes.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
