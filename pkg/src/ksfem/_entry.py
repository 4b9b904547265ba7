"""Console entry point.

Thread caps have to land in the environment before numpy loads its BLAS,
so this module must stay free of numpy imports at module level.
"""

import os
import sys


def main(argv=None):
    threads = os.environ.get("KSFEM_THREADS", "").strip()
    if threads and threads != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from .cli import run

    sys.exit(run(argv))


if __name__ == "__main__":
    main()
