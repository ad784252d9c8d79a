"""Three-stage continual sequence (copy, a+b mod 16, a+b mod 11) with AP/FWT/BWT.

    python3 demos/continual.py [method] [steps]
"""
import sys

import numpy as np

from losia.analysis import cl_metrics
from losia.experiments import continual_tasks, run_continual


def main(method="losia", steps=300):
    kw = {"lr": 3e-3} if method == "fft" else {"lr": 1e-2, "p": 0.25, "p_o": 0.25, "T": 25}
    P = run_continual(continual_tasks(method, steps, **kw))
    np.set_printoptions(precision=1, suppress=True)
    print("rows: single-task reference, after stage 1..3; columns: tasks")
    print(P)
    ap, fwt, bwt = cl_metrics(P)
    print(f"AP {ap:.2f}  FWT {fwt:.2f}  BWT {bwt:.2f}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "losia", int(args[1]) if len(args) > 1 else 300)
