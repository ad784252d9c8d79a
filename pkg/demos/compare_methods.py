"""Train FFT, LoSiA and a random static subnet on a+b mod 16 and print final losses.

    python3 demos/compare_methods.py [steps]
"""
import sys

from losia.config import TrainConfig
from losia.trainer import run_training


def main(steps=600):
    runs = [("fft", 3e-3, {}), ("losia", 1e-2, {}), ("losia", 1e-2, {"wds_off": True}),
            ("random_subnet", 1e-2, {})]
    for method, lr, flags in runs:
        cfg = TrainConfig(method=method, lr=lr, steps=steps, p=0.25, p_o=0.25, T=50, **flags)
        met, tr = run_training(cfg)
        ev = met.evals[-1]
        label = "+".join([method, *flags])
        print(f"{label:16s} loss {ev['eval_loss']:.4f}  acc {ev['accuracy']:.3f}  "
              f"audit {'pass' if not tr.frozen_audit() else 'FAIL'}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 600)
