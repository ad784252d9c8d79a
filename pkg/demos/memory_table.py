"""Trainable / optimizer / gradient / auxiliary counts on LLaMA-2 7B shapes."""
import dataclasses

from losia.analysis import LLAMA2_7B, memory_model


def main():
    print(f"{'method':8s} {'setting':14s} {'trainable':>10s} {'total':>10s}  (millions of values)")
    for r in (16, 64, 256):
        rec = memory_model(dataclasses.replace(LLAMA2_7B, r=r), "lora")
        print(f"{'lora':8s} {f'r={r}':14s} {rec.exact['trainable'] / 1e6:10.2f} {rec.total() / 1e6:10.2f}")
    rec = memory_model(LLAMA2_7B, "galore")
    print(f"{'galore':8s} {'R=512':14s} {rec.exact['trainable'] / 1e6:10.2f} {rec.total() / 1e6:10.2f}")
    for p in (1 / 16, 1 / 8, 1 / 4):
        rec = memory_model(dataclasses.replace(LLAMA2_7B, p=p, p_o=p), "losia")
        print(f"{'losia':8s} {f'p=p_o=1/{round(1 / p)}':14s} {rec.exact['trainable'] / 1e6:10.2f} "
              f"{rec.total() / 1e6:10.2f}")


if __name__ == "__main__":
    main()
