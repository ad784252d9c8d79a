"""How often each neuron enters a LoSiA subnet over one run, with Gini indices."""
from losia.config import TrainConfig
from losia.experiments import gini, selection_counts
from losia.trainer import run_training


def main():
    met, tr = run_training(TrainConfig(method="losia", steps=600, T=20, lr=1e-2))
    counts = selection_counts(met, {n: i.shape for n, i in tr.infos.items()})
    for name, (rows, cols) in sorted(counts.items()):
        print(f"{name:24s} in-gini {gini(rows):.3f}  out-gini {gini(cols):.3f}  "
              f"reselections {sum(1 for e in met.events if e['layer'] == name and not e['initial'])}")


if __name__ == "__main__":
    main()
