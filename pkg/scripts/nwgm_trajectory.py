"""Per-epoch NWGM gap on held-out images, from initialization on.

    python3 scripts/nwgm_trajectory.py [--seed 0] [--config run.yaml]
"""
import argparse

from tdcrl.benchmark import image_table, make_benchmark
from tdcrl.config import RunConfig, load_config
from tdcrl.trainer import init_state, mean_nwgm_gap, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.seed = args.seed
    bench = make_benchmark(cfg.seed, cfg.encoder, cfg.benchmark)
    held = image_table(bench, bench.heldout_ids, cfg.benchmark.images_per_cell)
    tc = cfg.train_config()
    print(f"epoch  0  gap {mean_nwgm_gap(init_state(tc, bench.encoder, bench.basis), held.vectors):.3e}")
    _, hist = train(tc, bench.encoder, bench.basis, eval_images=held)
    for h in hist:
        print(f"epoch {h['epoch']:2d}  gap {h['nwgm_gap']:.3e}  L_C {h['loss_c']:.4f}  acc {h['eval_acc']:.3f}")


if __name__ == "__main__":
    main()
