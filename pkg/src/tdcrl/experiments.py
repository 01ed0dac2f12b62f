"""Seeded end-to-end runs on the synthetic benchmark, shared by scripts/ and
the acceptance suite."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional

from .benchmark import image_table, make_benchmark
from .config import RunConfig
from .eval_metrics import EvalReport, evaluate
from .trainer import init_state, mean_nwgm_gap, train


@dataclass
class AblationResult:
    seed: int
    acc_tdcrl: float
    acc_no_ci: float
    report: EvalReport  # diagnostics of the TDCRL model over all domains
    initial_gap: float
    gaps: List[float]

    @property
    def improvement(self) -> float:
        return self.acc_tdcrl - self.acc_no_ci

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed, "acc_tdcrl": self.acc_tdcrl, "acc_no_ci": self.acc_no_ci,
            "improvement": self.improvement, "mmd_pre": self.report.mean_mmd_pre,
            "mmd_post": self.report.mean_mmd_post, "probe_ce_pre": self.report.probe_ce_pre,
            "probe_ce_post": self.report.probe_ce_post, "initial_gap": self.initial_gap,
            "final_gap": self.gaps[-1] if self.gaps else self.initial_gap,
        }


def ablation_seed(seed: int, cfg: Optional[RunConfig] = None) -> AblationResult:
    """TDCRL vs no-CI on held-out styles for one seed."""
    cfg = dataclasses.replace(cfg or RunConfig(), seed=seed)
    bench = make_benchmark(seed, cfg.encoder, cfg.benchmark)
    per_cell = cfg.benchmark.images_per_cell
    held = image_table(bench, bench.heldout_ids, per_cell)
    everything = image_table(bench, bench.train_ids + bench.heldout_ids, per_cell)
    tc = cfg.train_config()

    initial_gap = mean_nwgm_gap(init_state(tc, bench.encoder, bench.basis), held.vectors)
    state, hist = train(tc, bench.encoder, bench.basis, eval_images=held)
    _, hist_no_ci = train(dataclasses.replace(tc, mode="no_ci"), bench.encoder, bench.basis, eval_images=held)
    report = evaluate(state, everything, bandwidth=cfg.eval.mmd_bandwidth,
                      probe_epochs=cfg.eval.probe_epochs, probe_lr=cfg.eval.probe_lr, seed=seed)
    return AblationResult(seed, hist[-1]["eval_acc"], hist_no_ci[-1]["eval_acc"], report,
                          initial_gap, [h["nwgm_gap"] for h in hist])
