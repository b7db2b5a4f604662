"""One seed of the desk benchmark, end to end.

1. probe candidate JPEG qualities on the first task and pick the one that
   forgets least,
2. train iCaRL over five tasks with that codec and with raw exemplars under
   the same byte budget,
3. repeat at an aggressive quality with and without compressing the test
   images (matched vs mismatched preprocessing).

Takes about five minutes on one CPU core.
"""
import logging
from pathlib import Path

import numpy as np
import torch

from compcil.experiments import (RunConfig, compare_with_uncompressed, domain_shift_report, load_dataset,
                                 remap_labels, run_selection)
from compcil.tasks import build_task_sequence

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

cfg = RunConfig.load(Path(__file__).parents[1] / "configs" / "desk_benchmark.yaml",
                     ["output_dir=runs/demo"])
raw = load_dataset(cfg)
seq = build_task_sequence(raw, cfg.protocol_spec())
print("class order:", seq.class_order)

sel = run_selection(cfg, remap_labels(raw, seq), seq, raw, Path(cfg.output_dir) / "selection")
for r in sel.probes:
    print(f"probe {r.codec.key:9s} bpp {r.bpp:5.2f}  exemplars {r.capacity:3d}  forgetting {100 * r.forgetting:+6.2f}")
print("selected:", sel.selected.key)

compressed, baseline = compare_with_uncompressed(cfg, sel.selected)
print(f"{sel.selected.key}: avg {100 * compressed.average:.2f}  last {100 * compressed.last:.2f}  "
      f"buffer {compressed.buffer_sizes[-1]}")
print(f"raw      : avg {100 * baseline.average:.2f}  last {100 * baseline.last:.2f}  "
      f"buffer {baseline.buffer_sizes[-1]}")

aggressive = RunConfig.from_dict({**cfg.to_dict(), "codec": {"method": "jpeg", "quality": 10}})
mismatched = RunConfig.from_dict({**aggressive.to_dict(), "preprocess": "mismatched"})
report = domain_shift_report(aggressive, mismatched, Path(cfg.output_dir) / "domain_shift")
for mode in ("matched", "mismatched"):
    old = np.array(report[mode][1:], dtype=float)
    print(f"{mode:10s} old-class accuracy per step {np.round(100 * old, 1)}  mean {100 * old.mean():.2f}")
