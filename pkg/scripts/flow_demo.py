"""Train the flow network on a few synthetic pairs and report endpoint error.

Usage: python scripts/flow_demo.py [steps] [num_pairs]
"""

import sys

import numpy as np

from sfs import lfn, metrics, synth


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    num_pairs = int(sys.argv[2]) if len(sys.argv) > 2 else 8

    pairs = []
    for i in range(num_pairs):
        spec = synth.random_scene(100 + i, max_step_px=8.0)
        seq = synth.generate_sequence(spec, 2)
        pairs.append((seq.frames[1], seq.frames[0], seq.gt_flow[0]))

    model = lfn.LfnModel(0)
    cfg = lfn.FlowLossConfig(eps=0.5)
    lfn.train_lfn(pairs, model, cfg, steps=steps, seed=0, log_every=25)

    errs = []
    for i in range(10):
        spec = synth.random_scene(900 + i, max_step_px=8.0)
        seq = synth.generate_sequence(spec, 2)
        pred, _ = lfn.lfn_forward(seq.frames[1], seq.frames[0], model)
        report = metrics.flow_metrics(pred, lfn.FlowField.from_pixels(seq.gt_flow[0]))
        errs.append(report.get("AEE"))
    print(f"mean AEE over {len(errs)} held-out pairs: {np.mean(errs):.3f} px")


if __name__ == "__main__":
    main()
