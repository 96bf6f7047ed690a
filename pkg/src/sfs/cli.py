"""Command-line entry point: data generation, per-network training,
episodic and zero-shot evaluation, pipeline inference, and benchmarking.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import synth
from .config import ConfigParseError, RunConfig, load_config, write_config
from .dnss import DnssModel, EarlyStop, FocalLossConfig, LabelMap, train_dnss, \
    write_detections
from .lfn import FlowLossConfig, LfnModel, train_lfn
from .memory import MemoryBank
from .metrics import MetricReport, recognition_metrics
from .nrmn import NrmnConfig, NrmnModels, UNKNOWN, build_bank, fit_openmax, \
    train_nrmn, train_zero_shot, zero_shot_predict
from .pipeline import load_pipeline, run_pipeline, save_pipeline
from .synth import Episode, episodic_sampler, make_chip_dataset
from .tensor import Tensor


def _threads() -> int:
    env = os.environ.get("SFS_THREADS", "")
    if env.isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


def _nrmn_cfg(cfg: RunConfig) -> NrmnConfig:
    return NrmnConfig(capacity=cfg["nrmn.capacity"], decay=cfg["nrmn.decay"],
                      tau_merge=cfg["nrmn.tau_merge"], eta=cfg["nrmn.eta"],
                      top_k=cfg["nrmn.top_k"], tail_size=cfg["nrmn.tail_size"],
                      alpha_top=cfg["nrmn.alpha_top"],
                      tau_unknown=cfg["nrmn.tau_unknown"],
                      chip_hw=cfg["data.chip_hw"], channels=cfg["nrmn.channels"])


def _scene_specs(cfg: RunConfig, seed: int):
    frames = cfg["data.frames_per_scene"]
    step_cap = min(cfg["data.max_step_px"], 24.0 / max(frames - 1, 1))
    return [synth.random_scene(seed * 1009 + i, height=cfg["data.height"],
                               width=cfg["data.width"], max_step_px=step_cap)
            for i in range(cfg["data.num_scenes"])]


def cmd_gen_data(cfg: RunConfig, seed: int, out: str) -> int:
    os.makedirs(out, exist_ok=True)
    scenes_dir = os.path.join(out, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    specs = _scene_specs(cfg, seed)
    ids = []
    for i, spec in enumerate(specs):
        seq = synth.generate_sequence(spec, cfg["data.frames_per_scene"])
        synth.write_sequence(scenes_dir, i, seq)
        ids.append(i)
    splits = synth.split_indices(len(ids), seed)
    synth.write_manifest(scenes_dir, ids, splits)
    chips = make_chip_dataset(seed, range(1, cfg["data.num_classes"] + 1),
                              cfg["data.chips_per_class"], cfg["data.chip_hw"])
    chips_dir = os.path.join(out, "chips")
    os.makedirs(chips_dir, exist_ok=True)
    from . import tns_io
    for cid, arr in chips.items():
        tns_io.write_tns(os.path.join(chips_dir, f"class_{cid}.tns"), arr)
    print(f"gen-data: {len(ids)} scenes, {len(chips)} chip classes -> {out}")
    return 0


def _dnss_dataset(cfg: RunConfig, seed: int):
    dataset = []
    for spec in _scene_specs(cfg, seed):
        for t in range(cfg["data.frames_per_scene"]):
            frame = synth.render_frame(spec, t)
            dataset.append((frame, LabelMap(synth.label_field(spec, t))))
    return dataset


def cmd_train_dnss(cfg: RunConfig, seed: int, out: str) -> int:
    dataset = _dnss_dataset(cfg, seed)
    model = DnssModel(seed, num_classes=2, prior_channels=2,
                      stage_channels=cfg["dnss.stage_channels"])
    loss_cfg = FocalLossConfig(alpha1=cfg["dnss.alpha1"],
                               gamma1=cfg["dnss.gamma1"],
                               kappa1=cfg["dnss.kappa1"])
    history = train_dnss(model, dataset, loss_cfg, lr=cfg["dnss.lr"],
                         batch_size=cfg["dnss.batch_size"],
                         max_epochs=cfg["dnss.max_epochs"], seed=seed,
                         stop_rule=EarlyStop())
    save_pipeline(os.path.join(out, "checkpoints"), dnss_model=model)
    print(f"train-dnss: {len(history.train_losses)} epochs, "
          f"best epoch {history.best_epoch}, "
          f"val loss {history.val_losses[history.best_epoch]:.5f}")
    return 0


def cmd_train_nrmn(cfg: RunConfig, seed: int, out: str) -> int:
    ncfg = _nrmn_cfg(cfg)
    models = NrmnModels.create(seed, ncfg)
    classes = list(range(1, cfg["data.num_classes"] + 1))
    chips = make_chip_dataset(seed, classes, cfg["data.chips_per_class"],
                              cfg["data.chip_hw"])
    episodes = episodic_sampler(chips, cfg["nrmn.n_way"], cfg["nrmn.k_shot"],
                                cfg["nrmn.queries"], seed)
    history, _bank = train_nrmn(episodes, models,
                                num_episodes=cfg["nrmn.episodes"],
                                lr=cfg["nrmn.lr"], seed=seed)
    fit_openmax(models, chips)
    support = {cid: arr[:cfg["nrmn.k_shot"]] for cid, arr in chips.items()}
    bank = build_bank(models, support)
    save_pipeline(os.path.join(out, "checkpoints"), nrmn_models=models, bank=bank)
    print(f"train-nrmn: {len(history.losses)} episodes, "
          f"final loss {history.losses[-1]:.5f}")
    return 0


def _flow_pairs(cfg: RunConfig, seed: int, count: int):
    pairs = []
    for i in range(count):
        spec = synth.random_scene(seed * 7919 + i, height=cfg["data.height"],
                                  width=cfg["data.width"],
                                  max_step_px=cfg["data.max_step_px"])
        seq = synth.generate_sequence(spec, 2)
        pairs.append((seq.frames[1], seq.frames[0], seq.gt_flow[0]))
    return pairs


def cmd_train_lfn(cfg: RunConfig, seed: int, out: str) -> int:
    pairs = _flow_pairs(cfg, seed, max(cfg["data.num_scenes"], 8))
    model = LfnModel(seed)
    loss_cfg = FlowLossConfig(gamma2=cfg["lfn.gamma2"], eps=cfg["lfn.eps"],
                              kappa2=cfg["lfn.kappa2"],
                              use_epe_term=cfg["lfn.use_epe_term"])
    history = train_lfn(pairs, model, loss_cfg, steps=cfg["lfn.steps"],
                        lr=cfg["lfn.lr"], seed=seed)
    save_pipeline(os.path.join(out, "checkpoints"), lfn_model=model)
    print(f"train-lfn: {len(history.losses)} steps, "
          f"final loss {history.losses[-1]:.5f}")
    return 0


def _load_or_train_nrmn(cfg: RunConfig, seed: int, out: str):
    ncfg = _nrmn_cfg(cfg)
    models = NrmnModels.create(seed, ncfg)
    ckpt = os.path.join(out, "checkpoints", "nrmn")
    bank = None
    if os.path.exists(os.path.join(ckpt, "manifest.txt")):
        bank = load_pipeline(os.path.join(out, "checkpoints"), nrmn_models=models)
    else:
        classes = list(range(1, cfg["data.num_classes"] + 1))
        chips = make_chip_dataset(seed, classes, cfg["data.chips_per_class"],
                                  cfg["data.chip_hw"])
        episodes = episodic_sampler(chips, cfg["nrmn.n_way"], cfg["nrmn.k_shot"],
                                    cfg["nrmn.queries"], seed)
        train_nrmn(episodes, models, num_episodes=cfg["nrmn.episodes"],
                   lr=cfg["nrmn.lr"], seed=seed)
        fit_openmax(models, chips)
        support = {cid: arr[:cfg["nrmn.k_shot"]] for cid, arr in chips.items()}
        bank = build_bank(models, support)
    return models, bank


def cmd_eval_episodes(cfg: RunConfig, seed: int, out: str) -> int:
    from .nrmn import evaluate_episodes
    models, _ = _load_or_train_nrmn(cfg, seed, out)
    classes = list(range(1, cfg["data.num_classes"] + 1))
    chips = make_chip_dataset(seed + 1, classes, cfg["data.chips_per_class"],
                              cfg["data.chip_hw"])
    episodes = episodic_sampler(chips, cfg["nrmn.n_way"], cfg["nrmn.k_shot"],
                                cfg["nrmn.queries"], seed + 1)
    acc = evaluate_episodes(episodes, models, num_episodes=cfg["eval.episodes"])
    report = MetricReport()
    report.add("T1A", acc, cfg["eval.episodes"])
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "eval-episodes.txt")
    with open(path, "w") as f:
        f.write(report.serialize())
    print(f"eval-episodes: T1A {acc:.4f} -> {path}")
    return 0


def cmd_eval_zeroshot(cfg: RunConfig, seed: int, out: str) -> int:
    ncfg = _nrmn_cfg(cfg)
    models = NrmnModels.create(seed, ncfg)
    num_classes = cfg["data.num_classes"]
    classes = list(range(1, num_classes + 1))
    seen = classes[:max(num_classes - 2, min(2, num_classes))]
    unseen = classes[len(seen):]
    chips = make_chip_dataset(seed, classes, cfg["data.chips_per_class"],
                              cfg["data.chip_hw"])
    attrs = {cid: synth.class_attributes(cid) for cid in classes}
    per_chip = synth.chip_attribute_dataset(seed, seen,
                                            cfg["data.chips_per_class"])
    train_zero_shot(models, {c: chips[c] for c in seen},
                    {c: attrs[c] for c in seen}, per_chip_attrs=per_chip,
                    steps=cfg["nrmn.zero_shot_steps"], lr=cfg["nrmn.lr"],
                    seed=seed)
    eval_chips = make_chip_dataset(seed + 1, classes, 20, cfg["data.chip_hw"])
    results = []
    for cid in classes:
        tag = "seen" if cid in seen else "unseen"
        pool = attrs if tag == "seen" else {c: attrs[c] for c in unseen}
        for chip in eval_chips[cid]:
            pred, _conf = zero_shot_predict(chip[None], pool, models,
                                            tau_unknown=0.0)
            results.append((pred, cid, tag))
    report = recognition_metrics(results)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "eval-zeroshot.txt")
    with open(path, "w") as f:
        f.write(report.serialize())
    print(f"eval-zeroshot: T1AU {report.get('T1AU')} T1AS {report.get('T1AS')} "
          f"T1HM {report.get('T1HM')} -> {path}")
    return 0


def _build_models(cfg: RunConfig, seed: int, out: str):
    ckpt = os.path.join(out, "checkpoints")
    dnss = DnssModel(seed, num_classes=2, prior_channels=2,
                     stage_channels=cfg["dnss.stage_channels"])
    nrmn = NrmnModels.create(seed, _nrmn_cfg(cfg))
    lfn = LfnModel(seed)
    bank = None
    have = lambda name: os.path.exists(os.path.join(ckpt, name, "manifest.txt"))
    if have("dnss"):
        load_pipeline(ckpt, dnss_model=dnss)
    if have("nrmn"):
        bank = load_pipeline(ckpt, nrmn_models=nrmn)
    if have("lfn"):
        load_pipeline(ckpt, lfn_model=lfn)
    if bank is None:
        bank = MemoryBank(capacity=cfg["nrmn.capacity"], decay=cfg["nrmn.decay"])
    return dnss, nrmn, bank, lfn


def cmd_run_pipeline(cfg: RunConfig, seed: int, out: str) -> int:
    dnss, nrmn, bank, lfn = _build_models(cfg, seed, out)
    spec = synth.random_scene(seed, height=cfg["data.height"],
                              width=cfg["data.width"],
                              max_step_px=min(cfg["data.max_step_px"], 3.0))
    seq = synth.generate_sequence(spec, cfg["data.frames_per_scene"])
    frames = [f.data for f in seq.frames]
    result = run_pipeline(frames, dnss, nrmn, bank, lfn,
                          threshold=cfg["dnss.threshold"],
                          min_area=cfg["dnss.min_area"],
                          consensus_lambda=cfg["lfn.consensus_lambda"])
    os.makedirs(out, exist_ok=True)
    dets = [d for per_frame in result.detections for d in per_frame]
    write_detections(os.path.join(out, "detections.txt"), dets)
    print(f"run-pipeline: {len(frames)} frames, {len(dets)} detections, "
          f"{result.fps:.2f} fps")
    return 0


def cmd_bench(cfg: RunConfig, seed: int, out: str) -> int:
    dnss, nrmn, bank, lfn = _build_models(cfg, seed, out)
    spec = synth.random_scene(seed, height=128, width=128, max_step_px=2.0)
    n = cfg["bench.frames"]
    seq = synth.generate_sequence(spec, max(n, 2))
    frames = [f.data for f in seq.frames[:n]]
    result = run_pipeline(frames, dnss, nrmn, bank, lfn, classify=len(bank) > 0)
    report = MetricReport()
    report.add("FPS", result.fps, len(frames))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "bench.txt")
    with open(path, "w") as f:
        f.write(report.serialize())
    line = f"bench: {result.fps:.3f} fps over {len(frames)} frames at 128x128"
    if result.fps < 10.0:
        line += " (below the 10 fps real-time target)"
    print(line + f" -> {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dnss": cmd_train_dnss,
    "train-nrmn": cmd_train_nrmn,
    "train-lfn": cmd_train_lfn,
    "eval-episodes": cmd_eval_episodes,
    "eval-zeroshot": cmd_eval_zeroshot,
    "run-pipeline": cmd_run_pipeline,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sfs")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except (ConfigParseError, OSError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    seed = args.seed if args.seed is not None else cfg["run.seed"]
    out = args.out if args.out is not None else cfg["run.out"]
    os.environ.setdefault("SFS_THREADS", str(_threads()))
    try:
        return COMMANDS[args.command](cfg, seed, out)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
