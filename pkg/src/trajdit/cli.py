"""``trajdit`` command line: corpus generation, curation, training, sampling,
evaluation, visualization and reporting.

Exit codes: 0 success, 2 validation error, 3 missing dependency, 1 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import archive, config as cfgmod
from .errors import MissingDependencyError, TrajDiTError, ValidationError

COMMANDS = ("gen-corpus", "curate", "train-vae", "train", "sample", "eval", "visualize", "report")


def _emit(summary):
    print(json.dumps(summary, sort_keys=True, default=str))


def _need(tree, key, hint):
    value = tree.get(key)
    if value in (None, ""):
        raise MissingDependencyError(f"missing {key}: {hint}")
    if not Path(value).exists():
        raise MissingDependencyError(f"{key} {value} not found: {hint}")
    return Path(value)


def _load_vae(path, key):
    from .motion_vae import load_vae

    return load_vae(_need({key: path}, key, f"train one with `trajdit train-vae`"))


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(tree, out):
    from .synthetic import CorpusConfig, generate_corpus, write_corpus

    cfg = CorpusConfig(**tree["corpus"])
    clips = generate_corpus(cfg)
    write_corpus(clips, out, cfg)
    return {"clips": len(clips), "out": str(out)}


def cmd_curate(tree, out):
    from .curation import CurationConfig, build_manifest

    corpus = _need(tree, "corpus", "run `trajdit gen-corpus` first")
    result = build_manifest(corpus, CurationConfig(**tree["curation"]), tree["seed"], out)
    return result["summary"]


def vae_corpus(clips, kind, maps, sigma, seed=0):
    """Training volumes for the video VAE (RGB frames) or the motion VAE
    (visualized dense flow and/or sparse trajectory maps)."""
    from .flowvis import flow_to_rgb
    from .synthetic import frames_float
    from .trajectory import Trajectory, dense_flow_map, rasterize_trajectories

    if kind == "video":
        return [frames_float(c) for c in clips]
    if kind != "motion":
        raise ValidationError(f"kind must be 'motion' or 'video', got {kind!r}")
    if maps not in ("dense", "sparse", "mixed"):
        raise ValidationError("maps must be 'dense', 'sparse' or 'mixed'")
    out = []
    for c in clips:
        if maps in ("dense", "mixed"):
            out.append(flow_to_rgb(dense_flow_map(c.flow)).astype(np.float32))
        if maps in ("sparse", "mixed"):
            trajs = [Trajectory(o["track"], o["object_id"]) for o in c.objects]
            out.append(flow_to_rgb(rasterize_trajectories(trajs, c.dims, sigma)).astype(np.float32))
    return out


def cmd_train_vae(tree, out):
    from .motion_vae import MotionVAE, VaeTrainConfig, save_vae, train_vae
    from .synthetic import read_corpus

    corpus = _need(tree, "corpus", "run `trajdit gen-corpus` first")
    train_cfg = VaeTrainConfig(**tree["train"])
    clips = read_corpus(corpus)
    if tree["num_clips"] is not None:
        clips = clips[: tree["num_clips"]]
    volumes = vae_corpus(clips, tree["kind"], tree["maps"], tree["sigma"])
    vae = MotionVAE(seed=train_cfg.seed, **tree["vae"])
    log_path = out / "vae_log.jsonl"
    lines = []

    def log(step, total, recon, kl):
        lines.append(json.dumps({"step": step, "loss": total, "recon": recon, "kl": kl}, sort_keys=True))

    result = train_vae(volumes, train_cfg, vae, log)
    archive.atomic_write_bytes(log_path, ("\n".join(lines) + "\n").encode())
    save_vae(out / f"{tree['kind']}_vae.npz", result.vae, train_cfg, {"trained_on": tree["kind"]})
    last = result.losses[-1] if result.losses else None
    return {"checkpoint": str(out / f"{tree['kind']}_vae.npz"), "final_loss": last}


def cmd_train(tree, out):
    from .synthetic import read_corpus
    from .training import TrainConfig, Trainer, encode_clips

    corpus = _need(tree, "corpus", "run `trajdit gen-corpus` first")
    motion_vae = _load_vae(tree["motion_vae"], "motion_vae")
    video_vae = _load_vae(tree["video_vae"], "video_vae")
    cfg = TrainConfig(**tree["train"])
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    trainer = Trainer(cfg, motion_vae, log_path=log_path)
    data, rejected = encode_clips(read_corpus(corpus), video_vae, trainer.buckets)
    ckpt = out / "model.npz"
    history = trainer.run(data, checkpoint_path=ckpt)
    trainer.save(ckpt)
    if history:
        from .plotting import plot_loss_curve

        plot_loss_curve(history, out / "loss.png")
    return {"checkpoint": str(ckpt), "steps": trainer.step, "phase": trainer.phase,
            "rejected_clips": len(rejected),
            "final_loss": history[-1]["loss"] if history else None}


def _generator(tree):
    from .diffusion import DiffusionSchedule
    from .inference import Generator
    from .training import load_checkpoint

    path = _need(tree, "checkpoint", "train one with `trajdit train`")
    motion_vae = _load_vae(tree["motion_vae"], "motion_vae")
    video_vae = _load_vae(tree["video_vae"], "video_vae")
    model, extractor, cfg, _ = load_checkpoint(path)
    return Generator(model, extractor, motion_vae, video_vae, DiffusionSchedule(**cfg.schedule),
                     cfg.curriculum.sigma), cfg


def cmd_sample(tree, out):
    from .motion_vae import check_volume
    from .plotting import save_video_frames
    from .trajectory import load_trajectory_file

    dims = (tree["frames"], tree["height"], tree["width"])
    check_volume(torch.zeros(1, *dims, 3))
    trajs = None
    if tree["trajectory"]:
        path = Path(tree["trajectory"])
        if not path.exists():
            raise ValidationError(f"trajectory file {path} not found")
        trajs = load_trajectory_file(path, dims)
        if not trajs:
            raise ValidationError(f"{path} holds no trajectories")
    gen, _ = _generator(tree)
    z, video = gen.video(tree["caption"], dims, trajs, seed=tree["seed"], steps=tree["steps"],
                         guidance_scale=tree["guidance_scale"])
    archive.save_archive(out / "sample.npz", {"latent": z[0].numpy(), "video": video},
                         {"kind": "sample", "caption": tree["caption"],
                          "conditioned": trajs is not None})
    save_video_frames(video, out / "frames")
    return {"sample": str(out / "sample.npz"), "conditioned": trajs is not None,
            "frames": len(video)}


def heldout_cases(corpus_dir, num_cases):
    from .synthetic import read_corpus
    from .trajectory import Trajectory

    clips = read_corpus(corpus_dir)[:num_cases]
    if len(clips) < num_cases:
        raise ValidationError(f"{corpus_dir} has {len(clips)} clips, {num_cases} requested")
    return [(Trajectory(c.objects[0]["track"], c.objects[0]["object_id"]), c.caption, c.dims)
            for c in clips]


def cmd_eval(tree, out):
    from .evaluation import run_record, save_run_record
    from .inference import heldout_errors

    corpus = _need(tree, "corpus", "generate a held-out corpus with `trajdit gen-corpus`")
    cases = heldout_cases(corpus, tree["num_cases"])
    gen, cfg = _generator(tree)
    cond, uncond = heldout_errors(gen, cases, tree["seed"], tree["steps"], tree["guidance_scale"],
                                  tree["background_level"])
    metrics = {
        "traj_error": float(cond.mean()),
        "traj_error_unconditioned": float(uncond.mean()),
        "per_case": [float(v) for v in cond],
        "per_case_unconditioned": [float(v) for v in uncond],
        "by_duration": [{"num_frames": cases[0][2][0], "height": cases[0][2][1],
                         "traj_error": float(cond.mean())}],
    }
    record = run_record({"ablation": tree["ablation"], "train": cfg.to_dict(),
                         "eval": {k: v for k, v in tree.items() if k != "ablation"}},
                        metrics, provenance=str(tree["checkpoint"]))
    save_run_record(out / "run.json", record)
    return {"traj_error": metrics["traj_error"],
            "traj_error_unconditioned": metrics["traj_error_unconditioned"],
            "run": str(out / "run.json")}


def cmd_visualize(tree, out):
    from .plotting import plot_trajectory_overlay, save_flow_frames
    from .trajectory import load_trajectory_file, rasterize_trajectories

    src = tree["input"]
    if not src or not Path(src).exists():
        raise ValidationError(f"visualize input {src!r} not found")
    src = Path(src)
    dims = (tree["frames"], tree["height"], tree["width"])
    if src.suffix == ".npy":
        maps = np.load(src)
        if maps.ndim != 4 or maps.shape[-1] != 2:
            raise ValidationError(f"{src}: flow must be (L, H, W, 2), got {maps.shape}")
        files = save_flow_frames(maps, out)
        return {"frames": len(files)}
    trajs = load_trajectory_file(src, dims)
    maps = rasterize_trajectories(trajs, dims, tree["sigma"])
    files = save_flow_frames(maps, out)
    markers = plot_trajectory_overlay(trajs, out / "trajectories.png", dims)
    return {"frames": len(files), "markers": markers}


def cmd_report(tree, out):
    from .evaluation import load_run_records, write_report

    paths = [Path(p) for p in tree["runs"]]
    missing = [str(p) for p in paths if not p.exists()]
    if not paths or missing:
        raise MissingDependencyError(f"run records not found: {missing or 'none given'}; "
                                     "produce them with `trajdit eval`")
    write_report(load_run_records(paths), out, figures=tree["figures"])
    print((out / "report.txt").read_text())
    return {"report": str(out / "report.txt")}


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "curate": cmd_curate,
    "train-vae": cmd_train_vae,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "report": cmd_report,
}

# flat flags mapped onto config keys
FLAGS = {
    "gen-corpus": {"--seed": "corpus.seed", "--num-clips": "corpus.num_clips"},
    "curate": {"--corpus": "corpus", "--seed": "seed"},
    "train-vae": {"--corpus": "corpus", "--kind": "kind", "--steps": "train.steps",
                  "--seed": "train.seed"},
    "train": {"--corpus": "corpus", "--motion-vae": "motion_vae", "--video-vae": "video_vae",
              "--max-steps": "train.max_steps", "--seed": "train.seed"},
    "sample": {"--checkpoint": "checkpoint", "--motion-vae": "motion_vae",
               "--video-vae": "video_vae", "--trajectory": "trajectory", "--caption": "caption",
               "--seed": "seed", "--steps": "steps"},
    "eval": {"--checkpoint": "checkpoint", "--motion-vae": "motion_vae",
             "--video-vae": "video_vae", "--corpus": "corpus", "--num-cases": "num_cases",
             "--seed": "seed", "--steps": "steps"},
    "visualize": {"--input": "input", "--frames": "frames", "--height": "height",
                  "--width": "width"},
    "report": {},
}


def build_parser():
    parser = argparse.ArgumentParser(prog="trajdit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--out", help=f"output directory (default ${cfgmod.OUTPUT_ROOT_ENV}/{name})")
        for flag, key in FLAGS[name].items():
            p.add_argument(flag, dest="flag_" + key.replace(".", "__"), help=f"sets {key}")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run record files")
    return parser


def resolve_args(args):
    overrides = list(args.set)
    for attr, value in sorted(vars(args).items()):
        if attr.startswith("flag_") and value is not None:
            overrides.append(f"{attr[5:].replace('__', '.')}={value}")
    tree = cfgmod.resolve(args.command, args.config, overrides)
    if args.command == "report" and args.runs:
        tree["runs"] = list(args.runs)
    return tree


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        tree = resolve_args(args)
        out = cfgmod.output_dir(args.command, args.out)
        cfgmod.write_snapshot(out, args.command, tree)
        torch.set_num_threads(1)
        summary = HANDLERS[args.command](tree, out)
        _emit({"command": args.command, "status": "ok", **summary})
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 3
    except TrajDiTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - last-resort handler maps to exit status 1
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
